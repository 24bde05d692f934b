use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::imageio::{self, PngDepth, Transfer};

use super::PipelineOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Albedo,
    Rm,
    Mask,
    Position,
    Report,
    /// Rendered radiance or other image data.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub role: Role,
    /// Hex digest of the file bytes; absent for the report, which holds
    /// wall times.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Channel order of `rm` files.
    pub rm_channels: String,
    pub files: Vec<ManifestEntry>,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn png_bytes(img: &ImageF, transfer: Transfer, dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    imageio::write_png(img, &path, PngDepth::Sixteen, transfer)?;
    std::fs::read(&path).map_err(|e| Error::io(&path, e))
}

/// Entry for a file already written to `dir`. Reports are not hashed.
pub fn file_entry(dir: impl AsRef<Path>, file: &str, role: Role) -> Result<ManifestEntry> {
    let path = dir.as_ref().join(file);
    let sha256 = match role {
        Role::Report => None,
        _ => Some(digest(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)),
    };
    Ok(ManifestEntry {
        file: file.into(),
        role,
        sha256,
    })
}

/// Writes `manifest.json` listing `files`.
pub fn write_manifest(dir: impl AsRef<Path>, files: Vec<ManifestEntry>) -> Result<Manifest> {
    let manifest = Manifest {
        version: 1,
        rm_channels: RM_CHANNELS.into(),
        files,
    };
    put(dir.as_ref(), "manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

const RM_CHANNELS: &str = "roughness,metallic,0";

/// Writes the refined UV maps, visibility mask, atlas positions, report
/// and `manifest.json` into `dir`.
pub fn write_outputs(out: &PipelineOutput, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut add = |file: &str, role: Role, bytes: Option<&[u8]>| {
        files.push(ManifestEntry {
            file: file.into(),
            role,
            sha256: bytes.map(digest),
        })
    };

    let pfm = |img: &ImageF, name: &str| -> Result<Vec<u8>> {
        let bytes = imageio::encode_pfm(img)?;
        put(dir, name, &bytes)?;
        Ok(bytes)
    };
    add("albedo.pfm", Role::Albedo, Some(&pfm(&out.materials.albedo, "albedo.pfm")?));
    add(
        "albedo.png",
        Role::Albedo,
        Some(&png_bytes(&out.materials.albedo, Transfer::Srgb, dir, "albedo.png")?),
    );
    add("rm.pfm", Role::Rm, Some(&pfm(&out.materials.rm, "rm.pfm")?));
    add(
        "rm.png",
        Role::Rm,
        Some(&png_bytes(&out.materials.rm, Transfer::Linear, dir, "rm.png")?),
    );
    let visible: Vec<f64> = out.visible().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let r = out.atlas.resolution;
    let mask = ImageF::from_vec(r, r, 1, visible)?;
    add("mask.png", Role::Mask, Some(&png_bytes(&mask, Transfer::Linear, dir, "mask.png")?));
    add("position.pfm", Role::Position, Some(&pfm(&out.atlas.position, "position.pfm")?));
    put(dir, "report.json", serde_json::to_string_pretty(&out.report)?.as_bytes())?;
    add("report.json", Role::Report, None);

    write_manifest(dir, files)
}
