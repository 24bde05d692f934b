use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BrdfLut, PrefilteredEnv};
use crate::error::{Error, Result};
use crate::imageio::{read_pfm, write_pfm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecularEntry {
    pub file: String,
    pub level: usize,
    pub roughness: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutEntry {
    pub file: String,
    pub size: usize,
    pub samples: usize,
    /// Channel layout of the stored PFM.
    pub channels: String,
}

/// `manifest.json` of a prefiltered-environment cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub irradiance: MapEntry,
    pub specular: Vec<SpecularEntry>,
    pub brdf_lut: LutEntry,
}

pub fn save_prefiltered(pre: &PrefilteredEnv, dir: impl AsRef<Path>) -> Result<CacheManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pfm(&pre.irradiance, dir.join("irradiance.pfm"))?;
    let mut specular = Vec::with_capacity(pre.specular.len());
    for (level, img) in pre.specular.iter().enumerate() {
        let file = format!("specular_{level:02}.pfm");
        write_pfm(img, dir.join(&file))?;
        specular.push(SpecularEntry {
            file,
            level,
            roughness: pre.roughness_of_level(level),
            width: img.width(),
            height: img.height(),
        });
    }
    write_pfm(&pre.lut.to_image(), dir.join("brdf_lut.pfm"))?;
    let manifest = CacheManifest {
        version: 1,
        irradiance: MapEntry {
            file: "irradiance.pfm".into(),
            width: pre.irradiance.width(),
            height: pre.irradiance.height(),
        },
        specular,
        brdf_lut: LutEntry {
            file: "brdf_lut.pfm".into(),
            size: pre.lut.size(),
            samples: pre.lut.samples(),
            channels: "A,B,0".into(),
        },
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_prefiltered(dir: impl AsRef<Path>) -> Result<PrefilteredEnv> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CacheManifest = serde_json::from_str(&text)?;
    if manifest.specular.len() < 2 {
        return Err(Error::InvalidArgument("cache needs at least two specular levels".into()));
    }
    let irradiance = read_pfm(dir.join(&manifest.irradiance.file))?;
    let mut levels = manifest.specular.clone();
    levels.sort_by_key(|e| e.level);
    let specular = levels
        .iter()
        .map(|e| read_pfm(dir.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    let lut = BrdfLut::from_image(&read_pfm(dir.join(&manifest.brdf_lut.file))?, manifest.brdf_lut.samples)?;
    Ok(PrefilteredEnv {
        irradiance,
        specular,
        lut,
    })
}

#[cfg(test)]
mod tests {
    use glam::DVec3;

    use super::*;
    use crate::envlight::{EnvMap, PrefilterConfig, SpecularConfig};

    #[test]
    fn cache_round_trip() {
        let env = EnvMap::from_fn(16, |d| DVec3::new(1.0 + d.x, 0.5, 0.25 + d.y.abs())).unwrap();
        let cfg = PrefilterConfig {
            irradiance_height: 8,
            specular: SpecularConfig {
                n_mips: 3,
                samples_per_texel: 32,
                ..Default::default()
            },
            lut_size: 16,
            lut_samples: 32,
        };
        let pre = PrefilteredEnv::build(&env, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_prefiltered(&pre, dir.path()).unwrap();
        assert_eq!(manifest.specular.len(), 3);
        assert_eq!(manifest.specular[2].roughness, 1.0);
        let back = load_prefiltered(dir.path()).unwrap();
        assert_eq!(back.specular.len(), 3);
        for (a, b) in pre.irradiance.data().iter().zip(back.irradiance.data()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        let s = back.lut.lookup(0.5, 0.5);
        let t = pre.lut.lookup(0.5, 0.5);
        assert!((s.a - t.a).abs() < 1e-6);
    }
}
