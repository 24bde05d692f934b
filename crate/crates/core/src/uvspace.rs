//! UV-space consolidation: baking surface positions into the atlas,
//! backprojecting per-view material maps, averaging views and filling holes.
//!
//! Texel `(x, y)` of an `R x R` atlas covers UV `u = (x + 0.5) / R`,
//! `v = 1 - (y + 0.5) / R`; row 0 is the top of the texture (`v = 1`).

use std::path::{Path, PathBuf};
use std::process::Command;

use glam::{DVec2, DVec3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Projection};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::imageio::{self, PngDepth, Transfer};
use crate::mesh::TriMesh;
use crate::raster::{GBuffer, ScreenTriangle, SetupError};
use crate::shading::MaterialMaps;

/// Surface geometry baked into texture space.
#[derive(Debug, Clone, PartialEq)]
pub struct UvAtlas {
    pub resolution: usize,
    pub position: ImageF,
    pub normal: ImageF,
    pub valid: Vec<bool>,
    /// Triangles whose UV footprint was empty or degenerate.
    pub degenerate: usize,
    /// Texels claimed by more than one triangle (last write wins).
    pub overlap_texels: usize,
}

impl UvAtlas {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.valid.len() as f64
    }

    pub fn position_at(&self, x: usize, y: usize) -> DVec3 {
        let p = self.position.pixel(x, y);
        DVec3::new(p[0], p[1], p[2])
    }

    pub fn normal_at(&self, x: usize, y: usize) -> DVec3 {
        let p = self.normal.pixel(x, y);
        DVec3::new(p[0], p[1], p[2])
    }

    pub fn mask_image(&self) -> ImageF {
        let data = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        ImageF::from_vec(self.resolution, self.resolution, 1, data).expect("mask shape")
    }
}

/// Continuous texel coordinates of a UV point.
#[inline]
pub fn uv_to_texel(uv: DVec2, resolution: usize) -> DVec2 {
    let r = resolution as f64;
    DVec2::new(uv.x * r, (1.0 - uv.y) * r)
}

/// Rasterizes every triangle in UV space and stores interpolated world
/// positions and normals.
pub fn bake_uv_geometry(mesh: &TriMesh, resolution: usize) -> Result<UvAtlas> {
    mesh.require_uvs()?;
    if resolution == 0 {
        return Err(Error::InvalidArgument("atlas resolution must be positive".into()));
    }
    let r = resolution;
    let mut degenerate = 0;
    let mut prepared = Vec::with_capacity(mesh.triangles.len());
    for (i, t) in mesh.triangles.iter().enumerate() {
        let pts = mesh.corner_uvs(t).map(|uv| uv_to_texel(uv, r));
        match ScreenTriangle::new(pts, r, r) {
            Ok(tri) => prepared.push((i, tri)),
            Err(SetupError::Degenerate | SetupError::OutOfRange) => degenerate += 1,
        }
    }

    let mut position = ImageF::zeros(r, r, 3)?;
    let mut normal = ImageF::zeros(r, r, 3)?;
    let mut writes = vec![0u32; r * r];
    position
        .data_mut()
        .par_chunks_mut(r * 3)
        .zip(normal.data_mut().par_chunks_mut(r * 3))
        .zip(writes.par_chunks_mut(r))
        .enumerate()
        .for_each(|(y, ((prow, nrow), wrow))| {
            for (i, tri) in &prepared {
                if !tri.rows().contains(&y) {
                    continue;
                }
                let t = &mesh.triangles[*i];
                let ps = mesh.corner_positions(t);
                let ns = mesh.corner_normals(t);
                tri.for_each_covered(y..y + 1, |x, _, b| {
                    let p = ps[0] * b[0] + ps[1] * b[1] + ps[2] * b[2];
                    let n = (ns[0] * b[0] + ns[1] * b[1] + ns[2] * b[2])
                        .try_normalize()
                        .unwrap_or_else(|| (ps[1] - ps[0]).cross(ps[2] - ps[0]).normalize_or_zero());
                    prow[x * 3..x * 3 + 3].copy_from_slice(&p.to_array());
                    nrow[x * 3..x * 3 + 3].copy_from_slice(&n.to_array());
                    wrow[x] += 1;
                });
            }
        });
    let overlap_texels = writes.iter().filter(|&&w| w > 1).count();
    if overlap_texels > 0 {
        log::warn!("{overlap_texels} atlas texels are covered by overlapping UV islands");
    }
    Ok(UvAtlas {
        resolution: r,
        position,
        normal,
        valid: writes.iter().map(|&w| w > 0).collect(),
        degenerate,
        overlap_texels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackprojectOptions {
    /// Depth-test slack in world units.
    pub depth_bias: f64,
    /// Reject texels whose normal faces the camera at a cosine below this.
    pub min_cos: Option<f64>,
    /// Extra slack in multiples of the surface's depth change per pixel.
    pub slope_bias: f64,
}

impl Default for BackprojectOptions {
    fn default() -> Self {
        Self {
            depth_bias: 1e-3,
            min_cos: None,
            slope_bias: 1.0,
        }
    }
}

impl BackprojectOptions {
    /// Depth bias of `1e-3` times the mesh bounding radius.
    pub fn for_mesh(mesh: &TriMesh) -> Self {
        Self {
            depth_bias: 1e-3 * mesh.bounding_sphere().radius,
            ..Self::default()
        }
    }
}

/// One view's contribution in texture space. Unseen texels hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPartial {
    pub albedo: ImageF,
    pub rm: ImageF,
    pub seen: Vec<bool>,
}

impl ViewPartial {
    pub fn empty(resolution: usize) -> Result<Self> {
        Ok(Self {
            albedo: ImageF::zeros(resolution, resolution, 3)?,
            rm: ImageF::zeros(resolution, resolution, 3)?,
            seen: vec![false; resolution * resolution],
        })
    }

    pub fn resolution(&self) -> usize {
        self.albedo.width()
    }

    pub fn seen_count(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }
}

/// Covered G-buffer pixel nearest to continuous pixel coordinates, looking
/// at most one pixel away.
fn nearest_covered(gbuf: &GBuffer, px: f64, py: f64) -> Option<(usize, usize)> {
    let (cx, cy) = (px.floor() as i64, py.floor() as i64);
    let mut best: Option<((usize, usize), f64)> = None;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (x, y) = (cx + dx, cy + dy);
            if x < 0 || y < 0 || x >= gbuf.width as i64 || y >= gbuf.height as i64 {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            if !gbuf.covered(x, y) {
                continue;
            }
            let d = (x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some(((x, y), d));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Depth of the visible surface along the ray through `(px, py)`,
/// extrapolating the tangent plane of the nearest covered pixel, and the
/// depth change across one pixel of that plane.
fn visible_depth(gbuf: &GBuffer, camera: &Camera, px: f64, py: f64) -> Option<(f64, f64)> {
    let (x, y) = nearest_covered(gbuf, px, py)?;
    let q = gbuf.position_at(x, y);
    let n = gbuf.normal_at(x, y);
    let (o, d) = camera.ray(px, py);
    let fwd = camera.frame().forward;
    let dn = d.dot(n);
    let depth = gbuf.depth.get(x, y, 0);
    let tan = ((1.0 - dn * dn).max(0.0).sqrt() / dn.abs().max(1e-3)).min(MAX_SLOPE);
    let slope = camera.pixel_size_at(depth) * tan;
    if dn.abs() < 1e-3 {
        return Some((depth, slope));
    }
    let t = (q - o).dot(n) / dn;
    Some(((o + d * t - camera.position).dot(fwd), slope))
}

const MAX_SLOPE: f64 = 10.0;

/// Projects each valid texel into the view; texels passing the depth test
/// take mask-aware bilinear samples of the view's material maps.
pub fn backproject_view(
    atlas: &UvAtlas,
    gbuf: &GBuffer,
    camera: &Camera,
    view: &MaterialMaps,
    opts: &BackprojectOptions,
) -> Result<ViewPartial> {
    gbuf.check_shape(camera.width, camera.height)?;
    gbuf.check_shape(view.width(), view.height())?;
    let r = atlas.resolution;
    let mut out = ViewPartial::empty(r)?;
    out.albedo
        .data_mut()
        .par_chunks_mut(r * 3)
        .zip(out.rm.data_mut().par_chunks_mut(r * 3))
        .zip(out.seen.par_chunks_mut(r))
        .enumerate()
        .for_each(|(y, ((arow, rmrow), srow))| {
            for x in 0..r {
                if !atlas.valid[y * r + x] {
                    continue;
                }
                let p = atlas.position_at(x, y);
                if let Some(c) = opts.min_cos {
                    if atlas.normal_at(x, y).dot(camera.view_vector(p)) < c {
                        continue;
                    }
                }
                let proj = camera.project(p);
                if camera.mode == Projection::Persp && proj.depth <= 0.0 {
                    continue;
                }
                if !(proj.px >= 0.0 && proj.py >= 0.0 && proj.px < gbuf.width as f64 && proj.py < gbuf.height as f64) {
                    continue;
                }
                let Some((surface, slope)) = visible_depth(gbuf, camera, proj.px, proj.py) else {
                    continue;
                };
                if proj.depth > surface + opts.depth_bias + opts.slope_bias * slope {
                    continue;
                }
                let mut a = [0.0; 3];
                let mut m = [0.0; 3];
                if !view.albedo.sample_bilinear_masked(&gbuf.mask, proj.px, proj.py, &mut a)
                    || !view.rm.sample_bilinear_masked(&gbuf.mask, proj.px, proj.py, &mut m)
                {
                    continue;
                }
                arow[x * 3..x * 3 + 3].copy_from_slice(&a);
                rmrow[x * 3..x * 3 + 3].copy_from_slice(&m);
                srow[x] = true;
            }
        });
    Ok(out)
}

/// Denominator used when averaging views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BlendMode {
    /// `sum / (M + epsilon)`.
    Literal { epsilon: f64 },
    /// `sum / max(M, 1)`.
    Debiased,
}

impl Default for BlendMode {
    fn default() -> Self {
        BlendMode::Literal { epsilon: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blended {
    pub albedo: ImageF,
    pub rm: ImageF,
    /// Number of views that saw each texel.
    pub count: Vec<u32>,
}

impl Blended {
    pub fn covered(&self) -> Vec<bool> {
        self.count.iter().map(|&c| c > 0).collect()
    }
}

/// Per-texel average over views. Contributions are summed in sorted order,
/// so the result does not depend on the order of `partials`.
pub fn blend_views(partials: &[ViewPartial], mode: BlendMode) -> Result<Blended> {
    let first = partials
        .first()
        .ok_or_else(|| Error::InvalidArgument("no views to blend".into()))?;
    let r = first.resolution();
    for p in partials {
        if p.resolution() != r || p.seen.len() != r * r {
            return Err(Error::ShapeMismatch("view partials differ in resolution".into()));
        }
    }
    if let BlendMode::Literal { epsilon } = mode {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument("blend epsilon must be positive".into()));
        }
    }
    let mut out = Blended {
        albedo: ImageF::zeros(r, r, 3)?,
        rm: ImageF::zeros(r, r, 3)?,
        count: vec![0; r * r],
    };
    out.albedo
        .data_mut()
        .par_chunks_mut(r * 3)
        .zip(out.rm.data_mut().par_chunks_mut(r * 3))
        .zip(out.count.par_chunks_mut(r))
        .enumerate()
        .for_each(|(y, ((arow, rmrow), crow))| {
            let mut vals = Vec::with_capacity(partials.len());
            for x in 0..r {
                let i = y * r + x;
                let m = partials.iter().filter(|p| p.seen[i]).count() as u32;
                crow[x] = m;
                let denom = match mode {
                    BlendMode::Literal { epsilon } => m as f64 + epsilon,
                    BlendMode::Debiased => m.max(1) as f64,
                };
                for (row, pick) in [
                    (&mut *arow, (|p: &ViewPartial| &p.albedo) as fn(&ViewPartial) -> &ImageF),
                    (&mut *rmrow, |p: &ViewPartial| &p.rm),
                ] {
                    for c in 0..3 {
                        vals.clear();
                        vals.extend(partials.iter().map(|p| pick(p).data()[i * 3 + c]));
                        vals.sort_by(f64::total_cmp);
                        row[x * 3 + c] = vals.iter().sum::<f64>() / denom;
                    }
                }
            }
        });
    Ok(out)
}

/// Share of valid texels that no view saw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub valid_texels: usize,
    pub covered_texels: usize,
    pub coverage: f64,
    pub missing_fraction: f64,
    /// Set when more than half of the surface is missing.
    pub flagged: bool,
}

pub fn coverage_report(atlas: &UvAtlas, blended: &Blended) -> CoverageReport {
    let valid_texels = atlas.valid_count();
    let covered_texels = atlas.valid.iter().zip(&blended.count).filter(|(&v, &c)| v && c > 0).count();
    let coverage = if valid_texels == 0 {
        0.0
    } else {
        covered_texels as f64 / valid_texels as f64
    };
    CoverageReport {
        valid_texels,
        covered_texels,
        coverage,
        missing_fraction: 1.0 - coverage,
        flagged: 1.0 - coverage > 0.5,
    }
}

/// A partial texture map with its known-texel mask and surface positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineRequest {
    pub material: ImageF,
    pub mask: Vec<bool>,
    pub position: ImageF,
}

impl RefineRequest {
    pub fn new(material: ImageF, mask: Vec<bool>, position: ImageF) -> Result<Self> {
        if mask.len() != material.pixel_count() {
            return Err(Error::ShapeMismatch("refine mask does not match the material map".into()));
        }
        if (position.width(), position.height()) != (material.width(), material.height()) {
            return Err(Error::ShapeMismatch("refine position map does not match the material map".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("refine mask is empty".into()));
        }
        Ok(Self { material, mask, position })
    }
}

/// Completes a partial UV map.
pub trait Refiner {
    fn refine(&mut self, req: &RefineRequest) -> Result<ImageF>;
}

/// Multiresolution hole filling: masked texels are averaged down a
/// pyramid, then holes take bilinear values from the next coarser level.
#[derive(Debug, Clone, Copy, Default)]
pub struct PullPush;

impl Refiner for PullPush {
    fn refine(&mut self, req: &RefineRequest) -> Result<ImageF> {
        pull_push(&req.material, &req.mask)
    }
}

pub fn pull_push(material: &ImageF, mask: &[bool]) -> Result<ImageF> {
    if mask.len() != material.pixel_count() {
        return Err(Error::ShapeMismatch("mask does not match image".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("pull-push needs at least one known texel".into()));
    }
    let c = material.channels();
    let mut levels = vec![(material.clone(), mask.to_vec())];
    while {
        let (img, _) = levels.last().expect("nonempty");
        img.width() > 1 || img.height() > 1
    } {
        let (img, known) = levels.last().expect("nonempty");
        let (w, h) = (img.width(), img.height());
        let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
        let mut coarse = ImageF::zeros(cw, ch, c)?;
        let mut ck = vec![false; cw * ch];
        for y in 0..ch {
            for x in 0..cw {
                let mut acc = vec![0.0; c];
                let mut n = 0usize;
                for (sx, sy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (fx, fy) = (2 * x + sx, 2 * y + sy);
                    if fx < w && fy < h && known[fy * w + fx] {
                        acc.iter_mut().zip(img.pixel(fx, fy)).for_each(|(a, v)| *a += v);
                        n += 1;
                    }
                }
                if n > 0 {
                    let px = coarse.pixel_mut(x, y);
                    px.iter_mut().zip(&acc).for_each(|(p, a)| *p = a / n as f64);
                    ck[y * cw + x] = true;
                }
            }
        }
        levels.push((coarse, ck));
    }
    for k in (0..levels.len() - 1).rev() {
        let (fine, coarse) = levels.split_at_mut(k + 1);
        let coarser = &coarse[0].0;
        let (img, known) = &mut fine[k];
        let (w, h) = (img.width(), img.height());
        let (sx, sy) = (coarser.width() as f64 / w as f64, coarser.height() as f64 / h as f64);
        let mut buf = vec![0.0; c];
        for y in 0..h {
            for x in 0..w {
                if known[y * w + x] {
                    continue;
                }
                coarser.sample_bilinear((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy, &mut buf);
                img.pixel_mut(x, y).copy_from_slice(&buf);
            }
        }
        known.iter_mut().for_each(|k| *k = true);
    }
    Ok(levels.swap_remove(0).0)
}

/// File-based refinement: writes `<stem>.material.pfm`, `<stem>.mask.png`
/// and `<stem>.position.pfm`, runs `program args... <stem>` and reads back
/// `<stem>.refined.pfm`.
#[derive(Debug, Clone)]
pub struct ExternalRefiner {
    pub dir: PathBuf,
    pub program: PathBuf,
    pub args: Vec<String>,
    calls: usize,
}

impl ExternalRefiner {
    pub fn new(dir: impl Into<PathBuf>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            dir: dir.into(),
            program: program.into(),
            args,
            calls: 0,
        }
    }
}

/// Paths of the request triple and the expected response for `stem`.
pub fn refine_paths(stem: &Path) -> [PathBuf; 4] {
    let with = |s: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(s);
        PathBuf::from(p)
    };
    [
        with(".material.pfm"),
        with(".mask.png"),
        with(".position.pfm"),
        with(".refined.pfm"),
    ]
}

pub fn write_refine_request(req: &RefineRequest, stem: &Path) -> Result<()> {
    let [material, mask, position, _] = refine_paths(stem);
    imageio::write_pfm(&req.material, material)?;
    let m = ImageF::from_vec(
        req.material.width(),
        req.material.height(),
        1,
        req.mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
    )?;
    imageio::write_png(&m, mask, PngDepth::Eight, Transfer::Linear)?;
    imageio::write_pfm(&req.position, position)
}

pub fn read_refine_request(stem: &Path) -> Result<RefineRequest> {
    let [material, mask, position, _] = refine_paths(stem);
    let material = imageio::read_pfm(material)?;
    let mask = imageio::read_png(mask, Transfer::Linear)?;
    let mask = (0..mask.pixel_count()).map(|i| mask.data()[i * mask.channels()] > 0.5).collect();
    RefineRequest::new(material, mask, imageio::read_pfm(position)?)
}

impl Refiner for ExternalRefiner {
    fn refine(&mut self, req: &RefineRequest) -> Result<ImageF> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let stem = self.dir.join(format!("refine_{:02}", self.calls));
        self.calls += 1;
        write_refine_request(req, &stem)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&stem)
            .status()
            .map_err(|e| Error::io(&self.program, e))?;
        if !status.success() {
            return Err(Error::Model(format!("external refiner exited with {status}")));
        }
        let out = imageio::read_pfm(&refine_paths(&stem)[3])?;
        if out.dims() != req.material.dims() {
            return Err(Error::ShapeMismatch(format!(
                "refined map {:?} differs from request {:?}",
                out.dims(),
                req.material.dims()
            )));
        }
        Ok(out)
    }
}

/// Samples UV-space material maps at each covered pixel's interpolated UV;
/// background pixels stay zero. Only valid atlas texels contribute.
pub fn sample_uv_materials(gbuf: &GBuffer, uv_maps: &MaterialMaps, valid: &[bool]) -> Result<MaterialMaps> {
    if uv_maps.width() != uv_maps.height() || valid.len() != uv_maps.width() * uv_maps.height() {
        return Err(Error::ShapeMismatch("UV material maps must be square and match the atlas".into()));
    }
    let r = uv_maps.width();
    let (w, h) = (gbuf.width, gbuf.height);
    let mut albedo = ImageF::zeros(w, h, 3)?;
    let mut rm = ImageF::zeros(w, h, 3)?;
    albedo
        .data_mut()
        .par_chunks_mut(w * 3)
        .zip(rm.data_mut().par_chunks_mut(w * 3))
        .enumerate()
        .for_each(|(y, (arow, rmrow))| {
            for x in 0..w {
                if !gbuf.covered(x, y) {
                    continue;
                }
                let uv = gbuf.uv.pixel(x, y);
                let t = uv_to_texel(DVec2::new(uv[0], uv[1]), r);
                let (a, m) = (&mut arow[x * 3..x * 3 + 3], &mut rmrow[x * 3..x * 3 + 3]);
                if !uv_maps.albedo.sample_bilinear_masked(valid, t.x, t.y, a) {
                    uv_maps.albedo.sample_bilinear(t.x, t.y, a);
                }
                if !uv_maps.rm.sample_bilinear_masked(valid, t.x, t.y, m) {
                    uv_maps.rm.sample_bilinear(t.x, t.y, m);
                }
            }
        });
    MaterialMaps::new(albedo, rm)
}
