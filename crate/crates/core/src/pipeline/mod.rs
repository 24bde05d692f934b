//! Six-view decomposition of a textured object into UV material maps.
//!
//! Stages: bake the UV atlas, render six axis-aligned views, decompose all
//! views in one batch, backproject, blend, then refine albedo and RM.

mod decomposer;
mod evaluate;
mod output;
pub mod synthetic;

use std::time::Instant;

use glam::DVec3;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Projection};
use crate::envlight::PrefilteredEnv;
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::mesh::TriMesh;
use crate::raster::{rasterize_gbuffer, GBuffer};
use crate::shading::{render_view, MaterialMaps};
use crate::uvspace::{
    backproject_view, bake_uv_geometry, blend_views, coverage_report, sample_uv_materials, BackprojectOptions,
    BlendMode, Blended, CoverageReport, RefineRequest, Refiner, UvAtlas,
};

pub use decomposer::{
    recover_view, Decomposer, GradientDecomposer, LossKind, Optimizer, OracleDecomposer, RecoverConfig, RecoverReport,
    ViewInput, INIT_ALBEDO, INIT_METALLIC, INIT_ROUGHNESS,
};
pub use evaluate::{evaluate, EvalView, MetricRow, MetricTable};
pub use output::{file_entry, write_manifest, write_outputs, Manifest, ManifestEntry, Role};

/// Margin applied to the bounding sphere when framing views.
pub const FRAME_MARGIN: f64 = 1.05;
/// Camera distance from the bounding-sphere center, in radii.
pub const VIEW_DISTANCE: f64 = 3.0;

/// Axis directions of the six views, in output order.
pub const VIEW_AXES: [DVec3; 6] = [DVec3::X, DVec3::NEG_X, DVec3::Y, DVec3::NEG_Y, DVec3::Z, DVec3::NEG_Z];

/// Cameras on the six axis directions around the mesh bounding sphere.
/// Up is +Y, except for the two views along Y, which use +Z.
pub fn six_view_cameras(mesh: &TriMesh, mode: Projection, resolution: usize) -> Result<Vec<Camera>> {
    let bs = mesh.bounding_sphere();
    if !(bs.radius > 0.0) || !bs.radius.is_finite() {
        return Err(Error::Degenerate("mesh bounding sphere has zero radius".into()));
    }
    let framed = FRAME_MARGIN * bs.radius;
    let dist = VIEW_DISTANCE * bs.radius;
    let fov_y = 2.0 * (framed / (dist * dist - framed * framed).sqrt()).atan().to_degrees();
    VIEW_AXES
        .iter()
        .map(|&axis| {
            let up = if axis.y != 0.0 { DVec3::Z } else { DVec3::Y };
            let pos = bs.center + axis * dist;
            let cam = match mode {
                Projection::Ortho => Camera::ortho(pos, bs.center, up, framed, resolution, resolution),
                Projection::Persp => Camera::persp(pos, bs.center, up, fov_y, resolution, resolution),
            };
            cam.validate().map(|_| cam)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub view_resolution: usize,
    pub atlas_resolution: usize,
    pub projection: Projection,
    pub blend: BlendMode,
    /// Depth-test slack as a fraction of the bounding radius.
    pub depth_bias: f64,
    pub min_cos: Option<f64>,
    pub slope_bias: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            view_resolution: 512,
            atlas_resolution: 512,
            projection: Projection::Ortho,
            blend: BlendMode::default(),
            depth_bias: 1e-3,
            min_cos: None,
            slope_bias: 1.0,
        }
    }
}

/// What the views show.
#[derive(Debug, Clone, Copy)]
pub enum ObjectSource<'a> {
    /// Ground-truth UV materials rendered under each light.
    Textured {
        materials: &'a MaterialMaps,
        lights: &'a [PrefilteredEnv],
    },
    /// Externally observed images: per view, one image per light.
    Observed(&'a [Vec<ImageF>]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasStats {
    pub resolution: usize,
    pub valid_fraction: f64,
    pub overlap_texels: usize,
    pub degenerate_triangles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewStats {
    pub axis: [f64; 3],
    pub covered_pixels: usize,
    pub texels_seen: usize,
}

/// Error of the blended maps against ground truth at texels seen by at
/// least one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvMetrics {
    pub texels: usize,
    pub albedo_mae: f64,
    pub roughness_mae: f64,
    pub metallic_mae: f64,
    pub refined_albedo_mae: f64,
    pub refined_rm_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stage_times: Vec<StageTime>,
    pub decompose_calls: usize,
    pub refine_calls: usize,
    pub atlas: AtlasStats,
    pub coverage: CoverageReport,
    pub views: Vec<ViewStats>,
    pub metrics: Option<UvMetrics>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Refined UV maps.
    pub materials: MaterialMaps,
    pub blended: Blended,
    pub atlas: UvAtlas,
    pub cameras: Vec<Camera>,
    pub gbuffers: Vec<GBuffer>,
    pub report: PipelineReport,
}

impl PipelineOutput {
    /// Texels seen by at least one view.
    pub fn visible(&self) -> Vec<bool> {
        self.blended.covered()
    }
}

struct Timer {
    times: Vec<StageTime>,
}

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.at_stage(stage))?;
        self.times.push(StageTime {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

fn uv_mae(pred: &MaterialMaps, gt: &MaterialMaps, mask: &[bool]) -> (f64, f64, f64, f64, usize) {
    let (mut a, mut r, mut m, mut rm, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v) {
        let (pa, ga) = (&pred.albedo.data()[i * 3..i * 3 + 3], &gt.albedo.data()[i * 3..i * 3 + 3]);
        let (pr, gr) = (&pred.rm.data()[i * 3..i * 3 + 3], &gt.rm.data()[i * 3..i * 3 + 3]);
        a += (0..3).map(|c| (pa[c] - ga[c]).abs()).sum::<f64>() / 3.0;
        r += (pr[0] - gr[0]).abs();
        m += (pr[1] - gr[1]).abs();
        rm += ((pr[0] - gr[0]).abs() + (pr[1] - gr[1]).abs()) / 2.0;
        n += 1;
    }
    let d = n.max(1) as f64;
    (a / d, r / d, m / d, rm / d, n)
}

/// Runs the full decomposition for one object. Errors carry the tag of
/// the stage that raised them.
pub fn decompose_object(
    mesh: &TriMesh,
    source: ObjectSource<'_>,
    decomposer: &mut dyn Decomposer,
    refiner: &mut dyn Refiner,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut timer = Timer { times: Vec::new() };
    let atlas = timer.run("bake", || bake_uv_geometry(mesh, config.atlas_resolution))?;

    let (cameras, gbuffers, observations) = timer.run("render", || {
        let cameras = six_view_cameras(mesh, config.projection, config.view_resolution)?;
        let gbuffers = cameras.iter().map(|c| rasterize_gbuffer(mesh, c)).collect::<Result<Vec<_>>>()?;
        let observations: Vec<Vec<ImageF>> = match source {
            ObjectSource::Textured { materials, lights } => {
                if (materials.width(), materials.height()) != (atlas.resolution, atlas.resolution) {
                    return Err(Error::ShapeMismatch(format!(
                        "ground-truth maps are {}x{}, atlas is {}",
                        materials.width(),
                        materials.height(),
                        atlas.resolution
                    )));
                }
                gbuffers
                    .iter()
                    .zip(&cameras)
                    .map(|(g, c)| {
                        let view = sample_uv_materials(g, materials, &atlas.valid)?;
                        lights.iter().map(|l| render_view(g, &view, l, c)).collect()
                    })
                    .collect::<Result<_>>()?
            }
            ObjectSource::Observed(obs) => {
                if obs.len() != cameras.len() {
                    return Err(Error::ShapeMismatch(format!("{} observed views, expected 6", obs.len())));
                }
                obs.to_vec()
            }
        };
        Ok((cameras, gbuffers, observations))
    })?;

    let mut decompose_calls = 0;
    let views = timer.run("decompose", || {
        let inputs: Vec<ViewInput<'_>> = cameras
            .iter()
            .zip(&gbuffers)
            .zip(&observations)
            .map(|((camera, gbuf), obs)| ViewInput {
                camera,
                gbuf,
                observations: obs,
            })
            .collect();
        decompose_calls += 1;
        let mut out = decomposer.decompose(&inputs)?;
        if out.len() != inputs.len() {
            return Err(Error::Model(format!("decomposer returned {} views for {}", out.len(), inputs.len())));
        }
        for (maps, g) in out.iter_mut().zip(&gbuffers) {
            if (maps.width(), maps.height()) != (g.width, g.height) {
                return Err(Error::Model("decomposer output resolution differs from its input".into()));
            }
            maps.albedo.check_finite().map_err(|_| Error::Model("non-finite albedo".into()))?;
            maps.rm.check_finite().map_err(|_| Error::Model("non-finite RM".into()))?;
            maps.albedo = maps.albedo.map(|v| v.clamp(0.0, 1.0));
            maps.rm = maps.rm.map(|v| v.clamp(0.0, 1.0));
        }
        Ok(out)
    })?;

    let opts = BackprojectOptions {
        depth_bias: config.depth_bias * mesh.bounding_sphere().radius,
        min_cos: config.min_cos,
        slope_bias: config.slope_bias,
    };
    let partials = timer.run("backproject", || {
        gbuffers
            .iter()
            .zip(&cameras)
            .zip(&views)
            .map(|((g, c), v)| backproject_view(&atlas, g, c, v, &opts))
            .collect::<Result<Vec<_>>>()
    })?;

    let blended = timer.run("blend", || blend_views(&partials, config.blend))?;
    let coverage = coverage_report(&atlas, &blended);
    let visible = blended.covered();

    let mut refine_calls = 0;
    let materials = timer.run("refine", || {
        if !visible.iter().any(|&v| v) {
            return Err(Error::Degenerate("no texel was seen by any view".into()));
        }
        let mut run = |m: &ImageF| {
            refine_calls += 1;
            refiner.refine(&RefineRequest::new(m.clone(), visible.clone(), atlas.position.clone())?)
        };
        let albedo = run(&blended.albedo)?;
        let rm = run(&blended.rm)?;
        MaterialMaps::new(albedo, rm)
    })?;

    let mut flags = Vec::new();
    if coverage.flagged {
        flags.push(format!("missing area {:.1}% exceeds half the surface", 100.0 * coverage.missing_fraction));
    }
    if atlas.overlap_texels > 0 {
        flags.push(format!("{} texels in overlapping UV islands", atlas.overlap_texels));
    }
    let metrics = match source {
        ObjectSource::Textured { materials: gt, .. } => {
            let (albedo_mae, roughness_mae, metallic_mae, _, texels) = uv_mae(
                &MaterialMaps::new(blended.albedo.clone(), blended.rm.clone())?,
                gt,
                &visible,
            );
            let (ra, _, _, rrm, _) = uv_mae(&materials, gt, &visible);
            Some(UvMetrics {
                texels,
                albedo_mae,
                roughness_mae,
                metallic_mae,
                refined_albedo_mae: ra,
                refined_rm_mae: rrm,
            })
        }
        ObjectSource::Observed(_) => None,
    };
    let report = PipelineReport {
        stage_times: timer.times,
        decompose_calls,
        refine_calls,
        atlas: AtlasStats {
            resolution: atlas.resolution,
            valid_fraction: atlas.valid_fraction(),
            overlap_texels: atlas.overlap_texels,
            degenerate_triangles: atlas.degenerate,
        },
        coverage,
        views: VIEW_AXES
            .iter()
            .zip(&gbuffers)
            .zip(&partials)
            .map(|((a, g), p)| ViewStats {
                axis: a.to_array(),
                covered_pixels: g.stats.covered_pixels,
                texels_seen: p.seen_count(),
            })
            .collect(),
        metrics,
        flags,
    };
    Ok(PipelineOutput {
        materials,
        blended,
        atlas,
        cameras,
        gbuffers,
        report,
    })
}
