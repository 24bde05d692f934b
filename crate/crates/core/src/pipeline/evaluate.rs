use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::envlight::PrefilteredEnv;
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::losses::{l1_masked, psnr_masked, ssim};
use crate::raster::GBuffer;
use crate::shading::{render_view, MaterialMaps};

/// Predicted and ground-truth materials of one view with its geometry.
#[derive(Debug, Clone, Copy)]
pub struct EvalView<'a> {
    pub gbuf: &'a GBuffer,
    pub camera: &'a Camera,
    pub pred: &'a MaterialMaps,
    pub gt: &'a MaterialMaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    /// Over covered pixels.
    pub psnr: f64,
    /// Over the full frame, background zeroed in both images.
    pub ssim: f64,
    /// Over covered pixels.
    pub l1: f64,
}

/// Rows `albedo`, `metallic`, `roughness`, `relighting`, averaged over
/// views (and lights for relighting), followed by one `relighting/<k>`
/// row per light.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn row(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn masked(img: &ImageF, mask: &[bool]) -> ImageF {
    let c = img.channels();
    let mut out = img.clone();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            out.data_mut()[i * c..(i + 1) * c].fill(0.0);
        }
    }
    out
}

fn score(pred: &ImageF, gt: &ImageF, mask: &[bool]) -> Result<[f64; 3]> {
    let (p, g) = (masked(pred, mask), masked(gt, mask));
    Ok([psnr_masked(&p, &g, mask)?, ssim(&p, &g)?, l1_masked(&p, &g, mask)?])
}

fn mean_row(name: &str, scores: &[[f64; 3]]) -> MetricRow {
    let n = scores.len().max(1) as f64;
    let sum = |k: usize| scores.iter().map(|s| s[k]).sum::<f64>() / n;
    MetricRow {
        name: name.into(),
        psnr: sum(0),
        ssim: sum(1),
        l1: sum(2),
    }
}

/// Material and relighting metrics. Relit renders use ground-truth
/// geometry and are clamped to `[0, 1]` before scoring.
pub fn evaluate(views: &[EvalView<'_>], envs: &[PrefilteredEnv]) -> Result<MetricTable> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to evaluate".into()));
    }
    if envs.is_empty() {
        return Err(Error::InvalidArgument("relighting needs at least one environment".into()));
    }
    let (mut albedo, mut metallic, mut roughness) = (Vec::new(), Vec::new(), Vec::new());
    let mut relit = vec![Vec::new(); envs.len()];
    for v in views {
        v.gbuf.check_shape(v.pred.width(), v.pred.height())?;
        v.gbuf.check_shape(v.gt.width(), v.gt.height())?;
        let mask = &v.gbuf.mask;
        albedo.push(score(&v.pred.albedo, &v.gt.albedo, mask)?);
        metallic.push(score(&v.pred.metallic(), &v.gt.metallic(), mask)?);
        roughness.push(score(&v.pred.roughness(), &v.gt.roughness(), mask)?);
        for (k, env) in envs.iter().enumerate() {
            let a = render_view(v.gbuf, v.pred, env, v.camera)?.map(|x| x.clamp(0.0, 1.0));
            let b = render_view(v.gbuf, v.gt, env, v.camera)?.map(|x| x.clamp(0.0, 1.0));
            relit[k].push(score(&a, &b, mask)?);
        }
    }
    let all: Vec<[f64; 3]> = relit.iter().flatten().copied().collect();
    let mut rows = vec![
        mean_row("albedo", &albedo),
        mean_row("metallic", &metallic),
        mean_row("roughness", &roughness),
        mean_row("relighting", &all),
    ];
    rows.extend(relit.iter().enumerate().map(|(k, s)| mean_row(&format!("relighting/{k}"), s)));
    Ok(MetricTable { rows })
}
