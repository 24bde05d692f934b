//! Environment lighting and its split-sum precomputation.
//!
//! Equirectangular convention: texel coordinate `u` in `[0, 1)` maps to
//! azimuth `phi = 2 pi u - pi`, `v` in `[0, 1]` maps to polar angle
//! `theta = pi v` measured from +Y, and
//! `dir = (sin theta cos phi, cos theta, sin theta sin phi)`.
//!
//! The diffuse irradiance is stored un-normalized (no `1/pi`): a constant
//! environment of radiance `L0` produces irradiance `pi * L0`, and the
//! shading model multiplies it by albedo directly.

mod cache;
mod irradiance;
mod lut;
pub mod microfacet;
mod specular;

use std::f64::consts::PI;
use std::path::Path;

use glam::DVec3;

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::imageio;

pub use cache::{load_prefiltered, save_prefiltered, CacheManifest};
pub use irradiance::compute_irradiance;
pub use lut::{integrate_brdf_lut, BrdfLut, LutSample};
pub use specular::{prefilter_specular, SpecularConfig};

/// Unit direction of equirect coordinates `(u, v)`.
#[inline]
pub fn dir_from_uv(u: f64, v: f64) -> DVec3 {
    let phi = 2.0 * PI * u - PI;
    let theta = PI * v;
    let st = theta.sin();
    DVec3::new(st * phi.cos(), theta.cos(), st * phi.sin())
}

/// Equirect coordinates of a unit direction; `u` in `[0, 1)`.
#[inline]
pub fn uv_from_dir(d: DVec3) -> (f64, f64) {
    let theta = d.y.clamp(-1.0, 1.0).acos();
    let phi = d.z.atan2(d.x);
    let u = (phi + PI) / (2.0 * PI);
    (if u >= 1.0 { u - 1.0 } else { u }, theta / PI)
}

/// Direction through the center of texel `(x, y)` of a `w x h` equirect.
#[inline]
pub fn texel_dir(x: usize, y: usize, w: usize, h: usize) -> DVec3 {
    dir_from_uv((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64)
}

/// Bilinear lookup in an equirect image, wrapping in azimuth and clamping
/// at the poles.
pub fn sample_equirect(img: &ImageF, d: DVec3) -> DVec3 {
    let (u, v) = uv_from_dir(d);
    sample_equirect_uv(img, u, v)
}

pub fn sample_equirect_uv(img: &ImageF, u: f64, v: f64) -> DVec3 {
    let (w, h) = (img.width(), img.height());
    let fx = u * w as f64 - 0.5;
    let x0f = fx.floor();
    let tx = fx - x0f;
    let x0 = (x0f as i64).rem_euclid(w as i64) as usize;
    let x1 = (x0 + 1) % w;
    let fy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let y0 = (fy.floor() as usize).min(h - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ty = fy - y0 as f64;
    let px = |x, y| {
        let p = img.pixel(x, y);
        DVec3::new(p[0], p[1], p[2])
    };
    let top = px(x0, y0) * (1.0 - tx) + px(x1, y0) * tx;
    let bot = px(x0, y1) * (1.0 - tx) + px(x1, y1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Equirectangular HDR radiance map, `width == 2 * height`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    image: ImageF,
}

impl EnvMap {
    pub fn new(image: ImageF) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::InvalidArgument("environment map must have 3 channels".into()));
        }
        if image.width() != 2 * image.height() {
            return Err(Error::InvalidArgument(format!(
                "environment map must be 2:1, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        if let Some(i) = image.data().iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "environment radiance must be finite and non-negative (sample {i})"
            )));
        }
        Ok(Self { image })
    }

    pub fn constant(height: usize, radiance: [f64; 3]) -> Result<Self> {
        Self::new(ImageF::from_fn(2 * height, height, |_, _| radiance)?)
    }

    /// Evaluates `f(direction)` at every texel center.
    pub fn from_fn(height: usize, f: impl Fn(DVec3) -> DVec3) -> Result<Self> {
        let w = 2 * height;
        Self::new(ImageF::from_fn(w, height, |x, y| f(texel_dir(x, y, w, height)).to_array())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(imageio::read_pfm(path)?)
    }

    pub fn image(&self) -> &ImageF {
        &self.image
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn max_radiance(&self) -> f64 {
        self.image.min_max().1
    }

    pub fn sample(&self, d: DVec3) -> DVec3 {
        sample_equirect(&self.image, d)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.image.scaled(c))
    }

    /// Rotation about the polar (+Y) axis by `quarters * 90` degrees,
    /// implemented as a column shift; exact when the width is divisible by 4.
    pub fn rotated_quarters(&self, quarters: i64) -> Result<Self> {
        let (w, h) = (self.width(), self.height());
        let shift = (quarters * w as i64 / 4).rem_euclid(w as i64) as usize;
        let img = ImageF::from_fn(w, h, |x, y| {
            let p = self.image.pixel((x + w - shift) % w, y);
            [p[0], p[1], p[2]]
        })?;
        Self::new(img)
    }
}

/// Knobs for the split-sum precomputation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PrefilterConfig {
    pub irradiance_height: usize,
    pub specular: SpecularConfig,
    pub lut_size: usize,
    pub lut_samples: usize,
}

impl Default for PrefilterConfig {
    fn default() -> Self {
        Self {
            irradiance_height: 16,
            specular: SpecularConfig::default(),
            lut_size: 64,
            lut_samples: 1024,
        }
    }
}

/// Irradiance map, roughness-indexed specular chain and BRDF table.
#[derive(Debug, Clone)]
pub struct PrefilteredEnv {
    pub irradiance: ImageF,
    /// Level `l` is filtered at roughness `l / (len - 1)`.
    pub specular: Vec<ImageF>,
    pub lut: BrdfLut,
}

/// Prefiltered radiance and its slope in roughness.
#[derive(Debug, Clone, Copy)]
pub struct SpecularSample {
    pub radiance: DVec3,
    pub d_roughness: DVec3,
}

impl PrefilteredEnv {
    pub fn build(env: &EnvMap, config: &PrefilterConfig) -> Result<Self> {
        Self::build_with_lut(env, config, integrate_brdf_lut(config.lut_size, config.lut_samples)?)
    }

    /// Reuses a precomputed BRDF table; it depends on no environment.
    pub fn build_with_lut(env: &EnvMap, config: &PrefilterConfig, lut: BrdfLut) -> Result<Self> {
        Ok(Self {
            irradiance: compute_irradiance(env, config.irradiance_height)?,
            specular: prefilter_specular(env, &config.specular)?,
            lut,
        })
    }

    pub fn mip_count(&self) -> usize {
        self.specular.len()
    }

    pub fn roughness_of_level(&self, level: usize) -> f64 {
        level as f64 / (self.specular.len() - 1) as f64
    }

    /// Cosine-weighted hemisphere integral of incident radiance around `n`.
    pub fn irradiance(&self, n: DVec3) -> DVec3 {
        sample_equirect(&self.irradiance, n)
    }

    /// Trilinear lookup of the specular chain. The roughness slope is the
    /// exact slope of the linear segment, taking the right-hand segment at
    /// level knots.
    pub fn specular(&self, dir: DVec3, roughness: f64) -> SpecularSample {
        let n = self.specular.len();
        let f = roughness.clamp(0.0, 1.0) * (n - 1) as f64;
        let l0 = (f.floor() as usize).min(n - 2);
        let t = f - l0 as f64;
        let (u, v) = uv_from_dir(dir);
        let s0 = sample_equirect_uv(&self.specular[l0], u, v);
        let s1 = sample_equirect_uv(&self.specular[l0 + 1], u, v);
        SpecularSample {
            radiance: s0 * (1.0 - t) + s1 * t,
            d_roughness: (s1 - s0) * (n - 1) as f64,
        }
    }

    /// Knot positions in roughness where lookups have slope discontinuities.
    pub fn roughness_knots(&self) -> Vec<f64> {
        let mut knots: Vec<f64> = (0..self.specular.len())
            .map(|l| self.roughness_of_level(l))
            .chain((0..self.lut.size()).map(|j| j as f64 / (self.lut.size() - 1) as f64))
            .collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        knots
    }
}
