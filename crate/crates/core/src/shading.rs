//! Per-pixel evaluation of the metallic-workflow Cook-Torrance model under
//! environment light, through the split-sum factors:
//!
//! ```text
//! L = a (1 - m) E(n) + P(reflect(w, n), r) * (F0 A(cos_v, r) + B(cos_v, r))
//! F0 = 0.04 (1 - m) + a m
//! ```
//!
//! `E` is the un-normalized irradiance (a constant environment `L0` gives
//! `pi L0`), `P` the prefiltered specular chain and `(A, B)` the BRDF table.
//! There is no visibility term.

use glam::DVec3;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::envlight::microfacet::reflect;
use crate::envlight::PrefilteredEnv;
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::raster::GBuffer;

pub const DIELECTRIC_F0: f64 = 0.04;
/// Lower clamp on the view cosine, away from the grazing singularity.
pub const MIN_COS_VIEW: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialSample {
    pub albedo: DVec3,
    pub metallic: f64,
    pub roughness: f64,
}

impl MaterialSample {
    pub fn new(albedo: [f64; 3], metallic: f64, roughness: f64) -> Self {
        Self {
            albedo: DVec3::from_array(albedo),
            metallic,
            roughness,
        }
    }

    pub fn clamped(&self) -> Self {
        Self {
            albedo: self.albedo.clamp(DVec3::ZERO, DVec3::ONE),
            metallic: self.metallic.clamp(0.0, 1.0),
            roughness: self.roughness.clamp(0.0, 1.0),
        }
    }

    pub fn f0(&self) -> DVec3 {
        DVec3::splat(DIELECTRIC_F0 * (1.0 - self.metallic)) + self.albedo * self.metallic
    }
}

/// Derivatives of outgoing RGB radiance with respect to the material.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShadeGrad {
    /// Diagonal of the 3x3 albedo Jacobian; channels do not couple.
    pub d_albedo: DVec3,
    pub d_metallic: DVec3,
    pub d_roughness: DVec3,
    /// Part of `d_roughness` that flows through the prefiltered radiance
    /// (`dP/dr (F0 A + B)`). It vanishes for a constant environment.
    pub d_roughness_light: DVec3,
}

/// Lookups shared by the value and gradient paths.
struct Terms {
    irradiance: DVec3,
    pref: DVec3,
    pref_dr: DVec3,
    a: f64,
    b: f64,
    da_dr: f64,
    db_dr: f64,
}

fn lookup(s: &MaterialSample, n: DVec3, to_viewer: DVec3, pre: &PrefilteredEnv) -> Terms {
    let cos_v = to_viewer.dot(n).max(MIN_COS_VIEW);
    let spec = pre.specular(reflect(to_viewer, n), s.roughness);
    let lut = pre.lut.lookup(cos_v, s.roughness);
    Terms {
        irradiance: pre.irradiance(n),
        pref: spec.radiance,
        pref_dr: spec.d_roughness,
        a: lut.a,
        b: lut.b,
        da_dr: lut.da_dr,
        db_dr: lut.db_dr,
    }
}

#[inline]
fn radiance(s: &MaterialSample, t: &Terms) -> DVec3 {
    let diffuse = s.albedo * (1.0 - s.metallic) * t.irradiance;
    let specular = t.pref * (s.f0() * t.a + DVec3::splat(t.b));
    diffuse + specular
}

/// Outgoing radiance toward the viewer at `c` from a surface point `p` with
/// unit normal `n`.
pub fn shade(sample: &MaterialSample, n: DVec3, p: DVec3, c: DVec3, pre: &PrefilteredEnv) -> DVec3 {
    shade_dir(sample, n, (c - p).normalize(), pre)
}

/// As [`shade`], with the unit direction toward the viewer given directly.
pub fn shade_dir(sample: &MaterialSample, n: DVec3, to_viewer: DVec3, pre: &PrefilteredEnv) -> DVec3 {
    let s = sample.clamped();
    radiance(&s, &lookup(&s, n, to_viewer, pre))
}

pub fn shade_grad(sample: &MaterialSample, n: DVec3, p: DVec3, c: DVec3, pre: &PrefilteredEnv) -> ShadeGrad {
    shade_dir_with_grad(sample, n, (c - p).normalize(), pre).1
}

/// Radiance and its material derivatives. Roughness slopes at lookup knots
/// are right-sided.
pub fn shade_dir_with_grad(
    sample: &MaterialSample,
    n: DVec3,
    to_viewer: DVec3,
    pre: &PrefilteredEnv,
) -> (DVec3, ShadeGrad) {
    let s = sample.clamped();
    let t = lookup(&s, n, to_viewer, pre);
    let m = s.metallic;
    let f0 = s.f0();
    let brdf = f0 * t.a + DVec3::splat(t.b);
    let light = t.pref_dr * brdf;
    let grad = ShadeGrad {
        d_albedo: (1.0 - m) * t.irradiance + m * t.pref * t.a,
        d_metallic: -s.albedo * t.irradiance + (s.albedo - DVec3::splat(DIELECTRIC_F0)) * t.pref * t.a,
        d_roughness: light + t.pref * (f0 * t.da_dr + DVec3::splat(t.db_dr)),
        d_roughness_light: light,
    };
    (radiance(&s, &t), grad)
}

/// Per-pixel albedo and packed roughness/metallic maps.
///
/// The RM map stores roughness in channel 0, metallic in channel 1 and
/// zero in channel 2.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMaps {
    pub albedo: ImageF,
    pub rm: ImageF,
}

impl MaterialMaps {
    pub fn new(albedo: ImageF, rm: ImageF) -> Result<Self> {
        if albedo.channels() != 3 || rm.channels() != 3 {
            return Err(Error::ShapeMismatch("albedo and RM maps must have 3 channels".into()));
        }
        if (albedo.width(), albedo.height()) != (rm.width(), rm.height()) {
            return Err(Error::ShapeMismatch(format!(
                "albedo {:?} vs rm {:?}",
                albedo.dims(),
                rm.dims()
            )));
        }
        Ok(Self { albedo, rm })
    }

    pub fn constant(width: usize, height: usize, s: &MaterialSample) -> Result<Self> {
        Self::new(
            ImageF::from_fn(width, height, |_, _| s.albedo.to_array())?,
            ImageF::from_fn(width, height, |_, _| [s.roughness, s.metallic, 0.0])?,
        )
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> MaterialSample) -> Result<Self> {
        let mut maps = Self::constant(width, height, &MaterialSample::new([0.0; 3], 0.0, 0.0))?;
        for y in 0..height {
            for x in 0..width {
                maps.set(x, y, &f(x, y));
            }
        }
        Ok(maps)
    }

    /// Packs separate single-channel roughness and metallic maps.
    pub fn from_parts(albedo: ImageF, roughness: &ImageF, metallic: &ImageF) -> Result<Self> {
        roughness.ensure_same_shape(metallic, "roughness/metallic")?;
        let rm = ImageF::from_fn(roughness.width(), roughness.height(), |x, y| {
            [roughness.get(x, y, 0), metallic.get(x, y, 0), 0.0]
        })?;
        Self::new(albedo, rm)
    }

    pub fn width(&self) -> usize {
        self.albedo.width()
    }

    pub fn height(&self) -> usize {
        self.albedo.height()
    }

    pub fn get(&self, x: usize, y: usize) -> MaterialSample {
        let a = self.albedo.pixel(x, y);
        let rm = self.rm.pixel(x, y);
        MaterialSample::new([a[0], a[1], a[2]], rm[1], rm[0])
    }

    pub fn set(&mut self, x: usize, y: usize, s: &MaterialSample) {
        self.albedo.pixel_mut(x, y).copy_from_slice(&s.albedo.to_array());
        self.rm.pixel_mut(x, y).copy_from_slice(&[s.roughness, s.metallic, 0.0]);
    }

    pub fn roughness(&self) -> ImageF {
        self.rm.channel(0)
    }

    pub fn metallic(&self) -> ImageF {
        self.rm.channel(1)
    }
}

fn check_inputs(gbuf: &GBuffer, materials: &MaterialMaps) -> Result<()> {
    gbuf.check_shape(materials.width(), materials.height())
}

/// Shades every covered pixel; background stays zero. Output is linear HDR.
pub fn render_view(gbuf: &GBuffer, materials: &MaterialMaps, pre: &PrefilteredEnv, camera: &Camera) -> Result<ImageF> {
    check_inputs(gbuf, materials)?;
    let w = gbuf.width;
    let mut out = ImageF::zeros(w, gbuf.height, 3)?;
    out.data_mut().par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            if !gbuf.covered(x, y) {
                continue;
            }
            let p = gbuf.position_at(x, y);
            let l = shade_dir(&materials.get(x, y), gbuf.normal_at(x, y), camera.view_vector(p), pre);
            row[x * 3..x * 3 + 3].copy_from_slice(&l.to_array());
        }
    });
    Ok(out)
}

/// [`render_view`] plus per-pixel material derivatives (zero on background).
pub fn render_view_with_grad(
    gbuf: &GBuffer,
    materials: &MaterialMaps,
    pre: &PrefilteredEnv,
    camera: &Camera,
) -> Result<(ImageF, Vec<ShadeGrad>)> {
    check_inputs(gbuf, materials)?;
    let w = gbuf.width;
    let mut out = ImageF::zeros(w, gbuf.height, 3)?;
    let mut grads = vec![ShadeGrad::default(); w * gbuf.height];
    out.data_mut()
        .par_chunks_mut(w * 3)
        .zip(grads.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, grow))| {
            for x in 0..w {
                if !gbuf.covered(x, y) {
                    continue;
                }
                let p = gbuf.position_at(x, y);
                let (l, g) = shade_dir_with_grad(&materials.get(x, y), gbuf.normal_at(x, y), camera.view_vector(p), pre);
                row[x * 3..x * 3 + 3].copy_from_slice(&l.to_array());
                grow[x] = g;
            }
        });
    Ok((out, grads))
}
