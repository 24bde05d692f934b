//! Procedural lights and materials for demos and round-trip checks.

use std::f64::consts::PI;

use glam::DVec3;

use crate::envlight::EnvMap;
use crate::error::Result;
use crate::shading::{MaterialMaps, MaterialSample};
use crate::uvspace::UvAtlas;

pub const ENV_COUNT: usize = 5;

fn lobe(d: DVec3, axis: DVec3, sharpness: f64) -> f64 {
    (sharpness * (d.dot(axis.normalize()) - 1.0)).exp()
}

/// One of [`ENV_COUNT`] fixed, mutually distinct environments.
pub fn synthetic_env(index: usize, height: usize) -> Result<EnvMap> {
    let f: Box<dyn Fn(DVec3) -> DVec3> = match index % ENV_COUNT {
        // Sun and sky over a dark ground.
        0 => Box::new(|d| {
            let sky = if d.y > 0.0 {
                DVec3::new(0.35, 0.5, 0.85) * (0.4 + 0.6 * d.y)
            } else {
                DVec3::splat(0.12)
            };
            sky + DVec3::new(8.0, 7.2, 6.0) * lobe(d, DVec3::new(0.5, 0.7, 0.3), 60.0)
        }),
        // Warm key, cool fill.
        1 => Box::new(|d| {
            DVec3::new(3.0, 1.6, 0.6) * lobe(d, DVec3::new(1.0, 0.4, -0.2), 12.0)
                + DVec3::new(0.4, 0.8, 2.5) * lobe(d, DVec3::new(-0.8, 0.2, 0.6), 6.0)
                + DVec3::splat(0.05)
        }),
        // Azimuthal bands.
        2 => Box::new(|d| {
            let phi = d.z.atan2(d.x);
            let s = (1.0 - d.y * d.y).max(0.0).sqrt();
            DVec3::new(
                0.6 + 0.5 * (3.0 * phi).sin() * s,
                0.6 + 0.5 * (3.0 * phi + 2.0).sin() * s,
                0.6 + 0.5 * (2.0 * phi + 4.0).cos() * s,
            )
        }),
        // Sunset horizon.
        3 => Box::new(|d| {
            let band = (-(d.y * 6.0).powi(2)).exp();
            DVec3::new(2.2, 0.9, 0.3) * band * (0.6 + 0.4 * d.x) + DVec3::new(0.1, 0.12, 0.25) * (1.0 + d.y)
        }),
        // Small bright spot from below plus a dim dome.
        _ => Box::new(|d| {
            DVec3::new(20.0, 20.0, 18.0) * lobe(d, DVec3::new(-0.2, -0.5, -0.8), 200.0)
                + DVec3::new(0.3, 0.25, 0.2) * (0.5 + 0.5 * d.y)
        }),
    };
    EnvMap::from_fn(height, f)
}

/// Smooth material field over world space: albedo in `[0.15, 0.85]`,
/// roughness in `[0.2, 0.8]`, metallic in `[0, 1]`.
pub fn material_field(p: DVec3) -> MaterialSample {
    let s = |k: f64, ph: f64| 0.5 + 0.5 * (k * p.x + 1.3 * k * p.y - 0.7 * k * p.z + ph).sin();
    MaterialSample::new(
        [0.15 + 0.7 * s(2.1, 0.0), 0.15 + 0.7 * s(1.7, 1.9), 0.15 + 0.7 * s(2.5, 4.1)],
        (0.5 + 0.5 * (PI * p.y + 0.8 * p.x).sin()).clamp(0.0, 1.0),
        0.2 + 0.6 * s(1.3, 2.7),
    )
}

/// Bakes [`material_field`] into UV space at every valid texel; other
/// texels stay zero.
pub fn bake_material_field(atlas: &UvAtlas, f: impl Fn(DVec3) -> MaterialSample) -> Result<MaterialMaps> {
    let r = atlas.resolution;
    let zero = MaterialSample::new([0.0; 3], 0.0, 0.0);
    MaterialMaps::from_fn(r, r, |x, y| {
        if atlas.valid[y * r + x] {
            f(atlas.position_at(x, y))
        } else {
            zero
        }
    })
}
