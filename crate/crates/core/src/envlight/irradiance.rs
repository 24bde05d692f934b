use std::f64::consts::PI;

use glam::DVec3;
use rayon::prelude::*;

use super::{texel_dir, EnvMap};
use crate::error::{Error, Result};
use crate::image::ImageF;

/// Cosine-weighted hemisphere integral of `env` for every texel direction
/// of a `2 * out_height x out_height` equirect map.
///
/// Every source texel contributes `L * max(0, w.n) * sin(theta) dtheta dphi`.
pub fn compute_irradiance(env: &EnvMap, out_height: usize) -> Result<ImageF> {
    if out_height < 8 {
        return Err(Error::InvalidArgument(format!(
            "irradiance height must be at least 8, got {out_height}"
        )));
    }
    let (sw, sh) = (env.width(), env.height());
    let d_area = (PI / sh as f64) * (2.0 * PI / sw as f64);
    let src = env.image();
    let mut texels = Vec::with_capacity(sw * sh);
    for y in 0..sh {
        let sin_t = (PI * (y as f64 + 0.5) / sh as f64).sin();
        for x in 0..sw {
            let p = src.pixel(x, y);
            let lw = DVec3::new(p[0], p[1], p[2]) * (sin_t * d_area);
            if lw != DVec3::ZERO {
                texels.push((texel_dir(x, y, sw, sh), lw));
            }
        }
    }

    let (ow, oh) = (2 * out_height, out_height);
    let mut out = ImageF::zeros(ow, oh, 3)?;
    out.data_mut().par_chunks_mut(ow * 3).enumerate().for_each(|(y, row)| {
        for x in 0..ow {
            let n = texel_dir(x, y, ow, oh);
            let mut e = DVec3::ZERO;
            for (d, lw) in &texels {
                let c = d.dot(n);
                if c > 0.0 {
                    e += *lw * c;
                }
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&e.to_array());
        }
    });
    Ok(out)
}
