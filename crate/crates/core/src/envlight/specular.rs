use std::f64::consts::PI;

use glam::DVec3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::microfacet::{alpha_from_roughness, d_ggx, hammersley, reflect, sample_ggx_local, to_world};
use super::{sample_equirect, texel_dir, EnvMap};
use crate::error::{Error, Result};
use crate::image::ImageF;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecularConfig {
    pub n_mips: usize,
    pub samples_per_texel: usize,
    /// Height of level 0; defaults to the source height capped at 256.
    pub base_height: Option<usize>,
    /// Smallest level height.
    pub min_height: usize,
}

impl Default for SpecularConfig {
    fn default() -> Self {
        Self {
            n_mips: 6,
            samples_per_texel: 512,
            base_height: None,
            min_height: 8,
        }
    }
}

/// Box-filtered copies of the source for filtered importance sampling.
struct SourcePyramid {
    levels: Vec<ImageF>,
}

impl SourcePyramid {
    fn new(src: &ImageF) -> Result<Self> {
        let mut levels = vec![src.clone()];
        while levels.last().map_or(false, |l| l.height() >= 2) {
            let prev = levels.last().expect("nonempty");
            let (w, h) = (prev.width().div_ceil(2), prev.height().div_ceil(2));
            let next = ImageF::from_fn(w, h, |x, y| {
                let mut acc = [0.0; 3];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let p = prev.pixel((2 * x + dx).min(prev.width() - 1), (2 * y + dy).min(prev.height() - 1));
                    for c in 0..3 {
                        acc[c] += 0.25 * p[c];
                    }
                }
                acc
            })?;
            levels.push(next);
        }
        Ok(Self { levels })
    }

    fn sample(&self, d: DVec3, lod: f64) -> DVec3 {
        let max = (self.levels.len() - 1) as f64;
        let lod = lod.clamp(0.0, max);
        let l0 = lod.floor() as usize;
        let t = lod - l0 as f64;
        let a = sample_equirect(&self.levels[l0], d);
        if t == 0.0 {
            return a;
        }
        a * (1.0 - t) + sample_equirect(&self.levels[(l0 + 1).min(self.levels.len() - 1)], d) * t
    }
}

/// GGX-prefiltered radiance chain. Level `l` holds, for each texel
/// direction `R`, the `(n.l)`-weighted average of incident radiance over
/// GGX-distributed reflections with `N = V = R` at roughness
/// `l / (n_mips - 1)`. Level 0 is the bilinear resample of the source.
pub fn prefilter_specular(env: &EnvMap, config: &SpecularConfig) -> Result<Vec<ImageF>> {
    if config.n_mips < 2 {
        return Err(Error::InvalidArgument("n_mips must be at least 2".into()));
    }
    if config.samples_per_texel < 32 {
        return Err(Error::InvalidArgument("samples_per_texel must be at least 32".into()));
    }
    let base_h = config.base_height.unwrap_or(env.height().min(256)).max(1);
    let src = env.image();
    let level0 = if base_h == env.height() {
        src.clone()
    } else {
        src.resize_bilinear(2 * base_h, base_h)?
    };
    let pyramid = SourcePyramid::new(src)?;
    let texel_solid_angle = 4.0 * PI / (env.width() * env.height()) as f64;

    let mut chain = vec![level0];
    for level in 1..config.n_mips {
        let roughness = level as f64 / (config.n_mips - 1) as f64;
        let h = (base_h >> level).max(config.min_height.min(base_h));
        let w = 2 * h;
        let alpha = alpha_from_roughness(roughness);
        let n = config.samples_per_texel as u32;
        let mut img = ImageF::zeros(w, h, 3)?;
        img.data_mut()
            .par_chunks_mut(w * 3)
            .enumerate()
            .for_each(|(y, row)| {
                for x in 0..w {
                    let r = texel_dir(x, y, w, h);
                    let v = prefilter_direction(&pyramid, r, alpha, n, texel_solid_angle);
                    row[x * 3..x * 3 + 3].copy_from_slice(&v.to_array());
                }
            });
        chain.push(img);
    }
    Ok(chain)
}

fn prefilter_direction(pyr: &SourcePyramid, r: DVec3, alpha: f64, n: u32, texel_sa: f64) -> DVec3 {
    let mut acc = DVec3::ZERO;
    let mut wsum = 0.0;
    for i in 0..n {
        let h = to_world(sample_ggx_local(hammersley(i, n), alpha), r);
        let l = reflect(r, h);
        let n_dot_l = l.dot(r);
        if n_dot_l <= 0.0 {
            continue;
        }
        // With N = V the reflected-direction pdf is D(h) / 4.
        let n_dot_h = h.dot(r).clamp(0.0, 1.0);
        let pdf = d_ggx(n_dot_h, alpha) * 0.25;
        let sample_sa = 1.0 / (n as f64 * pdf + 1e-30);
        let lod = if alpha == 0.0 { 0.0 } else { 0.5 * (sample_sa / texel_sa).log2() + 1.0 };
        acc += pyr.sample(l, lod) * n_dot_l;
        wsum += n_dot_l;
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        pyr.sample(r, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_mips: usize, samples: usize) -> SpecularConfig {
        SpecularConfig {
            n_mips,
            samples_per_texel: samples,
            ..Default::default()
        }
    }

    #[test]
    fn constant_env_is_fixed_point() {
        let env = EnvMap::constant(32, [0.7, 0.7, 0.7]).unwrap();
        for level in prefilter_specular(&env, &cfg(6, 64)).unwrap() {
            assert!(level.data().iter().all(|v| (v - 0.7).abs() < 1e-3));
        }
    }

    #[test]
    fn level_zero_is_source_resample() {
        let env = EnvMap::from_fn(16, |d| DVec3::new(d.x.abs(), d.y * d.y, 0.2)).unwrap();
        let chain = prefilter_specular(&env, &cfg(4, 32)).unwrap();
        assert_eq!(&chain[0], env.image());
        let c = SpecularConfig {
            base_height: Some(8),
            ..cfg(4, 32)
        };
        let chain = prefilter_specular(&env, &c).unwrap();
        let expected = env.image().resize_bilinear(16, 8).unwrap();
        assert_eq!(chain[0], expected);
    }

    #[test]
    fn white_furnace_bound_and_linearity() {
        let env = EnvMap::from_fn(16, |d| DVec3::new((4.0 * d.x).exp(), 1.0 + d.y, (d.z * 3.0).max(0.0))).unwrap();
        let lmax = env.max_radiance();
        let a = prefilter_specular(&env, &cfg(4, 64)).unwrap();
        for level in &a {
            assert!(level.data().iter().all(|&v| v <= lmax * (1.0 + 1e-3)));
        }
        let b = prefilter_specular(&env.scaled(4.0).unwrap(), &cfg(4, 64)).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            for (x, y) in la.data().iter().zip(lb.data()) {
                assert_eq!(x * 4.0, *y);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let env = EnvMap::constant(8, [1.0; 3]).unwrap();
        assert!(prefilter_specular(&env, &cfg(1, 64)).is_err());
        assert!(prefilter_specular(&env, &cfg(4, 16)).is_err());
    }
}
