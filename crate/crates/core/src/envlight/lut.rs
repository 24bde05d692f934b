use glam::DVec3;
use rayon::prelude::*;

use super::microfacet::{alpha_from_roughness, hammersley, sample_ggx_local, schlick_weight, smith_g2};
use crate::error::{Error, Result};
use crate::image::ImageF;

/// Split-sum environment BRDF: for view cosine `c` and roughness `r`,
/// specular reflectance is `F0 * A(c, r) + B(c, r)`.
///
/// Grid node `(i, j)` sits at `c = i / (n - 1)` (evaluated no lower than
/// `1e-4`) and `r = j / (n - 1)`, so both axes include their endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct BrdfLut {
    size: usize,
    samples: usize,
    /// Row-major, roughness rows, `[A, B]` per node.
    data: Vec<[f64; 2]>,
}

/// Bilinear table value with its exact slope in roughness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutSample {
    pub a: f64,
    pub b: f64,
    pub da_dr: f64,
    pub db_dr: f64,
}

pub const MIN_COS_VIEW: f64 = 1e-4;

/// One `(A, B)` pair by GGX importance sampling with Hammersley points.
pub fn integrate_brdf_node(cos_v: f64, roughness: f64, samples: usize) -> [f64; 2] {
    let cos_v = cos_v.clamp(MIN_COS_VIEW, 1.0);
    let alpha = alpha_from_roughness(roughness);
    let v = DVec3::new((1.0 - cos_v * cos_v).max(0.0).sqrt(), 0.0, cos_v);
    let n = samples as u32;
    let (mut a, mut b) = (0.0, 0.0);
    for i in 0..n {
        let h = sample_ggx_local(hammersley(i, n), alpha);
        let v_dot_h = v.dot(h);
        let l = 2.0 * v_dot_h * h - v;
        let n_dot_l = l.z;
        if n_dot_l <= 0.0 || v_dot_h <= 0.0 {
            continue;
        }
        let n_dot_h = h.z.max(1e-12);
        // Estimator f * cos / pdf with pdf_l = D (n.h) / (4 v.h).
        let g_vis = smith_g2(cos_v, n_dot_l, alpha) * v_dot_h / (n_dot_h * cos_v);
        let fc = schlick_weight(v_dot_h);
        a += (1.0 - fc) * g_vis;
        b += fc * g_vis;
    }
    [a / n as f64, b / n as f64]
}

/// Tabulates the environment BRDF on an `size x size` grid.
pub fn integrate_brdf_lut(size: usize, samples: usize) -> Result<BrdfLut> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("LUT size must be at least 16, got {size}")));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("LUT needs at least one sample".into()));
    }
    let step = 1.0 / (size - 1) as f64;
    let mut data = vec![[0.0; 2]; size * size];
    data.par_chunks_mut(size).enumerate().for_each(|(j, row)| {
        for (i, node) in row.iter_mut().enumerate() {
            *node = integrate_brdf_node(i as f64 * step, j as f64 * step, samples);
        }
    });
    Ok(BrdfLut { size, samples, data })
}

impl BrdfLut {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Node `(cos index, roughness index)`.
    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        self.data[j * self.size + i]
    }

    pub fn lookup(&self, cos_v: f64, roughness: f64) -> LutSample {
        let n = self.size;
        let last = (n - 1) as f64;
        let fx = cos_v.clamp(0.0, 1.0) * last;
        let i0 = (fx.floor() as usize).min(n - 2);
        let tx = fx - i0 as f64;
        let fy = roughness.clamp(0.0, 1.0) * last;
        let j0 = (fy.floor() as usize).min(n - 2);
        let ty = fy - j0 as f64;
        let row = |j: usize| {
            let a = self.node(i0, j);
            let b = self.node(i0 + 1, j);
            [a[0] * (1.0 - tx) + b[0] * tx, a[1] * (1.0 - tx) + b[1] * tx]
        };
        let (r0, r1) = (row(j0), row(j0 + 1));
        LutSample {
            a: r0[0] * (1.0 - ty) + r1[0] * ty,
            b: r0[1] * (1.0 - ty) + r1[1] * ty,
            da_dr: (r1[0] - r0[0]) * last,
            db_dr: (r1[1] - r0[1]) * last,
        }
    }

    /// As an image: width along view cosine, height along roughness,
    /// channels `(A, B, 0)`.
    pub fn to_image(&self) -> ImageF {
        ImageF::from_fn(self.size, self.size, |i, j| {
            let [a, b] = self.node(i, j);
            [a, b, 0.0]
        })
        .expect("lut shape")
    }

    pub fn from_image(img: &ImageF, samples: usize) -> Result<Self> {
        if img.width() != img.height() || img.width() < 16 || img.channels() < 2 {
            return Err(Error::ShapeMismatch(format!("bad LUT image {:?}", img.dims())));
        }
        let size = img.width();
        let mut data = Vec::with_capacity(size * size);
        for j in 0..size {
            for i in 0..size {
                data.push([img.get(i, j, 0), img.get(i, j, 1)]);
            }
        }
        Ok(Self { size, samples, data })
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::envlight::microfacet::d_ggx;

    /// Uniform-hemisphere Monte Carlo of the same integral, written from
    /// the BRDF definition `D G F / (4 cos_v cos_l)` rather than the
    /// importance-sampled estimator.
    fn oracle(cos_v: f64, r: f64, n: usize, seed: u64) -> [f64; 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = r * r;
        let v = DVec3::new((1.0 - cos_v * cos_v).sqrt(), 0.0, cos_v);
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = rng.gen();
            let phi = 2.0 * PI * rng.gen::<f64>();
            let s = (1.0 - z * z).sqrt();
            let l = DVec3::new(s * phi.cos(), s * phi.sin(), z);
            let h = (v + l).normalize();
            let f = d_ggx(h.z, alpha) * smith_g2(cos_v, l.z, alpha) / (4.0 * cos_v * l.z);
            let fc = (1.0 - v.dot(h)).powi(5);
            let w = f * l.z * 2.0 * PI;
            a += (1.0 - fc) * w;
            b += fc * w;
        }
        [a / n as f64, b / n as f64]
    }

    #[test]
    fn mirror_at_normal_incidence() {
        let lut = integrate_brdf_lut(32, 256).unwrap();
        let s = lut.lookup(1.0, 0.0);
        assert!((s.a - 1.0).abs() < 0.02 && s.b.abs() < 0.02, "{s:?}");
    }

    #[test]
    fn agrees_with_uniform_oracle() {
        for &(c, r) in &[(1.0, 0.6), (0.5, 0.5), (0.8, 0.9), (0.3, 0.7), (0.9, 0.4)] {
            let got = integrate_brdf_node(c, r, 4096);
            let want = oracle(c, r, 100_000, 11);
            assert!((got[0] - want[0]).abs() < 0.02 && (got[1] - want[1]).abs() < 0.02,
                "c={c} r={r}: {got:?} vs {want:?}");
        }
    }

    #[test]
    fn table_bounds_and_monotonicity() {
        let lut = integrate_brdf_lut(32, 512).unwrap();
        for j in 0..32 {
            for i in 0..32 {
                let [a, b] = lut.node(i, j);
                assert!(a.is_finite() && b.is_finite());
                assert!((0.0..=1.5).contains(&a) && (0.0..=1.5).contains(&b));
                assert!(a + b <= 1.05, "node {i},{j}: {a} + {b}");
            }
        }
        for j in 1..32 {
            assert!(lut.node(31, j)[0] <= lut.node(31, j - 1)[0] + 1e-12);
        }
    }

    #[test]
    fn lookup_slope_matches_segment() {
        let lut = integrate_brdf_lut(16, 128).unwrap();
        let r = 0.43;
        let h = 1e-4;
        let s = lut.lookup(0.6, r);
        let fd = (lut.lookup(0.6, r + h).a - lut.lookup(0.6, r - h).a) / (2.0 * h);
        assert!((s.da_dr - fd).abs() < 1e-9);
    }

    #[test]
    fn image_round_trip() {
        let lut = integrate_brdf_lut(16, 64).unwrap();
        assert_eq!(BrdfLut::from_image(&lut.to_image(), 64).unwrap(), lut);
    }
}
