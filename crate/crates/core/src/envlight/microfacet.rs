//! GGX distribution, height-correlated Smith masking, Schlick Fresnel and
//! the Hammersley point set used by every importance-sampled integral.
//!
//! Roughness `r` is perceptual; the GGX width is `alpha = r * r`.

use std::f64::consts::PI;

use glam::{DVec2, DVec3};

/// i-th point of the `n`-point Hammersley set in `[0, 1)^2`.
#[inline]
pub fn hammersley(i: u32, n: u32) -> DVec2 {
    let radical = i.reverse_bits() as f64 * (1.0 / 4_294_967_296.0);
    DVec2::new(i as f64 / n as f64, radical)
}

#[inline]
pub fn alpha_from_roughness(r: f64) -> f64 {
    r * r
}

/// GGX normal distribution `D(h)`.
#[inline]
pub fn d_ggx(n_dot_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

/// Half vector in the local frame (+Z normal) distributed as `D(h) (n.h)`.
#[inline]
pub fn sample_ggx_local(u: DVec2, alpha: f64) -> DVec3 {
    let phi = 2.0 * PI * u.x;
    let a2 = alpha * alpha;
    let cos2 = ((1.0 - u.y) / (1.0 + (a2 - 1.0) * u.y)).clamp(0.0, 1.0);
    let cos_t = cos2.sqrt();
    let sin_t = (1.0 - cos2).sqrt();
    DVec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
}

/// Orthonormal tangent frame around unit `n` (Duff et al. 2017).
#[inline]
pub fn tangent_frame(n: DVec3) -> (DVec3, DVec3) {
    let sign = 1f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    (
        DVec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x),
        DVec3::new(b, sign + n.y * n.y * a, -n.y),
    )
}

#[inline]
pub fn to_world(local: DVec3, n: DVec3) -> DVec3 {
    let (t, b) = tangent_frame(n);
    t * local.x + b * local.y + n * local.z
}

/// Height-correlated Smith masking-shadowing `G2(v, l)`.
#[inline]
pub fn smith_g2(n_dot_v: f64, n_dot_l: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let lv = n_dot_l * (n_dot_v * n_dot_v * (1.0 - a2) + a2).sqrt();
    let ll = n_dot_v * (n_dot_l * n_dot_l * (1.0 - a2) + a2).sqrt();
    let denom = lv + ll;
    if denom <= 0.0 {
        0.0
    } else {
        2.0 * n_dot_l * n_dot_v / denom
    }
}

/// Schlick weight `(1 - v.h)^5`; `F = F0 + (1 - F0) * w`.
#[inline]
pub fn schlick_weight(v_dot_h: f64) -> f64 {
    let m = (1.0 - v_dot_h).clamp(0.0, 1.0);
    let m2 = m * m;
    m2 * m2 * m
}

/// Reflection of `v` about `n` (`v` points away from the surface).
#[inline]
pub fn reflect(v: DVec3, n: DVec3) -> DVec3 {
    2.0 * v.dot(n) * n - v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ggx_is_normalized() {
        // Projected-area normalization: integral of D(h) (n.h) dh = 1,
        // checked by midpoint quadrature over the hemisphere.
        for &alpha in &[0.1, 0.3, 0.7, 1.0] {
            let n = 4000;
            let mut sum = 0.0;
            for i in 0..n {
                let t = (i as f64 + 0.5) / n as f64 * PI / 2.0;
                sum += d_ggx(t.cos(), alpha) * t.cos() * t.sin() * (PI / 2.0 / n as f64) * 2.0 * PI;
            }
            assert!((sum - 1.0).abs() < 2e-3, "alpha {alpha}: {sum}");
        }
    }

    #[test]
    fn frame_is_orthonormal() {
        for n in [DVec3::Z, -DVec3::Z, DVec3::new(0.3, -0.8, 0.1).normalize(), DVec3::X] {
            let (t, b) = tangent_frame(n);
            assert!(t.dot(b).abs() < 1e-12 && t.dot(n).abs() < 1e-12 && b.dot(n).abs() < 1e-12);
            assert!((t.length() - 1.0).abs() < 1e-12 && (b.length() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smith_limits() {
        assert!((smith_g2(0.7, 0.4, 0.0) - 1.0).abs() < 1e-12);
        assert!(smith_g2(0.7, 0.4, 0.8) < 1.0);
    }
}
