//! Losses and image metrics.

mod feature;
mod metrics;
mod relight;

use crate::camera::Camera;
use crate::envlight::PrefilteredEnv;
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::raster::GBuffer;
use crate::shading::{render_view, render_view_with_grad, MaterialMaps};

pub use feature::{ConvLayer, FeatureStack, TapPoint, Tensor};
pub use metrics::{psnr, psnr_masked, ssim, l1_masked, PSNR_CAP};
pub use relight::RelightSampler;

use feature::sign;

/// Visits samples channel-major: every pixel of channel 0, then channel 1, ...
fn channel_major(img: &ImageF) -> impl Iterator<Item = usize> + '_ {
    let c = img.channels();
    (0..c).flat_map(move |k| (0..img.pixel_count()).map(move |i| i * c + k))
}

/// Mean absolute difference over all samples.
pub fn l1_loss(y_hat: &ImageF, y: &ImageF) -> Result<f64> {
    y_hat.ensure_same_shape(y, "l1 loss")?;
    let (a, b) = (y_hat.data(), y.data());
    let sum: f64 = channel_major(y_hat).map(|i| (a[i] - b[i]).abs()).sum();
    Ok(sum / a.len() as f64)
}

pub fn l1_loss_grad(y_hat: &ImageF, y: &ImageF) -> Result<(f64, ImageF)> {
    let loss = l1_loss(y_hat, y)?;
    let n = y_hat.data().len() as f64;
    let data = y_hat.data().iter().zip(y.data()).map(|(a, b)| sign(a - b) / n).collect();
    Ok((loss, ImageF::from_vec(y_hat.width(), y_hat.height(), y_hat.channels(), data)?))
}

/// Least-squares scale and shift aligning `y_hat` to `y`, fitted jointly
/// over every sample of every channel.
pub fn ssi_align(y_hat: &ImageF, y: &ImageF) -> Result<(f64, f64)> {
    y_hat.ensure_same_shape(y, "ssi loss")?;
    let (a, b) = (y_hat.data(), y.data());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        cov += (p - ma) * (q - mb);
        var += (p - ma) * (p - ma);
    }
    if var / n < 1e-12 {
        return Err(Error::Degenerate("scale-shift fit needs a non-constant prediction".into()));
    }
    let s = cov / var;
    Ok((s, mb - s * ma))
}

/// `mean |s y_hat + t - y|` after the closed-form affine alignment.
pub fn ssi_loss(y_hat: &ImageF, y: &ImageF) -> Result<f64> {
    let (s, t) = ssi_align(y_hat, y)?;
    let (a, b) = (y_hat.data(), y.data());
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (s * p + t - q).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// SSI loss and its gradient, differentiating through the alignment.
pub fn ssi_loss_grad(y_hat: &ImageF, y: &ImageF) -> Result<(f64, ImageF)> {
    let (s, t) = ssi_align(y_hat, y)?;
    let (a, b) = (y_hat.data(), y.data());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let var: f64 = a.iter().map(|p| (p - ma) * (p - ma)).sum();
    let cov: f64 = a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum();
    let signs: Vec<f64> = a.iter().zip(b).map(|(p, q)| sign(s * p + t - q)).collect();
    let sum_sign: f64 = signs.iter().sum();
    let sum_sign_a: f64 = signs.iter().zip(a).map(|(g, p)| g * p).sum();
    let loss = a.iter().zip(b).map(|(p, q)| (s * p + t - q).abs()).sum::<f64>() / n;
    let grad = (0..a.len())
        .map(|j| {
            let ds = ((b[j] - mb) * var - cov * 2.0 * (a[j] - ma)) / (var * var);
            let dt = -ds * ma - s / n;
            (ds * sum_sign_a + s * signs[j] + dt * sum_sign) / n
        })
        .collect();
    Ok((loss, ImageF::from_vec(y_hat.width(), y_hat.height(), y_hat.channels(), grad)?))
}

/// Perceptual distance: per tapped layer, the mean absolute feature
/// difference, summed over taps.
pub fn perceptual_loss(y_hat: &ImageF, y: &ImageF, stack: &FeatureStack) -> Result<f64> {
    stack.loss(y_hat, y)
}

pub fn perceptual_loss_grad(y_hat: &ImageF, y: &ImageF, stack: &FeatureStack) -> Result<(f64, ImageF)> {
    stack.loss_with_grad(y_hat, y)
}

/// Albedo term plus packed roughness/metallic term.
pub fn material_loss(
    gt_albedo: &ImageF,
    pred_albedo: &ImageF,
    gt_rm: &ImageF,
    pred_rm: &ImageF,
    stack: &FeatureStack,
) -> Result<f64> {
    Ok(perceptual_loss(pred_albedo, gt_albedo, stack)? + perceptual_loss(pred_rm, gt_rm, stack)?)
}

pub fn material_maps_loss(pred: &MaterialMaps, gt: &MaterialMaps, stack: &FeatureStack) -> Result<f64> {
    material_loss(&gt.albedo, &pred.albedo, &gt.rm, &pred.rm, stack)
}

/// Gradient of a scalar with respect to both material maps. The RM
/// gradient is packed like the map itself: roughness, metallic, zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialGrad {
    pub albedo: ImageF,
    pub rm: ImageF,
}

/// Perceptual distance between renders of `pred` and `gt` sharing the
/// same geometry, camera and light.
pub fn rerender_loss(
    pred: &MaterialMaps,
    gt: &MaterialMaps,
    gbuf: &GBuffer,
    camera: &Camera,
    pre: &PrefilteredEnv,
    stack: &FeatureStack,
) -> Result<f64> {
    let a = render_view(gbuf, pred, pre, camera)?;
    let b = render_view(gbuf, gt, pre, camera)?;
    perceptual_loss(&a, &b, stack)
}

/// [`rerender_loss`] with its gradient with respect to `pred`.
pub fn rerender_loss_grad(
    pred: &MaterialMaps,
    gt: &MaterialMaps,
    gbuf: &GBuffer,
    camera: &Camera,
    pre: &PrefilteredEnv,
    stack: &FeatureStack,
) -> Result<(f64, MaterialGrad)> {
    let target = render_view(gbuf, gt, pre, camera)?;
    image_loss_material_grad(pred, gbuf, camera, pre, |img| perceptual_loss_grad(img, &target, stack))
}

/// Chains an image-space loss gradient through the renderer to the
/// material maps of `pred`.
pub fn image_loss_material_grad(
    pred: &MaterialMaps,
    gbuf: &GBuffer,
    camera: &Camera,
    pre: &PrefilteredEnv,
    image_loss: impl FnOnce(&ImageF) -> Result<(f64, ImageF)>,
) -> Result<(f64, MaterialGrad)> {
    let (img, shade) = render_view_with_grad(gbuf, pred, pre, camera)?;
    let (loss, g_img) = image_loss(&img)?;
    let (w, h) = (pred.width(), pred.height());
    let mut albedo = ImageF::zeros(w, h, 3)?;
    let mut rm = ImageF::zeros(w, h, 3)?;
    for (i, sg) in shade.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let g = g_img.pixel(x, y);
        let g = glam::DVec3::new(g[0], g[1], g[2]);
        albedo.pixel_mut(x, y).copy_from_slice(&(g * sg.d_albedo).to_array());
        let px = rm.pixel_mut(x, y);
        px[0] = g.dot(sg.d_roughness);
        px[1] = g.dot(sg.d_metallic);
    }
    Ok((loss, MaterialGrad { albedo, rm }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, w: usize, h: usize) -> ImageF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageF::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
    }

    #[test]
    fn l1_of_constant_images() {
        let a = ImageF::zeros(4, 3, 3).unwrap();
        let b = ImageF::filled(4, 3, 3, 0.25).unwrap();
        assert_eq!(l1_loss(&a, &b).unwrap(), 0.25);
    }

    #[test]
    fn identity_stack_equals_l1_bitwise() {
        for seed in 0..5 {
            let (a, b) = (image(seed, 7, 5), image(seed + 100, 7, 5));
            let p = perceptual_loss(&a, &b, &FeatureStack::identity(3)).unwrap();
            assert_eq!(p, l1_loss(&a, &b).unwrap());
        }
    }

    #[test]
    fn ssi_absorbs_affine_maps() {
        let y = image(1, 8, 8);
        let z = y.map(|v| 3.0 * v + 0.2);
        assert!(ssi_loss(&y, &z).unwrap() < 1e-9);
        let x = image(2, 8, 8);
        let base = ssi_loss(&x, &y).unwrap();
        for &(s, t) in &[(1e-3 * 1.5, -4.0), (0.7, 0.3), (25.0, 1.0)] {
            let v = ssi_loss(&x.map(|v| s * v + t), &y).unwrap();
            assert!((v - base).abs() < 1e-9, "{v} vs {base}");
        }
    }

    #[test]
    fn ssi_matches_normal_equations() {
        let (x, y) = (image(3, 8, 8), image(4, 8, 8));
        // [sum a^2, sum a; sum a, n] [s t]^T = [sum ab, sum b]^T solved by Cramer's rule.
        let (mut saa, mut sa, mut sab, mut sb) = (0.0, 0.0, 0.0, 0.0);
        for (a, b) in x.data().iter().zip(y.data()) {
            saa += a * a;
            sa += a;
            sab += a * b;
            sb += b;
        }
        let n = x.data().len() as f64;
        let det = saa * n - sa * sa;
        let s = (sab * n - sa * sb) / det;
        let t = (saa * sb - sa * sab) / det;
        let oracle: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (s * a + t - b).abs()).sum::<f64>() / n;
        assert!((ssi_loss(&x, &y).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssi_rejects_constant_prediction() {
        let c = ImageF::filled(4, 4, 3, 0.3).unwrap();
        assert!(matches!(ssi_loss(&c, &image(1, 4, 4)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn l1_and_ssi_gradients_match_central_differences() {
        let (x, y) = (image(8, 5, 4), image(9, 5, 4));
        let (_, g1) = l1_loss_grad(&x, &y).unwrap();
        let (_, g2) = ssi_loss_grad(&x, &y).unwrap();
        let h = 1e-7;
        for i in [0, 7, 23, 59] {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd1 = (l1_loss(&p, &y).unwrap() - l1_loss(&m, &y).unwrap()) / (2.0 * h);
            let fd2 = (ssi_loss(&p, &y).unwrap() - ssi_loss(&m, &y).unwrap()) / (2.0 * h);
            assert!((fd1 - g1.data()[i]).abs() < 1e-6);
            assert!((fd2 - g2.data()[i]).abs() <= 1e-3 * fd2.abs().max(1e-6), "{fd2} vs {}", g2.data()[i]);
        }
    }

    #[test]
    fn material_loss_is_additive() {
        let stack = FeatureStack::random(2, 3, &[4, 4, 4], vec![1, 3]).unwrap();
        let (a, b, c, d) = (image(1, 12, 12), image(2, 12, 12), image(3, 12, 12), image(4, 12, 12));
        assert_eq!(material_loss(&a, &a, &c, &c, &stack).unwrap(), 0.0);
        let only_albedo = material_loss(&a, &b, &c, &c, &stack).unwrap();
        assert_eq!(only_albedo, perceptual_loss(&b, &a, &stack).unwrap());
        let both = material_loss(&a, &b, &c, &d, &stack).unwrap();
        let sep = perceptual_loss(&b, &a, &stack).unwrap() + perceptual_loss(&d, &c, &stack).unwrap();
        assert!((both - sep).abs() < 1e-9);
    }
}
