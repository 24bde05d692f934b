use crate::error::{Error, Result};
use crate::image::ImageF;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio for unit peak, in dB.
pub fn psnr(y_hat: &ImageF, y: &ImageF) -> Result<f64> {
    y_hat.ensure_same_shape(y, "psnr")?;
    let n = y.data().len() as f64;
    let mse = y_hat.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

fn masked_samples<'a>(
    y_hat: &'a ImageF,
    y: &'a ImageF,
    mask: &'a [bool],
    what: &str,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    y_hat.ensure_same_shape(y, what)?;
    if mask.len() != y.pixel_count() {
        return Err(Error::ShapeMismatch(format!("{what}: mask length {} vs {} pixels", mask.len(), y.pixel_count())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument(format!("{what}: empty mask")));
    }
    let c = y.channels();
    Ok(mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(move |(i, _)| (0..c).map(move |k| (y_hat.data()[i * c + k], y.data()[i * c + k]))))
}

/// PSNR restricted to pixels where `mask` is set.
pub fn psnr_masked(y_hat: &ImageF, y: &ImageF, mask: &[bool]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in masked_samples(y_hat, y, mask, "psnr")? {
        sum += (a - b) * (a - b);
        n += 1;
    }
    Ok(psnr_from_mse(sum / n as f64))
}

/// Mean absolute difference restricted to pixels where `mask` is set.
pub fn l1_masked(y_hat: &ImageF, y: &ImageF, mask: &[bool]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in masked_samples(y_hat, y, mask, "l1")? {
        sum += (a - b).abs();
        n += 1;
    }
    Ok(sum / n as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filtering of a single plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11x11 Gaussian windows
/// (sigma 1.5) and channels, for unit dynamic range.
pub fn ssim(y_hat: &ImageF, y: &ImageF) -> Result<f64> {
    y_hat.ensure_same_shape(y, "ssim")?;
    let (w, h, c) = y.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..c {
        let a: Vec<f64> = y_hat.data().iter().skip(k).step_by(c).copied().collect();
        let b: Vec<f64> = y.data().iter().skip(k).step_by(c).copied().collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
        let [ma, mb, saa, sbb, sab] = [&a, &b, &aa, &bb, &ab].map(|p| filter_valid(p, w, h, &g));
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_cap_and_twenty_db() {
        let a = ImageF::filled(8, 8, 3, 0.5).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = ImageF::filled(8, 8, 3, 0.6).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &ImageF::zeros(8, 7, 3).unwrap()).is_err());
    }

    #[test]
    fn ssim_identity_and_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = ImageF::from_fn(17, 14, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
        let b = ImageF::from_fn(17, 14, |x, y| {
            let p = a.pixel(x, y);
            [p[0] * 0.8 + 0.1, (p[1] + rng.gen::<f64>() * 0.2).min(1.0), 1.0 - p[2]]
        })
        .unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let mut g2 = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in g2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        let mut n = 0.0;
        for c in 0..3 {
            for y0 in 0..=14 - 11 {
                for x0 in 0..=17 - 11 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = g2[i][j] / s;
                            mx += wgt * a.get(x0 + j, y0 + i, c);
                            my += wgt * b.get(x0 + j, y0 + i, c);
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = g2[i][j] / s;
                            let dx = a.get(x0 + j, y0 + i, c) - mx;
                            let dy = b.get(x0 + j, y0 + i, c) - my;
                            vx += wgt * dx * dx;
                            vy += wgt * dy * dy;
                            cxy += wgt * dx * dy;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1.0;
                }
            }
        }
        let got = ssim(&a, &b).unwrap();
        assert!((got - total / n).abs() < 1e-6, "{got} vs {}", total / n);
    }

    #[test]
    fn masked_metrics() {
        let a = ImageF::filled(2, 2, 1, 0.5).unwrap();
        let mut b = a.clone();
        b.set(1, 1, 0, 0.0);
        let mask = [true, true, true, false];
        assert_eq!(psnr_masked(&a, &b, &mask).unwrap(), PSNR_CAP);
        assert_eq!(l1_masked(&a, &b, &mask).unwrap(), 0.0);
        assert!(l1_masked(&a, &b, &[false; 4]).is_err());
    }
}
