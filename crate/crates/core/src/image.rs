//! Floating-point image container shared by every stage.
//!
//! Samples are stored row-major, interleaved by channel, top row first, in
//! linear radiometric space. The sRGB transfer only applies at the PNG
//! boundary.

use crate::error::{Error, Result};

/// Upper bound on `width * height * channels` accepted anywhere.
pub const MAX_SAMPLES: usize = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

fn checked_len(width: usize, height: usize, channels: usize) -> Result<usize> {
    if width == 0 || height == 0 || !(1..=3).contains(&channels) {
        return Err(Error::InvalidArgument(format!(
            "image must be at least 1x1 with 1..=3 channels, got {width}x{height}x{channels}"
        )));
    }
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .filter(|&n| n <= MAX_SAMPLES)
        .ok_or(Error::DimensionOverflow {
            width,
            height,
            channels,
        })
}

impl ImageF {
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        let len = checked_len(width, height, channels)?;
        Ok(Self {
            width,
            height,
            channels,
            data: vec![value; len],
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let len = checked_len(width, height, channels)?;
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height}x{channels} needs {len} samples, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn<const C: usize>(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; C],
    ) -> Result<Self> {
        let mut img = Self::zeros(width, height, C)?;
        for y in 0..height {
            for x in 0..width {
                img.pixel_mut(x, y).copy_from_slice(&f(x, y));
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y) + c;
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    /// Rows as disjoint mutable slices, for parallel writers.
    pub fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        let stride = self.width * self.channels;
        self.data.chunks_exact_mut(stride)
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let p = self.pixel(x, y);
        match self.channels {
            1 => [p[0]; 3],
            2 => [p[0], p[1], 0.0],
            _ => [p[0], p[1], p[2]],
        }
    }

    pub fn same_shape(&self, other: &ImageF) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &ImageF, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageF {
        ImageF {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> ImageF {
        self.map(|v| v * s)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Bilinear sample at continuous pixel coordinates, where pixel `(x, y)`
    /// has its center at `(x + 0.5, y + 0.5)`. Coordinates are clamped to
    /// the border.
    pub fn sample_bilinear(&self, px: f64, py: f64, out: &mut [f64]) {
        let (x0, x1, tx) = clamp_taps(px, self.width);
        let (y0, y1, ty) = clamp_taps(py, self.height);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let a = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
            let b = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
            *o = a * (1.0 - ty) + b * ty;
        }
    }

    /// Bilinear sample that only blends taps whose `weights` entry is
    /// nonzero, renormalizing the kernel. Returns `false` when no tap is
    /// usable.
    pub fn sample_bilinear_masked(&self, weights: &[bool], px: f64, py: f64, out: &mut [f64]) -> bool {
        let (x0, x1, tx) = clamp_taps(px, self.width);
        let (y0, y1, ty) = clamp_taps(py, self.height);
        let taps = [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ];
        let mut wsum = 0.0;
        out.iter_mut().for_each(|o| *o = 0.0);
        for &(x, y, w) in &taps {
            if w > 0.0 && weights[y * self.width + x] {
                wsum += w;
                for (c, o) in out.iter_mut().enumerate().take(self.channels) {
                    *o += w * self.get(x, y, c);
                }
            }
        }
        if wsum <= 0.0 {
            // Fall back to the nearest usable tap.
            let mut best: Option<(usize, usize)> = None;
            for &(x, y, _) in &taps {
                if weights[y * self.width + x] {
                    best = Some((x, y));
                    break;
                }
            }
            return match best {
                Some((x, y)) => {
                    out.iter_mut()
                        .enumerate()
                        .take(self.channels)
                        .for_each(|(c, o)| *o = self.get(x, y, c));
                    true
                }
                None => false,
            };
        }
        out.iter_mut().take(self.channels).for_each(|o| *o /= wsum);
        true
    }

    /// Resamples to a new resolution with bilinear filtering at the new
    /// pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<ImageF> {
        let mut out = ImageF::zeros(width, height, self.channels)?;
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut buf = [0.0; 3];
        for y in 0..height {
            for x in 0..width {
                self.sample_bilinear((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy, &mut buf);
                out.pixel_mut(x, y).copy_from_slice(&buf[..self.channels]);
            }
        }
        Ok(out)
    }

    /// Copies one channel out as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageF {
        ImageF {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }
}

/// Neighbouring taps and blend factor along one axis, clamp-to-edge.
#[inline]
pub(crate) fn clamp_taps(p: f64, n: usize) -> (usize, usize, f64) {
    let f = (p - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (f.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f - i0 as f64)
}

/// sRGB encoded value to linear (IEC 61966-2-1 piecewise curve).
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear value to sRGB encoded (IEC 61966-2-1 piecewise curve).
pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Reinhard tone mapping `x / (1 + x)`, used only for PNG previews.
pub fn reinhard(v: f64) -> f64 {
    let v = v.max(0.0);
    v / (1.0 + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageF::zeros(0, 4, 3).is_err());
        assert!(ImageF::zeros(4, 4, 4).is_err());
        assert!(matches!(
            ImageF::zeros(1 << 20, 1 << 20, 3),
            Err(Error::DimensionOverflow { .. })
        ));
        assert!(matches!(
            ImageF::from_vec(2, 2, 1, vec![0.0, 1.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(2))
        ));
    }

    #[test]
    fn srgb_curve_round_trips() {
        for i in 0..=255 {
            let v = i as f64 / 255.0;
            assert!((linear_to_srgb(srgb_to_linear(v)) - v).abs() < 1e-12);
        }
        assert_eq!(srgb_to_linear(0.0), 0.0);
        assert!((srgb_to_linear(1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_hits_centers_exactly() {
        let img = ImageF::from_fn(3, 2, |x, y| [x as f64 + 10.0 * y as f64]).unwrap();
        let mut out = [0.0];
        img.sample_bilinear(1.5, 1.5, &mut out);
        assert_eq!(out[0], 11.0);
        img.sample_bilinear(1.0, 1.0, &mut out);
        assert!((out[0] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn masked_bilinear_ignores_holes() {
        let img = ImageF::from_vec(2, 1, 1, vec![1.0, 100.0]).unwrap();
        let mut out = [0.0];
        assert!(img.sample_bilinear_masked(&[true, false], 1.0, 0.5, &mut out));
        assert_eq!(out[0], 1.0);
        assert!(!img.sample_bilinear_masked(&[false, false], 1.0, 0.5, &mut out));
    }
}
