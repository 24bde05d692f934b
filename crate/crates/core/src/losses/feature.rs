//! Convolutional feature stacks for the perceptual loss.
//!
//! Weight file layout (`FSTK`, little-endian):
//!
//! ```text
//! magic   b"FSTK"
//! u32     layer count
//! per layer:
//!   u32 c_out, u32 c_in, u32 k_h, u32 k_w, u32 stride, u32 pad, u32 nonlinearity (0 = none, 1 = ReLU)
//!   f32 weights[c_out * c_in * k_h * k_w]   (out, in, row, col order)
//!   f32 bias[c_out]
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageF;

/// Channel-major feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_image(img: &ImageF) -> Self {
        let (w, h, c) = img.dims();
        let mut t = Self::zeros(c, h, w);
        for (i, px) in img.data().chunks_exact(c).enumerate() {
            for (k, v) in px.iter().enumerate() {
                t.data[k * w * h + i] = *v;
            }
        }
        t
    }

    pub fn to_image(&self) -> Result<ImageF> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![0.0; w * h * c];
        for k in 0..c {
            for i in 0..w * h {
                data[i * c + k] = self.data[k * w * h + i];
            }
        }
        ImageF::from_vec(w, h, c, data)
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
    /// `[c_out][c_in][k_h][k_w]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn validate(&self) -> Result<()> {
        if self.c_out == 0 || self.c_in == 0 || self.k_h == 0 || self.k_w == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument("conv layer has a zero dimension".into()));
        }
        if self.weights.len() != self.c_out * self.c_in * self.k_h * self.k_w || self.bias.len() != self.c_out {
            return Err(Error::ShapeMismatch("conv layer weight count".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("conv layer weights must be finite".into()));
        }
        Ok(())
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < self.k_h || pw < self.k_w {
            return None;
        }
        Some(((ph - self.k_h) / self.stride + 1, (pw - self.k_w) / self.stride + 1))
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.c_in + i) * self.k_h + ky) * self.k_w + kx]
    }

    /// Pre-activation output.
    fn forward(&self, input: &Tensor) -> Tensor {
        let (oh, ow) = self.output_dims(input.height, input.width).expect("checked dims");
        let mut out = Tensor::zeros(self.c_out, oh, ow);
        out.data.par_chunks_mut(oh * ow).enumerate().for_each(|(o, plane)| {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.c_in {
                        for ky in 0..self.k_h {
                            let iy = (y * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= input.height as isize {
                                continue;
                            }
                            for kx in 0..self.k_w {
                                let ix = (x * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= input.width as isize {
                                    continue;
                                }
                                acc += self.w(o, i, ky, kx) * input.at(i, iy as usize, ix as usize);
                            }
                        }
                    }
                    plane[y * ow + x] = acc;
                }
            }
        });
        out
    }

    /// Gradient with respect to the layer input, given the gradient of the
    /// pre-activation output.
    fn backward_input(&self, grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
        let mut g = Tensor::zeros(self.c_in, in_h, in_w);
        let (oh, ow) = (grad_out.height, grad_out.width);
        g.data.par_chunks_mut(in_h * in_w).enumerate().for_each(|(i, plane)| {
            for o in 0..self.c_out {
                for y in 0..oh {
                    for x in 0..ow {
                        let go = grad_out.at(o, y, x);
                        if go == 0.0 {
                            continue;
                        }
                        for ky in 0..self.k_h {
                            let iy = (y * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= in_h as isize {
                                continue;
                            }
                            for kx in 0..self.k_w {
                                let ix = (x * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= in_w as isize {
                                    continue;
                                }
                                plane[iy as usize * in_w + ix as usize] += self.w(o, i, ky, kx) * go;
                            }
                        }
                    }
                }
            }
        });
        g
    }
}

/// Where a tapped feature is read relative to the layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TapPoint {
    #[default]
    PostActivation,
    PreActivation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    layers: Vec<ConvLayer>,
    /// 1-based layer indices, ascending.
    taps: Vec<usize>,
    tap_point: TapPoint,
}

/// Per-layer activations from one forward pass.
struct Activations {
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
}

impl FeatureStack {
    pub fn new(layers: Vec<ConvLayer>, taps: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("feature stack has no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            l.validate()?;
            if k > 0 && l.c_in != layers[k - 1].c_out {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} expects {} channels, previous layer emits {}",
                    k + 1,
                    l.c_in,
                    layers[k - 1].c_out
                )));
            }
        }
        let mut taps = taps;
        taps.sort_unstable();
        taps.dedup();
        if taps.is_empty() {
            return Err(Error::InvalidArgument("feature stack needs at least one tap".into()));
        }
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > layers.len()) {
            return Err(Error::InvalidArgument(format!(
                "tap {bad} out of range 1..={}",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            taps,
            tap_point: TapPoint::default(),
        })
    }

    pub fn with_tap_point(mut self, tap_point: TapPoint) -> Self {
        self.tap_point = tap_point;
        self
    }

    pub fn with_taps(self, taps: Vec<usize>) -> Result<Self> {
        let tp = self.tap_point;
        Ok(Self::new(self.layers, taps)?.with_tap_point(tp))
    }

    /// Single 1x1 identity convolution without nonlinearity, tapped once.
    /// The perceptual loss then reduces to the mean absolute difference.
    pub fn identity(channels: usize) -> Self {
        let mut weights = vec![0.0; channels * channels];
        for c in 0..channels {
            weights[c * channels + c] = 1.0;
        }
        let layer = ConvLayer {
            c_out: channels,
            c_in: channels,
            k_h: 1,
            k_w: 1,
            stride: 1,
            pad: 0,
            relu: false,
            weights,
            bias: vec![0.0; channels],
        };
        Self::new(vec![layer], vec![1]).expect("identity stack")
    }

    /// Seeded random 3x3 convolutions with ReLU, `widths.len()` layers.
    /// Every second layer from the third on has stride 2.
    pub fn random(seed: u64, in_channels: usize, widths: &[usize], taps: Vec<usize>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for (k, &c_out) in widths.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weights = (0..c_out * c_in * 9).map(|_| rng.gen_range(-bound..bound)).collect();
            let bias = (0..c_out).map(|_| rng.gen_range(-0.05..0.05)).collect();
            layers.push(ConvLayer {
                c_out,
                c_in,
                k_h: 3,
                k_w: 3,
                stride: if k >= 2 && k % 2 == 0 { 2 } else { 1 },
                pad: 1,
                relu: true,
                weights,
                bias,
            });
            c_in = c_out;
        }
        Self::new(layers, taps)
    }

    /// Fixed 8-layer random-filter stack tapped at layers 2, 4, 6 and 8.
    pub fn random_default(in_channels: usize) -> Self {
        Self::random(0x5eed, in_channels, &[8, 8, 16, 16, 32, 32, 32, 32], vec![2, 4, 6, 8])
            .expect("default random stack")
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn tap_point(&self) -> TapPoint {
        self.tap_point
    }

    pub fn has_nonlinearity(&self) -> bool {
        self.layers.iter().any(|l| l.relu)
    }

    /// Output shape `(C, H, W)` of every layer for an input of `h x w`.
    pub fn layer_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let (mut h, mut w) = (h, w);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let (oh, ow) = l.output_dims(h, w).ok_or_else(|| {
                Error::ShapeMismatch(format!("input {h}x{w} too small for layer {}", k + 1))
            })?;
            shapes.push((l.c_out, oh, ow));
            h = oh;
            w = ow;
        }
        Ok(shapes)
    }

    fn check_input(&self, img: &ImageF) -> Result<()> {
        if img.channels() != self.layers[0].c_in {
            return Err(Error::ShapeMismatch(format!(
                "stack expects {} channels, image has {}",
                self.layers[0].c_in,
                img.channels()
            )));
        }
        self.layer_shapes(img.height(), img.width()).map(|_| ())
    }

    fn last_tap(&self) -> usize {
        *self.taps.last().expect("taps nonempty")
    }

    fn run(&self, img: &ImageF) -> Activations {
        let mut x = Tensor::from_image(img);
        let mut pre = Vec::with_capacity(self.last_tap());
        let mut post = Vec::with_capacity(self.last_tap());
        for layer in &self.layers[..self.last_tap()] {
            let z = layer.forward(&x);
            x = if layer.relu {
                Tensor {
                    data: z.data.iter().map(|v| v.max(0.0)).collect(),
                    ..z.clone()
                }
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(x.clone());
        }
        Activations { pre, post }
    }

    fn tapped<'a>(&self, acts: &'a Activations, layer: usize) -> &'a Tensor {
        match self.tap_point {
            TapPoint::PostActivation => &acts.post[layer - 1],
            TapPoint::PreActivation => &acts.pre[layer - 1],
        }
    }

    /// Tapped feature tensors, in tap order.
    pub fn features(&self, img: &ImageF) -> Result<Vec<Tensor>> {
        self.check_input(img)?;
        let acts = self.run(img);
        Ok(self.taps.iter().map(|&t| self.tapped(&acts, t).clone()).collect())
    }

    /// Sum over taps of the mean absolute feature difference.
    pub fn loss(&self, y_hat: &ImageF, y: &ImageF) -> Result<f64> {
        y_hat.ensure_same_shape(y, "perceptual loss")?;
        self.check_input(y_hat)?;
        let (a, b) = (self.run(y_hat), self.run(y));
        Ok(self
            .taps
            .iter()
            .map(|&t| mean_abs_diff(&self.tapped(&a, t).data, &self.tapped(&b, t).data))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |s| s + v)))
            .unwrap_or(0.0))
    }

    /// Loss and its gradient with respect to `y_hat`. The L1 subgradient
    /// at zero difference is taken as zero.
    pub fn loss_with_grad(&self, y_hat: &ImageF, y: &ImageF) -> Result<(f64, ImageF)> {
        let loss = self.loss(y_hat, y)?;
        let (a, b) = (self.run(y_hat), self.run(y));
        let last = self.last_tap();
        let tap_grad = |layer: usize| -> Option<Tensor> {
            if !self.taps.contains(&layer) {
                return None;
            }
            let (fa, fb) = (self.tapped(&a, layer), self.tapped(&b, layer));
            let n = fa.data.len() as f64;
            Some(Tensor {
                data: fa.data.iter().zip(&fb.data).map(|(p, q)| sign(p - q) / n).collect(),
                ..fa.clone()
            })
        };
        let mut g_post = Tensor::zeros(a.post[last - 1].channels, a.post[last - 1].height, a.post[last - 1].width);
        for layer in (1..=last).rev() {
            let l = &self.layers[layer - 1];
            if self.tap_point == TapPoint::PostActivation {
                if let Some(tg) = tap_grad(layer) {
                    add_into(&mut g_post.data, &tg.data);
                }
            }
            let mut g_pre = g_post;
            if l.relu {
                for (g, z) in g_pre.data.iter_mut().zip(&a.pre[layer - 1].data) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            if self.tap_point == TapPoint::PreActivation {
                if let Some(tg) = tap_grad(layer) {
                    add_into(&mut g_pre.data, &tg.data);
                }
            }
            let (in_h, in_w) = if layer == 1 {
                (y_hat.height(), y_hat.width())
            } else {
                (a.post[layer - 2].height, a.post[layer - 2].width)
            };
            g_post = l.backward_input(&g_pre, in_h, in_w);
        }
        Ok((loss, g_post.to_image()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"FSTK".to_vec();
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            for v in [l.c_out, l.c_in, l.k_h, l.k_w, l.stride, l.pad, l.relu as usize] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Loads an `FSTK` file. Without explicit taps, a 16-layer file is
    /// tapped at layers 4, 8, 12 and 16, anything else at its last layer.
    pub fn load(path: impl AsRef<Path>, taps: Option<Vec<usize>>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, taps)
    }

    pub fn from_bytes(bytes: &[u8], taps: Option<Vec<usize>>) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != b"FSTK" {
            return Err(Error::parse(0, "missing FSTK magic"));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let mut h = [0usize; 7];
            for v in &mut h {
                *v = r.u32()? as usize;
            }
            let [c_out, c_in, k_h, k_w, stride, pad, nonlin] = h;
            if nonlin > 1 {
                return Err(Error::parse(0, format!("unknown nonlinearity flag {nonlin}")));
            }
            let n = c_out
                .checked_mul(c_in)
                .and_then(|v| v.checked_mul(k_h))
                .and_then(|v| v.checked_mul(k_w))
                .filter(|&n| n <= bytes.len())
                .ok_or_else(|| Error::parse(0, "layer weight count overflows file"))?;
            let weights = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            let bias = (0..c_out).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            layers.push(ConvLayer {
                c_out,
                c_in,
                k_h,
                k_w,
                stride,
                pad,
                relu: nonlin == 1,
                weights,
                bias,
            });
        }
        let taps = taps.unwrap_or_else(|| {
            if layers.len() == 16 {
                vec![4, 8, 12, 16]
            } else {
                vec![layers.len()]
            }
        });
        Self::new(layers, taps)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::parse(0, format!("truncated weight file at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Mean of `|a - b|` summed in slice order.
pub(crate) fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum();
    sum / a.len() as f64
}
