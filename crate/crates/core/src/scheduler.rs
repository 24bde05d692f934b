//! Deterministic DDIM scheduler math: beta schedules, timestep spacing,
//! prediction-type conversion and the eta = 0 update.
//!
//! Timesteps are 0-indexed: the noisiest training step is `T - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaSchedule {
    Linear,
    /// Linear in `sqrt(beta)`.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: BetaSchedule,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 0.00085, 0.012, BetaSchedule::ScaledLinear).expect("default schedule")
    }
}

impl NoiseSchedule {
    pub fn new(train_steps: usize, beta_start: f64, beta_end: f64, kind: BetaSchedule) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && (beta_start < beta_end || train_steps == 1)) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start < end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let last = (train_steps - 1).max(1) as f64;
        let betas: Vec<f64> = (0..train_steps)
            .map(|t| {
                let f = t as f64 / last;
                match kind {
                    BetaSchedule::Linear => beta_start + (beta_end - beta_start) * f,
                    BetaSchedule::ScaledLinear => {
                        let s = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * f;
                        s * s
                    }
                }
            })
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            kind,
            beta_start,
            beta_end,
            betas,
            alphas_cumprod,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// Cumulative signal fraction; `alpha_bar(-1) = 1`.
    pub fn alpha_bar(&self, t: i64) -> Result<f64> {
        match t {
            -1 => Ok(1.0),
            t if t >= 0 && (t as usize) < self.train_steps() => Ok(self.alphas_cumprod[t as usize]),
            t => Err(Error::InvalidArgument(format!(
                "timestep {t} outside -1..{}",
                self.train_steps()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Spacing {
    Leading { steps_offset: usize },
    Trailing,
}

/// Descending inference timesteps for `steps` steps out of `train_steps`.
pub fn make_timesteps(train_steps: usize, steps: usize, spacing: Spacing) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= steps <= {train_steps}, got {steps}"
        )));
    }
    match spacing {
        Spacing::Leading { steps_offset } => {
            let ratio = train_steps / steps;
            let ts: Vec<usize> = (0..steps).rev().map(|i| i * ratio + steps_offset).collect();
            if ts[0] >= train_steps {
                return Err(Error::InvalidArgument(format!(
                    "steps_offset {steps_offset} pushes timestep {} past {}",
                    ts[0],
                    train_steps - 1
                )));
            }
            Ok(ts)
        }
        Spacing::Trailing => {
            let ratio = train_steps as f64 / steps as f64;
            Ok((0..steps)
                .map(|i| (train_steps as f64 - i as f64 * ratio).round_ties_even() as usize - 1)
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Epsilon,
    V,
    X0,
}

/// Clean-sample and noise estimates recovered from one model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Converted {
    pub x0: Vec<f64>,
    pub epsilon: Vec<f64>,
}

pub fn convert_prediction(
    model_out: &[f64],
    x_t: &[f64],
    t: usize,
    kind: Prediction,
    schedule: &NoiseSchedule,
) -> Result<Converted> {
    if model_out.len() != x_t.len() {
        return Err(Error::ShapeMismatch(format!(
            "model output {} vs sample {}",
            model_out.len(),
            x_t.len()
        )));
    }
    let ab = schedule.alpha_bar(t as i64)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let pairs = model_out.iter().zip(x_t);
    let (x0, epsilon) = match kind {
        Prediction::Epsilon => {
            if ab < 1e-12 {
                return Err(Error::IllPosed(format!("alpha_bar({t}) = {ab:e} leaves no signal to recover")));
            }
            (pairs.clone().map(|(e, x)| (x - sn * e) / sa).collect(), model_out.to_vec())
        }
        Prediction::V => (
            pairs.clone().map(|(v, x)| sa * x - sn * v).collect(),
            pairs.map(|(v, x)| sa * v + sn * x).collect(),
        ),
        Prediction::X0 => {
            if sn == 0.0 {
                return Err(Error::IllPosed(format!("alpha_bar({t}) = 1 leaves no noise to recover")));
            }
            (model_out.to_vec(), pairs.map(|(x0, x)| (x - sa * x0) / sn).collect())
        }
    };
    Ok(Converted { x0, epsilon })
}

/// Forward noising `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn add_noise(x0: &[f64], epsilon: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let ab = schedule.alpha_bar(t as i64)?;
    Ok(x0.iter().zip(epsilon).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect())
}

/// Deterministic update to `t_prev` (`-1` for the final clean sample).
pub fn ddim_step(x0: &[f64], epsilon: &[f64], t_prev: i64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t_prev == -1 {
        return Ok(x0.to_vec());
    }
    let ab = schedule.alpha_bar(t_prev)?;
    Ok(x0.iter().zip(epsilon).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect())
}

/// A denoiser: maps the noisy latent stack, the conditioning stack and a
/// timestep to a prediction shaped like the latent.
pub trait DenoiseModel {
    fn predict(&mut self, latent: &[ImageF], conditioning: &[ImageF], t: usize) -> Result<Vec<ImageF>>;
}

impl<F> DenoiseModel for F
where
    F: FnMut(&[ImageF], &[ImageF], usize) -> Result<Vec<ImageF>>,
{
    fn predict(&mut self, latent: &[ImageF], conditioning: &[ImageF], t: usize) -> Result<Vec<ImageF>> {
        self(latent, conditioning, t)
    }
}

fn flatten(stack: &[ImageF]) -> Vec<f64> {
    stack.iter().flat_map(|i| i.data().iter().copied()).collect()
}

fn unflatten(data: &[f64], like: &[ImageF]) -> Result<Vec<ImageF>> {
    let mut off = 0;
    like.iter()
        .map(|i| {
            let n = i.data().len();
            let img = ImageF::from_vec(i.width(), i.height(), i.channels(), data[off..off + n].to_vec());
            off += n;
            img
        })
        .collect()
}

fn check_stack(out: &[ImageF], like: &[ImageF]) -> Result<()> {
    if out.len() != like.len() || out.iter().zip(like).any(|(a, b)| !a.same_shape(b)) {
        return Err(Error::Model("prediction stack shape differs from the latent".into()));
    }
    Ok(())
}

/// Zero-latent DDIM sampling over explicit descending `timesteps`.
pub fn sample(
    model: &mut dyn DenoiseModel,
    conditioning: &[ImageF],
    latent_shapes: &[(usize, usize, usize)],
    timesteps: &[usize],
    kind: Prediction,
    schedule: &NoiseSchedule,
) -> Result<Vec<ImageF>> {
    if timesteps.windows(2).any(|w| w[1] >= w[0]) || timesteps.is_empty() {
        return Err(Error::InvalidArgument("timesteps must be nonempty and strictly descending".into()));
    }
    let mut latent = latent_shapes
        .iter()
        .map(|&(w, h, c)| ImageF::zeros(w, h, c))
        .collect::<Result<Vec<_>>>()?;
    for (k, &t) in timesteps.iter().enumerate() {
        let pred = model.predict(&latent, conditioning, t)?;
        check_stack(&pred, &latent)?;
        let conv = convert_prediction(&flatten(&pred), &flatten(&latent), t, kind, schedule)?;
        let t_prev = timesteps.get(k + 1).map_or(-1, |&p| p as i64);
        latent = unflatten(&ddim_step(&conv.x0, &conv.epsilon, t_prev, schedule)?, &latent)?;
    }
    Ok(latent)
}

/// One model call at the noisiest timestep on an all-zero latent.
/// Only trailing spacing reaches that timestep, so leading is rejected.
pub fn single_step_infer(
    model: &mut dyn DenoiseModel,
    conditioning: &[ImageF],
    latent_shapes: &[(usize, usize, usize)],
    kind: Prediction,
    spacing: Spacing,
    schedule: &NoiseSchedule,
) -> Result<Vec<ImageF>> {
    if spacing != Spacing::Trailing {
        return Err(Error::InvalidArgument("single-step inference requires trailing spacing".into()));
    }
    let ts = make_timesteps(schedule.train_steps(), 1, spacing)?;
    sample(model, conditioning, latent_shapes, &ts, kind, schedule)
}

/// How far the noise level a schedule assumes at `t` is from a pure-noise
/// input (unit variance, no signal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMismatch {
    pub timestep: usize,
    pub alpha_bar: f64,
    /// `sqrt(1 - alpha_bar)`.
    pub noise_std: f64,
    /// `1 / (1 - alpha_bar)`: actual over assumed noise variance.
    pub variance_ratio: f64,
    /// `1 / sqrt(1 - alpha_bar)`.
    pub std_ratio: f64,
}

pub fn noise_mismatch(schedule: &NoiseSchedule, t: usize) -> Result<NoiseMismatch> {
    let ab = schedule.alpha_bar(t as i64)?;
    let noise_std = (1.0 - ab).sqrt();
    Ok(NoiseMismatch {
        timestep: t,
        alpha_bar: ab,
        noise_std,
        variance_ratio: 1.0 / (1.0 - ab),
        std_ratio: 1.0 / noise_std,
    })
}

/// Reference vectors for one `(T, N, spacing)` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDump {
    pub train_steps: usize,
    pub steps: usize,
    pub spacing: Spacing,
    pub beta_schedule: BetaSchedule,
    pub beta_start: f64,
    pub beta_end: f64,
    pub timesteps: Vec<usize>,
    pub alpha_bar: Vec<f64>,
    pub first_step_mismatch: NoiseMismatch,
}

pub fn dump(schedule: &NoiseSchedule, steps: usize, spacing: Spacing) -> Result<ScheduleDump> {
    let timesteps = make_timesteps(schedule.train_steps(), steps, spacing)?;
    let alpha_bar = timesteps.iter().map(|&t| schedule.alphas_cumprod[t]).collect();
    Ok(ScheduleDump {
        train_steps: schedule.train_steps(),
        steps,
        spacing,
        beta_schedule: schedule.kind,
        beta_start: schedule.beta_start,
        beta_end: schedule.beta_end,
        first_step_mismatch: noise_mismatch(schedule, timesteps[0])?,
        timesteps,
        alpha_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_timesteps() {
        let lead = Spacing::Leading { steps_offset: 1 };
        assert_eq!(make_timesteps(1000, 1, lead).unwrap(), vec![1]);
        assert_eq!(make_timesteps(1000, 1, Spacing::Trailing).unwrap(), vec![999]);
        assert_eq!(make_timesteps(1000, 4, Spacing::Trailing).unwrap(), vec![999, 749, 499, 249]);
        assert_eq!(make_timesteps(1000, 4, lead).unwrap(), vec![751, 501, 251, 1]);
        assert_eq!(make_timesteps(10, 3, Spacing::Trailing).unwrap(), vec![9, 6, 2]);
        assert!(make_timesteps(10, 11, Spacing::Trailing).is_err());
        assert!(make_timesteps(10, 1, Spacing::Leading { steps_offset: 10 }).is_err());
        for n in 1..=1000 {
            let ts = make_timesteps(1000, n, Spacing::Trailing).unwrap();
            assert_eq!(ts[0], 999);
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.train_steps(), 1000);
        assert!((s.betas()[0] - 0.00085).abs() < 1e-15);
        assert!((s.betas()[999] - 0.012).abs() < 1e-15);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alphas_cumprod().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.alphas_cumprod()[0], 1.0 - s.betas()[0]);
    }

    #[test]
    fn leading_single_step_mismatch() {
        let s = NoiseSchedule::default();
        let m = noise_mismatch(&s, 1).unwrap();
        assert!(m.variance_ratio > 100.0, "{m:?}");
        let oracle = 1.0 / (1.0 - (1.0 - 0.00085) * (1.0 - s.betas()[1]));
        assert!((m.variance_ratio - oracle).abs() < 1e-9 * oracle);
    }

    #[test]
    fn conversions_round_trip() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -0.7, 1.2, 0.0];
        let eps = [0.5, 1.5, -0.25, -2.0];
        for t in [0, 1, 250, 999] {
            let ab = s.alpha_bar(t as i64).unwrap();
            let x_t = add_noise(&x0, &eps, t, &s).unwrap();
            let v: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| ab.sqrt() * e - (1.0 - ab).sqrt() * x).collect();
            for (kind, out) in [(Prediction::Epsilon, eps.to_vec()), (Prediction::V, v), (Prediction::X0, x0.to_vec())] {
                let c = convert_prediction(&out, &x_t, t, kind, &s).unwrap();
                for i in 0..4 {
                    assert!((c.x0[i] - x0[i]).abs() < 1e-6, "{kind:?} t={t}");
                    assert!((c.epsilon[i] - eps[i]).abs() < 1e-6, "{kind:?} t={t}");
                }
            }
        }
    }

    #[test]
    fn zeros_input_v_prediction() {
        let s = NoiseSchedule::default();
        let c = convert_prediction(&[2.0], &[0.0], 999, Prediction::V, &s).unwrap();
        let ab = s.alpha_bar(999).unwrap();
        assert_eq!(c.x0[0], -(1.0 - ab).sqrt() * 2.0);
    }

    #[test]
    fn epsilon_guard() {
        let s = NoiseSchedule::new(1000, 0.5, 0.9, BetaSchedule::Linear).unwrap();
        assert!(s.alpha_bar(999).unwrap() < 1e-12);
        assert!(matches!(
            convert_prediction(&[0.0], &[0.0], 999, Prediction::Epsilon, &s),
            Err(Error::IllPosed(_))
        ));
    }

    #[test]
    fn final_step_returns_x0() {
        let s = NoiseSchedule::default();
        assert_eq!(ddim_step(&[0.1, 0.2], &[5.0, -5.0], -1, &s).unwrap(), vec![0.1, 0.2]);
    }

    #[test]
    fn single_step_paths() {
        let s = NoiseSchedule::default();
        let cond = vec![ImageF::filled(3, 2, 3, 0.4).unwrap()];
        let shapes = [(3, 2, 3)];
        let mut constant_v = |lat: &[ImageF], _: &[ImageF], _t: usize| -> Result<Vec<ImageF>> {
            Ok(lat.iter().map(|l| ImageF::filled(l.width(), l.height(), l.channels(), 0.5).unwrap()).collect())
        };
        let out = single_step_infer(&mut constant_v, &cond, &shapes, Prediction::V, Spacing::Trailing, &s).unwrap();
        let expect = -(1.0 - s.alpha_bar(999).unwrap()).sqrt() * 0.5;
        assert!(out[0].data().iter().all(|&v| v == expect));

        let mut echo = |_: &[ImageF], c: &[ImageF], _t: usize| -> Result<Vec<ImageF>> { Ok(c.to_vec()) };
        let out = single_step_infer(&mut echo, &cond, &shapes, Prediction::X0, Spacing::Trailing, &s).unwrap();
        assert_eq!(out, cond);
        let multi = sample(&mut echo, &cond, &shapes, &[999], Prediction::X0, &s).unwrap();
        assert_eq!(multi, out);

        let lead = Spacing::Leading { steps_offset: 1 };
        assert!(single_step_infer(&mut echo, &cond, &shapes, Prediction::X0, lead, &s).is_err());
    }

    #[test]
    fn oracle_trajectory_tracks_x0() {
        let s = NoiseSchedule::new(1000, 1e-4, 0.02, BetaSchedule::Linear).unwrap();
        let target = ImageF::from_fn(4, 4, |x, y| [x as f64 * 0.1, y as f64 * 0.2, 0.5]).unwrap();
        let ts = make_timesteps(1000, 50, Spacing::Trailing).unwrap();
        let mut seen = Vec::new();
        let oracle = |lat: &[ImageF], _: &[ImageF], t: usize| -> Result<Vec<ImageF>> {
            let ab = s.alpha_bar(t as i64).unwrap();
            let eps = lat[0]
                .data()
                .iter()
                .zip(target.data())
                .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            Ok(vec![ImageF::from_vec(4, 4, 3, eps).unwrap()])
        };
        let mut tracking = |lat: &[ImageF], c: &[ImageF], t: usize| -> Result<Vec<ImageF>> {
            let out = oracle(lat, c, t)?;
            let conv = convert_prediction(out[0].data(), lat[0].data(), t, Prediction::Epsilon, &s)?;
            seen.push(conv.x0.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            Ok(out)
        };
        let out = sample(&mut tracking, &[], &[(4, 4, 3)], &ts, Prediction::Epsilon, &s).unwrap();
        assert_eq!(seen.len(), 50);
        assert!(seen.iter().all(|&e| e < 1e-6), "{seen:?}");
        assert!(out[0].data().iter().zip(target.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
