use glam::DVec3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::envlight::PrefilteredEnv;
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::losses::{image_loss_material_grad, l1_loss_grad, perceptual_loss_grad, FeatureStack};
use crate::raster::GBuffer;
use crate::shading::{render_view_with_grad, shade_dir, shade_dir_with_grad, MaterialMaps, MaterialSample};
use crate::uvspace::sample_uv_materials;

/// One rendered viewpoint handed to a decomposer.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'a> {
    pub camera: &'a Camera,
    pub gbuf: &'a GBuffer,
    /// One image per lighting condition, in a fixed light order.
    pub observations: &'a [ImageF],
}

/// Maps a batch of views to per-view albedo and packed RM maps in one call.
pub trait Decomposer {
    fn decompose(&mut self, views: &[ViewInput<'_>]) -> Result<Vec<MaterialMaps>>;
}

impl<F> Decomposer for F
where
    F: FnMut(&[ViewInput<'_>]) -> Result<Vec<MaterialMaps>>,
{
    fn decompose(&mut self, views: &[ViewInput<'_>]) -> Result<Vec<MaterialMaps>> {
        self(views)
    }
}

/// Perfect decomposer: reads ground-truth UV materials through each
/// view's interpolated UVs.
pub struct OracleDecomposer {
    uv_materials: MaterialMaps,
    valid: Vec<bool>,
}

impl OracleDecomposer {
    pub fn new(uv_materials: MaterialMaps, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != uv_materials.width() * uv_materials.height() {
            return Err(Error::ShapeMismatch("oracle validity mask does not match its maps".into()));
        }
        Ok(Self { uv_materials, valid })
    }
}

impl Decomposer for OracleDecomposer {
    fn decompose(&mut self, views: &[ViewInput<'_>]) -> Result<Vec<MaterialMaps>> {
        views
            .iter()
            .map(|v| sample_uv_materials(v.gbuf, &self.uv_materials, &self.valid))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    L1,
    Perceptual,
    /// L1 plus perceptual distance of the renders.
    RerenderComposite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Per-pixel damped Gauss-Newton on the L1 objective, by iteratively
    /// reweighted least squares. Applies to [`LossKind::L1`] only; losses
    /// that couple pixels fall back to Adam.
    Newton,
    /// Projected Adam over all pixels at once.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoverConfig {
    pub max_iters: usize,
    /// Initial Adam step; decays geometrically to 1% at `max_iters`.
    pub step: f64,
    pub loss: LossKind,
    pub optimizer: Optimizer,
    /// Number of lighting conditions used per view.
    pub lights: usize,
    /// Stop once the absolute change in loss stays below this for 25
    /// consecutive iterations.
    pub tolerance: f64,
    /// Per-pixel L1 loss, relative to the observed radiance, above which
    /// the Newton optimizer retries from further starting points.
    pub restart_tolerance: f64,
    /// Relative Jacobian residual below which a parameter is reported as
    /// not identifiable.
    pub identifiability_tol: f64,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            step: 0.05,
            loss: LossKind::L1,
            optimizer: Optimizer::Newton,
            lights: 3,
            tolerance: 1e-10,
            restart_tolerance: 1e-6,
            identifiability_tol: 1e-3,
        }
    }
}

impl RecoverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::InvalidArgument("recover step must be positive".into()));
        }
        if self.lights == 0 {
            return Err(Error::InvalidArgument("recover needs at least one light".into()));
        }
        Ok(())
    }
}

pub const INIT_ALBEDO: f64 = 0.5;
pub const INIT_METALLIC: f64 = 0.2;
pub const INIT_ROUGHNESS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverReport {
    /// Largest iteration count over pixels for the per-pixel optimizer.
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Every pixel converged, for the per-pixel optimizer.
    pub converged: bool,
    /// Median over covered pixels of the part of dL/dr (stacked over lights
    /// and channels) not explained by the albedo and metallic directions,
    /// relative to its norm.
    pub roughness_residual: f64,
    pub metallic_residual: f64,
    /// Largest magnitude of the roughness slope that flows through the
    /// prefiltered radiance. Zero for constant environments.
    pub light_roughness_slope: f64,
    pub roughness_identifiable: bool,
    pub metallic_identifiable: bool,
}

/// Inverse rendering with known geometry and lights: minimizes the chosen
/// image loss summed over lights, with every parameter kept in `[0, 1]`.
pub struct GradientDecomposer {
    lights: Vec<PrefilteredEnv>,
    config: RecoverConfig,
    stack: FeatureStack,
    reports: Vec<RecoverReport>,
}

impl GradientDecomposer {
    pub fn new(lights: Vec<PrefilteredEnv>, config: RecoverConfig) -> Result<Self> {
        config.validate()?;
        if lights.len() != config.lights {
            return Err(Error::InvalidArgument(format!(
                "config asks for {} lights, {} given",
                config.lights,
                lights.len()
            )));
        }
        Ok(Self {
            lights,
            config,
            stack: FeatureStack::random_default(3),
            reports: Vec::new(),
        })
    }

    pub fn with_stack(mut self, stack: FeatureStack) -> Self {
        self.stack = stack;
        self
    }

    /// Reports of every view decomposed so far.
    pub fn reports(&self) -> &[RecoverReport] {
        &self.reports
    }
}

impl Decomposer for GradientDecomposer {
    fn decompose(&mut self, views: &[ViewInput<'_>]) -> Result<Vec<MaterialMaps>> {
        let mut out = Vec::with_capacity(views.len());
        for v in views {
            let (maps, report) = recover_view(v, &self.lights, &self.config, &self.stack)?;
            self.reports.push(report);
            out.push(maps);
        }
        Ok(out)
    }
}

/// Iterations of negligible loss change before stopping.
const PATIENCE: usize = 25;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One step with projection onto `[0, 1]`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - Self::B1.powi(t);
        let c2 = 1.0 - Self::B2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] = (params[i] - lr * mh / (vh.sqrt() + Self::EPS)).clamp(0.0, 1.0);
        }
    }
}

fn image_loss(kind: LossKind, stack: &FeatureStack, img: &ImageF, obs: &ImageF) -> Result<(f64, ImageF)> {
    match kind {
        LossKind::L1 => l1_loss_grad(img, obs),
        LossKind::Perceptual => perceptual_loss_grad(img, obs, stack),
        LossKind::RerenderComposite => {
            let (a, mut ga) = l1_loss_grad(img, obs)?;
            let (b, gb) = perceptual_loss_grad(img, obs, stack)?;
            ga.data_mut().iter_mut().zip(gb.data()).for_each(|(x, y)| *x += y);
            Ok((a + b, ga))
        }
    }
}

fn total_loss(
    maps: &MaterialMaps,
    view: &ViewInput<'_>,
    lights: &[PrefilteredEnv],
    config: &RecoverConfig,
    stack: &FeatureStack,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = maps.albedo.data().len();
    let (mut loss, mut ga, mut grm) = (0.0, vec![0.0; n], vec![0.0; n]);
    for (pre, obs) in lights.iter().zip(view.observations) {
        let (l, g) = image_loss_material_grad(maps, view.gbuf, view.camera, pre, |img| {
            image_loss(config.loss, stack, img, obs)
        })?;
        loss += l;
        ga.iter_mut().zip(g.albedo.data()).for_each(|(a, b)| *a += b);
        grm.iter_mut().zip(g.rm.data()).for_each(|(a, b)| *a += b);
    }
    Ok((loss, ga, grm))
}

fn run_adam(
    maps: &mut MaterialMaps,
    view: &ViewInput<'_>,
    lights: &[PrefilteredEnv],
    config: &RecoverConfig,
    stack: &FeatureStack,
) -> Result<(usize, bool)> {
    let n = maps.albedo.data().len();
    let (mut adam_a, mut adam_rm) = (Adam::new(n), Adam::new(n));
    let mut last = f64::NAN;
    let mut calm = 0;
    let mut iterations = 0;
    for it in 0..config.max_iters {
        let (loss, ga, grm) = total_loss(maps, view, lights, config, stack)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        if (loss - last).abs() < config.tolerance {
            calm += 1;
            if calm >= PATIENCE {
                return Ok((iterations, true));
            }
        } else {
            calm = 0;
        }
        last = loss;
        let lr = config.step * 0.01f64.powf(it as f64 / config.max_iters as f64);
        adam_a.step(maps.albedo.data_mut(), &ga, lr, it as i32 + 1);
        adam_rm.step(maps.rm.data_mut(), &grm, lr, it as i32 + 1);
        iterations = it + 1;
    }
    Ok((iterations, false))
}

/// Residual weights are `1 / max(|res|, IRLS_FLOOR)`.
const IRLS_FLOOR: f64 = 1e-9;
const MAX_TRIALS: usize = 12;
/// Backward difference step for left-sided roughness slopes.
const LEFT_STEP: f64 = 1e-7;

/// One pixel's fitting problem: fixed geometry, one observation per light.
struct PixelFit<'a> {
    n: DVec3,
    to_viewer: DVec3,
    lights: &'a [PrefilteredEnv],
    observed: Vec<DVec3>,
}

fn to_sample(p: &[f64; 5]) -> MaterialSample {
    MaterialSample::new([p[0], p[1], p[2]], p[3], p[4])
}

impl PixelFit<'_> {
    fn loss(&self, p: &[f64; 5]) -> f64 {
        let s = to_sample(p);
        self.lights
            .iter()
            .zip(&self.observed)
            .map(|(pre, o)| (shade_dir(&s, self.n, self.to_viewer, pre) - *o).abs().element_sum())
            .sum()
    }

    /// Reweighted normal equations `(H, g)` at `p`. Roughness slopes are
    /// right-sided, or left-sided with `left` (they differ at lookup knots).
    fn normal_equations(&self, p: &[f64; 5], left: bool) -> ([[f64; 5]; 5], [f64; 5]) {
        let s = to_sample(p);
        let (mut h, mut g) = ([[0.0; 5]; 5], [0.0; 5]);
        for (pre, o) in self.lights.iter().zip(&self.observed) {
            let (l, mut sg) = shade_dir_with_grad(&s, self.n, self.to_viewer, pre);
            if left && s.roughness > LEFT_STEP {
                let below = MaterialSample {
                    roughness: s.roughness - LEFT_STEP,
                    ..s
                };
                sg.d_roughness = (l - shade_dir(&below, self.n, self.to_viewer, pre)) / LEFT_STEP;
            }
            for c in 0..3 {
                let res = l[c] - o[c];
                let w = 1.0 / res.abs().max(IRLS_FLOOR);
                let mut row = [0.0; 5];
                row[c] = sg.d_albedo[c];
                row[3] = sg.d_metallic[c];
                row[4] = sg.d_roughness[c];
                for i in 0..5 {
                    g[i] += w * row[i] * res;
                    for j in 0..5 {
                        h[i][j] += w * row[i] * row[j];
                    }
                }
            }
        }
        (h, g)
    }

    /// Levenberg-Marquardt iterations with projection onto the unit box.
    fn solve(&self, p: &mut [f64; 5], max_iters: usize, config: &RecoverConfig) -> (usize, bool) {
        let mut lambda = 1e-3;
        let mut loss = self.loss(p);
        let mut calm = 0;
        for it in 0..max_iters {
            if loss == 0.0 {
                return (it, true);
            }
            let mut delta = 0.0;
            'sides: for left in [false, true] {
                let (h, g) = self.normal_equations(p, left);
                let mut damping = lambda;
                for _ in 0..MAX_TRIALS {
                    let mut a = h;
                    for i in 0..5 {
                        a[i][i] += damping * h[i][i] + 1e-12;
                    }
                    let step = solve5(a, g.map(|v| -v));
                    let cand = step.map(|d| std::array::from_fn(|i| (p[i] + d[i]).clamp(0.0, 1.0)));
                    match cand.map(|c| (self.loss(&c), c)) {
                        Some((l, c)) if l < loss => {
                            delta = loss - l;
                            *p = c;
                            loss = l;
                            lambda = (damping / 3.0).max(1e-12);
                            break 'sides;
                        }
                        _ => damping *= 4.0,
                    }
                }
            }
            if delta < config.tolerance {
                calm += 1;
                if calm >= PATIENCE {
                    return (it + 1, true);
                }
            } else {
                calm = 0;
            }
        }
        (max_iters, false)
    }

    /// Solves from `init`, then from [`RESTART_GRID`] while the loss stays
    /// above the restart tolerance. All starts share one iteration budget.
    fn solve_multistart(&self, init: [f64; 5], config: &RecoverConfig) -> ([f64; 5], usize, bool) {
        let scale: f64 = self.observed.iter().map(|o| o.abs().element_sum()).sum::<f64>().max(1e-300);
        let starts = std::iter::once(init).chain(
            RESTART_GRID
                .iter()
                .map(|&(m, r)| [INIT_ALBEDO, INIT_ALBEDO, INIT_ALBEDO, m, r]),
        );
        let mut best: Option<([f64; 5], f64, bool)> = None;
        let mut used = 0;
        for start in starts {
            if used >= config.max_iters {
                break;
            }
            let mut p = start;
            let (iters, ok) = self.solve(&mut p, config.max_iters - used, config);
            used += iters;
            let loss = self.loss(&p);
            if best.is_none_or(|b| loss < b.1) {
                best = Some((p, loss, ok));
            }
            if loss <= config.restart_tolerance * scale {
                break;
            }
        }
        let (p, _, ok) = best.unwrap_or((init, f64::NAN, false));
        (p, used, ok)
    }
}

/// Metallic and roughness of the fallback starting points.
const RESTART_GRID: [(f64, f64); 12] = [
    (0.05, 0.1),
    (0.05, 0.3),
    (0.05, 0.7),
    (0.05, 0.9),
    (0.5, 0.1),
    (0.5, 0.3),
    (0.5, 0.7),
    (0.5, 0.9),
    (0.95, 0.1),
    (0.95, 0.3),
    (0.95, 0.7),
    (0.95, 0.9),
];

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> Option<[f64; 5]> {
    for k in 0..5 {
        let piv = (k..5).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if !(a[piv][k].abs() > 1e-300) {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..5 {
            let f = a[i][k] / a[k][k];
            for j in k..5 {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = [0.0; 5];
    for k in (0..5).rev() {
        let s: f64 = (k + 1..5).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn run_newton(
    maps: &mut MaterialMaps,
    view: &ViewInput<'_>,
    lights: &[PrefilteredEnv],
    config: &RecoverConfig,
) -> Result<(usize, bool)> {
    let (w, gbuf) = (view.gbuf.width, view.gbuf);
    let covered: Vec<usize> = (0..gbuf.mask.len()).filter(|&i| gbuf.mask[i]).collect();
    let fits: Vec<([f64; 5], usize, bool)> = covered
        .par_iter()
        .map(|&i| {
            let (x, y) = (i % w, i / w);
            let fit = PixelFit {
                n: gbuf.normal_at(x, y),
                to_viewer: view.camera.view_vector(gbuf.position_at(x, y)),
                lights,
                observed: view.observations.iter().map(|o| DVec3::from_slice(o.pixel(x, y))).collect(),
            };
            let s = maps.get(x, y);
            fit.solve_multistart([s.albedo.x, s.albedo.y, s.albedo.z, s.metallic, s.roughness], config)
        })
        .collect();
    let (mut iterations, mut converged) = (0, true);
    for (&i, (p, iters, ok)) in covered.iter().zip(&fits) {
        maps.set(i % w, i / w, &to_sample(p));
        iterations = iterations.max(*iters);
        converged &= *ok;
    }
    Ok((iterations, converged))
}

/// Recovers one view's materials from its observations.
pub fn recover_view(
    view: &ViewInput<'_>,
    lights: &[PrefilteredEnv],
    config: &RecoverConfig,
    stack: &FeatureStack,
) -> Result<(MaterialMaps, RecoverReport)> {
    config.validate()?;
    if view.observations.len() != lights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} observations for {} lights",
            view.observations.len(),
            lights.len()
        )));
    }
    let (w, h) = (view.gbuf.width, view.gbuf.height);
    for o in view.observations {
        if (o.width(), o.height(), o.channels()) != (w, h, 3) {
            return Err(Error::ShapeMismatch("observation does not match the G-buffer".into()));
        }
    }
    let init = MaterialSample::new([INIT_ALBEDO; 3], INIT_METALLIC, INIT_ROUGHNESS);
    let mut maps = MaterialMaps::constant(w, h, &init)?;
    let initial_loss = total_loss(&maps, view, lights, config, stack)?.0;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let (iterations, converged) = if config.optimizer == Optimizer::Newton && config.loss == LossKind::L1 {
        run_newton(&mut maps, view, lights, config)?
    } else {
        run_adam(&mut maps, view, lights, config, stack)?
    };
    let final_loss = total_loss(&maps, view, lights, config, stack)?.0;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: iterations });
    }

    for (i, &covered) in view.gbuf.mask.iter().enumerate() {
        if !covered {
            maps.albedo.data_mut()[i * 3..i * 3 + 3].fill(0.0);
            maps.rm.data_mut()[i * 3..i * 3 + 3].fill(0.0);
        }
    }
    let id = identifiability(&maps, view, lights)?;
    Ok((
        maps,
        RecoverReport {
            iterations,
            initial_loss,
            final_loss,
            converged,
            roughness_identifiable: id.roughness_residual >= config.identifiability_tol,
            metallic_identifiable: id.metallic_residual >= config.identifiability_tol,
            roughness_residual: id.roughness_residual,
            metallic_residual: id.metallic_residual,
            light_roughness_slope: id.light_roughness_slope,
        },
    ))
}

struct Identifiability {
    roughness_residual: f64,
    metallic_residual: f64,
    light_roughness_slope: f64,
}

/// Relative norm of `target` after removing its projection onto `basis`.
fn residual_fraction(target: &[f64], basis: &[Vec<f64>]) -> f64 {
    let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-300 {
        return 0.0;
    }
    let mut q: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut v = b.clone();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let bn = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-10 * bn.max(1e-300) {
            v.iter_mut().for_each(|x| *x /= n);
            q.push(v);
        }
    }
    let mut r = target.to_vec();
    for u in &q {
        let d: f64 = r.iter().zip(u).map(|(a, b)| a * b).sum();
        r.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
    }
    r.iter().map(|v| v * v).sum::<f64>().sqrt() / norm
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn identifiability(maps: &MaterialMaps, view: &ViewInput<'_>, lights: &[PrefilteredEnv]) -> Result<Identifiability> {
    let grads = lights
        .iter()
        .map(|pre| render_view_with_grad(view.gbuf, maps, pre, view.camera).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let (mut rr, mut mr) = (Vec::new(), Vec::new());
    let mut slope: f64 = 0.0;
    for (i, &covered) in view.gbuf.mask.iter().enumerate() {
        if !covered {
            continue;
        }
        let rows = 3 * lights.len();
        let mut cols = vec![vec![0.0; rows]; 5];
        for (l, g) in grads.iter().enumerate() {
            let sg = &g[i];
            slope = slope.max(sg.d_roughness_light.abs().max_element());
            for c in 0..3 {
                let row = 3 * l + c;
                cols[c][row] = sg.d_albedo[c];
                cols[3][row] = sg.d_metallic[c];
                cols[4][row] = sg.d_roughness[c];
            }
        }
        rr.push(residual_fraction(&cols[4], &cols[..4]));
        let others = [cols[0].clone(), cols[1].clone(), cols[2].clone(), cols[4].clone()];
        mr.push(residual_fraction(&cols[3], &others));
    }
    Ok(Identifiability {
        roughness_residual: median(rr),
        metallic_residual: median(mr),
        light_roughness_slope: slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_of_dependent_vector_is_zero() {
        let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert!(residual_fraction(&[2.0, -3.0, 0.0], &basis) < 1e-15);
        assert!((residual_fraction(&[0.0, 0.0, 5.0], &basis) - 1.0).abs() < 1e-15);
        assert_eq!(residual_fraction(&[0.0; 3], &basis), 0.0);
    }

    #[test]
    fn solve5_matches_known_solution() {
        let a = [
            [4.0, 1.0, 0.0, 0.0, 2.0],
            [1.0, 3.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 5.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 2.0, 1.0],
            [2.0, 0.0, 0.0, 1.0, 6.0],
        ];
        let x = [1.0, -2.0, 0.5, 3.0, -1.0];
        let b: [f64; 5] = std::array::from_fn(|i| (0..5).map(|j| a[i][j] * x[j]).sum());
        let got = solve5(a, b).unwrap();
        for i in 0..5 {
            assert!((got[i] - x[i]).abs() < 1e-12);
        }
        assert!(solve5([[0.0; 5]; 5], b).is_none());
    }

    #[test]
    fn newton_fits_one_pixel_exactly() {
        use crate::envlight::{EnvMap, PrefilterConfig, SpecularConfig};
        let cfg = PrefilterConfig {
            specular: SpecularConfig {
                samples_per_texel: 64,
                ..Default::default()
            },
            lut_size: 32,
            lut_samples: 256,
            ..Default::default()
        };
        let lights: Vec<PrefilteredEnv> = [[2.0, 0.5, 0.2], [0.2, 0.6, 2.5], [1.0, 1.0, 1.0]]
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let axis = DVec3::new(1.0, 0.5 * k as f64, -0.4).normalize();
                let env = EnvMap::from_fn(32, |d| DVec3::from_array(*c) * (4.0 * (d.dot(axis) - 1.0)).exp() + 0.05).unwrap();
                PrefilteredEnv::build(&env, &cfg).unwrap()
            })
            .collect();
        let (n, v) = (DVec3::new(0.2, 0.3, 1.0).normalize(), DVec3::Z);
        let truth = MaterialSample::new([0.7, 0.3, 0.5], 0.35, 0.62);
        let fit = PixelFit {
            n,
            to_viewer: v,
            lights: &lights,
            observed: lights.iter().map(|l| shade_dir(&truth, n, v, l)).collect(),
        };
        let config = RecoverConfig::default();
        let (p, iters, _) = fit.solve_multistart([INIT_ALBEDO, INIT_ALBEDO, INIT_ALBEDO, INIT_METALLIC, INIT_ROUGHNESS], &config);
        assert!(iters <= config.max_iters);
        let want = [0.7, 0.3, 0.5, 0.35, 0.62];
        for i in 0..5 {
            assert!((p[i] - want[i]).abs() < 1e-4, "{p:?}");
        }
    }

    #[test]
    fn adam_projects_onto_unit_interval() {
        let mut p = vec![0.99, 0.01];
        let mut a = Adam::new(2);
        a.step(&mut p, &[-1.0, 1.0], 0.1, 1);
        assert_eq!(p, vec![1.0, 0.0]);
    }
}
