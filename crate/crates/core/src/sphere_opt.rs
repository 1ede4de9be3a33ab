//! First-order optimization with rows constrained to the unit sphere: projected
//! SGD with momentum, Riesz-energy packing, the free-embedding toy problem and
//! a scale-degenerate construction for plain softmax.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_rows, random_unit_rows, simplex_etf, tangent_project_in_place, ProtoMatrix};
use crate::losses::{composite, LossSpec, RegularizerSpec};
use crate::margins::{class_margin, mean_cosine_sample_margin, min_sample_margin};
use crate::matrix::{norm, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Half-period of the cosine schedule.
    pub t_max: usize,
    pub seed: u64,
    /// History sampling interval; 0 logs only the final step.
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr0: 0.1, momentum: 0.9, weight_decay: 1e-4, steps: 50_000, t_max: 10_000, seed: 0, log_every: 1000 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidSpec(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidSpec(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.steps == 0 || self.t_max == 0 {
            return Err(Error::InvalidSpec("steps and t_max must be >= 1".into()));
        }
        Ok(())
    }

    fn logs(&self, step: usize, last: usize) -> bool {
        step == last || (self.log_every > 0 && step.is_multiple_of(self.log_every))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RieszConfig {
    /// Exponent used when `continuation` is empty.
    pub t: f64,
    /// Increasing exponents, each stage warm-started from the previous one.
    pub continuation: Vec<f64>,
    pub restarts: usize,
}

impl Default for RieszConfig {
    fn default() -> Self {
        Self { t: 16.0, continuation: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0], restarts: 5 }
    }
}

impl RieszConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::InvalidSpec(format!("t must be positive, got {}", self.t)));
        }
        if self.continuation.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidSpec("continuation exponents must be positive".into()));
        }
        if self.continuation.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidSpec("continuation exponents must be strictly increasing".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidSpec("restarts must be >= 1".into()));
        }
        Ok(())
    }

    /// Optimizer settings for one continuation stage.
    pub fn default_optim() -> OptimConfig {
        OptimConfig { lr0: 0.05, momentum: 0.9, weight_decay: 0.0, steps: 3000, t_max: 3000, seed: 0, log_every: 500 }
    }

    pub fn stages(&self) -> Vec<f64> {
        if self.continuation.is_empty() {
            vec![self.t]
        } else {
            self.continuation.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub class_margin_deg: f64,
    pub gamma_min: Option<f64>,
    pub m_samp: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<HistoryRecord>,
}

impl RunHistory {
    pub fn push(&mut self, rec: HistoryRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < rec.step));
        self.records.push(rec);
    }

    pub fn last(&self) -> Option<&HistoryRecord> {
        self.records.last()
    }

    /// Columns `step,lr,loss,class_margin_deg,gamma_min,m_samp`; absent
    /// feature statistics are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,class_margin_deg,gamma_min,m_samp\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.lr,
                r.loss,
                r.class_margin_deg,
                opt(r.gamma_min),
                opt(r.m_samp)
            );
        }
        out
    }
}

/// `lr0 (1 + cos(pi step / t_max)) / 2`, left unclamped so the schedule
/// cycles back up after each `t_max` when a run is longer than one period.
pub fn cosine_lr(step: usize, cfg: &OptimConfig) -> f64 {
    let phase = std::f64::consts::PI * step as f64 / cfg.t_max as f64;
    cfg.lr0 * 0.5 * (1.0 + phase.cos())
}

/// Momentum buffer of one sphere-constrained parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Matrix<T>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { velocity: Matrix::zeros(rows, cols) }
    }
}

/// One projected SGD step on unit rows.
///
/// The (decayed) gradient is projected onto each row's tangent space and
/// folded into the momentum buffer; rows move along the buffer and are
/// renormalized, and the buffer is re-projected onto the new tangent spaces.
pub fn sphere_sgd_step<T: Scalar>(
    params: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut SgdState<T>,
    cfg: &OptimConfig,
    step: usize,
) -> Result<()> {
    if !params.same_shape(grad) || !params.same_shape(&state.velocity) {
        return Err(Error::Shape(format!(
            "params {}x{}, grad {}x{}, state {}x{}",
            params.rows(),
            params.cols(),
            grad.rows(),
            grad.cols(),
            state.velocity.rows(),
            state.velocity.cols()
        )));
    }
    let lr = T::of(cosine_lr(step, cfg));
    let (mu, wd) = (T::of(cfg.momentum), T::of(cfg.weight_decay));
    let mut g = vec![T::zero(); params.cols()];
    for i in 0..params.rows() {
        let p = params.row_mut(i);
        for ((gi, &di), &pi) in g.iter_mut().zip(grad.row(i)).zip(p.iter()) {
            *gi = di + wd * pi;
        }
        tangent_project_in_place(p, &mut g);
        let v = state.velocity.row_mut(i);
        for (vi, &gi) in v.iter_mut().zip(&g) {
            *vi = mu * *vi + gi;
        }
        for (pi, &vi) in p.iter_mut().zip(v.iter()) {
            *pi -= lr * vi;
        }
        let n = norm(p);
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::Divergence { step, detail: format!("row {i} left the sphere (norm {n})") });
        }
        p.iter_mut().for_each(|x| *x /= n);
        tangent_project_in_place(p, v);
    }
    Ok(())
}

/// Plain SGD with momentum and L2 weight decay on an unconstrained slice.
pub fn sgd_step<T: Scalar>(params: &mut [T], grad: &[T], velocity: &mut [T], cfg: &OptimConfig, step: usize) {
    let lr = T::of(cosine_lr(step, cfg));
    let (mu, wd) = (T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Smallest pairwise distance accepted by the energy routines.
const COINCIDENT: f64 = 1e-12;

/// `sum_{i != j} |w_i - w_j|^-t` over ordered pairs, with its gradient.
pub fn riesz_energy<T: Scalar>(w: &Matrix<T>, t: T) -> Result<(T, Matrix<T>)> {
    let (k, d) = (w.rows(), w.cols());
    let two = T::of(2.0);
    let mut e = T::zero();
    let mut g = Matrix::zeros(k, d);
    let mut diff = vec![T::zero(); d];
    for i in 0..k {
        for j in i + 1..k {
            let r2 = pair_diff(w, i, j, &mut diff)?;
            let r = r2.sqrt();
            let term = r.powf(-t);
            e += two * term;
            // d/dw_i of 2 r^-t = -2 t r^(-t-2) (w_i - w_j)
            let c = -two * t * term / r2;
            for (col, &dc) in diff.iter().enumerate() {
                let gi = g.get(i, col);
                g.set(i, col, gi + c * dc);
                let gj = g.get(j, col);
                g.set(j, col, gj - c * dc);
            }
        }
    }
    if !e.is_finite() || !g.is_finite() {
        return Err(Error::Overflow(format!("Riesz energy with t={t} is not representable")));
    }
    Ok((e, g))
}

/// `log(E_t) / t`, computed by logsumexp so large exponents stay finite.
/// It has the same minimizers as the energy, with gradients of order 1/r.
pub fn riesz_log_energy<T: Scalar>(w: &Matrix<T>, t: T) -> Result<(T, Matrix<T>)> {
    let (k, d) = (w.rows(), w.cols());
    let mut diff = vec![T::zero(); d];
    let mut logs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let r2 = pair_diff(w, i, j, &mut diff)?;
            logs.push(-t * r2.ln() / T::of(2.0));
        }
    }
    let top = logs.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logs.iter().map(|&a| (a - top).exp()).sum();
    let value = (top + (T::of(2.0) * total).ln()) / t;
    let mut g = Matrix::zeros(k, d);
    let mut idx = 0;
    for i in 0..k {
        for j in i + 1..k {
            let r2 = pair_diff(w, i, j, &mut diff)?;
            // softmax weight of the pair, then d(-t/2 ln r2)/dw_i / t
            let c = -(logs[idx] - top).exp() / total / r2;
            idx += 1;
            for (col, &dc) in diff.iter().enumerate() {
                let gi = g.get(i, col);
                g.set(i, col, gi + c * dc);
                let gj = g.get(j, col);
                g.set(j, col, gj - c * dc);
            }
        }
    }
    Ok((value, g))
}

fn pair_diff<T: Scalar>(w: &Matrix<T>, i: usize, j: usize, diff: &mut [T]) -> Result<T> {
    for ((dc, &a), &b) in diff.iter_mut().zip(w.row(i)).zip(w.row(j)) {
        *dc = a - b;
    }
    let r2: T = diff.iter().map(|&x| x * x).sum();
    if !(r2 > T::of(COINCIDENT * COINCIDENT)) {
        return Err(Error::Singular(i, j));
    }
    Ok(r2)
}

/// Outcome of one restart of [`minimize_riesz`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RestartSummary {
    pub restart: usize,
    /// `log(E_t)/t` at the last continuation exponent.
    pub log_energy: f64,
    pub class_margin_deg: f64,
    /// Learning rate that ran to completion.
    pub lr0: f64,
}

#[derive(Clone, Debug)]
pub struct RieszSolution<T> {
    pub protos: ProtoMatrix<T>,
    /// Radians.
    pub class_margin: T,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
    pub history: RunHistory,
}

/// Fails unless `k >= 2` distinct unit rows fit in `R^d`.
pub fn check_packing_shape(k: usize, d: usize) -> Result<()> {
    if k < 2 || d == 0 || (d == 1 && k > 2) {
        return Err(Error::Infeasible(format!("cannot place k={k} distinct unit rows in d={d}")));
    }
    Ok(())
}

/// Lowest-energy configuration over independent restarts, each running the
/// full continuation schedule with `optim.steps` steps per exponent.
///
/// A restart whose energy stops being finite is retried with half the
/// learning rate, up to three times.
pub fn minimize_riesz<T: Scalar>(k: usize, d: usize, riesz: &RieszConfig, optim: &OptimConfig) -> Result<RieszSolution<T>> {
    check_packing_shape(k, d)?;
    riesz.validate()?;
    optim.validate()?;
    if d == 1 {
        // S^0 is {-1, 1}: nothing to optimize.
        let w = Matrix::from_rows(&[[T::one()], [-T::one()]])?;
        let log_energy = riesz_log_energy(&w, T::of(riesz.stages()[riesz.stages().len() - 1]))?.0.as_f64();
        let restarts = (0..riesz.restarts)
            .map(|restart| RestartSummary { restart, log_energy, class_margin_deg: 180.0, lr0: optim.lr0 })
            .collect();
        let protos = ProtoMatrix::unit(w)?;
        return Ok(RieszSolution {
            class_margin: class_margin(&protos)?,
            protos,
            best_restart: 0,
            restarts,
            history: RunHistory::default(),
        });
    }
    let runs: Vec<Result<(Matrix<T>, RunHistory, RestartSummary)>> = (0..riesz.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut cfg = optim.clone();
            let mut last_err = None;
            for _ in 0..3 {
                match riesz_restart(k, d, riesz, &cfg, restart) {
                    Ok(r) => return Ok(r),
                    Err(e) if e.is_numeric() => {
                        last_err = Some(e);
                        cfg.lr0 /= 2.0;
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(last_err.unwrap())
        })
        .collect();

    let mut summaries = Vec::new();
    let mut best: Option<(Matrix<T>, RunHistory, usize, f64)> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok((w, hist, summary)) => {
                if best.as_ref().is_none_or(|b| summary.log_energy < b.3) {
                    best = Some((w, hist, summary.restart, summary.log_energy));
                }
                summaries.push(summary);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((w, history, best_restart, _)) = best else {
        return Err(first_err.unwrap());
    };
    let protos = ProtoMatrix::unit(w)?;
    Ok(RieszSolution { class_margin: class_margin(&protos)?, protos, best_restart, restarts: summaries, history })
}

fn riesz_restart<T: Scalar>(
    k: usize,
    d: usize,
    riesz: &RieszConfig,
    cfg: &OptimConfig,
    restart: usize,
) -> Result<(Matrix<T>, RunHistory, RestartSummary)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let mut w: Matrix<T> = random_unit_rows(k, d, &mut rng);
    let mut history = RunHistory::default();
    let stages = riesz.stages();
    let mut value = T::zero();
    for (si, &t) in stages.iter().enumerate() {
        let t = T::of(t);
        let mut state = SgdState::new(k, d);
        let offset = si * cfg.steps;
        for step in 0..cfg.steps {
            let (v, g) = riesz_log_energy(&w, t).map_err(|e| diverged(offset + step, e))?;
            if !v.is_finite() || !g.is_finite() {
                return Err(Error::Divergence { step: offset + step, detail: format!("energy {v} at t={t}") });
            }
            sphere_sgd_step(&mut w, &g, &mut state, cfg, step)?;
            if cfg.logs(step, cfg.steps - 1) {
                history.push(HistoryRecord {
                    step: offset + step,
                    lr: cosine_lr(step, cfg),
                    loss: v.as_f64(),
                    class_margin_deg: class_margin(&w)?.as_f64().to_degrees(),
                    gamma_min: None,
                    m_samp: None,
                });
            }
        }
        value = riesz_log_energy(&w, t).map_err(|e| diverged(offset + cfg.steps, e))?.0;
    }
    let summary = RestartSummary {
        restart,
        log_energy: value.as_f64(),
        class_margin_deg: class_margin(&w)?.as_f64().to_degrees(),
        lr0: cfg.lr0,
    };
    Ok((w, history, summary))
}

fn diverged(step: usize, e: Error) -> Error {
    Error::Divergence { step, detail: e.to_string() }
}

#[derive(Clone, Debug)]
pub struct FreeEmbedding<T> {
    pub w: Matrix<T>,
    pub z: Matrix<T>,
    pub history: RunHistory,
}

/// Jointly optimizes free unit-norm prototypes and features on the composite
/// loss with sphere SGD. `base = None` trains on the regularizers alone.
pub fn optimize_free_embedding<T: Scalar>(
    k: usize,
    d: usize,
    labels: &[usize],
    base: Option<&LossSpec>,
    reg: &RegularizerSpec,
    cfg: &OptimConfig,
) -> Result<FreeEmbedding<T>> {
    cfg.validate()?;
    if let Some(spec) = base {
        spec.validate()?;
    }
    if k < 2 || d < 2 {
        return Err(Error::Infeasible(format!("need k >= 2 and d >= 2, got k={k}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w: Matrix<T> = random_unit_rows(k, d, &mut rng);
    let mut z: Matrix<T> = random_unit_rows(labels.len(), d, &mut rng);
    let class_counts = crate::losses::label_histogram(labels, k);
    let (mut sw, mut sz) = (SgdState::new(k, d), SgdState::new(labels.len(), d));
    let mut history = RunHistory::default();
    for step in 0..cfg.steps {
        let out = composite(&w, &z, labels, base, reg, Some(&class_counts))?;
        if !out.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss {}", out.value) });
        }
        if cfg.logs(step, cfg.steps - 1) {
            history.push(HistoryRecord {
                step,
                lr: cosine_lr(step, cfg),
                loss: out.value.as_f64(),
                class_margin_deg: class_margin(&w)?.as_f64().to_degrees(),
                gamma_min: Some(min_sample_margin(&w, &z, labels)?.as_f64()),
                m_samp: Some(mean_cosine_sample_margin(&w, &z, labels)?.as_f64()),
            });
        }
        sphere_sgd_step(&mut w, &out.grad_w, &mut sw, cfg, step)?;
        sphere_sgd_step(&mut z, &out.grad_z, &mut sz, cfg, step)?;
    }
    Ok(FreeEmbedding { w, z, history })
}

/// Prototypes at pairwise angle `epsilon`, scaled by `scale`, with one
/// feature per class equal to its prototype.
///
/// The vertices of a unit simplex in a (d-1)-dimensional subspace are tilted
/// toward an orthogonal axis until their pairwise angle is `epsilon`, so
/// k <= d is required.
pub fn construct_small_margin_config<T: Scalar>(
    epsilon: f64,
    k: usize,
    d: usize,
    scale: f64,
) -> Result<(Matrix<T>, Matrix<T>, Vec<usize>)> {
    if !(epsilon > 0.0 && epsilon <= std::f64::consts::FRAC_PI_2) {
        return Err(Error::Infeasible(format!("epsilon must lie in (0, pi/2], got {epsilon}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Infeasible(format!("scale must be positive, got {scale}")));
    }
    if k < 2 || k > d + 1 {
        return Err(Error::Infeasible(format!("need 2 <= k <= d+1, got k={k}, d={d}")));
    }
    if k == d + 1 {
        // The Gram matrix (1-c)I + c11^T has full rank k unless c = -1/(k-1),
        // which is an obtuse angle.
        return Err(Error::Infeasible(format!(
            "{k} equiangular vectors in dimension {d} must sit at the simplex angle, which exceeds pi/2"
        )));
    }
    let kf = k as f64;
    // cos(eps) = cos^2(phi) - sin^2(phi) / (k-1)
    let sin2 = (1.0 - epsilon.cos()) * (kf - 1.0) / kf;
    let (sin, cos) = (sin2.sqrt(), (1.0 - sin2).sqrt());
    let base = simplex_etf::<f64>(k, d - 1)?;
    let mut w = Matrix::<f64>::zeros(k, d);
    for i in 0..k {
        for c in 0..d - 1 {
            w.set(i, c, sin * base.get(i, c));
        }
        w.set(i, d - 1, cos);
    }
    w = normalize_rows(&w)?;
    w.scale(scale);
    let w = Matrix::from_f64(&w);
    let z = w.clone();
    Ok((w, z, (0..k).collect()))
}

#[cfg(test)]
mod tests;
