//! Margin-based softmax losses and regularizers, each returning the mean loss
//! with hand-derived gradients with respect to the prototypes and features.
//!
//! Every base loss is a function of the N x k matrix of inner products
//! `P[i][j] = w_j . z_i` (cosines when normalization is on). Each kernel
//! computes a per-sample loss and `dL_i/dP_i`; the shared driver chains that
//! through the inner products and, when requested, through row normalization.

mod gradcheck;
mod spec;

pub use gradcheck::{finite_diff_check, gradcheck_sweep, GradInstance, GradcheckRow, FD_STEP, GRADCHECK_TOL};
pub use spec::{LossKind, LossSpec, RegularizerSpec};

use crate::error::{Error, Result};
use crate::geometry::{centroid, tangent_project_in_place};
use crate::margins::{check_dims, check_labels, max_competitor};
use crate::matrix::{dot, norm, Matrix};
use crate::scalar::Scalar;

/// Clamp applied to cosines before `acos` in the angular-margin kernel.
pub const ACOS_GUARD: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad_w: Matrix<T>,
    /// N x d; zero rows when the term does not depend on the features.
    pub grad_z: Matrix<T>,
}

impl<T: Scalar> LossOutput<T> {
    pub fn zero(k: usize, n: usize, d: usize) -> Self {
        Self { value: T::zero(), grad_w: Matrix::zeros(k, d), grad_z: Matrix::zeros(n, d) }
    }

    /// `self += c * other`; a feature-free `other` only touches `grad_w`.
    pub fn accumulate(&mut self, other: &LossOutput<T>, c: T) {
        self.value += c * other.value;
        self.grad_w.add_scaled(&other.grad_w, c);
        if other.grad_z.rows() > 0 {
            self.grad_z.add_scaled(&other.grad_z, c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad_w.is_finite() && self.grad_z.is_finite()
    }
}

/// Row-normalized view plus the norms needed to chain gradients back.
struct View<T> {
    unit: Matrix<T>,
    norms: Option<Vec<T>>,
}

impl<T: Scalar> View<T> {
    fn new(m: &Matrix<T>, normalize: bool, what: &'static str) -> Result<Self> {
        if !normalize {
            return Ok(Self { unit: m.clone(), norms: None });
        }
        let mut unit = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let r = unit.row_mut(i);
            let n = norm(r);
            if !(n > T::zero()) {
                return Err(Error::Degenerate { what, row: i });
            }
            r.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        Ok(Self { unit, norms: Some(norms) })
    }

    /// Maps a gradient w.r.t. the unit rows to one w.r.t. the raw rows:
    /// `d/dx (x/|x|)^T g = (g - (g.u)u)/|x|`.
    fn pull_back(&self, mut g: Matrix<T>) -> Matrix<T> {
        if let Some(norms) = &self.norms {
            for (i, &n) in norms.iter().enumerate() {
                let row = g.row_mut(i);
                tangent_project_in_place(self.unit.row(i), row);
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        g
    }
}

/// Shared driver: `kernel(i, p_row, y, grad_row)` returns the loss of sample
/// `i` and writes `dL_i/dp_row` into `grad_row`.
fn through_inner_products<T, F>(
    w: &Matrix<T>,
    z: &Matrix<T>,
    labels: &[usize],
    normalize_w: bool,
    normalize_z: bool,
    mut kernel: F,
) -> Result<LossOutput<T>>
where
    T: Scalar,
    F: FnMut(usize, &[T], usize, &mut [T]) -> Result<T>,
{
    check_dims(w, z)?;
    check_labels(labels, w.rows(), z.rows())?;
    if z.rows() == 0 {
        return Err(Error::Shape("loss needs at least one sample".into()));
    }
    let (k, n, d) = (w.rows(), z.rows(), w.cols());
    let wv = View::new(w, normalize_w, "prototype")?;
    let zv = View::new(z, normalize_z, "feature")?;
    let inv_n = T::one() / T::of_usize(n);

    let mut total = T::zero();
    let mut gw = Matrix::zeros(k, d);
    let mut gz = Matrix::zeros(n, d);
    let mut p = vec![T::zero(); k];
    let mut g = vec![T::zero(); k];
    for (i, &y) in labels.iter().enumerate() {
        let zi = zv.unit.row(i);
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(wv.unit.row(j), zi);
        }
        g.iter_mut().for_each(|x| *x = T::zero());
        let li = kernel(i, &p, y, &mut g)?;
        if !li.is_finite() {
            return Err(Error::Overflow(format!("non-finite loss at sample {i}")));
        }
        total += li;
        for (j, &gij) in g.iter().enumerate() {
            if gij == T::zero() {
                continue;
            }
            let gij = gij * inv_n;
            let wj = wv.unit.row(j);
            for (dst, &x) in gz.row_mut(i).iter_mut().zip(wj) {
                *dst += gij * x;
            }
            for (dst, &x) in gw.row_mut(j).iter_mut().zip(zi) {
                *dst += gij * x;
            }
        }
    }
    let out = LossOutput { value: total * inv_n, grad_w: wv.pull_back(gw), grad_z: zv.pull_back(gz) };
    if !out.is_finite() {
        return Err(Error::Overflow("non-finite gradient".into()));
    }
    Ok(out)
}

/// Max-subtracted log-sum-exp and the softmax it induces (written to `probs`).
fn log_softmax_into<T: Scalar>(logits: &[T], probs: &mut [T]) -> Result<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::Overflow("non-finite logit".into()));
    }
    let mut sum = T::zero();
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        sum += *p;
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok(max + sum.ln())
}

/// `-log softmax(logits)[y]`, with `d/dlogits = softmax - onehot` in `grad`.
fn cross_entropy_row<T: Scalar>(logits: &[T], y: usize, grad: &mut [T]) -> Result<T> {
    let lse = log_softmax_into(logits, grad)?;
    grad[y] -= T::one();
    Ok(lse - logits[y])
}

/// Evaluates `spec` (no regularizers). LDAM counts default to the label histogram.
pub fn evaluate<T: Scalar>(
    spec: &LossSpec,
    w: &Matrix<T>,
    z: &Matrix<T>,
    labels: &[usize],
    class_counts: Option<&[usize]>,
) -> Result<LossOutput<T>> {
    match spec.kind {
        LossKind::SoftmaxCe => softmax_ce(w, z, labels, spec),
        LossKind::Focal => focal(w, z, labels, spec),
        LossKind::UnifiedMargin => unified_margin(w, z, labels, spec),
        LossKind::GmSoftmax => gm_softmax(w, z, labels, spec),
        LossKind::LmSoftmax => lm_softmax(w, z, labels, spec),
        LossKind::Ldam => {
            let counts = match class_counts {
                Some(c) => c.to_vec(),
                None => label_histogram(labels, w.rows()),
            };
            ldam(w, z, labels, &counts, spec)
        }
    }
}

pub fn label_histogram(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &y in labels {
        if y < k {
            counts[y] += 1;
        }
    }
    counts
}

/// Mean softmax cross-entropy on `s * w_j . z` (bias-free).
pub fn softmax_ce<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize], spec: &LossSpec) -> Result<LossOutput<T>> {
    spec.validate()?;
    let s = T::of(spec.s);
    let mut logits = vec![T::zero(); w.rows()];
    through_inner_products(w, z, labels, spec.normalize_prototypes, spec.normalize_features, |_, p, y, g| {
        for (l, &pj) in logits.iter_mut().zip(p) {
            *l = s * pj;
        }
        let loss = cross_entropy_row(&logits, y, g)?;
        g.iter_mut().for_each(|x| *x *= s);
        Ok(loss)
    })
}

/// Mean focal loss `-(1-p_y)^gamma log p_y`.
pub fn focal<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize], spec: &LossSpec) -> Result<LossOutput<T>> {
    spec.validate()?;
    let s = T::of(spec.s);
    let gamma = T::of(spec.focal_gamma);
    let mut logits = vec![T::zero(); w.rows()];
    through_inner_products(w, z, labels, spec.normalize_prototypes, spec.normalize_features, |_, p, y, g| {
        for (l, &pj) in logits.iter_mut().zip(p) {
            *l = s * pj;
        }
        let lse = log_softmax_into(&logits, g)?;
        let log_py = logits[y] - lse;
        let py = g[y];
        // 1 - p_y summed from the competitors keeps precision when p_y -> 1.
        let rest: T = g.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &v)| v).sum();
        let weight = if gamma == T::zero() { T::one() } else { rest.powf(gamma) };
        let loss = -weight * log_py;
        // dL/dlogit_j = [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (delta_jy - p_j)
        let lead = if gamma == T::zero() || rest == T::zero() {
            T::zero()
        } else {
            gamma * rest.powf(gamma - T::one()) * py * log_py
        };
        let coef = lead - weight;
        for (j, gj) in g.iter_mut().enumerate() {
            let delta = if j == y { T::one() } else { T::zero() };
            *gj = s * coef * (delta - *gj);
        }
        Ok(loss)
    })
}

/// Unified angular/additive margin loss with target logit
/// `s (cos(m1 theta_y + m2) - m3)`; NormFace, CosFace, ArcFace and
/// SphereFace-with-feature-normalization are parameter settings of it.
pub fn unified_margin<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize], spec: &LossSpec) -> Result<LossOutput<T>> {
    spec.validate()?;
    let s = T::of(spec.s);
    let (m1, m2, m3) = (T::of(spec.m1), T::of(spec.m2), T::of(spec.m3));
    let additive_only = spec.m1 == 1.0 && spec.m2 == 0.0;
    let guard = T::one() - T::of(ACOS_GUARD);
    let mut logits = vec![T::zero(); w.rows()];
    through_inner_products(w, z, labels, true, true, |_, p, y, g| {
        for (l, &pj) in logits.iter_mut().zip(p) {
            *l = s * pj;
        }
        let dtarget = if additive_only {
            logits[y] = s * (p[y] - m3);
            s
        } else {
            let c = p[y].max(-guard).min(guard);
            let theta = c.acos();
            let phase = m1 * theta + m2;
            logits[y] = s * (phase.cos() - m3);
            // d/dc cos(m1 acos(c) + m2) = sin(phase) m1 / sqrt(1 - c^2)
            s * phase.sin() * m1 / (T::one() - c * c).sqrt()
        };
        let loss = cross_entropy_row(&logits, y, g)?;
        for (j, gj) in g.iter_mut().enumerate() {
            *gj *= if j == y { dtarget } else { s };
        }
        Ok(loss)
    })
}

/// Generalized margin softmax: numerator `exp(s(a1 cos_y + b1))`, denominator
/// `exp(s(a2 cos_y + b2)) + sum_{j != y} exp(s cos_j)`.
pub fn gm_softmax<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize], spec: &LossSpec) -> Result<LossOutput<T>> {
    if spec.kind != LossKind::GmSoftmax {
        return Err(Error::InvalidSpec(format!("gm_softmax called with kind {}", spec.kind)));
    }
    spec.validate()?;
    let s = T::of(spec.s);
    let (a1, a2, b1, b2) = (T::of(spec.alpha1), T::of(spec.alpha2), T::of(spec.beta1), T::of(spec.beta2));
    gm_kernel(w, z, labels, spec, move |_| (s, a1, a2, b1, b2))
}

/// Per-sample GM-Softmax; `params(i)` yields `(s, alpha1, alpha2, beta1, beta2)`.
fn gm_kernel<T, P>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize], spec: &LossSpec, params: P) -> Result<LossOutput<T>>
where
    T: Scalar,
    P: Fn(usize) -> (T, T, T, T, T),
{
    let mut logits = vec![T::zero(); w.rows()];
    through_inner_products(w, z, labels, spec.normalize_prototypes, spec.normalize_features, |i, p, y, g| {
        let (s, a1, a2, b1, b2) = params(i);
        for (l, &pj) in logits.iter_mut().zip(p) {
            *l = s * pj;
        }
        logits[y] = s * (a2 * p[y] + b2);
        let numerator = s * (a1 * p[y] + b1);
        let lse = log_softmax_into(&logits, g)?;
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = if j == y { s * (a2 * *gj - a1) } else { s * *gj };
        }
        Ok(lse - numerator)
    })
}

/// Closed-form minimum of the balanced GM-Softmax risk over the unit sphere:
/// `log[exp(s(a2 - a1 + b2 - b1)) + (k-1) exp(-s(1/(k-1) + a1 + b1))]`.
pub fn gm_lower_bound(k: usize, spec: &LossSpec) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidSpec(format!("bound needs k >= 2, got {k}")));
    }
    let s = spec.s;
    let km1 = (k - 1) as f64;
    let a = s * (spec.alpha2 - spec.alpha1 + spec.beta2 - spec.beta1);
    let b = km1.ln() - s * (1.0 / km1 + spec.alpha1 + spec.beta1);
    let m = a.max(b);
    Ok(m + ((a - m).exp() + (b - m).exp()).ln())
}

/// Largest-margin softmax: `(1/s) log sum_{j != y} exp(s (w_j - w_y) . z)`.
pub fn lm_softmax<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize], spec: &LossSpec) -> Result<LossOutput<T>> {
    spec.validate()?;
    let s = T::of(spec.s);
    let k = w.rows();
    let mut logits = vec![T::zero(); k - 1];
    let mut probs = vec![T::zero(); k - 1];
    through_inner_products(w, z, labels, spec.normalize_prototypes, spec.normalize_features, |_, p, y, g| {
        let others = (0..k).filter(|&j| j != y);
        for (l, j) in logits.iter_mut().zip(others.clone()) {
            *l = s * (p[j] - p[y]);
        }
        let lse = log_softmax_into(&logits, &mut probs)?;
        for (&q, j) in probs.iter().zip(others) {
            g[j] = q;
        }
        g[y] = -T::one();
        Ok(lse / s)
    })
}

/// Default LDAM constant: the largest per-class margin `C n_j^(-1/4)` is 0.5.
pub fn default_ldam_c(class_counts: &[usize]) -> f64 {
    let min = class_counts.iter().copied().min().unwrap_or(1).max(1) as f64;
    0.5 * min.powf(0.25)
}

/// GM-Softmax with `alpha1 = alpha2 = 1` and `beta1 = beta2 = -C n_y^(-1/4)`.
pub fn ldam<T: Scalar>(
    w: &Matrix<T>,
    z: &Matrix<T>,
    labels: &[usize],
    class_counts: &[usize],
    spec: &LossSpec,
) -> Result<LossOutput<T>> {
    spec.validate()?;
    if class_counts.len() != w.rows() {
        return Err(Error::InvalidCounts(format!("{} counts for {} classes", class_counts.len(), w.rows())));
    }
    if let Some(j) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidCounts(format!("class {j} has zero samples")));
    }
    let c = spec.ldam_c.unwrap_or_else(|| default_ldam_c(class_counts));
    let betas: Vec<T> = class_counts.iter().map(|&n| T::of(-c * (n as f64).powf(-0.25))).collect();
    let s = T::of(spec.s);
    let one = T::one();
    gm_kernel(w, z, labels, spec, |i| {
        let b = betas[labels[i]];
        (s, one, one, b, b)
    })
}

/// Sample-margin regularizer on raw inner products.
///
/// Max variant: `-(w_y.z - max_{j != y} w_j.z)`, subgradient on the lowest
/// maximizing index. Mean variant: `-w_y.z + (1/(k-1)) sum_{j != y} w_j.z`.
pub fn r_sm<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize], use_mean_variant: bool) -> Result<LossOutput<T>> {
    r_sm_impl(w, z, labels, use_mean_variant, false)
}

fn r_sm_impl<T: Scalar>(
    w: &Matrix<T>,
    z: &Matrix<T>,
    labels: &[usize],
    use_mean_variant: bool,
    on_sphere: bool,
) -> Result<LossOutput<T>> {
    let k = w.rows();
    if k < 2 {
        return Err(Error::Shape("sample margin needs at least two classes".into()));
    }
    let share = T::one() / T::of_usize(k - 1);
    through_inner_products(w, z, labels, on_sphere, on_sphere, |_, p, y, g| {
        g[y] = -T::one();
        if use_mean_variant {
            let mut rest = T::zero();
            for (j, gj) in g.iter_mut().enumerate() {
                if j != y {
                    *gj = share;
                    rest += p[j];
                }
            }
            Ok(-p[y] + share * rest)
        } else {
            let (arg, best) = max_competitor(p, y);
            g[arg] = T::one();
            Ok(-(p[y] - best))
        }
    })
}

/// Zero-centroid regularizer `lambda |mean_j w_j|^2`. Prototypes only.
pub fn r_w<T: Scalar>(w: &Matrix<T>, lambda_w: f64) -> Result<LossOutput<T>> {
    if !lambda_w.is_finite() || lambda_w < 0.0 {
        return Err(Error::InvalidSpec(format!("lambda_w must be finite and >= 0, got {lambda_w}")));
    }
    let lambda = T::of(lambda_w);
    let c = centroid(w);
    let value = lambda * dot(&c, &c);
    let coef = T::of(2.0) * lambda / T::of_usize(w.rows());
    let mut grad_w = Matrix::zeros(w.rows(), w.cols());
    for j in 0..w.rows() {
        for (dst, &cj) in grad_w.row_mut(j).iter_mut().zip(&c) {
            *dst = coef * cj;
        }
    }
    Ok(LossOutput { value, grad_w, grad_z: Matrix::zeros(0, w.cols()) })
}

/// `base + mu_sm R_sm + lambda_w R_w`; `base = None` drops the base loss.
///
/// The sample-margin term is evaluated on row-normalized prototypes and
/// features (differentiated through the normalization), so its weight is
/// comparable across normalized and unnormalized base losses.
pub fn composite<T: Scalar>(
    w: &Matrix<T>,
    z: &Matrix<T>,
    labels: &[usize],
    base: Option<&LossSpec>,
    reg: &RegularizerSpec,
    class_counts: Option<&[usize]>,
) -> Result<LossOutput<T>> {
    reg.validate()?;
    check_dims(w, z)?;
    let mut out = LossOutput::zero(w.rows(), z.rows(), w.cols());
    if let Some(spec) = base {
        out.accumulate(&evaluate(spec, w, z, labels, class_counts)?, T::one());
    }
    if reg.mu_sm > 0.0 {
        let sm = r_sm_impl(w, z, labels, reg.use_mean_variant, true)?;
        out.accumulate(&sm, T::of(reg.mu_sm));
    }
    if reg.lambda_w > 0.0 {
        out.accumulate(&r_w(w, reg.lambda_w)?, T::one());
    }
    if base.is_none() {
        check_labels(labels, w.rows(), z.rows())?;
    }
    Ok(out)
}
