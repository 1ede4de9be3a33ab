//! Central finite differences against the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{composite, evaluate, r_sm, r_w, LossOutput, LossSpec, RegularizerSpec};
use crate::error::Result;
use crate::geometry::{normalize_rows, random_unit_rows};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

pub const FD_STEP: f64 = 1e-5;

/// Acceptance threshold for every loss kind.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Denominator floor for relative errors, so coordinates whose true
/// derivative is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-3;

/// Minimum gap between the two largest competitors; instances closer to a
/// tie are resampled so the max-based subgradients are differentiable there.
const TIE_GAP: f64 = 1e-3;

/// Target cosines must stay this far from +-1, where d(acos)/dc is singular
/// and central differences lose all accuracy.
const ACOS_MARGIN: f64 = 1e-2;

/// Largest relative error between analytic and central-difference gradients
/// over every coordinate of `w` and `z`.
pub fn finite_diff_check<T, F>(f: F, w: &Matrix<T>, z: &Matrix<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Matrix<T>, &Matrix<T>) -> Result<LossOutput<T>>,
{
    let analytic = f(w, z)?;
    let two_h = step + step;
    let floor = T::of(REL_FLOOR);
    let rel = |a: T, n: T| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let mut worst = T::zero();

    let mut wp = w.clone();
    for idx in 0..w.as_slice().len() {
        let orig = wp.as_slice()[idx];
        wp.as_mut_slice()[idx] = orig + step;
        let up = f(&wp, z)?.value;
        wp.as_mut_slice()[idx] = orig - step;
        let down = f(&wp, z)?.value;
        wp.as_mut_slice()[idx] = orig;
        worst = worst.max(rel(analytic.grad_w.as_slice()[idx], (up - down) / two_h));
    }

    let mut zp = z.clone();
    for idx in 0..z.as_slice().len() {
        let orig = zp.as_slice()[idx];
        zp.as_mut_slice()[idx] = orig + step;
        let up = f(w, &zp)?.value;
        zp.as_mut_slice()[idx] = orig - step;
        let down = f(w, &zp)?.value;
        zp.as_mut_slice()[idx] = orig;
        let a = if analytic.grad_z.rows() == 0 { T::zero() } else { analytic.grad_z.as_slice()[idx] };
        worst = worst.max(rel(a, (up - down) / two_h));
    }
    Ok(worst)
}

/// A random (W, Z, labels) triple with non-unit rows, every class present,
/// and no near-ties among competing logits.
#[derive(Clone, Debug)]
pub struct GradInstance {
    pub w: Matrix<f64>,
    pub z: Matrix<f64>,
    pub labels: Vec<usize>,
}

impl GradInstance {
    pub fn random(seed: u64, k: usize, d: usize, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut w: Matrix<f64> = random_unit_rows(k, d, &mut rng);
            let mut z: Matrix<f64> = random_unit_rows(n, d, &mut rng);
            for i in 0..k {
                let c = rng.random_range(0.5..1.5);
                w.row_mut(i).iter_mut().for_each(|x| *x *= c);
            }
            for i in 0..n {
                let c = rng.random_range(0.5..1.5);
                z.row_mut(i).iter_mut().for_each(|x| *x *= c);
            }
            let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
            let inst = Self { w, z, labels };
            if inst.tie_free() && inst.away_from_poles() {
                return inst;
            }
        }
    }

    fn away_from_poles(&self) -> bool {
        let (wn, zn) = (normalize_rows(&self.w).unwrap(), normalize_rows(&self.z).unwrap());
        self.labels.iter().enumerate().all(|(i, &y)| dot(wn.row(y), zn.row(i)).abs() < 1.0 - ACOS_MARGIN)
    }

    fn tie_free(&self) -> bool {
        let (wn, zn) = (normalize_rows(&self.w).unwrap(), normalize_rows(&self.z).unwrap());
        [(&self.w, &self.z), (&wn, &zn)].iter().all(|(w, z)| {
            self.labels.iter().enumerate().all(|(i, &y)| {
                let mut comp: Vec<f64> =
                    (0..w.rows()).filter(|&j| j != y).map(|j| dot(w.row(j), z.row(i))).collect();
                comp.sort_by(|a, b| b.partial_cmp(a).unwrap());
                comp.len() < 2 || comp[0] - comp[1] > TIE_GAP
            })
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Case = (&'static str, f64, Box<dyn Fn(&Matrix<f64>, &Matrix<f64>, &[usize]) -> Result<LossOutput<f64>> + Sync>);

fn base_case(name: &'static str, spec: LossSpec) -> Case {
    (name, GRADCHECK_TOL, Box::new(move |w, z, y| evaluate(&spec, w, z, y, None)))
}

fn cases() -> Vec<Case> {
    let composite_spec = LossSpec::lm_softmax(10.0);
    let composite_reg = RegularizerSpec { mu_sm: 0.5, use_mean_variant: false, lambda_w: 2.0 };
    vec![
        base_case("softmax_ce", LossSpec::softmax_ce()),
        base_case("softmax_ce_normalized_s4", LossSpec::softmax_ce().with_normalization(true, true).with_scale(4.0)),
        base_case("focal_gamma1", LossSpec::focal(1.0)),
        base_case("focal_gamma2_normalized_s4", LossSpec::focal(2.0).with_normalization(true, true).with_scale(4.0)),
        base_case("normface_s8", LossSpec::normface(8.0)),
        base_case("cosface_s8_m0.35", LossSpec::cosface(8.0, 0.35)),
        base_case("arcface_s8_m0.5", LossSpec::arcface(8.0, 0.5)),
        base_case("sphereface_s4_m2", LossSpec::sphereface_fn(4.0, 2.0)),
        base_case("gm_softmax_s5", LossSpec::gm_softmax(5.0, 0.8, 0.45, -0.35, 0.1)),
        base_case("lm_softmax_s10", LossSpec::lm_softmax(10.0)),
        base_case("lm_softmax_s64", LossSpec::lm_softmax(64.0)),
        base_case("ldam_s8", LossSpec::ldam(8.0, Some(0.5))),
        ("r_sm_max", GRADCHECK_TOL, Box::new(|w, z, y| r_sm(w, z, y, false))),
        ("r_sm_mean", GRADCHECK_TOL, Box::new(|w, z, y| r_sm(w, z, y, true))),
        ("r_w", 1e-8, Box::new(|w, _, _| r_w(w, 1.0))),
        (
            "composite_lm+r_sm+r_w",
            GRADCHECK_TOL,
            Box::new(move |w, z, y| composite(w, z, y, Some(&composite_spec), &composite_reg, None)),
        ),
    ]
}

/// Runs every loss kind on `instances` random problems (k in {2,3,5},
/// d in {2,4}, N <= 20). `inject_sign_error` flips the analytic gradient of the
/// first case; it exists to prove the sweep can fail.
pub fn gradcheck_sweep(instances: usize, seed: u64, inject_sign_error: bool) -> Result<Vec<GradcheckRow>> {
    const SHAPES: [(usize, usize); 6] = [(2, 2), (3, 2), (5, 4), (2, 4), (3, 4), (5, 2)];
    let problems: Vec<GradInstance> = (0..instances)
        .map(|i| {
            let (k, d) = SHAPES[i % SHAPES.len()];
            let n = k + 3 + (i * 7) % (18 - k);
            GradInstance::random(seed.wrapping_add(i as u64), k, d, n.min(20))
        })
        .collect();
    cases()
        .into_iter()
        .enumerate()
        .map(|(ci, (name, tolerance, f))| {
            let flip = inject_sign_error && ci == 0;
            let mut worst = 0.0f64;
            for p in &problems {
                let err = finite_diff_check(
                    |w, z| {
                        let mut out = f(w, z, &p.labels)?;
                        if flip {
                            out.grad_w.scale(-1.0);
                        }
                        Ok(out)
                    },
                    &p.w,
                    &p.z,
                    FD_STEP,
                )?;
                worst = worst.max(err);
            }
            Ok(GradcheckRow { name: name.to_string(), instances, max_rel_error: worst, tolerance })
        })
        .collect()
}
