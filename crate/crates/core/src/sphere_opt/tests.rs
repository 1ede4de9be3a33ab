use super::*;
use crate::geometry::{angle, gram};
use crate::losses::{finite_diff_check, gm_lower_bound, softmax_ce, LossOutput};
use crate::margins::per_class_margins;
use crate::matrix::dot;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn cfg(lr0: f64, momentum: f64, steps: usize) -> OptimConfig {
    OptimConfig { lr0, momentum, weight_decay: 0.0, steps, t_max: steps, seed: 7, log_every: 0 }
}

fn balanced(k: usize, per_class: usize) -> Vec<usize> {
    (0..k * per_class).map(|i| i % k).collect()
}

fn off_diagonal_range(w: &Matrix<f64>) -> (f64, f64) {
    let g = gram(&normalize_rows(w).unwrap());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            if i != j {
                lo = lo.min(g.get(i, j));
                hi = hi.max(g.get(i, j));
            }
        }
    }
    (lo, hi)
}

#[test]
fn cosine_lr_examples() {
    let c = OptimConfig { lr0: 0.3, t_max: 100, ..OptimConfig::default() };
    assert_eq!(cosine_lr(0, &c), 0.3);
    assert_abs_diff_eq!(cosine_lr(100, &c), 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(cosine_lr(50, &c), 0.15, epsilon = 1e-15);
    // past t_max the schedule climbs back
    assert_abs_diff_eq!(cosine_lr(200, &c), 0.3, epsilon = 1e-15);
    assert_abs_diff_eq!(cosine_lr(150, &c), 0.15, epsilon = 1e-15);
}

#[test]
fn config_validation() {
    assert!(OptimConfig::default().validate().is_ok());
    assert!(RieszConfig::default().validate().is_ok());
    for bad in [
        OptimConfig { lr0: 0.0, ..OptimConfig::default() },
        OptimConfig { momentum: 1.0, ..OptimConfig::default() },
        OptimConfig { weight_decay: -1.0, ..OptimConfig::default() },
        OptimConfig { steps: 0, ..OptimConfig::default() },
        OptimConfig { t_max: 0, ..OptimConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    for bad in [
        RieszConfig { t: 0.0, ..RieszConfig::default() },
        RieszConfig { continuation: vec![2.0, 1.0], ..RieszConfig::default() },
        RieszConfig { continuation: vec![-1.0], ..RieszConfig::default() },
        RieszConfig { restarts: 0, ..RieszConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert_eq!(RieszConfig { continuation: vec![], t: 3.0, restarts: 1 }.stages(), vec![3.0]);
    assert!(serde_json::from_str::<OptimConfig>(r#"{"lr":0.1}"#).is_err());
}

#[test]
fn zero_gradient_leaves_params_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w0: Matrix<f64> = random_unit_rows(5, 4, &mut rng);
    let mut w = w0.clone();
    let mut state = SgdState::new(5, 4);
    let c = cfg(0.1, 0.9, 10);
    for step in 0..10 {
        sphere_sgd_step(&mut w, &Matrix::zeros(5, 4), &mut state, &c, step).unwrap();
    }
    assert!(w.max_abs_diff(&w0) < 1e-15);
}

#[test]
fn single_step_rotates_toward_target() {
    // f(w) = -w . e1, gradient -e1
    let f = |w: &Matrix<f64>| -w.get(0, 0);
    let grad = Matrix::from_rows(&[[-1.0, 0.0, 0.0]]).unwrap();
    let mut w = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
    let before = f(&w);
    let mut state = SgdState::new(1, 3);
    sphere_sgd_step(&mut w, &grad, &mut state, &cfg(0.01, 0.0, 100), 0).unwrap();
    assert!(f(&w) < before);
    assert!(w.get(0, 0) > 0.0 && w.get(0, 2) == 0.0);
    assert_abs_diff_eq!(norm(w.row(0)), 1.0, epsilon = 1e-12);
}

#[test]
fn repeated_steps_converge_to_target() {
    let grad = Matrix::from_rows(&[[-1.0, 0.0, 0.0]]).unwrap();
    let mut w = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
    let mut state = SgdState::new(1, 3);
    let c = cfg(0.05, 0.9, 1000);
    for step in 0..1000 {
        sphere_sgd_step(&mut w, &grad, &mut state, &c, step).unwrap();
    }
    assert!(angle(w.row(0), &[1.0, 0.0, 0.0]).unwrap() <= 1e-3);
}

#[test]
fn sphere_step_rejects_shape_mismatch() {
    let mut w = Matrix::<f64>::zeros(2, 3);
    let mut state = SgdState::new(2, 3);
    let err = sphere_sgd_step(&mut w, &Matrix::zeros(3, 3), &mut state, &cfg(0.1, 0.0, 1), 0);
    assert!(matches!(err, Err(Error::Shape(_))));
}

#[test]
fn euclidean_step_applies_decay_and_momentum() {
    let mut p = [1.0, -2.0];
    let mut v = [0.0, 0.0];
    let c = OptimConfig { lr0: 0.1, momentum: 0.5, weight_decay: 0.1, steps: 10, t_max: 1_000_000, seed: 0, log_every: 0 };
    sgd_step(&mut p, &[1.0, 0.0], &mut v, &c, 0);
    // v = g + wd p = (1.1, -0.2); p -= 0.1 v
    assert_abs_diff_eq!(v[0], 1.1, epsilon = 1e-15);
    assert_abs_diff_eq!(p[0], 0.89, epsilon = 1e-15);
    assert_abs_diff_eq!(p[1], -1.98, epsilon = 1e-15);
    sgd_step(&mut p, &[0.0, 0.0], &mut v, &c, 0);
    assert_abs_diff_eq!(v[0], 0.55 + 0.089, epsilon = 1e-9);
}

#[test]
fn riesz_energy_examples() {
    let antipodal = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    assert_abs_diff_eq!(riesz_energy(&antipodal, 2.0).unwrap().0, 0.5, epsilon = 1e-15);
    let tri = simplex_etf::<f64>(3, 2).unwrap();
    assert_abs_diff_eq!(riesz_energy(tri.matrix(), 2.0).unwrap().0, 2.0, epsilon = 1e-12);
    // log form: log(0.5)/2 and log(2)/2
    assert_abs_diff_eq!(riesz_log_energy(&antipodal, 2.0).unwrap().0, 0.5f64.ln() / 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(riesz_log_energy(tri.matrix(), 2.0).unwrap().0, 2.0f64.ln() / 2.0, epsilon = 1e-12);
}

#[test]
fn riesz_coincident_rows_are_singular() {
    let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
    assert_eq!(riesz_energy(&w, 2.0).unwrap_err(), Error::Singular(0, 2));
    assert_eq!(riesz_log_energy(&w, 2.0).unwrap_err(), Error::Singular(0, 2));
}

#[test]
fn riesz_large_exponent_stays_finite_in_log_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Matrix<f64> = random_unit_rows(20, 3, &mut rng);
    assert!(riesz_energy(&w, 2000.0).unwrap_err().is_numeric());
    let (v, g) = riesz_log_energy(&w, 2000.0).unwrap();
    assert!(v.is_finite() && g.is_finite());
}

fn riesz_fd(w: &Matrix<f64>, t: f64, log_form: bool) -> f64 {
    let z = Matrix::zeros(0, w.cols());
    finite_diff_check(
        |w, _| {
            let (value, grad_w) = if log_form { riesz_log_energy(w, t)? } else { riesz_energy(w, t)? };
            Ok(LossOutput { value, grad_w, grad_z: Matrix::zeros(0, w.cols()) })
        },
        w,
        &z,
        1e-5,
    )
    .unwrap()
}

#[test]
fn riesz_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d) = (2 + seed as usize % 6, 2 + seed as usize % 3);
        let w: Matrix<f64> = random_unit_rows(k, d, &mut rng);
        for t in [1.0, 2.0, 6.0] {
            assert!(riesz_fd(&w, t, false) <= 1e-5, "seed {seed} t {t}");
            assert!(riesz_fd(&w, t, true) <= 1e-5, "seed {seed} t {t} (log)");
        }
    }
}

#[test]
fn riesz_recovers_small_simplices() {
    let optim = RieszConfig::default_optim();
    let riesz = RieszConfig::default();
    let s = minimize_riesz::<f64>(4, 3, &riesz, &optim).unwrap();
    assert_abs_diff_eq!(s.class_margin.to_degrees(), 109.4712206, epsilon = 0.1);
    let (lo, hi) = off_diagonal_range(s.protos.matrix());
    assert!((lo + 1.0 / 3.0).abs() <= 1e-3 && (hi + 1.0 / 3.0).abs() <= 1e-3, "{lo} {hi}");
    assert_eq!(s.restarts.len(), 5);

    let s = minimize_riesz::<f64>(3, 2, &riesz, &optim).unwrap();
    assert_abs_diff_eq!(s.class_margin.to_degrees(), 120.0, epsilon = 0.1);
}

#[test]
fn riesz_simplex_from_every_restart() {
    let optim = RieszConfig::default_optim();
    let riesz = RieszConfig { continuation: vec![1.0, 2.0, 4.0], restarts: 3, ..RieszConfig::default() };
    for (k, d) in [(2, 2), (3, 3), (5, 4), (5, 7), (6, 5)] {
        let s = minimize_riesz::<f64>(k, d, &riesz, &optim).unwrap();
        let target = -1.0 / (k as f64 - 1.0);
        let (lo, hi) = off_diagonal_range(s.protos.matrix());
        assert!((lo - target).abs() <= 1e-3 && (hi - target).abs() <= 1e-3, "k={k} d={d}: {lo} {hi}");
        for r in &s.restarts {
            assert_abs_diff_eq!(r.class_margin_deg, target.acos().to_degrees(), epsilon = 0.1);
        }
    }
}

#[test]
fn riesz_tammes_eight_points() {
    let s = minimize_riesz::<f64>(8, 3, &RieszConfig::default(), &RieszConfig::default_optim()).unwrap();
    assert!(s.class_margin.to_degrees() >= 74.0, "{}", s.class_margin.to_degrees());
    assert!(s.class_margin.to_degrees() <= 74.87);
}

#[test]
fn riesz_is_deterministic_and_history_is_ordered() {
    let optim = OptimConfig { log_every: 100, ..RieszConfig::default_optim() };
    let riesz = RieszConfig { continuation: vec![1.0, 4.0], restarts: 3, ..RieszConfig::default() };
    let a = minimize_riesz::<f64>(6, 3, &riesz, &optim).unwrap();
    let b = minimize_riesz::<f64>(6, 3, &riesz, &optim).unwrap();
    assert_eq!(a.protos, b.protos);
    assert_eq!(a.history, b.history);
    assert!(a.history.records.windows(2).all(|p| p[0].step < p[1].step));
    assert_eq!(a.history.records.last().unwrap().step, 2 * optim.steps - 1);
    let csv = a.history.to_csv();
    assert!(csv.starts_with("step,lr,loss,class_margin_deg,gamma_min,m_samp\n"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",,"));
}

#[test]
fn riesz_rejects_bad_shapes() {
    let o = RieszConfig::default_optim();
    assert!(matches!(minimize_riesz::<f64>(1, 3, &RieszConfig::default(), &o), Err(Error::Infeasible(_))));
    assert!(matches!(minimize_riesz::<f64>(3, 1, &RieszConfig::default(), &o), Err(Error::Infeasible(_))));
    assert!(matches!(minimize_riesz::<f64>(2, 0, &RieszConfig::default(), &o), Err(Error::Infeasible(_))));
    let pair = minimize_riesz::<f64>(2, 1, &RieszConfig::default(), &o).unwrap();
    assert_eq!(pair.class_margin, std::f64::consts::PI);
    assert_eq!(pair.restarts.len(), 5);
}

#[test]
fn riesz_descent_with_small_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut w: Matrix<f64> = random_unit_rows(7, 3, &mut rng);
    let c = OptimConfig { lr0: 1e-3, momentum: 0.0, weight_decay: 0.0, steps: 500, t_max: 1_000_000, seed: 0, log_every: 0 };
    let mut state = SgdState::new(7, 3);
    let mut prev = riesz_energy(&w, 2.0).unwrap().0;
    let mut descents = 0;
    for step in 0..500 {
        let (_, g) = riesz_energy(&w, 2.0).unwrap();
        sphere_sgd_step(&mut w, &g, &mut state, &c, step).unwrap();
        let e = riesz_energy(&w, 2.0).unwrap().0;
        if e <= prev {
            descents += 1;
        }
        prev = e;
    }
    assert!(descents >= 475, "{descents}");
}

proptest! {
    #[test]
    fn steps_preserve_unit_rows(seed in 0u64..1000, k in 2usize..7, d in 2usize..6, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: Matrix<f64> = random_unit_rows(k, d, &mut rng);
        let mut g: Matrix<f64> = random_unit_rows(k, d, &mut rng);
        g.scale(scale);
        let mut state = SgdState::new(k, d);
        let c = OptimConfig { lr0: 0.5, momentum: 0.9, weight_decay: 1e-4, steps: 10, t_max: 10, seed: 0, log_every: 0 };
        for step in 0..5 {
            sphere_sgd_step(&mut w, &g, &mut state, &c, step).unwrap();
            for r in w.iter_rows() {
                prop_assert!((norm(r) - 1.0).abs() <= 1e-9);
            }
            for (p, v) in w.iter_rows().zip(state.velocity.iter_rows()) {
                prop_assert!(dot(p, v).abs() <= 1e-9 * (1.0 + norm(v)));
            }
        }
    }
}

#[test]
fn lm_softmax_toy_packs_eight_classes() {
    let labels = balanced(8, 10);
    let c = OptimConfig { log_every: 5000, ..OptimConfig::default() };
    let r = optimize_free_embedding::<f64>(8, 3, &labels, Some(&LossSpec::lm_softmax(64.0)), &RegularizerSpec::none(), &c)
        .unwrap();
    let deg = class_margin(&r.w).unwrap().to_degrees();
    assert!(deg >= 70.0, "{deg}");
    let h = &r.history.records;
    assert_eq!(h.len(), 11);
    assert!(h.iter().all(|rec| rec.gamma_min.unwrap() <= 8.0 / 7.0 + 1e-6));
}

#[test]
fn normface_reaches_simplex_when_the_scale_does_not_saturate() {
    let labels = balanced(4, 10);
    let c = OptimConfig { steps: 20_000, ..OptimConfig::default() };
    for spec in [LossSpec::normface(5.0), LossSpec::cosface(5.0, 0.35), LossSpec::arcface(5.0, 0.5)] {
        let r = optimize_free_embedding::<f64>(4, 8, &labels, Some(&spec), &RegularizerSpec::none(), &c).unwrap();
        let gmin = min_sample_margin(&r.w, &r.z, &labels).unwrap();
        assert!((gmin - 4.0 / 3.0).abs() <= 0.05, "{spec:?}: {gmin}");
        assert_abs_diff_eq!(class_margin(&r.w).unwrap().to_degrees(), 109.4712206, epsilon = 2.0);
    }
}

#[test]
fn normface_at_large_scale_stops_below_the_ceiling() {
    // At s=64 the loss reaches ~1e-8 while gamma_min is far from 4/3, so the
    // gradients vanish before the simplex is reached; only the ceiling holds.
    let labels = balanced(4, 10);
    let c = OptimConfig { steps: 20_000, ..OptimConfig::default() };
    let r = optimize_free_embedding::<f64>(4, 8, &labels, Some(&LossSpec::normface(64.0)), &RegularizerSpec::none(), &c)
        .unwrap();
    let per_class = per_class_margins(&r.w, &r.z, &labels).unwrap();
    assert!(per_class.iter().all(|&g| g <= 4.0 / 3.0 + 1e-6));
    assert!(r.history.last().unwrap().loss < 1e-5);
}

#[test]
fn gm_softmax_converges_to_its_bound() {
    let labels = balanced(4, 10);
    let c = OptimConfig { steps: 20_000, ..OptimConfig::default() };
    let spec = LossSpec::gm_softmax(5.0, 1.0, 1.0, 0.0, 0.0);
    let r = optimize_free_embedding::<f64>(4, 8, &labels, Some(&spec), &RegularizerSpec::none(), &c).unwrap();
    let out = composite(&r.w, &r.z, &labels, Some(&spec), &RegularizerSpec::none(), None).unwrap();
    assert_abs_diff_eq!(out.value, gm_lower_bound(4, &spec).unwrap(), epsilon = 1e-3);
}

#[test]
fn free_embedding_is_deterministic() {
    let labels = balanced(3, 4);
    let c = OptimConfig { steps: 500, log_every: 50, ..OptimConfig::default() };
    let spec = LossSpec::cosface(8.0, 0.2);
    let a = optimize_free_embedding::<f64>(3, 2, &labels, Some(&spec), &RegularizerSpec::none(), &c).unwrap();
    let b = optimize_free_embedding::<f64>(3, 2, &labels, Some(&spec), &RegularizerSpec::none(), &c).unwrap();
    assert_eq!(a.w, b.w);
    assert_eq!(a.z, b.z);
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert!(class_margin(&a.w).unwrap().to_degrees() <= 120.0 + 1e-6);
}

#[test]
fn free_embedding_on_regularizers_only() {
    let labels = balanced(4, 3);
    let c = OptimConfig { steps: 3000, ..OptimConfig::default() };
    let r = optimize_free_embedding::<f64>(4, 3, &labels, None, &RegularizerSpec::sample_margin(1.0), &c).unwrap();
    assert!(r.history.last().unwrap().loss.is_finite());
}

#[test]
fn free_embedding_reports_divergence_step() {
    let labels = balanced(2, 2);
    let c = OptimConfig { steps: 10, ..OptimConfig::default() };
    let spec = LossSpec::softmax_ce().with_scale(1e308);
    let err = optimize_free_embedding::<f64>(2, 2, &labels, Some(&spec), &RegularizerSpec::none(), &c).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn small_margin_construction() {
    for scale in [1.0, 10.0, 100.0] {
        let (w, z, labels) = construct_small_margin_config::<f64>(0.1, 3, 3, scale).unwrap();
        assert_abs_diff_eq!(class_margin(&w).unwrap(), 0.1, epsilon = 1e-12);
        for (i, &y) in labels.iter().enumerate() {
            assert_eq!(z.row(i), w.row(y));
            assert_abs_diff_eq!(norm(w.row(y)), scale, epsilon = 1e-12 * scale);
        }
    }
    let losses: Vec<f64> = [1.0, 10.0, 100.0]
        .iter()
        .map(|&s| {
            let (w, z, labels) = construct_small_margin_config::<f64>(0.1, 3, 3, s).unwrap();
            softmax_ce(&w, &z, &labels, &LossSpec::softmax_ce()).unwrap().value
        })
        .collect();
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    assert!(losses[2] < 1e-3);

    // pairwise cosines all equal cos(eps) for other shapes too
    let (w, _, _) = construct_small_margin_config::<f64>(0.7, 4, 6, 1.0).unwrap();
    let (lo, hi) = off_diagonal_range(&w);
    assert_abs_diff_eq!(lo, 0.7f64.cos(), epsilon = 1e-12);
    assert_abs_diff_eq!(hi, 0.7f64.cos(), epsilon = 1e-12);
}

#[test]
fn small_margin_infeasible_inputs() {
    for (eps, k, d, s) in [(0.0, 3, 3, 1.0), (2.0, 3, 3, 1.0), (0.1, 4, 3, 1.0), (0.1, 5, 3, 1.0), (0.1, 3, 3, 0.0), (0.1, 1, 3, 1.0)] {
        assert!(
            matches!(construct_small_margin_config::<f64>(eps, k, d, s), Err(Error::Infeasible(_))),
            "{eps} {k} {d} {s}"
        );
    }
}
