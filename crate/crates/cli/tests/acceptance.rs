//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, even under output capture.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde_json::Value;

use margin_forge::geometry::{gram, normalize_rows};
use margin_forge::losses::{composite, gm_lower_bound, gm_softmax, lm_softmax, r_sm, softmax_ce, unified_margin, GradInstance};
use margin_forge::margins::class_margin;
use margin_forge::matrix::dot;
use margin_forge::sphere_opt::{construct_small_margin_config, minimize_riesz, optimize_free_embedding};
use margin_forge::{LossKind, LossSpec, Matrix64, OptimConfig, RegularizerSpec, RieszConfig};

const SIMPLEX_DEG_TOL: f64 = 0.1;
const GRAM_TOL: f64 = 1e-3;
const TAMMES_8_3_MIN_DEG: f64 = 74.0;
const TOY_LM_MIN_DEG: f64 = 72.0;
const TOY_ORDER_SLACK_DEG: f64 = 1.0;
const GAMMA_ATTAIN_MIN: f64 = 1.28;
const CEILING_SLACK: f64 = 1e-6;
const GM_BOUND_TOL: f64 = 1e-3;
const ALIGN_MIN: f64 = 0.999;
const SHARED_GRAM_TOL: f64 = 0.01;
const SMALL_MARGIN_CE_MAX: f64 = 1e-3;
const R_SM_MARGIN_GAIN_DEG: f64 = 10.0;
const RW_PLAIN_MAX_DEG: f64 = 60.0;
const RW_FIXED_MIN_DEG: f64 = 95.0;
const RW_ACC_DROP_MAX: f64 = 0.01;
const SEEDS_REQUIRED: usize = 4;
const GRAD_TOL: f64 = 1e-4;
const INEQ_INSTANCES: u64 = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_margin-forge"));
    c.env_remove("MARGIN_FORGE_SEED");
    c
}

fn run_cli(args: &[&str], out: &Path) -> String {
    let o = bin().args(args).arg("--output-dir").arg(out).output().expect("spawn margin-forge");
    assert!(o.status.success(), "margin-forge {args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Rows of a headered CSV keyed by column name.
fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines.map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect()).collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("{key}={:?}", row[key]))
}

fn simplex_deg(k: usize) -> f64 {
    (-1.0 / (k as f64 - 1.0)).acos().to_degrees()
}

fn off_diagonal(w: &Matrix64) -> (f64, f64) {
    let g = gram(&normalize_rows(w).unwrap());
    let mut r = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..g.rows() {
        for j in (0..g.cols()).filter(|&j| j != i) {
            r = (r.0.min(g.get(i, j)), r.1.max(g.get(i, j)));
        }
    }
    r
}

fn balanced(k: usize, per_class: usize) -> Vec<usize> {
    (0..k * per_class).map(|i| i % k).collect()
}

fn unit_instance(seed: u64, k: usize, d: usize, n: usize) -> (Matrix64, Matrix64, Vec<usize>) {
    let g = GradInstance::random(seed, k, d, n);
    (normalize_rows(&g.w).unwrap(), normalize_rows(&g.z).unwrap(), g.labels)
}

fn c01_simplex() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    run_cli(&["riesz", "--k", "4", "--d", "3"], tmp.path());
    let cli_time = t.elapsed();
    let s = json(&tmp.path().join("summary.json"));
    let deg = s["class_margin_deg"].as_f64().unwrap();
    let (lo, hi) = (s["gram_offdiag_min"].as_f64().unwrap(), s["gram_offdiag_max"].as_f64().unwrap());
    let mut pass = (deg - simplex_deg(4)).abs() <= SIMPLEX_DEG_TOL
        && (lo + 1.0 / 3.0).abs() <= GRAM_TOL
        && (hi + 1.0 / 3.0).abs() <= GRAM_TOL
        && cli_time <= Duration::from_secs(30);

    let shapes: Vec<(usize, usize)> = [2usize, 3, 5, 10].iter().flat_map(|&k| (k - 1..=k + 4).map(move |d| (k, d))).collect();
    let mut worst = (0.0f64, (0, 0));
    for &(k, d) in &shapes {
        let sol = minimize_riesz::<f64>(k, d, &RieszConfig::default(), &RieszConfig::default_optim()).unwrap();
        let err = (sol.class_margin.to_degrees() - simplex_deg(k)).abs();
        if err > worst.0 {
            worst = (err, (k, d));
        }
    }
    pass &= worst.0 <= SIMPLEX_DEG_TOL;
    outcome(
        pass,
        format!(
            "k=4 d=3: {deg:.4} deg, gram [{lo:.6}, {hi:.6}] in {cli_time:.1?}; {} other shapes, worst error {:.2e} deg at {:?}",
            shapes.len(),
            worst.0,
            worst.1
        ),
    )
}

fn c02_tammes() -> Outcome {
    let t = Instant::now();
    let sol = minimize_riesz::<f64>(8, 3, &RieszConfig::default(), &RieszConfig::default_optim()).unwrap();
    let el = t.elapsed();
    let best = sol.restarts.iter().map(|r| r.class_margin_deg).fold(f64::NEG_INFINITY, f64::max);
    let hits = sol.restarts.iter().filter(|r| r.class_margin_deg >= TAMMES_8_3_MIN_DEG).count();
    outcome(
        hits >= 1 && el <= Duration::from_secs(120),
        format!("k=8 d=3: best restart {best:.3} deg, {hits}/{} restarts >= {TAMMES_8_3_MIN_DEG}, {el:.1?}", sol.restarts.len()),
    )
}

fn toy_summary(dir: &Path) -> Vec<BTreeMap<String, String>> {
    csv_rows(&dir.join("summary.csv"))
}

fn c03_toy() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    run_cli(&["toy", "--k", "8", "--d", "3"], tmp.path());
    let el = t.elapsed();
    let rows = toy_summary(tmp.path());
    let lm = rows.iter().find(|r| r["name"] == "lm_softmax").expect("lm_softmax run");
    let lm_deg = num(lm, "class_margin_deg");
    let others: Vec<(String, f64)> =
        rows.iter().filter(|r| r["name"] != "lm_softmax").map(|r| (r["name"].clone(), num(r, "class_margin_deg"))).collect();
    let ordered = others.iter().all(|(_, d)| lm_deg >= d - TOY_ORDER_SLACK_DEG);
    let listed: Vec<String> = others.iter().map(|(n, d)| format!("{n} {d:.2}")).collect();
    outcome(
        lm_deg >= TOY_LM_MIN_DEG && ordered && others.len() == 3 && el <= Duration::from_secs(300),
        format!("lm_softmax {lm_deg:.2} deg vs {}; {el:.1?}", listed.join(", ")),
    )
}

fn c04_ceiling() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    run_cli(&["toy", "--k", "4", "--d", "8"], tmp.path());
    let rows = toy_summary(tmp.path());
    let ceiling = 4.0 / 3.0 + CEILING_SLACK;
    let lm = num(rows.iter().find(|r| r["name"] == "lm_softmax").unwrap(), "gamma_min");
    let mut worst = f64::NEG_INFINITY;
    let mut logged = 0;
    for r in &rows {
        worst = worst.max(num(r, "gamma_min"));
        for h in csv_rows(&tmp.path().join("runs").join(&r["name"]).join("history.csv")) {
            worst = worst.max(num(&h, "gamma_min"));
            logged += 1;
        }
    }
    outcome(
        (GAMMA_ATTAIN_MIN..=ceiling).contains(&lm) && worst <= ceiling,
        format!("k=4 d=8: lm_softmax gamma_min {lm:.6}; max over {} runs and {logged} logged steps {worst:.6} (ceiling 4/3)", rows.len()),
    )
}

fn c05_gm_bound() -> Outcome {
    let t = Instant::now();
    let labels = balanced(4, 10);
    let cfg = OptimConfig { steps: 20_000, log_every: 0, ..OptimConfig::default() };
    let mut specs = Vec::new();
    for a1 in [0.5, 0.8, 1.0] {
        for a2 in [a1, a1 - 0.35] {
            for b in [0.0, -0.35] {
                for s in [5.0, 20.0] {
                    specs.push(LossSpec::gm_softmax(s, a1, a2, b, b));
                }
            }
        }
    }
    let gaps: Vec<f64> = specs
        .par_iter()
        .map(|spec| {
            let r = optimize_free_embedding::<f64>(4, 8, &labels, Some(spec), &RegularizerSpec::none(), &cfg).unwrap();
            let v = composite(&r.w, &r.z, &labels, Some(spec), &RegularizerSpec::none(), None).unwrap().value;
            (v - gm_lower_bound(4, spec).unwrap()).abs()
        })
        .collect();
    let el = t.elapsed();
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= GM_BOUND_TOL && el <= Duration::from_secs(180),
        format!("{} specs, max |loss - bound| {worst:.2e}; {el:.1?}", specs.len()),
    )
}

fn c06_shared_optimum() -> Outcome {
    let labels = balanced(4, 10);
    let cfg = OptimConfig { steps: 20_000, log_every: 0, ..OptimConfig::default() };
    let specs = [("normface", LossSpec::normface(5.0)), ("cosface", LossSpec::cosface(5.0, 0.35)), ("arcface", LossSpec::arcface(5.0, 0.5))];
    let results: Vec<(f64, (f64, f64))> = specs
        .par_iter()
        .map(|(_, spec)| {
            let r = optimize_free_embedding::<f64>(4, 8, &labels, Some(spec), &RegularizerSpec::none(), &cfg).unwrap();
            let align = labels.iter().enumerate().map(|(i, &y)| dot(r.w.row(y), r.z.row(i))).fold(f64::INFINITY, f64::min);
            (align, off_diagonal(&r.w))
        })
        .collect();
    let pass = results
        .iter()
        .all(|&(a, (lo, hi))| a >= ALIGN_MIN && (lo + 1.0 / 3.0).abs() <= SHARED_GRAM_TOL && (hi + 1.0 / 3.0).abs() <= SHARED_GRAM_TOL);
    let detail: Vec<String> = specs
        .iter()
        .zip(&results)
        .map(|((n, _), (a, (lo, hi)))| format!("{n} min z.w_y {a:.5} gram [{lo:.4}, {hi:.4}]"))
        .collect();
    outcome(pass, format!("s=5, k=4, d=8: {}", detail.join("; ")))
}

fn c07_small_margin() -> Outcome {
    let mut losses = Vec::new();
    let mut margin_err = 0.0f64;
    for scale in [1.0, 10.0, 100.0] {
        let (w, z, labels) = construct_small_margin_config::<f64>(0.1, 3, 3, scale).unwrap();
        margin_err = margin_err.max((class_margin(&w).unwrap() - 0.1).abs());
        losses.push(softmax_ce(&w, &z, &labels, &LossSpec::softmax_ce()).unwrap().value);
    }
    outcome(
        losses[0] > losses[1] && losses[1] > losses[2] && losses[2] < SMALL_MARGIN_CE_MAX && margin_err <= 1e-9,
        format!("CE at scales 1/10/100: {:.4e} / {:.4e} / {:.4e}; class margin error {margin_err:.1e} rad", losses[0], losses[1], losses[2]),
    )
}

fn train_summary(config: &str, seed: u64) -> Vec<BTreeMap<String, String>> {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("train.toml");
    std::fs::write(&cfg, config).unwrap();
    let seed = seed.to_string();
    run_cli(&["train", "--config", cfg.to_str().unwrap(), "--seed", &seed], &tmp.path().join("out"));
    csv_rows(&tmp.path().join("out/summary.csv"))
}

const R_SM_CONFIG: &str = r#"
[dataset.imbalance]
kind = "balanced"
n_max = 100

[[run]]
name = "ce"
[run.loss]
kind = "softmax_ce"

[[run]]
name = "ce_r_sm"
[run.loss]
kind = "softmax_ce"
[run.reg]
mu_sm = 0.5
"#;

fn c08_sample_margin_reg() -> Outcome {
    let t = Instant::now();
    let per_seed: Vec<(f64, f64, f64, f64)> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let rows = train_summary(R_SM_CONFIG, seed);
            (num(&rows[0], "class_margin_deg"), num(&rows[1], "class_margin_deg"), num(&rows[0], "m_samp"), num(&rows[1], "m_samp"))
        })
        .collect();
    let el = t.elapsed();
    let good = per_seed.iter().filter(|(a, b, ma, mb)| b - a >= R_SM_MARGIN_GAIN_DEG && mb > ma).count();
    let detail: Vec<String> = per_seed.iter().map(|(a, b, ma, mb)| format!("{a:.1}->{b:.1} deg, m_samp {ma:.3}->{mb:.3}")).collect();
    outcome(
        good >= SEEDS_REQUIRED && el <= Duration::from_secs(300),
        format!("{good}/5 seeds: {}; {el:.1?}", detail.join("; ")),
    )
}

const R_W_CONFIG: &str = r#"
[dataset.imbalance]
kind = "step"
rho = 100.0
mu = 0.5
n_max = 200

[[run]]
name = "lm"
[run.loss]
kind = "lm_softmax"
s = 10.0
normalize_features = true
normalize_prototypes = true

[[run]]
name = "lm_r_w"
[run.loss]
kind = "lm_softmax"
s = 10.0
normalize_features = true
normalize_prototypes = true
[run.reg]
lambda_w = 100.0
"#;

fn c09_zero_centroid() -> Outcome {
    let t = Instant::now();
    let per_seed: Vec<(f64, f64, f64, f64)> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let rows = train_summary(R_W_CONFIG, seed);
            (
                num(&rows[0], "class_margin_deg"),
                num(&rows[1], "class_margin_deg"),
                num(&rows[0], "test_accuracy"),
                num(&rows[1], "test_accuracy"),
            )
        })
        .collect();
    let el = t.elapsed();
    let good = per_seed
        .iter()
        .filter(|(a, b, acc_a, acc_b)| *a < RW_PLAIN_MAX_DEG && *b >= RW_FIXED_MIN_DEG && *acc_b >= acc_a - RW_ACC_DROP_MAX)
        .count();
    let detail: Vec<String> = per_seed.iter().map(|(a, b, x, y)| format!("{a:.1}->{b:.1} deg, acc {x:.3}->{y:.3}")).collect();
    outcome(
        good >= SEEDS_REQUIRED && el <= Duration::from_secs(300),
        format!("{good}/5 seeds: {}; {el:.1?}", detail.join("; ")),
    )
}

fn c10_gradcheck() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    run_cli(&["gradcheck", "--instances", "10"], tmp.path());
    let el = t.elapsed();
    let rows = csv_rows(&tmp.path().join("gradcheck.csv"));
    let worst = rows.iter().map(|r| num(r, "max_rel_error")).fold(0.0, f64::max);
    let all_ten = rows.iter().all(|r| r["instances"] == "10" && r["passed"] == "true");
    let covered = LossKind::ALL.iter().all(|k| rows.iter().any(|r| {
        let n = &r["name"];
        n.starts_with(k.name())
            || (*k == LossKind::UnifiedMargin && ["normface", "cosface", "arcface", "sphereface"].iter().any(|p| n.starts_with(p)))
    }));
    outcome(
        worst <= GRAD_TOL && all_ten && covered && el <= Duration::from_secs(30),
        format!("{} cases x 10 instances, max relative error {worst:.2e}; {el:.1?}", rows.len()),
    )
}

/// `(1/s) log sum_i sum_{j != y_i} exp(s (w_j - w_{y_i}) . z_i)`, built directly.
fn lm_aggregate(w: &Matrix64, z: &Matrix64, labels: &[usize], s: f64) -> f64 {
    let terms: Vec<f64> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, &y)| (0..w.rows()).filter(move |&j| j != y).map(move |j| s * (dot(w.row(j), z.row(i)) - dot(w.row(y), z.row(i)))))
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()) / s
}

fn c11_inequalities() -> Outcome {
    let t = Instant::now();
    let violations: [usize; 4] = (0..INEQ_INSTANCES)
        .into_par_iter()
        .map(|seed| {
            let u = |a: u64, lo: f64, hi: f64| lo + (hi - lo) * ((seed * 7919 + a * 104729) % 1000) as f64 / 999.0;
            let k = 2 + (seed % 7) as usize;
            let d = 2 + (seed % 9) as usize;
            let n = k + (seed % 13) as usize;
            let (w, z, labels) = unit_instance(10_000 + seed, k, d, n);
            let s = [1.0, 8.0, 30.0, 64.0][(seed % 4) as usize];
            let mut v = [0usize; 4];

            let (m2, m3) = (u(1, 0.0, 1.0), u(2, 0.0, 0.5));
            let a = m2.cos();
            let lhs = unified_margin(&w, &z, &labels, &LossSpec::unified(s, 1.0, m2, m3)).unwrap().value;
            let rhs = gm_softmax(&w, &z, &labels, &LossSpec::gm_softmax(s, a, a, -m3, -m3)).unwrap().value;
            v[0] += usize::from(lhs < rhs - 1e-12);

            let mean = lm_softmax(&w, &z, &labels, &LossSpec::lm_softmax(s)).unwrap().value;
            v[1] += usize::from(lm_aggregate(&w, &z, &labels, s) < mean + (n as f64).ln() / s - 1e-12);

            let max_form = r_sm(&w, &z, &labels, false).unwrap().value;
            let mean_form = r_sm(&w, &z, &labels, true).unwrap().value;
            v[2] += usize::from(max_form < mean_form - 1e-12);

            let floor = -(k as f64) / (k as f64 - 1.0) - 1e-12;
            v[3] += usize::from(max_form < floor || mean_form < floor);
            v
        })
        .reduce(|| [0; 4], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]);
    let el = t.elapsed();
    outcome(
        violations == [0; 4] && el <= Duration::from_secs(30),
        format!(
            "{INEQ_INSTANCES} instances each; violations: margin relaxation {}, LM aggregate {}, R_sm max>=mean {}, R_sm floor {}; {el:.1?}",
            violations[0], violations[1], violations[2], violations[3]
        ),
    )
}

/// Relative path to file bytes.
type Snapshot = BTreeMap<PathBuf, Vec<u8>>;

fn files_under(root: &Path) -> Snapshot {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c12_determinism() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let protos = fixtures.join("etf10_protos.csv");
    let labels = fixtures.join("etf10_labels.csv");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("riesz", ["riesz", "--k", "5", "--d", "3", "--seed", "3", "--set", "optim.steps=400"].map(String::from).to_vec()),
        ("toy", ["toy", "--k", "4", "--d", "3", "--seed", "3", "--set", "optim.steps=2000", "--set", "optim.log_every=100"].map(String::from).to_vec()),
        ("train", ["train", "--seed", "3", "--set", "train.epochs=40", "--set", "train.eval_every=5"].map(String::from).to_vec()),
        ("gradcheck", ["gradcheck", "--instances", "3", "--seed", "3"].map(String::from).to_vec()),
        (
            "margins",
            vec!["margins".into(), "--normalize".into(), "--protos".into(), protos.display().to_string(), "--features".into(), protos.display().to_string(), "--labels".into(), labels.display().to_string()],
        ),
    ];
    let mut checked = 0;
    let mut mismatched = Vec::new();
    for (name, args) in &commands {
        let tmp = tempfile::tempdir().unwrap();
        let runs: Vec<(String, Snapshot)> = ["1", "3"]
            .iter()
            .map(|jobs| {
                // Same path both times: the resolved config records it.
                let dir = tmp.path().join("out");
                let _ = std::fs::remove_dir_all(&dir);
                let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
                if *name != "gradcheck" && *name != "margins" {
                    a.extend(["--jobs", jobs]);
                }
                let stdout = run_cli(&a, &dir);
                (stdout, files_under(&dir))
            })
            .collect();
        checked += runs[0].1.len();
        if runs[0] != runs[1] || runs[0].1.is_empty() {
            mismatched.push(*name);
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("{} commands rerun with --jobs 1 and 3, {checked} files and stdout compared; mismatched: {mismatched:?}", commands.len()),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("simplex ETF from Riesz packing", c01_simplex),
        ("Tammes k=8 d=3", c02_tammes),
        ("toy embedding margin ordering", c03_toy),
        ("gamma_min ceiling and attainment", c04_ceiling),
        ("GM-Softmax lower bound", c05_gm_bound),
        ("shared optimum of NormFace/CosFace/ArcFace", c06_shared_optimum),
        ("small-margin degeneracy", c07_small_margin),
        ("sample margin regularizer widens margins", c08_sample_margin_reg),
        ("zero-centroid regularizer under imbalance", c09_zero_centroid),
        ("gradient suite", c10_gradcheck),
        ("inequality suite", c11_inequalities),
        ("determinism", c12_determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str()) && *f != (i + 1).to_string()) {
            continue;
        }
        let o = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!o.pass);
        println!("{} criterion {:>2} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
