//! Seeded Gaussian blobs and class-size schedules for balanced, long-tailed
//! and step-imbalanced training sets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::random_unit_rows;
use crate::io::{labels_to_csv, matrix_to_csv};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Distance of every class mean from the origin in [`make_blobs`].
pub const SEPARATION: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceKind {
    Balanced,
    Longtail,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImbalanceSpec {
    pub kind: ImbalanceKind,
    /// Largest over smallest class size.
    pub rho: f64,
    /// Fraction of minority classes (step only).
    pub mu: f64,
    pub n_max: usize,
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        Self { kind: ImbalanceKind::Balanced, rho: 1.0, mu: 0.5, n_max: 100 }
    }
}

impl ImbalanceSpec {
    pub fn balanced(n_max: usize) -> Self {
        Self { n_max, ..Self::default() }
    }

    pub fn longtail(rho: f64, n_max: usize) -> Self {
        Self { kind: ImbalanceKind::Longtail, rho, n_max, ..Self::default() }
    }

    pub fn step(rho: f64, mu: f64, n_max: usize) -> Self {
        Self { kind: ImbalanceKind::Step, rho, mu, n_max }
    }
}

fn minority_classes(k: usize, mu: f64) -> usize {
    (mu * k as f64).ceil() as usize
}

/// Per-class sample counts.
///
/// Long-tail sizes decay geometrically, `n_max * rho^(-i/(k-1))`; the step
/// schedule gives the last `ceil(mu k)` classes `n_max / rho` samples each.
pub fn imbalance_counts(k: usize, spec: &ImbalanceSpec) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidCounts("k must be >= 1".into()));
    }
    if spec.n_max < 2 {
        return Err(Error::InvalidCounts(format!("n_max must be >= 2, got {}", spec.n_max)));
    }
    if !(spec.rho >= 1.0 && spec.rho.is_finite()) {
        return Err(Error::InvalidCounts(format!("rho must be a finite value >= 1, got {}", spec.rho)));
    }
    let n_max = spec.n_max as f64;
    let counts: Vec<usize> = match spec.kind {
        ImbalanceKind::Balanced => vec![spec.n_max; k],
        ImbalanceKind::Longtail if k == 1 => vec![spec.n_max],
        ImbalanceKind::Longtail => {
            (0..k).map(|i| (n_max * spec.rho.powf(-(i as f64) / (k as f64 - 1.0))).round() as usize).collect()
        }
        ImbalanceKind::Step => {
            if !(spec.mu > 0.0 && spec.mu < 1.0) {
                return Err(Error::InvalidCounts(format!("mu must lie in (0, 1), got {}", spec.mu)));
            }
            let minority = minority_classes(k, spec.mu);
            if minority >= k {
                return Err(Error::InvalidCounts(format!(
                    "mu={} leaves no frequent class among {k}",
                    spec.mu
                )));
            }
            let small = (n_max / spec.rho).round() as usize;
            (0..k).map(|i| if i < k - minority { spec.n_max } else { small }).collect()
        }
    };
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidCounts(format!("class {i} rounds to zero samples ({:?})", spec)));
    }
    Ok(counts)
}

/// Labelled samples around per-class means; rows are grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct Blobs<T> {
    pub inputs: Matrix<T>,
    pub labels: Vec<usize>,
    pub class_means: Matrix<T>,
    pub counts: Vec<usize>,
    pub spread: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobsMeta {
    pub k: usize,
    pub d_in: usize,
    pub counts: Vec<usize>,
    pub spread: f64,
    pub seed: u64,
}

impl<T: Scalar> Blobs<T> {
    pub fn k(&self) -> usize {
        self.class_means.rows()
    }

    pub fn d_in(&self) -> usize {
        self.class_means.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fresh samples around the same means.
    pub fn resample(&self, counts: &[usize], seed: u64) -> Result<Self> {
        sample_around(&self.class_means, counts, self.spread, seed)
    }

    pub fn meta(&self) -> BlobsMeta {
        BlobsMeta { k: self.k(), d_in: self.d_in(), counts: self.counts.clone(), spread: self.spread, seed: self.seed }
    }

    /// Writes `{stem}_inputs.csv`, `{stem}_labels.csv` and `{stem}.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}_inputs.csv")), matrix_to_csv(&self.inputs))?;
        std::fs::write(dir.join(format!("{stem}_labels.csv")), labels_to_csv(&self.labels))?;
        let meta = serde_json::to_string_pretty(&self.meta()).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.json")), meta + "\n")?;
        Ok(())
    }
}

/// Blobs with class means at random unit directions scaled by
/// [`SEPARATION`], plus isotropic Gaussian noise of standard deviation
/// `spread`.
pub fn make_blobs<T: Scalar>(k: usize, d_in: usize, counts: &[usize], spread: f64, seed: u64) -> Result<Blobs<T>> {
    make_blobs_with_separation(k, d_in, counts, spread, SEPARATION, seed)
}

/// Directions are redrawn (up to 256 times) until every pair of means is at
/// least `separation` apart; otherwise the best-spread draw is kept.
pub fn make_blobs_with_separation<T: Scalar>(
    k: usize,
    d_in: usize,
    counts: &[usize],
    spread: f64,
    separation: f64,
    seed: u64,
) -> Result<Blobs<T>> {
    if k == 0 || d_in == 0 {
        return Err(Error::InvalidCounts(format!("need k >= 1 and d_in >= 1, got k={k}, d_in={d_in}")));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidCounts(format!("separation must be positive, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Matrix<f64>)> = None;
    for _ in 0..256 {
        let mut dirs: Matrix<f64> = random_unit_rows(k, d_in, &mut rng);
        dirs.scale(separation);
        let gap = min_pairwise_distance(&dirs);
        if best.as_ref().is_none_or(|b| gap > b.0) {
            best = Some((gap, dirs));
        }
        if gap >= separation {
            break;
        }
    }
    let means = Matrix::from_f64(&best.unwrap().1);
    sample_around(&means, counts, spread, seed)
}

fn min_pairwise_distance(m: &Matrix<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            let d: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

fn sample_around<T: Scalar>(means: &Matrix<T>, counts: &[usize], spread: f64, seed: u64) -> Result<Blobs<T>> {
    let (k, d_in) = (means.rows(), means.cols());
    if counts.len() != k {
        return Err(Error::InvalidCounts(format!("{} counts for {k} classes", counts.len())));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidCounts(format!("spread must be >= 0, got {spread}")));
    }
    // A separate stream keeps samples independent of how many draws the
    // mean placement consumed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n: usize = counts.iter().sum();
    let mut inputs = Matrix::zeros(n, d_in);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (y, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            for (dst, &mu) in inputs.row_mut(row).iter_mut().zip(means.row(y)) {
                let noise: f64 = rng.sample(StandardNormal);
                *dst = mu + T::of(spread * noise);
            }
            labels.push(y);
            row += 1;
        }
    }
    Ok(Blobs { inputs, labels, class_means: means.clone(), counts: counts.to_vec(), spread, seed })
}
