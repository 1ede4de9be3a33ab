//! Class margin, sample margins and the compactness metrics derived from them.

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::{angle, clamp_unit, normalize_rows};
use crate::matrix::{dot, norm, Matrix};
use crate::scalar::Scalar;

/// Hard-margin thresholds reported by default.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.0, 0.5, 1.0];

pub(crate) fn check_labels(labels: &[usize], k: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { sample: i, label: y, k });
        }
    }
    Ok(())
}

pub(crate) fn check_dims<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>) -> Result<()> {
    if w.cols() != z.cols() {
        return Err(Error::Shape(format!(
            "prototypes have dimension {} but features have dimension {}",
            w.cols(),
            z.cols()
        )));
    }
    Ok(())
}

fn check_nonzero<T: Scalar>(m: &Matrix<T>, what: &'static str) -> Result<()> {
    for (i, r) in m.iter_rows().enumerate() {
        if !(norm(r) > T::zero()) {
            return Err(Error::Degenerate { what, row: i });
        }
    }
    Ok(())
}

/// Minimal pairwise angle between prototypes, in radians. Magnitudes are ignored.
pub fn class_margin<T: Scalar>(w: &Matrix<T>) -> Result<T> {
    if w.rows() < 2 {
        return Err(Error::Shape("class margin needs at least two prototypes".into()));
    }
    check_nonzero(w, "prototype")?;
    let mut best = T::infinity();
    for i in 0..w.rows() {
        for j in i + 1..w.rows() {
            best = best.min(angle(w.row(i), w.row(j))?);
        }
    }
    Ok(best)
}

/// Largest competing logit for `z`, with the lowest index winning ties.
pub(crate) fn max_competitor<T: Scalar>(logits: &[T], y: usize) -> (usize, T) {
    let mut arg = usize::MAX;
    let mut best = T::neg_infinity();
    for (j, &v) in logits.iter().enumerate() {
        if j != y && (arg == usize::MAX || v > best) {
            arg = j;
            best = v;
        }
    }
    (arg, best)
}

/// `w_y . z - max_{j != y} w_j . z` on raw inner products.
pub fn sample_margin<T: Scalar>(w: &Matrix<T>, z: &[T], y: usize) -> Result<T> {
    let k = w.rows();
    if y >= k {
        return Err(Error::LabelOutOfRange { sample: 0, label: y, k });
    }
    if z.len() != w.cols() {
        return Err(Error::Shape(format!("feature of length {} vs dimension {}", z.len(), w.cols())));
    }
    let logits: Vec<T> = w.iter_rows().map(|r| dot(r, z)).collect();
    Ok(logits[y] - max_competitor(&logits, y).1)
}

/// Per-class sample margin `gamma_j`: the worst sample margin within class j.
pub fn per_class_margins<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize]) -> Result<Vec<T>> {
    let k = w.rows();
    check_dims(w, z)?;
    check_labels(labels, k, z.rows())?;
    let mut out = vec![T::infinity(); k];
    let mut seen = vec![false; k];
    for (i, &y) in labels.iter().enumerate() {
        let m = sample_margin(w, z.row(i), y)?;
        out[y] = out[y].min(m);
        seen[y] = true;
    }
    let missing: Vec<usize> = (0..k).filter(|&j| !seen[j]).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    Ok(out)
}

/// `gamma_min`, the smallest sample margin over the whole dataset.
pub fn min_sample_margin<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize]) -> Result<T> {
    Ok(per_class_margins(w, z, labels)?.into_iter().fold(T::infinity(), T::min))
}

/// Mean over samples of the sample margin computed with cosine similarities.
pub fn mean_cosine_sample_margin<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize]) -> Result<T> {
    check_dims(w, z)?;
    check_labels(labels, w.rows(), z.rows())?;
    check_nonzero(w, "prototype")?;
    check_nonzero(z, "feature")?;
    let wn = normalize_rows(w)?;
    let zn = normalize_rows(z)?;
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let cos: Vec<T> = wn.iter_rows().map(|r| clamp_unit(dot(r, zn.row(i)))).collect();
        total += cos[y] - max_competitor(&cos, y).1;
    }
    Ok(total / T::of_usize(labels.len().max(1)))
}

/// Ratio between the largest and smallest prototype norms.
pub fn magnitude_ratio<T: Scalar>(w: &Matrix<T>) -> Result<T> {
    check_nonzero(w, "prototype")?;
    let norms: Vec<T> = w.iter_rows().map(norm).collect();
    let max = norms.iter().copied().fold(T::zero(), T::max);
    let min = norms.iter().copied().fold(T::infinity(), T::min);
    Ok(max / min)
}

/// Empirical hard-margin loss per class: the fraction of class-j samples whose
/// sample margin is strictly below `gamma`.
pub fn hard_margin_rate<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, labels: &[usize], gamma: T) -> Result<Vec<T>> {
    let k = w.rows();
    check_dims(w, z)?;
    check_labels(labels, k, z.rows())?;
    let mut below = vec![0usize; k];
    let mut count = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        count[y] += 1;
        if sample_margin(w, z.row(i), y)? < gamma {
            below[y] += 1;
        }
    }
    let missing: Vec<usize> = (0..k).filter(|&j| count[j] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    Ok(below.iter().zip(&count).map(|(&b, &c)| T::of_usize(b) / T::of_usize(c)).collect())
}

/// Every margin statistic for one (prototypes, features, labels) snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginReport<T> {
    /// Radians.
    pub class_margin: T,
    pub per_class: Vec<T>,
    pub gamma_min: T,
    pub m_samp: T,
    pub magnitude_ratio: T,
    /// `(threshold, per-class rate)` pairs in threshold order.
    pub hard_margin_rates: Vec<(T, Vec<T>)>,
}

impl<T: Scalar> MarginReport<T> {
    /// Computes the report. With `on_unit_sphere`, sample margins are taken on
    /// row-normalized prototypes and features; the magnitude ratio always uses
    /// the raw prototypes.
    pub fn compute(
        w: &Matrix<T>,
        z: &Matrix<T>,
        labels: &[usize],
        thresholds: &[T],
        on_unit_sphere: bool,
    ) -> Result<Self> {
        let magnitude_ratio = magnitude_ratio(w)?;
        let class_margin = class_margin(w)?;
        let m_samp = mean_cosine_sample_margin(w, z, labels)?;
        let (wv, zv);
        let (wr, zr) = if on_unit_sphere {
            wv = normalize_rows(w)?;
            zv = normalize_rows(z)?;
            (&wv, &zv)
        } else {
            (w, z)
        };
        let per_class = per_class_margins(wr, zr, labels)?;
        let gamma_min = per_class.iter().copied().fold(T::infinity(), T::min);
        let hard_margin_rates = thresholds
            .iter()
            .map(|&g| hard_margin_rate(wr, zr, labels, g).map(|r| (g, r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { class_margin, per_class, gamma_min, m_samp, magnitude_ratio, hard_margin_rates })
    }

    pub fn class_margin_deg(&self) -> f64 {
        self.class_margin.as_f64().to_degrees()
    }

    /// Flat JSON object; angles carried in both degrees and radians.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("class_margin_deg".into(), num(self.class_margin_deg()));
        m.insert("class_margin_rad".into(), num(self.class_margin.as_f64()));
        m.insert("gamma_min".into(), num(self.gamma_min.as_f64()));
        m.insert("m_samp".into(), num(self.m_samp.as_f64()));
        m.insert("magnitude_ratio".into(), num(self.magnitude_ratio.as_f64()));
        for (j, g) in self.per_class.iter().enumerate() {
            m.insert(format!("gamma_{j}"), num(g.as_f64()));
        }
        for (g, rates) in &self.hard_margin_rates {
            for (j, r) in rates.iter().enumerate() {
                m.insert(format!("hard_margin_rate_{}_class_{j}", g.as_f64()), num(r.as_f64()));
            }
        }
        Value::Object(m)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["class_margin_deg".to_string(), "gamma_min".into(), "m_samp".into(), "magnitude_ratio".into()];
        cols.extend((0..self.per_class.len()).map(|j| format!("gamma_{j}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![
            self.class_margin_deg(),
            self.gamma_min.as_f64(),
            self.m_samp.as_f64(),
            self.magnitude_ratio.as_f64(),
        ];
        vals.extend(self.per_class.iter().map(|g| g.as_f64()));
        vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}
