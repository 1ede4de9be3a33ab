//! Unit-sphere primitives: row normalization, angles, Gram matrices, tangent
//! projection, centroids and the analytic simplex equiangular tight frame.

use std::ops::Deref;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::scalar::Scalar;

/// Absolute tolerance used by the unit-norm checks in this module.
pub const UNIT_TOL: f64 = 1e-9;

/// `UNIT_TOL`, widened to what the scalar type can actually resolve.
pub fn unit_tol<T: Scalar>() -> T {
    T::of(UNIT_TOL).max(T::epsilon() * T::of(100.0))
}

/// A single vector in R^d.
pub type DVector<T> = Vec<T>;

/// k class prototypes stored as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoMatrix<T> {
    rows: Matrix<T>,
    unit: bool,
}

/// N feature embeddings stored as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    rows: Matrix<T>,
    unit: bool,
}

macro_rules! row_set_impl {
    ($ty:ident, $min_rows:expr, $what:literal) => {
        impl<T: Scalar> $ty<T> {
            /// Wraps `rows` without touching their norms.
            pub fn new(rows: Matrix<T>) -> Result<Self> {
                if rows.rows() < $min_rows {
                    return Err(Error::Shape(format!(
                        concat!($what, " needs at least {} rows, got {}"),
                        $min_rows,
                        rows.rows()
                    )));
                }
                Ok(Self { rows, unit: false })
            }

            /// Normalizes every row and marks the set as unit-norm.
            pub fn unit(rows: Matrix<T>) -> Result<Self> {
                let mut out = Self::new(rows)?;
                out.rows = normalize_rows(&out.rows)?;
                out.unit = true;
                Ok(out)
            }

            /// Marks already-normalized rows as unit-norm after checking them.
            pub fn assume_unit(rows: Matrix<T>) -> Result<Self> {
                let mut out = Self::new(rows)?;
                let tol = unit_tol::<T>();
                for (i, r) in out.rows.iter_rows().enumerate() {
                    if (norm(r) - T::one()).abs() > tol {
                        return Err(Error::Degenerate { what: concat!($what, " (not unit-norm)"), row: i });
                    }
                }
                out.unit = true;
                Ok(out)
            }

            pub fn is_unit(&self) -> bool {
                self.unit
            }

            pub fn matrix(&self) -> &Matrix<T> {
                &self.rows
            }

            pub fn into_matrix(self) -> Matrix<T> {
                self.rows
            }
        }

        impl<T> Deref for $ty<T> {
            type Target = Matrix<T>;
            fn deref(&self) -> &Matrix<T> {
                &self.rows
            }
        }
    };
}

row_set_impl!(ProtoMatrix, 2, "prototype matrix");
row_set_impl!(FeatureMatrix, 1, "feature matrix");

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if !(n > T::zero()) {
            return Err(Error::Degenerate { what: "matrix", row: i });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// Angle in radians between two non-zero vectors, in `[0, pi]`.
pub fn angle<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    let nu = norm(u);
    if !(nu > T::zero()) {
        return Err(Error::Degenerate { what: "angle operand", row: 0 });
    }
    let nv = norm(v);
    if !(nv > T::zero()) {
        return Err(Error::Degenerate { what: "angle operand", row: 1 });
    }
    Ok(clamp_unit(dot(u, v) / (nu * nv)).acos())
}

#[inline]
pub(crate) fn clamp_unit<T: Scalar>(c: T) -> T {
    c.max(-T::one()).min(T::one())
}

/// Gram matrix of the prototype rows.
pub fn gram<T: Scalar>(w: &Matrix<T>) -> Matrix<T> {
    let k = w.rows();
    let mut g = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(w.row(i), w.row(j));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

/// Projects `g` onto the tangent space of the unit sphere at `p`.
pub fn tangent_project<T: Scalar>(p: &[T], g: &[T]) -> DVector<T> {
    let radial = dot(g, p);
    g.iter().zip(p).map(|(&gi, &pi)| gi - radial * pi).collect()
}

pub(crate) fn tangent_project_in_place<T: Scalar>(p: &[T], g: &mut [T]) {
    let radial = dot(g, p);
    for (gi, &pi) in g.iter_mut().zip(p) {
        *gi -= radial * pi;
    }
}

/// Arithmetic mean of the rows.
pub fn centroid<T: Scalar>(w: &Matrix<T>) -> DVector<T> {
    let mut c = vec![T::zero(); w.cols()];
    for r in w.iter_rows() {
        for (ci, &x) in c.iter_mut().zip(r) {
            *ci += x;
        }
    }
    let k = T::of_usize(w.rows().max(1));
    c.iter_mut().for_each(|x| *x /= k);
    c
}

/// Vertices of a regular (k-1)-simplex inscribed in the unit sphere of R^d.
///
/// The centered frame `e_i - 1/k` is expressed in the Helmert basis of the
/// sum-zero hyperplane of R^k, which gives k-1 coordinates per vertex; the
/// remaining `d - (k-1)` coordinates are zero.
pub fn simplex_etf<T: Scalar>(k: usize, d: usize) -> Result<ProtoMatrix<T>> {
    if k < 2 {
        return Err(Error::Infeasible(format!("simplex needs k >= 2, got {k}")));
    }
    if k > d + 1 {
        return Err(Error::Infeasible(format!(
            "a regular simplex with {k} vertices does not fit in dimension {d} (need k <= d+1)"
        )));
    }
    let kf = T::of_usize(k);
    let radius = (kf / (kf - T::one())).sqrt();
    let mut w = Matrix::zeros(k, d);
    for col in 0..k - 1 {
        // Helmert vector h = (1,..,1, -(col+1), 0,..)/sqrt((col+1)(col+2)).
        let m = T::of_usize(col + 1);
        let scale = radius / (m * (m + T::one())).sqrt();
        for row in 0..=col {
            w.set(row, col, scale);
        }
        w.set(col + 1, col, -m * scale);
    }
    ProtoMatrix::assume_unit(w)
}

/// Rows drawn from an isotropic Gaussian and normalized.
pub fn random_unit_rows<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        loop {
            let v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                for (dst, x) in m.row_mut(i).iter_mut().zip(v) {
                    *dst = T::of(x / n);
                }
                break;
            }
        }
    }
    m
}
