//! Small dense helpers shared by the solver modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Smallest Cholesky pivot (squared diagonal of `L`) accepted without
/// regularization.
pub const MIN_PIVOT: f64 = 1e-10;
/// Shift added to a nearly singular SPD matrix before refactoring.
pub const REGULARIZATION: f64 = 1e-9;
/// Combines whose reciprocal-condition estimate falls below this are rejected.
pub const MIN_RCOND: f64 = 1e-14;

/// Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub regularized: bool,
}

impl SpdFactor {
    /// Factors `m`, shifting it by `REGULARIZATION·I` when its smallest pivot
    /// is below `MIN_PIVOT`. Returns `None` if even the shifted matrix is not
    /// positive definite.
    pub fn new(m: &Mat) -> Option<Self> {
        if let Some(chol) = Cholesky::new(m.clone()) {
            if min_pivot(&chol) >= MIN_PIVOT {
                return Some(SpdFactor { chol, regularized: false });
            }
        }
        let n = m.nrows();
        let shifted = m + Mat::identity(n, n) * REGULARIZATION;
        Cholesky::new(shifted).map(|chol| SpdFactor { chol, regularized: true })
    }

    pub fn solve(&self, rhs: &Mat) -> Mat {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &Vector) -> Vector {
        self.chol.solve(rhs)
    }
}

fn min_pivot(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min)
}

/// LU factor with a cheap reciprocal-condition estimate (ratio of the
/// smallest to the largest pivot magnitude).
pub struct CheckedLu {
    lu: LU<f64, Dyn, Dyn>,
}

impl CheckedLu {
    pub fn new(m: Mat) -> Result<Self> {
        let lu = m.lu();
        let u = lu.u();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..u.nrows() {
            let v = u[(i, i)].abs();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let rcond = if u.nrows() == 0 { 1.0 } else if hi > 0.0 { lo / hi } else { 0.0 };
        if !(rcond >= MIN_RCOND) {
            return Err(Error::IllConditionedCombine { rcond });
        }
        Ok(CheckedLu { lu })
    }

    pub fn solve(&self, rhs: &Mat) -> Mat {
        self.lu.solve(rhs).expect("pivots checked nonzero at construction")
    }
}

/// `(m + mᵀ) / 2`
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Row-wise Euclidean norms of `m`.
pub fn row_norms(m: &Mat) -> Vector {
    Vector::from_iterator(m.nrows(), m.row_iter().map(|r| r.norm()))
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
pub fn bits_equal(a: &Mat, b: &Mat) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}
