//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::{standard_normal, Real};

/// Builds a matrix from row vectors.
pub fn from_rows<T: Real>(rows: &[Vec<T>]) -> Result<DMatrix<T>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Input("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows<T: Real>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn is_symmetric<T: Real>(m: &DMatrix<T>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.iter().fold(T::one(), |a, &v| a.max(v.abs()));
    let tol = T::lit(1e-9) * scale;
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower<T: Real>(m: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    if !is_symmetric(m) {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what} has non-finite entries")));
    }
    m.clone().cholesky().map(|c| c.l()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// `log |A|` from the lower Cholesky factor of `A`.
pub fn log_det_from_lower<T: Real>(l: &DMatrix<T>) -> T {
    let two = T::lit(2.0);
    (0..l.nrows()).map(|i| two * l[(i, i)].ln()).sum()
}

/// Solves `L L^T x = b`.
pub fn chol_solve<T: Real>(l: &DMatrix<T>, b: &DVector<T>) -> DVector<T> {
    let y = l.solve_lower_triangular(b).expect("cholesky factor has a positive diagonal");
    l.transpose().solve_upper_triangular(&y).expect("cholesky factor has a positive diagonal")
}

/// Squared Mahalanobis norm `r^T (L L^T)^{-1} r`.
pub fn mahalanobis_sq<T: Real>(l: &DMatrix<T>, r: &DVector<T>) -> T {
    let y = l.solve_lower_triangular(r).expect("cholesky factor has a positive diagonal");
    y.dot(&y)
}

/// Multivariate log-gamma `ln Γ_p(a)`.
pub fn ln_multigamma<T: Real>(a: T, p: usize) -> T {
    let pf = T::from_count(p);
    let mut acc = pf * (pf - T::one()) / T::lit(4.0) * T::pi().ln();
    for j in 0..p {
        acc += (a - T::from_count(j) / T::lit(2.0)).log_gamma();
    }
    acc
}

/// Symmetrises `m` and lifts eigenvalues below `floor` up to it.
/// Returns the repaired matrix and whether any eigenvalue was raised.
pub fn floor_spd<T: Real>(m: &DMatrix<T>, floor: T) -> (DMatrix<T>, bool) {
    let sym = (m + m.transpose()) * T::lit(0.5);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return (sym, false);
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    ((&out + out.transpose()) * T::lit(0.5), true)
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian<T: Real> {
    mean: DVector<T>,
    cov: DMatrix<T>,
    lower: DMatrix<T>,
    log_det: T,
}

impl<T: Real> Gaussian<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        if cov.nrows() != mean.len() || !cov.is_square() {
            return Err(Error::Dimension { what: "covariance", expected: mean.len(), got: cov.nrows() });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("mean must be finite".into()));
        }
        let lower = cholesky_lower(&cov, "covariance")?;
        let log_det = log_det_from_lower(&lower);
        Ok(Self { mean, cov, lower, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<T> {
        &self.cov
    }

    pub fn lower(&self) -> &DMatrix<T> {
        &self.lower
    }

    pub fn log_det(&self) -> T {
        self.log_det
    }

    pub fn log_pdf(&self, x: &[T]) -> T {
        let r = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(&a, &b)| a - b));
        let d = T::from_count(self.dim());
        let half = T::lit(0.5);
        -half * (d * T::two_pi().ln() + self.log_det + mahalanobis_sq(&self.lower, &r))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let eta = DVector::from_fn(self.dim(), |_, _| standard_normal::<T, _>(rng));
        let v = &self.mean + &self.lower * eta;
        v.iter().copied().collect()
    }
}
