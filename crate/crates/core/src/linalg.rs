//! Small dense linear-algebra helpers shared across modules: symmetric
//! square roots, rank-revealing SVD utilities with a fixed relative cutoff,
//! and pairwise (cascade) summation for reproducible reductions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff: sigma kept iff
/// `sigma > sigma_max * max(rows, cols) * RANK_CUTOFF_FACTOR`.
pub const RANK_CUTOFF_FACTOR: f64 = 1e-12;

/// Checks squareness and symmetry up to `tol * max|entry|`, returning the
/// symmetrized matrix `(m + m^T) / 2`.
pub fn require_symmetric(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > tol * scale {
        return Err(Error::NotSpd(format!(
            "{what}: asymmetry {asym:.3e} exceeds {tol:.1e} * scale"
        )));
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Symmetric eigendecomposition clamped to the positive axis.
/// Returns `(q, eigenvalues)` with `m = q diag(eigenvalues) q^T`.
fn sym_eigen(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = require_symmetric(m, 1e-10, what)?;
    let eig = sym.symmetric_eigen();
    Ok((eig.eigenvectors, eig.eigenvalues))
}

/// Symmetric square root of an SPD matrix. The result is itself symmetric,
/// which callers rely on when whitening.
pub fn sym_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (q, mut ev) = sym_eigen(m, what)?;
    for v in ev.iter_mut() {
        if *v <= 0.0 {
            return Err(Error::NotSpd(format!("{what}: eigenvalue {v:.3e} <= 0")));
        }
        *v = v.sqrt();
    }
    Ok(&q * DMatrix::from_diagonal(&ev) * q.transpose())
}

/// Symmetric inverse square root of an SPD matrix.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (q, mut ev) = sym_eigen(m, what)?;
    for v in ev.iter_mut() {
        if *v <= 0.0 {
            return Err(Error::NotSpd(format!("{what}: eigenvalue {v:.3e} <= 0")));
        }
        *v = 1.0 / v.sqrt();
    }
    Ok(&q * DMatrix::from_diagonal(&ev) * q.transpose())
}

/// Thin SVD of a rectangular matrix with the crate-wide rank cutoff applied.
pub struct CutoffSvd {
    /// Columns: left singular vectors kept after the cutoff (rows x rank).
    pub u: DMatrix<f64>,
    /// Columns: right singular vectors kept after the cutoff (cols x rank).
    pub v: DMatrix<f64>,
    /// Singular values kept after the cutoff, descending.
    pub sigma: Vec<f64>,
}

impl CutoffSvd {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("svd input".into()));
        }
        let svd = m.clone().svd(true, true);
        let u_full = svd.u.expect("svd requested u");
        let vt_full = svd.v_t.expect("svd requested v_t");
        let smax = svd.singular_values.max();
        let cutoff = smax * m.nrows().max(m.ncols()) as f64 * RANK_CUTOFF_FACTOR;
        let kept: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > cutoff)
            .collect();
        // Rank 0: keep well-shaped empty factors so projectors come out zero.
        if kept.is_empty() {
            return Ok(Self {
                u: DMatrix::zeros(m.nrows(), 0),
                v: DMatrix::zeros(m.ncols(), 0),
                sigma: Vec::new(),
            });
        }
        let u = DMatrix::from_columns(
            &kept.iter().map(|&i| u_full.column(i).into_owned()).collect::<Vec<_>>(),
        );
        let v = DMatrix::from_columns(
            &kept
                .iter()
                .map(|&i| vt_full.row(i).transpose().into_owned())
                .collect::<Vec<_>>(),
        );
        let sigma = kept.iter().map(|&i| svd.singular_values[i]).collect();
        Ok(Self { u, v, sigma })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Orthogonal projector onto the column space (in the row-count space).
    pub fn column_space_projector(&self) -> DMatrix<f64> {
        if self.rank() == 0 {
            return DMatrix::zeros(self.u.nrows(), self.u.nrows());
        }
        &self.u * self.u.transpose()
    }

    /// Orthogonal projector onto the row space (in the column-count space).
    pub fn row_space_projector(&self) -> DMatrix<f64> {
        if self.rank() == 0 {
            return DMatrix::zeros(self.v.nrows(), self.v.nrows());
        }
        &self.v * self.v.transpose()
    }

    /// Minimum-norm least-squares solution of `m x = z`.
    pub fn min_norm_solve(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.v.nrows());
        for (i, &s) in self.sigma.iter().enumerate() {
            let coef = self.u.column(i).dot(z) / s;
            x.axpy(coef, &self.v.column(i).into_owned(), 1.0);
        }
        x
    }
}

/// Pairwise (cascade) summation. Reduction shape depends only on the slice
/// length, so results are reproducible for a fixed input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of the mean (0 when fewer than two samples),
/// both accumulated pairwise.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
