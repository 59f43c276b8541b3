//! Particle ensembles and their empirical statistics.
//!
//! Particles are stored as columns of a `p x J` matrix. All empirical
//! covariances use the `1/J` normalization, and the two symmetric ones are
//! explicitly symmetrized after assembly.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, CutoffSvd};

/// A particle ensemble: column `j` of [`Ensemble::particles`] is `u^(j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
}

impl Ensemble {
    /// Wraps a `p x J` matrix of particle columns. Requires `J >= 2` and all
    /// entries finite; a non-finite state is an explosion, which the schemes
    /// record rather than construct.
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.nrows() == 0 {
            return Err(Error::Dimension("ensemble: zero state dimension".into()));
        }
        if particles.ncols() < 2 {
            return Err(Error::InvalidArgument(format!(
                "ensemble: needs at least 2 particles, got {}",
                particles.ncols()
            )));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble particles".into()));
        }
        Ok(Self { particles })
    }

    /// Builds an ensemble from per-particle vectors.
    pub fn from_particles(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidArgument("ensemble: no particles".into()));
        }
        let dim = columns[0].len();
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::Dimension("ensemble: ragged particle dims".into()));
        }
        Self::new(DMatrix::from_columns(columns))
    }

    /// i.i.d. Gaussian draw with the given mean and SPD covariance.
    pub fn gaussian(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        particles: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let p = mean.len();
        let sqrt = linalg::sym_sqrt(cov, "initial covariance")?;
        if sqrt.nrows() != p {
            return Err(Error::Dimension(format!(
                "initial covariance is {}x{}, mean dim is {p}",
                sqrt.nrows(),
                sqrt.ncols()
            )));
        }
        let z = DMatrix::from_fn(p, particles, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut u = &sqrt * z;
        for mut col in u.column_iter_mut() {
            col += mean;
        }
        Self::new(u)
    }

    /// Gaussian draw affinely corrected so the empirical mean and empirical
    /// `1/J` covariance equal `mean` and `cov` exactly (up to rounding).
    /// Requires `particles >= dim + 1` so the raw sample covariance is
    /// generically invertible.
    pub fn gaussian_matched_moments(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        particles: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let p = mean.len();
        if particles < p + 1 {
            return Err(Error::InvalidArgument(format!(
                "matched-moments draw: needs at least dim+1 = {} particles, got {particles}",
                p + 1
            )));
        }
        let target_sqrt = linalg::sym_sqrt(cov, "initial covariance")?;
        if target_sqrt.nrows() != p {
            return Err(Error::Dimension(format!(
                "initial covariance is {}x{}, mean dim is {p}",
                target_sqrt.nrows(),
                target_sqrt.ncols()
            )));
        }
        let z = DMatrix::from_fn(p, particles, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z_mean = z.column_mean();
        let mut dev = z;
        for mut col in dev.column_iter_mut() {
            col -= &z_mean;
        }
        let sample_cov = &dev * dev.transpose() / particles as f64;
        let whiten = linalg::sym_inv_sqrt(&sample_cov, "sample covariance of the raw draw")?;
        let mut u = &target_sqrt * whiten * dev;
        for mut col in u.column_iter_mut() {
            col += mean;
        }
        Self::new(u)
    }

    /// State dimension `p`.
    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    /// Particle count `J`.
    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Particle `j` as a column view.
    pub fn particle(&self, j: usize) -> DVectorView<'_, f64> {
        self.particles.column(j)
    }

    /// `p x J` matrix of particle columns.
    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    /// Empirical mean.
    pub fn mean(&self) -> DVector<f64> {
        self.particles.column_mean()
    }

    /// Applies a map to every particle, keeping the container shape.
    /// Internal: skips the finiteness re-check.
    pub(crate) fn from_matrix_unchecked(particles: DMatrix<f64>) -> Self {
        Self { particles }
    }

    /// Squared particle norms, stacked-state view: `sum_j |u^(j)|^2`.
    pub fn stacked_norm_squared(&self) -> f64 {
        self.particles.iter().map(|v| v * v).sum()
    }

    /// Mean squared particle norm `(1/J) sum_j |u^(j)|^2`.
    pub fn mean_norm_squared(&self) -> f64 {
        self.stacked_norm_squared() / self.len() as f64
    }
}

/// Empirical ensemble statistics, all with `1/J` normalization.
#[derive(Clone, Debug)]
pub struct EnsembleStats {
    /// Particle mean.
    pub mean: DVector<f64>,
    /// Mean of the forward values.
    pub forward_mean: DVector<f64>,
    /// `p x J` deviations `u^(j) - mean`.
    pub deviations: DMatrix<f64>,
    /// `K x J` forward deviations `G(u^(j)) - forward_mean`.
    pub forward_deviations: DMatrix<f64>,
    /// Parameter covariance `C`, symmetrized.
    pub cov: DMatrix<f64>,
    /// Parameter-output cross covariance `C^up` (`p x K`).
    pub cross_cov: DMatrix<f64>,
    /// Output covariance `C^pp`, symmetrized.
    pub forward_cov: DMatrix<f64>,
}

/// Computes all empirical statistics from an ensemble and its forward values
/// (`K x J`, column `j` = `G(u^(j))`).
pub fn stats(ensemble: &Ensemble, forward_values: &DMatrix<f64>) -> Result<EnsembleStats> {
    let j = ensemble.len();
    if forward_values.ncols() != j {
        return Err(Error::Dimension(format!(
            "stats: {} forward columns for {j} particles",
            forward_values.ncols()
        )));
    }
    if forward_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stats: forward values".into()));
    }
    let inv_j = 1.0 / j as f64;
    let mean = ensemble.mean();
    let forward_mean = forward_values.column_mean();
    let mut deviations = ensemble.particles().clone();
    for mut col in deviations.column_iter_mut() {
        col -= &mean;
    }
    let mut forward_deviations = forward_values.clone();
    for mut col in forward_deviations.column_iter_mut() {
        col -= &forward_mean;
    }
    let cov_raw = &deviations * deviations.transpose() * inv_j;
    let cov = (&cov_raw + cov_raw.transpose()) * 0.5;
    let cross_cov = &deviations * forward_deviations.transpose() * inv_j;
    let fcov_raw = &forward_deviations * forward_deviations.transpose() * inv_j;
    let forward_cov = (&fcov_raw + fcov_raw.transpose()) * 0.5;
    Ok(EnsembleStats {
        mean,
        forward_mean,
        deviations,
        forward_deviations,
        cov,
        cross_cov,
        forward_cov,
    })
}

/// Spread energy `(1/J) sum_j |u^(j) - mean|^2`, i.e. `trace(C)`.
pub fn spread_energy(ensemble: &Ensemble) -> f64 {
    let mean = ensemble.mean();
    let mut acc = 0.0;
    for j in 0..ensemble.len() {
        let d = ensemble.particle(j) - &mean;
        acc += d.norm_squared();
    }
    acc / ensemble.len() as f64
}

/// Orthogonal projector onto `range(b^T)` (the row space of `b`), the
/// subspace of parameter space visible to a whitened operator `b`.
pub fn range_projector(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(CutoffSvd::new(b)?.row_space_projector())
}

/// Projects every particle onto `range(b^T)`. Kernel components of the
/// particles are invisible to the dynamics and frozen in place, so studies
/// of the visible subspace start from a projected ensemble.
pub fn project_to_range(ensemble: &Ensemble, b: &DMatrix<f64>) -> Result<Ensemble> {
    if b.ncols() != ensemble.dim() {
        return Err(Error::Dimension(format!(
            "operator has {} columns, ensemble dim is {}",
            b.ncols(),
            ensemble.dim()
        )));
    }
    let p = range_projector(b)?;
    Ok(Ensemble::from_matrix_unchecked(&p * ensemble.particles()))
}

/// Largest relative distance of any particle from the affine span of the
/// initial ensemble: `max_j dist(u^(j) - mean_0, span{e_0}) / (1 + |u^(j)|)`.
pub fn affine_span_residual(ensemble: &Ensemble, initial: &Ensemble) -> Result<f64> {
    if ensemble.dim() != initial.dim() || ensemble.len() != initial.len() {
        return Err(Error::Dimension(
            "affine_span_residual: ensembles have different shapes".into(),
        ));
    }
    let mean0 = initial.mean();
    let mut dev0 = initial.particles().clone();
    for mut col in dev0.column_iter_mut() {
        col -= &mean0;
    }
    let proj = CutoffSvd::new(&dev0)?.column_space_projector();
    let mut worst: f64 = 0.0;
    for j in 0..ensemble.len() {
        let u = ensemble.particle(j);
        let d = &u - &mean0;
        let off = &d - &proj * &d;
        worst = worst.max(off.norm() / (1.0 + u.norm()));
    }
    Ok(worst)
}
