//! Time-stepping schemes on a shared noise lattice.
//!
//! All three variants advance every particle by
//! `u_{n+1} = u_n + h * drift(u_n) + diffusion(u_n) * dW_n`
//! with ensemble-dependent drift and diffusion:
//!
//! - tamed: gain `C^up (h C^pp + gamma)^{-1}`; the `h`-dependent inverse
//!   keeps the update bounded even for superlinear forward maps. For linear
//!   models the whitened form `C B^T M` with `M = (h B C B^T + I)^{-1}`,
//!   `B = gamma^{-1/2} A`, is used; both routes are algebraically identical.
//! - Euler-Maruyama comparator: gain `C^up gamma^{-1}`, i.e. the same step
//!   with the taming inverse replaced by `gamma^{-1}`.
//! - Tikhonov: the tamed step applied to the extended problem produced by
//!   [`extend_tikhonov`], driving `K + p` dimensional noise.
//!
//! `M` and the taming inverse are always applied through Cholesky solves of
//! the SPD matrix, never by explicit inversion.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::model::{extend_tikhonov, InverseProblem};
use crate::noise::{LevelIncrements, NoiseLattice};

/// Which iteration to run.
#[derive(Clone, Debug)]
pub enum SchemeVariant {
    Tamed,
    EulerMaruyama,
    /// Tamed iteration on the Tikhonov extension of a linear problem.
    Tikhonov {
        lambda: f64,
        prior_cov: DMatrix<f64>,
    },
}

impl SchemeVariant {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeVariant::Tamed => "tamed",
            SchemeVariant::EulerMaruyama => "euler_maruyama",
            SchemeVariant::Tikhonov { .. } => "tikhonov",
        }
    }
}

/// Discretization parameters for one run.
#[derive(Clone, Debug)]
pub struct SchemeConfig {
    pub variant: SchemeVariant,
    /// Dyadic level: the run takes `2^level` steps over the horizon.
    pub level: u32,
    pub horizon: f64,
    /// A particle norm above this halts the run and records an explosion.
    pub explosion_threshold: f64,
    /// Zeroes the noise: the drift-only flow on the same grid.
    pub deterministic: bool,
    /// Run only this many steps of the level grid (None: all `2^level`).
    pub max_steps: Option<usize>,
}

impl SchemeConfig {
    pub fn new(variant: SchemeVariant, level: u32, horizon: f64) -> Self {
        Self {
            variant,
            level,
            horizon,
            explosion_threshold: 1e8,
            deterministic: false,
            max_steps: None,
        }
    }
}

/// States of one run on its own dyadic grid. `states[n]` is the ensemble at
/// time `n * h`; truncated at the first explosion.
#[derive(Clone, Debug)]
pub struct Trajectory {
    variant: SchemeVariant,
    level: u32,
    horizon: f64,
    deterministic: bool,
    lattice_seed: u64,
    states: Vec<Ensemble>,
    exploded_at: Option<f64>,
}

impl Trajectory {
    pub fn variant(&self) -> &SchemeVariant {
        &self.variant
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic
    }

    /// Seed of the lattice that drove this run; used to refuse mixing
    /// trajectories from different noise realizations.
    pub fn lattice_seed(&self) -> u64 {
        self.lattice_seed
    }

    /// Step size of this run's grid.
    pub fn h(&self) -> f64 {
        self.horizon / (1u64 << self.level) as f64
    }

    pub fn states(&self) -> &[Ensemble] {
        &self.states
    }

    pub fn state(&self, n: usize) -> &Ensemble {
        &self.states[n]
    }

    pub fn initial(&self) -> &Ensemble {
        &self.states[0]
    }

    pub fn last(&self) -> &Ensemble {
        self.states.last().expect("trajectory holds >= 1 state")
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.h()
    }

    /// First time a particle norm crossed the explosion threshold or went
    /// non-finite; `None` for a complete run.
    pub fn exploded_at(&self) -> Option<f64> {
        self.exploded_at
    }

    pub fn is_exploded(&self) -> bool {
        self.exploded_at.is_some()
    }

    /// Assembles a trajectory from raw parts, bypassing `simulate`. For
    /// in-crate tests that need pathological inputs.
    #[cfg(test)]
    pub(crate) fn from_parts(
        level: u32,
        horizon: f64,
        lattice_seed: u64,
        states: Vec<Ensemble>,
        exploded_at: Option<f64>,
    ) -> Self {
        Self {
            variant: SchemeVariant::Tamed,
            level,
            horizon,
            deterministic: false,
            lattice_seed,
            states,
            exploded_at,
        }
    }
}

/// Drift and diffusion of one step evaluated at one ensemble, plus the
/// scratch needed to compute them without reallocating.
pub(crate) struct StepEngine<'a> {
    prob: &'a InverseProblem,
    em: bool,
    h: f64,
    p: usize,
    k: usize,
    j: usize,
    gamma_chol: Option<Cholesky<f64, Dyn>>,
    // scratch
    dev: DMatrix<f64>,
    kdev: DMatrix<f64>,
    g_vals: DMatrix<f64>,
    g_scratch: DMatrix<f64>,
    s_mat: DMatrix<f64>,
    cross: DMatrix<f64>,
    resid: DMatrix<f64>,
    solved: DMatrix<f64>,
    diff_rhs: DMatrix<f64>,
    /// Output: per-particle drift columns (p x J).
    pub drift: DMatrix<f64>,
    /// Output: diffusion operator applied to each particle's raw lattice
    /// increment (p x K).
    pub diffusion: DMatrix<f64>,
}

impl<'a> StepEngine<'a> {
    pub fn new(prob: &'a InverseProblem, h: f64, em: bool, particles: usize) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size {h} must be finite and > 0"
            )));
        }
        let p = prob.param_dim();
        let k = prob.obs_dim();
        let j = particles;
        if j < 2 {
            return Err(Error::InvalidArgument(format!(
                "step engine: needs >= 2 particles, got {j}"
            )));
        }
        // The comparator on a nonlinear model solves against gamma itself.
        let gamma_chol = if em && prob.whitened().is_none() {
            Some(
                Cholesky::new(prob.gamma().clone())
                    .ok_or_else(|| Error::NotSpd("gamma".into()))?,
            )
        } else {
            None
        };
        Ok(Self {
            prob,
            em,
            h,
            p,
            k,
            j,
            gamma_chol,
            dev: DMatrix::zeros(p, j),
            kdev: DMatrix::zeros(k, j),
            g_vals: DMatrix::zeros(k, j),
            g_scratch: DMatrix::zeros(p, j),
            s_mat: DMatrix::zeros(k, k),
            cross: DMatrix::zeros(p, k),
            resid: DMatrix::zeros(k, j),
            solved: DMatrix::zeros(k, j),
            diff_rhs: DMatrix::zeros(k, k),
            drift: DMatrix::zeros(p, j),
            diffusion: DMatrix::zeros(p, k),
        })
    }

    /// Fills `self.drift` and `self.diffusion` for the ensemble `u` (p x J).
    pub fn compute_ops(&mut self, u: &DMatrix<f64>) -> Result<()> {
        debug_assert_eq!(u.nrows(), self.p);
        debug_assert_eq!(u.ncols(), self.j);
        let inv_j = 1.0 / self.j as f64;

        // Deviations are shared by both routes.
        let mean = u.column_mean();
        self.dev.copy_from(u);
        for mut col in self.dev.column_iter_mut() {
            col -= &mean;
        }

        if let Some(w) = self.prob.whitened() {
            // Whitened route: kdev = B * dev, residual_j = B u_j - y_w.
            self.kdev.gemm(1.0, &w.operator, &self.dev, 0.0);
            let k_mean = &w.operator * &mean - &w.observation;
            for (mut rcol, kcol) in self.resid.column_iter_mut().zip(self.kdev.column_iter()) {
                rcol.copy_from(&kcol);
                rcol += &k_mean;
            }
            // cross = C B^T = dev kdev^T / J.
            gemm_nt(&mut self.cross, &self.dev, &self.kdev, inv_j);
            if self.em {
                // M replaced by the identity.
                self.solved.copy_from(&self.resid);
                self.diffusion.copy_from(&self.cross);
            } else {
                // s = h B C B^T + I.
                gemm_nt(&mut self.s_mat, &self.kdev, &self.kdev, self.h * inv_j);
                for d in 0..self.k {
                    self.s_mat[(d, d)] += 1.0;
                }
                let chol = Cholesky::new(self.s_mat.clone())
                    .ok_or_else(|| Error::NonFinite("taming matrix".into()))?;
                self.solved.copy_from(&self.resid);
                chol.solve_mut(&mut self.solved);
                self.diff_rhs.fill(0.0);
                self.diff_rhs.fill_diagonal(1.0);
                chol.solve_mut(&mut self.diff_rhs);
                self.diffusion.gemm(1.0, &self.cross, &self.diff_rhs, 0.0);
            }
        } else {
            // General route through the forward values.
            self.prob
                .model()
                .eval_batch(u, &mut self.g_scratch, &mut self.g_vals);
            if self.g_vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("forward values".into()));
            }
            let g_mean = self.g_vals.column_mean();
            self.kdev.copy_from(&self.g_vals);
            for mut col in self.kdev.column_iter_mut() {
                col -= &g_mean;
            }
            for (mut rcol, gcol) in self.resid.column_iter_mut().zip(self.g_vals.column_iter()) {
                rcol.copy_from(&gcol);
                rcol -= self.prob.observation();
            }
            gemm_nt(&mut self.cross, &self.dev, &self.kdev, inv_j);
            if self.em {
                let chol = self.gamma_chol.as_ref().expect("cached at construction");
                self.solved.copy_from(&self.resid);
                chol.solve_mut(&mut self.solved);
                self.diffusion
                    .gemm(1.0, &self.cross, self.prob.gamma_inv_sqrt(), 0.0);
            } else {
                // s = h C^pp + gamma.
                gemm_nt(&mut self.s_mat, &self.kdev, &self.kdev, self.h * inv_j);
                self.s_mat += self.prob.gamma();
                let chol = Cholesky::new(self.s_mat.clone())
                    .ok_or_else(|| Error::NonFinite("taming matrix".into()))?;
                self.solved.copy_from(&self.resid);
                chol.solve_mut(&mut self.solved);
                self.diff_rhs.copy_from(self.prob.gamma_sqrt());
                chol.solve_mut(&mut self.diff_rhs);
                self.diffusion.gemm(1.0, &self.cross, &self.diff_rhs, 0.0);
            }
        }
        // drift = -cross * solved, columnwise C^up S^{-1} (y - G(u_j)).
        self.drift.gemm(-1.0, &self.cross, &self.solved, 0.0);
        Ok(())
    }

    /// `out = u + h * drift + diffusion * dw`, reusing precomputed ops.
    pub fn apply(&self, u: &DMatrix<f64>, dw: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        out.copy_from(u);
        for (o, d) in out.iter_mut().zip(self.drift.iter()) {
            *o += self.h * d;
        }
        out.gemm(1.0, &self.diffusion, dw, 1.0);
    }
}

/// `out = a * b^T * scale` for small dense blocks, no allocation.
pub(crate) fn gemm_nt(out: &mut DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, scale: f64) {
    let (m, n) = (a.nrows(), b.nrows());
    debug_assert_eq!(a.ncols(), b.ncols());
    debug_assert_eq!((out.nrows(), out.ncols()), (m, n));
    for col in 0..n {
        for row in 0..m {
            let mut acc = 0.0;
            for t in 0..a.ncols() {
                acc += a[(row, t)] * b[(col, t)];
            }
            out[(row, col)] = acc * scale;
        }
    }
}

fn check_step_inputs(
    ensemble: &Ensemble,
    prob: &InverseProblem,
    h: f64,
    dw: &DMatrix<f64>,
) -> Result<()> {
    if ensemble.dim() != prob.param_dim() {
        return Err(Error::Dimension(format!(
            "ensemble dim {} != problem parameter dim {}",
            ensemble.dim(),
            prob.param_dim()
        )));
    }
    if dw.nrows() != prob.obs_dim() || dw.ncols() != ensemble.len() {
        return Err(Error::Dimension(format!(
            "noise is {}x{}, expected {}x{}",
            dw.nrows(),
            dw.ncols(),
            prob.obs_dim(),
            ensemble.len()
        )));
    }
    if dw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("noise increment".into()));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size {h} must be finite and > 0"
        )));
    }
    Ok(())
}

fn one_step(ensemble: &Ensemble, prob: &InverseProblem, h: f64, dw: &DMatrix<f64>, em: bool) -> Result<Ensemble> {
    check_step_inputs(ensemble, prob, h, dw)?;
    let mut engine = StepEngine::new(prob, h, em, ensemble.len())?;
    engine.compute_ops(ensemble.particles())?;
    let mut out = DMatrix::zeros(ensemble.dim(), ensemble.len());
    engine.apply(ensemble.particles(), dw, &mut out);
    Ok(Ensemble::from_matrix_unchecked(out))
}

/// One tamed step. `dw` holds each particle's Brownian increment over the
/// step as a column (`K x J`, variance `h I` when drawn from a lattice).
pub fn step_tamed(
    ensemble: &Ensemble,
    prob: &InverseProblem,
    h: f64,
    dw: &DMatrix<f64>,
) -> Result<Ensemble> {
    one_step(ensemble, prob, h, dw, false)
}

/// One Euler-Maruyama comparator step: the tamed step with the taming
/// inverse replaced by `gamma^{-1}`.
pub fn step_em(
    ensemble: &Ensemble,
    prob: &InverseProblem,
    h: f64,
    dw: &DMatrix<f64>,
) -> Result<Ensemble> {
    one_step(ensemble, prob, h, dw, true)
}

/// One Tikhonov step: the tamed step on an extended problem (as built by
/// [`extend_tikhonov`]). `dw` must have the extended noise dimension `K + p`.
pub fn step_teki(
    ensemble: &Ensemble,
    extended: &InverseProblem,
    h: f64,
    dw: &DMatrix<f64>,
) -> Result<Ensemble> {
    if extended.whitened().is_none() {
        return Err(Error::InvalidArgument(
            "tikhonov step requires a linear (extended) problem".into(),
        ));
    }
    if extended.obs_dim() <= extended.param_dim() {
        return Err(Error::Dimension(format!(
            "extended problem must have output dim > parameter dim, got {} <= {}",
            extended.obs_dim(),
            extended.param_dim()
        )));
    }
    one_step(ensemble, extended, h, dw, false)
}

/// Max-norm residual of the taming identity `M (h B C B^T + I) = I` at one
/// ensemble of a linear problem, with `M` formed by Cholesky solves.
pub fn taming_identity_residual(
    ensemble: &Ensemble,
    prob: &InverseProblem,
    h: f64,
) -> Result<f64> {
    let w = prob
        .whitened()
        .ok_or_else(|| Error::InvalidArgument("taming identity needs a linear problem".into()))?;
    let mean = ensemble.mean();
    let mut dev = ensemble.particles().clone();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    let bdev = &w.operator * dev;
    let k = w.operator.nrows();
    let mut s = &bdev * bdev.transpose() * (h / ensemble.len() as f64);
    for d in 0..k {
        s[(d, d)] += 1.0;
    }
    let chol = Cholesky::new(s.clone()).ok_or_else(|| Error::NonFinite("taming matrix".into()))?;
    let mut m = DMatrix::identity(k, k);
    chol.solve_mut(&mut m);
    Ok((m * s - DMatrix::<f64>::identity(k, k)).amax())
}

/// Resolves a variant against the base problem: the problem the steps
/// actually see (extended for Tikhonov) and whether taming is disabled.
pub(crate) fn variant_problem(
    variant: &SchemeVariant,
    prob: &InverseProblem,
) -> Result<(Option<InverseProblem>, bool)> {
    match variant {
        SchemeVariant::Tamed => Ok((None, false)),
        SchemeVariant::EulerMaruyama => Ok((None, true)),
        SchemeVariant::Tikhonov { lambda, prior_cov } => {
            let ext = extend_tikhonov(prob, *lambda, prior_cov)?;
            Ok((Some(ext), false))
        }
    }
}

/// Runs one trajectory of the configured variant on its dyadic grid, reading
/// increments from the lattice. Explosions are recorded and halt the run;
/// they are data, not errors.
pub fn simulate(
    config: &SchemeConfig,
    prob: &InverseProblem,
    initial: &Ensemble,
    lattice: &NoiseLattice,
) -> Result<Trajectory> {
    let (ext, em) = variant_problem(&config.variant, prob)?;
    let prob_eff = ext.as_ref().unwrap_or(prob);

    if initial.dim() != prob_eff.param_dim() {
        return Err(Error::Dimension(format!(
            "initial ensemble dim {} != parameter dim {}",
            initial.dim(),
            prob_eff.param_dim()
        )));
    }
    if lattice.dim() != prob_eff.obs_dim() {
        return Err(Error::Dimension(format!(
            "lattice noise dim {} != required noise dim {} for variant {}",
            lattice.dim(),
            prob_eff.obs_dim(),
            config.variant.name()
        )));
    }
    if lattice.particles() != initial.len() {
        return Err(Error::Dimension(format!(
            "lattice has {} particle streams, ensemble has {}",
            lattice.particles(),
            initial.len()
        )));
    }
    if config.level > lattice.levels() {
        return Err(Error::InvalidArgument(format!(
            "run level {} exceeds lattice level {}",
            config.level,
            lattice.levels()
        )));
    }
    if (config.horizon - lattice.horizon()).abs() > 1e-12 * lattice.horizon().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "config horizon {} != lattice horizon {}",
            config.horizon,
            lattice.horizon()
        )));
    }
    if !(config.explosion_threshold > 0.0) {
        return Err(Error::InvalidArgument(
            "explosion threshold must be > 0".into(),
        ));
    }

    let total_steps = 1usize << config.level;
    let steps = match config.max_steps {
        Some(s) if s > total_steps => {
            return Err(Error::InvalidArgument(format!(
                "max_steps {s} exceeds the {total_steps} steps of level {}",
                config.level
            )));
        }
        Some(s) => s,
        None => total_steps,
    };
    let h = config.horizon / total_steps as f64;
    let increments = lattice.increments_at_level(config.level)?;

    let mut engine = StepEngine::new(prob_eff, h, em, initial.len())?;
    let (p, jn) = (initial.dim(), initial.len());
    let mut states = Vec::with_capacity(steps + 1);
    states.push(initial.clone());
    let mut current = initial.particles().clone();
    let mut next = DMatrix::zeros(p, jn);
    let mut dw = DMatrix::zeros(lattice.dim(), jn);
    let mut exploded_at = None;

    for n in 0..steps {
        engine.compute_ops(&current)?;
        if !config.deterministic {
            fill_increment(&mut dw, &increments, n);
        }
        engine.apply(&current, &dw, &mut next);
        if let Some(bad) = explosion_breach(&next, config.explosion_threshold) {
            let _ = bad;
            exploded_at = Some((n + 1) as f64 * h);
            break;
        }
        states.push(Ensemble::from_matrix_unchecked(next.clone()));
        std::mem::swap(&mut current, &mut next);
    }

    Ok(Trajectory {
        variant: config.variant.clone(),
        level: config.level,
        horizon: config.horizon,
        deterministic: config.deterministic,
        lattice_seed: lattice.seed(),
        states,
        exploded_at,
    })
}

pub(crate) fn fill_increment(dw: &mut DMatrix<f64>, increments: &LevelIncrements, step: usize) {
    for j in 0..dw.ncols() {
        let src = increments.increment(j, step);
        for (d, v) in src.iter().enumerate() {
            dw[(d, j)] = *v;
        }
    }
}

/// First particle whose norm breaches the threshold (or is non-finite).
fn explosion_breach(u: &DMatrix<f64>, threshold: f64) -> Option<usize> {
    for j in 0..u.ncols() {
        let mut norm_sq = 0.0;
        for v in u.column(j).iter() {
            norm_sq += v * v;
        }
        if !norm_sq.is_finite() || norm_sq > threshold * threshold {
            return Some(j);
        }
    }
    None
}

/// Tamed run at the finest level of the lattice: the common reference that
/// coarse runs are compared against.
pub fn reference_path(
    prob: &InverseProblem,
    initial: &Ensemble,
    lattice: &NoiseLattice,
) -> Result<Trajectory> {
    let config = SchemeConfig::new(SchemeVariant::Tamed, lattice.levels(), lattice.horizon());
    simulate(&config, prob, initial, lattice)
}

/// Piecewise interpolation of a trajectory at a finest-grid time of its
/// lattice: within a cell of the trajectory's own grid,
/// `Y(t) = Y_n + (t - t_n) drift(Y_n) + diffusion(Y_n) (W(t) - W(t_n))`.
/// At the trajectory's own grid nodes this returns the stored state.
pub fn interpolate(
    traj: &Trajectory,
    prob: &InverseProblem,
    lattice: &NoiseLattice,
    t: f64,
) -> Result<Ensemble> {
    if traj.lattice_seed() != lattice.seed() {
        return Err(Error::InvalidArgument(format!(
            "trajectory was driven by lattice seed {}, got {}",
            traj.lattice_seed(),
            lattice.seed()
        )));
    }
    if traj.level() > lattice.levels() {
        return Err(Error::InvalidArgument(format!(
            "trajectory level {} exceeds lattice level {}",
            traj.level(),
            lattice.levels()
        )));
    }
    if (traj.horizon() - lattice.horizon()).abs() > 1e-12 * lattice.horizon().max(1.0) {
        return Err(Error::InvalidArgument(
            "trajectory and lattice horizons differ".into(),
        ));
    }
    let node = lattice.grid_node(t)?;
    if let Some(te) = traj.exploded_at() {
        if t >= te {
            return Err(Error::InvalidArgument(format!(
                "trajectory exploded at {te}; cannot interpolate at {t}"
            )));
        }
    }

    let per_cell = 1usize << (lattice.levels() - traj.level());
    let cell = node / per_cell;
    let offset = node % per_cell;
    if offset == 0 {
        return Ok(traj.state(cell).clone());
    }

    let (ext, em) = variant_problem(traj.variant(), prob)?;
    let prob_eff = ext.as_ref().unwrap_or(prob);
    if lattice.dim() != prob_eff.obs_dim() {
        return Err(Error::Dimension(format!(
            "lattice noise dim {} != problem noise dim {}",
            lattice.dim(),
            prob_eff.obs_dim()
        )));
    }

    let anchor = traj.state(cell);
    let mut engine = StepEngine::new(prob_eff, traj.h(), em, anchor.len())?;
    engine.compute_ops(anchor.particles())?;

    let dt = offset as f64 * lattice.h_min();
    let mut out = anchor.particles().clone();
    for (o, d) in out.iter_mut().zip(engine.drift.iter()) {
        *o += dt * d;
    }
    if !traj.deterministic() {
        // W(t) - W(t_cell): finest increments summed in index order.
        let kdim = lattice.dim();
        let mut dw = DMatrix::zeros(kdim, anchor.len());
        for j in 0..anchor.len() {
            let mut acc = vec![0.0; kdim];
            for s in cell * per_cell..node {
                for (a, v) in acc.iter_mut().zip(lattice.finest_increment(j, s)) {
                    *a += v;
                }
            }
            for (d, v) in acc.iter().enumerate() {
                dw[(d, j)] = *v;
            }
        }
        out.gemm(1.0, &engine.diffusion, &dw, 1.0);
    }
    Ok(Ensemble::from_matrix_unchecked(out))
}
