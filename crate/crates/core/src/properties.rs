//! Executable identities of the linear-model update.
//!
//! The tamed step on a linear model satisfies exact algebraic relations:
//! the update ignores observation components orthogonal to the operator
//! range, conditional one-step decrements of the ensemble spread and of the
//! observed energy have closed forms, kernel components of the particles
//! never move, and running sums of update magnitudes are bounded by the
//! initial data. Each check compares a measured quantity against its
//! analytic value and reports the outcome; Monte Carlo comparisons use
//! standard-error tolerances, exact ones use machine tolerances.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{range_projector, Ensemble};
use crate::error::{Error, Result};
use crate::linalg::{mean_and_se, require_symmetric};
use crate::model::{ForwardModel, InverseProblem};
use crate::schemes::{gemm_nt, SchemeVariant, StepEngine, Trajectory};

/// Outcome of one identity check. `pass` holds exactly when
/// `|analytic - empirical| <= tolerance`; one-sided checks store the clamped
/// violation as `empirical` with `analytic = 0` and `tolerance = 0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityReport {
    pub name: String,
    pub analytic: f64,
    pub empirical: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub samples: usize,
}

impl IdentityReport {
    pub fn new(name: &str, analytic: f64, empirical: f64, tolerance: f64, samples: usize) -> Self {
        let pass = (analytic - empirical).abs() <= tolerance;
        Self {
            name: name.to_string(),
            analytic,
            empirical,
            tolerance,
            pass,
            samples,
        }
    }
}

/// Ensemble-dependent operators of the whitened linear step, assembled once
/// per check: covariance `c`, gain pieces `cross = C B^T` and
/// `m = (h B C B^T + I)^{-1}`.
struct LinearOps {
    bdev: DMatrix<f64>,
    c: DMatrix<f64>,
    cross: DMatrix<f64>,
    m: DMatrix<f64>,
}

fn linear_ops(ensemble: &Ensemble, b: &DMatrix<f64>, h: f64) -> Result<LinearOps> {
    if b.ncols() != ensemble.dim() {
        return Err(Error::Dimension(format!(
            "operator has {} columns, ensemble dim is {}",
            b.ncols(),
            ensemble.dim()
        )));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("step size {h} must be > 0")));
    }
    let j = ensemble.len();
    let k = b.nrows();
    let mean = ensemble.mean();
    let mut dev = ensemble.particles().clone();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    let bdev = b * &dev;
    let inv_j = 1.0 / j as f64;
    let mut c = DMatrix::zeros(ensemble.dim(), ensemble.dim());
    gemm_nt(&mut c, &dev, &dev, inv_j);
    let mut cross = DMatrix::zeros(ensemble.dim(), k);
    gemm_nt(&mut cross, &dev, &bdev, inv_j);
    let mut s = DMatrix::zeros(k, k);
    gemm_nt(&mut s, &bdev, &bdev, h * inv_j);
    for d in 0..k {
        s[(d, d)] += 1.0;
    }
    let chol = Cholesky::new(s).ok_or_else(|| Error::NonFinite("taming matrix".into()))?;
    let mut m = DMatrix::identity(k, k);
    chol.solve_mut(&mut m);
    Ok(LinearOps { bdev, c, cross, m })
}

/// The whitened update drops observation components orthogonal to the
/// operator range: `C B^T M y_tilde = 0` whenever `B^T y_tilde = 0`.
pub fn check_orthogonality(
    ensemble: &Ensemble,
    b: &DMatrix<f64>,
    h: f64,
    y_tilde: &DVector<f64>,
) -> Result<IdentityReport> {
    if y_tilde.len() != b.nrows() {
        return Err(Error::Dimension(format!(
            "y_tilde has {} entries, operator has {} rows",
            y_tilde.len(),
            b.nrows()
        )));
    }
    let scale = 1.0 + y_tilde.norm();
    let residual = (b.transpose() * y_tilde).norm();
    if residual > 1e-9 * scale * (1.0 + b.amax()) {
        return Err(Error::Precondition(format!(
            "y_tilde is not orthogonal to the operator range (|B^T y| = {residual:.3e})"
        )));
    }
    let ops = linear_ops(ensemble, b, h)?;
    let v = &ops.cross * (&ops.m * y_tilde);
    Ok(IdentityReport::new(
        "orthogonality",
        0.0,
        v.norm(),
        1e-10 * scale,
        ensemble.len(),
    ))
}

fn spread_of(u: &DMatrix<f64>) -> f64 {
    let mean = u.column_mean();
    let mut acc = 0.0;
    for col in u.column_iter() {
        for (v, m) in col.iter().zip(mean.iter()) {
            let d = v - m;
            acc += d * d;
        }
    }
    acc / u.ncols() as f64
}

fn gaussian_increments(dw: &mut DMatrix<f64>, sqrt_h: f64, rng: &mut ChaCha8Rng) {
    for v in dw.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * sqrt_h;
    }
}

fn check_draw_count(draws: usize) -> Result<()> {
    if draws < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "Monte Carlo checks need >= 10^4 draws, got {draws}"
        )));
    }
    Ok(())
}

/// Conditional one-step decrement of the ensemble spread
/// `(1/J) sum_j |u_j - mean|^2` under the whitened tamed step:
/// analytically
/// `-h^2 (1/J) sum_j |C B^T M B e_j|^2 - h (J+1)/J |C B^T M|_HS^2`,
/// compared against a Monte Carlo average over fresh noise draws.
pub fn check_spread_decrement(
    ensemble: &Ensemble,
    b: &DMatrix<f64>,
    h: f64,
    draws: usize,
    seed: u64,
) -> Result<IdentityReport> {
    check_draw_count(draws)?;
    let ops = linear_ops(ensemble, b, h)?;
    let j = ensemble.len();
    let k = b.nrows();

    let gain = &ops.cross * &ops.m;
    let mut sum_sq = 0.0;
    for col in ops.bdev.column_iter() {
        sum_sq += (&gain * col).norm_squared();
    }
    let analytic = -h * h * sum_sq / j as f64
        - h * (j as f64 + 1.0) / j as f64 * gain.norm_squared();
    assert!(analytic <= 1e-15, "spread decrement must be <= 0, got {analytic}");

    // Monte Carlo over the same step the schemes take: identity noise
    // covariance, so the whitened and raw forms coincide.
    let prob = InverseProblem::new(
        ForwardModel::linear(b.clone())?,
        DMatrix::identity(k, k),
        DVector::zeros(k),
    )?;
    let mut engine = StepEngine::new(&prob, h, false, j)?;
    engine.compute_ops(ensemble.particles())?;
    let before = spread_of(ensemble.particles());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dw = DMatrix::zeros(k, j);
    let mut out = DMatrix::zeros(ensemble.dim(), j);
    let sqrt_h = h.sqrt();
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        gaussian_increments(&mut dw, sqrt_h, &mut rng);
        engine.apply(ensemble.particles(), &dw, &mut out);
        vals.push(spread_of(&out) - before);
    }
    let (mean, se) = mean_and_se(&vals);
    let tolerance = 4.0 * se + 1e-13 * (1.0 + analytic.abs());
    Ok(IdentityReport::new(
        "spread_decrement",
        analytic,
        mean,
        tolerance,
        draws,
    ))
}

/// Conditional one-step decrement of the observed energy
/// `(1/J) sum_j (|B r_j|^2 + |B e_j|^2)` with residuals `r_j = u_j - witness`:
/// analytically the four-term sum
/// `-h^2 (1/J) sum |B C B^T M B r_j|^2 - 2h (1/J) sum <x_j, C x_j>
///  - h^2 (1/J) sum |B C B^T M B e_j|^2 - h (1/J^2) sum <z_j, C z_j>`
/// with `x_j = B^T M B r_j`, `z_j = B^T M B e_j`.
pub fn check_residual_decrement(
    ensemble: &Ensemble,
    b: &DMatrix<f64>,
    h: f64,
    witness: &DVector<f64>,
    draws: usize,
    seed: u64,
) -> Result<IdentityReport> {
    check_draw_count(draws)?;
    if witness.len() != ensemble.dim() {
        return Err(Error::Dimension(format!(
            "witness has {} entries, ensemble dim is {}",
            witness.len(),
            ensemble.dim()
        )));
    }
    let ops = linear_ops(ensemble, b, h)?;
    let j = ensemble.len();
    let jf = j as f64;
    let k = b.nrows();
    let y = b * witness;

    let n_mat = b * &ops.cross; // B C B^T
    let mut t_r_sq = 0.0;
    let mut t_r_quad = 0.0;
    let mut t_e_sq = 0.0;
    let mut t_e_quad = 0.0;
    for jj in 0..j {
        let br = b * ensemble.particle(jj) - &y;
        let a = &ops.m * &br;
        t_r_sq += (&n_mat * &a).norm_squared();
        let x = b.transpose() * &a;
        t_r_quad += x.dot(&(&ops.c * &x));

        let ae = &ops.m * ops.bdev.column(jj);
        t_e_sq += (&n_mat * &ae).norm_squared();
        let z = b.transpose() * &ae;
        t_e_quad += z.dot(&(&ops.c * &z));
    }
    let analytic = -h * h / jf * t_r_sq - 2.0 * h / jf * t_r_quad - h * h / jf * t_e_sq
        - h / (jf * jf) * t_e_quad;
    assert!(analytic <= 1e-15, "energy decrement must be <= 0, got {analytic}");

    let prob = InverseProblem::new(
        ForwardModel::linear(b.clone())?,
        DMatrix::identity(k, k),
        y.clone(),
    )?;
    let mut engine = StepEngine::new(&prob, h, false, j)?;
    engine.compute_ops(ensemble.particles())?;
    let energy = |u: &DMatrix<f64>| -> f64 {
        let bu = b * u;
        let mean = bu.column_mean();
        let mut acc = 0.0;
        for col in bu.column_iter() {
            for ((v, yv), mv) in col.iter().zip(y.iter()).zip(mean.iter()) {
                let r = v - yv;
                let e = v - mv;
                acc += r * r + e * e;
            }
        }
        acc / u.ncols() as f64
    };
    let before = energy(ensemble.particles());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dw = DMatrix::zeros(k, j);
    let mut out = DMatrix::zeros(ensemble.dim(), j);
    let sqrt_h = h.sqrt();
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        gaussian_increments(&mut dw, sqrt_h, &mut rng);
        engine.apply(ensemble.particles(), &dw, &mut out);
        vals.push(energy(&out) - before);
    }
    let (mean, se) = mean_and_se(&vals);
    let tolerance = 4.0 * se + 1e-13 * (1.0 + analytic.abs());
    Ok(IdentityReport::new(
        "residual_decrement",
        analytic,
        mean,
        tolerance,
        draws,
    ))
}

/// Components of the particles orthogonal to `range(B^T)` never move: for a
/// trajectory started with projected deviations, both
/// `max_{n,j} |(I-P) e_n^{(j)}|` and `max_{n,j} |(I-P)(u_n - u_0)^{(j)}|`
/// stay at machine scale.
pub fn check_kernel_invariance(traj: &Trajectory, b: &DMatrix<f64>) -> Result<IdentityReport> {
    let initial = traj.initial();
    if b.ncols() != initial.dim() {
        return Err(Error::Dimension(format!(
            "operator has {} columns, trajectory dim is {}",
            b.ncols(),
            initial.dim()
        )));
    }
    let p = range_projector(b)?;
    let id = DMatrix::<f64>::identity(p.nrows(), p.ncols());
    let q = &id - &p; // kernel projector

    let scale = 1.0 + initial.particles().amax();
    let mean0 = initial.mean();
    let mut dev0 = initial.particles().clone();
    for mut col in dev0.column_iter_mut() {
        col -= &mean0;
    }
    let pre = (&q * &dev0).amax();
    if pre > 1e-9 * scale {
        return Err(Error::Precondition(format!(
            "initial deviations leave range(B^T) by {pre:.3e}; project the ensemble first"
        )));
    }

    let mut worst = 0.0f64;
    for state in traj.states() {
        let u = state.particles();
        let mean = u.column_mean();
        let mut dev = u.clone();
        for mut col in dev.column_iter_mut() {
            col -= &mean;
        }
        worst = worst.max((&q * &dev).amax());
        worst = worst.max((&q * (u - initial.particles())).amax());
    }
    Ok(IdentityReport::new(
        "kernel_invariance",
        0.0,
        worst,
        1e-9 * scale,
        traj.states().len(),
    ))
}

/// `sum_{k,l} <z_k, z_l> <z_k, S z_l>` for symmetric PSD `S`.
pub fn quadform(zs: &[DVector<f64>], s: &DMatrix<f64>) -> Result<f64> {
    let Some(first) = zs.first() else {
        return Err(Error::InvalidArgument("need at least one vector".into()));
    };
    let dim = first.len();
    if zs.iter().any(|z| z.len() != dim) || s.nrows() != dim || s.ncols() != dim {
        return Err(Error::Dimension(
            "vectors and matrix must share one dimension".into(),
        ));
    }
    let s = require_symmetric(s, 1e-10, "quadform matrix")?;
    let sz: Vec<DVector<f64>> = zs.iter().map(|z| &s * z).collect();
    let mut acc = 0.0;
    for zk in zs {
        for (l, zl) in zs.iter().enumerate() {
            acc += zk.dot(zl) * zk.dot(&sz[l]);
        }
    }
    Ok(acc)
}

/// The double sum `sum_{k,l} <z_k,z_l><z_k,S z_l>` is non-negative for
/// symmetric PSD `S` (this is what makes the analytic decrements signs
/// certain). The report carries the clamped violation.
pub fn check_quadform_nonneg(zs: &[DVector<f64>], s: &DMatrix<f64>) -> Result<IdentityReport> {
    let sym = require_symmetric(s, 1e-10, "quadform matrix")?;
    let eigs = sym.clone().symmetric_eigenvalues();
    let max_abs = eigs.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if eigs.iter().any(|&e| e < -1e-10 * (1.0 + max_abs)) {
        return Err(Error::NotSpd(format!(
            "quadform matrix has eigenvalue {:.3e}",
            eigs.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    let value = quadform(zs, &sym)?;
    let scale = {
        let z_energy: f64 = zs.iter().map(|z| z.norm_squared()).sum();
        sym.norm() * z_energy * z_energy
    };
    let violation = (-value - 1e-12 * scale).max(0.0);
    Ok(IdentityReport::new(
        "quadform_nonneg",
        0.0,
        violation,
        0.0,
        zs.len(),
    ))
}

/// Streaming study of the path-level monotone trends and summation bounds
/// over replica trajectories of the whitened tamed step on one linear
/// problem, all from a fixed initial ensemble.
///
/// Per grid index it accumulates the replica mean and variance of the
/// spread energy, the observed energy `(1/J) sum (|Br|^2 + |Be|^2)`, and
/// the two running sums that the initial data bounds:
/// `sum_k h |C_k B^T M_k|_HS^2` and
/// `sum_k h (1/J) sum_j <x_{k,j}, C_k x_{k,j}>`, `x = B^T M B r`.
pub struct TrendAccumulator {
    b: DMatrix<f64>,
    b_wit: DVector<f64>,
    h: f64,
    steps: usize,
    j: usize,
    replicas: usize,
    initial: Option<DMatrix<f64>>,
    initial_spread: f64,
    initial_energy: f64,
    spread_sum: Vec<f64>,
    dspread_sum: Vec<f64>,
    dspread_sq: Vec<f64>,
    energy_sum: Vec<f64>,
    denergy_sum: Vec<f64>,
    denergy_sq: Vec<f64>,
    cum_hs_sum: Vec<f64>,
    cum_hs_sq: Vec<f64>,
    cum_r_sum: Vec<f64>,
    cum_r_sq: Vec<f64>,
}

impl TrendAccumulator {
    /// `witness` must solve the whitened normal equations: the observation
    /// residual `B*witness - y_w` has to be orthogonal to `range(B)`.
    pub fn new(
        prob: &InverseProblem,
        witness: &DVector<f64>,
        steps: usize,
        h: f64,
    ) -> Result<Self> {
        let w = prob.whitened().ok_or_else(|| {
            Error::InvalidArgument("trend study needs a linear problem".into())
        })?;
        if witness.len() != prob.param_dim() {
            return Err(Error::Dimension(format!(
                "witness has {} entries, parameter dim is {}",
                witness.len(),
                prob.param_dim()
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("trend study needs >= 1 step".into()));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidArgument(format!("step size {h} must be > 0")));
        }
        let b = w.operator.clone();
        let b_wit = &b * witness;
        let gap = (b.transpose() * (&b_wit - &w.observation)).norm();
        if gap > 1e-8 * (1.0 + w.observation.norm()) * (1.0 + b.amax()) {
            return Err(Error::Precondition(format!(
                "witness does not solve the normal equations (|B^T(B w - y)| = {gap:.3e})"
            )));
        }
        let nodes = steps + 1;
        Ok(Self {
            b,
            b_wit,
            h,
            steps,
            j: 0,
            replicas: 0,
            initial: None,
            initial_spread: 0.0,
            initial_energy: 0.0,
            spread_sum: vec![0.0; nodes],
            dspread_sum: vec![0.0; steps],
            dspread_sq: vec![0.0; steps],
            energy_sum: vec![0.0; nodes],
            denergy_sum: vec![0.0; steps],
            denergy_sq: vec![0.0; steps],
            cum_hs_sum: vec![0.0; nodes],
            cum_hs_sq: vec![0.0; nodes],
            cum_r_sum: vec![0.0; nodes],
            cum_r_sq: vec![0.0; nodes],
        })
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    pub fn ingest(&mut self, traj: &Trajectory) -> Result<()> {
        if !matches!(traj.variant(), SchemeVariant::Tamed) {
            return Err(Error::Precondition(
                "trend identities hold for the tamed variant".into(),
            ));
        }
        if traj.is_exploded() || traj.states().len() != self.steps + 1 {
            return Err(Error::Precondition(format!(
                "need a complete {}-step run, got {} states (exploded: {})",
                self.steps,
                traj.states().len(),
                traj.is_exploded()
            )));
        }
        if (traj.h() - self.h).abs() > 1e-12 * self.h {
            return Err(Error::InvalidArgument(format!(
                "trajectory step {} != study step {}",
                traj.h(),
                self.h
            )));
        }
        match &self.initial {
            None => {
                let init = traj.initial().particles().clone();
                if self.b.ncols() != init.nrows() {
                    return Err(Error::Dimension(format!(
                        "operator has {} columns, trajectory dim is {}",
                        self.b.ncols(),
                        init.nrows()
                    )));
                }
                self.j = init.ncols();
                self.initial = Some(init);
            }
            Some(init) => {
                if traj.initial().particles() != init {
                    return Err(Error::Precondition(
                        "replicas must share one fixed initial ensemble".into(),
                    ));
                }
            }
        }

        let j = self.j;
        let jf = j as f64;
        let inv_j = 1.0 / jf;
        let k = self.b.nrows();
        let p = self.b.ncols();
        let mut dev = DMatrix::zeros(p, j);
        let mut bdev = DMatrix::zeros(k, j);
        let mut br = DMatrix::zeros(k, j);
        let mut s = DMatrix::zeros(k, k);
        let mut cross = DMatrix::zeros(p, k);
        let mut cum_hs = 0.0;
        let mut cum_r = 0.0;
        let mut prev_spread = 0.0;
        let mut prev_energy = 0.0;

        for (n, state) in traj.states().iter().enumerate() {
            let u = state.particles();
            let mean = u.column_mean();
            dev.copy_from(u);
            for mut col in dev.column_iter_mut() {
                col -= &mean;
            }
            bdev.gemm(1.0, &self.b, &dev, 0.0);
            br.gemm(1.0, &self.b, u, 0.0);
            for mut col in br.column_iter_mut() {
                col -= &self.b_wit;
            }

            let spread = dev.norm_squared() * inv_j;
            let energy = (br.norm_squared() + bdev.norm_squared()) * inv_j;

            // Record cumulative sums before adding this step's terms:
            // index n holds the sum over steps k < n.
            self.spread_sum[n] += spread;
            self.energy_sum[n] += energy;
            self.cum_hs_sum[n] += cum_hs;
            self.cum_hs_sq[n] += cum_hs * cum_hs;
            self.cum_r_sum[n] += cum_r;
            self.cum_r_sq[n] += cum_r * cum_r;
            if n > 0 {
                let ds = spread - prev_spread;
                self.dspread_sum[n - 1] += ds;
                self.dspread_sq[n - 1] += ds * ds;
                let de = energy - prev_energy;
                self.denergy_sum[n - 1] += de;
                self.denergy_sq[n - 1] += de * de;
            }
            prev_spread = spread;
            prev_energy = energy;
            if self.replicas == 0 && n == 0 {
                self.initial_spread = spread;
                self.initial_energy = energy;
            }

            if n < self.steps {
                gemm_nt(&mut s, &bdev, &bdev, self.h * inv_j);
                for d in 0..k {
                    s[(d, d)] += 1.0;
                }
                let chol = Cholesky::new(s.clone())
                    .ok_or_else(|| Error::NonFinite("taming matrix".into()))?;
                gemm_nt(&mut cross, &dev, &bdev, inv_j);
                let mut m = DMatrix::identity(k, k);
                chol.solve_mut(&mut m);
                let gain = &cross * &m;
                cum_hs += self.h * gain.norm_squared();

                let mbr = chol.solve(&br);
                let x = self.b.transpose() * &mbr;
                // <x, C x> summed over particles, with C = dev dev^T / J.
                let dtx = dev.transpose() * &x;
                let mut quad = 0.0;
                for jj in 0..j {
                    quad += dtx.column(jj).norm_squared();
                }
                cum_r += self.h * inv_j * quad * inv_j;
            }
        }
        self.replicas += 1;
        Ok(())
    }

    /// Four reports: two paired-difference trend checks (replica-mean spread
    /// and observed energy non-increasing within 2 SE at every step) and two
    /// summation bounds (running sums stay below their initial-data bounds
    /// with a 2 SE margin at every index).
    pub fn reports(&self) -> Result<Vec<IdentityReport>> {
        if self.replicas < 2 {
            return Err(Error::InvalidArgument(
                "trend reports need >= 2 replicas".into(),
            ));
        }
        let r = self.replicas as f64;
        let trend = |name: &str, dsum: &[f64], dsq: &[f64], level_sum: &[f64]| {
            let mut worst = 0.0f64;
            for n in 0..self.steps {
                let mean = dsum[n] / r;
                let var = ((dsq[n] - dsum[n] * dsum[n] / r) / (r - 1.0)).max(0.0);
                let se = (var / r).sqrt();
                let guard = 1e-12 * (1.0 + (level_sum[n] / r).abs());
                worst = worst.max(mean - 2.0 * se - guard);
            }
            IdentityReport::new(name, 0.0, worst.max(0.0), 0.0, self.replicas)
        };
        let bound = |name: &str, sums: &[f64], sqs: &[f64], cap: f64, factor: f64| {
            let mut worst = 0.0f64;
            for n in 0..=self.steps {
                let mean = factor * sums[n] / r;
                let var = ((sqs[n] - sums[n] * sums[n] / r) / (r - 1.0)).max(0.0);
                let se = factor * (var / r).sqrt();
                let guard = 1e-12 * (1.0 + cap);
                worst = worst.max(mean + 2.0 * se - cap - guard);
            }
            IdentityReport::new(name, 0.0, worst.max(0.0), 0.0, self.replicas)
        };
        let jf = self.j as f64;
        Ok(vec![
            trend(
                "spread_supermartingale",
                &self.dspread_sum,
                &self.dspread_sq,
                &self.spread_sum,
            ),
            trend(
                "observed_energy_supermartingale",
                &self.denergy_sum,
                &self.denergy_sq,
                &self.energy_sum,
            ),
            bound(
                "sum_bound_hs",
                &self.cum_hs_sum,
                &self.cum_hs_sq,
                self.initial_spread,
                (jf + 1.0) / jf,
            ),
            bound(
                "sum_bound_residual",
                &self.cum_r_sum,
                &self.cum_r_sq,
                self.initial_energy / 2.0,
                1.0,
            ),
        ])
    }
}

/// Summation bounds over a replica set of complete tamed runs: convenience
/// wrapper building a [`TrendAccumulator`] and returning its two bound
/// reports.
pub fn check_sum_bounds(
    trajectories: &[Trajectory],
    prob: &InverseProblem,
    witness: &DVector<f64>,
) -> Result<Vec<IdentityReport>> {
    let Some(first) = trajectories.first() else {
        return Err(Error::InvalidArgument("no trajectories".into()));
    };
    let steps = first.states().len().saturating_sub(1);
    let mut acc = TrendAccumulator::new(prob, witness, steps, first.h())?;
    for t in trajectories {
        acc.ingest(t)?;
    }
    let reports = acc.reports()?;
    Ok(reports.into_iter().skip(2).collect())
}
