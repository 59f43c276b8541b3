//! The coupled error process and its estimators.
//!
//! A coarse run is compared against the finest-level run on the same noise
//! lattice: the error `E(t) = x(t) - Y(t)` is evaluated at every finest grid
//! node, with the coarse run interpolated into its cells. Convergence claims
//! are then checked statistically over replicas: exceedance probabilities
//! with Wilson intervals, `sup_t E-hat |E(t)|^theta` moments, and a log-log
//! order fit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean_and_se, pairwise_sum};
use crate::model::InverseProblem;
use crate::noise::NoiseLattice;
use crate::schemes::{variant_problem, StepEngine, Trajectory};

/// Two-sided 95% normal quantile, used by the Wilson interval.
pub const Z_95: f64 = 1.959963984540054;

/// Which condition determined a stopping time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauTrigger {
    /// The error norm exceeded 1.
    Error,
    /// The reference state norm exceeded `radius - 1`.
    Radius,
    /// Neither bound was hit before the horizon.
    Horizon,
}

/// One replica's error curve against the reference, with its stopping data.
///
/// `moment_curve[i]` is the stacked error norm over all particles at finest
/// node `i`; explosion makes the curve infinite from the breach onward and
/// sets `exploded` (such samples are exceedances for probabilities and are
/// excluded, with a count, from moment averages).
#[derive(Clone, Debug)]
pub struct ErrorSample {
    pub sup_error: f64,
    pub moment_curve: Vec<f64>,
    pub tau: f64,
    pub trigger: TauTrigger,
    pub exploded: bool,
}

impl ErrorSample {
    /// Exceedance indicator used by the probability estimator: exploded
    /// samples always count.
    pub fn exceeds(&self, threshold: f64) -> bool {
        self.exploded || self.sup_error > threshold
    }
}

/// Default diagnostic radius: far enough out that well-posed runs never
/// trigger it, while keeping the stopping time well-defined.
pub fn default_stopping_radius(initial_norm: f64) -> f64 {
    10.0 * (1.0 + initial_norm)
}

fn diff_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Error curve of a coarse run against the finest-level reference on the
/// same lattice, evaluated at every finest grid node.
///
/// `reference` must run at the lattice's finest level; `approx` at any level
/// up to it. Both must have been driven by this lattice and share the
/// initial ensemble; `prob` is the base problem both were built from. Within
/// a coarse cell the approximation is continued from its anchor state by the
/// same drift/diffusion arithmetic the scheme itself uses, so at the coarse
/// run's own nodes the stored states are reproduced exactly.
pub fn error_process(
    reference: &Trajectory,
    approx: &Trajectory,
    prob: &InverseProblem,
    lattice: &NoiseLattice,
) -> Result<ErrorSample> {
    if reference.lattice_seed() != lattice.seed() || approx.lattice_seed() != lattice.seed() {
        return Err(Error::InvalidArgument(
            "trajectories and lattice come from different noise realizations".into(),
        ));
    }
    if reference.level() != lattice.levels() {
        return Err(Error::InvalidArgument(format!(
            "reference runs at level {}, lattice is refined to {}",
            reference.level(),
            lattice.levels()
        )));
    }
    if approx.level() > reference.level() {
        return Err(Error::InvalidArgument(format!(
            "approximation level {} exceeds reference level {}",
            approx.level(),
            reference.level()
        )));
    }
    for t in [reference, approx] {
        if (t.horizon() - lattice.horizon()).abs() > 1e-12 * lattice.horizon().max(1.0) {
            return Err(Error::InvalidArgument(
                "trajectory and lattice horizons differ".into(),
            ));
        }
        if !t.is_exploded() && t.states().len() != (1usize << t.level()) + 1 {
            return Err(Error::Precondition(
                "error process needs complete (or exploded) runs".into(),
            ));
        }
    }
    if reference.initial().particles() != approx.initial().particles() {
        return Err(Error::Precondition(
            "reference and approximation start from different ensembles".into(),
        ));
    }

    let (ext, em) = variant_problem(approx.variant(), prob)?;
    let prob_eff = ext.as_ref().unwrap_or(prob);
    let p = approx.initial().dim();
    let jn = approx.initial().len();
    if p != prob_eff.param_dim() {
        return Err(Error::Dimension(format!(
            "trajectory dim {p} != problem parameter dim {}",
            prob_eff.param_dim()
        )));
    }
    if lattice.dim() != prob_eff.obs_dim() || lattice.particles() != jn {
        return Err(Error::Dimension(format!(
            "lattice is {} streams x dim {}, problem needs {} x dim {}",
            lattice.particles(),
            lattice.dim(),
            jn,
            prob_eff.obs_dim()
        )));
    }

    let nodes = lattice.steps();
    let h_min = lattice.h_min();
    let per_cell = 1usize << (lattice.levels() - approx.level());
    let coarse_cells = 1usize << approx.level();

    // Unfilled entries stay infinite: everything past an explosion.
    let mut ref_norms = vec![f64::INFINITY; nodes + 1];
    let mut err_norms = vec![f64::INFINITY; nodes + 1];
    for (i, s) in reference.states().iter().enumerate() {
        ref_norms[i] = s.particles().norm();
    }
    let ref_avail = reference.states().len();
    let mut exploded = reference.is_exploded() || approx.is_exploded();

    err_norms[0] = diff_norm(reference.state(0).particles(), approx.state(0).particles());

    let mut engine = StepEngine::new(prob_eff, approx.h(), em, jn)?;
    let mut y = DMatrix::zeros(p, jn);
    let mut dw = DMatrix::zeros(lattice.dim(), jn);
    let anchors = approx.states().len();

    for cell in 0..coarse_cells {
        if cell >= anchors {
            break;
        }
        let complete = cell + 1 < anchors;
        let anchor = approx.state(cell).particles();
        // Interior nodes: anchor + dt * drift + diffusion * (W(t) - W(t_cell)),
        // accumulating the finest increments in index order.
        if per_cell > 1 {
            engine.compute_ops(anchor)?;
            dw.fill(0.0);
            for offset in 1..per_cell {
                let node = cell * per_cell + offset;
                if !approx.deterministic() {
                    for j in 0..jn {
                        for (d, v) in lattice.finest_increment(j, node - 1).iter().enumerate() {
                            dw[(d, j)] += v;
                        }
                    }
                }
                let dt = offset as f64 * h_min;
                y.copy_from(anchor);
                for (o, dr) in y.iter_mut().zip(engine.drift.iter()) {
                    *o += dt * dr;
                }
                if !approx.deterministic() {
                    y.gemm(1.0, &engine.diffusion, &dw, 1.0);
                }
                if node < ref_avail {
                    let e = diff_norm(reference.state(node).particles(), &y);
                    if e.is_finite() {
                        err_norms[node] = e;
                    } else {
                        exploded = true;
                    }
                }
            }
        }
        if complete {
            let node = (cell + 1) * per_cell;
            if node < ref_avail {
                err_norms[node] =
                    diff_norm(reference.state(node).particles(), approx.state(cell + 1).particles());
            }
        }
    }

    let sup_error = err_norms.iter().fold(0.0_f64, |a, &b| a.max(b));
    if !sup_error.is_finite() {
        exploded = true;
    }
    let radius = default_stopping_radius(ref_norms[0]);
    let (tau, trigger) = stopping_time(&ref_norms, &err_norms, h_min, radius)?;

    Ok(ErrorSample {
        sup_error,
        moment_curve: err_norms,
        tau,
        trigger,
        exploded,
    })
}

/// First grid time `t > 0` at which the reference norm exceeds `radius - 1`
/// or the error norm exceeds 1, capped at the horizon. The radius condition
/// is checked first at each node.
pub fn stopping_time(
    ref_norms: &[f64],
    err_norms: &[f64],
    h_min: f64,
    radius: f64,
) -> Result<(f64, TauTrigger)> {
    if ref_norms.len() != err_norms.len() || ref_norms.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "curves must share a length >= 2, got {} and {}",
            ref_norms.len(),
            err_norms.len()
        )));
    }
    if !(h_min > 0.0) || !h_min.is_finite() {
        return Err(Error::InvalidArgument("node spacing must be positive".into()));
    }
    if !(radius > 1.0 + ref_norms[0]) {
        return Err(Error::Precondition(format!(
            "radius {radius} must exceed 1 + initial norm {}",
            ref_norms[0]
        )));
    }
    for i in 1..ref_norms.len() {
        if ref_norms[i] > radius - 1.0 {
            return Ok((i as f64 * h_min, TauTrigger::Radius));
        }
        if err_norms[i] > 1.0 {
            return Ok((i as f64 * h_min, TauTrigger::Error));
        }
    }
    Ok((
        (ref_norms.len() - 1) as f64 * h_min,
        TauTrigger::Horizon,
    ))
}

/// Wilson 95% interval for the exceedance fraction
/// `P(sup |E| > h^gamma)`; exploded samples count as exceedances.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbabilityEstimate {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub exceedances: usize,
    pub trials: usize,
}

/// Wilson score interval at 95% coverage.
pub fn wilson_interval(successes: usize, trials: usize) -> Result<ProbabilityEstimate> {
    if trials == 0 {
        return Err(Error::InvalidArgument("wilson interval needs trials >= 1".into()));
    }
    if successes > trials {
        return Err(Error::InvalidArgument(format!(
            "{successes} successes out of {trials} trials"
        )));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z_95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // At the boundary counts the interval endpoint is exactly 0 or 1;
    // computing center -/+ half there leaves 1-ulp residue.
    let ci_low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let ci_high = if successes == trials { 1.0 } else { (center + half).min(1.0) };
    Ok(ProbabilityEstimate {
        p_hat: p,
        ci_low,
        ci_high,
        exceedances: successes,
        trials,
    })
}

/// Exceedance probability estimate at threshold `h^gamma_exponent`.
pub fn estimate_probability(
    samples: &[ErrorSample],
    gamma_exponent: f64,
    h: f64,
) -> Result<ProbabilityEstimate> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    if !(h > 0.0) || !h.is_finite() || !(gamma_exponent > 0.0) || !gamma_exponent.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need h > 0 and gamma > 0, got h={h}, gamma={gamma_exponent}"
        )));
    }
    let threshold = h.powf(gamma_exponent);
    let count = samples.iter().filter(|s| s.exceeds(threshold)).count();
    wilson_interval(count, samples.len())
}

/// `sup_t` of the Monte Carlo mean of `|E(t)|^theta`, with the standard
/// error taken at the maximizing node.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub theta: f64,
    pub value: f64,
    pub se: f64,
    pub argmax_index: usize,
    pub included: usize,
    pub excluded: usize,
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 2.0) {
        return Err(Error::InvalidArgument(format!(
            "theta must lie in (0, 2], got {theta}"
        )));
    }
    Ok(())
}

/// Moment estimate over samples held in memory. Exploded samples are never
/// averaged; they are reported through `excluded`.
pub fn estimate_moment(samples: &[ErrorSample], theta: f64) -> Result<MomentEstimate> {
    check_theta(theta)?;
    let included: Vec<&ErrorSample> = samples.iter().filter(|s| !s.exploded).collect();
    let excluded = samples.len() - included.len();
    let Some(first) = included.first() else {
        return Err(Error::InvalidArgument(
            "moment estimate undefined: every sample exploded".into(),
        ));
    };
    let nodes = first.moment_curve.len();
    if included.iter().any(|s| s.moment_curve.len() != nodes) {
        return Err(Error::Dimension("samples have unequal curve lengths".into()));
    }
    let n = included.len();
    let mut scratch = vec![0.0; n];
    let mut best_i = 0usize;
    let mut best = f64::NEG_INFINITY;
    for i in 0..nodes {
        for (slot, s) in scratch.iter_mut().zip(&included) {
            *slot = s.moment_curve[i].powf(theta);
        }
        let mean = pairwise_sum(&scratch) / n as f64;
        if mean > best {
            best = mean;
            best_i = i;
        }
    }
    for (slot, s) in scratch.iter_mut().zip(&included) {
        *slot = s.moment_curve[best_i].powf(theta);
    }
    let (value, se) = mean_and_se(&scratch);
    Ok(MomentEstimate {
        theta,
        value,
        se,
        argmax_index: best_i,
        included: n,
        excluded,
    })
}

/// Streaming form of [`estimate_moment`]: per-node sums that replica results
/// fold into in index order, so full curve sets never sit in memory.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    theta: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    included: usize,
    excluded: usize,
}

impl MomentAccumulator {
    pub fn new(theta: f64, nodes: usize) -> Result<Self> {
        check_theta(theta)?;
        if nodes == 0 {
            return Err(Error::InvalidArgument("need >= 1 grid node".into()));
        }
        Ok(Self {
            theta,
            sum: vec![0.0; nodes],
            sum_sq: vec![0.0; nodes],
            included: 0,
            excluded: 0,
        })
    }

    pub fn ingest(&mut self, sample: &ErrorSample) -> Result<()> {
        if sample.exploded {
            self.excluded += 1;
            return Ok(());
        }
        if sample.moment_curve.len() != self.sum.len() {
            return Err(Error::Dimension(format!(
                "curve has {} nodes, accumulator expects {}",
                sample.moment_curve.len(),
                self.sum.len()
            )));
        }
        for (i, v) in sample.moment_curve.iter().enumerate() {
            let x = v.powf(self.theta);
            self.sum[i] += x;
            self.sum_sq[i] += x * x;
        }
        self.included += 1;
        Ok(())
    }

    pub fn included(&self) -> usize {
        self.included
    }

    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn estimate(&self) -> Result<MomentEstimate> {
        if self.included == 0 {
            return Err(Error::InvalidArgument(
                "moment estimate undefined: every sample exploded".into(),
            ));
        }
        let n = self.included as f64;
        let mut best_i = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (i, s) in self.sum.iter().enumerate() {
            if *s > best {
                best = *s;
                best_i = i;
            }
        }
        let value = best / n;
        let se = if self.included > 1 {
            let var = ((self.sum_sq[best_i] - self.sum[best_i] * self.sum[best_i] / n)
                / (n - 1.0))
                .max(0.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Ok(MomentEstimate {
            theta: self.theta,
            value,
            se,
            argmax_index: best_i,
            included: self.included,
            excluded: self.excluded,
        })
    }
}

/// Least-squares slope of `log(error)` against `log(h)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
}

/// Fits the convergence order from `(h, mean sup-error)` pairs.
pub fn fit_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "order fit needs >= 3 levels, got {}",
            points.len()
        )));
    }
    for &(h, e) in points {
        if !(h > 0.0) || !h.is_finite() || !(e > 0.0) || !e.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "order fit needs positive finite (h, error), got ({h}, {e})"
            )));
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(h, _)| h.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, e)| e.ln()).collect();
    let xbar = pairwise_sum(&xs) / n;
    let ybar = pairwise_sum(&ys) / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (y - ybar);
    }
    if sxx < 1e-12 {
        return Err(Error::InvalidArgument(
            "order fit needs distinct step sizes".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let mut ss = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let r = y - (intercept + slope * x);
        ss += r * r;
    }
    Ok(OrderFit {
        slope,
        intercept,
        residual_rms: (ss / n).sqrt(),
    })
}

/// Explosion head count over a set of trajectories.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExplosionCensus {
    pub exploded: usize,
    pub total: usize,
    pub earliest: Option<f64>,
}

impl ExplosionCensus {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.exploded as f64 / self.total as f64
        }
    }

    /// Combines censuses from disjoint batches.
    pub fn merge(&self, other: &ExplosionCensus) -> ExplosionCensus {
        let earliest = match (self.earliest, other.earliest) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        ExplosionCensus {
            exploded: self.exploded + other.exploded,
            total: self.total + other.total,
            earliest,
        }
    }

    /// Counts one trajectory; a non-finite stored state counts even without
    /// a recorded explosion time.
    pub fn observe(&mut self, traj: &Trajectory) {
        let bad = traj.is_exploded()
            || traj
                .states()
                .iter()
                .any(|s| s.particles().iter().any(|v| !v.is_finite()));
        if bad {
            self.exploded += 1;
            if let Some(te) = traj.exploded_at() {
                self.earliest = Some(match self.earliest {
                    Some(cur) => cur.min(te),
                    None => te,
                });
            }
        }
        self.total += 1;
    }

    pub fn empty() -> ExplosionCensus {
        ExplosionCensus {
            exploded: 0,
            total: 0,
            earliest: None,
        }
    }
}

/// Fraction of trajectories that exploded (or hold a non-finite state).
pub fn explosion_census(trajectories: &[Trajectory]) -> ExplosionCensus {
    let mut census = ExplosionCensus::empty();
    for t in trajectories {
        census.observe(t);
    }
    census
}

/// Per-level statistics of a refinement study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: u32,
    pub h: f64,
    pub replicas: usize,
    /// Mean of `sup |E|` over non-exploded replicas; `None` if all exploded.
    pub mean_sup_error: Option<f64>,
    pub sup_error_se: Option<f64>,
    /// `sup_t` mean `|E(t)|^theta` over non-exploded replicas.
    pub moment_value: Option<f64>,
    pub moment_se: Option<f64>,
    pub moment_excluded: usize,
    /// Exceedance fraction at threshold `h^gamma` (explosions count).
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub exploded_fraction: f64,
    /// `sup_n` of the replica-averaged per-particle mean squared state norm,
    /// on the level's own grid.
    pub second_moment_sup: f64,
}

/// Full refinement study: per-level summaries plus the fitted order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub theta: f64,
    pub gamma_exponent: f64,
    pub reference_level: u32,
    pub horizon: f64,
    pub replicas: usize,
    pub levels: Vec<LevelSummary>,
    /// Order fitted through the levels with a defined mean error; `None`
    /// when fewer than 3 levels qualify.
    pub fitted_order: Option<f64>,
    pub fit_residual_rms: Option<f64>,
}

impl ConvergenceReport {
    pub fn validate(&self) -> Result<()> {
        for w in self.levels.windows(2) {
            if w[1].level <= w[0].level {
                return Err(Error::InvalidArgument(format!(
                    "levels must be strictly increasing, got {} then {}",
                    w[0].level, w[1].level
                )));
            }
        }
        for l in &self.levels {
            for v in [l.p_hat, l.ci_low, l.ci_high, l.exploded_fraction] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!(
                        "level {}: fraction {v} outside [0, 1]",
                        l.level
                    )));
                }
            }
            if l.ci_low > l.ci_high {
                return Err(Error::InvalidArgument(format!(
                    "level {}: interval [{}, {}] inverted",
                    l.level, l.ci_low, l.ci_high
                )));
            }
        }
        if self.replicas == 0 {
            return Err(Error::InvalidArgument("report with zero replicas".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::Ensemble;
    use crate::model::ForwardModel;
    use crate::schemes::{interpolate, reference_path, simulate, SchemeConfig, SchemeVariant};
    use nalgebra::{dmatrix, dvector, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn flat_sample(curve: Vec<f64>, exploded: bool) -> ErrorSample {
        let sup = curve.iter().fold(0.0_f64, |a, &b| a.max(b));
        ErrorSample {
            sup_error: if exploded { f64::INFINITY } else { sup },
            moment_curve: curve,
            tau: 1.0,
            trigger: TauTrigger::Horizon,
            exploded,
        }
    }

    #[test]
    fn wilson_zero_successes_rule_of_three() {
        let est = wilson_interval(0, 100).unwrap();
        assert_eq!(est.p_hat, 0.0);
        assert_eq!(est.ci_low, 0.0);
        assert!((est.ci_high - 0.037).abs() < 1.5e-3, "ci_high {}", est.ci_high);
    }

    #[test]
    fn wilson_all_successes() {
        let est = wilson_interval(50, 50).unwrap();
        assert_eq!(est.p_hat, 1.0);
        assert!((est.ci_high - 1.0).abs() < 1e-12);
        assert!(est.ci_low > 0.9);
    }

    #[test]
    fn wilson_rejects_bad_counts() {
        assert!(wilson_interval(1, 0).is_err());
        assert!(wilson_interval(5, 4).is_err());
    }

    #[test]
    fn probability_estimate_matches_bernoulli_rate() {
        // sup-errors 0 or 1 against threshold h^gamma = 0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let samples: Vec<ErrorSample> = (0..10_000)
            .map(|_| {
                let exceed = rng.gen::<f64>() < 0.2;
                flat_sample(vec![if exceed { 1.0 } else { 0.0 }], false)
            })
            .collect();
        let est = estimate_probability(&samples, 0.5, 0.25).unwrap();
        assert!((0.19..=0.21).contains(&est.p_hat), "p_hat {}", est.p_hat);
        assert!(est.ci_low <= est.p_hat && est.p_hat <= est.ci_high);
    }

    #[test]
    fn probability_counts_explosions_as_exceedances() {
        let samples = vec![
            flat_sample(vec![0.0], false),
            flat_sample(vec![0.0], true),
            flat_sample(vec![2.0], false),
        ];
        let est = estimate_probability(&samples, 0.45, 0.5).unwrap();
        assert_eq!(est.exceedances, 2);
        assert!(estimate_probability(&[], 0.45, 0.5).is_err());
    }

    #[test]
    fn moment_zero_curves_give_zero() {
        let samples = vec![flat_sample(vec![0.0; 8], false); 5];
        let est = estimate_moment(&samples, 1.0).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.excluded, 0);
    }

    #[test]
    fn moment_theta_two_constant_curve() {
        let c = 0.7;
        let samples = vec![flat_sample(vec![c; 4], false); 10];
        let est = estimate_moment(&samples, 2.0).unwrap();
        assert!((est.value - c * c).abs() < 1e-14);
        assert!(est.se.abs() < 1e-14);
    }

    #[test]
    fn moment_half_normal_oracle() {
        // |N(0, sigma^2)| has mean sigma * sqrt(2/pi).
        let sigma = 0.8;
        let normal = Normal::<f64>::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<ErrorSample> = (0..4000)
            .map(|_| flat_sample(vec![normal.sample(&mut rng).abs()], false))
            .collect();
        let est = estimate_moment(&samples, 1.0).unwrap();
        let analytic = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (est.value - analytic).abs() < 3.0 * est.se,
            "estimate {} vs analytic {analytic} (se {})",
            est.value,
            est.se
        );
    }

    #[test]
    fn moment_excludes_exploded_samples() {
        let samples = vec![
            flat_sample(vec![0.5; 4], false),
            flat_sample(vec![0.5; 4], true),
            flat_sample(vec![0.5; 4], false),
        ];
        let est = estimate_moment(&samples, 1.0).unwrap();
        assert_eq!(est.included, 2);
        assert_eq!(est.excluded, 1);
        assert!((est.value - 0.5).abs() < 1e-14);
        // All exploded: undefined.
        let all = vec![flat_sample(vec![1.0], true)];
        assert!(estimate_moment(&all, 1.0).is_err());
    }

    #[test]
    fn moment_rejects_theta_outside_range() {
        let samples = vec![flat_sample(vec![1.0], false)];
        assert!(estimate_moment(&samples, 0.0).is_err());
        assert!(estimate_moment(&samples, 2.5).is_err());
        assert!(estimate_moment(&samples, f64::NAN).is_err());
    }

    #[test]
    fn accumulator_matches_batch_estimator() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<ErrorSample> = (0..200)
            .map(|_| {
                let curve: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 2.0).collect();
                flat_sample(curve, rng.gen::<f64>() < 0.1)
            })
            .collect();
        for theta in [0.5, 1.0, 2.0] {
            let batch = estimate_moment(&samples, theta).unwrap();
            let mut acc = MomentAccumulator::new(theta, 16).unwrap();
            for s in &samples {
                acc.ingest(s).unwrap();
            }
            let streamed = acc.estimate().unwrap();
            assert_eq!(streamed.argmax_index, batch.argmax_index);
            assert!((streamed.value - batch.value).abs() <= 1e-12 * batch.value.max(1.0));
            assert!((streamed.se - batch.se).abs() <= 1e-10 * batch.se.max(1.0));
            assert_eq!(streamed.excluded, batch.excluded);
        }
    }

    #[test]
    fn stopping_time_horizon_case() {
        let refs = vec![0.0; 11];
        let errs = vec![0.0; 11];
        let (tau, trig) = stopping_time(&refs, &errs, 0.1, 2.0).unwrap();
        assert!((tau - 1.0).abs() < 1e-12);
        assert_eq!(trig, TauTrigger::Horizon);
    }

    #[test]
    fn stopping_time_radius_crossing() {
        // Norm crosses radius - 1 = 4 at node 6.
        let mut refs = vec![0.0; 11];
        for (i, r) in refs.iter_mut().enumerate() {
            *r = i as f64 * 0.7;
        }
        let errs = vec![0.0; 11];
        let (tau, trig) = stopping_time(&refs, &errs, 0.1, 5.0).unwrap();
        assert!((tau - 0.6).abs() < 1e-12);
        assert_eq!(trig, TauTrigger::Radius);
    }

    #[test]
    fn stopping_time_error_crossing_and_precedence() {
        let refs = vec![0.0; 6];
        let mut errs = vec![0.0; 6];
        errs[3] = 1.5;
        let (tau, trig) = stopping_time(&refs, &errs, 0.25, 3.0).unwrap();
        assert!((tau - 0.75).abs() < 1e-12);
        assert_eq!(trig, TauTrigger::Error);
        // Both conditions violated at the same node: radius wins.
        let mut refs = vec![0.0; 6];
        refs[3] = 10.0;
        let (_, trig) = stopping_time(&refs, &errs, 0.25, 3.0).unwrap();
        assert_eq!(trig, TauTrigger::Radius);
    }

    #[test]
    fn stopping_time_rejects_small_radius() {
        let refs = vec![1.5; 4];
        let errs = vec![0.0; 4];
        assert!(stopping_time(&refs, &errs, 0.1, 2.5).is_err());
        assert!(stopping_time(&refs, &errs, 0.1, 2.6).is_ok());
    }

    #[test]
    fn stopping_time_monotone_in_radius_and_replay_bound() {
        // Random walks with small increments: tightening the radius can
        // only stop earlier, and the path stays below the radius up to tau.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let mut refs = vec![0.0];
            let mut errs = vec![0.0];
            for _ in 0..200 {
                let r: f64 = refs.last().unwrap() + rng.gen::<f64>() * 0.5;
                refs.push(r.max(0.0));
                let e: f64 = errs.last().unwrap() + (rng.gen::<f64>() - 0.45) * 0.05;
                errs.push(e.max(0.0));
            }
            let (tau_tight, _) = stopping_time(&refs, &errs, 0.01, 6.0).unwrap();
            let (tau_loose, _) = stopping_time(&refs, &errs, 0.01, 30.0).unwrap();
            assert!(tau_tight <= tau_loose + 1e-15);
            // Replay: up to and including tau, the state norm stays <= R
            // (increments are < 1, so the first breach of R-1 stays below R).
            let k = (tau_tight / 0.01).round() as usize;
            for i in 0..=k {
                assert!(refs[i] <= 6.0);
            }
        }
    }

    #[test]
    fn fit_order_exact_geometric_data() {
        let fit = fit_order(&[(0.04, 0.1), (0.01, 0.05), (0.0025, 0.025)]).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!(fit.residual_rms < 1e-12);
    }

    #[test]
    fn fit_order_linear_data() {
        let fit = fit_order(&[(0.1, 0.2), (0.05, 0.1), (0.025, 0.05), (0.0125, 0.025)]).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_order_rejections() {
        assert!(fit_order(&[(0.1, 0.1), (0.05, 0.05)]).is_err());
        assert!(fit_order(&[(0.1, 0.1), (0.05, 0.0), (0.025, 0.05)]).is_err());
        assert!(fit_order(&[(0.1, 0.1), (0.05, -0.1), (0.025, 0.05)]).is_err());
        assert!(fit_order(&[(0.1, 0.1), (0.1, 0.2), (0.1, 0.3)]).is_err());
    }

    fn scalar_problem(b: f64, y: f64) -> InverseProblem {
        InverseProblem::new(
            ForwardModel::linear(nalgebra::DMatrix::from_element(1, 1, b)).unwrap(),
            nalgebra::DMatrix::identity(1, 1),
            DVector::from_element(1, y),
        )
        .unwrap()
    }

    fn small_problem() -> InverseProblem {
        InverseProblem::new(
            ForwardModel::linear(dmatrix![1.0, 0.4, -0.3; 0.2, -0.8, 0.5]).unwrap(),
            dmatrix![0.5, 0.1; 0.1, 0.8],
            dvector![0.8, -0.5],
        )
        .unwrap()
    }

    fn small_initial(seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ensemble::gaussian(
            &dvector![0.5, 0.5, 0.5],
            &nalgebra::DMatrix::identity(3, 3),
            5,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn error_process_zero_against_itself() {
        let prob = small_problem();
        let initial = small_initial(1);
        let lattice = NoiseLattice::build(5, 1.0, 6, 5, 2).unwrap();
        let reference = reference_path(&prob, &initial, &lattice).unwrap();
        let sample = error_process(&reference, &reference, &prob, &lattice).unwrap();
        assert_eq!(sample.sup_error, 0.0);
        assert!(sample.moment_curve.iter().all(|&e| e == 0.0));
        assert_eq!(sample.trigger, TauTrigger::Horizon);
        assert!((sample.tau - 1.0).abs() < 1e-12);
        assert!(!sample.exploded);
    }

    #[test]
    fn error_process_matches_scalar_reimplementation() {
        // Drift-only scalar case, reimplemented with plain f64 loops: the
        // whitened tamed step and its drift interpolation.
        let b = 1.3;
        let yobs = 0.4;
        let prob = scalar_problem(b, yobs);
        let u0 = [0.5_f64, 2.0];
        let initial = Ensemble::new(nalgebra::DMatrix::from_row_slice(1, 2, &u0)).unwrap();
        let levels = 8u32;
        let coarse = 3u32;
        let lattice = NoiseLattice::build(77, 1.0, levels, 2, 1).unwrap();
        let mut config = SchemeConfig::new(SchemeVariant::Tamed, levels, 1.0);
        config.deterministic = true;
        let reference = simulate(&config, &prob, &initial, &lattice).unwrap();
        let mut config = SchemeConfig::new(SchemeVariant::Tamed, coarse, 1.0);
        config.deterministic = true;
        let approx = simulate(&config, &prob, &initial, &lattice).unwrap();
        let sample = error_process(&reference, &approx, &prob, &lattice).unwrap();

        let step = |u: [f64; 2], h: f64| -> [f64; 2] {
            let mean = 0.5 * (u[0] + u[1]);
            let c = 0.5 * ((u[0] - mean).powi(2) + (u[1] - mean).powi(2));
            let m = 1.0 / (h * b * b * c + 1.0);
            [
                u[0] - h * c * b * m * (b * u[0] - yobs),
                u[1] - h * c * b * m * (b * u[1] - yobs),
            ]
        };
        let drift = |u: [f64; 2], h: f64| -> [f64; 2] {
            let s = step(u, h);
            [(s[0] - u[0]) / h, (s[1] - u[1]) / h]
        };

        let n_fine = 1usize << levels;
        let h_fine = 1.0 / n_fine as f64;
        let mut x = u0;
        let mut xs = vec![x];
        for _ in 0..n_fine {
            x = step(x, h_fine);
            xs.push(x);
        }
        let per = 1usize << (levels - coarse);
        let h_coarse = 1.0 / (1u64 << coarse) as f64;
        let mut anchor = u0;
        let mut max_gap = 0.0f64;
        for (node, xv) in xs.iter().enumerate() {
            let cell = node / per;
            let offset = node % per;
            let yv = if offset == 0 {
                let mut a = u0;
                for _ in 0..cell {
                    a = step(a, h_coarse);
                }
                anchor = a;
                a
            } else {
                let f = drift(anchor, h_coarse);
                let dt = offset as f64 * h_fine;
                [anchor[0] + dt * f[0], anchor[1] + dt * f[1]]
            };
            let e = ((xv[0] - yv[0]).powi(2) + (xv[1] - yv[1]).powi(2)).sqrt();
            max_gap = max_gap.max((e - sample.moment_curve[node]).abs());
        }
        assert!(max_gap < 1e-10, "max gap {max_gap}");
    }

    #[test]
    fn error_process_triangle_sanity() {
        let prob = small_problem();
        let initial = small_initial(4);
        let lattice = NoiseLattice::build(11, 1.0, 6, 5, 2).unwrap();
        let reference = reference_path(&prob, &initial, &lattice).unwrap();
        let t3 = simulate(
            &SchemeConfig::new(SchemeVariant::Tamed, 3, 1.0),
            &prob,
            &initial,
            &lattice,
        )
        .unwrap();
        let t4 = simulate(
            &SchemeConfig::new(SchemeVariant::Tamed, 4, 1.0),
            &prob,
            &initial,
            &lattice,
        )
        .unwrap();
        let e3 = error_process(&reference, &t3, &prob, &lattice).unwrap();
        let e4 = error_process(&reference, &t4, &prob, &lattice).unwrap();
        let mut sup_d = 0.0f64;
        for node in 0..=lattice.steps() {
            let t = node as f64 * lattice.h_min();
            let y3 = interpolate(&t3, &prob, &lattice, t).unwrap();
            let y4 = interpolate(&t4, &prob, &lattice, t).unwrap();
            sup_d = sup_d.max(diff_norm(y4.particles(), y3.particles()));
        }
        assert!(e3.sup_error <= e4.sup_error + sup_d + 1e-12);
    }

    #[test]
    fn error_process_validations() {
        let prob = small_problem();
        let initial = small_initial(5);
        let lattice = NoiseLattice::build(21, 1.0, 5, 5, 2).unwrap();
        let reference = reference_path(&prob, &initial, &lattice).unwrap();
        let coarse = simulate(
            &SchemeConfig::new(SchemeVariant::Tamed, 3, 1.0),
            &prob,
            &initial,
            &lattice,
        )
        .unwrap();
        // Arguments swapped: reference not at the finest level.
        assert!(error_process(&coarse, &reference, &prob, &lattice).is_err());
        // Foreign lattice.
        let other = NoiseLattice::build(22, 1.0, 5, 5, 2).unwrap();
        assert!(error_process(&reference, &coarse, &prob, &other).is_err());
        // Different initial ensembles.
        let other_initial = small_initial(6);
        let other_ref = reference_path(&prob, &other_initial, &lattice).unwrap();
        assert!(error_process(&other_ref, &coarse, &prob, &lattice).is_err());
    }

    #[test]
    fn error_process_flags_exploded_approximation() {
        let prob = InverseProblem::new(
            ForwardModel::cubic(1).unwrap(),
            nalgebra::DMatrix::identity(1, 1),
            dvector![0.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let initial = Ensemble::gaussian(
            &dvector![3.0],
            &nalgebra::DMatrix::from_element(1, 1, 1.0),
            5,
            &mut rng,
        )
        .unwrap();
        let lattice = NoiseLattice::build(21, 1.0, 8, 5, 1).unwrap();
        let reference = reference_path(&prob, &initial, &lattice).unwrap();
        assert!(!reference.is_exploded());
        let em = simulate(
            &SchemeConfig::new(SchemeVariant::EulerMaruyama, 3, 1.0),
            &prob,
            &initial,
            &lattice,
        )
        .unwrap();
        assert!(em.is_exploded());
        let sample = error_process(&reference, &em, &prob, &lattice).unwrap();
        assert!(sample.exploded);
        assert!(sample.sup_error.is_infinite());
        assert_eq!(sample.trigger, TauTrigger::Error);
        assert!(sample.tau > 0.0 && sample.tau < 1.0);
        // The curve is infinite exactly from the explosion node onward.
        let te_node = (em.exploded_at().unwrap() / lattice.h_min()).round() as usize;
        assert!(sample.moment_curve[te_node].is_infinite());
        assert!(sample.moment_curve[te_node - 1].is_finite());
    }

    #[test]
    fn census_counts_explosions_and_bad_states() {
        let prob = small_problem();
        let initial = small_initial(7);
        let lattice = NoiseLattice::build(31, 1.0, 4, 5, 2).unwrap();
        let healthy: Vec<_> = (0..3)
            .map(|_| {
                simulate(
                    &SchemeConfig::new(SchemeVariant::Tamed, 4, 1.0),
                    &prob,
                    &initial,
                    &lattice,
                )
                .unwrap()
            })
            .collect();
        let census = explosion_census(&healthy);
        assert_eq!(census.exploded, 0);
        assert_eq!(census.total, 3);
        assert_eq!(census.fraction(), 0.0);
        assert!(census.earliest.is_none());

        // A hand-built trajectory with a non-finite state counts even
        // without a recorded explosion time.
        let mut bad_state = initial.particles().clone();
        bad_state[(0, 0)] = f64::NAN;
        let bad = Trajectory::from_parts(
            0,
            1.0,
            lattice.seed(),
            vec![Ensemble::from_matrix_unchecked(bad_state)],
            None,
        );
        let mut all = healthy;
        all.push(bad);
        let census = explosion_census(&all);
        assert_eq!(census.exploded, 1);
        assert_eq!(census.total, 4);

        // Merging batch censuses.
        let merged = census.merge(&ExplosionCensus {
            exploded: 2,
            total: 5,
            earliest: Some(0.25),
        });
        assert_eq!(merged.exploded, 3);
        assert_eq!(merged.total, 9);
        assert_eq!(merged.earliest, Some(0.25));
    }

    #[test]
    fn report_validation() {
        let level = |l: u32| LevelSummary {
            level: l,
            h: 1.0 / (1u64 << l) as f64,
            replicas: 10,
            mean_sup_error: Some(0.1),
            sup_error_se: Some(0.01),
            moment_value: Some(0.1),
            moment_se: Some(0.01),
            moment_excluded: 0,
            p_hat: 0.1,
            ci_low: 0.05,
            ci_high: 0.2,
            exploded_fraction: 0.0,
            second_moment_sup: 1.0,
        };
        let mut report = ConvergenceReport {
            theta: 1.0,
            gamma_exponent: 0.45,
            reference_level: 10,
            horizon: 1.0,
            replicas: 10,
            levels: vec![level(3), level(4), level(5)],
            fitted_order: Some(0.5),
            fit_residual_rms: Some(0.01),
        };
        assert!(report.validate().is_ok());
        report.levels[2].level = 4;
        assert!(report.validate().is_err());
        report.levels[2].level = 5;
        report.levels[1].p_hat = 1.4;
        assert!(report.validate().is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = ConvergenceReport {
            theta: 1.0,
            gamma_exponent: 0.45,
            reference_level: 8,
            horizon: 1.0,
            replicas: 2,
            levels: vec![LevelSummary {
                level: 3,
                h: 0.125,
                replicas: 2,
                mean_sup_error: None,
                sup_error_se: None,
                moment_value: None,
                moment_se: None,
                moment_excluded: 2,
                p_hat: 1.0,
                ci_low: 0.3,
                ci_high: 1.0,
                exploded_fraction: 1.0,
                second_moment_sup: 4.0,
            }],
            fitted_order: None,
            fit_residual_rms: None,
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: ConvergenceReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.levels[0].moment_excluded, 2);
        assert_eq!(back.levels[0].mean_sup_error, None);
        assert_eq!(back.fitted_order, None);
    }
}
