//! Replica orchestration for one refinement study. Every replica owns a
//! noise lattice and initial ensemble derived from its index, simulates the
//! reference at the finest level plus the approximation at every study
//! level, and streams the resulting error samples into per-level
//! accumulators. Reduction happens in replica-index order, so the report is
//! a pure function of (scenario, seed) regardless of worker count.

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use eki_core::{
    error_process, fit_order, mean_and_se, simulate, wilson_interval, ConvergenceReport,
    Ensemble, ErrorSample, ExplosionCensus, LevelSummary, MomentAccumulator, NoiseLattice,
    SchemeConfig, Trajectory,
};

use crate::scenario::Scenario;

/// Distinct streams per replica: the lattice seed and the initial-draw seed
/// never coincide across replicas or with each other.
pub fn replica_seed(base: u64, replica: usize) -> u64 {
    base ^ (replica as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const INIT_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// Log-spaced sup-error histogram: 32 half-decade bins covering
/// `[1e-12, 1e4)`, everything below in `underflow`, everything at or above
/// (and every exploded replica) in `overflow`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelHistogram {
    pub level: u32,
    pub underflow: usize,
    pub counts: Vec<usize>,
    pub overflow: usize,
}

pub const HIST_BINS: usize = 32;
pub const HIST_LOG10_MIN: f64 = -12.0;
pub const HIST_LOG10_STEP: f64 = 0.5;

pub fn hist_edge(i: usize) -> f64 {
    10f64.powf(HIST_LOG10_MIN + HIST_LOG10_STEP * i as f64)
}

impl LevelHistogram {
    fn new(level: u32) -> Self {
        Self {
            level,
            underflow: 0,
            counts: vec![0; HIST_BINS],
            overflow: 0,
        }
    }

    fn record(&mut self, sup_error: f64, exploded: bool) {
        if exploded || !sup_error.is_finite() || sup_error >= hist_edge(HIST_BINS) {
            self.overflow += 1;
        } else if sup_error < hist_edge(0) {
            self.underflow += 1;
        } else {
            let i = ((sup_error.log10() - HIST_LOG10_MIN) / HIST_LOG10_STEP) as usize;
            self.counts[i.min(HIST_BINS - 1)] += 1;
        }
    }
}

/// Explosion head count of the approximation runs at one level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelCensus {
    pub level: u32,
    pub census: ExplosionCensus,
}

/// Everything one study produces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub report: ConvergenceReport,
    pub level_census: Vec<LevelCensus>,
    pub histograms: Vec<LevelHistogram>,
}

struct LevelSlice {
    sample: ErrorSample,
    state_sq: Vec<f64>,
    census: ExplosionCensus,
}

struct ReplicaOut {
    levels: Vec<LevelSlice>,
}

struct LevelAcc {
    level: u32,
    h: f64,
    threshold: f64,
    sups: Vec<f64>,
    exceed: usize,
    trials: usize,
    moments: MomentAccumulator,
    census: ExplosionCensus,
    sq_sum: Vec<f64>,
    sq_count: Vec<usize>,
    hist: LevelHistogram,
}

impl LevelAcc {
    fn new(level: u32, scenario: &Scenario, ref_nodes: usize) -> Result<Self> {
        let h = scenario.horizon / (1u64 << level) as f64;
        let own_nodes = (1usize << level) + 1;
        Ok(Self {
            level,
            h,
            threshold: h.powf(scenario.gamma_exponent),
            sups: Vec::with_capacity(scenario.replicas),
            exceed: 0,
            trials: 0,
            moments: MomentAccumulator::new(scenario.theta, ref_nodes)
                .map_err(|e| anyhow!("{e}"))?,
            census: ExplosionCensus::empty(),
            sq_sum: vec![0.0; own_nodes],
            sq_count: vec![0; own_nodes],
            hist: LevelHistogram::new(level),
        })
    }

    fn fold(&mut self, slice: LevelSlice) -> Result<()> {
        self.trials += 1;
        if slice.sample.exceeds(self.threshold) {
            self.exceed += 1;
        }
        if !slice.sample.exploded {
            self.sups.push(slice.sample.sup_error);
        }
        self.hist
            .record(slice.sample.sup_error, slice.sample.exploded);
        self.moments.ingest(&slice.sample).map_err(|e| anyhow!("{e}"))?;
        for (n, v) in slice.state_sq.iter().enumerate() {
            if v.is_finite() {
                self.sq_sum[n] += v;
                self.sq_count[n] += 1;
            }
        }
        self.census = self.census.merge(&slice.census);
        Ok(())
    }

    fn summary(&self) -> Result<LevelSummary> {
        let (mean_sup, sup_se) = if self.sups.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_and_se(&self.sups);
            (Some(m), Some(s))
        };
        let (moment_value, moment_se) = match self.moments.estimate() {
            Ok(est) => (Some(est.value), Some(est.se)),
            Err(_) => (None, None),
        };
        let wilson = wilson_interval(self.exceed, self.trials).map_err(|e| anyhow!("{e}"))?;
        let second_moment_sup = self
            .sq_sum
            .iter()
            .zip(self.sq_count.iter())
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| s / c as f64)
            .fold(0.0_f64, f64::max);
        Ok(LevelSummary {
            level: self.level,
            h: self.h,
            replicas: self.trials,
            mean_sup_error: mean_sup,
            sup_error_se: sup_se,
            moment_value,
            moment_se,
            moment_excluded: self.moments.excluded(),
            p_hat: wilson.p_hat,
            ci_low: wilson.ci_low,
            ci_high: wilson.ci_high,
            exploded_fraction: self.census.fraction(),
            second_moment_sup,
        })
    }
}

fn replica_work(scenario: &Scenario, base_seed: u64, replica: usize) -> Result<ReplicaOut> {
    let seed = replica_seed(base_seed, replica);
    let lattice = NoiseLattice::build(
        seed,
        scenario.horizon,
        scenario.reference_level,
        scenario.particles,
        scenario.noise_dim(),
    )
    .map_err(|e| anyhow!("noise lattice: {e}"))?;
    let initial = scenario.initial_ensemble(seed ^ INIT_SALT)?;

    let mut ref_cfg = SchemeConfig::new(
        scenario.reference_variant(),
        scenario.reference_level,
        scenario.horizon,
    );
    ref_cfg.explosion_threshold = scenario.explosion_threshold;
    let reference = simulate(&ref_cfg, scenario.problem(), &initial, &lattice)
        .map_err(|e| anyhow!("reference simulation: {e}"))?;

    let mut levels = Vec::with_capacity(scenario.levels.len());
    for &level in &scenario.levels {
        let mut cfg = SchemeConfig::new(scenario.scheme_variant(), level, scenario.horizon);
        cfg.explosion_threshold = scenario.explosion_threshold;
        let traj = simulate(&cfg, scenario.problem(), &initial, &lattice)
            .map_err(|e| anyhow!("level {level} simulation: {e}"))?;
        let sample = error_process(&reference, &traj, scenario.problem(), &lattice)
            .map_err(|e| anyhow!("level {level} error process: {e}"))?;
        let state_sq = traj
            .states()
            .iter()
            .map(Ensemble::mean_norm_squared)
            .collect();
        let mut census = ExplosionCensus::empty();
        census.observe(&traj);
        levels.push(LevelSlice {
            sample,
            state_sq,
            census,
        });
    }
    Ok(ReplicaOut { levels })
}

/// Runs the full study: `jobs` worker threads fan out over replicas in
/// fixed-size batches; results fold in replica order.
pub fn execute(scenario: &Scenario, seed_override: Option<u64>, jobs: usize) -> Result<RunOutcome> {
    let base_seed = seed_override.unwrap_or(scenario.seed);
    let jobs = jobs.max(1);
    let ref_nodes = (1usize << scenario.reference_level) + 1;

    let mut accs: Vec<LevelAcc> = scenario
        .levels
        .iter()
        .map(|&l| LevelAcc::new(l, scenario, ref_nodes))
        .collect::<Result<_>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")?;
    // Batches bound peak memory: at most ~2 jobs of full error curves are
    // alive at once, while the accumulators stay flat.
    let batch = (2 * jobs).max(8).min(scenario.replicas);
    let mut next = 0usize;
    while next < scenario.replicas {
        let end = (next + batch).min(scenario.replicas);
        let outs: Vec<Result<ReplicaOut>> = pool.install(|| {
            (next..end)
                .into_par_iter()
                .map(|r| replica_work(scenario, base_seed, r))
                .collect()
        });
        for out in outs {
            let out = out?;
            for (acc, slice) in accs.iter_mut().zip(out.levels) {
                acc.fold(slice)?;
            }
        }
        next = end;
    }

    let levels: Vec<LevelSummary> = accs.iter().map(LevelAcc::summary).collect::<Result<_>>()?;
    let points: Vec<(f64, f64)> = levels
        .iter()
        .filter_map(|l| l.mean_sup_error.map(|m| (l.h, m)))
        .filter(|&(_, m)| m > 0.0)
        .collect();
    let fit = fit_order(&points).ok();
    let report = ConvergenceReport {
        theta: scenario.theta,
        gamma_exponent: scenario.gamma_exponent,
        reference_level: scenario.reference_level,
        horizon: scenario.horizon,
        replicas: scenario.replicas,
        levels,
        fitted_order: fit.as_ref().map(|f| f.slope),
        fit_residual_rms: fit.as_ref().map(|f| f.residual_rms),
    };
    report.validate().map_err(|e| anyhow!("report invariant: {e}"))?;

    Ok(RunOutcome {
        report,
        level_census: accs
            .iter()
            .map(|a| LevelCensus {
                level: a.level,
                census: a.census,
            })
            .collect(),
        histograms: accs.into_iter().map(|a| a.hist).collect(),
    })
}

/// One coupled replica outside the study loop: reference plus one level,
/// sharing lattice and initial ensemble. The building block for spot checks.
pub fn single_replica(
    scenario: &Scenario,
    base_seed: u64,
    replica: usize,
    level: u32,
) -> Result<(Trajectory, Trajectory, NoiseLattice)> {
    let seed = replica_seed(base_seed, replica);
    let lattice = NoiseLattice::build(
        seed,
        scenario.horizon,
        scenario.reference_level,
        scenario.particles,
        scenario.noise_dim(),
    )
    .map_err(|e| anyhow!("noise lattice: {e}"))?;
    let initial = scenario.initial_ensemble(seed ^ INIT_SALT)?;
    let mut ref_cfg = SchemeConfig::new(
        scenario.reference_variant(),
        scenario.reference_level,
        scenario.horizon,
    );
    ref_cfg.explosion_threshold = scenario.explosion_threshold;
    let reference = simulate(&ref_cfg, scenario.problem(), &initial, &lattice)
        .map_err(|e| anyhow!("reference simulation: {e}"))?;
    let mut cfg = SchemeConfig::new(scenario.scheme_variant(), level, scenario.horizon);
    cfg.explosion_threshold = scenario.explosion_threshold;
    let traj = simulate(&cfg, scenario.problem(), &initial, &lattice)
        .map_err(|e| anyhow!("level {level} simulation: {e}"))?;
    Ok((reference, traj, lattice))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scenario(extra: &str) -> Scenario {
        let text = format!(
            r#"
schema_version = 1

[problem]
kind = "linear"
matrix = [[1.0, 0.4], [0.2, -0.8]]
gamma = [[0.5, 0.1], [0.1, 0.8]]
observation = [0.8, -0.5]

[ensemble]
particles = 4
init = "gaussian"
mean = [0.5, 0.5]
cov = [[1.0, 0.0], [0.0, 1.0]]

[run]
horizon = 1.0
levels = [3, 4, 5]
reference_level = 8
replicas = 12
seed = 424
variant = "tamed"
{extra}
"#
        );
        Scenario::parse(&text).unwrap()
    }

    #[test]
    fn outcome_is_deterministic_and_jobs_independent() {
        let s = tiny_scenario("");
        let a = execute(&s, None, 1).unwrap();
        let b = execute(&s, None, 3).unwrap();
        let ja = serde_json::to_string(&a.report).unwrap();
        let jb = serde_json::to_string(&b.report).unwrap();
        assert_eq!(ja, jb);
        // Seed override changes the numbers.
        let c = execute(&s, Some(999), 1).unwrap();
        assert_ne!(ja, serde_json::to_string(&c.report).unwrap());
    }

    #[test]
    fn errors_shrink_with_level_on_the_tiny_study() {
        let s = tiny_scenario("");
        let out = execute(&s, None, 1).unwrap();
        let means: Vec<f64> = out
            .report
            .levels
            .iter()
            .map(|l| l.mean_sup_error.unwrap())
            .collect();
        assert!(means[0] > means[2], "means {means:?}");
        for lc in &out.level_census {
            assert_eq!(lc.census.exploded, 0);
        }
        // Histogram counts account for every replica.
        for h in &out.histograms {
            let total: usize = h.underflow + h.counts.iter().sum::<usize>() + h.overflow;
            assert_eq!(total, 12);
        }
    }

    #[test]
    fn approximation_at_reference_level_gives_zero_error() {
        let text = r#"
schema_version = 1

[problem]
kind = "linear"
matrix = [[1.0, 0.4], [0.2, -0.8]]
gamma = [[0.5, 0.1], [0.1, 0.8]]
observation = [0.8, -0.5]

[ensemble]
particles = 4
init = "gaussian"
mean = [0.5, 0.5]
cov = [[1.0, 0.0], [0.0, 1.0]]

[run]
horizon = 1.0
levels = [6]
reference_level = 6
replicas = 1
seed = 3
variant = "tamed"
"#;
        let s = Scenario::parse(text).unwrap();
        let out = execute(&s, None, 1).unwrap();
        let l = &out.report.levels[0];
        assert_eq!(l.mean_sup_error, Some(0.0));
        assert_eq!(l.p_hat, 0.0);
        assert_eq!(out.report.fitted_order, None);
        assert_eq!(out.histograms[0].underflow, 1);
    }

    #[test]
    fn histogram_classification() {
        let mut h = LevelHistogram::new(3);
        h.record(0.0, false);
        h.record(1e-13, false);
        h.record(1.5e-12, false);
        h.record(0.5, false);
        h.record(1e5, false);
        h.record(3.0, true);
        assert_eq!(h.underflow, 2);
        assert_eq!(h.overflow, 2);
        assert_eq!(h.counts.iter().sum::<usize>(), 2);
        // Each binned sample lands in the bin whose range contains it.
        for v in [1.5e-12f64, 0.5] {
            let i = ((v.log10() - HIST_LOG10_MIN) / HIST_LOG10_STEP) as usize;
            assert_eq!(h.counts[i], 1, "value {v} expected alone in bin {i}");
            assert!(hist_edge(i) <= v && v < hist_edge(i + 1));
        }
    }

    #[test]
    fn replica_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for r in 0..1000 {
            assert!(seen.insert(replica_seed(31, r)));
            assert!(seen.insert(replica_seed(31, r) ^ INIT_SALT));
        }
    }
}
