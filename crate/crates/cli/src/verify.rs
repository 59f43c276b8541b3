//! The identity-check suite behind the `verify` subcommand: every exact and
//! Monte Carlo property of the tamed linear update, run against the
//! scenario's problem and initial ensemble, reported as one pass/fail
//! record per check.

use anyhow::{anyhow, bail, Result};
use nalgebra::DVector;

use eki_core::{
    check_kernel_invariance, check_orthogonality, check_quadform_nonneg,
    check_residual_decrement, check_spread_decrement, decompose_observation, project_to_range,
    simulate, stats, taming_identity_residual, IdentityReport, NoiseLattice, SchemeConfig,
    SchemeVariant, TrendAccumulator,
};

use crate::runner::replica_seed;
use crate::scenario::{ProblemKind, Scenario};

const DRAW_SALT: u64 = 0x94D0_49BB_1331_11EB;
const KERNEL_SALT: u64 = 0x2545_F491_4F6C_DD1D;

/// Runs every check on the scenario. The problem must be linear: the
/// identities are statements about the whitened linear update.
pub fn run_suite(scenario: &Scenario, seed_override: Option<u64>) -> Result<Vec<IdentityReport>> {
    if scenario.kind != ProblemKind::Linear {
        bail!("verify: requires problem.kind = \"linear\"");
    }
    let seed = seed_override.unwrap_or(scenario.seed);
    let prob = scenario.problem();
    let w = prob.whitened().expect("linear problems are whitened");
    let b = w.operator.clone();
    let settings = &scenario.verify;
    let steps = 1usize << settings.trend_level;
    let h = scenario.horizon / steps as f64;

    let initial = scenario.initial_ensemble(seed)?;
    let split = decompose_observation(&b, &w.observation).map_err(|e| anyhow!("{e}"))?;
    let y_tilde: DVector<f64> = settings
        .y_tilde
        .clone()
        .unwrap_or_else(|| split.orthogonal.clone());

    let mut reports = Vec::new();

    // Exact checks first.
    let residual = taming_identity_residual(&initial, prob, h).map_err(|e| anyhow!("{e}"))?;
    reports.push(IdentityReport::new(
        "taming_identity",
        0.0,
        residual,
        1e-10,
        initial.len(),
    ));
    reports.push(
        check_orthogonality(&initial, &b, h, &y_tilde)
            .map_err(|e| anyhow!("verify.y_tilde: {e}"))?,
    );
    let st = stats(&initial, &nalgebra::DMatrix::zeros(1, initial.len()))
        .map_err(|e| anyhow!("{e}"))?;
    let zs: Vec<DVector<f64>> = st.deviations.column_iter().map(|c| c.into_owned()).collect();
    reports.push(check_quadform_nonneg(&zs, &(b.transpose() * &b)).map_err(|e| anyhow!("{e}"))?);

    // Kernel invariance needs deviations inside range(B^T); the suite
    // projects its own copy rather than requiring the flag.
    let projected = project_to_range(&initial, &b).map_err(|e| anyhow!("{e}"))?;
    let lattice = NoiseLattice::build(
        seed ^ KERNEL_SALT,
        scenario.horizon,
        settings.trend_level,
        scenario.particles,
        prob.obs_dim(),
    )
    .map_err(|e| anyhow!("{e}"))?;
    let mut cfg = SchemeConfig::new(SchemeVariant::Tamed, settings.trend_level, scenario.horizon);
    cfg.explosion_threshold = scenario.explosion_threshold;
    let traj = simulate(&cfg, prob, &projected, &lattice).map_err(|e| anyhow!("{e}"))?;
    reports.push(check_kernel_invariance(&traj, &b).map_err(|e| anyhow!("{e}"))?);

    // Monte Carlo decrement checks on the unprojected ensemble.
    reports.push(
        check_spread_decrement(&initial, &b, h, settings.mc_draws, seed ^ DRAW_SALT)
            .map_err(|e| anyhow!("{e}"))?,
    );
    reports.push(
        check_residual_decrement(
            &initial,
            &b,
            h,
            &split.witness,
            settings.mc_draws,
            seed ^ DRAW_SALT.rotate_left(17),
        )
        .map_err(|e| anyhow!("{e}"))?,
    );

    // Path-level trends and summation bounds over fixed-initial replicas.
    let mut acc = TrendAccumulator::new(prob, &split.witness, steps, h).map_err(|e| anyhow!("{e}"))?;
    for r in 0..settings.trend_replicas {
        let lat = NoiseLattice::build(
            replica_seed(seed, r),
            scenario.horizon,
            settings.trend_level,
            scenario.particles,
            prob.obs_dim(),
        )
        .map_err(|e| anyhow!("{e}"))?;
        let t = simulate(&cfg, prob, &initial, &lat).map_err(|e| anyhow!("{e}"))?;
        acc.ingest(&t).map_err(|e| anyhow!("{e}"))?;
    }
    reports.extend(acc.reports().map_err(|e| anyhow!("{e}"))?);

    Ok(reports)
}

pub fn all_pass(reports: &[IdentityReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"
schema_version = 1

[problem]
kind = "linear"
matrix = [[1.0, 0.4, -0.3], [0.2, -0.8, 0.5]]
gamma = [[0.5, 0.1], [0.1, 0.8]]
observation = [0.8, -0.5]

[ensemble]
particles = 5
init = "gaussian"
mean = [0.5, 0.5, 0.5]
cov = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]

[run]
horizon = 1.0
levels = [4, 5]
reference_level = 8
replicas = 4
seed = 91
variant = "tamed"

[verify]
mc_draws = 20000
trend_replicas = 40
trend_level = 4
"#;

    #[test]
    fn linear_scenario_passes_every_check() {
        let s = Scenario::parse(LINEAR).unwrap();
        let reports = run_suite(&s, None).unwrap();
        assert_eq!(reports.len(), 10);
        for r in &reports {
            assert!(r.pass, "{}: analytic {} empirical {}", r.name, r.analytic, r.empirical);
        }
        assert!(all_pass(&reports));
        let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
        for expected in [
            "taming_identity",
            "orthogonality",
            "quadform_nonneg",
            "kernel_invariance",
            "spread_decrement",
            "residual_decrement",
            "spread_supermartingale",
            "observed_energy_supermartingale",
            "sum_bound_hs",
            "sum_bound_residual",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
    }

    #[test]
    fn non_orthogonal_override_surfaces_precondition() {
        let text = LINEAR.replace(
            "trend_level = 4",
            "trend_level = 4\ny_tilde = [1.0, 0.0]",
        );
        let s = Scenario::parse(&text).unwrap();
        let err = run_suite(&s, None).unwrap_err().to_string();
        assert!(err.contains("y_tilde"), "{err}");
        assert!(err.contains("orthogonal"), "{err}");
    }

    #[test]
    fn zero_spread_scenario_reports_exact_zero_decrements() {
        let text = LINEAR
            .replace(
                "init = \"gaussian\"",
                "init = \"explicit\"\nexplicit = [[0.5, -0.25, 0.125], [0.5, -0.25, 0.125], [0.5, -0.25, 0.125], [0.5, -0.25, 0.125], [0.5, -0.25, 0.125]]",
            )
            .replace("mean = [0.5, 0.5, 0.5]\n", "")
            .replace("cov = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]\n", "");
        let s = Scenario::parse(&text).unwrap();
        let reports = run_suite(&s, None).unwrap();
        for name in ["spread_decrement", "residual_decrement"] {
            let r = reports.iter().find(|r| r.name == name).unwrap();
            assert_eq!(r.analytic, 0.0, "{name}");
            assert_eq!(r.empirical, 0.0, "{name}");
            assert!(r.pass);
        }
        assert!(all_pass(&reports));
    }

    #[test]
    fn nonlinear_scenario_is_rejected() {
        let text = LINEAR.replace("kind = \"linear\"", "kind = \"lipschitz_tanh\"");
        let s = Scenario::parse(&text).unwrap();
        let err = run_suite(&s, None).unwrap_err().to_string();
        assert!(err.contains("linear"), "{err}");
    }
}
