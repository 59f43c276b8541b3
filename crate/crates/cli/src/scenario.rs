//! Scenario files: a TOML schema describing one inverse problem, one
//! initial ensemble, and one refinement study. Parsing is strict (unknown
//! fields rejected) and every semantic rule reports the offending field
//! path, so a bad file fails before any simulation starts.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use eki_core::noise::MAX_LEVELS;
use eki_core::{project_to_range, Ensemble, ForwardModel, InverseProblem, SchemeVariant};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Linear,
    LipschitzTanh,
    Cubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Gaussian,
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Tamed,
    EulerMaruyama,
    Tikhonov,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    schema_version: u32,
    problem: ProblemSpec,
    ensemble: EnsembleSpec,
    run: RunSpec,
    #[serde(default)]
    verify: VerifySpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSpec {
    kind: ProblemKind,
    matrix: Option<Vec<Vec<f64>>>,
    dim: Option<usize>,
    gamma: Vec<Vec<f64>>,
    observation: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleSpec {
    particles: usize,
    init: InitKind,
    mean: Option<Vec<f64>>,
    cov: Option<Vec<Vec<f64>>>,
    explicit: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    project_to_range: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSpec {
    horizon: f64,
    levels: Vec<u32>,
    reference_level: u32,
    replicas: usize,
    seed: u64,
    variant: VariantKind,
    #[serde(default = "default_gamma_exponent")]
    gamma_exponent: f64,
    #[serde(default = "default_theta")]
    theta: f64,
    #[serde(default = "default_explosion_threshold")]
    explosion_threshold: f64,
    tikhonov: Option<TikhonovSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TikhonovSpec {
    lambda: f64,
    prior_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifySpec {
    #[serde(default = "default_mc_draws")]
    mc_draws: usize,
    #[serde(default = "default_trend_replicas")]
    trend_replicas: usize,
    #[serde(default = "default_trend_level")]
    trend_level: u32,
    y_tilde: Option<Vec<f64>>,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            mc_draws: default_mc_draws(),
            trend_replicas: default_trend_replicas(),
            trend_level: default_trend_level(),
            y_tilde: None,
        }
    }
}

fn default_gamma_exponent() -> f64 {
    0.45
}
fn default_theta() -> f64 {
    1.0
}
fn default_explosion_threshold() -> f64 {
    1e8
}
fn default_mc_draws() -> usize {
    100_000
}
fn default_trend_replicas() -> usize {
    200
}
fn default_trend_level() -> u32 {
    5
}

/// Initial-ensemble recipe, validated and in matrix form.
#[derive(Clone, Debug)]
enum Init {
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
    Explicit(DMatrix<f64>),
}

/// Settings consumed by the identity-check suite.
#[derive(Clone, Debug)]
pub struct VerifySettings {
    pub mc_draws: usize,
    pub trend_replicas: usize,
    pub trend_level: u32,
    pub y_tilde: Option<DVector<f64>>,
}

/// A fully validated scenario: problem and study parameters ready to run.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: ProblemKind,
    pub variant: VariantKind,
    pub tikhonov: Option<(f64, DMatrix<f64>)>,
    pub particles: usize,
    init: Init,
    pub project: bool,
    pub horizon: f64,
    pub levels: Vec<u32>,
    pub reference_level: u32,
    pub replicas: usize,
    pub seed: u64,
    pub gamma_exponent: f64,
    pub theta: f64,
    pub explosion_threshold: f64,
    pub verify: VerifySettings,
    problem: InverseProblem,
}

fn matrix_from(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        bail!("{path}: matrix must have at least one row and one column");
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        bail!("{path}: rows have unequal lengths");
    }
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                bail!("{path}: entry ({i}, {j}) is not finite");
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

fn vector_from(entries: &[f64], path: &str) -> Result<DVector<f64>> {
    if entries.iter().any(|v| !v.is_finite()) {
        bail!("{path}: entries must be finite");
    }
    Ok(DVector::from_column_slice(entries))
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading scenario file {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Scenario> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| anyhow!("{e}"))?;
        Self::build(file)
    }

    fn build(file: ScenarioFile) -> Result<Scenario> {
        if file.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                file.schema_version
            );
        }

        // Problem block: shapes first, then the model itself.
        let ps = &file.problem;
        let (model, param_dim, obs_dim) = match ps.kind {
            ProblemKind::Linear | ProblemKind::LipschitzTanh => {
                if ps.dim.is_some() {
                    bail!("problem.dim: only used by kind = \"cubic\"");
                }
                let rows = ps
                    .matrix
                    .as_ref()
                    .ok_or_else(|| anyhow!("problem.matrix: required for this kind"))?;
                let a = matrix_from(rows, "problem.matrix")?;
                let (p, k) = (a.ncols(), a.nrows());
                let model = match ps.kind {
                    ProblemKind::Linear => ForwardModel::linear(a),
                    _ => ForwardModel::lipschitz_tanh(a),
                }
                .map_err(|e| anyhow!("problem.matrix: {e}"))?;
                (model, p, k)
            }
            ProblemKind::Cubic => {
                if ps.matrix.is_some() {
                    bail!("problem.matrix: not used by kind = \"cubic\"");
                }
                let dim = ps
                    .dim
                    .ok_or_else(|| anyhow!("problem.dim: required for kind = \"cubic\""))?;
                let model = ForwardModel::cubic(dim).map_err(|e| anyhow!("problem.dim: {e}"))?;
                (model, dim, dim)
            }
        };
        let gamma = matrix_from(&ps.gamma, "problem.gamma")?;
        if gamma.nrows() != obs_dim || gamma.ncols() != obs_dim {
            bail!(
                "problem.gamma: must be {obs_dim}x{obs_dim}, got {}x{}",
                gamma.nrows(),
                gamma.ncols()
            );
        }
        if ps.observation.len() != obs_dim {
            bail!(
                "problem.observation: expected {obs_dim} entries, got {}",
                ps.observation.len()
            );
        }
        let y = vector_from(&ps.observation, "problem.observation")?;
        let problem =
            InverseProblem::new(model, gamma, y).map_err(|e| anyhow!("problem: {e}"))?;

        // Ensemble block.
        let es = &file.ensemble;
        if es.particles < 2 {
            bail!("ensemble.particles: need at least 2, got {}", es.particles);
        }
        let init = match es.init {
            InitKind::Gaussian => {
                if es.explicit.is_some() {
                    bail!("ensemble.explicit: only used by init = \"explicit\"");
                }
                let mean = es
                    .mean
                    .as_ref()
                    .ok_or_else(|| anyhow!("ensemble.mean: required for init = \"gaussian\""))?;
                let cov = es
                    .cov
                    .as_ref()
                    .ok_or_else(|| anyhow!("ensemble.cov: required for init = \"gaussian\""))?;
                if mean.len() != param_dim {
                    bail!(
                        "ensemble.mean: expected {param_dim} entries, got {}",
                        mean.len()
                    );
                }
                let cov = matrix_from(cov, "ensemble.cov")?;
                if cov.nrows() != param_dim || cov.ncols() != param_dim {
                    bail!(
                        "ensemble.cov: must be {param_dim}x{param_dim}, got {}x{}",
                        cov.nrows(),
                        cov.ncols()
                    );
                }
                Init::Gaussian {
                    mean: vector_from(mean, "ensemble.mean")?,
                    cov,
                }
            }
            InitKind::Explicit => {
                if es.mean.is_some() || es.cov.is_some() {
                    bail!("ensemble.mean/cov: only used by init = \"gaussian\"");
                }
                let rows = es
                    .explicit
                    .as_ref()
                    .ok_or_else(|| anyhow!("ensemble.explicit: required for init = \"explicit\""))?;
                if rows.len() != es.particles {
                    bail!(
                        "ensemble.explicit: expected {} particles, got {}",
                        es.particles,
                        rows.len()
                    );
                }
                if rows.iter().any(|r| r.len() != param_dim) {
                    bail!("ensemble.explicit: every particle needs {param_dim} entries");
                }
                // Particles arrive as rows; the ensemble stores them as columns.
                let m = matrix_from(rows, "ensemble.explicit")?.transpose();
                Init::Explicit(m)
            }
        };
        if es.project_to_range && ps.kind != ProblemKind::Linear {
            bail!("ensemble.project_to_range: requires problem.kind = \"linear\"");
        }

        // Run block.
        let rs = &file.run;
        if !(rs.horizon > 0.0) || !rs.horizon.is_finite() {
            bail!("run.horizon: must be finite and > 0, got {}", rs.horizon);
        }
        if rs.levels.is_empty() {
            bail!("run.levels: must list at least one level");
        }
        if rs.levels.windows(2).any(|w| w[1] <= w[0]) {
            bail!("run.levels: must be strictly increasing");
        }
        let top = *rs.levels.last().expect("nonempty");
        if rs.reference_level < top {
            bail!(
                "run.reference_level: {} is below the finest requested level {top}",
                rs.reference_level
            );
        }
        if rs.reference_level > MAX_LEVELS {
            bail!(
                "run.reference_level: {} exceeds the lattice cap {MAX_LEVELS}",
                rs.reference_level
            );
        }
        if rs.replicas == 0 {
            bail!("run.replicas: need at least 1");
        }
        if !(rs.theta > 0.0 && rs.theta <= 2.0) {
            bail!("run.theta: must lie in (0, 2], got {}", rs.theta);
        }
        if !(rs.gamma_exponent > 0.0 && rs.gamma_exponent < 1.0) {
            bail!(
                "run.gamma_exponent: must lie in (0, 1), got {}",
                rs.gamma_exponent
            );
        }
        if !(rs.explosion_threshold > 0.0) || !rs.explosion_threshold.is_finite() {
            bail!(
                "run.explosion_threshold: must be finite and > 0, got {}",
                rs.explosion_threshold
            );
        }
        let tikhonov = match (rs.variant, &rs.tikhonov) {
            (VariantKind::Tikhonov, Some(t)) => {
                if !(t.lambda > 0.0) || !t.lambda.is_finite() {
                    bail!("run.tikhonov.lambda: must be finite and > 0, got {}", t.lambda);
                }
                let c0 = matrix_from(&t.prior_cov, "run.tikhonov.prior_cov")?;
                if c0.nrows() != param_dim || c0.ncols() != param_dim {
                    bail!(
                        "run.tikhonov.prior_cov: must be {param_dim}x{param_dim}, got {}x{}",
                        c0.nrows(),
                        c0.ncols()
                    );
                }
                Some((t.lambda, c0))
            }
            (VariantKind::Tikhonov, None) => {
                bail!("run.tikhonov: required for variant = \"tikhonov\"")
            }
            (_, Some(_)) => bail!("run.tikhonov: only used by variant = \"tikhonov\""),
            (_, None) => None,
        };
        if rs.variant == VariantKind::Tikhonov && ps.kind != ProblemKind::Linear {
            bail!("run.variant: \"tikhonov\" requires problem.kind = \"linear\"");
        }

        // Verify block.
        let vs = &file.verify;
        if vs.mc_draws < 10_000 {
            bail!("verify.mc_draws: need at least 10000, got {}", vs.mc_draws);
        }
        if vs.trend_replicas < 2 {
            bail!(
                "verify.trend_replicas: need at least 2, got {}",
                vs.trend_replicas
            );
        }
        if vs.trend_level == 0 || vs.trend_level > MAX_LEVELS {
            bail!(
                "verify.trend_level: must lie in 1..={MAX_LEVELS}, got {}",
                vs.trend_level
            );
        }
        let y_tilde = match &vs.y_tilde {
            Some(v) => {
                if v.len() != obs_dim {
                    bail!("verify.y_tilde: expected {obs_dim} entries, got {}", v.len());
                }
                Some(vector_from(v, "verify.y_tilde")?)
            }
            None => None,
        };

        Ok(Scenario {
            kind: ps.kind,
            variant: rs.variant,
            tikhonov,
            particles: es.particles,
            init,
            project: es.project_to_range,
            horizon: rs.horizon,
            levels: rs.levels.clone(),
            reference_level: rs.reference_level,
            replicas: rs.replicas,
            seed: rs.seed,
            gamma_exponent: rs.gamma_exponent,
            theta: rs.theta,
            explosion_threshold: rs.explosion_threshold,
            verify: VerifySettings {
                mc_draws: vs.mc_draws,
                trend_replicas: vs.trend_replicas,
                trend_level: vs.trend_level,
                y_tilde,
            },
            problem,
        })
    }

    pub fn problem(&self) -> &InverseProblem {
        &self.problem
    }

    /// The scheme run at the study levels.
    pub fn scheme_variant(&self) -> SchemeVariant {
        match self.variant {
            VariantKind::Tamed => SchemeVariant::Tamed,
            VariantKind::EulerMaruyama => SchemeVariant::EulerMaruyama,
            VariantKind::Tikhonov => {
                let (lambda, c0) = self.tikhonov.as_ref().expect("validated");
                SchemeVariant::Tikhonov {
                    lambda: *lambda,
                    prior_cov: c0.clone(),
                }
            }
        }
    }

    /// The scheme producing the fine-grid reference path. The comparator is
    /// measured against the tamed limit; the other variants against their
    /// own fine-grid runs.
    pub fn reference_variant(&self) -> SchemeVariant {
        match self.variant {
            VariantKind::EulerMaruyama => SchemeVariant::Tamed,
            _ => self.scheme_variant(),
        }
    }

    /// Noise dimension per particle: the observation dimension of the
    /// effective (possibly Tikhonov-extended) problem.
    pub fn noise_dim(&self) -> usize {
        match self.variant {
            VariantKind::Tikhonov => self.problem.obs_dim() + self.problem.param_dim(),
            _ => self.problem.obs_dim(),
        }
    }

    /// Draws (or copies) the initial ensemble for one replica.
    pub fn initial_ensemble(&self, seed: u64) -> Result<Ensemble> {
        let ens = match &self.init {
            Init::Gaussian { mean, cov } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ensemble::gaussian(mean, cov, self.particles, &mut rng)
                    .map_err(|e| anyhow!("ensemble: {e}"))?
            }
            Init::Explicit(m) => Ensemble::new(m.clone()).map_err(|e| anyhow!("ensemble: {e}"))?,
        };
        if self.project {
            let b = &self
                .problem
                .whitened()
                .expect("project_to_range validated as linear-only")
                .operator;
            return project_to_range(&ens, b).map_err(|e| anyhow!("ensemble: {e}"));
        }
        Ok(ens)
    }
}
