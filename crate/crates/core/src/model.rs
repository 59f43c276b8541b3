//! Forward maps and inverse-problem data.
//!
//! An [`InverseProblem`] bundles a forward map `G: R^p -> R^K`, an SPD noise
//! covariance `gamma`, and an observation `y`. For linear maps `G(u) = A u`
//! the whitened operator `B = gamma^{-1/2} A` and whitened observation are
//! cached at construction; the schemes use them on their fast path, and the
//! identity checks in [`crate::properties`] are formulated in terms of `B`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, CutoffSvd};

/// Growth class of a forward map. Only used as metadata for diagnostics and
/// scenario reporting; the schemes treat every nonlinear map identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    LipschitzNonlinear,
    PolynomialNonlinear,
}

type EvalFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
enum ModelOp {
    /// `u -> A u`.
    Matrix(DMatrix<f64>),
    /// `u -> mix * tanh.(u)`, globally Lipschitz.
    TanhMix(DMatrix<f64>),
    /// `u -> u.^3` coordinatewise, cubic growth.
    Cubic,
    /// Arbitrary user map.
    Custom(EvalFn),
}

/// A forward map together with its growth metadata. Immutable after
/// construction; shared freely across replica workers.
#[derive(Clone)]
pub struct ForwardModel {
    op: ModelOp,
    kind: ModelKind,
    growth_exponent: f64,
    dim_in: usize,
    dim_out: usize,
}

impl fmt::Debug for ForwardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardModel")
            .field("kind", &self.kind)
            .field("growth_exponent", &self.growth_exponent)
            .field("dim_in", &self.dim_in)
            .field("dim_out", &self.dim_out)
            .finish()
    }
}

impl ForwardModel {
    /// Linear map `u -> a u`.
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::Dimension("linear model: empty matrix".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear model matrix".into()));
        }
        Ok(Self {
            dim_in: a.ncols(),
            dim_out: a.nrows(),
            op: ModelOp::Matrix(a),
            kind: ModelKind::Linear,
            growth_exponent: 1.0,
        })
    }

    /// Bounded Lipschitz map `u -> mix * tanh.(u)` (growth exponent 1).
    pub fn lipschitz_tanh(mix: DMatrix<f64>) -> Result<Self> {
        if mix.nrows() == 0 || mix.ncols() == 0 {
            return Err(Error::Dimension("tanh model: empty mix matrix".into()));
        }
        if mix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tanh model mix matrix".into()));
        }
        Ok(Self {
            dim_in: mix.ncols(),
            dim_out: mix.nrows(),
            op: ModelOp::TanhMix(mix),
            kind: ModelKind::LipschitzNonlinear,
            growth_exponent: 1.0,
        })
    }

    /// Coordinatewise cube `u -> u.^3` on `R^dim` (growth exponent 3).
    pub fn cubic(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("cubic model: dim must be >= 1".into()));
        }
        Ok(Self {
            dim_in: dim,
            dim_out: dim,
            op: ModelOp::Cubic,
            kind: ModelKind::PolynomialNonlinear,
            growth_exponent: 3.0,
        })
    }

    /// Arbitrary map with caller-declared growth metadata.
    pub fn custom(
        eval: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        dim_in: usize,
        dim_out: usize,
        growth_exponent: f64,
        kind: ModelKind,
    ) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::Dimension("custom model: zero dimension".into()));
        }
        if !(growth_exponent >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "custom model: growth exponent {growth_exponent} must be >= 1"
            )));
        }
        Ok(Self {
            op: ModelOp::Custom(Arc::new(eval)),
            kind,
            growth_exponent,
            dim_in,
            dim_out,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn growth_exponent(&self) -> f64 {
        self.growth_exponent
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    /// The matrix of a linear map, if this model is linear.
    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.op {
            ModelOp::Matrix(a) => Some(a),
            _ => None,
        }
    }

    /// Evaluates the map at a single point.
    pub fn eval(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.dim_in {
            return Err(Error::Dimension(format!(
                "model eval: input dim {} != {}",
                u.len(),
                self.dim_in
            )));
        }
        let mut out = DMatrix::zeros(self.dim_out, 1);
        let mut scratch = DMatrix::zeros(self.dim_in, 1);
        self.eval_batch(&DMatrix::from_column_slice(self.dim_in, 1, u.as_slice()), &mut scratch, &mut out);
        Ok(DVector::from_column_slice(out.column(0).as_slice()))
    }

    /// Evaluates the map on every column of `u` (particles as columns),
    /// writing into `out` (dim_out x J). `scratch` must be dim_in x J.
    /// No allocation on the matrix and coordinatewise paths.
    pub(crate) fn eval_batch(
        &self,
        u: &DMatrix<f64>,
        scratch: &mut DMatrix<f64>,
        out: &mut DMatrix<f64>,
    ) {
        debug_assert_eq!(u.nrows(), self.dim_in);
        debug_assert_eq!(out.nrows(), self.dim_out);
        debug_assert_eq!(out.ncols(), u.ncols());
        match &self.op {
            ModelOp::Matrix(a) => out.gemm(1.0, a, u, 0.0),
            ModelOp::TanhMix(mix) => {
                debug_assert_eq!(scratch.nrows(), self.dim_in);
                for (s, x) in scratch.iter_mut().zip(u.iter()) {
                    *s = x.tanh();
                }
                out.gemm(1.0, mix, scratch, 0.0);
            }
            ModelOp::Cubic => {
                for (o, x) in out.iter_mut().zip(u.iter()) {
                    *o = x * x * x;
                }
            }
            ModelOp::Custom(f) => {
                for j in 0..u.ncols() {
                    let col = DVector::from_column_slice(u.column(j).as_slice());
                    out.set_column(j, &f(&col));
                }
            }
        }
    }
}

/// Whitened form of a linear problem, cached at construction.
#[derive(Clone, Debug)]
pub struct Whitened {
    /// `B = gamma^{-1/2} A`.
    pub operator: DMatrix<f64>,
    /// `gamma^{-1/2} y`.
    pub observation: DVector<f64>,
}

/// Forward model, noise covariance, and observation.
#[derive(Clone, Debug)]
pub struct InverseProblem {
    model: ForwardModel,
    gamma: DMatrix<f64>,
    observation: DVector<f64>,
    gamma_sqrt: DMatrix<f64>,
    gamma_inv_sqrt: DMatrix<f64>,
    whitened: Option<Whitened>,
}

impl InverseProblem {
    /// Validates shapes, requires `gamma` SPD, and caches the symmetric
    /// square roots (so whitening operators are themselves symmetric).
    pub fn new(model: ForwardModel, gamma: DMatrix<f64>, observation: DVector<f64>) -> Result<Self> {
        let k = model.dim_out();
        if gamma.nrows() != k || gamma.ncols() != k {
            return Err(Error::Dimension(format!(
                "gamma is {}x{}, expected {k}x{k}",
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        if observation.len() != k {
            return Err(Error::Dimension(format!(
                "observation dim {} != model output dim {k}",
                observation.len()
            )));
        }
        if observation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation".into()));
        }
        let gamma = linalg::require_symmetric(&gamma, 1e-10, "gamma")?;
        let gamma_sqrt = linalg::sym_sqrt(&gamma, "gamma")?;
        let gamma_inv_sqrt = linalg::sym_inv_sqrt(&gamma, "gamma")?;
        let whitened = model.linear_matrix().map(|a| Whitened {
            operator: &gamma_inv_sqrt * a,
            observation: &gamma_inv_sqrt * &observation,
        });
        Ok(Self {
            model,
            gamma,
            observation,
            gamma_sqrt,
            gamma_inv_sqrt,
            whitened,
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.observation
    }

    /// Symmetric `gamma^{1/2}`.
    pub fn gamma_sqrt(&self) -> &DMatrix<f64> {
        &self.gamma_sqrt
    }

    /// Symmetric `gamma^{-1/2}`.
    pub fn gamma_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.gamma_inv_sqrt
    }

    /// Whitened operator and observation; present iff the model is linear.
    pub fn whitened(&self) -> Option<&Whitened> {
        self.whitened.as_ref()
    }

    /// Parameter dimension `p`.
    pub fn param_dim(&self) -> usize {
        self.model.dim_in()
    }

    /// Observation dimension `K`, which is also the driving-noise dimension.
    pub fn obs_dim(&self) -> usize {
        self.model.dim_out()
    }
}

/// Split of an observation against the range of a whitened operator.
#[derive(Clone, Debug)]
pub struct ObservationSplit {
    /// Component inside `range(B)`.
    pub attainable: DVector<f64>,
    /// Component orthogonal to `range(B)`; unreachable by the dynamics.
    pub orthogonal: DVector<f64>,
    /// Minimum-norm `u` with `B u = attainable`.
    pub witness: DVector<f64>,
}

/// Splits `z = attainable + orthogonal` against `range(b)` and returns the
/// minimum-norm preimage of the attainable part. Rank is decided by the
/// crate-wide SVD cutoff.
pub fn decompose_observation(b: &DMatrix<f64>, z: &DVector<f64>) -> Result<ObservationSplit> {
    if z.len() != b.nrows() {
        return Err(Error::Dimension(format!(
            "decompose_observation: z dim {} != {} rows of b",
            z.len(),
            b.nrows()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decompose_observation: z".into()));
    }
    let svd = CutoffSvd::new(b)?;
    let attainable = svd.column_space_projector() * z;
    let orthogonal = z - &attainable;
    let witness = svd.min_norm_solve(z);
    Ok(ObservationSplit {
        attainable,
        orthogonal,
        witness,
    })
}

/// Builds the Tikhonov-regularized extension of a linear problem: the
/// operator gains an identity block, the observation a zero block, and the
/// noise covariance a `prior_cov / lambda` block. Running the tamed scheme
/// on the extension is the regularized variant.
pub fn extend_tikhonov(
    problem: &InverseProblem,
    lambda: f64,
    prior_cov: &DMatrix<f64>,
) -> Result<InverseProblem> {
    let a = problem.model().linear_matrix().ok_or_else(|| {
        Error::InvalidArgument("tikhonov extension requires a linear model".into())
    })?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "tikhonov extension: lambda {lambda} must be finite and > 0"
        )));
    }
    let p = problem.param_dim();
    let k = problem.obs_dim();
    if prior_cov.nrows() != p || prior_cov.ncols() != p {
        return Err(Error::Dimension(format!(
            "tikhonov extension: prior covariance is {}x{}, expected {p}x{p}",
            prior_cov.nrows(),
            prior_cov.ncols()
        )));
    }
    let prior_cov = linalg::require_symmetric(prior_cov, 1e-10, "prior covariance")?;
    // SPD check up front so the blockdiag below is SPD by construction.
    linalg::sym_sqrt(&prior_cov, "prior covariance")?;

    let mut a_ext = DMatrix::zeros(k + p, p);
    a_ext.view_mut((0, 0), (k, p)).copy_from(a);
    a_ext
        .view_mut((k, 0), (p, p))
        .copy_from(&DMatrix::identity(p, p));

    let mut y_ext = DVector::zeros(k + p);
    y_ext.rows_mut(0, k).copy_from(problem.observation());

    let mut gamma_ext = DMatrix::zeros(k + p, k + p);
    gamma_ext.view_mut((0, 0), (k, k)).copy_from(problem.gamma());
    gamma_ext
        .view_mut((k, k), (p, p))
        .copy_from(&(prior_cov / lambda));

    InverseProblem::new(ForwardModel::linear(a_ext)?, gamma_ext, y_ext)
}

/// Growth and stability constants for a polynomial-growth forward map at
/// truncation radius `radius` and step size `h`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct GrowthDiagnostics {
    /// Drift/diffusion magnitude bound on the ball: `scale (R^{1+2m} + 1)`.
    pub growth_bound: f64,
    /// Local Lipschitz / one-sided constant: `scale (R^{2m} + 1)`.
    pub lipschitz_bound: f64,
    /// Taming perturbation of the drift: `scale h (R^{4m+1} + 1)`.
    pub taming_bias: f64,
    /// Combined one-step constant:
    /// `taming_bias + lipschitz_bound * sqrt(h) * growth_bound`.
    pub combined_constant: f64,
    /// Dissipation gap `2 L + c L^2 + eps`.
    pub dissipation_gap: f64,
}

/// Evaluates the growth diagnostics. `growth_exponent` is the map's `m >= 1`,
/// `c` and `eps` are the moment-inequality constants, `scale` the common
/// envelope constant.
pub fn growth_diagnostics(
    growth_exponent: f64,
    radius: f64,
    h: f64,
    c: f64,
    eps: f64,
    scale: f64,
) -> Result<GrowthDiagnostics> {
    if !(growth_exponent >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "growth_diagnostics: growth exponent {growth_exponent} must be >= 1"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "growth_diagnostics: radius {radius} must be > 0"
        )));
    }
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "growth_diagnostics: step size {h} must lie in (0, 1)"
        )));
    }
    if !(c >= 0.0 && eps >= 0.0 && scale >= 0.0) {
        return Err(Error::InvalidArgument(
            "growth_diagnostics: c, eps, scale must be >= 0".into(),
        ));
    }
    let m = growth_exponent;
    let growth_bound = scale * (radius.powf(1.0 + 2.0 * m) + 1.0);
    let lipschitz_bound = scale * (radius.powf(2.0 * m) + 1.0);
    let taming_bias = scale * h * (radius.powf(4.0 * m + 1.0) + 1.0);
    let combined_constant = taming_bias + lipschitz_bound * h.sqrt() * growth_bound;
    let dissipation_gap = 2.0 * lipschitz_bound + c * lipschitz_bound * lipschitz_bound + eps;
    Ok(GrowthDiagnostics {
        growth_bound,
        lipschitz_bound,
        taming_bias,
        combined_constant,
        dissipation_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn linear_model_matches_matrix() {
        let a = dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0];
        let m = ForwardModel::linear(a.clone()).unwrap();
        let u = dvector![1.0, -1.0];
        assert_eq!(m.eval(&u).unwrap(), &a * &u);
        assert_eq!(m.kind(), ModelKind::Linear);
        assert_eq!(m.growth_exponent(), 1.0);
    }

    #[test]
    fn tanh_model_saturates() {
        let mix = dmatrix![2.0, 0.0; 0.0, 1.0];
        let m = ForwardModel::lipschitz_tanh(mix).unwrap();
        let g = m.eval(&dvector![50.0, -50.0]).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_model_coordinatewise() {
        let m = ForwardModel::cubic(3).unwrap();
        let g = m.eval(&dvector![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(g, dvector![8.0, -1.0, 0.125]);
        assert_eq!(m.growth_exponent(), 3.0);
    }

    #[test]
    fn eval_rejects_wrong_dim() {
        let m = ForwardModel::cubic(2).unwrap();
        assert!(m.eval(&dvector![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn problem_whitens_linear_models() {
        let a = dmatrix![2.0, 0.0; 0.0, 1.0];
        let gamma = dmatrix![4.0, 0.0; 0.0, 1.0];
        let y = dvector![1.0, 2.0];
        let prob = InverseProblem::new(ForwardModel::linear(a).unwrap(), gamma, y).unwrap();
        let w = prob.whitened().unwrap();
        assert!((&w.operator - dmatrix![1.0, 0.0; 0.0, 1.0]).amax() < 1e-12);
        assert!((&w.observation - dvector![0.5, 2.0]).amax() < 1e-12);
        // gamma^{-1/2} gamma gamma^{-1/2} = I.
        let ident = prob.gamma_inv_sqrt() * prob.gamma() * prob.gamma_inv_sqrt();
        assert!((ident - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn problem_rejects_indefinite_gamma() {
        let a = dmatrix![1.0, 0.0; 0.0, 1.0];
        let gamma = dmatrix![1.0, 3.0; 3.0, 1.0]; // eigenvalues 4, -2
        assert!(InverseProblem::new(ForwardModel::linear(a).unwrap(), gamma, dvector![0.0, 0.0]).is_err());
    }

    #[test]
    fn decompose_axis_aligned() {
        let b = dmatrix![1.0, 0.0; 0.0, 0.0];
        let split = decompose_observation(&b, &dvector![3.0, 4.0]).unwrap();
        assert!((split.attainable - dvector![3.0, 0.0]).amax() < 1e-12);
        assert!((split.orthogonal - dvector![0.0, 4.0]).amax() < 1e-12);
        assert!((split.witness - dvector![3.0, 0.0]).amax() < 1e-12);
    }

    #[test]
    fn decompose_zero_operator() {
        let b = DMatrix::<f64>::zeros(2, 3);
        let split = decompose_observation(&b, &dvector![1.0, -1.0]).unwrap();
        assert_eq!(split.attainable, dvector![0.0, 0.0]);
        assert_eq!(split.orthogonal, dvector![1.0, -1.0]);
        assert_eq!(split.witness, DVector::zeros(3));
    }

    #[test]
    fn decompose_parts_are_orthogonal() {
        // Oracle by construction: rank-1 B with known range direction.
        let b = dmatrix![3.0, 0.0; 4.0, 0.0];
        let z = dvector![1.0, 1.0];
        let split = decompose_observation(&b, &z).unwrap();
        assert!(split.attainable.dot(&split.orthogonal).abs() < 1e-12);
        let dir = dvector![0.6, 0.8];
        let expected = dir.dot(&z);
        assert!((split.attainable - &dir * expected).amax() < 1e-12);
        // B * witness reproduces the attainable part.
        let back = &b * &split.witness;
        let attainable = decompose_observation(&b, &z).unwrap().attainable;
        assert!((back - attainable).amax() < 1e-12);
    }

    #[test]
    fn tikhonov_blocks() {
        let a = dmatrix![2.0, 0.0; 0.0, 1.0];
        let prob = InverseProblem::new(
            ForwardModel::linear(a).unwrap(),
            DMatrix::identity(2, 2),
            dvector![1.0, -1.0],
        )
        .unwrap();
        let ext = extend_tikhonov(&prob, 1.0, &DMatrix::identity(2, 2)).unwrap();
        let expected_b = dmatrix![
            2.0, 0.0;
            0.0, 1.0;
            1.0, 0.0;
            0.0, 1.0
        ];
        assert!((&ext.whitened().unwrap().operator - expected_b).amax() < 1e-12);
        assert_eq!(ext.observation(), &dvector![1.0, -1.0, 0.0, 0.0]);
        assert_eq!(ext.obs_dim(), 4);
    }

    #[test]
    fn tikhonov_lambda_scales_prior_block() {
        let a = dmatrix![1.0, 0.0; 0.0, 1.0];
        let prob = InverseProblem::new(
            ForwardModel::linear(a).unwrap(),
            DMatrix::identity(2, 2),
            dvector![0.0, 0.0],
        )
        .unwrap();
        let ext = extend_tikhonov(&prob, 4.0, &DMatrix::identity(2, 2)).unwrap();
        // gamma block is prior/lambda = I/4, so whitened prior rows scale by 2.
        let b = &ext.whitened().unwrap().operator;
        assert!((b[(2, 0)] - 2.0).abs() < 1e-12);
        assert!((b[(3, 1)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tikhonov_rejects_bad_inputs() {
        let prob = InverseProblem::new(
            ForwardModel::cubic(2).unwrap(),
            DMatrix::identity(2, 2),
            dvector![0.0, 0.0],
        )
        .unwrap();
        assert!(extend_tikhonov(&prob, 1.0, &DMatrix::identity(2, 2)).is_err());

        let lin = InverseProblem::new(
            ForwardModel::linear(DMatrix::identity(2, 2)).unwrap(),
            DMatrix::identity(2, 2),
            dvector![0.0, 0.0],
        )
        .unwrap();
        assert!(extend_tikhonov(&lin, 0.0, &DMatrix::identity(2, 2)).is_err());
        assert!(extend_tikhonov(&lin, 1.0, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn growth_diagnostics_worked_example() {
        let g = growth_diagnostics(1.0, 2.0, 0.01, 1.1, 0.1, 1.0).unwrap();
        assert!((g.growth_bound - 9.0).abs() < 1e-12);
        assert!((g.lipschitz_bound - 5.0).abs() < 1e-12);
        assert!((g.taming_bias - 0.33).abs() < 1e-12);
        assert!((g.combined_constant - (0.33 + 5.0 * 0.1 * 9.0)).abs() < 1e-12);
        assert!((g.dissipation_gap - 37.6).abs() < 1e-12);
    }

    #[test]
    fn growth_diagnostics_zero_scale() {
        let g = growth_diagnostics(2.0, 3.0, 0.5, 1.0, 0.25, 0.0).unwrap();
        assert_eq!(g.growth_bound, 0.0);
        assert_eq!(g.combined_constant, 0.0);
        assert_eq!(g.dissipation_gap, 0.25);
    }

    #[test]
    fn growth_diagnostics_validates() {
        assert!(growth_diagnostics(0.5, 1.0, 0.1, 1.0, 0.0, 1.0).is_err());
        assert!(growth_diagnostics(1.0, 0.0, 0.1, 1.0, 0.0, 1.0).is_err());
        assert!(growth_diagnostics(1.0, 1.0, 1.0, 1.0, 0.0, 1.0).is_err());
    }
}
