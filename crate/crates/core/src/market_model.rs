//! Model dimensions, market coefficients and power utility.
//!
//! Coefficients are evaluated on a factor triple `(y, v, z)`: the current
//! factor `y`, the exponentially weighted delay average `v`, and the lagged
//! factor `z = Y(t - delta)`. Implement [`Coefficients`] to plug in a model
//! that is not covered by the built-in families of [`CoefficientSpec`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition number of `sigma * sigma^T` above which it is treated as singular.
pub const DEFAULT_CONDITION_THRESHOLD: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_assets: usize,
    pub n_factors: usize,
    pub n_noise: usize,
}

impl ModelDims {
    pub fn new(n_assets: usize, n_factors: usize, n_noise: usize) -> Result<Self> {
        if n_assets == 0 || n_assets > n_noise {
            return Err(Error::invalid(
                "n_assets",
                format!("need 1 <= m <= N, got m = {n_assets}, N = {n_noise}"),
            ));
        }
        if n_factors == 0 {
            return Err(Error::invalid("n_factors", "need at least one factor"));
        }
        Ok(Self {
            n_assets,
            n_factors,
            n_noise,
        })
    }

    /// Square volatility; invertibility is checked per state by [`MarketSnapshot`].
    pub fn is_complete(&self) -> bool {
        self.n_assets == self.n_noise
    }
}

/// Borrowed factor triple. `z` is empty when the model has no pointwise delay.
#[derive(Clone, Copy, Debug)]
pub struct FactorState<'a> {
    pub y: &'a [f64],
    pub v: f64,
    pub z: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct OwnedState {
    pub y: Vec<f64>,
    pub v: f64,
    pub z: Vec<f64>,
}

impl OwnedState {
    pub fn new(y: Vec<f64>, v: f64, z: Vec<f64>) -> Self {
        Self { y, v, z }
    }

    pub fn as_state(&self) -> FactorState<'_> {
        FactorState {
            y: &self.y,
            v: self.v,
            z: &self.z,
        }
    }
}

/// Market and factor coefficient evaluators. Implementations must be pure.
pub trait Coefficients: Send + Sync {
    fn dims(&self) -> ModelDims;
    /// Interest rate `r`.
    fn rate(&self, s: &FactorState) -> f64;
    /// Stock drift `mu`, length m.
    fn drift(&self, s: &FactorState) -> DVector<f64>;
    /// Stock volatility `sigma`, m x N.
    fn volatility(&self, s: &FactorState) -> DMatrix<f64>;
    /// Factor drift `b`, length n.
    fn factor_drift(&self, s: &FactorState) -> DVector<f64>;
    /// Factor diffusion `sigma_F`, n x N.
    fn factor_volatility(&self, s: &FactorState) -> DMatrix<f64>;
    /// Delay transform `h`.
    fn delay_transform(&self, y: &[f64]) -> f64;
    /// Whether any evaluator reads `z`.
    fn uses_pointwise_delay(&self) -> bool;
    /// Whether `r`, `mu` and `sigma` ignore the state.
    fn market_is_constant(&self) -> bool {
        false
    }
}

/// Everything the solvers need from the market at one state.
#[derive(Clone, Debug)]
pub struct MarketSnapshot {
    pub rate: f64,
    pub drift: DVector<f64>,
    pub volatility: DMatrix<f64>,
    /// `mu - r 1`
    pub excess: DVector<f64>,
    /// `(sigma sigma^T)^{-1}`
    pub cov_inv: DMatrix<f64>,
    /// `sigma^T (sigma sigma^T)^{-1} (mu - r 1)`
    pub theta: DVector<f64>,
    /// `sigma^T (sigma sigma^T)^{-1} sigma`
    pub projection: DMatrix<f64>,
    pub condition: f64,
}

impl MarketSnapshot {
    pub fn evaluate(coeffs: &dyn Coefficients, state: &FactorState) -> Result<Self> {
        Self::evaluate_with_threshold(coeffs, state, DEFAULT_CONDITION_THRESHOLD)
    }

    pub fn evaluate_with_threshold(
        coeffs: &dyn Coefficients,
        state: &FactorState,
        threshold: f64,
    ) -> Result<Self> {
        let rate = coeffs.rate(state);
        let drift = coeffs.drift(state);
        let volatility = coeffs.volatility(state);
        let excess = drift.map(|mu| mu - rate);
        let (cov_inv, condition) = covariance_inverse(&volatility, threshold)?;
        let sigma_t = volatility.transpose();
        let theta = &sigma_t * (&cov_inv * &excess);
        let projection = &sigma_t * &cov_inv * &volatility;
        Ok(Self {
            rate,
            drift,
            volatility,
            excess,
            cov_inv,
            theta,
            projection,
            condition,
        })
    }
}

/// Inverse of `sigma sigma^T` and its condition number.
pub fn covariance_inverse(sigma: &DMatrix<f64>, threshold: f64) -> Result<(DMatrix<f64>, f64)> {
    let cov = sigma * sigma.transpose();
    if cov.nrows() == 1 {
        let c = cov[(0, 0)];
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::SingularMatrix { condition: f64::INFINITY });
        }
        return Ok((DMatrix::from_element(1, 1, 1.0 / c), 1.0));
    }
    let eigenvalues = cov.symmetric_eigenvalues();
    let max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition.is_finite() && condition <= threshold) {
        return Err(Error::SingularMatrix { condition });
    }
    let inv = cov
        .cholesky()
        .ok_or(Error::SingularMatrix { condition })?
        .inverse();
    Ok((inv, condition))
}

pub fn eval_theta(coeffs: &dyn Coefficients, state: &FactorState) -> Result<DVector<f64>> {
    MarketSnapshot::evaluate(coeffs, state).map(|s| s.theta)
}

pub fn eval_projection(coeffs: &dyn Coefficients, state: &FactorState) -> Result<DMatrix<f64>> {
    MarketSnapshot::evaluate(coeffs, state).map(|s| s.projection)
}

/// `U(x) = x^gamma / gamma` with `0 < gamma < 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerUtility {
    pub gamma: f64,
    pub initial_wealth: f64,
}

impl PowerUtility {
    pub fn new(gamma: f64, initial_wealth: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("gamma", format!("need 0 < gamma < 1, got {gamma}")));
        }
        if !(initial_wealth > 0.0 && initial_wealth.is_finite()) {
            return Err(Error::invalid(
                "initial_wealth",
                format!("need x > 0, got {initial_wealth}"),
            ));
        }
        Ok(Self {
            gamma,
            initial_wealth,
        })
    }

    pub fn value(&self, x: f64) -> f64 {
        x.powf(self.gamma) / self.gamma
    }

    pub fn marginal(&self, x: f64) -> f64 {
        x.powf(self.gamma - 1.0)
    }

    /// Inverse of the marginal utility, `I(z) = z^{1/(gamma-1)}`.
    pub fn inverse_marginal(&self, z: f64) -> f64 {
        z.powf(1.0 / (self.gamma - 1.0))
    }

    /// `gamma / (1 - gamma)`
    pub fn gamma_tilde(&self) -> f64 {
        self.gamma / (1.0 - self.gamma)
    }

    /// `U(x)` at the initial wealth.
    pub fn initial_value(&self) -> f64 {
        self.value(self.initial_wealth)
    }
}

// ---------------------------------------------------------------------------
// Built-in coefficient families
// ---------------------------------------------------------------------------

/// Config-facing description of a built-in coefficient family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CoefficientSpec {
    Constant(ConstantCoefficients),
    Affine(AffineCoefficients),
    LqInfinite(LqInfiniteCoefficients),
    LqPointwise(LqPointwiseCoefficients),
}

impl CoefficientSpec {
    /// Builds the evaluator. The LQ families need the utility exponent because
    /// they are parameterised through `gamma r + gamma_tilde |theta|^2 / 2`.
    pub fn build(&self, dims: ModelDims, gamma: f64) -> Result<Arc<dyn Coefficients>> {
        Ok(match self {
            CoefficientSpec::Constant(c) => Arc::new(AffineModel::from_constant(c, dims)?),
            CoefficientSpec::Affine(a) => Arc::new(AffineModel::new(a, dims)?),
            CoefficientSpec::LqInfinite(p) => {
                require_scalar_dims(dims)?;
                Arc::new(LqInfiniteModel::new(*p, gamma)?)
            }
            CoefficientSpec::LqPointwise(p) => {
                require_scalar_dims(dims)?;
                Arc::new(LqPointwiseModel::new(*p, gamma)?)
            }
        })
    }
}

fn require_scalar_dims(dims: ModelDims) -> Result<()> {
    if dims != (ModelDims { n_assets: 1, n_factors: 1, n_noise: 1 }) {
        return Err(Error::invalid(
            "dims",
            "the LQ coefficient families require m = n = N = 1",
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantCoefficients {
    pub r: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma_f: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub h_weights: Option<Vec<f64>>,
}

/// Coefficients affine in `(y, v, z)`; volatilities are constant.
/// Omitted slopes are zero; `h` defaults to the first factor component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineCoefficients {
    pub r0: f64,
    #[serde(default)]
    pub r_y: Option<Vec<f64>>,
    #[serde(default)]
    pub r_v: f64,
    #[serde(default)]
    pub r_z: Option<Vec<f64>>,
    pub mu0: Vec<f64>,
    #[serde(default)]
    pub mu_y: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub mu_v: Option<Vec<f64>>,
    #[serde(default)]
    pub mu_z: Option<Vec<Vec<f64>>>,
    pub sigma: Vec<Vec<f64>>,
    #[serde(default)]
    pub b0: Option<Vec<f64>>,
    #[serde(default)]
    pub b_y: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub b_v: Option<Vec<f64>>,
    #[serde(default)]
    pub b_z: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma_f: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub h0: f64,
    #[serde(default)]
    pub h_weights: Option<Vec<f64>>,
}

/// Runtime evaluator for the constant and affine families.
#[derive(Clone, Debug)]
pub struct AffineModel {
    dims: ModelDims,
    r0: f64,
    r_y: DVector<f64>,
    r_v: f64,
    r_z: DVector<f64>,
    mu0: DVector<f64>,
    mu_y: DMatrix<f64>,
    mu_v: DVector<f64>,
    mu_z: DMatrix<f64>,
    sigma: DMatrix<f64>,
    b0: DVector<f64>,
    b_y: DMatrix<f64>,
    b_v: DVector<f64>,
    b_z: DMatrix<f64>,
    sigma_f: DMatrix<f64>,
    h0: f64,
    h_weights: DVector<f64>,
}

fn vector(name: &str, v: Option<&Vec<f64>>, len: usize) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::invalid(
            name,
            format!("expected length {len}, got {}", v.len()),
        )),
    }
}

fn matrix(name: &str, m: Option<&Vec<Vec<f64>>>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let Some(m) = m else {
        return Ok(DMatrix::zeros(rows, cols));
    };
    if m.len() != rows || m.iter().any(|row| row.len() != cols) {
        return Err(Error::invalid(name, format!("expected a {rows} x {cols} matrix")));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| m[i][j]))
}

fn default_h_weights(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    w[0] = 1.0;
    w
}

impl AffineModel {
    pub fn new(a: &AffineCoefficients, dims: ModelDims) -> Result<Self> {
        let (m, n, big_n) = (dims.n_assets, dims.n_factors, dims.n_noise);
        let h_weights = a.h_weights.clone().unwrap_or_else(|| default_h_weights(n));
        let model = Self {
            dims,
            r0: a.r0,
            r_y: vector("r_y", a.r_y.as_ref(), n)?,
            r_v: a.r_v,
            r_z: vector("r_z", a.r_z.as_ref(), n)?,
            mu0: vector("mu0", Some(&a.mu0), m)?,
            mu_y: matrix("mu_y", a.mu_y.as_ref(), m, n)?,
            mu_v: vector("mu_v", a.mu_v.as_ref(), m)?,
            mu_z: matrix("mu_z", a.mu_z.as_ref(), m, n)?,
            sigma: matrix("sigma", Some(&a.sigma), m, big_n)?,
            b0: vector("b0", a.b0.as_ref(), n)?,
            b_y: matrix("b_y", a.b_y.as_ref(), n, n)?,
            b_v: vector("b_v", a.b_v.as_ref(), n)?,
            b_z: matrix("b_z", a.b_z.as_ref(), n, n)?,
            sigma_f: matrix("sigma_f", a.sigma_f.as_ref(), n, big_n)?,
            h0: a.h0,
            h_weights: vector("h_weights", Some(&h_weights), n)?,
        };
        let all = [
            model.r0, model.r_v, model.h0,
        ]
        .into_iter()
        .chain(model.r_y.iter().cloned())
        .chain(model.mu0.iter().cloned())
        .chain(model.sigma.iter().cloned())
        .chain(model.sigma_f.iter().cloned())
        .chain(model.b_y.iter().cloned());
        for x in all {
            if !x.is_finite() {
                return Err(Error::invalid("coefficients", "all entries must be finite"));
            }
        }
        Ok(model)
    }

    pub fn from_constant(c: &ConstantCoefficients, dims: ModelDims) -> Result<Self> {
        Self::new(
            &AffineCoefficients {
                r0: c.r,
                mu0: c.mu.clone(),
                sigma: c.sigma.clone(),
                b0: c.b.clone(),
                sigma_f: c.sigma_f.clone(),
                h_weights: c.h_weights.clone(),
                ..Default::default()
            },
            dims,
        )
    }

    fn z_vec(&self, s: &FactorState) -> DVector<f64> {
        if s.z.is_empty() {
            DVector::zeros(self.dims.n_factors)
        } else {
            DVector::from_column_slice(s.z)
        }
    }
}

impl Coefficients for AffineModel {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn rate(&self, s: &FactorState) -> f64 {
        let y = DVector::from_column_slice(s.y);
        self.r0 + self.r_y.dot(&y) + self.r_v * s.v + self.r_z.dot(&self.z_vec(s))
    }

    fn drift(&self, s: &FactorState) -> DVector<f64> {
        let y = DVector::from_column_slice(s.y);
        &self.mu0 + &self.mu_y * y + &self.mu_v * s.v + &self.mu_z * self.z_vec(s)
    }

    fn volatility(&self, _s: &FactorState) -> DMatrix<f64> {
        self.sigma.clone()
    }

    fn factor_drift(&self, s: &FactorState) -> DVector<f64> {
        let y = DVector::from_column_slice(s.y);
        &self.b0 + &self.b_y * y + &self.b_v * s.v + &self.b_z * self.z_vec(s)
    }

    fn factor_volatility(&self, _s: &FactorState) -> DMatrix<f64> {
        self.sigma_f.clone()
    }

    fn delay_transform(&self, y: &[f64]) -> f64 {
        self.h0 + self.h_weights.iter().zip(y).map(|(w, y)| w * y).sum::<f64>()
    }

    fn uses_pointwise_delay(&self) -> bool {
        self.r_z.iter().any(|&c| c != 0.0)
            || self.mu_z.iter().any(|&c| c != 0.0)
            || self.b_z.iter().any(|&c| c != 0.0)
    }

    fn market_is_constant(&self) -> bool {
        self.r_v == 0.0
            && self
                .r_y
                .iter()
                .chain(&self.r_z)
                .chain(&self.mu_y)
                .chain(&self.mu_v)
                .chain(&self.mu_z)
                .all(|&c| c == 0.0)
    }
}

/// One-dimensional infinite-delay LQ market:
/// `b + gamma_tilde theta sigma_F = alpha1 y + alpha2 v`,
/// `gamma r + gamma_tilde theta^2 / 2 = beta1 y^2 + beta2 v^2`, `h(y) = y`,
/// realised with a constant market price of risk `theta` and stock volatility `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqInfiniteCoefficients {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma_f: f64,
    pub sigma: f64,
    #[serde(default)]
    pub theta: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LqInfiniteModel {
    pub params: LqInfiniteCoefficients,
    pub gamma: f64,
}

impl LqInfiniteModel {
    pub fn new(params: LqInfiniteCoefficients, gamma: f64) -> Result<Self> {
        if params.sigma == 0.0 {
            return Err(Error::ZeroVolatility);
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("gamma", "need 0 < gamma < 1"));
        }
        Ok(Self { params, gamma })
    }

    fn gamma_tilde(&self) -> f64 {
        self.gamma / (1.0 - self.gamma)
    }
}

impl Coefficients for LqInfiniteModel {
    fn dims(&self) -> ModelDims {
        ModelDims { n_assets: 1, n_factors: 1, n_noise: 1 }
    }

    fn rate(&self, s: &FactorState) -> f64 {
        let p = &self.params;
        let (y, v) = (s.y[0], s.v);
        (p.beta1 * y * y + p.beta2 * v * v - 0.5 * self.gamma_tilde() * p.theta * p.theta)
            / self.gamma
    }

    fn drift(&self, s: &FactorState) -> DVector<f64> {
        DVector::from_element(1, self.rate(s) + self.params.sigma * self.params.theta)
    }

    fn volatility(&self, _s: &FactorState) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.params.sigma)
    }

    fn factor_drift(&self, s: &FactorState) -> DVector<f64> {
        let p = &self.params;
        DVector::from_element(
            1,
            p.alpha1 * s.y[0] + p.alpha2 * s.v - self.gamma_tilde() * p.theta * p.sigma_f,
        )
    }

    fn factor_volatility(&self, _s: &FactorState) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.params.sigma_f)
    }

    fn delay_transform(&self, y: &[f64]) -> f64 {
        y[0]
    }

    fn uses_pointwise_delay(&self) -> bool {
        false
    }
}

/// One-dimensional pointwise-delay LQ market:
/// `b + gamma_tilde theta sigma_F = alpha . (y, v, z)`,
/// `gamma r + gamma_tilde theta^2 / 2 = beta . (y, v, z)`, `h(y) = y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqPointwiseCoefficients {
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub sigma_f: f64,
    pub sigma: f64,
    #[serde(default)]
    pub theta: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LqPointwiseModel {
    pub params: LqPointwiseCoefficients,
    pub gamma: f64,
}

impl LqPointwiseModel {
    pub fn new(params: LqPointwiseCoefficients, gamma: f64) -> Result<Self> {
        if params.sigma == 0.0 {
            return Err(Error::ZeroVolatility);
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("gamma", "need 0 < gamma < 1"));
        }
        Ok(Self { params, gamma })
    }

    fn gamma_tilde(&self) -> f64 {
        self.gamma / (1.0 - self.gamma)
    }

    fn dot(c: &[f64; 3], s: &FactorState) -> f64 {
        c[0] * s.y[0] + c[1] * s.v + c[2] * s.z[0]
    }
}

impl Coefficients for LqPointwiseModel {
    fn dims(&self) -> ModelDims {
        ModelDims { n_assets: 1, n_factors: 1, n_noise: 1 }
    }

    fn rate(&self, s: &FactorState) -> f64 {
        let p = &self.params;
        (Self::dot(&p.beta, s) - 0.5 * self.gamma_tilde() * p.theta * p.theta) / self.gamma
    }

    fn drift(&self, s: &FactorState) -> DVector<f64> {
        DVector::from_element(1, self.rate(s) + self.params.sigma * self.params.theta)
    }

    fn volatility(&self, _s: &FactorState) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.params.sigma)
    }

    fn factor_drift(&self, s: &FactorState) -> DVector<f64> {
        let p = &self.params;
        DVector::from_element(
            1,
            Self::dot(&p.alpha, s) - self.gamma_tilde() * p.theta * p.sigma_f,
        )
    }

    fn factor_volatility(&self, _s: &FactorState) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.params.sigma_f)
    }

    fn delay_transform(&self, y: &[f64]) -> f64 {
        y[0]
    }

    fn uses_pointwise_delay(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Assumption probes
// ---------------------------------------------------------------------------

/// Axis-aligned box of factor states used for sampled assumption checks.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBox {
    pub y: (f64, f64),
    pub v: (f64, f64),
    pub z: (f64, f64),
}

impl Default for StateBox {
    fn default() -> Self {
        Self {
            y: (-2.0, 2.0),
            v: (-2.0, 2.0),
            z: (-2.0, 2.0),
        }
    }
}

pub fn sample_states(dims: ModelDims, with_z: bool, bounds: &StateBox, count: usize, seed: u64) -> Vec<OwnedState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.n_factors;
    (0..count)
        .map(|_| {
            let y = (0..n).map(|_| rng.random_range(bounds.y.0..=bounds.y.1)).collect();
            let v = rng.random_range(bounds.v.0..=bounds.v.1);
            let z = if with_z {
                (0..n).map(|_| rng.random_range(bounds.z.0..=bounds.z.1)).collect()
            } else {
                Vec::new()
            };
            OwnedState::new(y, v, z)
        })
        .collect()
}

/// Largest finite-difference slopes observed over the sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LipschitzEstimates {
    pub rate: f64,
    pub drift: f64,
    pub volatility: f64,
    pub factor_drift: f64,
    pub factor_volatility: f64,
    pub delay_transform: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub n_states: usize,
    pub min_rate: f64,
    pub max_rate: f64,
    pub max_condition: f64,
    pub lipschitz: LipschitzEstimates,
    pub violations: Vec<String>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Probes nonnegativity of `r`, conditioning of `sigma sigma^T` and
/// first-difference slopes on a sample of states. Report only.
pub fn check_assumptions(coeffs: &dyn Coefficients, states: &[OwnedState]) -> AssumptionReport {
    let mut min_rate = f64::INFINITY;
    let mut max_rate = f64::NEG_INFINITY;
    let mut max_condition: f64 = 0.0;
    let mut lip = LipschitzEstimates::default();
    let mut non_finite = false;

    for st in states {
        let s = st.as_state();
        let r = coeffs.rate(&s);
        if !r.is_finite() {
            non_finite = true;
        }
        min_rate = min_rate.min(r);
        max_rate = max_rate.max(r);
        let cond = match covariance_inverse(&coeffs.volatility(&s), f64::INFINITY) {
            Ok((_, c)) => c,
            Err(_) => f64::INFINITY,
        };
        max_condition = max_condition.max(cond);

        // Central differences along every coordinate of (y, v, z).
        let n_coords = st.y.len() + 1 + st.z.len();
        for coord in 0..n_coords {
            let base = coordinate(st, coord);
            let step = 1e-5 * base.abs().max(1.0);
            let plus = shifted(st, coord, step);
            let minus = shifted(st, coord, -step);
            let (p, m) = (plus.as_state(), minus.as_state());
            let scale = 1.0 / (2.0 * step);
            lip.rate = lip.rate.max((coeffs.rate(&p) - coeffs.rate(&m)).abs() * scale);
            lip.drift = lip.drift.max(max_abs_diff_vec(&coeffs.drift(&p), &coeffs.drift(&m)) * scale);
            lip.volatility = lip
                .volatility
                .max(max_abs_diff_mat(&coeffs.volatility(&p), &coeffs.volatility(&m)) * scale);
            lip.factor_drift = lip.factor_drift.max(
                max_abs_diff_vec(&coeffs.factor_drift(&p), &coeffs.factor_drift(&m)) * scale,
            );
            lip.factor_volatility = lip.factor_volatility.max(
                max_abs_diff_mat(&coeffs.factor_volatility(&p), &coeffs.factor_volatility(&m))
                    * scale,
            );
            if coord < st.y.len() {
                lip.delay_transform = lip
                    .delay_transform
                    .max((coeffs.delay_transform(&plus.y) - coeffs.delay_transform(&minus.y)).abs() * scale);
            }
        }
    }

    let mut violations = Vec::new();
    if states.is_empty() {
        violations.push("empty state sample".to_string());
    }
    if non_finite {
        violations.push("non-finite interest rate".to_string());
    }
    if min_rate < 0.0 {
        violations.push(format!("interest rate is negative (min r = {min_rate})"));
    }
    if !(max_condition <= DEFAULT_CONDITION_THRESHOLD) {
        violations.push(format!(
            "sigma sigma^T is ill-conditioned (max condition number {max_condition:e})"
        ));
    }
    AssumptionReport {
        n_states: states.len(),
        min_rate,
        max_rate,
        max_condition,
        lipschitz: lip,
        violations,
    }
}

fn coordinate(st: &OwnedState, coord: usize) -> f64 {
    let n = st.y.len();
    if coord < n {
        st.y[coord]
    } else if coord == n {
        st.v
    } else {
        st.z[coord - n - 1]
    }
}

fn shifted(st: &OwnedState, coord: usize, by: f64) -> OwnedState {
    let mut out = st.clone();
    let n = st.y.len();
    if coord < n {
        out.y[coord] += by;
    } else if coord == n {
        out.v += by;
    } else {
        out.z[coord - n - 1] += by;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_d(r: f64, mu: f64, sigma: f64) -> AffineModel {
        AffineModel::from_constant(
            &ConstantCoefficients {
                r,
                mu: vec![mu],
                sigma: vec![vec![sigma]],
                b: None,
                sigma_f: None,
                h_weights: None,
            },
            ModelDims::new(1, 1, 1).unwrap(),
        )
        .unwrap()
    }

    fn state() -> OwnedState {
        OwnedState::new(vec![0.3], 0.1, vec![-0.2])
    }

    #[test]
    fn constant_market_is_detected() {
        assert!(one_d(0.03, 0.08, 0.2).market_is_constant());
        let dims = ModelDims::new(1, 1, 1).unwrap();
        let moving = AffineModel::new(
            &AffineCoefficients {
                r0: 0.03,
                r_y: Some(vec![0.01]),
                mu0: vec![0.08],
                sigma: vec![vec![0.2]],
                ..Default::default()
            },
            dims,
        )
        .unwrap();
        assert!(!moving.market_is_constant());
        let factor_only = AffineModel::new(
            &AffineCoefficients {
                r0: 0.03,
                mu0: vec![0.08],
                sigma: vec![vec![0.2]],
                b_y: Some(vec![vec![-1.0]]),
                ..Default::default()
            },
            dims,
        )
        .unwrap();
        assert!(factor_only.market_is_constant());
    }

    #[test]
    fn theta_one_dimensional() {
        let c = one_d(0.03, 0.08, 0.2);
        let th = eval_theta(&c, &state().as_state()).unwrap();
        assert_abs_diff_eq!(th[0], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn theta_vanishes_without_excess_return() {
        let c = one_d(0.05, 0.05, 0.3);
        let th = eval_theta(&c, &state().as_state()).unwrap();
        assert_eq!(th[0], 0.0);
    }

    #[test]
    fn theta_and_projection_with_extra_noise() {
        let c = AffineModel::from_constant(
            &ConstantCoefficients {
                r: 0.03,
                mu: vec![0.08],
                sigma: vec![vec![0.2, 0.0]],
                b: None,
                sigma_f: None,
                h_weights: None,
            },
            ModelDims::new(1, 1, 2).unwrap(),
        )
        .unwrap();
        let snap = MarketSnapshot::evaluate(&c, &state().as_state()).unwrap();
        assert_abs_diff_eq!(snap.theta[0], 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(snap.theta[1], 0.0, epsilon = 1e-14);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((snap.projection - expected).amax() < 1e-14);
    }

    #[test]
    fn square_projection_is_identity() {
        let c = one_d(0.01, 0.1, 0.4);
        let p = eval_projection(&c, &state().as_state()).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_volatility_is_singular() {
        let c = one_d(0.01, 0.1, 0.0);
        assert!(matches!(
            eval_theta(&c, &state().as_state()),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn assumption_checks() {
        let dims = ModelDims::new(1, 1, 1).unwrap();
        let states = sample_states(dims, true, &StateBox::default(), 50, 7);

        let ok = check_assumptions(&one_d(0.03, 0.08, 0.2), &states);
        assert!(ok.passed(), "{:?}", ok.violations);
        assert_eq!(ok.lipschitz.rate, 0.0);

        let negative = check_assumptions(&one_d(-1.0, 0.08, 0.2), &states);
        assert!(negative.violations.iter().any(|v| v.contains("negative")));

        let singular = check_assumptions(&one_d(0.03, 0.08, 0.0), &states);
        assert!(singular.violations.iter().any(|v| v.contains("ill-conditioned")));
    }

    #[test]
    fn affine_slopes_are_recovered() {
        let dims = ModelDims::new(1, 1, 1).unwrap();
        let c = AffineModel::new(
            &AffineCoefficients {
                r0: 0.02,
                r_y: Some(vec![0.5]),
                mu0: vec![0.1],
                mu_v: Some(vec![-1.5]),
                sigma: vec![vec![0.3]],
                b_z: Some(vec![vec![2.0]]),
                sigma_f: Some(vec![vec![0.4]]),
                ..Default::default()
            },
            dims,
        )
        .unwrap();
        let states = sample_states(dims, true, &StateBox::default(), 20, 3);
        let rep = check_assumptions(&c, &states);
        assert_abs_diff_eq!(rep.lipschitz.rate, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(rep.lipschitz.drift, 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(rep.lipschitz.factor_drift, 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(rep.lipschitz.delay_transform, 1.0, epsilon = 1e-6);
        assert!(c.uses_pointwise_delay());
    }

    #[test]
    fn utility_basics() {
        let u = PowerUtility::new(0.5, 4.0).unwrap();
        assert_abs_diff_eq!(u.initial_value(), 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(u.gamma_tilde(), 1.0, epsilon = 1e-14);
        assert!(PowerUtility::new(1.0, 1.0).is_err());
        assert!(PowerUtility::new(0.5, 0.0).is_err());
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims::new(2, 1, 1).is_err());
        assert!(ModelDims::new(1, 0, 1).is_err());
        assert!(ModelDims::new(2, 1, 2).unwrap().is_complete());
        assert!(!ModelDims::new(1, 1, 2).unwrap().is_complete());
    }
}
