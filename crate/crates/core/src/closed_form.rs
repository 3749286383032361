//! Explicitly solvable linear-quadratic cases.
//!
//! Infinite delay: `η(t, y, v) = ½ψ₁y² + ½ψ₂v² + ψ₃yv + ψ₄` with `ψᵢ` from a
//! Riccati system integrated backward from `ψᵢ(T) = 0`.
//!
//! Pointwise delay: `η(t, y, v) = Q(t)(y + e^{λδ}α₃v) - (β₃/α₃) y + ψ(t)`
//! with `Q(t) = e^{T-t} - 1`, under four linear constraints on `(α, β)`.
//!
//! In both cases `q̂ = σ_F ∂_y η`.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay_sde::{McConfig, TimeGrid};
use crate::error::{Error, Result};
use crate::fbsde_solver::{AdjointSolution, StrategyTerms, MAX_EXPONENT};
use crate::market_model::{
    Coefficients, FactorState, LqInfiniteCoefficients, LqPointwiseCoefficients, MarketSnapshot,
    OwnedState,
};
use crate::stats::mean_se_paired;

/// `|ψ|` above this is treated as finite-time blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e8;

/// Parameters of the infinite-delay Riccati system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiccatiParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sigma_f: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub horizon: f64,
}

impl RiccatiParams {
    /// The parameter set plotted in the reference figure.
    pub fn figure1() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            beta1: -2.0,
            beta2: -2.0,
            sigma_f: 1.0,
            lambda: 1.0,
            gamma: 0.5,
            horizon: 1.0,
        }
    }

    pub fn from_model(c: &LqInfiniteCoefficients, lambda: f64, gamma: f64, horizon: f64) -> Self {
        Self {
            alpha1: c.alpha1,
            alpha2: c.alpha2,
            beta1: c.beta1,
            beta2: c.beta2,
            sigma_f: c.sigma_f,
            lambda,
            gamma,
            horizon,
        }
    }

    /// `dψ/dt` for `ψ = (ψ₁, ψ₂, ψ₃, ψ₄)`.
    pub fn rhs(&self, psi: &[f64; 4]) -> [f64; 4] {
        let [p1, p2, p3, _] = *psi;
        let s = self.sigma_f * self.sigma_f / (1.0 - self.gamma);
        [
            -2.0 * self.alpha1 * p1 - s * p1 * p1 - 2.0 * p3 - 2.0 * self.beta1,
            2.0 * self.lambda * p2 - 2.0 * self.alpha2 * p3 - s * p3 * p3 - 2.0 * self.beta2,
            (self.lambda - self.alpha1) * p3 - s * p1 * p3 - self.alpha2 * p1 - p2,
            -0.5 * self.sigma_f * self.sigma_f * p1,
        ]
    }
}

/// `ψᵢ` on an ascending time grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiccatiSolution {
    pub params: RiccatiParams,
    pub times: Vec<f64>,
    pub psi: Vec<[f64; 4]>,
}

fn rk4_step(p: &RiccatiParams, y: &[f64; 4], h: f64) -> [f64; 4] {
    // Backward in time: t -> t - h.
    let add = |a: &[f64; 4], b: &[f64; 4], s: f64| -> [f64; 4] {
        [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2], a[3] + s * b[3]]
    };
    let k1 = p.rhs(y);
    let k2 = p.rhs(&add(y, &k1, -h / 2.0));
    let k3 = p.rhs(&add(y, &k2, -h / 2.0));
    let k4 = p.rhs(&add(y, &k3, -h));
    let mut out = *y;
    for i in 0..4 {
        out[i] -= h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn exploded(y: &[f64; 4]) -> bool {
    y.iter().any(|v| !(v.abs() <= BLOW_UP_THRESHOLD))
}

/// RK4 backward from `ψ(T) = 0`, requiring `β₁ < 0`.
pub fn solve_riccati(params: &RiccatiParams, steps: usize) -> Result<RiccatiSolution> {
    if !(params.beta1 < 0.0) {
        return Err(Error::Constraint(format!("need beta1 < 0, got {}", params.beta1)));
    }
    integrate_riccati(params, steps)
}

/// RK4 backward from `ψ(T) = 0` without the sign requirement on `β₁`.
/// On blow-up the crossing time is located by bisection on the last step.
pub fn integrate_riccati(params: &RiccatiParams, steps: usize) -> Result<RiccatiSolution> {
    let grid = TimeGrid::new(params.horizon, steps)?;
    if !(params.gamma > 0.0 && params.gamma < 1.0) {
        return Err(Error::invalid("gamma", "need 0 < gamma < 1"));
    }
    let h = grid.dt();
    let mut psi = vec![[0.0; 4]; steps + 1];
    for k in (0..steps).rev() {
        let next = rk4_step(params, &psi[k + 1], h);
        if exploded(&next) {
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if exploded(&rk4_step(params, &psi[k + 1], mid)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Err(Error::BlowUp {
                time: grid.time(k + 1) - hi,
            });
        }
        psi[k] = next;
    }
    Ok(RiccatiSolution {
        params: *params,
        times: (0..=steps).map(|k| grid.time(k)).collect(),
        psi,
    })
}

/// `η` and `∂_y η`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EtaValue {
    pub eta: f64,
    pub grad_y: f64,
}

impl RiccatiSolution {
    /// `ψ(t)` by linear interpolation between grid nodes.
    pub fn psi_at(&self, t: f64) -> Result<[f64; 4]> {
        let horizon = self.params.horizon;
        let tol = 1e-12 * horizon.max(1.0);
        if !(t >= -tol && t <= horizon + tol) {
            return Err(Error::OutOfRange { time: t, horizon });
        }
        let n = self.times.len() - 1;
        let h = horizon / n as f64;
        let x = (t / h).clamp(0.0, n as f64);
        let j = (x.floor() as usize).min(n - 1);
        let w = x - j as f64;
        let (a, b) = (&self.psi[j], &self.psi[j + 1]);
        Ok([0, 1, 2, 3].map(|i| (1.0 - w) * a[i] + w * b[i]))
    }

    pub fn eta(&self, t: f64, y: f64, v: f64) -> Result<EtaValue> {
        let [p1, p2, p3, p4] = self.psi_at(t)?;
        Ok(EtaValue {
            eta: 0.5 * p1 * y * y + 0.5 * p2 * v * v + p3 * y * v + p4,
            grad_y: p1 * y + p3 * v,
        })
    }

    /// CSV rows `t, psi1..psi4`.
    pub fn rows(&self) -> impl Iterator<Item = [f64; 5]> + '_ {
        self.times
            .iter()
            .zip(&self.psi)
            .map(|(&t, p)| [t, p[0], p[1], p[2], p[3]])
    }
}

/// Two-term strategy of the one-dimensional LQ cases:
/// `(μ - r) / ((1-γ) σ²) + σ_F ∂_yη / ((1-γ) σ)`.
pub fn lq_pi(excess: f64, sigma: f64, sigma_f: f64, grad_y: f64, gamma: f64) -> Result<StrategyTerms> {
    if sigma == 0.0 {
        return Err(Error::ZeroVolatility);
    }
    Ok(StrategyTerms {
        merton: DVector::from_element(1, excess / ((1.0 - gamma) * sigma * sigma)),
        hedging: DVector::from_element(1, sigma_f * grad_y / ((1.0 - gamma) * sigma)),
    })
}

fn scalar_market(coeffs: &dyn Coefficients, s: &FactorState) -> (f64, f64, f64) {
    let mu = coeffs.drift(s)[0];
    let r = coeffs.rate(s);
    let sigma = coeffs.volatility(s)[(0, 0)];
    let sigma_f = coeffs.factor_volatility(s)[(0, 0)];
    (mu - r, sigma, sigma_f)
}

fn require_scalar(coeffs: &dyn Coefficients) -> Result<()> {
    let d = coeffs.dims();
    if d.n_assets != 1 || d.n_factors != 1 || d.n_noise != 1 {
        return Err(Error::invalid("dims", "closed forms need m = n = N = 1"));
    }
    Ok(())
}

pub fn optimal_pi_infinite(
    sol: &RiccatiSolution,
    coeffs: &dyn Coefficients,
    t: f64,
    y: f64,
    v: f64,
) -> Result<StrategyTerms> {
    require_scalar(coeffs)?;
    let e = sol.eta(t, y, v)?;
    let yy = [y];
    let s = FactorState { y: &yy, v, z: &[] };
    let (excess, sigma, sigma_f) = scalar_market(coeffs, &s);
    lq_pi(excess, sigma, sigma_f, e.grad_y, sol.params.gamma)
}

impl AdjointSolution for RiccatiSolution {
    fn p_hat(&self, _k: usize, t: f64, s: &FactorState) -> f64 {
        self.eta(t, s.y[0], s.v).map(|e| e.eta).unwrap_or(f64::NAN)
    }

    fn q_hat(&self, _k: usize, t: f64, s: &FactorState) -> DVector<f64> {
        let g = self.eta(t, s.y[0], s.v).map(|e| e.grad_y).unwrap_or(f64::NAN);
        DVector::from_element(1, self.params.sigma_f * g)
    }
}

/// Monte Carlo estimate of `η` with its propagated standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FeynmanKacEstimate {
    pub eta: f64,
    pub se: f64,
    /// Mean and standard error of the inner expectation.
    pub inner_mean: f64,
    pub inner_se: f64,
    pub max_exponent: f64,
}

/// `η(t, y, v) = (1-γ) log E[exp ∫_t^T (γ̃ r + ½ γ̃ |θ|² / (1-γ)) ds]` under the
/// tilted factor `dỸ = (b + γ̃ σ_F θ) ds + σ_F dW` and `dV = (h(Ỹ) - λV) ds`.
///
/// Euler for `Ỹ`, exponential integrator for `V`, trapezoidal time integral.
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_eta(
    coeffs: &dyn Coefficients,
    lambda: f64,
    gamma: f64,
    horizon: f64,
    t: f64,
    y: &[f64],
    v: f64,
    steps: usize,
    mc: &McConfig,
) -> Result<FeynmanKacEstimate> {
    if coeffs.uses_pointwise_delay() {
        return Err(Error::invalid("coefficients", "the representation needs coefficients free of Z"));
    }
    if !(t >= 0.0 && t <= horizon) {
        return Err(Error::OutOfRange { time: t, horizon });
    }
    let n = coeffs.dims().n_factors;
    if y.len() != n {
        return Err(Error::invalid("y", "length must equal n_factors"));
    }
    let nn = coeffs.dims().n_noise;
    let gt = gamma / (1.0 - gamma);
    let span = horizon - t;
    let dt = span / steps.max(1) as f64;
    let sqrt_dt = dt.sqrt();
    let decay = (-lambda * dt).exp();
    let a = lambda * dt;
    let w0 = if a < 1e-4 { dt * (0.5 - a / 6.0) } else { (1.0 - (-a).exp() * (1.0 + a)) / (lambda * a) };
    let w1 = if a < 1e-8 { dt - w0 } else { (1.0 - decay) / lambda - w0 };

    let integrand = |s: &FactorState| -> Result<(f64, DVector<f64>)> {
        let snap = MarketSnapshot::evaluate(coeffs, s)?;
        let th2 = snap.theta.norm_squared();
        Ok((gt * snap.rate + 0.5 * gt * th2 / (1.0 - gamma), snap.theta))
    };

    let run = |p: usize| -> Result<(f64, f64)> {
        let mut rng = mc.rng_for(p);
        let sign = mc.sign_for(p);
        let mut yy = y.to_vec();
        let mut vv = v;
        let mut ynew = vec![0.0; n];
        let mut noise = DVector::<f64>::zeros(nn);
        let s0 = FactorState { y: &yy, v: vv, z: &[] };
        let (mut g_prev, mut th) = integrand(&s0)?;
        let mut expo = 0.0;
        let mut max_expo: f64 = 0.0;
        if span > 0.0 {
            for _ in 0..steps {
                let s = FactorState { y: &yy, v: vv, z: &[] };
                let b = coeffs.factor_drift(&s);
                let sf = coeffs.factor_volatility(&s);
                for e in noise.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *e = sign * g * sqrt_dt;
                }
                let tilt = &sf * &th * gt;
                let diff = &sf * &noise;
                for i in 0..n {
                    ynew[i] = yy[i] + (b[i] + tilt[i]) * dt + diff[i];
                }
                let h0 = coeffs.delay_transform(&yy);
                let h1 = coeffs.delay_transform(&ynew);
                vv = decay * vv + w0 * h0 + w1 * h1;
                std::mem::swap(&mut yy, &mut ynew);
                let s1 = FactorState { y: &yy, v: vv, z: &[] };
                let (g_next, th_next) = integrand(&s1)?;
                expo += 0.5 * (g_prev + g_next) * dt;
                max_expo = max_expo.max(expo.abs());
                if expo.abs() > MAX_EXPONENT || !expo.is_finite() {
                    return Err(Error::Overflow { max_exponent: expo.abs() });
                }
                g_prev = g_next;
                th = th_next;
            }
        }
        Ok((expo.exp(), max_expo))
    };

    let results: Vec<Result<(f64, f64)>> = (0..mc.n_paths).into_par_iter().map(run).collect();
    let mut vals = Vec::with_capacity(mc.n_paths);
    let mut max_exponent: f64 = 0.0;
    for r in results {
        let (x, m) = r?;
        vals.push(x);
        max_exponent = max_exponent.max(m);
    }
    let est = mean_se_paired(&vals, mc.antithetic);
    Ok(FeynmanKacEstimate {
        eta: (1.0 - gamma) * est.mean.ln(),
        se: (1.0 - gamma) * est.se / est.mean,
        inner_mean: est.mean,
        inner_se: est.se,
        max_exponent,
    })
}

/// Parameters of the pointwise-delay closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointwiseParams {
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub sigma_f: f64,
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
    pub horizon: f64,
}

impl PointwiseParams {
    pub fn from_model(c: &LqPointwiseCoefficients, lambda: f64, delta: f64, gamma: f64, horizon: f64) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            sigma_f: c.sigma_f,
            lambda,
            delta,
            gamma,
            horizon,
        }
    }
}

/// Residuals of the four identities
/// `α₁ + e^{λδ}α₃ = 1`, `-α₁β₃/α₃ + β₁ = 1`,
/// `α₂ - λe^{λδ}α₃ = α₃e^{λδ}`, `-α₂β₃/α₃ + β₂ = α₃e^{λδ}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub residuals: [f64; 4],
    pub passed: bool,
}

pub const CONSTRAINT_TOL: f64 = 1e-10;

pub fn check_pointwise_constraints(p: &PointwiseParams) -> Result<ConstraintReport> {
    let [a1, a2, a3] = p.alpha;
    let [b1, b2, b3] = p.beta;
    if a3 == 0.0 {
        return Err(Error::invalid("alpha3", "must be nonzero"));
    }
    if !(p.delta.is_finite() && p.delta > 0.0) {
        return Err(Error::invalid("delta", "the pointwise closed form needs a finite delay"));
    }
    let e = (p.lambda * p.delta).exp();
    let ratio = b3 / a3;
    let residuals = [
        a1 + e * a3 - 1.0,
        -a1 * ratio + b1 - 1.0,
        a2 - p.lambda * e * a3 - a3 * e,
        -a2 * ratio + b2 - a3 * e,
    ];
    Ok(ConstraintReport {
        residuals,
        passed: residuals.iter().all(|r| r.abs() < CONSTRAINT_TOL),
    })
}

/// Evaluators of the pointwise-delay closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PointwiseSolution {
    pub params: PointwiseParams,
    /// `β₃ / α₃`
    pub ratio: f64,
    pub constraints: ConstraintReport,
}

pub fn pointwise_solution(params: &PointwiseParams) -> Result<PointwiseSolution> {
    if !(params.gamma > 0.0 && params.gamma < 1.0) {
        return Err(Error::invalid("gamma", "need 0 < gamma < 1"));
    }
    let report = check_pointwise_constraints(params)?;
    if !report.passed {
        return Err(Error::Constraint(format!(
            "pointwise identities violated, residuals {:?}",
            report.residuals
        )));
    }
    Ok(PointwiseSolution {
        params: *params,
        ratio: params.beta[2] / params.alpha[2],
        constraints: report,
    })
}

impl PointwiseSolution {
    fn tau(&self, t: f64) -> f64 {
        self.params.horizon - t
    }

    /// `Q(t) = e^{T-t} - 1`
    pub fn q_fn(&self, t: f64) -> f64 {
        self.tau(t).exp_m1()
    }

    /// `ψ(t) = σ_F²/(2(1-γ)) {½(e^{2(T-t)} - 1) + 2c(1 - e^{T-t}) + c²(T-t)}`, `c = 1 + β₃/α₃`.
    pub fn psi(&self, t: f64) -> f64 {
        let p = &self.params;
        let tau = self.tau(t);
        let c = 1.0 + self.ratio;
        p.sigma_f * p.sigma_f / (2.0 * (1.0 - p.gamma))
            * (0.5 * (2.0 * tau).exp_m1() - 2.0 * c * tau.exp_m1() + c * c * tau)
    }

    /// `η(t, y, v)`
    pub fn p_hat(&self, t: f64, y: f64, v: f64) -> f64 {
        let p = &self.params;
        let e = (p.lambda * p.delta).exp();
        self.q_fn(t) * (y + e * p.alpha[2] * v) - self.ratio * y + self.psi(t)
    }

    /// `∂_y η = e^{T-t} - 1 - β₃/α₃`
    pub fn grad_y(&self, t: f64) -> f64 {
        self.q_fn(t) - self.ratio
    }

    /// `q̂(t) = σ_F (e^{T-t} - 1 - β₃/α₃)`, the same on every path.
    pub fn q_hat(&self, t: f64) -> f64 {
        self.params.sigma_f * self.grad_y(t)
    }

    /// Time at which the hedging term changes sign, when it lies in `[0, T)`.
    pub fn sign_change_time(&self) -> Option<f64> {
        let c = 1.0 + self.ratio;
        if c <= 0.0 {
            return None;
        }
        let t = self.params.horizon - c.ln();
        (t >= 0.0 && t < self.params.horizon).then_some(t)
    }

    /// CSV rows `t, Q, psi, qhat` on a grid.
    pub fn rows(&self, steps: usize) -> Vec<[f64; 4]> {
        let h = self.params.horizon / steps as f64;
        (0..=steps)
            .map(|k| {
                let t = if k == steps { self.params.horizon } else { k as f64 * h };
                [t, self.q_fn(t), self.psi(t), self.q_hat(t)]
            })
            .collect()
    }

    /// Grouped PDE residual at `(t, y, v, z)`, derivatives taken analytically.
    pub fn pde_residual(&self, t: f64, y: f64, v: f64, z: f64) -> f64 {
        let p = &self.params;
        let [a1, a2, a3] = p.alpha;
        let [b1, b2, b3] = p.beta;
        let e = (p.lambda * p.delta).exp();
        let tau = self.tau(t);
        let c = 1.0 + self.ratio;
        let eta_y = self.grad_y(t);
        let eta_v = self.q_fn(t) * e * a3;
        let dpsi = -p.sigma_f * p.sigma_f / (2.0 * (1.0 - p.gamma)) * (tau.exp() - c).powi(2);
        let eta_t = -tau.exp() * (y + e * a3 * v) + dpsi;
        let s2 = p.sigma_f * p.sigma_f;
        eta_t
            + (a1 * eta_y + eta_v + b1) * y
            + (a2 * eta_y - p.lambda * eta_v + b2) * v
            + (a3 * eta_y - (-p.lambda * p.delta).exp() * eta_v + b3) * z
            + 0.5 * s2 * eta_y * eta_y / (1.0 - p.gamma)
    }
}

pub fn pointwise_pi(
    sol: &PointwiseSolution,
    coeffs: &dyn Coefficients,
    t: f64,
    state: &OwnedState,
) -> Result<StrategyTerms> {
    require_scalar(coeffs)?;
    let (excess, sigma, sigma_f) = scalar_market(coeffs, &state.as_state());
    lq_pi(excess, sigma, sigma_f, sol.grad_y(t), sol.params.gamma)
}

impl AdjointSolution for PointwiseSolution {
    fn p_hat(&self, _k: usize, t: f64, s: &FactorState) -> f64 {
        PointwiseSolution::p_hat(self, t, s.y[0], s.v)
    }

    fn q_hat(&self, _k: usize, t: f64, _s: &FactorState) -> DVector<f64> {
        DVector::from_element(1, PointwiseSolution::q_hat(self, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{E, LN_2};

    fn pointwise() -> PointwiseParams {
        PointwiseParams {
            alpha: [0.5, 1.0, 0.25],
            beta: [0.5, -0.5, -0.25],
            sigma_f: 1.0,
            lambda: 1.0,
            delta: LN_2,
            gamma: 0.5,
            horizon: 1.0,
        }
    }

    #[test]
    fn constraint_examples() {
        let r = check_pointwise_constraints(&pointwise()).unwrap();
        assert!(r.passed, "{:?}", r.residuals);
        let mut bad = pointwise();
        bad.alpha[0] = 0.6;
        let r = check_pointwise_constraints(&bad).unwrap();
        assert!(!r.passed);
        assert_abs_diff_eq!(r.residuals[0], 0.1, epsilon = 1e-12);
        bad.alpha[2] = 0.0;
        assert!(check_pointwise_constraints(&bad).is_err());
        assert!(pointwise_solution(&{
            let mut p = pointwise();
            p.alpha[0] = 0.6;
            p
        })
        .is_err());
    }

    #[test]
    fn pointwise_examples() {
        let s = pointwise_solution(&pointwise()).unwrap();
        assert_eq!(s.q_fn(1.0), 0.0);
        assert_eq!(s.psi(1.0), 0.0);
        assert_abs_diff_eq!(s.q_hat(1.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.q_hat(0.0), E, epsilon = 1e-14);
        assert_abs_diff_eq!(s.psi(0.0), (E * E - 1.0) / 2.0, epsilon = 1e-13);
    }

    #[test]
    fn pointwise_strategy_examples() {
        let terms = lq_pi(0.0, 0.2, 1.0, E, 0.5).unwrap();
        assert_abs_diff_eq!(terms.hedging[0], 27.182_818_284_590_45, epsilon = 1e-10);
        assert!(lq_pi(0.05, 0.0, 1.0, 1.0, 0.5).is_err());
        // β₃/α₃ < 0: hedging demand positive everywhere before T.
        let s = pointwise_solution(&pointwise()).unwrap();
        assert!(s.sign_change_time().is_none());
        assert!((0..100).all(|k| s.grad_y(k as f64 / 100.0) > 0.0));
    }

    #[test]
    fn hedging_vanishes_at_sign_change() {
        // Any constraint-satisfying set with β₃/α₃ = e^{0.5} - 1 > 0.
        let lambda = 1.0;
        let delta = LN_2;
        let e = 2.0;
        let a3 = 0.2;
        let ratio = 0.5f64.exp() - 1.0;
        let b3 = ratio * a3;
        let a1 = 1.0 - e * a3;
        let b1 = 1.0 + a1 * ratio;
        let a2 = lambda * e * a3 + a3 * e;
        let b2 = a3 * e + a2 * ratio;
        let p = PointwiseParams {
            alpha: [a1, a2, a3],
            beta: [b1, b2, b3],
            sigma_f: 1.0,
            lambda,
            delta,
            gamma: 0.5,
            horizon: 1.0,
        };
        let s = pointwise_solution(&p).unwrap();
        let t = s.sign_change_time().unwrap();
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-12);
        assert!(s.grad_y(t).abs() < 1e-12);
    }

    #[test]
    fn riccati_terminal_and_sign() {
        let sol = solve_riccati(&RiccatiParams::figure1(), 1000).unwrap();
        assert_eq!(sol.psi[1000], [0.0; 4]);
        for p in &sol.psi[..1000] {
            assert!(p[0] < 0.0 && p[2] < 0.0);
        }
    }

    #[test]
    fn riccati_constraint_and_blow_up() {
        let mut p = RiccatiParams::figure1();
        p.beta1 = 0.5;
        assert!(matches!(solve_riccati(&p, 100), Err(Error::Constraint(_))));
        // Strong positive running reward drives ψ₁ through the quadratic term.
        p.beta1 = 40.0;
        p.horizon = 5.0;
        match integrate_riccati(&p, 1000) {
            Err(Error::BlowUp { time }) => assert!(time > 0.0 && time < 5.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn eta_examples() {
        let sol = solve_riccati(&RiccatiParams::figure1(), 200).unwrap();
        let end = sol.eta(1.0, 0.7, -0.3).unwrap();
        assert_eq!(end, EtaValue { eta: 0.0, grad_y: 0.0 });
        let psi0 = sol.psi_at(0.0).unwrap();
        let origin = sol.eta(0.0, 0.0, 0.0).unwrap();
        assert_eq!(origin.eta, psi0[3]);
        assert_eq!(origin.grad_y, 0.0);
        let one = sol.eta(0.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(one.eta, 0.5 * psi0[0] + 0.5 * psi0[1] + psi0[2] + psi0[3], epsilon = 1e-15);
        assert!(matches!(sol.eta(1.5, 0.0, 0.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn pde_residual_vanishes() {
        let s = pointwise_solution(&pointwise()).unwrap();
        for i in 0..20 {
            let x = i as f64;
            let r = s.pde_residual((x * 0.37).fract(), x.sin() * 2.0, x.cos(), (x * 1.7).sin());
            assert!(r.abs() < 1e-10, "{r}");
        }
    }
}
