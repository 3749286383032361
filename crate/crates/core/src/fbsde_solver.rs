//! Quadratic adjoint BSDE `dp̂ = -f(t, q̂) dt + q̂ dW`, `p̂(T) = 0`, solved by
//! least-squares Monte Carlo, and the strategy it induces:
//!
//! `f(t, q) = γ r + ½ γ̃ |θ|² + ½ q*(I + γ̃ σ̃) q + γ̃ θ* q`,
//! `π̂ = (σσ*)⁻¹ (μ - r 1 + σ q̂) / (1 - γ)`,
//! `E[U(X^π̂(T))] = U(x) exp(p̂(0))`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::delay_sde::{
    simulate_factors, DelaySpec, FactorPaths, McConfig, Strategy, StrategyContext, TimeGrid, BLOCK,
};
use crate::error::{Error, Result};
use crate::market_model::{Coefficients, FactorState, MarketSnapshot, PowerUtility};
use crate::regression::{fit, BasisSpec, Inputs, RegressionFit};

/// Exponents above this are reported as overflow.
pub const MAX_EXPONENT: f64 = 700.0;

/// `γ r + ½ γ̃ |θ|²`, the part of the driver free of `q̂`.
pub fn driver_base(gamma: f64, market: &MarketSnapshot) -> f64 {
    let gt = gamma / (1.0 - gamma);
    gamma * market.rate + 0.5 * gt * market.theta.norm_squared()
}

/// The driver `f(t, q̂)`.
pub fn driver_f(gamma: f64, market: &MarketSnapshot, q: &DVector<f64>) -> f64 {
    let gt = gamma / (1.0 - gamma);
    let pq = &market.projection * q;
    driver_base(gamma, market) + 0.5 * (q.norm_squared() + gt * q.dot(&pq)) + gt * market.theta.dot(q)
}

/// Minimizer of `f(t, ·)`: `-γ θ`, since `σ̃ θ = θ`.
pub fn driver_minimizer(gamma: f64, market: &MarketSnapshot) -> DVector<f64> {
    -gamma * &market.theta
}

/// Strategy split into its myopic and hedging parts.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyTerms {
    /// `(σσ*)⁻¹(μ - r 1) / (1 - γ)`
    pub merton: DVector<f64>,
    /// `(σσ*)⁻¹ σ q̂ / (1 - γ)`
    pub hedging: DVector<f64>,
}

impl StrategyTerms {
    pub fn total(&self) -> DVector<f64> {
        &self.merton + &self.hedging
    }
}

pub fn optimal_pi_from_qhat(gamma: f64, market: &MarketSnapshot, q: &DVector<f64>) -> StrategyTerms {
    let scale = 1.0 / (1.0 - gamma);
    StrategyTerms {
        merton: &market.cov_inv * &market.excess * scale,
        hedging: &market.cov_inv * (&market.volatility * q) * scale,
    }
}

/// `U(x) exp(p̂(0))`.
pub fn value_at_zero(p_hat_0: f64, utility: &PowerUtility) -> f64 {
    utility.initial_value() * p_hat_0.exp()
}

/// Anything that provides the adjoint pair along simulated paths.
pub trait AdjointSolution: Send + Sync {
    /// `p̂` at grid step `k` and state.
    fn p_hat(&self, k: usize, t: f64, state: &FactorState) -> f64;
    /// `q̂` at grid step `k` and state, length N.
    fn q_hat(&self, k: usize, t: f64, state: &FactorState) -> DVector<f64>;
}

/// `π̂` built from an adjoint solution, optionally corrupted for negative controls.
pub struct AdjointStrategy<'a> {
    pub solution: &'a dyn AdjointSolution,
    pub gamma: f64,
    /// Multiplies `q̂` before it enters the strategy.
    pub q_scale: f64,
}

impl<'a> AdjointStrategy<'a> {
    pub fn new(solution: &'a dyn AdjointSolution, gamma: f64) -> Self {
        Self {
            solution,
            gamma,
            q_scale: 1.0,
        }
    }
}

impl Strategy for AdjointStrategy<'_> {
    fn weights(&self, ctx: &StrategyContext) -> Result<DVector<f64>> {
        let q = self.solution.q_hat(ctx.step, ctx.time, &ctx.state) * self.q_scale;
        Ok(optimal_pi_from_qhat(self.gamma, ctx.market, &q).total())
    }
}

/// Closed-form adjoint pair of a market with deterministic coefficients:
/// `q̂ = 0`, `p̂(t) = (T - t)(γ r + ½ γ̃ |θ|²)`.
#[derive(Clone, Debug)]
pub struct DeterministicAdjoint {
    pub base: f64,
    pub horizon: f64,
    pub n_noise: usize,
}

impl DeterministicAdjoint {
    pub fn new(coeffs: &dyn Coefficients, gamma: f64, horizon: f64, state: &FactorState) -> Result<Self> {
        let snap = MarketSnapshot::evaluate(coeffs, state)?;
        Ok(Self {
            base: driver_base(gamma, &snap),
            horizon,
            n_noise: coeffs.dims().n_noise,
        })
    }
}

impl AdjointSolution for DeterministicAdjoint {
    fn p_hat(&self, _k: usize, t: f64, _s: &FactorState) -> f64 {
        (self.horizon - t) * self.base
    }

    fn q_hat(&self, _k: usize, _t: f64, _s: &FactorState) -> DVector<f64> {
        DVector::zeros(self.n_noise)
    }
}

/// Per-step regression representation of `(p̂, q̂)`.
#[derive(Clone, Debug)]
pub struct BsdeGridSolution {
    pub grid: TimeGrid,
    pub basis: BasisSpec,
    pub has_lag: bool,
    pub n_factors: usize,
    pub n_noise: usize,
    /// Steps `0..=K`; the last one is the terminal condition.
    pub p_fits: Vec<RegressionFit>,
    /// Steps `0..K`, N targets each.
    pub q_fits: Vec<RegressionFit>,
    pub p_hat_0: f64,
    pub clip: f64,
    pub clip_count: usize,
    pub picard_deltas: Vec<f64>,
}

impl BsdeGridSolution {
    fn features(&self, s: &FactorState) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * self.n_factors + 1);
        f.extend_from_slice(s.y);
        f.push(s.v);
        if self.has_lag {
            f.extend_from_slice(s.z);
        }
        f
    }

    /// Coefficient dump: one row per step and target.
    pub fn coefficient_rows(&self) -> Vec<(usize, String, Vec<f64>)> {
        let mut rows = Vec::new();
        for (k, f) in self.p_fits.iter().enumerate() {
            rows.push((k, "p_hat".to_string(), f.coefficients.column(0).iter().cloned().collect()));
        }
        for (k, f) in self.q_fits.iter().enumerate() {
            for j in 0..f.n_targets() {
                rows.push((k, format!("q_hat{}", j + 1), f.coefficients.column(j).iter().cloned().collect()));
            }
        }
        rows.sort_by_key(|r| r.0);
        rows
    }
}

impl AdjointSolution for BsdeGridSolution {
    fn p_hat(&self, k: usize, _t: f64, s: &FactorState) -> f64 {
        self.p_fits[k.min(self.grid.steps)].predict(&self.features(s), 0)
    }

    fn q_hat(&self, k: usize, _t: f64, s: &FactorState) -> DVector<f64> {
        let f = &self.q_fits[k.min(self.grid.steps - 1)];
        let x = self.features(s);
        let mut scratch = Vec::new();
        let mut out = vec![0.0; self.n_noise];
        f.predict_into(&x, &mut scratch, &mut out);
        DVector::from_iterator(self.n_noise, out.into_iter().map(|q| q.clamp(-self.clip, self.clip)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsmcConfig {
    #[serde(default)]
    pub basis: BasisSpec,
    /// Multi-step sweeps after the one-step pass.
    #[serde(default = "default_picard")]
    pub picard_sweeps: usize,
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Terminal value `w . Y(T)` instead of zero; for diagnostics only.
    #[serde(default)]
    pub terminal_y_weights: Option<Vec<f64>>,
}

fn default_picard() -> usize {
    2
}

fn default_clip() -> f64 {
    50.0
}

impl Default for LsmcConfig {
    fn default() -> Self {
        Self {
            basis: BasisSpec::default(),
            picard_sweeps: default_picard(),
            clip: default_clip(),
            terminal_y_weights: None,
        }
    }
}

/// Market quantities the driver needs at every `(k, p)`, step-major.
struct DriverCache {
    n_paths: usize,
    n_noise: usize,
    base: Vec<f64>,
    theta: Vec<f64>,
    /// Empty when every state has `σ̃ = I`.
    projection: Vec<f64>,
    gamma: f64,
}

impl DriverCache {
    fn build(coeffs: &dyn Coefficients, factors: &FactorPaths, gamma: f64) -> Result<Self> {
        let kk = factors.grid.steps;
        let pt = factors.n_paths;
        let nn = factors.n_noise;
        let complete = coeffs.dims().is_complete();
        let rows: Vec<(usize, usize)> = (0..kk * pt).step_by(BLOCK).map(|s| (s, (s + BLOCK).min(kk * pt))).collect();
        let parts: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = rows
            .par_iter()
            .map(|&(a, b)| {
                let mut base = Vec::with_capacity(b - a);
                let mut theta = Vec::with_capacity((b - a) * nn);
                let mut proj = Vec::new();
                for idx in a..b {
                    let (k, p) = (idx / pt, idx % pt);
                    let snap = MarketSnapshot::evaluate(coeffs, &factors.state(k, p))?;
                    base.push(driver_base(gamma, &snap));
                    theta.extend(snap.theta.iter());
                    if !complete {
                        proj.extend(snap.projection.iter());
                    }
                }
                Ok((base, theta, proj))
            })
            .collect();
        let mut cache = DriverCache {
            n_paths: pt,
            n_noise: nn,
            base: Vec::with_capacity(kk * pt),
            theta: Vec::with_capacity(kk * pt * nn),
            projection: Vec::new(),
            gamma,
        };
        for part in parts {
            let (b, t, p) = part?;
            cache.base.extend(b);
            cache.theta.extend(t);
            cache.projection.extend(p);
        }
        Ok(cache)
    }

    fn f(&self, k: usize, p: usize, q: &[f64]) -> f64 {
        let idx = k * self.n_paths + p;
        let nn = self.n_noise;
        let gt = self.gamma / (1.0 - self.gamma);
        let th = &self.theta[idx * nn..(idx + 1) * nn];
        let qq: f64 = q.iter().map(|x| x * x).sum();
        let qsq = if self.projection.is_empty() {
            qq
        } else {
            let pm = &self.projection[idx * nn * nn..(idx + 1) * nn * nn];
            // Column-major N x N.
            let mut s = 0.0;
            for c in 0..nn {
                for r in 0..nn {
                    s += q[r] * pm[c * nn + r] * q[c];
                }
            }
            s
        };
        let tq: f64 = th.iter().zip(q).map(|(a, b)| a * b).sum();
        self.base[idx] + 0.5 * (qq + gt * qsq) + gt * tq
    }
}

/// Simulates factor paths and solves the BSDE on them.
pub fn lsmc_solve(
    coeffs: &dyn Coefficients,
    delay: &DelaySpec,
    utility: &PowerUtility,
    grid: &TimeGrid,
    mc: &McConfig,
    config: &LsmcConfig,
) -> Result<BsdeGridSolution> {
    let factors = simulate_factors(coeffs, delay, grid, mc)?;
    lsmc_solve_on(&factors, coeffs, utility, config)
}

fn step_inputs(factors: &FactorPaths, k: usize) -> Vec<f64> {
    let w = factors.state_width();
    let mut data = vec![0.0; factors.n_paths * w];
    data.par_chunks_mut(w * BLOCK).enumerate().for_each(|(b, chunk)| {
        for (i, row) in chunk.chunks_mut(w).enumerate() {
            factors.state_features(k, b * BLOCK + i, row);
        }
    });
    data
}

fn predict_all(fit: &RegressionFit, inputs: &[f64], width: usize, n_paths: usize) -> Vec<f64> {
    let nt = fit.n_targets();
    let mut out = vec![0.0; n_paths * nt];
    out.par_chunks_mut(nt * BLOCK).enumerate().for_each(|(b, chunk)| {
        let mut scratch = Vec::new();
        for (i, o) in chunk.chunks_mut(nt).enumerate() {
            let p = b * BLOCK + i;
            let x = if width == 0 { &[][..] } else { &inputs[p * width..(p + 1) * width] };
            fit.predict_into(x, &mut scratch, o);
        }
    });
    out
}

/// Backward induction on given paths.
///
/// The first pass is the explicit one-step scheme: `E[p̂_{k+1} | X_k]` and
/// `q̂_k = E[(p̂_{k+1} - E[p̂_{k+1}|X_k]) ΔW_k | X_k] / Δt` are regressed, then
/// `p̂_k` is regressed on `p̂_{k+1} + f(q̂_k) Δt`. Each further sweep regresses
/// `p̂_k` on the pathwise sum `ξ + Σ_{j≥k} (f(q̂_j) Δt - q̂_j ΔW_j)` with `q̂`
/// frozen from the previous sweep, then re-estimates `q̂` from one-step increments.
pub fn lsmc_solve_on(
    factors: &FactorPaths,
    coeffs: &dyn Coefficients,
    utility: &PowerUtility,
    config: &LsmcConfig,
) -> Result<BsdeGridSolution> {
    let grid = factors.grid;
    let kk = grid.steps;
    let pt = factors.n_paths;
    let nn = factors.n_noise;
    let dt = grid.dt();
    let width = factors.state_width();
    let basis = config.basis;
    basis.check_size(width, pt)?;
    if !(config.clip > 0.0) {
        return Err(Error::invalid("clip", "need a positive clip bound"));
    }
    let gamma = utility.gamma;
    let cache = DriverCache::build(coeffs, factors, gamma)?;

    let terminal: Vec<f64> = match &config.terminal_y_weights {
        None => vec![0.0; pt],
        Some(w) => {
            if w.len() != factors.n_factors {
                return Err(Error::invalid("terminal_y_weights", "length must equal n_factors"));
            }
            (0..pt).map(|p| factors.y(kk, p).iter().zip(w).map(|(a, b)| a * b).sum()).collect()
        }
    };
    let terminal_fit = match &config.terminal_y_weights {
        None => RegressionFit::constant(&[0.0]),
        Some(_) => fit(&Inputs { data: &step_inputs(factors, kk), width }, &terminal, 1, &basis, kk)?,
    };

    let mut clip_count = 0usize;
    let mut clip_q = |q: &mut [f64]| {
        for x in q.iter_mut() {
            if x.abs() > config.clip {
                *x = x.clamp(-config.clip, config.clip);
                clip_count += 1;
            }
        }
    };

    // One-step pass.
    let mut p_fits: Vec<RegressionFit> = vec![RegressionFit::constant(&[0.0]); kk + 1];
    let mut q_fits: Vec<RegressionFit> = vec![RegressionFit::constant(&vec![0.0; nn]); kk];
    p_fits[kk] = terminal_fit.clone();
    // Pathwise fitted values p̂_k(X_k) and clipped q̂_k(X_k).
    let mut p_vals = vec![0.0; (kk + 1) * pt];
    let mut q_vals = vec![0.0; kk * pt * nn];
    p_vals[kk * pt..].copy_from_slice(&terminal);

    for k in (0..kk).rev() {
        let inputs = step_inputs(factors, k);
        let next: Vec<f64> = p_vals[(k + 1) * pt..(k + 2) * pt].to_vec();
        let cond = fit(&Inputs { data: &inputs, width }, &next, 1, &basis, k)?;
        let cond_vals = predict_all(&cond, &inputs, width, pt);
        let q_target: Vec<f64> = (0..pt)
            .into_par_iter()
            .flat_map_iter(|p| {
                let d = next[p] - cond_vals[p];
                factors.dw(k, p).iter().map(move |w| d * w / dt).collect::<Vec<_>>()
            })
            .collect();
        let qf = fit(&Inputs { data: &inputs, width }, &q_target, nn, &basis, k)?;
        let mut qv = predict_all(&qf, &inputs, width, pt);
        clip_q(&mut qv);
        let p_target: Vec<f64> = (0..pt)
            .into_par_iter()
            .map(|p| next[p] + cache.f(k, p, &qv[p * nn..(p + 1) * nn]) * dt)
            .collect();
        let pf = fit(&Inputs { data: &inputs, width }, &p_target, 1, &basis, k)?;
        let pv = predict_all(&pf, &inputs, width, pt);
        p_vals[k * pt..(k + 1) * pt].copy_from_slice(&pv);
        q_vals[k * pt * nn..(k + 1) * pt * nn].copy_from_slice(&qv);
        p_fits[k] = pf;
        q_fits[k] = qf;
    }

    // Multi-step sweeps.
    let mut picard_deltas = Vec::new();
    for sweep in 1..=config.picard_sweeps {
        let mut new_p = vec![0.0; (kk + 1) * pt];
        new_p[kk * pt..].copy_from_slice(&terminal);
        let mut acc = terminal.clone();
        let mut new_p_fits = p_fits.clone();
        for k in (0..kk).rev() {
            acc.par_iter_mut().enumerate().for_each(|(p, a)| {
                let q = &q_vals[(k * pt + p) * nn..(k * pt + p + 1) * nn];
                let mart: f64 = q.iter().zip(factors.dw(k, p)).map(|(a, b)| a * b).sum();
                *a += cache.f(k, p, q) * dt - mart;
            });
            let inputs = step_inputs(factors, k);
            let pf = fit(&Inputs { data: &inputs, width }, &acc, 1, &basis, k)?;
            let pv = predict_all(&pf, &inputs, width, pt);
            new_p[k * pt..(k + 1) * pt].copy_from_slice(&pv);
            new_p_fits[k] = pf;
        }
        let mut new_q_fits = q_fits.clone();
        let mut new_q = vec![0.0; kk * pt * nn];
        for k in 0..kk {
            let inputs = step_inputs(factors, k);
            let q_target: Vec<f64> = (0..pt)
                .into_par_iter()
                .flat_map_iter(|p| {
                    let d = new_p[(k + 1) * pt + p] - new_p[k * pt + p];
                    factors.dw(k, p).iter().map(move |w| d * w / dt).collect::<Vec<_>>()
                })
                .collect();
            let qf = fit(&Inputs { data: &inputs, width }, &q_target, nn, &basis, k)?;
            let mut qv = predict_all(&qf, &inputs, width, pt);
            clip_q(&mut qv);
            new_q[k * pt * nn..(k + 1) * pt * nn].copy_from_slice(&qv);
            new_q_fits[k] = qf;
        }
        let delta = new_p
            .iter()
            .zip(&p_vals)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        picard_deltas.push(delta);
        let n = picard_deltas.len();
        if n >= 3 && picard_deltas[n - 1] > picard_deltas[n - 2] && picard_deltas[n - 2] > picard_deltas[n - 3] {
            return Err(Error::PicardDivergence { sweep });
        }
        p_vals = new_p;
        q_vals = new_q;
        p_fits = new_p_fits;
        q_fits = new_q_fits;
    }

    let p_hat_0 = p_vals[0];
    if !p_hat_0.is_finite() || p_fits.iter().chain(&q_fits).any(|f| f.coefficients.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinite { step: 0, path: 0 });
    }
    Ok(BsdeGridSolution {
        grid,
        basis,
        has_lag: factors.has_lag(),
        n_factors: factors.n_factors,
        n_noise: nn,
        p_fits,
        q_fits,
        p_hat_0,
        clip: config.clip,
        clip_count,
        picard_deltas,
    })
}

/// Forward Euler of `dp̂ = -f dt + q̂ dW` from `p̂(0)` of the solution.
/// Returns `p̂_K` per path; for an exact solution it equals the terminal value.
pub fn forward_p_hat(
    solution: &dyn AdjointSolution,
    factors: &FactorPaths,
    coeffs: &dyn Coefficients,
    gamma: f64,
) -> Result<Vec<f64>> {
    let grid = factors.grid;
    let dt = grid.dt();
    (0..factors.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut ph = solution.p_hat(0, 0.0, &factors.state(0, p));
            for k in 0..grid.steps {
                let t = grid.time(k);
                let s = factors.state(k, p);
                let snap = MarketSnapshot::evaluate(coeffs, &s)?;
                let q = solution.q_hat(k, t, &s);
                let dw = factors.dw(k, p);
                ph += -driver_f(gamma, &snap, &q) * dt + q.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok(ph)
        })
        .collect()
}

/// Transformed wealth `X̃ = U(X^π̂)` from its explicit exponential formula,
/// driven by the stored Brownian increments. Step-major `(K+1) * P`.
pub fn explicit_tilde_x(
    solution: &dyn AdjointSolution,
    factors: &FactorPaths,
    coeffs: &dyn Coefficients,
    utility: &PowerUtility,
) -> Result<Vec<f64>> {
    let grid = factors.grid;
    let kk = grid.steps;
    let pt = factors.n_paths;
    let dt = grid.dt();
    let g = utility.gamma;
    let gt = utility.gamma_tilde();
    let x0 = utility.initial_value();
    let per_path: Vec<Result<Vec<f64>>> = (0..pt)
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(kk + 1);
            let mut e = 0.0f64;
            out.push(x0);
            for k in 0..kk {
                let s = factors.state(k, p);
                let snap = MarketSnapshot::evaluate(coeffs, &s)?;
                let q = solution.q_hat(k, grid.time(k), &s);
                let th = &snap.theta;
                let pq = &snap.projection * &q;
                let drift = g * snap.rate + 0.5 * gt * (1.0 - 2.0 * g) / (1.0 - g) * th.norm_squared()
                    - gt * gt * th.dot(&q)
                    - 0.5 * g / ((1.0 - g) * (1.0 - g)) * q.dot(&pq);
                let vol = (th + pq) * gt;
                let dw = factors.dw(k, p);
                e += drift * dt + vol.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
                if e.abs() > MAX_EXPONENT {
                    return Err(Error::Overflow { max_exponent: e.abs() });
                }
                out.push(x0 * e.exp());
            }
            Ok(out)
        })
        .collect();
    let mut x = vec![0.0; (kk + 1) * pt];
    for (p, res) in per_path.into_iter().enumerate() {
        for (k, v) in res?.into_iter().enumerate() {
            x[k * pt + p] = v;
        }
    }
    Ok(x)
}

/// Sampled smallness quantities for the local existence argument.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    /// `sup_paths |∫ (γ r + ½ γ̃ |θ|²) dt|`
    pub xi_sup: f64,
    /// `2 sup ‖I + γ̃ σ̃‖`, the constant the estimate actually uses.
    pub beta: f64,
    /// `2 sup ‖I - σ̃‖`, the constant as stated alongside the smallness condition.
    pub beta_stated: f64,
    pub bound: f64,
    pub smallness_holds: bool,
    pub smallness_holds_stated: bool,
    /// `1 / (√2 β)`
    pub radius: f64,
}

pub fn contraction_diagnostics(
    coeffs: &dyn Coefficients,
    factors: &FactorPaths,
    gamma: f64,
) -> Result<ContractionReport> {
    let grid = factors.grid;
    let dt = grid.dt();
    let gt = gamma / (1.0 - gamma);
    let per_path: Vec<Result<(f64, f64, f64)>> = (0..factors.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut xi = 0.0;
            let mut b_plus: f64 = 0.0;
            let mut b_minus: f64 = 0.0;
            for k in 0..grid.steps {
                let snap = MarketSnapshot::evaluate(coeffs, &factors.state(k, p))?;
                xi += driver_base(gamma, &snap) * dt;
                let nn = snap.projection.nrows();
                let id = DMatrix::<f64>::identity(nn, nn);
                b_plus = b_plus.max(operator_norm(&(&id + &snap.projection * gt)));
                b_minus = b_minus.max(operator_norm(&(&id - &snap.projection)));
            }
            Ok((xi.abs(), b_plus, b_minus))
        })
        .collect();
    let (mut xi_sup, mut np, mut nm) = (0.0f64, 0.0f64, 0.0f64);
    for r in per_path {
        let (a, b, c) = r?;
        xi_sup = xi_sup.max(a);
        np = np.max(b);
        nm = nm.max(c);
    }
    let beta = 2.0 * np;
    let beta_stated = 2.0 * nm;
    let bound = 1.0 / (4.0 * beta);
    Ok(ContractionReport {
        xi_sup,
        beta,
        beta_stated,
        bound,
        smallness_holds: xi_sup < bound,
        smallness_holds_stated: xi_sup < 1.0 / (4.0 * beta_stated),
        radius: 1.0 / (2f64.sqrt() * beta),
    })
}

fn operator_norm(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().fold(0.0, |a: f64, x| a.max(x.abs()))
}
