//! Dual (martingale) solution of the complete-market problem.
//!
//! `H₀` is the state-price density, `φ = E[H₀(T)^{-γ̃}]`,
//! `M(t) = (x/φ) E[H₀(T)^{-γ̃} | F_t] = x + ∫ψ dW`, and the optimal weights are
//! `π̂ = (σ*)⁻¹(θ + ψ/M)`. Conditional expectations are regressed in the
//! factorized form `M(t) = (x/φ) H₀(t)^{-γ̃} E[(H₀(T)/H₀(t))^{-γ̃} | X_t]`,
//! which requires `r` and `θ` to depend on the factor state only.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::delay_sde::{simulate_wealth, FactorPaths, Strategy, StrategyContext, BLOCK};
use crate::error::{Error, Result};
use crate::fbsde_solver::driver_f;
use crate::market_model::{Coefficients, FactorState, MarketSnapshot, PowerUtility};
use crate::regression::{fit, BasisSpec, Inputs, RegressionFit};
use crate::stats::{mean_se, mean_se_paired, quantile};

/// `log H₀` per step and path, step-major `(K+1) * P`.
#[derive(Clone, Debug)]
pub struct StateDensityPaths {
    pub n_paths: usize,
    pub steps: usize,
    pub log_h0: Vec<f64>,
}

impl StateDensityPaths {
    pub fn log_h0(&self, k: usize, p: usize) -> f64 {
        self.log_h0[k * self.n_paths + p]
    }

    pub fn h0(&self, k: usize, p: usize) -> f64 {
        self.log_h0(k, p).exp()
    }

    pub fn terminal(&self) -> impl Iterator<Item = f64> + '_ {
        let k = self.steps;
        self.log_h0[k * self.n_paths..].iter().map(|l| l.exp())
    }
}

fn require_complete(coeffs: &dyn Coefficients) -> Result<()> {
    let d = coeffs.dims();
    if !d.is_complete() {
        return Err(Error::IncompleteMarket {
            assets: d.n_assets,
            noises: d.n_noise,
        });
    }
    Ok(())
}

/// `log H₀(t) = -∫θ dW - ½∫|θ|² ds - ∫r ds`, left-point on the factor grid.
pub fn simulate_h0(coeffs: &dyn Coefficients, factors: &FactorPaths) -> Result<StateDensityPaths> {
    require_complete(coeffs)?;
    let grid = factors.grid;
    let kk = grid.steps;
    let pt = factors.n_paths;
    let dt = grid.dt();
    let per_path: Vec<Result<Vec<f64>>> = (0..pt)
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(kk + 1);
            let mut l = 0.0;
            out.push(l);
            for k in 0..kk {
                let snap = MarketSnapshot::evaluate(coeffs, &factors.state(k, p))?;
                let dw = factors.dw(k, p);
                let tw: f64 = snap.theta.iter().zip(dw).map(|(a, b)| a * b).sum();
                l += -tw - (0.5 * snap.theta.norm_squared() + snap.rate) * dt;
                if !l.is_finite() {
                    return Err(Error::NonFinite { step: k + 1, path: p });
                }
                out.push(l);
            }
            Ok(out)
        })
        .collect();
    let mut log_h0 = vec![0.0; (kk + 1) * pt];
    for (p, r) in per_path.into_iter().enumerate() {
        for (k, v) in r?.into_iter().enumerate() {
            log_h0[k * pt + p] = v;
        }
    }
    Ok(StateDensityPaths {
        n_paths: pt,
        steps: kk,
        log_h0,
    })
}

/// `φ` with its standard error, and the multiplier `𝒵(x) = (x/φ)^{γ-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhiEstimate {
    pub phi: f64,
    pub phi_se: f64,
    pub zx: f64,
}

pub fn compute_phi_zx(h0: &StateDensityPaths, utility: &PowerUtility, antithetic: bool) -> PhiEstimate {
    let gt = utility.gamma_tilde();
    let vals: Vec<f64> = h0.terminal().map(|h| h.powf(-gt)).collect();
    let e = mean_se_paired(&vals, antithetic);
    PhiEstimate {
        phi: e.mean,
        phi_se: e.se,
        zx: (utility.initial_wealth / e.mean).powf(utility.gamma - 1.0),
    }
}

/// `Λ(z) = E[H₀(T) I(z H₀(T))]`, the cost of the optimal claim for multiplier `z`.
pub fn budget(h0: &StateDensityPaths, utility: &PowerUtility, z: f64, antithetic: bool) -> crate::stats::Estimate {
    let vals: Vec<f64> = h0.terminal().map(|h| h * utility.inverse_marginal(z * h)).collect();
    mean_se_paired(&vals, antithetic)
}

/// Regression representation of `M` and `ψ/M`.
#[derive(Clone, Debug)]
pub struct MartingaleSolution {
    pub phi: PhiEstimate,
    pub initial_wealth: f64,
    pub gamma: f64,
    pub has_lag: bool,
    pub n_noise: usize,
    /// `E[(H₀(T)/H₀(t_k))^{-γ̃} | X_k]`, steps `0..=K`.
    pub ratio_fits: Vec<RegressionFit>,
    /// `ψ/M` at steps `0..K`.
    pub psi_fits: Vec<RegressionFit>,
    pub m0: f64,
    pub m0_se: f64,
}

impl MartingaleSolution {
    fn features(&self, s: &FactorState) -> Vec<f64> {
        let mut f = Vec::with_capacity(s.y.len() * 2 + 1);
        f.extend_from_slice(s.y);
        f.push(s.v);
        if self.has_lag {
            f.extend_from_slice(s.z);
        }
        f
    }

    /// `M` at step `k` given the factor state and `log H₀`.
    pub fn m(&self, k: usize, s: &FactorState, log_h0: f64) -> f64 {
        let k = k.min(self.ratio_fits.len() - 1);
        let ratio = self.ratio_fits[k].predict(&self.features(s), 0);
        self.initial_wealth / self.phi.phi * (-self.gamma / (1.0 - self.gamma) * log_h0).exp() * ratio
    }

    /// `ψ/M` at step `k`.
    pub fn psi_over_m(&self, k: usize, s: &FactorState) -> DVector<f64> {
        let f = &self.psi_fits[k.min(self.psi_fits.len() - 1)];
        let mut out = vec![0.0; self.n_noise];
        f.predict_into(&self.features(s), &mut Vec::new(), &mut out);
        DVector::from_vec(out)
    }

    /// `q̂ = -γθ + (1-γ) ψ/M`.
    pub fn q_hat(&self, k: usize, s: &FactorState, market: &MarketSnapshot) -> DVector<f64> {
        -self.gamma * &market.theta + (1.0 - self.gamma) * self.psi_over_m(k, s)
    }
}

/// Regresses the conditional ratio and the relative representation integrand.
pub fn estimate_m_and_psi(
    h0: &StateDensityPaths,
    factors: &FactorPaths,
    basis: &BasisSpec,
    utility: &PowerUtility,
) -> Result<MartingaleSolution> {
    let phi = compute_phi_zx(h0, utility, factors.mc.antithetic);
    let kk = factors.grid.steps;
    let pt = factors.n_paths;
    let nn = factors.n_noise;
    let dt = factors.grid.dt();
    let width = factors.state_width();
    let gt = utility.gamma_tilde();
    basis.check_size(width, pt)?;

    let inputs_at = |k: usize| -> Vec<f64> {
        let mut data = vec![0.0; pt * width];
        data.par_chunks_mut(width * BLOCK).enumerate().for_each(|(b, chunk)| {
            for (i, row) in chunk.chunks_mut(width).enumerate() {
                factors.state_features(k, b * BLOCK + i, row);
            }
        });
        data
    };

    let mut ratio_fits = vec![RegressionFit::constant(&[1.0]); kk + 1];
    // Fitted ratio values per step, needed for the increments.
    let mut ratio_vals = vec![1.0; (kk + 1) * pt];
    for k in 0..kk {
        let inputs = inputs_at(k);
        let target: Vec<f64> = (0..pt)
            .map(|p| (-gt * (h0.log_h0(kk, p) - h0.log_h0(k, p))).exp())
            .collect();
        let f = fit(&Inputs { data: &inputs, width }, &target, 1, basis, k)?;
        let mut scratch = Vec::new();
        for p in 0..pt {
            let mut o = [0.0];
            f.predict_into(&inputs[p * width..(p + 1) * width], &mut scratch, &mut o);
            if !(o[0] > 0.0) {
                return Err(Error::NonPositiveMartingale { step: k, path: p });
            }
            ratio_vals[k * pt + p] = o[0];
        }
        ratio_fits[k] = f;
    }

    let mut psi_fits = Vec::with_capacity(kk);
    for k in 0..kk {
        let inputs = inputs_at(k);
        let mut target = vec![0.0; pt * nn];
        for p in 0..pt {
            let growth = (-gt * (h0.log_h0(k + 1, p) - h0.log_h0(k, p))).exp() * ratio_vals[(k + 1) * pt + p]
                / ratio_vals[k * pt + p];
            let rel = growth - 1.0;
            for (j, w) in factors.dw(k, p).iter().enumerate() {
                target[p * nn + j] = rel * w / dt;
            }
        }
        psi_fits.push(fit(&Inputs { data: &inputs, width }, &target, nn, basis, k)?);
    }

    let x = utility.initial_wealth;
    let m0 = x / phi.phi * ratio_vals[0];
    let m0_se = x * phi.phi_se / phi.phi;
    Ok(MartingaleSolution {
        phi,
        initial_wealth: x,
        gamma: utility.gamma,
        has_lag: factors.has_lag(),
        n_noise: nn,
        ratio_fits,
        psi_fits,
        m0,
        m0_se,
    })
}

/// `π̂ = (σ*)⁻¹(θ + ψ/M)` given the relative integrand.
pub fn pi_from_psi_over_m(market: &MarketSnapshot, psi_over_m: &DVector<f64>) -> DVector<f64> {
    // (σσ*)⁻¹σ = (σ*)⁻¹ for square invertible σ.
    &market.cov_inv * (&market.volatility * (&market.theta + psi_over_m))
}

/// `π̂` from the dual solution at one state.
pub fn pi_from_martingale(
    sol: &MartingaleSolution,
    coeffs: &dyn Coefficients,
    k: usize,
    state: &FactorState,
    log_h0: f64,
) -> Result<DVector<f64>> {
    require_complete(coeffs)?;
    if !(sol.m(k, state, log_h0) > 0.0) {
        return Err(Error::NonPositiveMartingale { step: k, path: 0 });
    }
    let snap = MarketSnapshot::evaluate(coeffs, state)?;
    Ok(pi_from_psi_over_m(&snap, &sol.psi_over_m(k, state)))
}

/// The dual strategy as a [`Strategy`].
pub struct MartingaleStrategy<'a> {
    pub solution: &'a MartingaleSolution,
}

impl Strategy for MartingaleStrategy<'_> {
    fn weights(&self, ctx: &StrategyContext) -> Result<DVector<f64>> {
        Ok(pi_from_psi_over_m(ctx.market, &self.solution.psi_over_m(ctx.step, &ctx.state)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualityReport {
    pub phi: f64,
    pub phi_se: f64,
    #[serde(rename = "Zx")]
    pub zx: f64,
    #[serde(rename = "M0")]
    pub m0: f64,
    #[serde(rename = "M0_se")]
    pub m0_se: f64,
    /// `p(0)` used for the forward adjoint, `φ^{1-γ}`; equals `𝒵(x)` at `x = 1`.
    pub p0: f64,
    #[serde(rename = "pT_mean")]
    pub pt_mean: f64,
    /// Includes the shared error of `p(0) = φ̂^{1-γ}`, which shifts every path alike.
    #[serde(rename = "pT_se")]
    pub pt_se: f64,
    /// Across-path standard error alone.
    #[serde(rename = "pT_se_paths")]
    pub pt_se_paths: f64,
    /// Median and 95% quantile of `|M - H₀ X| / (H₀ X)`.
    #[serde(rename = "eq20_relerr_q50_q95")]
    pub m_relerr_q50_q95: [f64; 2],
    /// Median and 95% quantile of `|p - p(0) H₀^γ (M/x)^{1-γ}| / p`.
    #[serde(rename = "eq21_relerr_q50_q95")]
    pub p_relerr_q50_q95: [f64; 2],
}

/// Compares `M` with `H₀ X^π̂`, and the forward adjoint `p` with
/// `p(0) H₀^γ (M/x)^{1-γ}`, pooled over steps `1..=K` and all paths.
///
/// `log p` follows `d log p = -f(q̂) dt + q̂ dW` with `q̂ = -γθ + (1-γ)ψ/M`,
/// from `p(0) = φ^{1-γ}`, so that `p(T) = 1`.
pub fn check_duality(
    sol: &MartingaleSolution,
    coeffs: &dyn Coefficients,
    factors: &FactorPaths,
    h0: &StateDensityPaths,
    utility: &PowerUtility,
) -> Result<DualityReport> {
    require_complete(coeffs)?;
    let grid = factors.grid;
    let kk = grid.steps;
    let pt = factors.n_paths;
    let dt = grid.dt();
    let g = utility.gamma;
    let x = utility.initial_wealth;
    let wealth = simulate_wealth(factors, coeffs, utility, &MartingaleStrategy { solution: sol })?;
    let p0 = sol.phi.phi.powf(1.0 - g);

    let per_path: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = (0..pt)
        .into_par_iter()
        .map(|p| {
            let mut m_err = Vec::with_capacity(kk);
            let mut p_err = Vec::with_capacity(kk);
            let mut log_p = p0.ln();
            for k in 0..kk {
                let s = factors.state(k, p);
                let snap = MarketSnapshot::evaluate(coeffs, &s)?;
                let q = sol.q_hat(k, &s, &snap);
                let dw = factors.dw(k, p);
                log_p += -driver_f(g, &snap, &q) * dt + q.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
                let s1 = factors.state(k + 1, p);
                let lh = h0.log_h0(k + 1, p);
                let m = sol.m(k + 1, &s1, lh);
                if !(m > 0.0) {
                    return Err(Error::NonPositiveMartingale { step: k + 1, path: p });
                }
                let hx = lh.exp() * wealth.x(k + 1, p);
                m_err.push(((m - hx) / hx).abs());
                let rhs = p0 * (g * lh).exp() * (m / x).powf(1.0 - g);
                let pv = log_p.exp();
                p_err.push(((pv - rhs) / pv).abs());
            }
            Ok((m_err, p_err, log_p.exp()))
        })
        .collect();
    let mut m_err = Vec::with_capacity(kk * pt);
    let mut p_err = Vec::with_capacity(kk * pt);
    let mut p_t = Vec::with_capacity(pt);
    for r in per_path {
        let (a, b, c) = r?;
        m_err.extend(a);
        p_err.extend(b);
        p_t.push(c);
    }
    let pt_est = mean_se_paired(&p_t, factors.mc.antithetic);
    let shared = (1.0 - g) * sol.phi.phi_se / sol.phi.phi;
    Ok(DualityReport {
        phi: sol.phi.phi,
        phi_se: sol.phi.phi_se,
        zx: sol.phi.zx,
        m0: sol.m0,
        m0_se: sol.m0_se,
        p0,
        pt_mean: pt_est.mean,
        pt_se: (pt_est.se * pt_est.se + shared * shared).sqrt(),
        pt_se_paths: pt_est.se,
        m_relerr_q50_q95: [quantile(&m_err, 0.5), quantile(&m_err, 0.95)],
        p_relerr_q50_q95: [quantile(&p_err, 0.5), quantile(&p_err, 0.95)],
    })
}

/// Sample mean and standard error of `M` at step `k` over the paths.
pub fn m_moments(sol: &MartingaleSolution, factors: &FactorPaths, h0: &StateDensityPaths, k: usize) -> crate::stats::Estimate {
    let vals: Vec<f64> = (0..factors.n_paths)
        .map(|p| sol.m(k, &factors.state(k, p), h0.log_h0(k, p)))
        .collect();
    mean_se(&vals)
}
