//! Monte Carlo checks of the optimality statements.
//!
//! Every band is three standard errors. Reports carry the seed, path count and
//! step size of the run that produced them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::delay_sde::{simulate_wealth, FactorPaths, Strategy, StrategyContext, WealthPaths};
use crate::error::Result;
use crate::fbsde_solver::{driver_f, AdjointSolution};
use crate::market_model::{Coefficients, MarketSnapshot, PowerUtility};
use crate::regression::{fit, BasisSpec, Inputs};
use crate::stats::{mean_se_paired, Estimate};

/// Width of every acceptance band, in standard errors.
pub const SE_BAND: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestReport {
    pub name: String,
    /// Standardized statistic, or an absolute discrepancy when `se` is zero.
    pub statistic: f64,
    pub se: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
}

impl TestReport {
    fn from_paths(name: impl Into<String>, factors: &FactorPaths) -> Self {
        Self {
            name: name.into(),
            statistic: 0.0,
            se: 0.0,
            tolerance: SE_BAND,
            passed: true,
            n_paths: factors.n_paths,
            seed: factors.mc.seed,
            dt: factors.grid.dt(),
        }
    }
}

/// `H = γ x̃ {(r + π·(μ - r) - ½(1-γ) π'σσ'π) p + π'σ q}`.
pub fn eval_hamiltonian(
    utility: &PowerUtility,
    market: &MarketSnapshot,
    pi: &DVector<f64>,
    x_tilde: f64,
    p: f64,
    q: &DVector<f64>,
) -> f64 {
    let g = utility.gamma;
    let exposure = market.volatility.tr_mul(pi);
    let growth = market.rate + pi.dot(&market.excess) - 0.5 * (1.0 - g) * exposure.norm_squared();
    g * x_tilde * (growth * p + exposure.dot(q))
}

/// Stationary point of `H` in `π`: `(σσ*)⁻¹((μ - r) + σ q / p) / (1 - γ)`.
pub fn hamiltonian_argmax(utility: &PowerUtility, market: &MarketSnapshot, p: f64, q: &DVector<f64>) -> DVector<f64> {
    let rhs = &market.excess + &market.volatility * q / p;
    &market.cov_inv * rhs / (1.0 - utility.gamma)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArgmaxReport {
    pub analytic: Vec<f64>,
    pub numerical: Vec<f64>,
    pub max_abs_diff: f64,
}

fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Maximizes a concave function of one variable starting from `x0`.
fn line_max(f: &dyn Fn(f64) -> f64, x0: f64) -> f64 {
    let mut h = 1.0;
    let f0 = f(x0);
    let d = if f(x0 + h) > f0 {
        1.0
    } else if f(x0 - h) > f0 {
        -1.0
    } else {
        return golden_max(f, x0 - h, x0 + h, 1e-11);
    };
    // f(prev) < f(cur) holds on every iteration.
    let mut prev = x0;
    let mut cur = x0 + d * h;
    let mut fc = f(cur);
    loop {
        h *= 2.0;
        let next = cur + d * h;
        let fnext = f(next);
        if fnext <= fc || h > 1e12 {
            return golden_max(f, prev.min(next), prev.max(next), 1e-11);
        }
        prev = cur;
        cur = next;
        fc = fnext;
    }
}

/// Numerical maximization of `H` by cyclic coordinate search, compared with
/// the analytic stationary point.
pub fn argmax_check(utility: &PowerUtility, market: &MarketSnapshot, p: f64, q: &DVector<f64>) -> ArgmaxReport {
    let m = market.excess.len();
    let analytic = hamiltonian_argmax(utility, market, p, q);
    let mut pi = DVector::zeros(m);
    for _ in 0..10_000 {
        let before = pi.clone();
        for i in 0..m {
            let f = |x: f64| {
                let mut trial = pi.clone();
                trial[i] = x;
                eval_hamiltonian(utility, market, &trial, 1.0, p, q)
            };
            pi[i] = line_max(&f, pi[i]);
        }
        if (&pi - &before).amax() < 1e-12 {
            break;
        }
    }
    ArgmaxReport {
        max_abs_diff: (&pi - &analytic).amax(),
        analytic: analytic.iter().copied().collect(),
        numerical: pi.iter().copied().collect(),
    }
}

/// How the adjoint `p = exp(p̂)` is produced along the paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjointPathMode {
    /// Evaluate the solution's `p̂` at each state.
    Evaluated,
    /// Euler of `dp̂ = -f dt + q̂ dW` from the solution's `p̂(0)`.
    Forward,
}

/// `p = exp(p̂)` per step and path, step-major `(K+1) * P`.
pub fn adjoint_paths(
    solution: &dyn AdjointSolution,
    factors: &FactorPaths,
    coeffs: &dyn Coefficients,
    gamma: f64,
    mode: AdjointPathMode,
) -> Result<Vec<f64>> {
    let grid = factors.grid;
    let kk = grid.steps;
    let pt = factors.n_paths;
    let dt = grid.dt();
    let per_path: Vec<Result<Vec<f64>>> = (0..pt)
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(kk + 1);
            let mut ph = solution.p_hat(0, 0.0, &factors.state(0, p));
            out.push(ph.exp());
            for k in 0..kk {
                match mode {
                    AdjointPathMode::Evaluated => {
                        ph = solution.p_hat(k + 1, grid.time(k + 1), &factors.state(k + 1, p));
                    }
                    AdjointPathMode::Forward => {
                        let s = factors.state(k, p);
                        let snap = MarketSnapshot::evaluate(coeffs, &s)?;
                        let q = solution.q_hat(k, grid.time(k), &s);
                        let dw = factors.dw(k, p);
                        ph += -driver_f(gamma, &snap, &q) * dt + q.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                out.push(ph.exp());
            }
            Ok(out)
        })
        .collect();
    let mut out = vec![0.0; (kk + 1) * pt];
    for (p, r) in per_path.into_iter().enumerate() {
        for (k, v) in r?.into_iter().enumerate() {
            out[k * pt + p] = v;
        }
    }
    Ok(out)
}

/// Grid indices `round(iK/5)`, `i = 1..=5`, deduplicated.
pub fn checkpoints(steps: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (1..=5)
        .map(|i| ((i * steps) as f64 / 5.0).round() as usize)
        .filter(|&k| k > 0)
        .collect();
    ks.dedup();
    ks
}

fn product(wealth: &WealthPaths, p: &[f64], k: usize) -> Vec<f64> {
    let pt = wealth.n_paths;
    (0..pt).map(|i| wealth.x_tilde(k, i) * p[k * pt + i]).collect()
}

/// Tests `E[X̃(t_j) p(t_j)] = X̃(0) p(0)` at the checkpoints.
/// The statistic is the largest absolute z-score.
pub fn martingale_test(factors: &FactorPaths, wealth: &WealthPaths, p: &[f64], name: &str) -> TestReport {
    let pt = factors.n_paths;
    let start = product(wealth, p, 0);
    let target = start.iter().sum::<f64>() / pt as f64;
    let mut rep = TestReport::from_paths(name, factors);
    for k in checkpoints(factors.grid.steps) {
        let e = mean_se_paired(&product(wealth, p, k), factors.mc.antithetic);
        let z = e.z_score(target);
        if z.abs() >= rep.statistic.abs() {
            rep.statistic = z;
            rep.se = e.se;
        }
    }
    rep.passed = rep.statistic.abs() <= SE_BAND;
    rep
}

/// Regresses `X̃p` increments between consecutive checkpoints on the basis
/// of the state at the earlier one, and tests every coefficient against zero
/// with a heteroskedasticity-robust standard error. The two-sided 3-SE level
/// is split over all coefficients.
pub fn increment_regression_test(
    factors: &FactorPaths,
    wealth: &WealthPaths,
    p: &[f64],
    basis: &BasisSpec,
    name: &str,
) -> Result<TestReport> {
    let pt = factors.n_paths;
    let width = factors.state_width();
    let mut ks = vec![0];
    ks.extend(checkpoints(factors.grid.steps));
    let mut z_all = Vec::new();
    let mut rep = TestReport::from_paths(name, factors);
    for w in ks.windows(2) {
        let (k0, k1) = (w[0], w[1]);
        let a = product(wealth, p, k0);
        let b = product(wealth, p, k1);
        let y: Vec<f64> = a.iter().zip(&b).map(|(u, v)| v - u).collect();
        let mut data = vec![0.0; pt * width];
        for i in 0..pt {
            factors.state_features(k0, i, &mut data[i * width..(i + 1) * width]);
        }
        let inputs = Inputs { data: &data, width };
        let f = fit(&inputs, &y, 1, basis, k0)?;
        let nf = f.coefficients.len();
        let mut xtx = DMatrix::<f64>::zeros(nf, nf);
        let mut rows = Vec::with_capacity(pt);
        let mut scratch = Vec::new();
        for i in 0..pt {
            f.features(&data[i * width..(i + 1) * width], &mut scratch);
            let r = DVector::from_column_slice(&scratch);
            xtx += &r * r.transpose();
            rows.push(r);
        }
        let Some(inv) = xtx.clone().try_inverse() else {
            continue;
        };
        let mut meat = DMatrix::<f64>::zeros(nf, nf);
        for (i, r) in rows.iter().enumerate() {
            let e = y[i] - f.predict(&data[i * width..(i + 1) * width], 0);
            meat += r * r.transpose() * (e * e);
        }
        let cov = &inv * meat * &inv;
        for j in 0..nf {
            let se = cov[(j, j)].max(0.0).sqrt();
            let c = f.coefficients[j];
            let z = if se > 0.0 {
                c / se
            } else if c.abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            z_all.push((z, se));
        }
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let level = 2.0 * n.cdf(-SE_BAND);
    let crit = n.inverse_cdf(1.0 - level / (2.0 * z_all.len().max(1) as f64));
    for (z, se) in z_all {
        if z.abs() >= rep.statistic.abs() {
            rep.statistic = z;
            rep.se = se;
        }
    }
    rep.tolerance = crit;
    rep.passed = rep.statistic.abs() <= crit;
    Ok(rep)
}

/// One-sided test that `E[X̃(t_{j+1})p(t_{j+1}) - X̃(t_j)p(t_j)] <= 3 SE` over
/// consecutive checkpoints (starting at 0). The statistic is the largest z.
pub fn supermartingale_test(factors: &FactorPaths, wealth: &WealthPaths, p: &[f64], name: &str) -> TestReport {
    let mut ks = vec![0];
    ks.extend(checkpoints(factors.grid.steps));
    let mut rep = TestReport::from_paths(name, factors);
    rep.statistic = f64::NEG_INFINITY;
    for w in ks.windows(2) {
        let a = product(wealth, p, w[0]);
        let b = product(wealth, p, w[1]);
        let d: Vec<f64> = a.iter().zip(&b).map(|(u, v)| v - u).collect();
        let e = mean_se_paired(&d, factors.mc.antithetic);
        let z = e.z_score(0.0);
        if z > rep.statistic {
            rep.statistic = z;
            rep.se = e.se;
        }
    }
    rep.passed = rep.statistic <= SE_BAND;
    rep
}

/// Per-step additive perturbation of a base strategy.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub label: String,
    /// One shift vector per grid step.
    pub shifts: Vec<DVector<f64>>,
}

/// Four constant shifts `±0.25, ±0.5` followed by `count - 4` step-wise
/// shifts drawn from the same set with a seeded generator.
pub fn perturbations(n_assets: usize, steps: usize, count: usize, seed: u64) -> Vec<Perturbation> {
    const LEVELS: [f64; 4] = [0.25, -0.25, 0.5, -0.5];
    let mut out: Vec<Perturbation> = LEVELS
        .iter()
        .take(count)
        .map(|&e| Perturbation {
            label: format!("constant {e:+}"),
            shifts: vec![DVector::from_element(n_assets, e); steps],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in out.len()..count {
        let shifts = (0..steps)
            .map(|_| DVector::from_fn(n_assets, |_, _| LEVELS[rng.random_range(0..LEVELS.len())]))
            .collect();
        out.push(Perturbation {
            label: format!("stepwise {i}"),
            shifts,
        });
    }
    out
}

/// `base + shift(step)`.
pub struct PerturbedStrategy<'a> {
    pub base: &'a dyn Strategy,
    pub perturbation: &'a Perturbation,
}

impl Strategy for PerturbedStrategy<'_> {
    fn weights(&self, ctx: &StrategyContext) -> Result<DVector<f64>> {
        Ok(self.base.weights(ctx)? + &self.perturbation.shifts[ctx.step])
    }
}

/// Expected terminal utility of the candidate strategy and its dominance reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominanceOutcome {
    pub optimal_utility: Estimate,
    pub reports: Vec<TestReport>,
}

/// Paired-difference dominance of `π̂` over each perturbation on common
/// random numbers, plus the check `E[U(X^π̂(T))] = value` within 3 SE.
pub fn utility_dominance_test(
    factors: &FactorPaths,
    coeffs: &dyn Coefficients,
    utility: &PowerUtility,
    optimal: &dyn Strategy,
    candidates: &[Perturbation],
    value: f64,
) -> Result<DominanceOutcome> {
    let paired = factors.mc.antithetic;
    let best = simulate_wealth(factors, coeffs, utility, optimal)?;
    let u_best = best.terminal_utility();
    let est = mean_se_paired(u_best, paired);
    let mut reports = Vec::with_capacity(candidates.len() + 1);
    let mut head = TestReport::from_paths("value matches the adjoint", factors);
    head.statistic = est.z_score(value);
    head.se = est.se;
    head.passed = head.statistic.abs() <= SE_BAND;
    reports.push(head);
    for c in candidates {
        let strat = PerturbedStrategy {
            base: optimal,
            perturbation: c,
        };
        let w = simulate_wealth(factors, coeffs, utility, &strat)?;
        let d: Vec<f64> = w.terminal_utility().iter().zip(u_best).map(|(a, b)| a - b).collect();
        let e = mean_se_paired(&d, paired);
        let mut r = TestReport::from_paths(format!("dominates {}", c.label), factors);
        r.statistic = e.z_score(0.0);
        r.se = e.se;
        r.passed = r.statistic <= SE_BAND;
        reports.push(r);
    }
    Ok(DominanceOutcome {
        optimal_utility: est,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay_sde::{simulate_factors, DelaySpec, History, McConfig, TimeGrid};
    use crate::fbsde_solver::{AdjointStrategy, DeterministicAdjoint};
    use crate::market_model::{AffineModel, ConstantCoefficients, ModelDims, OwnedState};
    use approx::assert_abs_diff_eq;

    fn constant(r: f64, mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> AffineModel {
        let m = mu.len();
        let n = sigma[0].len();
        AffineModel::from_constant(
            &ConstantCoefficients {
                r,
                mu,
                sigma,
                b: None,
                sigma_f: None,
                h_weights: None,
            },
            ModelDims::new(m, 1, n).unwrap(),
        )
        .unwrap()
    }

    fn snap(c: &AffineModel) -> MarketSnapshot {
        let s = OwnedState::new(vec![0.0], 0.0, vec![]);
        MarketSnapshot::evaluate(c, &s.as_state()).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let u = PowerUtility::new(0.5, 1.0).unwrap();
        let m = snap(&constant(0.0, vec![0.05], vec![vec![0.2]]));
        let q = DVector::zeros(1);
        let h = eval_hamiltonian(&u, &m, &DVector::from_element(1, 1.0), 2.0, 1.0, &q);
        assert_abs_diff_eq!(h, 0.04, epsilon = 1e-15);
        let m = snap(&constant(0.03, vec![0.05], vec![vec![0.2]]));
        let h = eval_hamiltonian(&u, &m, &DVector::zeros(1), 2.0, 1.5, &q);
        assert_abs_diff_eq!(h, 0.5 * 2.0 * 0.03 * 1.5, epsilon = 1e-15);
    }

    #[test]
    fn argmax_matches_first_order_condition() {
        let u = PowerUtility::new(0.5, 1.0).unwrap();
        let m = snap(&constant(0.03, vec![0.08], vec![vec![0.2]]));
        let rep = argmax_check(&u, &m, 1.0, &DVector::zeros(1));
        assert_abs_diff_eq!(rep.analytic[0], 2.5, epsilon = 1e-12);
        assert!(rep.max_abs_diff < 1e-6, "{rep:?}");

        let m = snap(&constant(0.03, vec![0.03], vec![vec![0.2]]));
        let rep = argmax_check(&u, &m, 1.0, &DVector::zeros(1));
        assert_eq!(rep.analytic[0], 0.0);
        assert!(rep.max_abs_diff < 1e-6);

        let m = snap(&constant(0.02, vec![0.07, 0.05], vec![vec![0.25, 0.05], vec![0.1, 0.3]]));
        let q = DVector::from_vec(vec![0.3, -0.2]);
        let rep = argmax_check(&u, &m, 1.7, &q);
        assert!(rep.max_abs_diff < 1e-5, "{rep:?}");
    }

    #[test]
    fn checkpoint_grid() {
        assert_eq!(checkpoints(100), vec![20, 40, 60, 80, 100]);
        assert_eq!(checkpoints(3), vec![1, 2, 3]);
    }

    fn merton_paths(n: usize) -> (AffineModel, FactorPaths) {
        let c = constant(0.03, vec![0.08], vec![vec![0.2]]);
        let delay = DelaySpec::new(1.0, f64::INFINITY, vec![0.0], History::Constant).unwrap();
        let f = simulate_factors(&c, &delay, &TimeGrid::new(1.0, 20).unwrap(), &McConfig::new(n, 11)).unwrap();
        (c, f)
    }

    #[test]
    fn trivial_market_is_exactly_constant() {
        let c = constant(0.0, vec![0.0], vec![vec![0.2]]);
        let delay = DelaySpec::new(1.0, f64::INFINITY, vec![0.0], History::Constant).unwrap();
        let f = simulate_factors(&c, &delay, &TimeGrid::new(1.0, 10).unwrap(), &McConfig::new(64, 1)).unwrap();
        let u = PowerUtility::new(0.5, 1.0).unwrap();
        let zero = |_: &StrategyContext| Ok(DVector::zeros(1));
        let w = simulate_wealth(&f, &c, &u, &zero).unwrap();
        let p = vec![1.0; 11 * 64];
        let rep = martingale_test(&f, &w, &p, "trivial");
        assert!(rep.passed);
        assert_eq!(rep.statistic, 0.0);
    }

    #[test]
    fn merton_martingale_and_negative_control() {
        let (c, f) = merton_paths(20_000);
        let u = PowerUtility::new(0.5, 1.0).unwrap();
        let s0 = OwnedState::new(vec![0.0], 0.0, vec![]);
        let sol = DeterministicAdjoint::new(&c, 0.5, 1.0, &s0.as_state()).unwrap();
        let p = adjoint_paths(&sol, &f, &c, 0.5, AdjointPathMode::Evaluated).unwrap();
        let w = simulate_wealth(&f, &c, &u, &AdjointStrategy::new(&sol, 0.5)).unwrap();
        assert!(martingale_test(&f, &w, &p, "optimal").passed);
        assert!(supermartingale_test(&f, &w, &p, "optimal").passed);
        let reg = increment_regression_test(&f, &w, &p, &BasisSpec::new(1), "optimal").unwrap();
        assert!(reg.passed, "{reg:?}");

        for level in [0.0, 6.0] {
            let shifted = move |_: &StrategyContext| Ok(DVector::from_element(1, level));
            let w = simulate_wealth(&f, &c, &u, &shifted).unwrap();
            let rep = supermartingale_test(&f, &w, &p, "shifted");
            assert!(rep.passed);
            let rep = martingale_test(&f, &w, &p, "shifted");
            assert!(!rep.passed && rep.statistic < 0.0, "{rep:?}");
        }
    }

    #[test]
    fn identical_strategy_has_zero_difference() {
        let (c, f) = merton_paths(2_000);
        let u = PowerUtility::new(0.5, 1.0).unwrap();
        let s0 = OwnedState::new(vec![0.0], 0.0, vec![]);
        let sol = DeterministicAdjoint::new(&c, 0.5, 1.0, &s0.as_state()).unwrap();
        let none = Perturbation {
            label: "none".into(),
            shifts: vec![DVector::zeros(1); 20],
        };
        let out = utility_dominance_test(&f, &c, &u, &AdjointStrategy::new(&sol, 0.5), &[none], 2.0947).unwrap();
        assert_eq!(out.reports[1].statistic, 0.0);
        assert!(out.reports[1].passed);
    }

    #[test]
    fn perturbation_set() {
        let ps = perturbations(2, 5, 10, 3);
        assert_eq!(ps.len(), 10);
        assert_eq!(ps[2].shifts[4][1], 0.5);
        assert!(ps[9].shifts.iter().all(|s| s.iter().all(|e| [0.25, -0.25, 0.5, -0.5].contains(e))));
        let again = perturbations(2, 5, 10, 3);
        assert_eq!(ps[7].shifts, again[7].shifts);
    }
}
