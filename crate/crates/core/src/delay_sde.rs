//! Simulation of the delayed factor system `(Y, V, Z)` and of wealth under a strategy.
//!
//! Path storage is step-major: all paths at step `k` are contiguous, which is
//! the access pattern of the backward regressions.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_model::{Coefficients, FactorState, MarketSnapshot, PowerUtility};

/// Paths simulated per parallel task. Fixed so results do not depend on the pool size.
pub(crate) const BLOCK: usize = 512;

/// Uniform grid `t_k = k T / K`, `k = 0..=K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon", format!("need 0 < T < inf, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::invalid("steps", "need at least one time step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Grid index of `t` when it lies on the grid (within 1e-9 steps).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        ((x - k).abs() < 1e-9 && k >= 0.0 && k <= self.steps as f64).then_some(k as usize)
    }
}

/// Factor path on `[-delta, 0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum History {
    /// `Y(s) = y0` for all `s <= 0`.
    Constant,
    /// Piecewise-linear segment; `times` ascending and ending at 0.
    Grid { times: Vec<f64>, values: Vec<Vec<f64>> },
}

/// Delay parameters and initial factor segment.
#[derive(Clone, Debug, PartialEq)]
pub struct DelaySpec {
    pub lambda: f64,
    /// `f64::INFINITY` selects the integral-only model without a pointwise lag.
    pub delta: f64,
    pub y0: Vec<f64>,
    pub history: History,
}

/// Below this weight `e^{lambda s}` the infinite-delay integral is truncated.
const INFINITE_TRUNCATION: f64 = 1e-12;
/// Trapezoid panels: at least this many, and `lambda * ds <= 5e-5`.
const MIN_PANELS: usize = 20_000;
const MAX_PANELS: usize = 2_000_000;

impl DelaySpec {
    pub fn new(lambda: f64, delta: f64, y0: Vec<f64>, history: History) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("lambda", format!("need lambda > 0, got {lambda}")));
        }
        if !(delta > 0.0) {
            return Err(Error::invalid("delta", format!("need delta > 0, got {delta}")));
        }
        if y0.is_empty() || y0.iter().any(|y| !y.is_finite()) {
            return Err(Error::invalid("y0", "need a finite, non-empty initial factor"));
        }
        if let History::Grid { times, values } = &history {
            if times.len() < 2 || times.len() != values.len() {
                return Err(Error::MissingHistory(
                    "history grid needs at least two nodes and one value per node".into(),
                ));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::MissingHistory("history times must be increasing".into()));
            }
            if times[times.len() - 1] != 0.0 {
                return Err(Error::MissingHistory("history must end at s = 0".into()));
            }
            if values.iter().any(|v| v.len() != y0.len()) {
                return Err(Error::MissingHistory("history values must match factor dimension".into()));
            }
            let last = &values[values.len() - 1];
            if last.iter().zip(&y0).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(Error::invalid("history", "history(0) must equal y0"));
            }
        }
        Ok(Self {
            lambda,
            delta,
            y0,
            history,
        })
    }

    pub fn is_infinite(&self) -> bool {
        self.delta.is_infinite()
    }

    /// Earliest history time the model reads.
    fn history_start(&self) -> f64 {
        if self.is_infinite() {
            INFINITE_TRUNCATION.ln() / self.lambda
        } else {
            -self.delta
        }
    }

    /// `Y(s)` for `s <= 0`.
    pub fn history_at(&self, s: f64, out: &mut [f64]) -> Result<()> {
        match &self.history {
            History::Constant => {
                out.copy_from_slice(&self.y0);
                Ok(())
            }
            History::Grid { times, values } => {
                let tol = 1e-12 * (1.0 + s.abs());
                if s < times[0] - tol || s > tol {
                    return Err(Error::MissingHistory(format!(
                        "s = {s} outside [{}, 0]",
                        times[0]
                    )));
                }
                let j = times.partition_point(|&t| t <= s).clamp(1, times.len() - 1);
                let (t0, t1) = (times[j - 1], times[j]);
                let w = ((s - t0) / (t1 - t0)).clamp(0.0, 1.0);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (1.0 - w) * values[j - 1][i] + w * values[j][i];
                }
                Ok(())
            }
        }
    }
}

/// `V(0) = int_{-delta}^0 e^{lambda s} h(Y(s)) ds` by the trapezoidal rule.
pub fn init_v(delay: &DelaySpec, h: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
    let a = delay.history_start();
    if let History::Grid { times, .. } = &delay.history {
        if times[0] > a + 1e-12 * (1.0 + a.abs()) {
            return Err(Error::MissingHistory(format!(
                "history starts at {} but the delay integral needs s = {a}",
                times[0]
            )));
        }
    }
    let n = ((-a * delay.lambda / 5e-5).ceil() as usize).clamp(MIN_PANELS, MAX_PANELS);
    let ds = -a / n as f64;
    let mut y = vec![0.0; delay.y0.len()];
    let mut sum = 0.0;
    for j in 0..=n {
        let s = if j == n { 0.0 } else { a + j as f64 * ds };
        delay.history_at(s, &mut y)?;
        let w = if j == 0 || j == n { 0.5 } else { 1.0 };
        sum += w * (delay.lambda * s).exp() * h(&y);
    }
    Ok(sum * ds)
}

/// How `Z_k = Y(t_k - delta)` is read from the stored path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LagLookup {
    None,
    /// `delta = d * dt`.
    Exact(usize),
    /// `delta = (d + frac) * dt`, linear interpolation between nodes.
    Interpolated { steps: usize, frac: f64 },
}

impl LagLookup {
    pub fn new(delta: f64, grid: &TimeGrid) -> Self {
        if delta.is_infinite() {
            return LagLookup::None;
        }
        let x = delta / grid.dt();
        let d = x.round();
        if (x - d).abs() < 1e-9 * x.max(1.0) {
            LagLookup::Exact(d as usize)
        } else {
            LagLookup::Interpolated {
                steps: x.floor() as usize,
                frac: x - x.floor(),
            }
        }
    }
}

/// Weights `(w0, w1)` with `int_0^dt e^{-lambda (dt - s)} g(s) ds = w0 g(0) + w1 g(dt)`
/// exact for affine `g`.
fn exponential_weights(lambda: f64, dt: f64) -> (f64, f64) {
    let a = lambda * dt;
    let e = (-a).exp();
    // 1 - e(1 + a) loses all digits for tiny a; use the series there.
    let tail = if a < 1e-4 {
        a * a * (0.5 - a / 3.0 + a * a / 8.0)
    } else {
        1.0 - e * (1.0 + a)
    };
    let w0 = tail / (lambda * lambda * dt);
    let total = if a < 1e-8 { dt * (1.0 - a / 2.0) } else { (1.0 - e) / lambda };
    (w0, total - w0)
}

/// Monte Carlo settings shared by all simulators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Paths `2j` and `2j + 1` use negated Brownian increments.
    pub antithetic: bool,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            antithetic: false,
        }
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::invalid("n_paths", "need at least one path"));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::invalid("n_paths", "antithetic sampling needs an even path count"));
        }
        Ok(())
    }

    /// Independent stream for `path`; antithetic partners share one.
    pub fn rng_for(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let stream = if self.antithetic { path / 2 } else { path };
        rng.set_stream(stream as u64);
        rng
    }

    pub fn sign_for(&self, path: usize) -> f64 {
        if self.antithetic && path % 2 == 1 {
            -1.0
        } else {
            1.0
        }
    }
}

/// Simulated factor paths on a grid, step-major.
#[derive(Clone, Debug)]
pub struct FactorPaths {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n_factors: usize,
    pub n_noise: usize,
    pub mc: McConfig,
    pub lambda: f64,
    pub delta: f64,
    /// `(K+1) * P * n`
    y: Vec<f64>,
    /// `(K+1) * P`
    v: Vec<f64>,
    /// `(K+1) * P * n`, empty when `delta` is infinite.
    z: Vec<f64>,
    /// `K * P * N`
    dw: Vec<f64>,
}

impl FactorPaths {
    pub fn has_lag(&self) -> bool {
        !self.z.is_empty()
    }

    pub fn state(&self, k: usize, p: usize) -> FactorState<'_> {
        let n = self.n_factors;
        let i = (k * self.n_paths + p) * n;
        FactorState {
            y: &self.y[i..i + n],
            v: self.v[k * self.n_paths + p],
            z: if self.z.is_empty() { &[] } else { &self.z[i..i + n] },
        }
    }

    pub fn dw(&self, k: usize, p: usize) -> &[f64] {
        let m = self.n_noise;
        let i = (k * self.n_paths + p) * m;
        &self.dw[i..i + m]
    }

    pub fn y(&self, k: usize, p: usize) -> &[f64] {
        self.state(k, p).y
    }

    pub fn v(&self, k: usize, p: usize) -> f64 {
        self.v[k * self.n_paths + p]
    }

    /// Number of regression inputs `(y, v, z)` per state.
    pub fn state_width(&self) -> usize {
        self.n_factors * if self.has_lag() { 2 } else { 1 } + 1
    }

    /// Writes `(y, v, z)` of `(k, p)` into `out[..state_width()]`.
    pub fn state_features(&self, k: usize, p: usize, out: &mut [f64]) {
        let s = self.state(k, p);
        let n = self.n_factors;
        out[..n].copy_from_slice(s.y);
        out[n] = s.v;
        if self.has_lag() {
            out[n + 1..2 * n + 1].copy_from_slice(s.z);
        }
    }
}

/// Euler-Maruyama for `Y`, exponential integrator for `V`, `Z` from the stored path.
pub fn simulate_factors(
    coeffs: &dyn Coefficients,
    delay: &DelaySpec,
    grid: &TimeGrid,
    mc: &McConfig,
) -> Result<FactorPaths> {
    mc.validate()?;
    let dims = coeffs.dims();
    let n = dims.n_factors;
    let nn = dims.n_noise;
    if delay.y0.len() != n {
        return Err(Error::invalid(
            "y0",
            format!("expected {n} factor components, got {}", delay.y0.len()),
        ));
    }
    if delay.is_infinite() && coeffs.uses_pointwise_delay() {
        return Err(Error::invalid(
            "delta",
            "coefficients read the pointwise lag Z, which is undefined for an infinite delay",
        ));
    }
    let v0 = init_v(delay, &|y| coeffs.delay_transform(y))?;
    let lag = LagLookup::new(delay.delta, grid);
    let kk = grid.steps;
    let p_total = mc.n_paths;
    let has_lag = !matches!(lag, LagLookup::None);

    let blocks: Vec<(usize, usize)> = (0..p_total)
        .step_by(BLOCK)
        .map(|s| (s, (s + BLOCK).min(p_total)))
        .collect();
    let results: Vec<Result<BlockPaths>> = blocks
        .par_iter()
        .map(|&(start, end)| simulate_block(coeffs, delay, grid, mc, lag, v0, start, end))
        .collect();

    let mut y = vec![0.0; (kk + 1) * p_total * n];
    let mut v = vec![0.0; (kk + 1) * p_total];
    let mut z = if has_lag { vec![0.0; (kk + 1) * p_total * n] } else { Vec::new() };
    let mut dw = vec![0.0; kk * p_total * nn];
    for (&(start, end), res) in blocks.iter().zip(results) {
        let b = res?;
        let len = end - start;
        for k in 0..=kk {
            let dst = (k * p_total + start) * n;
            let src = k * len * n;
            y[dst..dst + len * n].copy_from_slice(&b.y[src..src + len * n]);
            v[k * p_total + start..k * p_total + end].copy_from_slice(&b.v[k * len..(k + 1) * len]);
            if has_lag {
                z[dst..dst + len * n].copy_from_slice(&b.z[src..src + len * n]);
            }
            if k < kk {
                let dst = (k * p_total + start) * nn;
                let src = k * len * nn;
                dw[dst..dst + len * nn].copy_from_slice(&b.dw[src..src + len * nn]);
            }
        }
    }
    Ok(FactorPaths {
        grid: *grid,
        n_paths: p_total,
        n_factors: n,
        n_noise: nn,
        mc: *mc,
        lambda: delay.lambda,
        delta: delay.delta,
        y,
        v,
        z,
        dw,
    })
}

struct BlockPaths {
    y: Vec<f64>,
    v: Vec<f64>,
    z: Vec<f64>,
    dw: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn simulate_block(
    coeffs: &dyn Coefficients,
    delay: &DelaySpec,
    grid: &TimeGrid,
    mc: &McConfig,
    lag: LagLookup,
    v0: f64,
    start: usize,
    end: usize,
) -> Result<BlockPaths> {
    let n = delay.y0.len();
    let nn = coeffs.dims().n_noise;
    let kk = grid.steps;
    let len = end - start;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let has_lag = !matches!(lag, LagLookup::None);
    let decay = (-delay.lambda * dt).exp();
    let (w0, w1) = exponential_weights(delay.lambda, dt);
    let lag_weight = if has_lag { (-delay.lambda * delay.delta).exp() } else { 0.0 };

    let mut out = BlockPaths {
        y: vec![0.0; (kk + 1) * len * n],
        v: vec![0.0; (kk + 1) * len],
        z: if has_lag { vec![0.0; (kk + 1) * len * n] } else { Vec::new() },
        dw: vec![0.0; kk * len * nn],
    };
    // Per-path scratch, path-major.
    let mut py = vec![0.0; (kk + 1) * n];
    let mut pz = vec![0.0; (kk + 1) * n];
    let mut pv = vec![0.0; kk + 1];
    let mut noise = vec![0.0; nn];
    let mut tmp = vec![0.0; n];

    for (local, path) in (start..end).enumerate() {
        let mut rng = mc.rng_for(path);
        let sign = mc.sign_for(path);
        py[..n].copy_from_slice(&delay.y0);
        pv[0] = v0;
        if has_lag {
            lagged(&lag, delay, grid, &py, 0, &mut tmp)?;
            pz[..n].copy_from_slice(&tmp);
        }
        for k in 0..kk {
            for e in noise.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *e = sign * g * sqrt_dt;
            }
            let (cur, next) = py.split_at_mut((k + 1) * n);
            let yk = &cur[k * n..];
            let zk = if has_lag { &pz[k * n..(k + 1) * n] } else { &[][..] };
            let s = FactorState { y: yk, v: pv[k], z: zk };
            let b = coeffs.factor_drift(&s);
            let sf = coeffs.factor_volatility(&s);
            let dwv = DVector::from_column_slice(&noise);
            let diff = &sf * dwv;
            for i in 0..n {
                next[i] = yk[i] + b[i] * dt + diff[i];
            }
            if has_lag {
                lagged(&lag, delay, grid, &py, k + 1, &mut tmp)?;
                pz[(k + 1) * n..(k + 2) * n].copy_from_slice(&tmp);
            }
            let g = |yy: &[f64], zz: &[f64]| {
                let mut g = coeffs.delay_transform(yy);
                if has_lag {
                    g -= lag_weight * coeffs.delay_transform(zz);
                }
                g
            };
            let gk = g(&py[k * n..(k + 1) * n], &pz[k * n..(k + 1) * n]);
            let gk1 = g(&py[(k + 1) * n..(k + 2) * n], &pz[(k + 1) * n..(k + 2) * n]);
            pv[k + 1] = decay * pv[k] + w0 * gk + w1 * gk1;

            if !pv[k + 1].is_finite() || py[(k + 1) * n..(k + 2) * n].iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { step: k + 1, path });
            }
            let dst = (k * len + local) * nn;
            out.dw[dst..dst + nn].copy_from_slice(&noise);
        }
        for k in 0..=kk {
            let dst = (k * len + local) * n;
            out.y[dst..dst + n].copy_from_slice(&py[k * n..(k + 1) * n]);
            out.v[k * len + local] = pv[k];
            if has_lag {
                out.z[dst..dst + n].copy_from_slice(&pz[k * n..(k + 1) * n]);
            }
        }
    }
    Ok(out)
}

/// `Y(t_k - delta)` given the path up to step `k`.
fn lagged(
    lag: &LagLookup,
    delay: &DelaySpec,
    grid: &TimeGrid,
    path_y: &[f64],
    k: usize,
    out: &mut [f64],
) -> Result<()> {
    let n = out.len();
    let node = |j: usize| &path_y[j * n..(j + 1) * n];
    match *lag {
        LagLookup::None => Ok(()),
        LagLookup::Exact(d) => {
            if k >= d {
                out.copy_from_slice(node(k - d));
                Ok(())
            } else {
                delay.history_at(grid.time(k) - delay.delta, out)
            }
        }
        LagLookup::Interpolated { steps, frac } => {
            // t_k - delta lies between nodes k - steps - 1 and k - steps.
            if k > steps {
                let (a, b) = (node(k - steps - 1), node(k - steps));
                for i in 0..n {
                    out[i] = frac * a[i] + (1.0 - frac) * b[i];
                }
                Ok(())
            } else {
                let s = grid.time(k) - delay.delta;
                if s <= 0.0 {
                    delay.history_at(s, out)
                } else {
                    // Unreachable for k <= steps since then t_k <= steps * dt <= delta.
                    out.copy_from_slice(node(0));
                    Ok(())
                }
            }
        }
    }
}

/// Context handed to a [`Strategy`] at one grid point of one path.
pub struct StrategyContext<'a> {
    pub step: usize,
    pub time: f64,
    pub path: usize,
    pub state: FactorState<'a>,
    pub market: &'a MarketSnapshot,
}

/// Portfolio weights `pi` (fractions of wealth, length m).
pub trait Strategy: Send + Sync {
    fn weights(&self, ctx: &StrategyContext) -> Result<DVector<f64>>;
}

impl<F> Strategy for F
where
    F: Fn(&StrategyContext) -> Result<DVector<f64>> + Send + Sync,
{
    fn weights(&self, ctx: &StrategyContext) -> Result<DVector<f64>> {
        self(ctx)
    }
}

/// Wealth `X`, transformed wealth `U(X)` and the weights used, step-major.
#[derive(Clone, Debug)]
pub struct WealthPaths {
    pub n_paths: usize,
    pub n_assets: usize,
    pub steps: usize,
    /// `(K+1) * P`
    pub x: Vec<f64>,
    /// `(K+1) * P`
    pub x_tilde: Vec<f64>,
    /// `K * P * m`
    pub pi: Vec<f64>,
}

impl WealthPaths {
    pub fn x(&self, k: usize, p: usize) -> f64 {
        self.x[k * self.n_paths + p]
    }

    pub fn x_tilde(&self, k: usize, p: usize) -> f64 {
        self.x_tilde[k * self.n_paths + p]
    }

    pub fn pi(&self, k: usize, p: usize) -> &[f64] {
        let m = self.n_assets;
        let i = (k * self.n_paths + p) * m;
        &self.pi[i..i + m]
    }

    pub fn terminal_utility(&self) -> &[f64] {
        let k = self.steps;
        &self.x_tilde[k * self.n_paths..(k + 1) * self.n_paths]
    }
}

/// Log-Euler wealth: `d log X = (r + pi.(mu - r) - pi' sigma sigma' pi / 2) dt + pi' sigma dW`.
pub fn simulate_wealth(
    factors: &FactorPaths,
    coeffs: &dyn Coefficients,
    utility: &PowerUtility,
    strategy: &dyn Strategy,
) -> Result<WealthPaths> {
    let grid = factors.grid;
    let kk = grid.steps;
    let pt = factors.n_paths;
    let m = coeffs.dims().n_assets;
    let dt = grid.dt();

    let fixed = if coeffs.market_is_constant() {
        Some(MarketSnapshot::evaluate(coeffs, &factors.state(0, 0))?)
    } else {
        None
    };

    let blocks: Vec<(usize, usize)> = (0..pt).step_by(BLOCK).map(|s| (s, (s + BLOCK).min(pt))).collect();
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = blocks
        .par_iter()
        .map(|&(start, end)| {
            let len = end - start;
            let mut logx = vec![0.0; (kk + 1) * len];
            let mut pis = vec![0.0; kk * len * m];
            for (local, p) in (start..end).enumerate() {
                let mut lx = utility.initial_wealth.ln();
                logx[local] = lx;
                for k in 0..kk {
                    let state = factors.state(k, p);
                    let evaluated;
                    let snap = match &fixed {
                        Some(s) => s,
                        None => {
                            evaluated = MarketSnapshot::evaluate(coeffs, &state)?;
                            &evaluated
                        }
                    };
                    let ctx = StrategyContext {
                        step: k,
                        time: grid.time(k),
                        path: p,
                        state,
                        market: snap,
                    };
                    let pi = strategy.weights(&ctx)?;
                    if pi.len() != m || pi.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite { step: k, path: p });
                    }
                    let exposure = snap.volatility.tr_mul(&pi);
                    let dw = factors.dw(k, p);
                    let noise: f64 = exposure.iter().zip(dw).map(|(a, b)| a * b).sum();
                    lx += (snap.rate + pi.dot(&snap.excess) - 0.5 * exposure.norm_squared()) * dt + noise;
                    if !lx.is_finite() {
                        return Err(Error::NonFinite { step: k + 1, path: p });
                    }
                    logx[(k + 1) * len + local] = lx;
                    let dst = (k * len + local) * m;
                    pis[dst..dst + m].copy_from_slice(pi.as_slice());
                }
            }
            Ok((logx, pis))
        })
        .collect();

    let mut x = vec![0.0; (kk + 1) * pt];
    let mut x_tilde = vec![0.0; (kk + 1) * pt];
    let mut pi = vec![0.0; kk * pt * m];
    for (&(start, end), res) in blocks.iter().zip(results) {
        let (logx, pis) = res?;
        let len = end - start;
        for k in 0..=kk {
            for local in 0..len {
                let lx = logx[k * len + local];
                let xv = lx.exp();
                x[k * pt + start + local] = xv;
                x_tilde[k * pt + start + local] = (utility.gamma * lx).exp() / utility.gamma;
            }
            if k < kk {
                let dst = (k * pt + start) * m;
                pi[dst..dst + len * m].copy_from_slice(&pis[k * len * m..(k + 1) * len * m]);
            }
        }
    }
    Ok(WealthPaths {
        n_paths: pt,
        n_assets: m,
        steps: kk,
        x,
        x_tilde,
        pi,
    })
}

/// CSV float format: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `t, path_id, Y.., V, Z.., X, Xtilde, pi..` for the first `max_paths` paths.
/// The weights column is empty at the terminal step, where no trade happens.
pub fn write_paths_csv<W: Write>(
    out: W,
    factors: &FactorPaths,
    wealth: Option<&WealthPaths>,
    max_paths: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = factors.n_factors;
    let m = wealth.map_or(0, |w| w.n_assets);
    let mut header = vec!["t".to_string(), "path_id".to_string()];
    header.extend((1..=n).map(|i| format!("Y{i}")));
    header.push("V".into());
    if factors.has_lag() {
        header.extend((1..=n).map(|i| format!("Z{i}")));
    }
    if wealth.is_some() {
        header.push("X".into());
        header.push("Xtilde".into());
        header.extend((1..=m).map(|i| format!("pi{i}")));
    }
    w.write_record(&header)?;
    let kk = factors.grid.steps;
    let mut row = Vec::with_capacity(header.len());
    for p in 0..factors.n_paths.min(max_paths) {
        for k in 0..=kk {
            row.clear();
            row.push(fmt_f64(factors.grid.time(k)));
            row.push(p.to_string());
            let s = factors.state(k, p);
            row.extend(s.y.iter().map(|&x| fmt_f64(x)));
            row.push(fmt_f64(s.v));
            row.extend(s.z.iter().map(|&x| fmt_f64(x)));
            if let Some(wp) = wealth {
                row.push(fmt_f64(wp.x(k, p)));
                row.push(fmt_f64(wp.x_tilde(k, p)));
                if k < kk {
                    row.extend(wp.pi(k, p).iter().map(|&x| fmt_f64(x)));
                } else {
                    row.extend((0..m).map(|_| String::new()));
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::{AffineCoefficients, AffineModel, ModelDims};
    use approx::assert_abs_diff_eq;

    fn ode_model(b_y: f64, sigma_f: f64) -> AffineModel {
        AffineModel::new(
            &AffineCoefficients {
                r0: 0.03,
                mu0: vec![0.08],
                sigma: vec![vec![0.2]],
                b_y: Some(vec![vec![b_y]]),
                sigma_f: Some(vec![vec![sigma_f]]),
                ..Default::default()
            },
            ModelDims::new(1, 1, 1).unwrap(),
        )
        .unwrap()
    }

    fn id(y: &[f64]) -> f64 {
        y[0]
    }

    #[test]
    fn init_v_examples() {
        let zero = DelaySpec::new(1.0, 2f64.ln(), vec![3.0], History::Constant).unwrap();
        assert_eq!(init_v(&zero, &|_| 0.0).unwrap(), 0.0);

        let finite = DelaySpec::new(1.0, 2f64.ln(), vec![1.0], History::Constant).unwrap();
        assert_abs_diff_eq!(init_v(&finite, &id).unwrap(), 0.5, epsilon = 1e-9);

        let infinite = DelaySpec::new(1.0, f64::INFINITY, vec![2.0], History::Constant).unwrap();
        assert_abs_diff_eq!(init_v(&infinite, &id).unwrap(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn init_v_rejects_short_history() {
        let hist = History::Grid {
            times: vec![-0.5, 0.0],
            values: vec![vec![1.0], vec![1.0]],
        };
        let d = DelaySpec::new(1.0, 1.0, vec![1.0], hist).unwrap();
        assert!(matches!(init_v(&d, &id), Err(Error::MissingHistory(_))));
    }

    #[test]
    fn init_v_linear_history() {
        // Y(s) = 1 + s on [-1, 0]: int e^s (1 + s) ds = e^{-1}.
        let hist = History::Grid {
            times: vec![-1.0, 0.0],
            values: vec![vec![0.0], vec![1.0]],
        };
        let d = DelaySpec::new(1.0, 1.0, vec![1.0], hist).unwrap();
        assert_abs_diff_eq!(init_v(&d, &id).unwrap(), (-1f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
    }

    #[test]
    fn frozen_factor_keeps_stationary_v() {
        let c = ode_model(0.0, 0.0);
        let delay = DelaySpec::new(1.0, 0.25, vec![1.0], History::Constant).unwrap();
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let paths = simulate_factors(&c, &delay, &grid, &McConfig::new(3, 1)).unwrap();
        let v0 = (1.0 - (-0.25f64).exp()) / 1.0;
        for k in 0..=40 {
            let s = paths.state(k, 2);
            assert_eq!(s.y[0], 1.0);
            assert_eq!(s.z[0], 1.0);
            assert_abs_diff_eq!(s.v, v0, epsilon = 1e-8);
        }
    }

    #[test]
    fn v_relaxes_from_non_stationary_history() {
        // History near 0 before a jump at s = 0, so V(0) is far from h(y) / lambda.
        let hist = History::Grid {
            times: vec![-40.0, -1e-9, 0.0],
            values: vec![vec![0.0], vec![0.0], vec![1.0]],
        };
        let c = ode_model(0.0, 0.0);
        let delay = DelaySpec::new(2.0, f64::INFINITY, vec![1.0], hist).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let paths = simulate_factors(&c, &delay, &grid, &McConfig::new(1, 1)).unwrap();
        let v0 = paths.v(0, 0);
        for k in 0..=10 {
            let t = grid.time(k);
            let exact = v0 * (-2.0 * t).exp() + (1.0 - (-2.0 * t).exp()) / 2.0;
            assert_abs_diff_eq!(paths.v(k, 0), exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_decay_converges_at_first_order() {
        let c = ode_model(-1.0, 0.0);
        let delay = DelaySpec::new(1.0, f64::INFINITY, vec![1.0], History::Constant).unwrap();
        let err = |steps: usize| {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let p = simulate_factors(&c, &delay, &grid, &McConfig::new(1, 0)).unwrap();
            (0..=steps)
                .map(|k| (p.y(k, 0)[0] - (-grid.time(k)).exp()).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(50), err(100));
        assert!(e1 < 0.01);
        assert!(e1 / e2 >= 1.9, "ratio {}", e1 / e2);
    }

    #[test]
    fn v_recursion_matches_direct_quadrature() {
        // V(t) = int_{t-delta}^t e^{lambda (s - t)} Y(s) ds on a path with noise-free drift.
        let c = ode_model(-0.7, 0.0);
        let delta = 0.5;
        let delay = DelaySpec::new(1.5, delta, vec![1.0], History::Constant).unwrap();
        let gap = |steps: usize| {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let p = simulate_factors(&c, &delay, &grid, &McConfig::new(1, 0)).unwrap();
            let dt = grid.dt();
            let y_at = |s: f64| -> f64 {
                if s <= 0.0 {
                    1.0
                } else {
                    let x = s / dt;
                    let j = (x.floor() as usize).min(steps - 1);
                    let w = x - j as f64;
                    (1.0 - w) * p.y(j, 0)[0] + w * p.y(j + 1, 0)[0]
                }
            };
            let mut worst: f64 = 0.0;
            for k in 0..=steps {
                let t = grid.time(k);
                let n = 4000;
                let ds = delta / n as f64;
                let mut sum = 0.0;
                for j in 0..=n {
                    let s = t - delta + j as f64 * ds;
                    let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                    sum += w * (1.5 * (s - t)).exp() * y_at(s);
                }
                worst = worst.max((sum * ds - p.v(k, 0)).abs());
            }
            worst
        };
        for steps in [20, 40] {
            let g = gap(steps);
            assert!(g < 0.1 / steps as f64, "gap {g} at {steps} steps");
        }
    }

    #[test]
    fn interpolated_lag_is_exact_for_linear_paths() {
        // b = 1 constant: Y(t) = 1 + t, so Z(t) = 1 + t - delta once t > delta.
        let c = AffineModel::new(
            &AffineCoefficients {
                r0: 0.0,
                mu0: vec![0.1],
                sigma: vec![vec![0.2]],
                b0: Some(vec![1.0]),
                sigma_f: Some(vec![vec![0.0]]),
                ..Default::default()
            },
            ModelDims::new(1, 1, 1).unwrap(),
        )
        .unwrap();
        let delta = 2f64.ln();
        let delay = DelaySpec::new(1.0, delta, vec![1.0], History::Constant).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        assert!(matches!(LagLookup::new(delta, &grid), LagLookup::Interpolated { .. }));
        let p = simulate_factors(&c, &delay, &grid, &McConfig::new(1, 0)).unwrap();
        for k in 0..=100 {
            let t = grid.time(k);
            let expected = if t > delta { 1.0 + t - delta } else { 1.0 };
            assert_abs_diff_eq!(p.state(k, 0).z[0], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn deterministic_wealth_grows_at_rate() {
        let c = ode_model(0.0, 0.3);
        let delay = DelaySpec::new(1.0, f64::INFINITY, vec![0.0], History::Constant).unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let f = simulate_factors(&c, &delay, &grid, &McConfig::new(4, 9)).unwrap();
        let u = PowerUtility::new(0.5, 1.0).unwrap();
        let zero = |_: &StrategyContext| Ok(DVector::zeros(1));
        let w = simulate_wealth(&f, &c, &u, &zero).unwrap();
        for p in 0..4 {
            assert_abs_diff_eq!(w.x(50, p), 1.030_454_533_953_517, epsilon = 1e-12);
            assert_abs_diff_eq!(w.x_tilde(50, p), 2.0 * w.x(50, p).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn antithetic_pairs_negate_noise() {
        let c = ode_model(-0.5, 0.3);
        let delay = DelaySpec::new(1.0, 0.2, vec![0.0], History::Constant).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mc = McConfig::new(4, 5).with_antithetic(true);
        let f = simulate_factors(&c, &delay, &grid, &mc).unwrap();
        for k in 0..10 {
            assert_eq!(f.dw(k, 0)[0], -f.dw(k, 1)[0]);
            assert_ne!(f.dw(k, 0)[0], f.dw(k, 2)[0]);
        }
        assert!(simulate_factors(&c, &delay, &grid, &McConfig::new(3, 5).with_antithetic(true)).is_err());
    }

    #[test]
    fn pointwise_coefficients_need_finite_delay() {
        let c = AffineModel::new(
            &AffineCoefficients {
                r0: 0.0,
                mu0: vec![0.1],
                sigma: vec![vec![0.2]],
                b_z: Some(vec![vec![1.0]]),
                ..Default::default()
            },
            ModelDims::new(1, 1, 1).unwrap(),
        )
        .unwrap();
        let delay = DelaySpec::new(1.0, f64::INFINITY, vec![0.0], History::Constant).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        assert!(simulate_factors(&c, &delay, &grid, &McConfig::new(2, 0)).is_err());
    }

    #[test]
    fn exponential_weights_integrate_affine_functions() {
        for &(lambda, dt) in &[(1.0, 0.01), (3.0, 0.5), (0.5, 1e-6)] {
            let (w0, w1) = exponential_weights(lambda, dt);
            let e = (-lambda * dt).exp();
            assert_abs_diff_eq!(w0 + w1, (1.0 - e) / lambda, epsilon = 1e-14);
            // g(s) = s: int_0^dt e^{-lambda (dt - s)} s ds
            let exact = dt / lambda - (1.0 - e) / (lambda * lambda);
            assert_abs_diff_eq!(w1 * dt, exact, epsilon = 1e-12 * dt.max(1e-3));
        }
    }
}
