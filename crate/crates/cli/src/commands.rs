//! Subcommand bodies. Each writes its CSV/JSON outputs through the [`Sink`].

use std::fs::File;
use std::io::BufWriter;

use delayfolio::closed_form::{
    feynman_kac_eta, optimal_pi_infinite, pointwise_pi, pointwise_solution, solve_riccati, FeynmanKacEstimate,
    PointwiseParams, PointwiseSolution, RiccatiParams, RiccatiSolution,
};
use delayfolio::delay_sde::{
    init_v, simulate_factors, simulate_wealth, write_paths_csv, FactorPaths, Strategy, StrategyContext,
};
use delayfolio::fbsde_solver::{
    contraction_diagnostics, lsmc_solve, lsmc_solve_on, optimal_pi_from_qhat, value_at_zero, AdjointSolution,
    AdjointStrategy, BsdeGridSolution, ContractionReport, DeterministicAdjoint, StrategyTerms,
};
use delayfolio::market_model::{CoefficientSpec, MarketSnapshot, OwnedState};
use delayfolio::martingale_method::{
    budget, check_duality, estimate_m_and_psi, m_moments, simulate_h0, DualityReport,
};
use delayfolio::regression::BasisSpec;
use delayfolio::stats::{mean_se_paired, Estimate};
use delayfolio::verify::{
    adjoint_paths, argmax_check, increment_regression_test, martingale_test, perturbations, supermartingale_test,
    utility_dominance_test, AdjointPathMode, Perturbation, PerturbedStrategy, TestReport,
};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::{AdjointMode, ControlKind, Model, RunConfig, SimStrategy};
use crate::failure::Failure;
use crate::output::Sink;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Riccati,
    Pointwise,
    Lsmc,
    Martingale,
    Verify,
    Figure1,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Riccati => "riccati",
            Command::Pointwise => "pointwise",
            Command::Lsmc => "lsmc",
            Command::Martingale => "martingale",
            Command::Verify => "verify",
            Command::Figure1 => "figure1",
        }
    }
}

pub fn run(cmd: Command, cfg: &RunConfig, seed: u64, sink: &mut Sink) -> Result<(), Failure> {
    match cmd {
        Command::Simulate => simulate(cfg, seed, sink),
        Command::Riccati => riccati(cfg, seed, sink),
        Command::Pointwise => pointwise(cfg, sink),
        Command::Lsmc => lsmc(cfg, seed, sink),
        Command::Martingale => martingale(cfg, seed, sink),
        Command::Verify => verify(cfg, seed, sink),
        Command::Figure1 => figure1(cfg, sink),
    }
}

/// Seed of the independent path set used to fit regression solutions.
pub fn training_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

fn initial_state(model: &Model) -> Result<OwnedState, Failure> {
    let d = &model.delay;
    let coeffs = &model.coeffs;
    let v0 = init_v(d, &|y| coeffs.delay_transform(y))?;
    let z = if d.is_infinite() {
        Vec::new()
    } else {
        let mut z = vec![0.0; d.y0.len()];
        d.history_at(-d.delta, &mut z)?;
        z
    };
    Ok(OwnedState::new(d.y0.clone(), v0, z))
}

/// Adjoint pair from the solver that matches the coefficient family.
enum Solved {
    Deterministic(DeterministicAdjoint),
    Riccati(RiccatiSolution),
    Pointwise(PointwiseSolution),
    Lsmc(Box<BsdeGridSolution>),
}

impl Solved {
    fn adjoint(&self) -> &dyn AdjointSolution {
        match self {
            Solved::Deterministic(s) => s,
            Solved::Riccati(s) => s,
            Solved::Pointwise(s) => s,
            Solved::Lsmc(s) => s.as_ref(),
        }
    }
}

fn riccati_params(cfg: &RunConfig, model: &Model) -> Result<RiccatiParams, Failure> {
    let CoefficientSpec::LqInfinite(c) = &model.spec else {
        return Err(Failure::Config("needs coefficients.family = \"lq_infinite\"".into()));
    };
    if !model.delay.is_infinite() {
        return Err(Failure::Config("the lq_infinite family needs delay.delta = inf".into()));
    }
    Ok(RiccatiParams::from_model(
        c,
        model.delay.lambda,
        model.utility.gamma,
        cfg.numerics.horizon,
    ))
}

fn pointwise_params(cfg: &RunConfig, model: &Model) -> Result<PointwiseParams, Failure> {
    let CoefficientSpec::LqPointwise(c) = &model.spec else {
        return Err(Failure::Config("needs coefficients.family = \"lq_pointwise\"".into()));
    };
    Ok(PointwiseParams::from_model(
        c,
        model.delay.lambda,
        model.delay.delta,
        model.utility.gamma,
        cfg.numerics.horizon,
    ))
}

fn solve(cfg: &RunConfig, model: &Model, seed: u64, sink: &mut Sink) -> Result<Solved, Failure> {
    let gamma = model.utility.gamma;
    Ok(match &model.spec {
        CoefficientSpec::Constant(_) => {
            let s = initial_state(model)?;
            Solved::Deterministic(DeterministicAdjoint::new(
                model.coeffs.as_ref(),
                gamma,
                cfg.numerics.horizon,
                &s.as_state(),
            )?)
        }
        CoefficientSpec::LqInfinite(_) => {
            let p = riccati_params(cfg, model)?;
            Solved::Riccati(sink.timed("riccati", || solve_riccati(&p, cfg.riccati.steps))?)
        }
        CoefficientSpec::LqPointwise(_) => Solved::Pointwise(pointwise_solution(&pointwise_params(cfg, model)?)?),
        CoefficientSpec::Affine(_) => {
            let grid = cfg.grid()?;
            let mc = cfg.mc(training_seed(seed));
            let sol = sink.timed("lsmc", || {
                lsmc_solve(
                    model.coeffs.as_ref(),
                    &model.delay,
                    &model.utility,
                    &grid,
                    &mc,
                    &cfg.lsmc_config(),
                )
            })?;
            Solved::Lsmc(Box::new(sol))
        }
    })
}

fn factors(cfg: &RunConfig, model: &Model, seed: u64, sink: &mut Sink) -> Result<FactorPaths, Failure> {
    let grid = cfg.grid()?;
    let mc = cfg.mc(seed);
    Ok(sink.timed("factors", || {
        simulate_factors(model.coeffs.as_ref(), &model.delay, &grid, &mc)
    })?)
}

#[derive(Serialize)]
struct Terms {
    merton: Vec<f64>,
    hedging: Vec<f64>,
    total: Vec<f64>,
}

impl From<StrategyTerms> for Terms {
    fn from(t: StrategyTerms) -> Self {
        Self {
            total: t.total().iter().copied().collect(),
            merton: t.merton.iter().copied().collect(),
            hedging: t.hedging.iter().copied().collect(),
        }
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    strategy: SimStrategy,
    n_paths: usize,
    steps: usize,
    dt: f64,
    seed: u64,
    v0: f64,
    terminal_wealth: Estimate,
    terminal_utility: Estimate,
}

fn simulate(cfg: &RunConfig, seed: u64, sink: &mut Sink) -> Result<(), Failure> {
    let model = cfg.model()?.build()?;
    let m = model.dims.n_assets;
    let gamma = model.utility.gamma;
    let sc = &cfg.simulate;
    let f = factors(cfg, &model, seed, sink)?;
    let solved = if sc.strategy == SimStrategy::Optimal {
        Some(solve(cfg, &model, seed, sink)?)
    } else {
        None
    };
    let weights = match (sc.strategy, &sc.weights) {
        (SimStrategy::Constant, Some(w)) if w.len() == m => DVector::from_vec(w.clone()),
        (SimStrategy::Constant, _) => {
            return Err(Failure::Config(format!(
                "simulate.weights must list {m} weights for the constant strategy"
            )))
        }
        _ => DVector::zeros(m),
    };
    let myopic = move |ctx: &StrategyContext| Ok(optimal_pi_from_qhat(gamma, ctx.market, &DVector::zeros(ctx.market.theta.len())).total());
    let fixed = move |_: &StrategyContext| Ok(weights.clone());
    let strategy: Box<dyn Strategy + '_> = match (&solved, sc.strategy) {
        (Some(s), _) => Box::new(AdjointStrategy::new(s.adjoint(), gamma)),
        (None, SimStrategy::Myopic) => Box::new(myopic),
        (None, _) => Box::new(fixed),
    };
    let w = sink.timed("wealth", || {
        simulate_wealth(&f, model.coeffs.as_ref(), &model.utility, strategy.as_ref())
    })?;
    let out = BufWriter::new(File::create(sink.path("paths.csv"))?);
    write_paths_csv(out, &f, Some(&w), sc.max_paths)?;
    let kk = f.grid.steps;
    let xt: Vec<f64> = (0..f.n_paths).map(|p| w.x(kk, p)).collect();
    sink.json(
        "simulate.json",
        &SimulateSummary {
            strategy: sc.strategy,
            n_paths: f.n_paths,
            steps: kk,
            dt: f.grid.dt(),
            seed,
            v0: f.v(0, 0),
            terminal_wealth: mean_se_paired(&xt, f.mc.antithetic),
            terminal_utility: mean_se_paired(w.terminal_utility(), f.mc.antithetic),
        },
    )
}

#[derive(Serialize)]
struct RiccatiSummary {
    steps: usize,
    psi_0: [f64; 4],
    psi1_negative: bool,
    psi3_negative: bool,
    y: f64,
    v: f64,
    eta_0: f64,
    grad_y_0: f64,
    pi_0: Terms,
    feynman_kac: Option<FeynmanKacEstimate>,
}

/// `ψ₁ < 0` and `ψ₃ < 0` at every node before the horizon.
fn negativity(sol: &RiccatiSolution) -> (bool, bool) {
    let n = sol.psi.len() - 1;
    let head = &sol.psi[..n];
    (head.iter().all(|p| p[0] < 0.0), head.iter().all(|p| p[2] < 0.0))
}

fn riccati_csv(sink: &mut Sink, name: &str, sol: &RiccatiSolution) -> Result<(), Failure> {
    sink.csv(name, &["t", "psi1", "psi2", "psi3", "psi4"], sol.rows().map(|r| r.to_vec()))
}

fn riccati(cfg: &RunConfig, seed: u64, sink: &mut Sink) -> Result<(), Failure> {
    let model = cfg.model()?.build()?;
    let params = riccati_params(cfg, &model)?;
    let sol = sink.timed("riccati", || solve_riccati(&params, cfg.riccati.steps))?;
    let s0 = initial_state(&model)?;
    let y = cfg.riccati.y.unwrap_or(s0.y[0]);
    let v = cfg.riccati.v.unwrap_or(s0.v);
    let eta = sol.eta(0.0, y, v)?;
    let pi = optimal_pi_infinite(&sol, model.coeffs.as_ref(), 0.0, y, v)?;
    let fk = if cfg.riccati.feynman_kac {
        let mc = cfg.mc(seed);
        Some(sink.timed("feynman_kac", || {
            feynman_kac_eta(
                model.coeffs.as_ref(),
                params.lambda,
                params.gamma,
                params.horizon,
                0.0,
                &[y],
                v,
                cfg.riccati.fk_steps,
                &mc,
            )
        })?)
    } else {
        None
    };
    riccati_csv(sink, "riccati.csv", &sol)?;
    let (n1, n3) = negativity(&sol);
    sink.json(
        "riccati.json",
        &RiccatiSummary {
            steps: cfg.riccati.steps,
            psi_0: sol.psi[0],
            psi1_negative: n1,
            psi3_negative: n3,
            y,
            v,
            eta_0: eta.eta,
            grad_y_0: eta.grad_y,
            pi_0: pi.into(),
            feynman_kac: fk,
        },
    )
}

#[derive(Serialize)]
struct Figure1Summary {
    params: RiccatiParams,
    steps: usize,
    psi_0: [f64; 4],
    psi_terminal: [f64; 4],
    psi1_negative: bool,
    psi3_negative: bool,
}

fn figure1(cfg: &RunConfig, sink: &mut Sink) -> Result<(), Failure> {
    let params = RiccatiParams::figure1();
    let steps = cfg.riccati.steps;
    let sol = sink.timed("riccati", || solve_riccati(&params, steps))?;
    riccati_csv(sink, "figure1.csv", &sol)?;
    let (n1, n3) = negativity(&sol);
    sink.json(
        "figure1.json",
        &Figure1Summary {
            params,
            steps,
            psi_0: sol.psi[0],
            psi_terminal: sol.psi[steps],
            psi1_negative: n1,
            psi3_negative: n3,
        },
    )
}

#[derive(Serialize)]
struct PointwiseSummary {
    constraints: delayfolio::closed_form::ConstraintReport,
    ratio: f64,
    sign_change_time: Option<f64>,
    q_hat_0: f64,
    psi_0: f64,
    p_hat_0: f64,
    value: f64,
    pi_0: Terms,
}

fn pointwise(cfg: &RunConfig, sink: &mut Sink) -> Result<(), Failure> {
    let model = cfg.model()?.build()?;
    let sol = pointwise_solution(&pointwise_params(cfg, &model)?)?;
    let s0 = initial_state(&model)?;
    let p0 = sol.p_hat(0.0, s0.y[0], s0.v);
    let pi = pointwise_pi(&sol, model.coeffs.as_ref(), 0.0, &s0)?;
    sink.csv(
        "pointwise.csv",
        &["t", "Q", "psi", "qhat"],
        sol.rows(cfg.pointwise.rows.max(1)).into_iter().map(|r| r.to_vec()),
    )?;
    sink.json(
        "pointwise.json",
        &PointwiseSummary {
            constraints: sol.constraints,
            ratio: sol.ratio,
            sign_change_time: sol.sign_change_time(),
            q_hat_0: sol.q_hat(0.0),
            psi_0: sol.psi(0.0),
            p_hat_0: p0,
            value: value_at_zero(p0, &model.utility),
            pi_0: pi.into(),
        },
    )
}

#[derive(Serialize)]
struct LsmcSummary {
    p_hat_0: f64,
    value: f64,
    clip_count: usize,
    picard_deltas: Vec<f64>,
    diagnostics: ContractionReport,
    pi_0: Terms,
    n_paths: usize,
    steps: usize,
    seed: u64,
}

fn lsmc(cfg: &RunConfig, seed: u64, sink: &mut Sink) -> Result<(), Failure> {
    let model = cfg.model()?.build()?;
    let gamma = model.utility.gamma;
    let f = factors(cfg, &model, seed, sink)?;
    let sol = sink.timed("lsmc", || {
        lsmc_solve_on(&f, model.coeffs.as_ref(), &model.utility, &cfg.lsmc_config())
    })?;
    let diag = sink.timed("diagnostics", || contraction_diagnostics(model.coeffs.as_ref(), &f, gamma))?;
    let s0 = f.state(0, 0);
    let snap = MarketSnapshot::evaluate(model.coeffs.as_ref(), &s0)?;
    let pi = optimal_pi_from_qhat(gamma, &snap, &sol.q_hat(0, 0.0, &s0));

    let rows = sol.coefficient_rows();
    let width = rows.iter().map(|r| r.2.len()).max().unwrap_or(0);
    let mut header = vec!["step".to_string(), "t".to_string(), "target".to_string()];
    header.extend((0..width).map(|j| format!("c{j}")));
    let text: Vec<Vec<String>> = rows
        .iter()
        .map(|(k, target, c)| {
            let mut r = vec![
                k.to_string(),
                delayfolio::delay_sde::fmt_f64(f.grid.time(*k)),
                target.clone(),
            ];
            r.extend(c.iter().map(|&x| delayfolio::delay_sde::fmt_f64(x)));
            r.resize(3 + width, String::new());
            r
        })
        .collect();
    sink.csv_text("lsmc_coefficients.csv", &header, &text)?;
    sink.json(
        "lsmc.json",
        &LsmcSummary {
            p_hat_0: sol.p_hat_0,
            value: value_at_zero(sol.p_hat_0, &model.utility),
            clip_count: sol.clip_count,
            picard_deltas: sol.picard_deltas.clone(),
            diagnostics: diag,
            pi_0: pi.into(),
            n_paths: f.n_paths,
            steps: f.grid.steps,
            seed,
        },
    )
}

#[derive(Serialize)]
struct MartingaleSummary {
    #[serde(flatten)]
    report: DualityReport,
    budget_mean: f64,
    budget_se: f64,
    n_paths: usize,
    steps: usize,
    seed: u64,
}

fn martingale(cfg: &RunConfig, seed: u64, sink: &mut Sink) -> Result<(), Failure> {
    let model = cfg.model()?.build()?;
    let f = factors(cfg, &model, seed, sink)?;
    let coeffs = model.coeffs.as_ref();
    let h0 = sink.timed("state_density", || simulate_h0(coeffs, &f))?;
    let basis = BasisSpec::new(cfg.numerics.basis_degree);
    let sol = sink.timed("regression", || estimate_m_and_psi(&h0, &f, &basis, &model.utility))?;
    let report = sink.timed("identities", || check_duality(&sol, coeffs, &f, &h0, &model.utility))?;
    let b = budget(&h0, &model.utility, sol.phi.zx, f.mc.antithetic);
    sink.csv(
        "martingale.csv",
        &["t", "M_mean", "M_se"],
        (0..=f.grid.steps).map(|k| {
            let e = m_moments(&sol, &f, &h0, k);
            vec![f.grid.time(k), e.mean, e.se]
        }),
    )?;
    sink.json(
        "martingale.json",
        &MartingaleSummary {
            report,
            budget_mean: b.mean,
            budget_se: b.se,
            n_paths: f.n_paths,
            steps: f.grid.steps,
            seed,
        },
    )
}

/// Multiplies every weight of a base strategy.
struct Scaled<'a> {
    base: &'a dyn Strategy,
    factor: f64,
}

impl Strategy for Scaled<'_> {
    fn weights(&self, ctx: &StrategyContext) -> delayfolio::Result<DVector<f64>> {
        Ok(self.base.weights(ctx)? * self.factor)
    }
}

fn verify(cfg: &RunConfig, seed: u64, sink: &mut Sink) -> Result<(), Failure> {
    let model = cfg.model()?.build()?;
    let vc = &cfg.verify;
    let coeffs = model.coeffs.as_ref();
    let utility = &model.utility;
    let gamma = utility.gamma;
    let m = model.dims.n_assets;
    let f = factors(cfg, &model, seed, sink)?;
    let solved = solve(cfg, &model, seed, sink)?;
    let adj = solved.adjoint();
    let kk = f.grid.steps;
    let mut reports = Vec::new();

    let s0 = f.state(0, 0);
    let snap = MarketSnapshot::evaluate(coeffs, &s0)?;
    let p_hat_0 = adj.p_hat(0, 0.0, &s0);
    let p0 = p_hat_0.exp();
    let am = argmax_check(utility, &snap, p0, &(adj.q_hat(0, 0.0, &s0) * p0));
    let argmax_tol = 1e-5;
    reports.push(TestReport {
        name: "hamiltonian argmax".into(),
        statistic: am.max_abs_diff,
        se: 0.0,
        tolerance: argmax_tol,
        passed: am.max_abs_diff <= argmax_tol,
        n_paths: f.n_paths,
        seed,
        dt: f.grid.dt(),
    });

    let mode = match vc.adjoint {
        AdjointMode::Forward => AdjointPathMode::Forward,
        AdjointMode::Evaluated => AdjointPathMode::Evaluated,
    };
    let p = sink.timed("adjoint", || adjoint_paths(adj, &f, coeffs, gamma, mode))?;
    let strat = AdjointStrategy::new(adj, gamma);
    let w = sink.timed("wealth", || simulate_wealth(&f, coeffs, utility, &strat))?;
    reports.push(martingale_test(&f, &w, &p, "martingale of transformed wealth times adjoint"));
    reports.push(increment_regression_test(
        &f,
        &w,
        &p,
        &BasisSpec::new(cfg.numerics.basis_degree),
        "martingale increments orthogonal to the state",
    )?);
    reports.push(supermartingale_test(&f, &w, &p, "supermartingale at the optimum"));

    let shift = Perturbation {
        label: "constant +0.5".into(),
        shifts: vec![DVector::from_element(m, 0.5); kk],
    };
    let shifted = PerturbedStrategy {
        base: &strat,
        perturbation: &shift,
    };
    let ws = sink.timed("wealth", || simulate_wealth(&f, coeffs, utility, &shifted))?;
    reports.push(supermartingale_test(&f, &ws, &p, "supermartingale shifted by +0.5"));

    let perts = perturbations(m, kk, vc.perturbations, vc.perturbation_seed.unwrap_or(seed));
    let value = value_at_zero(p_hat_0, utility);
    let dom = sink.timed("dominance", || utility_dominance_test(&f, coeffs, utility, &strat, &perts, value))?;
    reports.extend(dom.reports);

    let q_scaled = AdjointStrategy {
        solution: adj,
        gamma,
        q_scale: vc.control_scale,
    };
    let pi_scaled = Scaled {
        base: &strat,
        factor: vc.control_scale,
    };
    let (control, label): (&dyn Strategy, &str) = match vc.negative_control {
        ControlKind::Pi => (&pi_scaled, "pi"),
        ControlKind::QHat => (&q_scaled, "q_hat"),
    };
    let wc = sink.timed("wealth", || simulate_wealth(&f, coeffs, utility, control))?;
    let mut c = martingale_test(&f, &wc, &p, "");
    c.name = format!("negative control rejected ({label} scaled by {})", vc.control_scale);
    c.passed = !c.passed;
    reports.push(c);

    sink.json("verify.json", &reports)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Verify(format!("{failed} of {} verification tests failed", reports.len())));
    }
    Ok(())
}
