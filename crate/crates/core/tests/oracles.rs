use delayfolio::closed_form::{pointwise_solution, solve_riccati, PointwiseParams, RiccatiParams};
use delayfolio::delay_sde::{simulate_factors, DelaySpec, History, McConfig, TimeGrid};
use delayfolio::fbsde_solver::{lsmc_solve_on, AdjointSolution, LsmcConfig};
use delayfolio::market_model::{LqPointwiseCoefficients, LqPointwiseModel, PowerUtility};

/// Explicit Euler backward from zero at `steps`, sampled every `stride`.
fn euler(p: &RiccatiParams, steps: usize, stride: usize) -> Vec<[f64; 4]> {
    let h = p.horizon / steps as f64;
    let mut y = [0.0; 4];
    let mut out = vec![[0.0; 4]; steps / stride + 1];
    for k in (0..steps).rev() {
        let d = p.rhs(&y);
        for i in 0..4 {
            y[i] -= h * d[i];
        }
        if k % stride == 0 {
            out[k / stride] = y;
        }
    }
    out
}

#[test]
fn riccati_matches_extrapolated_euler() {
    let p = RiccatiParams::figure1();
    let a = euler(&p, 200_000, 500);
    let b = euler(&p, 400_000, 1000);
    let s = solve_riccati(&p, 400).unwrap();
    for j in 0..=400 {
        for i in 0..4 {
            let reference = 2.0 * b[j][i] - a[j][i];
            assert!((s.psi[j][i] - reference).abs() < 1e-8, "node {j} component {i}");
        }
    }
}

#[test]
fn riccati_initial_values_frozen() {
    let s = solve_riccati(&RiccatiParams::figure1(), 1000).unwrap();
    let expected = [-2.2373723303745, -1.8763206561094, -0.8632198516513, -0.7907482652144];
    for i in 0..4 {
        assert!((s.psi[0][i] - expected[i]).abs() < 1e-10);
    }
    let eta = s.eta(0.0, 1.0, 1.0).unwrap().eta;
    assert!((eta + 3.71081).abs() < 1e-5);
}

struct Setup {
    model: LqPointwiseModel,
    delay: DelaySpec,
    params: PointwiseParams,
}

fn pointwise(alpha: [f64; 3], beta: [f64; 3]) -> Setup {
    let c = LqPointwiseCoefficients {
        alpha,
        beta,
        sigma_f: 1.0,
        sigma: 0.2,
        theta: 0.0,
    };
    let delta = 2f64.ln();
    Setup {
        model: LqPointwiseModel::new(c, 0.5).unwrap(),
        delay: DelaySpec::new(1.0, delta, vec![0.0], History::Constant).unwrap(),
        params: PointwiseParams::from_model(&c, 1.0, delta, 0.5, 1.0),
    }
}

fn q_rms(sol: &dyn AdjointSolution, target: &dyn Fn(f64) -> f64, setup: &Setup, grid: &TimeGrid, n: usize) -> f64 {
    let f = simulate_factors(&setup.model, &setup.delay, grid, &McConfig::new(n, 11)).unwrap();
    let (mut s, mut c) = (0.0, 0.0);
    for k in 0..grid.steps {
        let t = grid.time(k);
        for p in (0..n).step_by(5) {
            s += (sol.q_hat(k, t, &f.state(k, p))[0] - target(t)).powi(2);
            c += 1.0;
        }
    }
    (s / c).sqrt()
}

/// `(q̂ RMS, |p̂(0) - closed form|)` for LSMC with zero terminal value.
fn pointwise_lsmc_errors(setup: &Setup, steps: usize) -> (f64, f64) {
    let cf = pointwise_solution(&setup.params).unwrap();
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let u = PowerUtility::new(0.5, 1.0).unwrap();
    let f = simulate_factors(&setup.model, &setup.delay, &grid, &McConfig::new(20_000, 5)).unwrap();
    let sol = lsmc_solve_on(&f, &setup.model, &u, &LsmcConfig::default()).unwrap();
    let rms = q_rms(&sol, &|t| cf.q_hat(t), setup, &grid, 20_000);
    (rms, (sol.p_hat_0 - cf.p_hat(0.0, 0.0, 0.0)).abs())
}

#[test]
fn lsmc_converges_to_pointwise_closed_form_without_terminal_term() {
    let setup = pointwise([0.5, 1.0, 0.25], [1.0, 0.5, 0.0]);
    assert_eq!(pointwise_solution(&setup.params).unwrap().ratio, 0.0);
    let (rms25, p25) = pointwise_lsmc_errors(&setup, 25);
    let (rms50, p50) = pointwise_lsmc_errors(&setup, 50);
    assert!(rms50 < 0.06, "rms {rms50}");
    assert!(p50 < 0.06, "p0 error {p50}");
    // First order in the time step.
    assert!((1.5..2.6).contains(&(rms25 / rms50)), "{rms25} / {rms50}");
    assert!((1.5..2.6).contains(&(p25 / p50)), "{p25} / {p50}");
}

#[test]
fn pointwise_closed_form_carries_a_terminal_term() {
    let setup = pointwise([0.5, 1.0, 0.25], [0.5, -0.5, -0.25]);
    let cf = pointwise_solution(&setup.params).unwrap();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let u = PowerUtility::new(0.5, 1.0).unwrap();
    let f = simulate_factors(&setup.model, &setup.delay, &grid, &McConfig::new(20_000, 5)).unwrap();
    let plain = lsmc_solve_on(&f, &setup.model, &u, &LsmcConfig::default()).unwrap();
    let shifted = LsmcConfig {
        terminal_y_weights: Some(vec![-cf.ratio]),
        ..LsmcConfig::default()
    };
    let with_terminal = lsmc_solve_on(&f, &setup.model, &u, &shifted).unwrap();
    let target = |t| cf.q_hat(t);
    let rms_plain = q_rms(&plain, &target, &setup, &grid, 20_000);
    let rms_terminal = q_rms(&with_terminal, &target, &setup, &grid, 20_000);
    assert!(rms_plain > 1.0, "rms {rms_plain}");
    assert!(rms_terminal < 0.07, "rms {rms_terminal}");
}
