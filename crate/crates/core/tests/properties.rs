use delayfolio::fbsde_solver::{driver_f, driver_minimizer, optimal_pi_from_qhat};
use delayfolio::market_model::{
    AffineModel, ConstantCoefficients, MarketSnapshot, ModelDims, OwnedState, PowerUtility,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const M: usize = 2;
const N: usize = 3;

/// Rows of `sigma` are kept well away from rank deficiency.
fn sigma_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(-0.4..0.4f64, M * N).prop_map(|v| {
        (0..M)
            .map(|i| (0..N).map(|j| v[i * N + j] + if i == j { 0.8 } else { 0.0 }).collect())
            .collect()
    })
}

fn snapshot(r: f64, mu: &[f64], sigma: Vec<Vec<f64>>) -> MarketSnapshot {
    let c = AffineModel::from_constant(
        &ConstantCoefficients {
            r,
            mu: mu.to_vec(),
            sigma,
            b: None,
            sigma_f: None,
            h_weights: None,
        },
        ModelDims::new(M, 1, N).unwrap(),
    )
    .unwrap();
    let s = OwnedState::new(vec![0.0], 0.0, vec![]);
    MarketSnapshot::evaluate(&c, &s.as_state()).unwrap()
}

fn rotation(seed: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(N, N, seed).qr().q()
}

fn rotate_rows(sigma: &[Vec<f64>], r: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let s = DMatrix::from_row_iterator(M, N, sigma.iter().flatten().cloned()) * r;
    (0..M).map(|i| s.row(i).iter().cloned().collect()).collect()
}

fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_idempotent_and_symmetric(sigma in sigma_strategy(), mu in prop::collection::vec(-0.2..0.3f64, M)) {
        let s = snapshot(0.02, &mu, sigma);
        let p = &s.projection;
        prop_assert!(max_diff(&(p * p), p) < 1e-10);
        prop_assert!(max_diff(&p.transpose(), p) < 1e-12);
        prop_assert!((p.trace() - M as f64).abs() < 1e-10);
        prop_assert!((p * &s.theta - &s.theta).amax() < 1e-10);
    }

    #[test]
    fn noise_rotation_leaves_strategy_and_driver_unchanged(
        sigma in sigma_strategy(),
        mu in prop::collection::vec(-0.2..0.3f64, M),
        q in prop::collection::vec(-2.0..2.0f64, N),
        rot in prop::collection::vec(-1.0..1.0f64, N * N),
        gamma in 0.05..0.95f64,
    ) {
        let r = rotation(&rot);
        prop_assume!((r.transpose() * &r - DMatrix::identity(N, N)).amax() < 1e-10);
        let a = snapshot(0.02, &mu, sigma.clone());
        let b = snapshot(0.02, &mu, rotate_rows(&sigma, &r));
        let q = DVector::from_vec(q);
        let qr = r.transpose() * &q;
        prop_assert!((&b.theta - r.transpose() * &a.theta).amax() < 1e-10);
        let pa = optimal_pi_from_qhat(gamma, &a, &q);
        let pb = optimal_pi_from_qhat(gamma, &b, &qr);
        prop_assert!((pa.total() - pb.total()).amax() < 1e-9);
        prop_assert!((driver_f(gamma, &a, &q) - driver_f(gamma, &b, &qr)).abs() < 1e-10);
    }

    #[test]
    fn inverse_marginal_inverts_marginal(gamma in 0.02..0.98f64, x in 1e-3..1e3f64) {
        let u = PowerUtility::new(gamma, 1.0).unwrap();
        let back = u.inverse_marginal(u.marginal(x));
        prop_assert!((back - x).abs() <= 1e-10 * x);
    }

    #[test]
    fn driver_is_convex_with_known_minimizer(
        sigma in sigma_strategy(),
        mu in prop::collection::vec(-0.2..0.3f64, M),
        q1 in prop::collection::vec(-3.0..3.0f64, N),
        q2 in prop::collection::vec(-3.0..3.0f64, N),
        w in 0.0..1.0f64,
        gamma in 0.05..0.95f64,
    ) {
        let s = snapshot(0.02, &mu, sigma);
        let (q1, q2) = (DVector::from_vec(q1), DVector::from_vec(q2));
        let mix = &q1 * w + &q2 * (1.0 - w);
        let lhs = driver_f(gamma, &s, &mix);
        let rhs = w * driver_f(gamma, &s, &q1) + (1.0 - w) * driver_f(gamma, &s, &q2);
        prop_assert!(lhs <= rhs + 1e-10);
        let qmin = driver_minimizer(gamma, &s);
        prop_assert!(driver_f(gamma, &s, &qmin) <= driver_f(gamma, &s, &q1) + 1e-12);
    }
}
