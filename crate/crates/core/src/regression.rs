//! Cross-sectional least squares on polynomial features of standardized state.
//!
//! Normal equations are accumulated over fixed-size chunks summed in chunk
//! order, so fits are bit-identical for any thread count.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHUNK: usize = 2048;
/// Inputs whose standardized residual variance falls below this are dropped.
const DEPENDENCE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    /// Total polynomial degree; 0 is the constant only.
    pub degree: usize,
    /// Upper bound on the interaction order of a monomial; `None` allows all.
    #[serde(default)]
    pub max_interaction: Option<usize>,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            degree: 2,
            max_interaction: None,
        }
    }
}

impl BasisSpec {
    pub fn new(degree: usize) -> Self {
        Self {
            degree,
            max_interaction: None,
        }
    }

    /// Exponent vectors over `d` inputs, constant first, graded by degree.
    pub fn monomials(&self, d: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![0u8; d]];
        if d == 0 {
            return out;
        }
        for deg in 1..=self.degree {
            let mut cur = vec![0u8; d];
            push_degree(&mut out, &mut cur, 0, deg);
        }
        if let Some(cap) = self.max_interaction {
            out.retain(|e| e.iter().filter(|&&x| x > 0).count() <= cap.max(1));
        }
        out
    }

    /// Feature count for `d` non-degenerate inputs.
    pub fn feature_count(&self, d: usize) -> usize {
        self.monomials(d).len()
    }

    /// Rejects bases too large for the sample: features must stay below `n_paths / 10`.
    pub fn check_size(&self, inputs: usize, n_paths: usize) -> Result<()> {
        let f = self.feature_count(inputs);
        if f * 10 >= n_paths {
            return Err(Error::invalid(
                "basis",
                format!("{f} features need more than {} paths", 10 * f),
            ));
        }
        Ok(())
    }
}

fn push_degree(out: &mut Vec<Vec<u8>>, cur: &mut [u8], pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left as u8;
        out.push(cur.to_vec());
        cur[pos] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e as u8;
        push_degree(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// Polynomial regression in standardized inputs, possibly with several targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    /// Input columns kept after dropping constant and collinear ones.
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub exponents: Vec<Vec<u8>>,
    /// `n_features x n_targets`
    pub coefficients: DMatrix<f64>,
}

impl RegressionFit {
    pub fn n_targets(&self) -> usize {
        self.coefficients.ncols()
    }

    /// Intercept-only fit returning `values` everywhere.
    pub fn constant(values: &[f64]) -> Self {
        Self {
            kept: Vec::new(),
            mean: Vec::new(),
            scale: Vec::new(),
            exponents: vec![Vec::new()],
            coefficients: DMatrix::from_row_slice(1, values.len(), values),
        }
    }

    pub fn features(&self, input: &[f64], out: &mut Vec<f64>) {
        features_into(&self.kept, &self.mean, &self.scale, &self.exponents, input, out);
    }

    /// Predicts every target at `input`, writing into `out`.
    pub fn predict_into(&self, input: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
        self.features(input, scratch);
        for (j, o) in out.iter_mut().enumerate() {
            let col = self.coefficients.column(j);
            *o = scratch.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
        }
    }

    pub fn predict(&self, input: &[f64], target: usize) -> f64 {
        let mut scratch = Vec::with_capacity(self.exponents.len());
        self.features(input, &mut scratch);
        let col = self.coefficients.column(target);
        scratch.iter().zip(col.iter()).map(|(a, b)| a * b).sum()
    }
}

fn features_into(
    kept: &[usize],
    mean: &[f64],
    scale: &[f64],
    exponents: &[Vec<u8>],
    input: &[f64],
    out: &mut Vec<f64>,
) {
    out.clear();
    let mut z = [0.0f64; 16];
    let zs: Vec<f64>;
    let zref: &[f64] = if kept.len() <= 16 {
        for (i, &c) in kept.iter().enumerate() {
            z[i] = (input[c] - mean[i]) / scale[i];
        }
        &z[..kept.len()]
    } else {
        zs = kept.iter().enumerate().map(|(i, &c)| (input[c] - mean[i]) / scale[i]).collect();
        &zs
    };
    for e in exponents {
        let mut v = 1.0;
        for (x, &p) in zref.iter().zip(e) {
            for _ in 0..p {
                v *= x;
            }
        }
        out.push(v);
    }
}

/// Row-major design inputs: `rows x width`.
pub struct Inputs<'a> {
    pub data: &'a [f64],
    pub width: usize,
}

impl<'a> Inputs<'a> {
    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Chooses input columns and standardization: drops constant columns and
/// columns linearly dependent on earlier ones.
fn standardize(inputs: &Inputs, n_rows: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let w = inputs.width;
    let nf = n_rows as f64;
    let mut mean = vec![0.0; w];
    for i in 0..n_rows {
        for (m, x) in mean.iter_mut().zip(inputs.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut cov = DMatrix::<f64>::zeros(w, w);
    for i in 0..n_rows {
        let r = inputs.row(i);
        for a in 0..w {
            let da = r[a] - mean[a];
            for b in a..w {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..w {
        for b in a..w {
            cov[(a, b)] /= nf;
            cov[(b, a)] = cov[(a, b)];
        }
    }

    let mut kept: Vec<usize> = Vec::new();
    for c in 0..w {
        let var = cov[(c, c)];
        if !(var > 1e-24 * (1.0 + mean[c] * mean[c])) {
            continue;
        }
        if !kept.is_empty() {
            // Residual variance of column c given the kept columns, in correlation units.
            let k = kept.len();
            let corr = |a: usize, b: usize| cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt();
            let s = DMatrix::from_fn(k, k, |i, j| corr(kept[i], kept[j]));
            let r = DVector::from_fn(k, |i, _| corr(kept[i], c));
            let resid = match Cholesky::new(s) {
                Some(ch) => 1.0 - r.dot(&ch.solve(&r)),
                None => 0.0,
            };
            if resid < DEPENDENCE_TOL {
                continue;
            }
        }
        kept.push(c);
    }
    let m = kept.iter().map(|&c| mean[c]).collect();
    let s = kept.iter().map(|&c| cov[(c, c)].sqrt()).collect();
    (kept, m, s)
}

/// Least-squares fit of every target column on the polynomial basis.
/// `targets` is row-major `rows x n_targets`. `step` labels rank errors.
pub fn fit(
    inputs: &Inputs,
    targets: &[f64],
    n_targets: usize,
    basis: &BasisSpec,
    step: usize,
) -> Result<RegressionFit> {
    let n = if inputs.width == 0 { targets.len() / n_targets.max(1) } else { inputs.rows() };
    if n == 0 || targets.len() != n * n_targets {
        return Err(Error::invalid("regression", "inputs and targets disagree in length"));
    }
    let (kept, mean, scale) = if inputs.width == 0 {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        standardize(inputs, n)
    };
    let exponents = basis.monomials(kept.len());
    let nf = exponents.len();
    if nf > n {
        return Err(Error::RankDeficient { step });
    }

    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let partial: Vec<(DMatrix<f64>, DMatrix<f64>)> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut xtx = DMatrix::<f64>::zeros(nf, nf);
            let mut xty = DMatrix::<f64>::zeros(nf, n_targets);
            let mut phi = Vec::with_capacity(nf);
            for i in a..b {
                if inputs.width == 0 {
                    phi.clear();
                    phi.push(1.0);
                } else {
                    features_into(&kept, &mean, &scale, &exponents, inputs.row(i), &mut phi);
                }
                for r in 0..nf {
                    let pr = phi[r];
                    for c in r..nf {
                        xtx[(r, c)] += pr * phi[c];
                    }
                    for t in 0..n_targets {
                        xty[(r, t)] += pr * targets[i * n_targets + t];
                    }
                }
            }
            (xtx, xty)
        })
        .collect();
    let mut xtx = DMatrix::<f64>::zeros(nf, nf);
    let mut xty = DMatrix::<f64>::zeros(nf, n_targets);
    for (a, b) in partial {
        xtx += a;
        xty += b;
    }
    for r in 0..nf {
        for c in 0..r {
            xtx[(r, c)] = xtx[(c, r)];
        }
    }
    // Jacobi scaling keeps the Cholesky pivots comparable.
    let d: Vec<f64> = (0..nf).map(|i| xtx[(i, i)].sqrt()).collect();
    if d.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::RankDeficient { step });
    }
    let scaled = DMatrix::from_fn(nf, nf, |r, c| xtx[(r, c)] / (d[r] * d[c]));
    let min_pivot_ok = {
        let eig = scaled.clone().symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        min > 1e-12 * max
    };
    let chol = match (min_pivot_ok, Cholesky::new(scaled)) {
        (true, Some(ch)) => ch,
        _ => return Err(Error::RankDeficient { step }),
    };
    let rhs = DMatrix::from_fn(nf, n_targets, |r, t| xty[(r, t)] / d[r]);
    let sol = chol.solve(&rhs);
    let coefficients = DMatrix::from_fn(nf, n_targets, |r, t| sol[(r, t)] / d[r]);
    if coefficients.iter().any(|x| !x.is_finite()) {
        return Err(Error::RankDeficient { step });
    }
    Ok(RegressionFit {
        kept,
        mean,
        scale,
        exponents,
        coefficients,
    })
}
