//! Worst-case and average-case Markov factors `||grad P|| / ||P||`.

use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::polyspace::{differentiation_matrices, BasisOptions, DiffMatrix, OrthoBasis};
use crate::quadrature::{gauss_jacobi_1d, nodes_for, oversampled_degree, QuadratureRule};
use crate::weights::Weight;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorstMethod {
    EigenExact,
    IrlsAscent,
    Lifted,
}

impl fmt::Display for WorstMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorstMethod::EigenExact => "eigen-exact",
            WorstMethod::IrlsAscent => "irls-ascent",
            WorstMethod::Lifted => "lifted",
        })
    }
}

#[derive(Debug, Clone)]
pub struct WorstCaseResult {
    pub n: usize,
    pub p: f64,
    pub weight: Weight,
    pub value: f64,
    pub method: WorstMethod,
    pub extremal: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageCaseResult {
    pub n: usize,
    pub weight: Weight,
    pub sigma: f64,
    pub sample_count: usize,
    pub monte_carlo_mean: f64,
    pub monte_carlo_stderr: f64,
    pub trace_formula_value: f64,
}

/// Bases of degrees `n` and `n - 1` with the differentiation matrices between
/// them.
#[derive(Debug, Clone)]
pub struct MarkovSetup {
    pub basis_n: OrthoBasis,
    pub basis_n_minus_1: OrthoBasis,
    pub diff: Vec<DiffMatrix>,
}

impl MarkovSetup {
    pub fn new(n: usize, w: &Weight, dim: usize) -> Result<Self> {
        Self::with_options(n, w, dim, BasisOptions::default())
    }

    pub fn with_options(n: usize, w: &Weight, dim: usize, opts: BasisOptions) -> Result<Self> {
        if n == 0 {
            return Err(invalid("Markov setups need n >= 1"));
        }
        Self::from_basis(&OrthoBasis::with_options(n, w, dim, opts)?, n)
    }

    /// Truncates a basis of degree `>= n`; sweeps over `n` share one build.
    pub fn from_basis(full: &OrthoBasis, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("Markov setups need n >= 1"));
        }
        let basis_n = full.truncate(n)?;
        let basis_n_minus_1 = full.truncate(n - 1)?;
        let diff = differentiation_matrices(&basis_n, &basis_n_minus_1)?;
        Ok(Self {
            basis_n,
            basis_n_minus_1,
            diff,
        })
    }

    pub fn n(&self) -> usize {
        self.basis_n.degree()
    }

    pub fn dim(&self) -> usize {
        self.basis_n.dim()
    }

    pub fn weight(&self) -> &Weight {
        self.basis_n.weight()
    }

    /// `sum_i D_i^T D_i`.
    pub fn gradient_gram(&self) -> DMatrix<f64> {
        let n = self.basis_n.len();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for d in &self.diff {
            m += d.matrix.transpose() * &d.matrix;
        }
        m
    }
}

/// `sqrt(lambda_max(sum_i D_i^T D_i))` with the top eigenvector as extremal.
pub fn worst_l2(setup: &MarkovSetup) -> Result<WorstCaseResult> {
    let m = setup.gradient_gram();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite differentiation matrix at n = {}",
            setup.n()
        )));
    }
    let eig = SymmetricEigen::new(m);
    let (k, lmax) = eig
        .eigenvalues
        .iter()
        .cloned()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty");
    let lmin = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !lmax.is_finite() || lmin < -1e-8 * lmax.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "gradient Gram eigenvalues out of range at n = {}: [{lmin}, {lmax}]",
            setup.n()
        )));
    }
    Ok(WorstCaseResult {
        n: setup.n(),
        p: 2.0,
        weight: setup.weight().clone(),
        value: lmax.max(0.0).sqrt(),
        method: WorstMethod::EigenExact,
        extremal: Some(eig.eigenvectors.column(k).into_owned()),
    })
}

/// [`worst_l2`] with `n = 0` (constants) mapped to zero.
pub fn worst_l2_for(n: usize, w: &Weight, dim: usize) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    Ok(worst_l2(&MarkovSetup::new(n, w, dim)?)?.value)
}

/// Traces `tr(D_i^T D_i)` by both routes.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub value: f64,
    pub matrix_traces: Vec<f64>,
    pub norm_sums: Vec<f64>,
    pub max_rel_diff: f64,
}

pub const TRACE_TOL: f64 = 1e-8;

/// `n^{-d/2} sum_i sqrt(tr(D_i^T D_i))`; each trace is also computed as
/// `sum_j ||d_i P_j||^2` on an independent exact rule.
pub fn trace_formula(setup: &MarkovSetup) -> Result<TraceReport> {
    let n = setup.n();
    let d = setup.dim();
    let matrix_traces: Vec<f64> = setup
        .diff
        .iter()
        .map(|m| m.matrix.iter().map(|v| v * v).sum())
        .collect();
    let rule = QuadratureRule::for_weight(setup.weight(), d, 2 * n + 5)?;
    let (_, grads) = setup.basis_n.eval_with_grad(&rule.nodes)?;
    let norm_sums: Vec<f64> = grads
        .iter()
        .map(|g| {
            g.row_iter()
                .zip(&rule.weights)
                .map(|(r, w)| w * r.norm_squared())
                .sum()
        })
        .collect();
    let mut max_rel_diff: f64 = 0.0;
    for (a, b) in matrix_traces.iter().zip(&norm_sums) {
        max_rel_diff = max_rel_diff.max((a - b).abs() / a.abs().max(f64::MIN_POSITIVE));
    }
    if max_rel_diff > TRACE_TOL {
        return Err(Error::Consistency(format!(
            "trace routes disagree at n = {n}: {matrix_traces:?} vs {norm_sums:?}"
        )));
    }
    let value =
        (n as f64).powf(-(d as f64) / 2.0) * matrix_traces.iter().map(|t| t.sqrt()).sum::<f64>();
    Ok(TraceReport {
        value,
        matrix_traces,
        norm_sums,
        max_rel_diff,
    })
}

/// `E[ sqrt(sum_i ||D_i a||^2) / ||a|| ]` for `a ~ N(0, sigma^2 I)`.
///
/// Draw `k` uses the stream `(seed, k)`, so results do not depend on how the
/// draws are split across threads.
pub fn average_monte_carlo(
    setup: &MarkovSetup,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<AverageCaseResult> {
    if samples < 100 {
        return Err(invalid(format!("need at least 100 samples, got {samples}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let n_coef = setup.basis_n.len();
    let rows: usize = setup.diff.iter().map(|m| m.matrix.nrows()).sum();
    let mut stacked = DMatrix::<f64>::zeros(rows, n_coef);
    let mut r0 = 0;
    for m in &setup.diff {
        stacked
            .view_mut((r0, 0), (m.matrix.nrows(), n_coef))
            .copy_from(&m.matrix);
        r0 += m.matrix.nrows();
    }
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = crate::rng::stream(seed, k as u64);
            let a = DVector::<f64>::from_fn(n_coef, |_, _| {
                sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            (&stacked * &a).norm() / a.norm()
        })
        .collect();
    let (mean, stderr) = mean_stderr(&values);
    let trace = trace_formula(setup)?;
    Ok(AverageCaseResult {
        n: setup.n(),
        weight: setup.weight().clone(),
        sigma,
        sample_count: samples,
        monte_carlo_mean: mean,
        monte_carlo_stderr: stderr,
        trace_formula_value: trace.value,
    })
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Maximizes `(sum_q w_q |grad f|^p / sum_q w_q |f|^p)^{1/p}` over coefficient
/// vectors, with values and gradients of the basis tabulated at the nodes.
struct RatioProblem {
    vals: DMatrix<f64>,
    grads: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
    p: f64,
}

const ASCENT_MAX_ITER: usize = 400;

impl RatioProblem {
    fn log_ratio(&self, a: &DVector<f64>) -> f64 {
        let f = &self.vals * a;
        let gs: Vec<DVector<f64>> = self.grads.iter().map(|g| g * a).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for q in 0..f.len() {
            let gn2: f64 = gs.iter().map(|g| g[q] * g[q]).sum();
            num += self.weights[q] * gn2.powf(0.5 * self.p);
            den += self.weights[q] * f[q].abs().powf(self.p);
        }
        (num.ln() - den.ln()) / self.p
    }

    /// Monotone power iteration for the ratio of two `L_p` seminorms.
    ///
    /// `a -> ||grad P_a||_p` is convex and 1-homogeneous, so with `c` its
    /// gradient at `a`, `||grad P_b||_p >= c . b` for every `b`, with equality
    /// at `b = a`. The next iterate maximizes `c . b / ||P_b||_p`, i.e. solves
    /// `min ||P_b||_p^p` subject to `c . b = 1`; the ratio never decreases.
    fn ascend(&self, start: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut a = start.normalize();
        let mut val = self.log_ratio(&a);
        for _ in 0..ASCENT_MAX_ITER {
            let c = self.numerator_direction(&a);
            if !(c.norm() > 0.0) || c.iter().any(|v| !v.is_finite()) {
                break;
            }
            let Ok(next) = crate::christoffel::irls_min(&self.vals, &self.weights, &c, self.p)
            else {
                break;
            };
            let b = next.coefficients.normalize();
            let nv = self.log_ratio(&b);
            if !(nv > val + 1e-12) {
                break;
            }
            a = b;
            val = nv;
        }
        (val.exp(), a)
    }

    /// Gradient of `sum_q w_q |grad P_a(x_q)|^p` (up to the factor `p`).
    fn numerator_direction(&self, a: &DVector<f64>) -> DVector<f64> {
        let gs: Vec<DVector<f64>> = self.grads.iter().map(|g| g * a).collect();
        let nq = self.vals.nrows();
        let mut cg = DVector::<f64>::zeros(nq);
        for q in 0..nq {
            let gn = gs.iter().map(|g| g[q] * g[q]).sum::<f64>().sqrt();
            if gn > 0.0 {
                cg[q] = self.weights[q] * gn.powf(self.p - 2.0);
            }
        }
        let mut out = DVector::<f64>::zeros(a.len());
        for (g, gv) in self.grads.iter().zip(&gs) {
            out += g.transpose() * gv.component_mul(&cg);
        }
        out
    }

    fn best_of(&self, starts: &[DVector<f64>]) -> (f64, DVector<f64>) {
        let results: Vec<(f64, DVector<f64>)> = starts.par_iter().map(|s| self.ascend(s)).collect();
        let mut best = results[0].clone();
        for r in results.into_iter().skip(1) {
            if r.0 > best.0 {
                best = r;
            }
        }
        best
    }

    /// Top eigenvector of the gradient Gram matrix on the rule (the exact
    /// `p = 2` extremal when the rule integrates degree `2n`).
    fn l2_start(&self) -> DVector<f64> {
        let n = self.vals.ncols();
        let mut m = DMatrix::<f64>::zeros(n, n);
        let sq: Vec<f64> = self.weights.iter().map(|w| w.sqrt()).collect();
        for g in &self.grads {
            let gw = DMatrix::from_fn(g.nrows(), n, |q, j| g[(q, j)] * sq[q]);
            m += gw.transpose() * &gw;
        }
        let eig = SymmetricEigen::new(m);
        let k = eig.eigenvalues.imax();
        eig.eigenvectors.column(k).into_owned()
    }
}

fn random_starts(n_coef: usize, restarts: usize, seed: u64) -> Vec<DVector<f64>> {
    (0..restarts)
        .map(|k| {
            let mut rng = crate::rng::stream(seed, 0x5eed_0000 + k as u64);
            DVector::from_fn(n_coef, |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        })
        .collect()
}

/// Orthonormal polynomials for `(1 - t^2)^{lambda - 1/2}` on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct JacobiBasis1d {
    n: usize,
    lambda: f64,
    p0: f64,
    b: Vec<f64>,
}

impl JacobiBasis1d {
    pub fn new(n: usize, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        let alpha = lambda - 0.5;
        let mass: f64 = gauss_jacobi_1d(1, alpha, alpha)?.weights.iter().sum();
        // b[k] couples degrees k - 1 and k
        let mut b = vec![0.0; n + 1];
        for (k, bk) in b.iter_mut().enumerate().skip(1) {
            let j = k as f64;
            *bk = if k == 1 {
                (1.0 / (3.0 + 2.0 * alpha)).sqrt()
            } else {
                (j * (j + 2.0 * alpha)
                    / ((2.0 * j + 2.0 * alpha - 1.0) * (2.0 * j + 2.0 * alpha + 1.0)))
                    .sqrt()
            };
        }
        Ok(Self {
            n,
            lambda,
            p0: 1.0 / mass.sqrt(),
            b,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Values and derivatives of `p_0..p_n` at `t`.
    pub fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0; self.n + 1];
        let mut dv = vec![0.0; self.n + 1];
        v[0] = self.p0;
        for k in 0..self.n {
            let prev = if k > 0 { v[k - 1] } else { 0.0 };
            let dprev = if k > 0 { dv[k - 1] } else { 0.0 };
            v[k + 1] = (t * v[k] - self.b[k] * prev) / self.b[k + 1];
            dv[k + 1] = (v[k] + t * dv[k] - self.b[k] * dprev) / self.b[k + 1];
        }
        (v, dv)
    }

    fn tabulate(&self, nodes: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut v = DMatrix::<f64>::zeros(nodes.len(), self.n + 1);
        let mut dv = DMatrix::<f64>::zeros(nodes.len(), self.n + 1);
        for (q, &t) in nodes.iter().enumerate() {
            let (a, b) = self.eval(t);
            for k in 0..=self.n {
                v[(q, k)] = a[k];
                dv[(q, k)] = b[k];
            }
        }
        (v, dv)
    }
}

/// One-dimensional worst case with its extremal in the [`JacobiBasis1d`].
#[derive(Debug, Clone)]
pub struct Worst1d {
    pub value: f64,
    pub coefficients: DVector<f64>,
    pub basis: JacobiBasis1d,
}

pub const DEFAULT_RESTARTS: usize = 4;

/// Gauss–Jacobi rule used for `L_p` norms of degree-`n` polynomials in the
/// variable `t`; identical to the `t`-factor of the sliced ball rule of the
/// same degree, so lifted and ball computations share their nodes.
fn lp_rule_1d(n: usize, p: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let alpha = lambda - 0.5;
    let r = gauss_jacobi_1d(nodes_for(oversampled_degree(n, p)), alpha, alpha)?;
    Ok((r.nodes, r.weights))
}

pub fn worst_1d_detail(
    n: usize,
    p: f64,
    lambda: f64,
    restarts: usize,
    seed: u64,
) -> Result<Worst1d> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid(format!("p must lie in [1, inf), got {p}")));
    }
    let basis = JacobiBasis1d::new(n, lambda)?;
    if n == 0 {
        return Ok(Worst1d {
            value: 0.0,
            coefficients: DVector::from_element(1, 1.0),
            basis,
        });
    }
    let (nodes, weights) = lp_rule_1d(n, p, lambda)?;
    let (vals, dvals) = basis.tabulate(&nodes);
    let problem = RatioProblem {
        vals,
        grads: vec![dvals],
        weights,
        p,
    };
    let eig_start = problem.l2_start();
    if (p - 2.0).abs() < 1e-15 {
        let value = problem.log_ratio(&eig_start).exp();
        return Ok(Worst1d {
            value,
            coefficients: eig_start,
            basis,
        });
    }
    let mut starts = vec![eig_start];
    starts.extend(random_starts(n + 1, restarts, seed));
    let (value, coefficients) = problem.best_of(&starts);
    Ok(Worst1d {
        value,
        coefficients,
        basis,
    })
}

/// `sup ||f'||_{p, w_lambda} / ||f||_{p, w_lambda}` over `Pi_n^1`: exact at
/// `p = 2`, a lower bound from multi-start ascent otherwise.
pub fn worst_1d(n: usize, p: f64, lambda: f64) -> Result<f64> {
    Ok(worst_1d_detail(n, p, lambda, DEFAULT_RESTARTS, 0)?.value)
}

#[derive(Debug, Clone)]
pub struct LiftedResult {
    pub value: f64,
    /// `||f(x_1)||_{p,w_mu}^p / int |f|^p w_lambda`, the same for every `f`.
    pub identity_constant: f64,
    pub extremal: Worst1d,
}

pub const LIFT_TOL: f64 = 1e-7;

/// Worst case of the univariate subspace `{f(x_1)}` of `Pi_n^d` for the Jacobi
/// weight: `worst_1d(n, p, mu + (d - 1)/2)`. Verifies on random `f` that the
/// ball norm of `f(x_1)` is a fixed multiple of the 1D norm.
pub fn lifted_lower_bound(n: usize, p: f64, mu: f64, d: usize) -> Result<LiftedResult> {
    let w = Weight::jacobi(mu)?;
    w.check_dim(d)?;
    let lambda = mu + 0.5 * (d as f64 - 1.0);
    let extremal = worst_1d_detail(n, p, lambda, DEFAULT_RESTARTS, 0)?;
    let rule = QuadratureRule::for_weight(&w, d, oversampled_degree(n, p))?;
    let (nodes, weights) = lp_rule_1d(n, p, lambda)?;
    let basis = &extremal.basis;
    let mut constants = Vec::new();
    for k in 0..3u64 {
        let mut rng = crate::rng::stream(0x11f7, k);
        let c = DVector::<f64>::from_fn(n + 1, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let f = |t: f64| DVector::from_vec(basis.eval(t).0).dot(&c);
        let ball: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(x, wq)| wq * f(x.coords()[0]).abs().powf(p))
            .sum();
        let line: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(t, wq)| wq * f(*t).abs().powf(p))
            .sum();
        constants.push(ball / line);
    }
    let c0 = constants[0];
    if constants.iter().any(|c| (c / c0 - 1.0).abs() > LIFT_TOL) {
        return Err(Error::Consistency(format!(
            "lifting constant depends on f: {constants:?}"
        )));
    }
    Ok(LiftedResult {
        value: extremal.value,
        identity_constant: c0,
        extremal,
    })
}

/// Lower bound for `sup ||grad P||_{p,w} / ||P||_{p,w}` by multi-start
/// monotone power iteration. Starts: the `L_2` extremal, the lifted
/// univariate extremal (Jacobi weights), and `restarts` Gaussian draws.
pub fn worst_lp(
    n: usize,
    p: f64,
    w: &Weight,
    dim: usize,
    restarts: usize,
    seed: u64,
) -> Result<WorstCaseResult> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid(format!("p must lie in [1, inf), got {p}")));
    }
    if n == 0 {
        return Ok(WorstCaseResult {
            n,
            p,
            weight: w.clone(),
            value: 0.0,
            method: WorstMethod::IrlsAscent,
            extremal: None,
        });
    }
    let rule = Arc::new(QuadratureRule::for_weight(
        w,
        dim,
        oversampled_degree(n, p),
    )?);
    let basis = OrthoBasis::with_rule(n, w, rule.clone(), BasisOptions::default())?;
    let (vals, grads) = basis.eval_with_grad(&rule.nodes)?;
    let problem = RatioProblem {
        vals: vals.clone(),
        grads,
        weights: rule.weights.clone(),
        p,
    };
    let mut starts = vec![problem.l2_start()];
    if let (Weight::Jacobi { mu }, true) = (w, p != 2.0) {
        let lifted = lifted_lower_bound(n, p, *mu, dim)?;
        let b1 = &lifted.extremal.basis;
        let c = &lifted.extremal.coefficients;
        // projection of f(x_1) onto the ball basis; exact since degree 2n is integrated
        let fx = DVector::from_iterator(
            rule.len(),
            rule.nodes
                .iter()
                .zip(&rule.weights)
                .map(|(x, wq)| wq * DVector::from_vec(b1.eval(x.coords()[0]).0).dot(c)),
        );
        starts.push(vals.transpose() * fx);
    }
    if p != 2.0 {
        starts.extend(random_starts(basis.len(), restarts, seed));
    }
    let (value, a) = if p == 2.0 {
        let a = starts[0].clone();
        (problem.log_ratio(&a).exp(), a)
    } else {
        problem.best_of(&starts)
    };
    Ok(WorstCaseResult {
        n,
        p,
        weight: w.clone(),
        value,
        method: if p == 2.0 {
            WorstMethod::EigenExact
        } else {
            WorstMethod::IrlsAscent
        },
        extremal: Some(a),
    })
}

/// One-dimensional average factor `E ||f'|| / ||f||` in `L_{2, w_lambda}`.
pub fn average_1d(n: usize, lambda: f64, samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n == 0 || samples < 2 {
        return Err(invalid("average_1d needs n >= 1 and at least two samples"));
    }
    let basis = JacobiBasis1d::new(n, lambda)?;
    let (nodes, weights) = lp_rule_1d(n, 2.0, lambda)?;
    let (v, dv) = basis.tabulate(&nodes);
    let vw = DMatrix::from_fn(v.nrows(), v.ncols(), |q, k| v[(q, k)] * weights[q]);
    let d = vw.transpose() * dv;
    let vals: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = crate::rng::stream(seed, k as u64);
            let a = DVector::<f64>::from_fn(n + 1, |_, _| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            (&d * &a).norm() / a.norm()
        })
        .collect();
    Ok(mean_stderr(&vals))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_residual: f64,
}

/// Least-squares fit of `log value = slope * log n + intercept`.
pub fn exponent_fit(points: &[(f64, f64)]) -> Result<ExponentFit> {
    if points.len() < 3 {
        return Err(invalid(format!(
            "exponent fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some(bad) = points.iter().find(|(n, v)| !(*n > 0.0) || !(*v > 0.0)) {
        return Err(invalid(format!(
            "non-positive point in exponent fit: {bad:?}"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("exponent fit needs at least two distinct n"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - slope * x - intercept).abs())
        .fold(0.0, f64::max);
    Ok(ExponentFit {
        slope,
        intercept,
        max_residual,
    })
}

/// CSV row `n,p,weight,method,value,stderr`; the weight is quoted when it
/// contains a comma.
pub fn csv_row(
    s: &mut String,
    n: usize,
    p: f64,
    weight: &Weight,
    method: &str,
    value: f64,
    stderr: f64,
) {
    let w = weight.to_string();
    let w = if w.contains(',') {
        format!("\"{w}\"")
    } else {
        w
    };
    let _ = writeln!(s, "{n},{p},{w},{method},{value:.17e},{stderr:.17e}");
}

pub const CSV_HEADER: &str = "n,p,weight,method,value,stderr\n";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn jac(mu: f64) -> Weight {
        Weight::jacobi(mu).unwrap()
    }

    #[test]
    fn hand_values_n1() {
        let s = MarkovSetup::new(1, &jac(0.5), 2).unwrap();
        assert!((worst_l2(&s).unwrap().value - 2.0).abs() < 1e-10);
        let t = trace_formula(&s).unwrap();
        assert!((t.matrix_traces[0] - 4.0).abs() < 1e-10);
        assert!((t.value - 4.0).abs() < 1e-10);
        assert_eq!(worst_l2_for(0, &jac(0.5), 2).unwrap(), 0.0);
    }

    // Brute force over P = a0 + a1 x + a2 y with the closed-form norms
    // ||P||^2 = pi a0^2 + pi (a1^2 + a2^2) / 4 and ||grad P||^2 = pi (a1^2 + a2^2).
    #[test]
    fn hand_value_brute_force() {
        let mut best: f64 = 0.0;
        for i in 0..=200 {
            let th = PI * i as f64 / 200.0;
            let (a0, r) = (th.cos(), th.sin());
            let num = PI * r * r;
            let den = PI * a0 * a0 + PI * r * r / 4.0;
            best = best.max((num / den).sqrt());
        }
        assert!((best - 2.0).abs() < 1e-12);
    }

    #[test]
    fn worst_l2_is_monotone() {
        let w = jac(1.0);
        let full = OrthoBasis::new(12, &w, 2).unwrap();
        let mut prev = 0.0;
        for n in 1..=12 {
            let v = worst_l2(&MarkovSetup::from_basis(&full, n).unwrap())
                .unwrap()
                .value;
            assert!(v >= prev - 1e-9);
            prev = v;
        }
    }

    #[test]
    fn truncated_setup_matches_fresh_build() {
        let w = jac(0.5);
        let full = OrthoBasis::new(9, &w, 2).unwrap();
        let a = worst_l2(&MarkovSetup::from_basis(&full, 6).unwrap())
            .unwrap()
            .value;
        let b = worst_l2(&MarkovSetup::new(6, &w, 2).unwrap())
            .unwrap()
            .value;
        assert!((a / b - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rotation_invariance() {
        let w = jac(0.5);
        let a = MarkovSetup::new(7, &w, 2).unwrap();
        let b = MarkovSetup::with_options(
            7,
            &w,
            2,
            BasisOptions {
                shuffle_seed: Some(4),
            },
        )
        .unwrap();
        let wa = worst_l2(&a).unwrap().value;
        let wb = worst_l2(&b).unwrap().value;
        assert!((wa / wb - 1.0).abs() < 1e-7);
        let ta = trace_formula(&a).unwrap().value;
        let tb = trace_formula(&b).unwrap().value;
        assert!((ta / tb - 1.0).abs() < 1e-7);
        let ma = average_monte_carlo(&a, 1.0, 4000, 2).unwrap();
        let mb = average_monte_carlo(&b, 1.0, 4000, 3).unwrap();
        let se = (ma.monte_carlo_stderr.powi(2) + mb.monte_carlo_stderr.powi(2)).sqrt();
        assert!((ma.monte_carlo_mean - mb.monte_carlo_mean).abs() < 4.0 * se);
    }

    #[test]
    fn trace_identity_three_weights() {
        for w in [
            jac(0.0),
            jac(1.0),
            Weight::product(vec![0.5, 0.5], 0.5).unwrap(),
        ] {
            let full = OrthoBasis::new(8, &w, 2).unwrap();
            for n in [1, 4, 8] {
                let t = trace_formula(&MarkovSetup::from_basis(&full, n).unwrap()).unwrap();
                assert!(t.max_rel_diff < 1e-8, "{w} n={n}: {}", t.max_rel_diff);
            }
        }
    }

    #[test]
    fn gradient_norm_decomposition() {
        let w = jac(1.0);
        let s = MarkovSetup::new(5, &w, 2).unwrap();
        let rule = QuadratureRule::for_weight(&w, 2, 12).unwrap();
        let (_, grads) = s.basis_n.eval_with_grad(&rule.nodes).unwrap();
        let mut rng = crate::rng::stream(5, 0);
        let a = DVector::<f64>::from_fn(s.basis_n.len(), |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let parts: Vec<DVector<f64>> = grads.iter().map(|g| g * &a).collect();
        let whole: f64 = (0..rule.len())
            .map(|q| rule.weights[q] * parts.iter().map(|v| v[q] * v[q]).sum::<f64>())
            .sum();
        let by_matrix: f64 = s.diff.iter().map(|d| d.apply(&a).norm_squared()).sum();
        assert!((whole / by_matrix - 1.0).abs() < 1e-10);
    }

    #[test]
    fn monte_carlo_sigma_invariance_and_determinism() {
        let s = MarkovSetup::new(4, &jac(0.5), 2).unwrap();
        let a = average_monte_carlo(&s, 1.0, 500, 9).unwrap();
        let b = average_monte_carlo(&s, 10.0, 500, 9).unwrap();
        let se = (a.monte_carlo_stderr.powi(2) + b.monte_carlo_stderr.powi(2)).sqrt();
        assert!((a.monte_carlo_mean - b.monte_carlo_mean).abs() < 3.0 * se);
        // matched streams make the two identical up to rounding
        assert!((a.monte_carlo_mean - b.monte_carlo_mean).abs() < 1e-12);
        let c = average_monte_carlo(&s, 1.0, 500, 9).unwrap();
        assert_eq!(a, c);
        assert!(average_monte_carlo(&s, 1.0, 50, 9).is_err());
    }

    // E[2 |(a1, a2)| / |a|] for a standard Gaussian in R^3: with a uniform on
    // S^2, |(a1, a2)| = sin(theta) and cos(theta) is uniform on [-1, 1].
    #[test]
    fn monte_carlo_n1_matches_integral() {
        let s = MarkovSetup::new(1, &jac(0.5), 2).unwrap();
        let r = average_monte_carlo(&s, 1.0, 20000, 1).unwrap();
        let gl = crate::quadrature::gauss_legendre(200).unwrap();
        let exact = 0.5 * gl.integrate(|z| 2.0 * (1.0 - z * z).sqrt());
        assert!((exact - PI / 2.0).abs() < 1e-4);
        assert!(
            (r.monte_carlo_mean - exact).abs() < 3.0 * r.monte_carlo_stderr,
            "{} vs {exact}",
            r.monte_carlo_mean
        );
    }

    #[test]
    fn jacobi_1d_basis_is_orthonormal() {
        for lambda in [0.0, 0.5, 1.0, 3.0] {
            let b = JacobiBasis1d::new(10, lambda).unwrap();
            let r = gauss_jacobi_1d(12, lambda - 0.5, lambda - 0.5).unwrap();
            let (v, _) = b.tabulate(&r.nodes);
            let vw = DMatrix::from_fn(v.nrows(), v.ncols(), |q, k| v[(q, k)] * r.weights[q].sqrt());
            let g = vw.transpose() * &vw;
            assert!((g - DMatrix::identity(11, 11)).amax() < 1e-12);
        }
    }

    #[test]
    fn jacobi_1d_derivative_matches_finite_difference() {
        let b = JacobiBasis1d::new(6, 1.0).unwrap();
        let (_, d) = b.eval(0.3);
        let h = 1e-6;
        let (vp, _) = b.eval(0.3 + h);
        let (vm, _) = b.eval(0.3 - h);
        for k in 0..=6 {
            assert!((d[k] - (vp[k] - vm[k]) / (2.0 * h)).abs() < 1e-6);
        }
    }

    // f = a + b t, Legendre weight: ||f'||^2 = 2 b^2, ||f||^2 = 2 a^2 + 2 b^2 / 3.
    #[test]
    fn worst_1d_n1_brute_force() {
        let mut best: f64 = 0.0;
        for i in 0..=400 {
            let th = PI * i as f64 / 400.0;
            let (a, b) = (th.cos(), th.sin());
            best = best.max((2.0 * b * b / (2.0 * a * a + 2.0 * b * b / 3.0)).sqrt());
        }
        let ours = worst_1d(1, 2.0, 0.5).unwrap();
        assert!((ours - best).abs() < 1e-10, "{ours} {best}");
        assert_eq!(worst_1d(0, 2.0, 0.5).unwrap(), 0.0);
    }

    // value / n^2 stays in a bounded window and the local log-log slope climbs
    // toward 2 as n grows
    #[test]
    fn worst_1d_p2_growth() {
        for lambda in [0.5, 1.0, 3.0] {
            let pts: Vec<(f64, f64)> = (4..=64)
                .step_by(4)
                .map(|n| (n as f64, worst_1d(n, 2.0, lambda).unwrap()))
                .collect();
            let r: Vec<f64> = pts.iter().map(|(n, v)| v / (n * n)).collect();
            let hi = r.iter().cloned().fold(0.0, f64::max);
            let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(hi / lo < 10.0);
            let head = exponent_fit(&pts[..5]).unwrap().slope;
            let tail = exponent_fit(&pts[10..]).unwrap().slope;
            assert!(
                tail > head && tail > 1.8 && tail < 2.0,
                "{lambda}: {head} {tail}"
            );
        }
    }

    #[test]
    fn worst_lp_p2_matches_eigen() {
        let w = jac(0.5);
        let e = worst_l2(&MarkovSetup::new(5, &w, 2).unwrap())
            .unwrap()
            .value;
        let a = worst_lp(5, 2.0, &w, 2, 2, 1).unwrap().value;
        assert!((a / e - 1.0).abs() < 1e-4);
    }

    #[test]
    fn lifted_is_dominated() {
        for p in [1.0, 4.0] {
            let w = jac(0.5);
            let l = lifted_lower_bound(4, p, 0.5, 2).unwrap();
            let wl = worst_lp(4, p, &w, 2, 2, 1).unwrap();
            assert!(
                l.value <= wl.value + 1e-6,
                "{p}: {} > {}",
                l.value,
                wl.value
            );
        }
        let e = worst_l2(&MarkovSetup::new(6, &jac(1.0), 2).unwrap())
            .unwrap()
            .value;
        let l = lifted_lower_bound(6, 2.0, 1.0, 2).unwrap().value;
        assert!(l <= e + 1e-9);
    }

    #[test]
    fn lifting_constant_for_constants() {
        // slices of B^2 at x_1 = t have length 2 sqrt(1 - t^2) and the 1D weight
        // for lambda = 1 is (1 - t^2)^{1/2}: the constant is 2; f = 1 gives pi / (pi / 2)
        let l = lifted_lower_bound(3, 2.0, 0.5, 2).unwrap();
        assert!((l.identity_constant - 2.0).abs() < 1e-12);
        let mass: f64 = gauss_jacobi_1d(4, 0.5, 0.5).unwrap().weights.iter().sum();
        assert!((PI / mass - 2.0).abs() < 1e-12);
    }

    #[test]
    fn more_restarts_never_hurt() {
        let w = jac(0.5);
        let a = worst_lp(3, 1.0, &w, 2, 2, 7).unwrap().value;
        let b = worst_lp(3, 1.0, &w, 2, 4, 7).unwrap().value;
        assert!(b >= a - 1e-12);
    }

    #[test]
    fn fit_examples() {
        let sq: Vec<(f64, f64)> = (2..10).map(|n| (n as f64, 3.0 * (n * n) as f64)).collect();
        assert!((exponent_fit(&sq).unwrap().slope - 2.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = (2..10).map(|n| (n as f64, 5.0)).collect();
        assert!(exponent_fit(&flat).unwrap().slope.abs() < 1e-12);
        assert!(exponent_fit(&sq[..2]).is_err());
        assert!(exponent_fit(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn average_1d_diagnostic_is_finite() {
        let (m, se) = average_1d(8, 0.5, 500, 1).unwrap();
        assert!(m > 0.0 && se > 0.0);
        assert!(worst_1d(8, 2.0, 0.5).unwrap() / 8f64.sqrt() < 10.0 * m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fit_recovers_noisy_exponent(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, 0);
            let pts: Vec<(f64, f64)> = (2..=16)
                .map(|n| {
                    let e: f64 = rng.random_range(-0.01..0.01);
                    (n as f64, (n as f64).powf(1.5) * (1.0 + e))
                })
                .collect();
            let s = exponent_fit(&pts).unwrap().slope;
            prop_assert!(s > 1.45 && s < 1.55);
        }
    }
}
