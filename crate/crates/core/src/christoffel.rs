//! Christoffel functions `Lambda_{n,p}` and their comparison with the ball
//! measures `w(B(x, 1/n))`.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::Point;
use crate::polyspace::{BasisOptions, OrthoBasis};
use crate::quadrature::{oversampled_degree, QuadratureRule};
use crate::weights::{ball_measure_default, Weight};

pub const IRLS_MAX_ITER: usize = 200;
pub const IRLS_TOL: f64 = 1e-9;
const IRLS_FLOOR: f64 = 1e-12;

/// `Lambda_{n,2}(x) = 1 / sum_j P_j(x)^2`.
pub fn christoffel_l2(basis: &OrthoBasis, x: &Point) -> Result<f64> {
    Ok(1.0 / basis.eval(x)?.norm_squared())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpResult {
    pub value: f64,
    /// Objective of the `p = 2` minimizer, the IRLS starting point.
    pub l2_start: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Coefficients of the minimizer in the orthonormal basis.
    pub coefficients: DVector<f64>,
}

/// Minimizes `sum_q weight_q |V_q a|^p` subject to `v . a = 1`.
///
/// Starts from the `p = 2` minimizer and follows the smoothed objective
/// `sum_q weight_q (f_q^2 + eps^2)^{p/2}` with equality-constrained Newton
/// steps, dividing `eps` by 10 per level from `0.1 max|f|` down to
/// `1e-12 max|f|` (only the last level when `p > 2`). Converged once the exact objective moves by less than
/// `1e-9` relative between levels. The best exact objective seen is returned,
/// so the value never exceeds the starting one.
pub(crate) fn irls_min(
    v: &DMatrix<f64>,
    weights: &[f64],
    point_vals: &DVector<f64>,
    p: f64,
) -> Result<LpResult> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid(format!("p must lie in [1, inf), got {p}")));
    }
    let n = v.ncols();
    let objective = |a: &DVector<f64>| -> f64 {
        let f = v * a;
        f.iter()
            .zip(weights)
            .map(|(fq, w)| w * fq.abs().powf(p))
            .sum()
    };
    let vw = DMatrix::from_fn(v.nrows(), n, |q, j| v[(q, j)] * weights[q].sqrt());
    let gram = vw.transpose() * &vw;
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Numerical("Gram matrix of the rule lost positive definiteness".into())
    })?;
    let z = chol.solve(point_vals);
    let mut a = &z / point_vals.dot(&z);
    let mut obj = objective(&a);
    let l2_start = obj;
    if (p - 2.0).abs() < 1e-15 {
        return Ok(LpResult {
            value: obj,
            l2_start,
            iterations: 0,
            converged: true,
            coefficients: a,
        });
    }
    let scale = (v * &a).amax();
    let eps_min = IRLS_FLOOR * scale;
    // smooth already for p >= 2
    let mut eps = if p > 2.0 { eps_min } else { 0.1 * scale };
    let mut best = (obj, a.clone());
    let mut converged = false;
    let mut iterations = 0;
    let mut settled = false;
    'levels: loop {
        let smooth = |a: &DVector<f64>| -> f64 {
            let f = v * a;
            f.iter()
                .zip(weights)
                .map(|(fq, w)| w * (fq * fq + eps * eps).powf(0.5 * p))
                .sum()
        };
        for _ in 0..50 {
            if iterations >= IRLS_MAX_ITER {
                break 'levels;
            }
            iterations += 1;
            let f = v * &a;
            let mut gq = DVector::<f64>::zeros(f.len());
            let mut hq = DVector::<f64>::zeros(f.len());
            for q in 0..f.len() {
                let s = f[q] * f[q] + eps * eps;
                gq[q] = weights[q] * p * s.powf(0.5 * p - 1.0) * f[q];
                hq[q] =
                    weights[q] * p * s.powf(0.5 * p - 2.0) * ((p - 1.0) * f[q] * f[q] + eps * eps);
            }
            let g = v.transpose() * gq;
            let vh = DMatrix::from_fn(v.nrows(), n, |q, j| v[(q, j)] * hq[q].sqrt());
            let mut kkt = DMatrix::<f64>::zeros(n + 1, n + 1);
            kkt.view_mut((0, 0), (n, n))
                .copy_from(&(vh.transpose() * &vh));
            for j in 0..n {
                kkt[(j, n)] = point_vals[j];
                kkt[(n, j)] = point_vals[j];
            }
            let mut rhs = DVector::<f64>::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-&g));
            let Some(sol) = kkt.lu().solve(&rhs) else {
                break;
            };
            let step = sol.rows(0, n).into_owned();
            let decrement = -g.dot(&step);
            let phi = smooth(&a);
            if !(decrement > 1e-15 * phi) {
                settled = true;
                break;
            }
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand = &a + &step * t;
                if smooth(&cand) <= phi - 1e-4 * t * decrement {
                    a = cand;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        // keep the constraint exact against drift
        a /= point_vals.dot(&a);
        let exact = objective(&a);
        let change = (obj - exact).abs() / obj;
        obj = exact;
        if exact < best.0 {
            best = (exact, a.clone());
        }
        if eps <= eps_min {
            converged = if p > 2.0 { settled } else { change < IRLS_TOL };
            break;
        }
        eps = (eps * 0.1).max(eps_min);
    }
    Ok(LpResult {
        value: best.0,
        l2_start,
        iterations,
        converged,
        coefficients: best.1,
    })
}

/// Context for repeated `Lambda_{n,p}` evaluations at one `(n, p, w)`.
pub struct LpProblem {
    basis: OrthoBasis,
    values: DMatrix<f64>,
    p: f64,
}

impl LpProblem {
    /// Builds the basis on a rule exact for `|P|^p` up to the default
    /// oversampling.
    pub fn new(n: usize, p: f64, w: &Weight, dim: usize) -> Result<Self> {
        let rule = QuadratureRule::for_weight(w, dim, oversampled_degree(n, p))?;
        Self::with_rule(n, p, w, Arc::new(rule))
    }

    pub fn with_rule(n: usize, p: f64, w: &Weight, rule: Arc<QuadratureRule>) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(invalid(format!("p must lie in [1, inf), got {p}")));
        }
        let basis = OrthoBasis::with_rule(n, w, rule, BasisOptions::default())?;
        let values = basis.eval_batch(&basis.rule().nodes)?;
        Ok(Self { basis, values, p })
    }

    pub fn basis(&self) -> &OrthoBasis {
        &self.basis
    }

    pub fn solve(&self, x: &Point) -> Result<LpResult> {
        let px = self.basis.eval(x)?;
        irls_min(&self.values, &self.basis.rule().weights, &px, self.p)
    }
}

/// `Lambda_{n,p}(x) = min { ||P||_{p,w}^p : P in Pi_n, P(x) = 1 }`.
pub fn christoffel_lp(
    n: usize,
    p: f64,
    w: &Weight,
    x: &Point,
    rule: Arc<QuadratureRule>,
) -> Result<LpResult> {
    LpProblem::with_rule(n, p, w, rule)?.solve(x)
}

/// Scan points along the first axis: `{0, 0.5, 0.9, 0.99, 1 - 1/n^2}`.
pub fn radial_points(n: usize, dim: usize) -> Result<Vec<Point>> {
    let edge = 1.0 - 1.0 / (n.max(1) * n.max(1)) as f64;
    [0.0, 0.5, 0.9, 0.99, edge]
        .iter()
        .map(|&r| Point::on_axis(dim, 0, r))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub n: usize,
    pub x: Point,
    pub lambda: f64,
    pub ball_measure: f64,
    pub ratio: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChristoffelScan {
    pub weight: Weight,
    pub p: f64,
    pub rows: Vec<ScanRow>,
}

impl ChristoffelScan {
    /// `max ratio / min ratio` over all rows.
    pub fn window(&self) -> f64 {
        let hi = self.rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
        let lo = self
            .rows
            .iter()
            .map(|r| r.ratio)
            .fold(f64::INFINITY, f64::min);
        hi / lo
    }

    /// CSV with rows `n,p,x_norm,lambda,ball_measure,ratio`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,p,x_norm,lambda,ball_measure,ratio\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.n,
                self.p,
                r.x.norm(),
                r.lambda,
                r.ball_measure,
                r.ratio
            );
        }
        s
    }
}

/// Evaluates `Lambda_{n,p}(x) / w(B(x, 1/n))` on every `(n, x)` cell.
/// `x_set = None` uses [`radial_points`] for each `n`.
pub fn christoffel_scan(
    w: &Weight,
    p: f64,
    dim: usize,
    n_set: &[usize],
    x_set: Option<&[Point]>,
) -> Result<ChristoffelScan> {
    let mut rows = Vec::new();
    for &n in n_set {
        if n == 0 {
            return Err(invalid("scan degrees must be positive"));
        }
        let xs = match x_set {
            Some(xs) => xs.to_vec(),
            None => radial_points(n, dim)?,
        };
        let cells: Vec<(f64, bool)> = if (p - 2.0).abs() < 1e-15 {
            let basis = OrthoBasis::new(n, w, dim)?;
            xs.iter()
                .map(|x| Ok((christoffel_l2(&basis, x)?, true)))
                .collect::<Result<_>>()?
        } else {
            let problem = LpProblem::new(n, p, w, dim)?;
            xs.par_iter()
                .map(|x| problem.solve(x).map(|r| (r.value, r.converged)))
                .collect::<Result<_>>()?
        };
        let measures: Vec<f64> = xs
            .par_iter()
            .map(|x| ball_measure_default(w, x, 1.0 / n as f64))
            .collect::<Result<_>>()?;
        for ((x, (lambda, converged)), bm) in xs.iter().zip(cells).zip(measures) {
            if !(lambda > 0.0) || !(bm > 0.0) {
                return Err(Error::Numerical(format!(
                    "non-positive Christoffel cell at n = {n}: lambda = {lambda}, measure = {bm}"
                )));
            }
            rows.push(ScanRow {
                n,
                x: *x,
                lambda,
                ball_measure: bm,
                ratio: lambda / bm,
                converged,
            });
        }
    }
    Ok(ChristoffelScan {
        weight: w.clone(),
        p,
        rows,
    })
}

/// `||f||_{p, w_n} / ||f||_{p, w}` for `f = sum_j a_j P_j`, with the mollified
/// weight `w_n` applied pointwise on the basis rule.
pub fn mollified_norm_ratio(
    basis: &OrthoBasis,
    coefficients: &DVector<f64>,
    p: f64,
    n: usize,
) -> Result<f64> {
    let rule = basis.rule();
    let w = basis.weight();
    let vals = basis.eval_batch(&rule.nodes)? * coefficients;
    let wn: Vec<f64> = rule
        .nodes
        .par_iter()
        .map(|x| crate::weights::mollified_weight(w, n, x))
        .collect::<Result<_>>()?;
    let mut num = 0.0;
    let mut den = 0.0;
    for q in 0..rule.len() {
        let wx = w.eval(&rule.nodes[q])?;
        let fp = vals[q].abs().powf(p);
        num += rule.weights[q] * fp * wn[q] / wx;
        den += rule.weights[q] * fp;
    }
    Ok((num / den).powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn lebesgue() -> Weight {
        Weight::jacobi(0.5).unwrap()
    }

    #[test]
    fn degree_zero_is_total_mass() {
        let w = lebesgue();
        let b = OrthoBasis::new(0, &w, 2).unwrap();
        let x = Point::new(&[0.3, -0.2]).unwrap();
        assert!((christoffel_l2(&b, &x).unwrap() - PI).abs() < 1e-13);
        for p in [1.0, 1.5, 3.0] {
            let rule = Arc::new(QuadratureRule::for_weight(&w, 2, 20).unwrap());
            let r = christoffel_lp(0, p, &w, &x, rule).unwrap();
            assert!((r.value - PI).abs() < 1e-12, "{p}: {}", r.value);
        }
    }

    #[test]
    fn l2_decreases_with_degree() {
        let w = Weight::jacobi(1.0).unwrap();
        let b = OrthoBasis::new(10, &w, 2).unwrap();
        let x = Point::new(&[0.6, 0.5]).unwrap();
        let mut prev = f64::INFINITY;
        for n in 0..=10 {
            let v = christoffel_l2(&b.truncate(n).unwrap(), &x).unwrap();
            assert!(v <= prev * (1.0 + 1e-12));
            prev = v;
        }
    }

    // Independent route: minimize sum_q w_q P(x_q)^2 over monomial coefficients
    // with P(x) = 1, via a KKT system solved by QR.
    fn variational_l2(n: usize, w: &Weight, x: &Point) -> f64 {
        let rule = QuadratureRule::for_weight(w, 2, 2 * n + 6).unwrap();
        let monos = crate::polyspace::multi_indices(n, 2);
        let eval = |pt: &Point| -> Vec<f64> {
            monos
                .iter()
                .map(|a| pt.coords()[0].powi(a[0] as i32) * pt.coords()[1].powi(a[1] as i32))
                .collect()
        };
        let m = monos.len();
        let mut g = DMatrix::<f64>::zeros(m, m);
        for (pt, &wt) in rule.nodes.iter().zip(&rule.weights) {
            let e = eval(pt);
            for i in 0..m {
                for j in 0..m {
                    g[(i, j)] += wt * e[i] * e[j];
                }
            }
        }
        let c = eval(x);
        let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
        kkt.view_mut((0, 0), (m, m)).copy_from(&(g.clone() * 2.0));
        for i in 0..m {
            kkt[(i, m)] = c[i];
            kkt[(m, i)] = c[i];
        }
        let mut rhs = DVector::<f64>::zeros(m + 1);
        rhs[m] = 1.0;
        let sol = kkt.qr().solve(&rhs).unwrap();
        let a = sol.rows(0, m).into_owned();
        (a.transpose() * g * a)[(0, 0)]
    }

    #[test]
    fn l2_matches_variational_solve() {
        for mu in [0.5, 1.0] {
            let w = Weight::jacobi(mu).unwrap();
            let n = 5;
            let b = OrthoBasis::new(n, &w, 2).unwrap();
            for c in [[0.0, 0.0], [0.4, -0.3], [0.85, 0.2]] {
                let x = Point::new(&c).unwrap();
                let ours = christoffel_l2(&b, &x).unwrap();
                let theirs = variational_l2(n, &w, &x);
                assert!((ours / theirs - 1.0).abs() < 1e-8, "{ours} {theirs}");
            }
        }
    }

    #[test]
    fn lp_with_p2_matches_closed_form() {
        let w = Weight::jacobi(1.0).unwrap();
        let x = Point::new(&[0.3, 0.7]).unwrap();
        let pr = LpProblem::new(6, 2.0, &w, 2).unwrap();
        let r = pr.solve(&x).unwrap();
        let b = OrthoBasis::new(6, &w, 2).unwrap();
        let exact = christoffel_l2(&b, &x).unwrap();
        assert!((r.value / exact - 1.0).abs() < 1e-7);
    }

    #[test]
    fn irls_improves_on_l2_start_and_converges() {
        let w = lebesgue();
        for p in [1.0, 1.5, 4.0] {
            let pr = LpProblem::new(4, p, &w, 2).unwrap();
            let x = Point::new(&[0.2, 0.1]).unwrap();
            let r = pr.solve(&x).unwrap();
            assert!(r.value <= r.l2_start * (1.0 + 1e-14));
            assert!(r.converged, "p = {p}: {} iterations", r.iterations);
            let px = pr.basis().eval(&x).unwrap();
            assert!((px.dot(&r.coefficients) - 1.0).abs() < 1e-10);
        }
    }

    // Oracle: random feasible competitors never beat the IRLS minimum.
    #[test]
    fn irls_beats_random_competitors() {
        use rand::Rng;
        let w = lebesgue();
        let p = 1.0;
        let pr = LpProblem::new(3, p, &w, 2).unwrap();
        let x = Point::new(&[0.5, 0.0]).unwrap();
        let best = pr.solve(&x).unwrap();
        let px = pr.basis().eval(&x).unwrap();
        let vals = pr.basis().eval_batch(&pr.basis().rule().nodes).unwrap();
        let wts = &pr.basis().rule().weights;
        let mut rng = crate::rng::stream(3, 0);
        for _ in 0..200 {
            let pert = DVector::from_fn(px.len(), |_, _| rng.random_range(-0.3..0.3));
            let mut a = &best.coefficients + pert;
            let s = px.dot(&a);
            a /= s;
            let f = &vals * &a;
            let obj: f64 = f.iter().zip(wts).map(|(v, w)| w * v.abs().powf(p)).sum();
            assert!(obj >= best.value * (1.0 - 1e-6), "{obj} < {}", best.value);
        }
    }

    #[test]
    fn p1_at_center_is_comparable_to_ball_measure() {
        let w = lebesgue();
        let x = Point::origin(2);
        let r = LpProblem::new(4, 1.0, &w, 2).unwrap().solve(&x).unwrap();
        let bm = ball_measure_default(&w, &x, 0.25).unwrap();
        let c = (r.value / bm).max(bm / r.value);
        assert!(c < 20.0, "{c}");
    }

    #[test]
    fn monotone_in_n_for_p1() {
        let w = lebesgue();
        let x = Point::new(&[0.7, 0.0]).unwrap();
        let mut prev = f64::INFINITY;
        for n in 1..=5 {
            let v = LpProblem::new(n, 1.0, &w, 2)
                .unwrap()
                .solve(&x)
                .unwrap()
                .value;
            assert!(v <= prev * (1.0 + 1e-6), "{n}: {v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn scan_reproduces_single_cell_and_has_bounded_window() {
        let w = lebesgue();
        let scan = christoffel_scan(&w, 2.0, 2, &[4, 8, 16], None).unwrap();
        assert_eq!(scan.rows.len(), 15);
        assert!(scan.window() < 50.0, "{}", scan.window());
        let b = OrthoBasis::new(8, &w, 2).unwrap();
        let row = &scan.rows[7];
        assert!((row.lambda - christoffel_l2(&b, &row.x).unwrap()).abs() < 1e-14);
        let csv = scan.to_csv();
        assert!(csv.starts_with("n,p,x_norm,lambda,ball_measure,ratio\n"));
        assert_eq!(csv.lines().count(), 16);
    }

    // Kernel diagonal times ball measure is the reciprocal of the scan ratio.
    #[test]
    fn kernel_diagonal_restatement() {
        let w = Weight::jacobi(2.0).unwrap();
        let scan = christoffel_scan(&w, 2.0, 2, &[4, 8], None).unwrap();
        let mut prods = Vec::new();
        for r in &scan.rows {
            let b = OrthoBasis::new(r.n, &w, 2).unwrap();
            let s = b.christoffel_sum(&[r.x]).unwrap()[0];
            prods.push(s * r.ball_measure);
            assert!((s * r.ball_measure * r.ratio - 1.0).abs() < 1e-10);
        }
        let hi = prods.iter().cloned().fold(0.0, f64::max);
        let lo = prods.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi / lo < 50.0);
    }

    #[test]
    fn mollified_norm_ratio_is_bounded() {
        use rand_distr::{Distribution, StandardNormal};
        let w = Weight::jacobi(1.0).unwrap();
        let mut ratios = Vec::new();
        for n in [4usize, 8] {
            let rule =
                Arc::new(QuadratureRule::for_weight(&w, 2, oversampled_degree(n, 2.0)).unwrap());
            let b = OrthoBasis::with_rule(n, &w, rule, BasisOptions::default()).unwrap();
            let mut rng = crate::rng::stream(11, n as u64);
            let a = DVector::from_fn(b.len(), |_, _| StandardNormal.sample(&mut rng));
            for p in [1.0, 2.0] {
                ratios.push(mollified_norm_ratio(&b, &a, p, n).unwrap());
            }
        }
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi / lo < 10.0, "{ratios:?}");
    }
}
