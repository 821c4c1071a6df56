//! Gegenbauer polynomials, reproducing kernels of the Jacobi weights, the
//! smoothed kernel `L_n` and its derivatives, Fejer-type kernels, needle
//! polynomials, maximal functions and the `J_p` integral.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::geometry::{self, Point};
use crate::polyspace::OrthoBasis;
use crate::quadrature::{
    cap_rule, gauss_jacobi_1d, nodes_for, oversampled_degree, CapOptions, QuadratureRule,
};
use crate::weights::{cal_w, Weight};

/// `C_n^lambda(t)` by the three-term recurrence.
pub fn gegenbauer(n: usize, lambda: f64, t: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(invalid(format!(
            "Gegenbauer index must be positive, got {lambda}"
        )));
    }
    Ok(*gegenbauer_all(n, lambda, t).last().expect("nonempty"))
}

/// `[C_0^lambda(t), ..., C_n^lambda(t)]`.
pub fn gegenbauer_all(n: usize, lambda: f64, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(2.0 * lambda * t);
    }
    for k in 1..n {
        let kf = k as f64;
        let next = (2.0 * (kf + lambda) * t * out[k] - (kf + 2.0 * lambda - 1.0) * out[k - 1])
            / (kf + 1.0);
        out.push(next);
    }
    out
}

/// `b_d^mu = 1 / int_{B^d} (1 - |x|^2)^{mu - 1/2} dx`.
pub fn b_d(mu: f64, d: usize) -> f64 {
    let df = d as f64;
    (ln_gamma(mu + 0.5 + df / 2.0) - df / 2.0 * PI.ln() - ln_gamma(mu + 0.5)).exp()
}

/// `b_1^{mu - 1/2} = 1 / int_{-1}^{1} (1 - u^2)^{mu - 1} du`, for `mu > 0`.
pub fn b_1(mu: f64) -> f64 {
    (ln_gamma(mu + 0.5) - 0.5 * PI.ln() - ln_gamma(mu)).exp()
}

/// The cutoff `eta`: `1` on `[0, 1]`, `0` on `[2, inf)`, and the exponential
/// bump transition `s(2 - t) / (s(2 - t) + s(t - 1))` with `s(u) = exp(-1/u)`.
pub fn cutoff_eta(t: f64) -> f64 {
    fn s(u: f64) -> f64 {
        if u > 0.0 {
            (-1.0 / u).exp()
        } else {
            0.0
        }
    }
    if t <= 1.0 {
        1.0
    } else if t >= 2.0 {
        0.0
    } else {
        let a = s(2.0 - t);
        a / (a + s(t - 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMethod {
    GegenbauerIntegral,
    BasisSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEval {
    pub n: usize,
    pub mu: f64,
    pub value: f64,
    pub method: KernelMethod,
}

fn check_pair(mu: f64, x: &Point, y: &Point) -> Result<()> {
    if !(mu >= 0.0) {
        return Err(invalid(format!("mu must be nonnegative, got {mu}")));
    }
    if x.dim() != y.dim() {
        return Err(invalid("points have different dimensions"));
    }
    Ok(())
}

/// `sum_j coef[j] * P_j(w_mu; x, y)` through the Gegenbauer integral
/// representation; `coef[j]` multiplies the degree-`j` reproducing kernel.
fn kernel_series(coef: &[f64], mu: f64, x: &Point, y: &Point) -> Result<f64> {
    check_pair(mu, x, y)?;
    let d = x.dim();
    let lambda = mu + (d as f64 - 1.0) / 2.0;
    let nmax = coef.len().saturating_sub(1);
    let scaled: Vec<f64> = coef
        .iter()
        .enumerate()
        .map(|(j, c)| c * (lambda + j as f64) / lambda)
        .collect();
    let series = |t: f64| -> f64 {
        gegenbauer_all(nmax, lambda, t)
            .iter()
            .zip(&scaled)
            .map(|(c, s)| c * s)
            .sum()
    };
    let a = x.dot(y);
    let b = x.height() * y.height();
    if mu == 0.0 {
        return Ok(b_d(0.0, d) * 0.5 * (series(a + b) + series(a - b)));
    }
    let rule = gauss_jacobi_1d(nodes_for(nmax).max(1), mu - 1.0, mu - 1.0)?;
    let integral: f64 = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(u, w)| w * series(a + u * b))
        .sum();
    Ok(b_d(mu, d) * b_1(mu) * integral)
}

/// `P_n(w_mu; x, y)`, the reproducing kernel of the degree-`n` orthogonal space.
pub fn reproducing_kernel(n: usize, mu: f64, x: &Point, y: &Point) -> Result<f64> {
    let mut coef = vec![0.0; n + 1];
    coef[n] = 1.0;
    kernel_series(&coef, mu, x, y)
}

/// `P_n(w; x, y)` as the sum over the degree-`n` block of an orthonormal basis.
pub fn reproducing_kernel_basis(basis: &OrthoBasis, n: usize, x: &Point, y: &Point) -> Result<f64> {
    if n > basis.degree() {
        return Err(invalid(format!(
            "basis of degree {} has no block {n}",
            basis.degree()
        )));
    }
    let v = basis.eval_batch(&[*x, *y])?;
    Ok(basis.block_range(n).map(|j| v[(0, j)] * v[(1, j)]).sum())
}

pub fn reproducing_kernel_eval(
    n: usize,
    mu: f64,
    x: &Point,
    y: &Point,
    method: KernelMethod,
) -> Result<KernelEval> {
    let value = match method {
        KernelMethod::GegenbauerIntegral => reproducing_kernel(n, mu, x, y)?,
        KernelMethod::BasisSum => {
            let basis = OrthoBasis::new(n, &Weight::jacobi(mu)?, x.dim())?;
            reproducing_kernel_basis(&basis, n, x, y)?
        }
    };
    Ok(KernelEval {
        n,
        mu,
        value,
        method,
    })
}

fn eta_coefficients(n: usize) -> Vec<f64> {
    (0..2 * n)
        .map(|j| cutoff_eta(j as f64 / n as f64))
        .collect()
}

/// `L_n(w_mu; x, y) = sum_{j < 2n} eta(j/n) P_j(w_mu; x, y)`.
pub fn ln_kernel(n: usize, mu: f64, x: &Point, y: &Point) -> Result<f64> {
    if n == 0 {
        return Err(invalid("L_n needs n >= 1"));
    }
    kernel_series(&eta_coefficients(n), mu, x, y)
}

/// `d/dx_i L_n(w_mu; x, y)` by differentiating the Gegenbauer integrand; only
/// defined for `|x| < 1` because of the `sqrt(1 - |x|^2)` inside the argument.
pub fn ln_partial_gegenbauer(n: usize, mu: f64, axis: usize, x: &Point, y: &Point) -> Result<f64> {
    check_pair(mu, x, y)?;
    if axis >= x.dim() {
        return Err(invalid(format!("axis {axis} out of range")));
    }
    let hx = x.height();
    if !(hx > 0.0) {
        return Err(Error::BoundarySingularity { norm: x.norm(), mu });
    }
    let d = x.dim();
    let lambda = mu + (d as f64 - 1.0) / 2.0;
    let coef = eta_coefficients(n);
    let nmax = coef.len() - 1;
    // d/dt C_j^lambda = 2 lambda C_{j-1}^{lambda+1}
    let scaled: Vec<f64> = coef
        .iter()
        .enumerate()
        .map(|(j, c)| c * (lambda + j as f64) / lambda)
        .collect();
    let dseries = |t: f64| -> f64 {
        let c = gegenbauer_all(nmax.saturating_sub(1), lambda + 1.0, t);
        (1..=nmax)
            .map(|j| scaled[j] * 2.0 * lambda * c[j - 1])
            .sum()
    };
    let a = x.dot(y);
    let b = hx * y.height();
    let yi = y.coords()[axis];
    let xi = x.coords()[axis];
    // d/dx_i of (a + u b) is y_i - u h_y x_i / h_x
    let db = -y.height() * xi / hx;
    if mu == 0.0 {
        return Ok(b_d(0.0, d) * 0.5 * (dseries(a + b) * (yi + db) + dseries(a - b) * (yi - db)));
    }
    let rule = gauss_jacobi_1d(nodes_for(nmax).max(1), mu - 1.0, mu - 1.0)?;
    let integral: f64 = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(u, w)| w * dseries(a + u * b) * (yi + u * db))
        .sum();
    Ok(b_d(mu, d) * b_1(mu) * integral)
}

/// Residuals of the reproducing identity `P(x) = int P(y) L_n(x, y) w(y) dy`
/// (Gegenbauer route) and of the derivative identity with `d/dx_i L_n`
/// (basis-sum route), normalized by `||P||_inf` and `max_i ||d_i P||_inf`
/// over the probe points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityResiduals {
    pub reproducing: f64,
    pub derivative: f64,
}

pub fn identity_residuals(
    ln: &LnKernel,
    polys: &[crate::polyspace::Poly],
    xs: &[Point],
    probes: &[Point],
) -> Result<Vec<IdentityResiduals>> {
    let n = ln.n();
    let mu = ln.mu();
    let dim = ln.dim();
    let rule = QuadratureRule::for_weight(ln.basis().weight(), dim, 3 * n + 2)?;
    let kmat: Vec<Vec<f64>> = xs
        .par_iter()
        .map(|x| {
            rule.nodes
                .iter()
                .map(|y| ln_kernel(n, mu, x, y))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let dmats: Vec<DMatrix<f64>> = (0..dim)
        .map(|axis| ln.partial_matrix(axis, xs, &rule.nodes))
        .collect::<Result<_>>()?;
    polys
        .iter()
        .map(|poly| {
            if poly.dim() != dim {
                return Err(invalid("polynomial and kernel dimensions differ"));
            }
            let derivs: Vec<crate::polyspace::Poly> = (0..dim)
                .map(|i| poly.differentiate(i))
                .collect::<Result<_>>()?;
            let pv: Vec<f64> = rule
                .nodes
                .iter()
                .map(|y| poly.eval(y.coords()))
                .collect::<Result<_>>()?;
            let mut sup: f64 = 0.0;
            let mut dsup: f64 = 0.0;
            for z in probes.iter().chain(xs) {
                sup = sup.max(poly.eval(z.coords())?.abs());
                for dp in &derivs {
                    dsup = dsup.max(dp.eval(z.coords())?.abs());
                }
            }
            let mut rep: f64 = 0.0;
            let mut der: f64 = 0.0;
            for (a, x) in xs.iter().enumerate() {
                let r: f64 = (0..rule.len())
                    .map(|q| rule.weights[q] * pv[q] * kmat[a][q])
                    .sum();
                rep = rep.max((r - poly.eval(x.coords())?).abs());
                for (axis, dp) in derivs.iter().enumerate() {
                    let v: f64 = (0..rule.len())
                        .map(|q| rule.weights[q] * pv[q] * dmats[axis][(a, q)])
                        .sum();
                    der = der.max((v - dp.eval(x.coords())?).abs());
                }
            }
            Ok(IdentityResiduals {
                reproducing: rep / sup.max(f64::MIN_POSITIVE),
                derivative: if dsup > 0.0 { der / dsup } else { der },
            })
        })
        .collect()
}

/// `L_n(w_mu; ., .)` in the basis-sum form
/// `sum_j eta(deg P_j / n) P_j(x) P_j(y)`, which is a polynomial in `x` and can
/// be differentiated exactly, including on the boundary.
pub struct LnKernel {
    n: usize,
    mu: f64,
    basis: OrthoBasis,
    eta: DVector<f64>,
    workspace: OnceLock<Workspace>,
}

struct Workspace {
    rule: QuadratureRule,
    values: DMatrix<f64>,
    grads: Vec<DMatrix<f64>>,
}

impl LnKernel {
    pub fn new(n: usize, mu: f64, dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("L_n needs n >= 1"));
        }
        let basis = OrthoBasis::new(2 * n - 1, &Weight::jacobi(mu)?, dim)?;
        let eta = DVector::from_fn(basis.len(), |j, _| {
            cutoff_eta(basis.element_degree(j) as f64 / n as f64)
        });
        Ok(Self {
            n,
            mu,
            basis,
            eta,
            workspace: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn basis(&self) -> &OrthoBasis {
        &self.basis
    }

    pub fn value(&self, x: &Point, y: &Point) -> Result<f64> {
        let v = self.basis.eval_batch(&[*x, *y])?;
        Ok((0..self.basis.len())
            .map(|j| self.eta[j] * v[(0, j)] * v[(1, j)])
            .sum())
    }

    /// `d/dx_i L_n(x, y)`.
    pub fn partial(&self, axis: usize, x: &Point, y: &Point) -> Result<f64> {
        Ok(self.partial_matrix(axis, std::slice::from_ref(x), std::slice::from_ref(y))?[(0, 0)])
    }

    /// `d/dx_i L_n(xs[a], ys[b])` for all pairs.
    pub fn partial_matrix(&self, axis: usize, xs: &[Point], ys: &[Point]) -> Result<DMatrix<f64>> {
        if axis >= self.dim() {
            return Err(invalid(format!("axis {axis} out of range")));
        }
        let (_, g) = self.basis.eval_with_grad(xs)?;
        let vy = self.basis.eval_batch(ys)?;
        let gy = scale_columns(&g[axis], &self.eta);
        Ok(gy * vy.transpose())
    }

    /// `L_n(xs[a], ys[b])` for all pairs.
    pub fn value_matrix(&self, xs: &[Point], ys: &[Point]) -> Result<DMatrix<f64>> {
        let vx = self.basis.eval_batch(xs)?;
        let vy = self.basis.eval_batch(ys)?;
        Ok(scale_columns(&vx, &self.eta) * vy.transpose())
    }

    fn workspace(&self) -> Result<&Workspace> {
        if let Some(ws) = self.workspace.get() {
            return Ok(ws);
        }
        let degree = oversampled_degree(2 * self.n - 1, 1.0);
        let rule = QuadratureRule::for_weight(self.basis.weight(), self.dim(), degree)?;
        let (values, grads) = self.basis.eval_with_grad(&rule.nodes)?;
        let _ = self.workspace.set(Workspace {
            rule,
            values,
            grads,
        });
        Ok(self.workspace.get().expect("just set"))
    }

    /// `int |d/dx_i L_n(x, y)| w_mu(x) dx`.
    pub fn partial_l1(&self, axis: usize, y: &Point) -> Result<f64> {
        if axis >= self.dim() {
            return Err(invalid(format!("axis {axis} out of range")));
        }
        let ws = self.workspace()?;
        let py = self.basis.eval(y)?.component_mul(&self.eta);
        let f = &ws.grads[axis] * py;
        Ok(f.iter()
            .zip(&ws.rule.weights)
            .map(|(v, w)| w * v.abs())
            .sum())
    }

    /// `int |d/dx_i L_n(x, y)| w_mu(y) dy` (the other argument order).
    pub fn partial_l1_dual(&self, axis: usize, x: &Point) -> Result<f64> {
        if axis >= self.dim() {
            return Err(invalid(format!("axis {axis} out of range")));
        }
        let ws = self.workspace()?;
        let (_, g) = self.basis.eval_with_grad(std::slice::from_ref(x))?;
        let gx = DVector::from_fn(self.basis.len(), |j, _| g[axis][(0, j)] * self.eta[j]);
        let f = &ws.values * gx;
        Ok(f.iter()
            .zip(&ws.rule.weights)
            .map(|(v, w)| w * v.abs())
            .sum())
    }
}

fn scale_columns(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= s[j];
    }
    out
}

/// `d/dx_i L_n(w_mu; x, y)` through the basis-sum form.
pub fn ln_partial(n: usize, mu: f64, axis: usize, x: &Point, y: &Point) -> Result<f64> {
    check_pair(mu, x, y)?;
    LnKernel::new(n, mu, x.dim())?.partial(axis, x, y)
}

/// `int |d/dx_i L_n(w_mu; x, y)| w_mu(x) dx` on an oversampled rule.
pub fn ln_partial_l1(n: usize, mu: f64, axis: usize, y: &Point) -> Result<f64> {
    LnKernel::new(n, mu, y.dim())?.partial_l1(axis, y)
}

/// `W_mu(n; x) = (sqrt(1 - |x|^2) + 1/n)^{2 mu}`.
pub fn boundary_factor(mu: f64, n: usize, x: &Point) -> f64 {
    cal_w(mu, n, x)
}

/// `|d_i L_n(x, y)| sqrt(W(x)) sqrt(W(y)) (1 + n d(x, y))^k /
/// (min(1/sqrt(1 - |x|^2), n) n^{d + 1})`; bounded in `n, x, y` for each `k`.
pub fn partial_bound_ratio(partial: f64, n: usize, mu: f64, k: f64, x: &Point, y: &Point) -> f64 {
    let nf = n as f64;
    let d = x.dim() as f64;
    let h = x.height();
    let m = if h > 0.0 { (1.0 / h).min(nf) } else { nf };
    partial.abs()
        * boundary_factor(mu, n, x).sqrt()
        * boundary_factor(mu, n, y).sqrt()
        * (1.0 + nf * geometry::dist_unchecked(x, y)).powf(k)
        / (m * nf.powf(d + 1.0))
}

/// `|L_n(y, u) - L_n(z, u)| sqrt(W(u)) sqrt(W(y)) (1 + n d(u, y))^k /
/// (n^{d + 1} d(y, z))`, bounded for `z` near `y`.
pub fn lipschitz_ratio(ln: &LnKernel, k: f64, y: &Point, z: &Point, u: &Point) -> Result<f64> {
    let n = ln.n();
    let nf = n as f64;
    let d = y.dim() as f64;
    let vals = ln.value_matrix(&[*y, *z], std::slice::from_ref(u))?;
    let dyz = geometry::dist(y, z)?;
    if dyz == 0.0 {
        return Err(invalid("Lipschitz ratio needs distinct points"));
    }
    Ok((vals[(0, 0)] - vals[(1, 0)]).abs()
        * boundary_factor(ln.mu(), n, u).sqrt()
        * boundary_factor(ln.mu(), n, y).sqrt()
        * (1.0 + nf * geometry::dist(u, y)?).powf(k)
        / (nf.powf(d + 1.0) * dyz))
}

/// `T_n(cos theta) = gamma_n (sin((n_1 + 1/2) theta) / sin(theta / 2))^{2m}` with
/// `n_1 = floor(n / 2m)`, normalized by `int_0^pi T_n(cos theta) sin^{d-1} theta dtheta = 1`
/// for the sphere `S^d` over the ball `B^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FejerKernel {
    pub n: usize,
    pub m: usize,
    pub n1: usize,
    pub dim: usize,
    pub gamma: f64,
}

impl FejerKernel {
    pub fn new(n: usize, m: usize, dim: usize) -> Result<Self> {
        if m == 0 || n < 2 * m {
            return Err(invalid(format!(
                "Fejer kernel needs n >= 2m, got n = {n}, m = {m}"
            )));
        }
        if !(2..=3).contains(&dim) {
            return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
        }
        let n1 = n / (2 * m);
        let mut k = Self {
            n,
            m,
            n1,
            dim,
            gamma: 1.0,
        };
        // polynomial of degree 2 m n1 in t = cos theta
        let a = (dim as f64 - 2.0) / 2.0;
        let rule = gauss_jacobi_1d(nodes_for(2 * m * n1), a, a)?;
        let total = rule.integrate(|t| k.eval_t(t));
        k.gamma = 1.0 / total;
        Ok(k)
    }

    /// `T_n(t)` for `t = cos theta`, via the Dirichlet sum `1 + 2 sum_j T_j(t)`.
    pub fn eval_t(&self, t: f64) -> f64 {
        let t = t.clamp(-1.0, 1.0);
        let (mut prev, mut cur) = (1.0, t);
        let mut sum = 1.0;
        for _ in 0..self.n1 {
            sum += 2.0 * cur;
            let next = 2.0 * t * cur - prev;
            prev = cur;
            cur = next;
        }
        self.gamma * sum.powi(2 * self.m as i32)
    }

    pub fn eval(&self, theta: f64) -> f64 {
        self.eval_t(theta.cos())
    }

    /// Value at `theta = 0`: `gamma_n (2 n_1 + 1)^{2m}`.
    pub fn peak(&self) -> f64 {
        self.gamma * ((2 * self.n1 + 1) as f64).powi(2 * self.m as i32)
    }
}

/// `T_n(cos theta)` for the sphere over `B^dim`.
pub fn fejer_tn(n: usize, m: usize, theta: f64, dim: usize) -> Result<f64> {
    Ok(FejerKernel::new(n, m, dim)?.eval(theta))
}

/// `T(f)(x_bar) = f(x)` for `x_bar = (x, x_{d+1})` on the sphere.
pub fn lift_to_sphere<F>(f: F) -> impl Fn(&[f64]) -> Result<f64>
where
    F: Fn(&Point) -> f64,
{
    move |xbar: &[f64]| {
        if xbar.len() < 3 {
            return Err(invalid("lifted point needs at least 3 coordinates"));
        }
        let x = Point::new(&xbar[..xbar.len() - 1])?;
        Ok(f(&x))
    }
}

/// Inverse of `lift_to_sphere`: checks evenness under `x_{d+1} -> -x_{d+1}` on
/// the upper hemisphere grid and returns `x -> g(x, sqrt(1 - |x|^2))`.
pub fn restrict_to_ball<G>(g: G, dim: usize) -> Result<impl Fn(&Point) -> f64>
where
    G: Fn(&[f64]) -> f64,
{
    for x in geometry::hemisphere_grid(dim, 2000)? {
        let mut up = x.lift();
        let a = g(&up);
        up[dim] = -up[dim];
        let b = g(&up);
        if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
            return Err(invalid(format!(
                "function is not even in the last coordinate at {:?}",
                x.coords()
            )));
        }
    }
    Ok(move |x: &Point| g(&x.lift()))
}

/// Options for needle construction.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeedleOptions {
    /// Power `m` of the Fejer kernel; the default is `floor(k/p) + d + 2` when
    /// that leaves `n_1 >= 1`, and otherwise the smallest `m` with
    /// `2m > k/p + d`.
    pub m_override: Option<usize>,
    /// Multiplies the cubature resolution.
    pub refinement: Option<usize>,
}

/// Nonnegative polynomial `h` of degree `<= n` with `h^p` comparable to the
/// profile `f(y) = (1 + n d(center, y))^{-k}`.
#[derive(Debug, Clone)]
pub struct NeedleResult {
    pub center: Point,
    pub n: usize,
    pub p: f64,
    pub k: f64,
    pub kernel: FejerKernel,
    /// `min h^p / f` over the verification grid and the center.
    pub c_lo: f64,
    /// `max h^p / f` over the verification grid and the center.
    pub c_hi: f64,
    /// Smallest value of `h` on the grid.
    pub min_value: f64,
    pub grid_size: usize,
    /// Largest relative change of `h` when the cubature is refined.
    pub resolution_change: f64,
    nodes: Vec<[f64; 4]>,
    weights: Vec<f64>,
}

impl NeedleResult {
    /// `h(x) = int_{S^d} f(y_bar)^{1/p} T_n(x_bar . y_bar) dsigma(y_bar)`.
    pub fn eval(&self, x: &Point) -> f64 {
        eval_needle(&self.kernel, &self.nodes, &self.weights, x)
    }

    pub fn profile(&self, x: &Point) -> f64 {
        (1.0 + self.n as f64 * geometry::dist_unchecked(&self.center, x)).powf(-self.k)
    }

    /// `max(c_hi, 1 / c_lo)`: both `h^p / f` and `f / h^p` stay below it.
    pub fn window(&self) -> f64 {
        self.c_hi.max(1.0 / self.c_lo)
    }

    pub fn m(&self) -> usize {
        self.kernel.m
    }
}

fn eval_needle(kernel: &FejerKernel, nodes: &[[f64; 4]], weights: &[f64], x: &Point) -> f64 {
    let d = x.dim();
    let xb = x.lift_array();
    let mut acc = 0.0;
    for (y, w) in nodes.iter().zip(weights) {
        let mut dot = 0.0;
        for j in 0..d {
            dot += xb[j] * y[j];
        }
        let up = xb[d] * y[d];
        // the integrand over the lower hemisphere is folded onto the upper one
        acc += w * (kernel.eval_t(dot + up) + kernel.eval_t(dot - up));
    }
    acc
}

fn default_needle_m(p: f64, k: f64, d: usize) -> usize {
    // smallest m with 2m >= k/p + d; keeps n / m large enough for n = 8
    (((k / p + d as f64) / 2.0).ceil() as usize).max(1)
}

fn needle_cubature(
    center: &Point,
    n: usize,
    p: f64,
    k: f64,
    refinement: usize,
) -> Result<(Vec<[f64; 4]>, Vec<f64>)> {
    let d = center.dim();
    let r = refinement.max(1);
    let opts = CapOptions {
        directions: r * (2 * n + 16),
        theta_nodes: r * (n / 2 + 12),
        scale: 0.25 / n as f64,
    };
    let cap = cap_rule(center, PI, opts)?;
    let area = if d == 2 { 4.0 * PI } else { 2.0 * PI * PI };
    let mut nodes = Vec::with_capacity(cap.points.len());
    let mut weights = Vec::with_capacity(cap.points.len());
    for q in 0..cap.points.len() {
        let f = (1.0 + n as f64 * cap.theta[q]).powf(-k / p);
        let mut y = [0.0; 4];
        y[..d].copy_from_slice(cap.points[q].coords());
        y[d] = cap.heights[q];
        nodes.push(y);
        weights.push(cap.sphere_weights[q] / area * f);
    }
    Ok((nodes, weights))
}

/// Builds the needle polynomial for the profile `(1 + n d(center, .))^{-k}`
/// and measures its comparability constants on `grid`.
pub fn needle_polynomial_on(
    center: &Point,
    n: usize,
    p: f64,
    k: f64,
    opts: NeedleOptions,
    grid: &[Point],
) -> Result<NeedleResult> {
    if !(p >= 1.0) || !(k > 0.0) || n == 0 {
        return Err(invalid(format!(
            "needle needs n >= 1, p >= 1 and k > 0 (n = {n}, p = {p}, k = {k})"
        )));
    }
    if grid.is_empty() {
        return Err(invalid("needle verification grid is empty"));
    }
    let d = center.dim();
    let m = opts.m_override.unwrap_or_else(|| default_needle_m(p, k, d));
    let kernel = FejerKernel::new(n, m, d)?;
    let refinement = opts.refinement.unwrap_or(1);
    let (nodes, weights) = needle_cubature(center, n, p, k, refinement)?;
    let values: Vec<f64> = grid
        .par_iter()
        .map(|x| eval_needle(&kernel, &nodes, &weights, x))
        .collect();
    // refine the cubature on a subsample of the grid
    let (fine_nodes, fine_weights) = needle_cubature(center, n, p, k, 2 * refinement)?;
    let stride = (grid.len() / 200).max(1);
    let mut change: f64 = 0.0;
    for (x, v) in grid.iter().zip(&values).step_by(stride) {
        let fine = eval_needle(&kernel, &fine_nodes, &fine_weights, x);
        change = change.max((fine - v).abs() / fine.abs().max(f64::MIN_POSITIVE));
    }
    if change > 1e-4 {
        return Err(Error::Resolution(format!(
            "needle values move by {change:.2e} when the cubature is refined"
        )));
    }
    let mut c_lo = f64::INFINITY;
    let mut c_hi: f64 = 0.0;
    let mut min_value = f64::INFINITY;
    let at_center = eval_needle(&kernel, &nodes, &weights, center);
    for (x, h) in grid
        .iter()
        .chain(std::iter::once(center))
        .zip(values.iter().chain(std::iter::once(&at_center)))
    {
        min_value = min_value.min(*h);
        let f = (1.0 + n as f64 * geometry::dist_unchecked(center, x)).powf(-k);
        let ratio = h.max(0.0).powf(p) / f;
        c_lo = c_lo.min(ratio);
        c_hi = c_hi.max(ratio);
    }
    Ok(NeedleResult {
        center: *center,
        n,
        p,
        k,
        kernel,
        c_lo,
        c_hi,
        min_value,
        grid_size: grid.len(),
        resolution_change: change,
        nodes,
        weights,
    })
}

/// `needle_polynomial_on` with the default verification grid.
pub fn needle_polynomial(
    center: &Point,
    n: usize,
    p: f64,
    k: f64,
    m_override: Option<usize>,
) -> Result<NeedleResult> {
    let grid = geometry::verification_grid(center.dim())?;
    needle_polynomial_on(
        center,
        n,
        p,
        k,
        NeedleOptions {
            m_override,
            refinement: None,
        },
        &grid,
    )
}

/// `f*_{beta,n}(x) = max_{y in grid} |f(y)| (1 + n d(x, y))^{-beta}`.
pub fn maximal_function(
    f: impl Fn(&Point) -> f64,
    beta: f64,
    n: usize,
    x: &Point,
    grid: &[Point],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(invalid("maximal function needs a nonempty probe grid"));
    }
    if !(beta > 0.0) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    let nf = n as f64;
    Ok(grid
        .iter()
        .map(|y| f(y).abs() * (1.0 + nf * geometry::dist_unchecked(x, y)).powf(-beta))
        .fold(0.0, f64::max))
}

/// `J_p` together with the normalized ratio `J_p n^d W_mu(n; x)^{p/2 - 1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JpResult {
    pub value: f64,
    pub ratio: f64,
}

/// `J_p = int w_mu(y) / (W_mu(n; y)^{p/2} (1 + n d(x, y))^{sigma p}) dy`.
pub fn jp_integral(n: usize, mu: f64, p: f64, sigma: f64, x: &Point) -> Result<JpResult> {
    jp_integral_with_budget(n, mu, p, sigma, x, 1)
}

pub fn jp_integral_with_budget(
    n: usize,
    mu: f64,
    p: f64,
    sigma: f64,
    x: &Point,
    refinement: usize,
) -> Result<JpResult> {
    if n == 0 || !(p > 0.0) || !(mu >= 0.0) {
        return Err(invalid(format!(
            "J_p needs n >= 1, p > 0, mu >= 0 (n = {n}, p = {p}, mu = {mu})"
        )));
    }
    let d = x.dim() as f64;
    let needed = d / p + 2.0 * mu * (1.0 / p - 0.5).abs();
    if !(sigma > needed) {
        return Err(invalid(format!("J_p needs sigma > {needed}, got {sigma}")));
    }
    let w = Weight::jacobi(mu)?;
    let r = refinement.max(1);
    let opts = CapOptions {
        directions: r * 256,
        theta_nodes: r * 24,
        scale: 0.25 / n as f64,
    };
    let cap = cap_rule(x, PI, opts)?;
    let nf = n as f64;
    let mut value = 0.0;
    for q in 0..cap.points.len() {
        let y = &cap.points[q];
        let h = cap.heights[q];
        // w(y) dy = w(y) h dS = h^{2 mu} dS
        let wy = w.eval_times_height(y, h);
        value += cap.sphere_weights[q] * wy
            / (boundary_factor(mu, n, y).powf(p / 2.0) * (1.0 + nf * cap.theta[q]).powf(sigma * p));
    }
    let ratio = value * nf.powf(d) * boundary_factor(mu, n, x).powf(p / 2.0 - 1.0);
    Ok(JpResult { value, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyspace::{multi_indices, Poly};
    use rand::Rng;

    fn p(c: &[f64]) -> Point {
        Point::new(c).unwrap()
    }

    fn random_points(n: usize, seed: u64, dim: usize) -> Vec<Point> {
        let mut rng = crate::rng::stream(seed, 0);
        (0..n)
            .map(|_| loop {
                let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if c.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break Point::new(&c).unwrap();
                }
            })
            .collect()
    }

    #[test]
    fn gegenbauer_examples() {
        let l = 1.3;
        for &t in &[-1.0, -0.3, 0.0, 0.6, 1.0] {
            assert_eq!(gegenbauer(0, l, t).unwrap(), 1.0);
            assert!((gegenbauer(1, l, t).unwrap() - 2.0 * l * t).abs() < 1e-15);
            let c2 = 2.0 * l * (l + 1.0) * t * t - l;
            assert!((gegenbauer(2, l, t).unwrap() - c2).abs() < 1e-14);
        }
        assert!(gegenbauer(3, 0.0, 0.5).is_err());
        for n in 0..12 {
            let a = gegenbauer(n, 0.8, 0.37).unwrap();
            let b = gegenbauer(n, 0.8, -0.37).unwrap();
            assert!((a - if n % 2 == 0 { b } else { -b }).abs() < 1e-13);
        }
        // C_n^lambda(1) = (2 lambda)_n / n!
        let mut poch = 1.0;
        for n in 0..10 {
            assert!((gegenbauer(n, 0.8, 1.0).unwrap() - poch).abs() < 1e-12 * poch);
            poch *= (1.6 + n as f64) / (n as f64 + 1.0);
        }
    }

    #[test]
    fn normalizing_constants() {
        assert!((b_d(0.5, 2) - 1.0 / PI).abs() < 1e-15);
        for &mu in &[0.0, 0.5, 1.0, 2.5] {
            let mass = crate::polyspace::jacobi_moment(&[0, 0, 0], mu, 3);
            assert!((b_d(mu, 3) * mass - 1.0).abs() < 1e-13);
        }
        // int (1 - u^2)^0 = 2 at mu = 1
        assert!((b_1(1.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn eta_examples() {
        assert_eq!(cutoff_eta(0.5), 1.0);
        assert_eq!(cutoff_eta(3.0), 0.0);
        assert!((cutoff_eta(1.5) - 0.5).abs() < 1e-15);
        let mut prev = 1.0;
        for i in 0..=300 {
            let v = cutoff_eta(i as f64 / 100.0);
            assert!((0.0..=1.0).contains(&v) && v <= prev);
            prev = v;
        }
    }

    #[test]
    fn kernel_constant_term() {
        for &mu in &[0.0, 0.5, 1.0] {
            let v = reproducing_kernel(0, mu, &p(&[0.3, 0.1]), &p(&[-0.8, 0.5])).unwrap();
            assert!((v - b_d(mu, 2)).abs() < 1e-14);
        }
        assert!(reproducing_kernel(2, -0.5, &p(&[0.0, 0.0]), &p(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn kernel_matches_basis_blocks() {
        let pts = random_points(8, 3, 2);
        for &mu in &[0.0, 0.5, 1.0] {
            let basis = OrthoBasis::new(10, &Weight::jacobi(mu).unwrap(), 2).unwrap();
            for n in [1usize, 4, 10] {
                for pair in pts.chunks(2) {
                    let a = reproducing_kernel(n, mu, &pair[0], &pair[1]).unwrap();
                    let b = reproducing_kernel_basis(&basis, n, &pair[0], &pair[1]).unwrap();
                    let c = reproducing_kernel(n, mu, &pair[1], &pair[0]).unwrap();
                    assert!((a - c).abs() < 1e-10);
                    assert!((a - b).abs() < 1e-7 * a.abs().max(1.0), "{mu} {n}: {a} {b}");
                }
            }
        }
        let basis = OrthoBasis::new(5, &Weight::jacobi(1.0).unwrap(), 3).unwrap();
        let pts = random_points(4, 5, 3);
        let a = reproducing_kernel(5, 1.0, &pts[0], &pts[1]).unwrap();
        let b = reproducing_kernel_basis(&basis, 5, &pts[0], &pts[1]).unwrap();
        assert!((a - b).abs() < 1e-7 * a.abs().max(1.0));
    }

    #[test]
    fn ln_kernel_routes_agree_and_are_symmetric() {
        let pts = random_points(6, 9, 2);
        for &mu in &[0.0, 1.0] {
            let ln = LnKernel::new(5, mu, 2).unwrap();
            for a in &pts {
                for b in &pts {
                    let g = ln_kernel(5, mu, a, b).unwrap();
                    let s = ln.value(a, b).unwrap();
                    assert!((g - s).abs() < 1e-7 * g.abs().max(1.0));
                    assert!((g - ln_kernel(5, mu, b, a).unwrap()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ln_kernel_integrates_to_one() {
        let rule = QuadratureRule::for_weight(&Weight::jacobi(0.5).unwrap(), 2, 12).unwrap();
        for x in random_points(3, 4, 2) {
            let total = rule.integrate(|y| ln_kernel(4, 0.5, &x, y).unwrap());
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    fn random_poly(deg: usize, seed: u64) -> Poly {
        let mut rng = crate::rng::stream(seed, 1);
        Poly::from_terms(
            2,
            multi_indices(deg, 2)
                .into_iter()
                .map(|a| (a, rng.random_range(-1.0..1.0))),
        )
        .unwrap()
    }

    #[test]
    fn reproducing_and_derivative_identities() {
        let n = 5;
        for &mu in &[0.0, 0.5] {
            let w = Weight::jacobi(mu).unwrap();
            let rule = QuadratureRule::for_weight(&w, 2, 3 * n + 2).unwrap();
            let ln = LnKernel::new(n, mu, 2).unwrap();
            let xs = vec![p(&[0.1, 0.2]), p(&[0.7, -0.7]), p(&[0.0, 1.0])];
            let dmat = ln.partial_matrix(0, &xs, &rule.nodes).unwrap();
            for seed in 0..3 {
                let poly = random_poly(n, seed);
                let dp = poly.differentiate(0).unwrap();
                let pv: Vec<f64> = rule
                    .nodes
                    .iter()
                    .map(|y| poly.eval(y.coords()).unwrap())
                    .collect();
                for (a, x) in xs.iter().enumerate() {
                    let rep: f64 = rule
                        .nodes
                        .iter()
                        .zip(&rule.weights)
                        .zip(&pv)
                        .map(|((y, w), v)| w * v * ln_kernel(n, mu, x, y).unwrap())
                        .sum();
                    assert!((rep - poly.eval(x.coords()).unwrap()).abs() < 1e-9);
                    let der: f64 = (0..rule.len())
                        .map(|q| rule.weights[q] * pv[q] * dmat[(a, q)])
                        .sum();
                    assert!((der - dp.eval(x.coords()).unwrap()).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn identity_residuals_detect_degree() {
        let ln = LnKernel::new(4, 1.0, 2).unwrap();
        let xs = random_points(6, 11, 2);
        let probes = random_points(50, 12, 2);
        let polys = vec![random_poly(4, 7), random_poly(4, 8)];
        for r in identity_residuals(&ln, &polys, &xs, &probes).unwrap() {
            assert!(r.reproducing < 1e-10 && r.derivative < 1e-9, "{r:?}");
        }
        // degree 2n + 1 lies outside the space reproduced exactly
        let high = Poly::monomial(vec![9, 0], 1.0);
        let r = identity_residuals(&ln, &[high], &xs, &probes).unwrap();
        assert!(r[0].reproducing > 1e-6);
    }

    #[test]
    fn partial_routes_and_finite_differences_agree() {
        let ln = LnKernel::new(4, 1.0, 2).unwrap();
        let x = p(&[0.3, -0.2]);
        let y = p(&[0.5, 0.4]);
        for axis in 0..2 {
            let basis = ln.partial(axis, &x, &y).unwrap();
            let gg = ln_partial_gegenbauer(4, 1.0, axis, &x, &y).unwrap();
            let h = 1e-5;
            let mut c = x.coords().to_vec();
            c[axis] += h;
            let up = ln_kernel(4, 1.0, &p(&c), &y).unwrap();
            c[axis] -= 2.0 * h;
            let dn = ln_kernel(4, 1.0, &p(&c), &y).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((basis - gg).abs() < 1e-8 * gg.abs().max(1.0));
            assert!((basis - fd).abs() < 1e-5 * fd.abs().max(1.0));
        }
        // even in x_1 when both points sit on the x_2 axis
        let v = ln.partial(0, &p(&[0.0, 0.6]), &p(&[0.0, 0.6])).unwrap();
        assert!(v.abs() < 1e-8);
        assert!(ln_partial_gegenbauer(4, 1.0, 0, &p(&[1.0, 0.0]), &y).is_err());
    }

    #[test]
    fn partial_l1_is_finite_and_orders_agree() {
        let ln = LnKernel::new(1, 0.5, 2).unwrap();
        let v = ln.partial_l1(0, &p(&[0.2, 0.3])).unwrap();
        assert!(v.is_finite() && v > 0.0);
        let ln = LnKernel::new(6, 1.0, 2).unwrap();
        let y = p(&[0.4, 0.5]);
        let a = ln.partial_l1(0, &y).unwrap();
        let b = ln.partial_l1_dual(0, &y).unwrap();
        assert!(a / b > 1.0 / 20.0 && a / b < 20.0, "{a} {b}");
    }

    #[test]
    fn fejer_kernel_normalization() {
        for &(n, m, d) in &[(8usize, 2usize, 2usize), (20, 3, 2), (16, 2, 3)] {
            let k = FejerKernel::new(n, m, d).unwrap();
            let gl = crate::quadrature::gauss_legendre(400).unwrap();
            let total: f64 = gl
                .mapped(0.0, PI)
                .map(|(t, w)| w * k.eval(t) * t.sin().powi(d as i32 - 1))
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "{total}");
            assert!((k.eval(0.0) - k.peak()).abs() < 1e-12 * k.peak());
            for i in 0..=200 {
                assert!(k.eval(PI * i as f64 / 200.0) >= 0.0);
            }
        }
        assert!(FejerKernel::new(5, 3, 2).is_err());
        assert!(fejer_tn(12, 2, 0.3, 2).unwrap() > 0.0);
    }

    #[test]
    fn lifting_round_trip() {
        let f = |x: &Point| 1.0 + x.coords()[0] * x.coords()[1];
        let lifted = lift_to_sphere(f);
        let back = restrict_to_ball(|xb: &[f64]| lifted(xb).unwrap(), 2).unwrap();
        for x in random_points(20, 1, 2) {
            assert!((back(&x) - f(&x)).abs() < 1e-15);
            let mut xb = x.lift();
            let a = lifted(&xb).unwrap();
            xb[2] = -xb[2];
            assert_eq!(a, lifted(&xb).unwrap());
        }
        assert!(restrict_to_ball(|xb: &[f64]| xb[2], 2).is_err());
        let one = lift_to_sphere(|_| 1.0);
        assert_eq!(one(&[0.0, 0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn needle_on_coarse_grid() {
        let grid = geometry::hemisphere_grid(2, 1500).unwrap();
        let c = p(&[0.3, 0.4]);
        let r = needle_polynomial_on(&c, 8, 1.0, 3.0, NeedleOptions::default(), &grid).unwrap();
        assert!(r.min_value >= -1e-9);
        assert!(r.window() < 1e3, "{} {}", r.c_lo, r.c_hi);
        let hc = r.eval(&c);
        assert!(hc >= r.c_lo * 0.999 && hc <= r.c_hi * 1.001);
        assert!(r.resolution_change < 1e-4);
    }

    #[test]
    fn maximal_function_examples() {
        let grid = geometry::hemisphere_grid(2, 500).unwrap();
        let x = grid[17];
        assert!((maximal_function(|_| 1.0, 2.0, 5, &x, &grid).unwrap() - 1.0).abs() < 1e-15);
        let f = |y: &Point| y.coords()[0] - 0.3 * y.coords()[1];
        for x in grid.iter().step_by(37) {
            assert!(maximal_function(f, 3.0, 6, x, &grid).unwrap() >= f(x).abs());
        }
        assert!(maximal_function(f, 3.0, 6, &x, &[]).is_err());
    }

    #[test]
    fn jp_examples() {
        let x = p(&[0.2, 0.1]);
        assert!(jp_integral(4, 0.5, 2.0, 0.5, &x).is_err());
        let mut prev = f64::INFINITY;
        for n in [2usize, 4, 8] {
            let v = jp_integral(n, 0.0, 2.0, 2.0, &x).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
        let a = jp_integral_with_budget(8, 1.0, 1.0, 4.0, &p(&[0.9, 0.0]), 1).unwrap();
        let b = jp_integral_with_budget(8, 1.0, 1.0, 4.0, &p(&[0.9, 0.0]), 2).unwrap();
        assert!((a.value - b.value).abs() < 1e-6 * b.value);
    }
}
