//! Integration rules: Gauss–Jacobi on `[-1, 1]`, polynomial-exact rules on the
//! ball for every catalog weight, rules on spheres, a polar rule on metric
//! balls, and weighted `L_p` norms.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::geometry::Point;
use crate::weights::Weight;

/// Gauss rule on `[-1, 1]` for the weight `(1 - t)^alpha (1 + t)^beta`.
#[derive(Debug, Clone)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl Rule1d {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Polynomial exactness degree `2m - 1`.
    pub fn exactness(&self) -> usize {
        2 * self.nodes.len() - 1
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }

    /// Affine map of a weight-free (Legendre) rule onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&t, &w)| (mid + half * t, half * w))
    }
}

fn jacobi_mass(alpha: f64, beta: f64) -> f64 {
    ((alpha + beta + 1.0) * std::f64::consts::LN_2 + ln_gamma(alpha + 1.0) + ln_gamma(beta + 1.0)
        - ln_gamma(alpha + beta + 2.0))
    .exp()
}

/// Gauss–Jacobi nodes and weights by the Golub–Welsch eigenvalue method.
pub fn gauss_jacobi_1d(m: usize, alpha: f64, beta: f64) -> Result<Rule1d> {
    if m == 0 {
        return Err(invalid("Gauss–Jacobi rule needs at least one node"));
    }
    if alpha <= -1.0 || beta <= -1.0 {
        return Err(invalid(format!(
            "Jacobi exponents must exceed -1 (alpha = {alpha}, beta = {beta})"
        )));
    }
    let ab = alpha + beta;
    let mut jac = DMatrix::<f64>::zeros(m, m);
    for k in 0..m {
        let kf = k as f64;
        let diag = if k == 0 {
            (beta - alpha) / (ab + 2.0)
        } else {
            (beta * beta - alpha * alpha) / ((2.0 * kf + ab) * (2.0 * kf + ab + 2.0))
        };
        jac[(k, k)] = diag;
        if k + 1 < m {
            let j = kf + 1.0;
            let b = if k == 0 {
                4.0 * (1.0 + alpha) * (1.0 + beta) / ((2.0 + ab).powi(2) * (3.0 + ab))
            } else {
                4.0 * j * (j + alpha) * (j + beta) * (j + ab)
                    / ((2.0 * j + ab).powi(2) * (2.0 * j + ab + 1.0) * (2.0 * j + ab - 1.0))
            };
            jac[(k, k + 1)] = b.sqrt();
            jac[(k + 1, k)] = b.sqrt();
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mass = jacobi_mass(alpha, beta);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(Rule1d {
        nodes: pairs.iter().map(|p| p.0.clamp(-1.0, 1.0)).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
        alpha,
        beta,
    })
}

pub fn gauss_legendre(m: usize) -> Result<Rule1d> {
    gauss_jacobi_1d(m, 0.0, 0.0)
}

/// Number of Gauss nodes needed for exactness `degree`.
pub(crate) fn nodes_for(degree: usize) -> usize {
    degree / 2 + 1
}

/// Symmetric rule on `[-1, 1]` exact to `degree` for `|t|^gamma (1 - t^2)^a`.
pub fn generalized_gegenbauer(degree: usize, gamma: f64, a: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if gamma < 0.0 || a <= -1.0 {
        return Err(invalid(format!(
            "generalized Gegenbauer exponents out of range (gamma = {gamma}, a = {a})"
        )));
    }
    if gamma == 0.0 {
        let r = gauss_jacobi_1d(nodes_for(degree), a, a)?;
        return Ok((r.nodes, r.weights));
    }
    // Fold onto u = t^2 in [0, 1]: the even part of a polynomial of degree D is a
    // polynomial of degree D/2 in u, integrated against u^{(gamma-1)/2} (1-u)^a.
    let half = degree / 2;
    let b = 0.5 * (gamma - 1.0);
    let r = gauss_jacobi_1d(nodes_for(half), a, b)?;
    let scale = 0.25 * 2f64.powf(-a - b);
    let mut nodes = Vec::with_capacity(2 * r.len());
    let mut weights = Vec::with_capacity(2 * r.len());
    for (&v, &w) in r.nodes.iter().zip(&r.weights).rev() {
        nodes.push(-(0.5 * (1.0 + v)).sqrt());
        weights.push(scale * w);
    }
    for (&v, &w) in r.nodes.iter().zip(&r.weights) {
        nodes.push((0.5 * (1.0 + v)).sqrt());
        weights.push(scale * w);
    }
    Ok((nodes, weights))
}

/// A cubature rule on the ball with positive weights against a declared weight.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
    pub exactness: usize,
    pub target: Weight,
    pub dim: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, f: impl Fn(&Point) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, &w)| w * f(x))
            .sum()
    }

    /// Builds the default exact rule for `target`: sliced Gauss rules for the
    /// Jacobi and product weights, a piecewise radial rule for the step weight.
    pub fn for_weight(target: &Weight, dim: usize, degree: usize) -> Result<Self> {
        match target {
            Weight::RadialStep { a, c } => step_rule(degree, *a, *c, dim),
            _ => sliced_rule(degree, target, dim),
        }
    }

    /// Verifies exactness on a handful of monomials against the moment oracle.
    fn self_test(self) -> Result<Self> {
        let d = self.dim;
        let top = 2 * (self.exactness / 2);
        let mut probes: Vec<Vec<u32>> = vec![vec![0; d]];
        let mut push = |alpha: Vec<u32>| probes.push(alpha);
        if top >= 2 {
            let mut a = vec![0; d];
            a[0] = 2;
            push(a);
            let mut a = vec![0; d];
            a[d - 1] = top as u32;
            push(a);
        }
        if top >= 4 {
            let mut a = vec![0; d];
            a[0] = 2;
            a[d - 1] = top as u32 - 2;
            push(a);
        }
        for alpha in &probes {
            let exact = self.target.moment(alpha, d);
            let got = self.integrate(|x| {
                x.coords()
                    .iter()
                    .zip(alpha)
                    .map(|(v, &e)| v.powi(e as i32))
                    .product()
            });
            if (got - exact).abs() > 1e-10 * exact.abs().max(1e-300) {
                return Err(Error::Consistency(format!(
                    "rule for {} (degree {}) fails moment {:?}: {} vs {}",
                    self.target, self.exactness, alpha, got, exact
                )));
            }
        }
        Ok(self)
    }
}

/// Rule on `S^{k}` (unit sphere in `R^{k+1}`) against normalized surface
/// measure, exact for polynomials of degree `<= exactness`.
#[derive(Debug, Clone)]
pub struct SphereRule {
    pub ambient: usize,
    /// Flattened unit vectors, `ambient` coordinates each.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub exactness: usize,
}

impl SphereRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.ambient..(i + 1) * self.ambient]
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * f(self.node(i)))
            .sum()
    }
}

/// Product rule on the sphere of `R^{ambient}`: equal angles on the circle,
/// and recursively a Gauss–Jacobi rule in the last coordinate times a rule on
/// the lower sphere (Gauss–Legendre in the polar cosine for `S^2`).
pub fn sphere_rule(degree: usize, ambient: usize) -> Result<SphereRule> {
    match ambient {
        2 => {
            let m = degree + 1;
            let mut nodes = Vec::with_capacity(2 * m);
            for k in 0..m {
                let psi = 2.0 * PI * k as f64 / m as f64;
                nodes.push(psi.cos());
                nodes.push(psi.sin());
            }
            Ok(SphereRule {
                ambient,
                nodes,
                weights: vec![1.0 / m as f64; m],
                exactness: degree,
            })
        }
        3 | 4 => {
            let lower = sphere_rule(degree, ambient - 1)?;
            let a = (ambient as f64 - 3.0) / 2.0;
            let r = gauss_jacobi_1d(nodes_for(degree), a, a)?;
            let mass: f64 = r.weights.iter().sum();
            let mut nodes = Vec::with_capacity(r.len() * lower.len() * ambient);
            let mut weights = Vec::with_capacity(r.len() * lower.len());
            for (&t, &wt) in r.nodes.iter().zip(&r.weights) {
                let s = (1.0 - t * t).max(0.0).sqrt();
                for i in 0..lower.len() {
                    nodes.extend(lower.node(i).iter().map(|v| s * v));
                    nodes.push(t);
                    weights.push(wt / mass * lower.weights[i]);
                }
            }
            Ok(SphereRule {
                ambient,
                nodes,
                weights,
                exactness: degree,
            })
        }
        _ => Err(invalid(format!(
            "sphere rules exist for ambient dimension 2, 3, 4; got {ambient}"
        ))),
    }
}

/// Radial × angular rule for `w_mu` on `B^d`.
///
/// The radial factor uses `t = 2r^2 - 1`, which turns
/// `(1 - r^2)^{mu - 1/2} r^{d-1} dr` into a Gauss–Jacobi weight with
/// exponents `(mu - 1/2, (d - 2)/2)`; the angular factor is the equal-angle
/// rule (d = 2) or the product sphere rule (d = 3).
pub fn ball_rule(degree: usize, mu: f64, dim: usize) -> Result<QuadratureRule> {
    if mu < 0.0 {
        return Err(invalid(format!("mu must be nonnegative, got {mu}")));
    }
    if !(2..=3).contains(&dim) {
        return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
    }
    let alpha = mu - 0.5;
    let beta = (dim as f64 - 2.0) / 2.0;
    let radial = gauss_jacobi_1d(nodes_for(degree / 2), alpha, beta)?;
    let scale = 2f64.powf(-alpha - beta) / 4.0;
    let angular = sphere_rule(degree, dim)?;
    let sphere_area = if dim == 2 { 2.0 * PI } else { 4.0 * PI };
    let mut nodes = Vec::with_capacity(radial.len() * angular.len());
    let mut weights = Vec::with_capacity(radial.len() * angular.len());
    for (&t, &wt) in radial.nodes.iter().zip(&radial.weights) {
        let r = (0.5 * (1.0 + t)).sqrt();
        for i in 0..angular.len() {
            let mut c = [0.0; 3];
            for (k, v) in angular.node(i).iter().enumerate() {
                c[k] = r * v;
            }
            nodes.push(Point::from_array(c, dim));
            weights.push(scale * wt * sphere_area * angular.weights[i]);
        }
    }
    QuadratureRule {
        nodes,
        weights,
        exactness: degree,
        target: Weight::Jacobi { mu },
        dim,
    }
    .self_test()
}

/// Sliced rule for Jacobi and product weights.
///
/// Writes `x = (t, sqrt(1 - t^2) s)` with `s` in `B^{d-1}`; the weight
/// factorizes into `|t|^{g_1} (1 - t^2)^{a}` times the same family on the lower
/// ball, so the rule is a product of one-dimensional Gauss rules and is exact
/// for polynomials of total degree `<= degree`. For a function of `x_1` alone
/// it reduces to the one-dimensional Gauss–Jacobi rule in `t`.
pub fn sliced_rule(degree: usize, target: &Weight, dim: usize) -> Result<QuadratureRule> {
    let (gammas, mu) = match target {
        Weight::Jacobi { mu } => (vec![0.0; dim], *mu),
        Weight::Product { gammas, mu } => {
            if gammas.len() != dim {
                return Err(invalid(format!(
                    "product weight has {} exponents but dimension is {dim}",
                    gammas.len()
                )));
            }
            (gammas.clone(), *mu)
        }
        Weight::RadialStep { .. } => {
            return Err(invalid("sliced rules are not defined for the step weight"))
        }
    };
    if !(2..=3).contains(&dim) {
        return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
    }
    // coordinates of nodes in the unit ball B^k, built from k = 1 upward
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut wts: Vec<f64> = Vec::new();
    {
        let (n, w) = generalized_gegenbauer(degree, gammas[dim - 1], mu - 0.5)?;
        for (t, wt) in n.into_iter().zip(w) {
            pts.push(vec![t]);
            wts.push(wt);
        }
    }
    for k in (0..dim - 1).rev() {
        // current inner ball has dimension dim - 1 - k; new slice coordinate x_{k}
        let inner_dim = (dim - 1 - k) as f64;
        let tail: f64 = gammas[k + 1..].iter().sum();
        let a = mu - 0.5 + inner_dim / 2.0 + tail / 2.0;
        let (tn, tw) = generalized_gegenbauer(degree, gammas[k], a)?;
        let mut next_pts = Vec::with_capacity(tn.len() * pts.len());
        let mut next_wts = Vec::with_capacity(tn.len() * pts.len());
        for (&t, &wt) in tn.iter().zip(&tw) {
            let s = (1.0 - t * t).max(0.0).sqrt();
            for (p, &w) in pts.iter().zip(&wts) {
                let mut v = Vec::with_capacity(p.len() + 1);
                v.push(t);
                v.extend(p.iter().map(|c| s * c));
                next_pts.push(v);
                next_wts.push(wt * w);
            }
        }
        pts = next_pts;
        wts = next_wts;
    }
    let nodes = pts
        .iter()
        .map(|v| {
            let mut c = [0.0; 3];
            c[..dim].copy_from_slice(v);
            Point::from_array(c, dim)
        })
        .collect();
    QuadratureRule {
        nodes,
        weights: wts,
        exactness: degree,
        target: target.clone(),
        dim,
    }
    .self_test()
}

/// Piecewise radial rule for the step weight: Gauss–Legendre on `[0, a]` and
/// `[a, 1]` in `r` times an exact angular rule.
pub fn step_rule(degree: usize, a: f64, c: f64, dim: usize) -> Result<QuadratureRule> {
    if !(2..=3).contains(&dim) {
        return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
    }
    let target = Weight::step(a, c)?;
    let gl = gauss_legendre(nodes_for(degree + dim - 1))?;
    let angular = sphere_rule(degree, dim)?;
    let area = if dim == 2 { 2.0 * PI } else { 4.0 * PI };
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for (lo, hi, level) in [(0.0, a, 1.0), (a, 1.0, c)] {
        for (r, wr) in gl.mapped(lo, hi) {
            let jac = wr * r.powi(dim as i32 - 1) * level * area;
            for i in 0..angular.len() {
                let mut x = [0.0; 3];
                for (k, v) in angular.node(i).iter().enumerate() {
                    x[k] = r * v;
                }
                nodes.push(Point::from_array(x, dim));
                weights.push(jac * angular.weights[i]);
            }
        }
    }
    QuadratureRule {
        nodes,
        weights,
        exactness: degree,
        target,
        dim,
    }
    .self_test()
}

/// How the weight enters a norm computation.
#[derive(Debug, Clone, Copy)]
pub enum WeightMode<'a> {
    /// The rule already integrates against the weight.
    Intrinsic,
    /// The rule integrates against its own target; multiply by
    /// `w(x) / target(x)` at each node.
    Pointwise(&'a Weight),
}

/// `(sum_q weight_q |f(x_q)|^p)^{1/p}` with optional pointwise reweighting.
pub fn weighted_norm(
    f: impl Fn(&Point) -> f64,
    p: f64,
    rule: &QuadratureRule,
    mode: WeightMode<'_>,
) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid(format!(
            "norm exponent must lie in [1, inf), got {p}"
        )));
    }
    let mut acc = 0.0;
    for (x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let corr = match mode {
            WeightMode::Intrinsic => 1.0,
            WeightMode::Pointwise(target) => target.eval(x)? / rule.target.eval(x)?,
        };
        acc += w * corr * f(x).abs().powf(p);
    }
    Ok(acc.powf(1.0 / p))
}

/// Default exactness for integrating `|f|^p` with `deg f = degree`:
/// `max(p, 2) * degree + 20`, rounded up.
pub fn oversampled_degree(degree: usize, p: f64) -> usize {
    (p.max(2.0) * degree as f64).ceil() as usize + 20
}

/// Polar rule on a metric ball `B(x, r)` of the closed unit ball.
///
/// Points are lifted to the upper hemisphere, where `dist(x, .)` is the
/// geodesic angle `theta` from the lifted center. The rule integrates in
/// `(theta, direction)` over the part of the spherical cap of radius `r` that
/// lies in the upper hemisphere, with the Jacobian `y_{d+1} sin^{d-1}(theta)`
/// folded into the weights, so `sum weights[q] * g(points[q])` approximates
/// `int_{B(x, r)} g(y) dy`. The theta range is split into panels graded
/// geometrically from `scale` so integrands varying on the scale `1/n` near the
/// center are resolved.
#[derive(Debug, Clone)]
pub struct CapRule {
    pub points: Vec<Point>,
    /// Height `y_{d+1}` of each lifted node.
    pub heights: Vec<f64>,
    /// Distance `dist(x, y)` of each node from the center.
    pub theta: Vec<f64>,
    pub weights: Vec<f64>,
    /// Surface weights on the lifted cap (without the height factor), so
    /// `sum sphere_weights[q] g(lifted y_q)` approximates a surface integral.
    pub sphere_weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CapOptions {
    /// Directions on the unit circle (d = 2) or exactness of the direction rule on `S^2` (d = 3).
    pub directions: usize,
    /// Gauss–Legendre nodes per theta panel.
    pub theta_nodes: usize,
    /// First panel breakpoint; later breakpoints grow by a factor 4.
    pub scale: f64,
}

impl CapOptions {
    pub fn with_budget(budget: usize, dim: usize, scale: f64) -> Self {
        let theta_nodes = ((budget as f64).sqrt() / 4.0).ceil().max(8.0) as usize;
        let directions = if dim == 2 {
            (budget / theta_nodes).max(16)
        } else {
            // the product rule of exactness D on S^2 has about D^2 / 2 nodes
            ((2 * (budget / theta_nodes)) as f64).sqrt().ceil().max(8.0) as usize
        };
        Self {
            directions,
            theta_nodes,
            scale,
        }
    }
}

fn tangent_frame(center: &[f64]) -> Vec<Vec<f64>> {
    let n = center.len();
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
    let mut basis: Vec<Vec<f64>> = vec![center.to_vec()];
    for k in 0..n {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v.clone());
            frame.push(v);
        }
        if frame.len() == n - 1 {
            break;
        }
    }
    frame
}

pub fn cap_rule(center: &Point, r: f64, opts: CapOptions) -> Result<CapRule> {
    if !(r > 0.0) {
        return Err(invalid(format!("cap radius must be positive, got {r}")));
    }
    let dim = center.dim();
    let lifted = center.lift();
    let frame = tangent_frame(&lifted);
    // directions in the tangent space, with unnormalized surface weights
    let mut dirs: Vec<(Vec<f64>, f64)> = Vec::new();
    if dim == 2 {
        let m = opts.directions.max(4);
        for k in 0..m {
            let psi = 2.0 * PI * (k as f64 + 0.5) / m as f64;
            let v: Vec<f64> = (0..3)
                .map(|j| psi.cos() * frame[0][j] + psi.sin() * frame[1][j])
                .collect();
            dirs.push((v, 2.0 * PI / m as f64));
        }
    } else {
        let s = sphere_rule(opts.directions, 3)?;
        for i in 0..s.len() {
            let c = s.node(i);
            let v: Vec<f64> = (0..4)
                .map(|j| c[0] * frame[0][j] + c[1] * frame[1][j] + c[2] * frame[2][j])
                .collect();
            dirs.push((v, 4.0 * PI * s.weights[i]));
        }
    }
    let gl = gauss_legendre(opts.theta_nodes.max(2))?;
    let rmax = r.min(PI);
    let a = lifted[dim];
    let mut out = CapRule {
        points: Vec::new(),
        heights: Vec::new(),
        theta: Vec::new(),
        weights: Vec::new(),
        sphere_weights: Vec::new(),
    };
    for (xi, wdir) in &dirs {
        let b = xi[dim];
        // height along the geodesic is a cos(t) + b sin(t) = R sin(t_end - t)
        let crossing = b.atan2(a) + PI / 2.0;
        let tend = rmax.min(crossing);
        if tend <= 0.0 {
            continue;
        }
        let mut breaks = vec![0.0];
        let mut s = opts.scale.max(1e-12);
        while s < tend {
            breaks.push(s);
            s *= 4.0;
        }
        breaks.push(tend);
        for win in breaks.windows(2) {
            for (t, wt) in gl.mapped(win[0], win[1]) {
                let (st, ct) = t.sin_cos();
                let mut y = [0.0; 4];
                for j in 0..=dim {
                    y[j] = ct * lifted[j] + st * xi[j];
                }
                let h = y[dim].max(0.0);
                let mut c = [0.0; 3];
                c[..dim].copy_from_slice(&y[..dim]);
                let nrm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > 1.0 {
                    for v in &mut c {
                        *v /= nrm;
                    }
                }
                out.points.push(Point::from_array(c, dim));
                out.heights.push(h);
                out.theta.push(t);
                let sw = wt * wdir * st.powi(dim as i32 - 1);
                out.weights.push(sw * h);
                out.sphere_weights.push(sw);
            }
        }
    }
    Ok(out)
}
