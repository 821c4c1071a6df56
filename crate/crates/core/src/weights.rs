//! Weight catalog, metric-ball measures, doubling diagnostics, the boundary
//! factor `(sqrt(1 - |x|^2) + 1/n)^{2 mu}` and the mollified weight `w_n`.

use std::collections::HashMap;
use std::fmt;
use std::sync::RwLock;

use rand::Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::geometry::{self, Point};
use crate::quadrature::{cap_rule, CapOptions};

/// Weights on the ball.
///
/// * `Jacobi { mu }`: `(1 - |x|^2)^{mu - 1/2}`, `mu >= 0`.
/// * `Product { gammas, mu }`: `prod_i |x_i|^{gamma_i} (1 - |x|^2)^{mu - 1/2}`.
/// * `RadialStep { a, c }`: `1` for `|x| <= a`, `c` outside.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Jacobi { mu: f64 },
    Product { gammas: Vec<f64>, mu: f64 },
    RadialStep { a: f64, c: f64 },
}

impl Weight {
    pub fn jacobi(mu: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(invalid(format!("Jacobi weight needs mu >= 0, got {mu}")));
        }
        Ok(Weight::Jacobi { mu })
    }

    pub fn product(gammas: Vec<f64>, mu: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(invalid(format!("product weight needs mu >= 0, got {mu}")));
        }
        if gammas.is_empty() || gammas.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(invalid(format!(
                "product weight needs nonnegative exponents, got {gammas:?}"
            )));
        }
        Ok(Weight::Product { gammas, mu })
    }

    pub fn step(a: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && a < 1.0) {
            return Err(invalid(format!("step radius must lie in (0, 1), got {a}")));
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(invalid(format!("step level must be positive, got {c}")));
        }
        Ok(Weight::RadialStep { a, c })
    }

    /// Parses `jacobi:mu=1.0`, `product:g=0.5,0.5;mu=0.5` or `step:a=0.5;c=100`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| invalid(format!("weight `{spec}` lacks a `kind:` prefix")))?;
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for part in rest.split(';').filter(|s| !s.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| invalid(format!("weight field `{part}` is not `key=value`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let num = |key: &str| -> Result<f64> {
            let v = fields
                .get(key)
                .ok_or_else(|| invalid(format!("weight `{spec}` is missing `{key}`")))?;
            v.parse::<f64>()
                .map_err(|_| invalid(format!("weight field `{key}={v}` is not a number")))
        };
        let allowed: &[&str] = match kind.trim() {
            "jacobi" => &["mu"],
            "product" => &["g", "mu"],
            "step" => &["a", "c"],
            other => return Err(invalid(format!("unknown weight kind `{other}`"))),
        };
        if let Some(bad) = fields.keys().find(|k| !allowed.contains(k)) {
            return Err(invalid(format!("unknown weight field `{bad}` in `{spec}`")));
        }
        match kind.trim() {
            "jacobi" => Weight::jacobi(num("mu")?),
            "product" => {
                let g = fields
                    .get("g")
                    .ok_or_else(|| invalid(format!("weight `{spec}` is missing `g`")))?;
                let gammas = g
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| invalid(format!("exponent `{s}` is not a number")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Weight::product(gammas, num("mu")?)
            }
            _ => Weight::step(num("a")?, num("c")?),
        }
    }

    pub fn mu(&self) -> Option<f64> {
        match self {
            Weight::Jacobi { mu } | Weight::Product { mu, .. } => Some(*mu),
            Weight::RadialStep { .. } => None,
        }
    }

    /// Checks that the weight is defined in dimension `dim`.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if let Weight::Product { gammas, .. } = self {
            if gammas.len() != dim {
                return Err(invalid(format!(
                    "product weight has {} exponents but dimension is {dim}",
                    gammas.len()
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &Point) -> Result<f64> {
        match self {
            Weight::Jacobi { mu } | Weight::Product { mu, .. } => {
                let s = 1.0 - x.norm_sq();
                if s <= 0.0 && *mu < 0.5 {
                    return Err(Error::BoundarySingularity {
                        norm: x.norm(),
                        mu: *mu,
                    });
                }
                let radial = if *mu == 0.5 {
                    1.0
                } else {
                    s.max(0.0).powf(mu - 0.5)
                };
                let angular = match self {
                    Weight::Product { gammas, .. } => {
                        self.check_dim(x.dim())?;
                        x.coords()
                            .iter()
                            .zip(gammas)
                            .map(|(v, g)| if *g == 0.0 { 1.0 } else { v.abs().powf(*g) })
                            .product()
                    }
                    _ => 1.0,
                };
                Ok(radial * angular)
            }
            Weight::RadialStep { a, c } => Ok(if x.norm() <= *a { 1.0 } else { *c }),
        }
    }

    /// `w(y) * h` where `h = sqrt(1 - |y|^2)` is supplied by the caller; this
    /// is the integrand of the hemisphere-lifted measure and stays finite at
    /// the boundary.
    pub(crate) fn eval_times_height(&self, y: &Point, h: f64) -> f64 {
        match self {
            Weight::Jacobi { mu } => h.powf(2.0 * mu),
            Weight::Product { gammas, mu } => {
                h.powf(2.0 * mu)
                    * y.coords()
                        .iter()
                        .zip(gammas)
                        .map(|(v, g)| if *g == 0.0 { 1.0 } else { v.abs().powf(*g) })
                        .product::<f64>()
            }
            Weight::RadialStep { a, c } => h * if y.norm() <= *a { 1.0 } else { *c },
        }
    }

    /// `int_{B^d} x^alpha w(x) dx` in closed form.
    pub fn moment(&self, alpha: &[u32], dim: usize) -> f64 {
        match self {
            Weight::Jacobi { mu } => dirichlet_moment(alpha, &vec![0.0; dim], *mu),
            Weight::Product { gammas, mu } => dirichlet_moment(alpha, gammas, *mu),
            Weight::RadialStep { a, c } => {
                let deg: u32 = alpha.iter().sum();
                let m = dirichlet_moment(alpha, &vec![0.0; dim], 0.5);
                (1.0 - c) * a.powi((deg as usize + dim) as i32) * m + c * m
            }
        }
    }

    /// `w(B^d)`.
    pub fn total_mass(&self, dim: usize) -> f64 {
        self.moment(&vec![0; dim], dim)
    }
}

/// `int_{B^d} prod x_i^{a_i} |x_i|^{g_i} (1 - |x|^2)^{mu - 1/2} dx`
/// `= prod Gamma((a_i + g_i + 1)/2) Gamma(mu + 1/2) / Gamma(sum (a_i + g_i + 1)/2 + mu + 1/2)`,
/// and zero when some `a_i` is odd.
pub(crate) fn dirichlet_moment(alpha: &[u32], gammas: &[f64], mu: f64) -> f64 {
    if alpha.iter().any(|a| a % 2 == 1) {
        return 0.0;
    }
    let mut log = ln_gamma(mu + 0.5);
    let mut total = mu + 0.5;
    for (a, g) in alpha.iter().zip(gammas) {
        let e = (*a as f64 + g + 1.0) / 2.0;
        log += ln_gamma(e);
        total += e;
    }
    (log - ln_gamma(total)).exp()
}

impl fmt::Display for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weight::Jacobi { mu } => write!(f, "jacobi:mu={mu}"),
            Weight::Product { gammas, mu } => {
                let g: Vec<String> = gammas.iter().map(|v| v.to_string()).collect();
                write!(f, "product:g={};mu={mu}", g.join(","))
            }
            Weight::RadialStep { a, c } => write!(f, "step:a={a};c={c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureMethod {
    Quadrature,
    MonteCarlo,
}

impl MeasureMethod {
    /// Polar quadrature for the weights that are smooth on the lifted
    /// hemisphere, Monte Carlo for the discontinuous step weight.
    pub fn default_for(w: &Weight) -> Self {
        match w {
            Weight::RadialStep { .. } => MeasureMethod::MonteCarlo,
            _ => MeasureMethod::Quadrature,
        }
    }
}

/// Default node or sample budget for ball measures.
pub const DEFAULT_BUDGET: usize = 6_000;

/// A ball-measure value with its standard error (zero for quadrature).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureEstimate {
    pub value: f64,
    pub stderr: f64,
}

fn check_measure_args(w: &Weight, x: &Point, r: f64, budget: usize) -> Result<()> {
    if !(r > 0.0) {
        return Err(invalid(format!("radius must be positive, got {r}")));
    }
    if budget < 100 {
        return Err(invalid(format!(
            "budget must be at least 100, got {budget}"
        )));
    }
    w.check_dim(x.dim())
}

/// `w(B(x, r))` by polar quadrature on the lifted hemisphere.
pub fn ball_measure_quadrature(w: &Weight, x: &Point, r: f64, budget: usize) -> Result<f64> {
    check_measure_args(w, x, r, budget)?;
    let scale = (r / 8.0).min(0.1);
    let cap = cap_rule(x, r, CapOptions::with_budget(budget, x.dim(), scale))?;
    Ok(cap
        .points
        .iter()
        .zip(&cap.heights)
        .zip(&cap.weights)
        .map(|((y, &h), &wq)| {
            // weights already contain one factor of h
            if h > 0.0 {
                wq / h * w.eval_times_height(y, h)
            } else {
                0.0
            }
        })
        .sum())
}

/// `w(B(x, r))` by Monte Carlo: uniform angles in the spherical cap around the
/// lifted center, so samples concentrate where the ball measure lives near
/// the boundary.
pub fn ball_measure_monte_carlo(
    w: &Weight,
    x: &Point,
    r: f64,
    budget: usize,
    seed: u64,
) -> Result<MeasureEstimate> {
    use rand_distr::{Distribution, StandardNormal};
    check_measure_args(w, x, r, budget)?;
    let dim = x.dim();
    let lifted = x.lift_array();
    let rmax = r.min(std::f64::consts::PI);
    let sphere_area = if dim == 2 {
        2.0 * std::f64::consts::PI
    } else {
        4.0 * std::f64::consts::PI
    };
    let mut rng = crate::rng::stream(seed, 0xba11);
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    for _ in 0..budget {
        let theta = rng.random_range(0.0..rmax);
        // uniform direction orthogonal to the lifted center
        let mut v = [0.0f64; 4];
        for c in v.iter_mut().take(dim + 1) {
            *c = StandardNormal.sample(&mut rng);
        }
        let dot: f64 = (0..=dim).map(|j| v[j] * lifted[j]).sum();
        for j in 0..=dim {
            v[j] -= dot * lifted[j];
        }
        let nv = (0..=dim).map(|j| v[j] * v[j]).sum::<f64>().sqrt();
        let (st, ct) = theta.sin_cos();
        let mut y = [0.0; 3];
        for j in 0..dim {
            y[j] = ct * lifted[j] + st * v[j] / nv;
        }
        let h = ct * lifted[dim] + st * v[dim] / nv;
        let val = if h > 0.0 {
            let nrm = y.iter().map(|t| t * t).sum::<f64>().sqrt().max(1.0);
            let yp = Point::from_array([y[0] / nrm, y[1] / nrm, y[2] / nrm], dim);
            rmax * sphere_area * st.powi(dim as i32 - 1) * w.eval_times_height(&yp, h)
        } else {
            0.0
        };
        acc += val;
        acc2 += val * val;
    }
    let n = budget as f64;
    let mean = acc / n;
    let var = (acc2 / n - mean * mean).max(0.0);
    Ok(MeasureEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
    })
}

/// `w(B(x, r)) = int_{B(x, r)} w(y) dy`.
pub fn ball_measure(
    w: &Weight,
    x: &Point,
    r: f64,
    method: MeasureMethod,
    budget: usize,
) -> Result<f64> {
    match method {
        MeasureMethod::Quadrature => ball_measure_quadrature(w, x, r, budget),
        MeasureMethod::MonteCarlo => {
            // seed from the query so repeated calls agree
            let key = x
                .coords()
                .iter()
                .fold(r.to_bits(), |h, v| h.rotate_left(13) ^ v.to_bits());
            Ok(ball_measure_monte_carlo(w, x, r, budget, key)?.value)
        }
    }
}

/// `w(B(x, r))` with the default method and budget for the weight.
pub fn ball_measure_default(w: &Weight, x: &Point, r: f64) -> Result<f64> {
    ball_measure(w, x, r, MeasureMethod::default_for(w), DEFAULT_BUDGET)
}

/// Empirical doubling constant: a lower estimate of `L_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoublingReport {
    pub estimated_l: f64,
    pub estimated_s_w: f64,
    pub sample_count: usize,
    pub worst_point: Point,
    pub worst_radius: f64,
}

/// Maximizes `w(B(x, 2r)) / w(B(x, r))` over random `(x, r)`: `x` from the
/// verification grid and `r` log-uniform in `[1e-3, pi]`.
pub fn doubling_estimate(
    w: &Weight,
    dim: usize,
    sample_count: usize,
    seed: u64,
) -> Result<DoublingReport> {
    if sample_count < 10 {
        return Err(invalid(format!(
            "doubling estimate needs at least 10 samples, got {sample_count}"
        )));
    }
    w.check_dim(dim)?;
    let grid = geometry::verification_grid(dim)?;
    let mut rng = crate::rng::stream(seed, 0xd0b1);
    let (lo, hi) = (1e-3f64.ln(), std::f64::consts::PI.ln());
    let samples: Vec<(Point, f64)> = (0..sample_count)
        .map(|_| {
            let x = grid[rng.random_range(0..grid.len())];
            let r = rng.random_range(lo..hi).exp();
            (x, r)
        })
        .collect();
    let method = MeasureMethod::default_for(w);
    let ratios: Vec<f64> = samples
        .par_iter()
        .map(|(x, r)| -> Result<f64> {
            let small = ball_measure(w, x, *r, method, DEFAULT_BUDGET)?;
            let big = ball_measure(w, x, 2.0 * r, method, DEFAULT_BUDGET)?;
            Ok(big / small)
        })
        .collect::<Result<_>>()?;
    let mut best = (1.0, samples[0].0, samples[0].1);
    for (ratio, (x, r)) in ratios.iter().zip(&samples) {
        if ratio.is_finite() && *ratio > best.0 {
            best = (*ratio, *x, *r);
        }
    }
    Ok(DoublingReport {
        estimated_l: best.0,
        estimated_s_w: best.0.log2(),
        sample_count,
        worst_point: best.1,
        worst_radius: best.2,
    })
}

/// `(sqrt(1 - |x|^2) + 1/n)^{2 mu}`.
pub fn cal_w(mu: f64, n: usize, x: &Point) -> f64 {
    (x.height() + 1.0 / n.max(1) as f64).powf(2.0 * mu)
}

/// `w_n(x) = w(B(x, 1/n)) / |B(x, 1/n)|`.
pub fn mollified_weight(w: &Weight, n: usize, x: &Point) -> Result<f64> {
    if n == 0 {
        return Err(invalid("mollification degree must be positive"));
    }
    let r = 1.0 / n as f64;
    let lebesgue = Weight::Jacobi { mu: 0.5 };
    let num = ball_measure_default(w, x, r)?;
    if *w == lebesgue {
        return Ok(1.0);
    }
    let den = ball_measure_quadrature(&lebesgue, x, r, DEFAULT_BUDGET)?;
    Ok(num / den)
}

/// `w_n` for one `(weight, n)`, memoized per query point.
#[derive(Debug)]
pub struct MollifiedWeight {
    weight: Weight,
    n: usize,
    cache: RwLock<HashMap<[u64; 3], f64>>,
}

impl MollifiedWeight {
    pub fn new(weight: Weight, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("mollification degree must be positive"));
        }
        Ok(Self {
            weight,
            n,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weight(&self) -> &Weight {
        &self.weight
    }

    pub fn eval(&self, x: &Point) -> Result<f64> {
        let mut key = [0u64; 3];
        for (k, v) in key.iter_mut().zip(x.coords()) {
            *k = v.to_bits();
        }
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = mollified_weight(&self.weight, self.n, x)?;
        self.cache.write().expect("cache lock").insert(key, v);
        Ok(v)
    }

    pub fn cached_points(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}
