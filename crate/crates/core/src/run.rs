//! Experiment pipelines: each turns a config into CSV tables, a JSON summary
//! and a list of pass/fail checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::christoffel::{christoffel_l2, christoffel_scan, LpProblem};
use crate::config::{Experiment, ExperimentConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::{self, Point};
use crate::kernels::{self, LnKernel, NeedleOptions};
use crate::markov::{self, MarkovSetup, WorstCaseResult};
use crate::polyspace::{multi_indices, OrthoBasis, Poly};
use crate::quadrature::QuadratureRule;
use crate::thresholds::{self, window, Thresholds, DEFAULTS};
use crate::weights::{self, Weight};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dump_rule: bool,
    /// Directory against which a relative `input` path is resolved.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("<= {max:e}"),
            passed: value <= max,
        }
    }

    fn below(name: impl Into<String>, value: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("< {max:e}"),
            passed: value < max,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, min: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!(">= {min:e}"),
            passed: value >= min,
        }
    }

    fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("in [{lo}, {hi}]"),
            passed: value >= lo && value <= hi,
        }
    }
}

/// A CSV table; the config hash column is appended when rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: String,
    pub rows: Vec<String>,
}

impl Table {
    fn new(header: &str) -> Self {
        Self {
            header: header.to_string(),
            rows: Vec::new(),
        }
    }

    fn from_csv(csv: &str) -> Self {
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default().to_string();
        Self {
            header,
            rows: lines.map(str::to_string).collect(),
        }
    }

    fn push(&mut self, row: String) {
        self.rows.push(row);
    }

    pub fn render(&self, hash: &str) -> String {
        let mut s = format!("{},config_hash\n", self.header);
        for r in &self.rows {
            let _ = writeln!(s, "{r},{hash}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub kind: Experiment,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub table: Table,
    /// Extra tables written next to the main CSV, keyed by file name.
    pub artifacts: Vec<(String, Table)>,
    pub summary: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    pub wall_time_secs: f64,
}

impl ExperimentRecord {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn csv(&self) -> String {
        self.table.render(&self.config_hash)
    }

    pub fn summary_json(&self) -> Value {
        json!({
            "experiment": self.kind.name(),
            "config_hash": self.config_hash,
            "config": self.config.to_text(),
            "thresholds_version": thresholds::VERSION,
            "rows": self.table.rows.len(),
            "summary": self.summary,
            "checks": self.checks,
            "passed": self.passed(),
            "wall_time_secs": self.wall_time_secs,
        })
    }

    /// Writes `<kind>.csv`, `<kind>.summary.json` and the artifacts into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let stem = self.kind.name();
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.csv())?;
        let json = dir.join(format!("{stem}.summary.json"));
        std::fs::write(
            &json,
            serde_json::to_string_pretty(&self.summary_json())? + "\n",
        )?;
        let mut out = vec![csv, json];
        for (name, table) in &self.artifacts {
            let path = dir.join(name);
            std::fs::write(&path, table.render(&self.config_hash))?;
            out.push(path);
        }
        Ok(out)
    }
}

struct Builder {
    table: Table,
    artifacts: Vec<(String, Table)>,
    summary: BTreeMap<String, Value>,
    checks: Vec<Check>,
}

impl Builder {
    fn new(header: &str) -> Self {
        Self {
            table: Table::new(header),
            artifacts: Vec::new(),
            summary: BTreeMap::new(),
            checks: Vec::new(),
        }
    }

    fn note(&mut self, key: impl Into<String>, v: impl Serialize) {
        self.summary
            .insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }
}

fn ctx<T>(module: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Context { .. } => e,
        e => Error::Context {
            module,
            source: Box::new(e),
        },
    })
}

fn f(v: f64) -> String {
    format!("{v:.17e}")
}

fn degrees(cfg: &ExperimentConfig) -> Result<Vec<usize>> {
    let ns = cfg.n.values();
    if ns.contains(&0) {
        return Err(invalid("degree 0 is not allowed for this experiment"));
    }
    Ok(ns)
}

fn jacobi_mu(w: &Weight, what: &str) -> Result<f64> {
    match w {
        Weight::Jacobi { mu } => Ok(*mu),
        other => Err(invalid(format!(
            "{what} needs a Jacobi weight, got {other}"
        ))),
    }
}

fn p_label(p: f64) -> String {
    format!("p{p}")
}

/// Runs the configured experiment.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let t = &DEFAULTS;
    let mut b = match cfg.experiment {
        Experiment::Worst => ctx("markov", run_worst(cfg, t))?,
        Experiment::Average => ctx("markov", run_average(cfg, t))?,
        Experiment::Christoffel => ctx("christoffel", run_christoffel(cfg, t))?,
        Experiment::KernelCheck => ctx("kernels", run_kernel_check(cfg, t))?,
        Experiment::Needle => ctx("kernels", run_needle(cfg, t))?,
        Experiment::Fit => ctx("fit", run_fit(cfg, opts))?,
        Experiment::Basis => ctx("polyspace", run_basis(cfg, t))?,
        Experiment::Selftest => run_selftest(cfg, t)?,
    };
    if opts.dump_rule {
        let degree = 2 * cfg.n.max().max(1);
        let rule = ctx(
            "quadrature",
            QuadratureRule::for_weight(&cfg.weight, cfg.dimension, degree),
        )?;
        b.artifacts.push(("rule.csv".into(), rule_table(&rule)));
    }
    Ok(ExperimentRecord {
        kind: cfg.experiment,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        table: b.table,
        artifacts: b.artifacts,
        summary: b.summary,
        checks: b.checks,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn rule_table(rule: &QuadratureRule) -> Table {
    let coords: Vec<String> = (0..rule.dim).map(|i| format!("coord_{i}")).collect();
    let mut t = Table::new(&format!("node_index,{},weight", coords.join(",")));
    for (i, (x, w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        let c: Vec<String> = x.coords().iter().map(|v| f(*v)).collect();
        t.push(format!("{i},{},{}", c.join(","), f(*w)));
    }
    t
}

fn slope_of(points: &[(f64, f64)]) -> Option<f64> {
    markov::exponent_fit(points).ok().map(|e| e.slope)
}

fn run_worst(cfg: &ExperimentConfig, t: &Thresholds) -> Result<Builder> {
    let ns = degrees(cfg)?;
    let w = &cfg.weight;
    let dim = cfg.dimension;
    let mut b = Builder::new(markov::CSV_HEADER.trim_end());
    let full = if cfg.p.contains(&2.0) {
        Some(OrthoBasis::new(
            *ns.iter().max().expect("nonempty"),
            w,
            dim,
        )?)
    } else {
        None
    };
    for &p in &cfg.p {
        let results: Vec<WorstCaseResult> = match &full {
            Some(full) if p == 2.0 => ns
                .par_iter()
                .map(|&n| markov::worst_l2(&MarkovSetup::from_basis(full, n)?))
                .collect::<Result<_>>()?,
            _ => ns
                .par_iter()
                .map(|&n| markov::worst_lp(n, p, w, dim, cfg.restarts, cfg.seed))
                .collect::<Result<_>>()?,
        };
        let lifted: Option<Vec<f64>> = match w {
            Weight::Jacobi { mu } => Some(
                ns.par_iter()
                    .map(|&n| markov::lifted_lower_bound(n, p, *mu, dim).map(|l| l.value))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };
        let mut s = String::new();
        for (i, r) in results.iter().enumerate() {
            markov::csv_row(&mut s, r.n, p, w, &r.method.to_string(), r.value, 0.0);
            if let Some(l) = &lifted {
                markov::csv_row(&mut s, r.n, p, w, "lifted", l[i], 0.0);
            }
        }
        s.lines().for_each(|l| b.table.push(l.to_string()));

        let pts: Vec<(f64, f64)> = results.iter().map(|r| (r.n as f64, r.value)).collect();
        let ratios: Vec<f64> = pts.iter().map(|(n, v)| v / (n * n)).collect();
        let label = p_label(p);
        let win = window(&ratios);
        b.note(format!("ratio_window_{label}"), win);
        b.checks.push(Check::below(
            format!("worst_ratio_window_{label}"),
            win,
            t.worst_ratio_window,
        ));
        if let Some(slope) = slope_of(&pts) {
            b.note(format!("slope_{label}"), slope);
            b.checks.push(Check::within(
                format!("worst_slope_{label}"),
                slope,
                t.worst_slope_min,
                t.worst_slope_max,
            ));
        }
        if let Some(l) = &lifted {
            let excess = results
                .iter()
                .zip(l)
                .map(|(r, l)| l - r.value)
                .fold(f64::NEG_INFINITY, f64::max);
            let lpts: Vec<(f64, f64)> = ns.iter().zip(l).map(|(n, v)| (*n as f64, *v)).collect();
            if let Some(slope) = slope_of(&lpts) {
                b.note(format!("lifted_slope_{label}"), slope);
            }
            b.checks.push(Check::at_most(
                format!("lifted_le_worst_{label}"),
                excess,
                t.lifted_dominance_tol,
            ));
        }
    }
    Ok(b)
}

fn run_average(cfg: &ExperimentConfig, t: &Thresholds) -> Result<Builder> {
    if cfg.p != [2.0] {
        return Err(invalid("the average-case factor is defined for p = 2 only"));
    }
    let ns = degrees(cfg)?;
    let w = &cfg.weight;
    let full = OrthoBasis::new(*ns.iter().max().expect("nonempty"), w, cfg.dimension)?;
    let mut b = Builder::new(markov::CSV_HEADER.trim_end());
    let mut s = String::new();
    let mut pts = Vec::new();
    let mut ratios = Vec::new();
    for &n in &ns {
        let setup = MarkovSetup::from_basis(&full, n)?;
        let r = markov::average_monte_carlo(&setup, cfg.sigma, cfg.samples, cfg.seed)?;
        markov::csv_row(
            &mut s,
            n,
            2.0,
            w,
            "monte-carlo",
            r.monte_carlo_mean,
            r.monte_carlo_stderr,
        );
        markov::csv_row(
            &mut s,
            n,
            2.0,
            w,
            "trace-formula",
            r.trace_formula_value,
            0.0,
        );
        pts.push((n as f64, r.monte_carlo_mean));
        ratios.push(r.trace_formula_value / r.monte_carlo_mean);
    }
    s.lines().for_each(|l| b.table.push(l.to_string()));
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    b.note("trace_over_mc_min", lo);
    b.note("trace_over_mc_max", hi);
    b.checks.push(Check::at_least(
        "trace_over_mc_min",
        lo,
        t.average_ratio_min,
    ));
    b.checks
        .push(Check::at_most("trace_over_mc_max", hi, t.average_ratio_max));
    if let Some(slope) = slope_of(&pts) {
        b.note("slope", slope);
        b.checks
            .push(Check::at_most("average_slope", slope, t.average_slope_max));
    }
    Ok(b)
}

fn run_christoffel(cfg: &ExperimentConfig, t: &Thresholds) -> Result<Builder> {
    let ns = degrees(cfg)?;
    let mut b = Builder::new("n,p,x_norm,lambda,ball_measure,ratio");
    for &p in &cfg.p {
        let scan = christoffel_scan(&cfg.weight, p, cfg.dimension, &ns, None)?;
        b.table.rows.extend(Table::from_csv(&scan.to_csv()).rows);
        let label = p_label(p);
        let win = scan.window();
        let bound = if p == 2.0 {
            t.christoffel_window_p2
        } else {
            t.christoffel_window_other
        };
        b.note(format!("window_{label}"), win);
        b.checks.push(Check::below(
            format!("christoffel_window_{label}"),
            win,
            bound,
        ));
        let unconverged = scan.rows.iter().filter(|r| !r.converged).count();
        b.checks.push(Check::at_most(
            format!("christoffel_unconverged_{label}"),
            unconverged as f64,
            0.0,
        ));
    }
    Ok(b)
}

/// Random polynomial of degree `n` with coefficients uniform in `[-1, 1]`.
pub fn random_poly(n: usize, dim: usize, seed: u64, stream_id: u64) -> Result<Poly> {
    let mut rng = crate::rng::stream(seed, stream_id);
    Poly::from_terms(
        dim,
        multi_indices(n, dim)
            .into_iter()
            .map(|a| (a, rng.random_range(-1.0..1.0))),
    )
}

/// Sample points for kernel checks: random interior points plus points on
/// and near the boundary.
pub fn kernel_sample_points(count: usize, dim: usize, seed: u64) -> Result<Vec<Point>> {
    let mut pts = geometry::random_ball_points(count, dim, seed, 0x6b65)?;
    for r in [0.0, 0.9, 0.99, 1.0] {
        pts.push(Point::on_axis(dim, 0, r)?);
    }
    Ok(pts)
}

fn max_abs(m: impl IntoIterator<Item = f64>) -> f64 {
    m.into_iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Ratios reported by `kernel-check` for one degree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelChecks {
    pub routes: f64,
    pub symmetry: f64,
    pub reproducing: f64,
    pub derivative: f64,
    pub partial_l1_over_n2: f64,
    pub partial_bound: f64,
}

pub fn kernel_checks(n: usize, mu: f64, dim: usize, k: f64, seed: u64) -> Result<KernelChecks> {
    let ln = LnKernel::new(n, mu, dim)?;
    let pts = kernel_sample_points(8, dim, seed)?;
    let (xs, ys) = pts.split_at(pts.len() / 2);
    let basis_vals = ln.value_matrix(xs, ys)?;
    let swapped = ln.value_matrix(ys, xs)?;
    let scale = max_abs(basis_vals.iter().cloned()).max(f64::MIN_POSITIVE);
    let mut routes: f64 = 0.0;
    for (a, x) in xs.iter().enumerate() {
        for (c, y) in ys.iter().enumerate() {
            let g = kernels::ln_kernel(n, mu, x, y)?;
            routes = routes.max((g - basis_vals[(a, c)]).abs());
        }
    }
    let symmetry = max_abs(
        (0..xs.len())
            .flat_map(|a| (0..ys.len()).map(move |c| (a, c)))
            .map(|(a, c)| basis_vals[(a, c)] - swapped[(c, a)]),
    );
    let polys: Vec<Poly> = (0..4)
        .map(|s| random_poly(n, dim, seed, 0x7000 + s))
        .collect::<Result<_>>()?;
    let probes = geometry::random_ball_points(200, dim, seed, 0x7100)?;
    let ids = kernels::identity_residuals(&ln, &polys, xs, &probes)?;
    let partial_l1 = pts
        .par_iter()
        .map(|y| ln.partial_l1(0, y))
        .collect::<Result<Vec<f64>>>()?;
    let mut partial_bound: f64 = 0.0;
    let dmat = ln.partial_matrix(0, &pts, &pts)?;
    for (a, x) in pts.iter().enumerate() {
        for (c, y) in pts.iter().enumerate() {
            partial_bound =
                partial_bound.max(kernels::partial_bound_ratio(dmat[(a, c)], n, mu, k, x, y));
        }
    }
    Ok(KernelChecks {
        routes: routes / scale,
        symmetry: symmetry / scale,
        reproducing: ids.iter().map(|r| r.reproducing).fold(0.0, f64::max),
        derivative: ids.iter().map(|r| r.derivative).fold(0.0, f64::max),
        partial_l1_over_n2: partial_l1.iter().cloned().fold(0.0, f64::max) / (n * n) as f64,
        partial_bound,
    })
}

fn run_kernel_check(cfg: &ExperimentConfig, t: &Thresholds) -> Result<Builder> {
    let mu = jacobi_mu(&cfg.weight, "kernel-check")?;
    let ns = degrees(cfg)?;
    let dim = cfg.dimension;
    let k = cfg.k.unwrap_or(dim as f64 + 1.0);
    let results: Vec<KernelChecks> = ns
        .iter()
        .map(|&n| kernel_checks(n, mu, dim, k, cfg.seed))
        .collect::<Result<_>>()?;
    let l1_window = window(
        &results
            .iter()
            .map(|r| r.partial_l1_over_n2)
            .collect::<Vec<_>>(),
    );
    let pb_window = window(&results.iter().map(|r| r.partial_bound).collect::<Vec<_>>());
    let l1_ok = l1_window < t.partial_l1_window;
    let pb_ok = pb_window < t.bounded_over_n_window;
    let mut b = Builder::new("n,mu,check_name,ratio,bound_holds");
    for (n, r) in ns.iter().zip(&results) {
        let rows = [
            ("routes", r.routes, r.routes <= t.kernel_routes_tol),
            ("symmetry", r.symmetry, r.symmetry <= t.kernel_symmetry_tol),
            (
                "reproducing",
                r.reproducing,
                r.reproducing < t.reproducing_tol,
            ),
            ("derivative", r.derivative, r.derivative < t.derivative_tol),
            ("partial_l1_over_n2", r.partial_l1_over_n2, l1_ok),
            ("partial_bound", r.partial_bound, pb_ok),
        ];
        for (name, ratio, holds) in rows {
            b.table
                .push(format!("{n},{mu},{name},{},{holds}", f(ratio)));
        }
    }
    let worst = |g: fn(&KernelChecks) -> f64| results.iter().map(g).fold(0.0, f64::max);
    b.checks.push(Check::at_most(
        "routes",
        worst(|r| r.routes),
        t.kernel_routes_tol,
    ));
    b.checks.push(Check::at_most(
        "symmetry",
        worst(|r| r.symmetry),
        t.kernel_symmetry_tol,
    ));
    b.checks.push(Check::below(
        "reproducing",
        worst(|r| r.reproducing),
        t.reproducing_tol,
    ));
    b.checks.push(Check::below(
        "derivative",
        worst(|r| r.derivative),
        t.derivative_tol,
    ));
    b.checks.push(Check::below(
        "partial_l1_window",
        l1_window,
        t.partial_l1_window,
    ));
    b.checks.push(Check::below(
        "partial_bound_window",
        pb_window,
        t.bounded_over_n_window,
    ));
    b.note("partial_l1_window", l1_window);
    b.note("partial_bound_window", pb_window);
    b.note("k", k);
    Ok(b)
}

/// Needle decay `k = ceil(s_w) + d + 1` from a doubling estimate of `w`.
pub fn default_needle_k(w: &Weight, dim: usize, seed: u64) -> Result<f64> {
    let rep = weights::doubling_estimate(w, dim, 200, seed)?;
    Ok(rep.estimated_s_w.ceil() + dim as f64 + 1.0)
}

/// Needle with the cubature refined (up to 8x) until doubling it no longer
/// moves the values.
pub fn needle_refined(
    c: &Point,
    n: usize,
    p: f64,
    k: f64,
    grid: &[Point],
) -> Result<kernels::NeedleResult> {
    let mut refinement = 1;
    loop {
        let opts = NeedleOptions {
            m_override: None,
            refinement: Some(refinement),
        };
        match kernels::needle_polynomial_on(c, n, p, k, opts, grid) {
            Err(Error::Resolution(_)) if refinement < 8 => refinement *= 2,
            other => return other,
        }
    }
}

pub fn needle_centers(dim: usize) -> Result<Vec<Point>> {
    [0.0, 0.5, 0.95, 1.0]
        .iter()
        .map(|&r| Point::on_axis(dim, 0, r))
        .collect()
}

fn run_needle(cfg: &ExperimentConfig, t: &Thresholds) -> Result<Builder> {
    let ns = degrees(cfg)?;
    let dim = cfg.dimension;
    let k = match cfg.k {
        Some(k) => k,
        None => default_needle_k(&cfg.weight, dim, cfg.seed)?,
    };
    let grid = geometry::hemisphere_grid(dim, cfg.grid_size())?;
    let centers = needle_centers(dim)?;
    let mut b = Builder::new("n,p,k,m,center_norm,min_value,c_lo,c_hi,window");
    let mut min_value = f64::INFINITY;
    let mut max_window: f64 = 0.0;
    for &p in &cfg.p {
        for &n in &ns {
            for c in &centers {
                let r = needle_refined(c, n, p, k, &grid)?;
                min_value = min_value.min(r.min_value);
                max_window = max_window.max(r.window());
                b.table.push(format!(
                    "{n},{p},{k},{},{},{},{},{},{}",
                    r.m(),
                    f(c.norm()),
                    f(r.min_value),
                    f(r.c_lo),
                    f(r.c_hi),
                    f(r.window())
                ));
            }
        }
    }
    b.note("k", k);
    b.note("grid_points", grid.len());
    b.checks.push(Check::at_least(
        "needle_min_value",
        min_value,
        t.needle_nonneg,
    ));
    b.checks
        .push(Check::below("needle_window", max_window, t.needle_window));
    Ok(b)
}

/// Reads `(n, value)` pairs from CSV text: columns named `n` and `value` when
/// a header is present, the first two columns otherwise.
pub fn read_fit_points(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let first = records
        .next()
        .ok_or_else(|| invalid("fit input is empty"))?
        .map_err(|e| invalid(format!("fit input: {e}")))?;
    let mut rows = Vec::new();
    let (ni, vi) = if first.iter().all(|c| c.parse::<f64>().is_ok()) {
        rows.push(first);
        (0, 1)
    } else {
        let find = |name: &str| first.iter().position(|c| c == name);
        (find("n").unwrap_or(0), find("value").unwrap_or(1))
    };
    for r in records {
        rows.push(r.map_err(|e| invalid(format!("fit input: {e}")))?);
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let get = |j: usize| -> Result<f64> {
                r.get(j)
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| invalid(format!("fit input row {} is malformed", i + 1)))
            };
            Ok((get(ni)?, get(vi)?))
        })
        .collect()
}

fn run_fit(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Builder> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| invalid("fit needs an 'input' key naming a CSV file"))?;
    let path = match &opts.base_dir {
        Some(base) if input.is_relative() => base.join(input),
        _ => input.clone(),
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| invalid(format!("cannot read fit input {}: {e}", path.display())))?;
    let pts = read_fit_points(&text)?;
    let fit = markov::exponent_fit(&pts)?;
    let mut b = Builder::new("points,slope,intercept,max_residual");
    b.table.push(format!(
        "{},{},{},{}",
        pts.len(),
        f(fit.slope),
        f(fit.intercept),
        f(fit.max_residual)
    ));
    b.note("slope", fit.slope);
    b.note("intercept", fit.intercept);
    Ok(b)
}

fn independent_rule(w: &Weight, dim: usize, n: usize) -> Result<QuadratureRule> {
    QuadratureRule::for_weight(w, dim, 2 * n + 5)
}

fn run_basis(cfg: &ExperimentConfig, t: &Thresholds) -> Result<Builder> {
    let n = cfg.n.max();
    let basis = OrthoBasis::new(n, &cfg.weight, cfg.dimension)?;
    let mut b = Builder::new("");
    b.table = Table::from_csv(&basis.to_csv());
    let gram = basis.verify_gram(&independent_rule(&cfg.weight, cfg.dimension, n)?)?;
    b.note("degree", n);
    b.note("elements", basis.len());
    b.note("gram_residual", basis.gram_residual());
    b.checks
        .push(Check::at_most("gram_independent", gram, t.gram_tol));
    Ok(b)
}

struct Selftest<'a> {
    b: &'a mut Builder,
}

impl Selftest<'_> {
    fn record(&mut self, module: &str, check: Check) {
        self.b.table.push(format!(
            "{module},{},{},{},{}",
            check.name,
            f(check.value),
            check.bound,
            check.passed
        ));
        let mut c = check;
        c.name = format!("{module}.{}", c.name);
        self.b.checks.push(c);
    }
}

fn run_selftest(cfg: &ExperimentConfig, t: &Thresholds) -> Result<Builder> {
    let dim = cfg.dimension;
    let seed = cfg.seed;
    let w = &cfg.weight;
    let mut b = Builder::new("module,check_name,value,bound,passed");
    let mut artifacts = Vec::new();
    {
        let mut st = Selftest { b: &mut b };

        let pts = geometry::random_ball_points(3000, dim, seed, 1)?;
        let mut chord: f64 = 0.0;
        let mut tri: f64 = 0.0;
        let nf = 10.0;
        for c in pts.chunks_exact(3) {
            let d = ctx("geometry", geometry::dist(&c[0], &c[1]))?;
            let dt = ctx("geometry", geometry::dist_tilde(&c[0], &c[1]))?;
            chord = chord.max((dt - 2.0 * (d / 2.0).sin()).abs());
            let dz = geometry::dist(&c[0], &c[2])?;
            let dyz = geometry::dist(&c[1], &c[2])?;
            tri = tri.max((1.0 + nf * d) / ((1.0 + nf * dz) * (1.0 + nf * dyz)));
        }
        st.record(
            "geometry",
            Check::at_most("chord_identity", chord, t.chord_tol),
        );
        st.record(
            "geometry",
            Check::at_most("quasi_triangle", tri, 1.0 + t.triangle_slack),
        );
        let set = ctx("geometry", geometry::maximal_separated_set(0.5, dim, seed))?;
        let cov = set.check(&geometry::verification_grid(dim)?);
        st.record(
            "geometry",
            Check::at_least("separation_margin", cov.min_pairwise - 0.5, 0.0),
        );
        st.record(
            "geometry",
            Check::at_most("covering_radius", cov.max_cover_dist, 0.5),
        );
        st.record(
            "geometry",
            Check::at_least("min_overlap", cov.min_overlap as f64, 1.0),
        );
        artifacts.push((
            "separated_set.csv".to_string(),
            Table::from_csv(&set.to_csv()),
        ));

        let jw = Weight::jacobi(1.0)?;
        let mut whole: f64 = 0.0;
        for x in [Point::origin(dim), Point::on_axis(dim, 0, 0.7)?] {
            let m = ctx(
                "weights",
                weights::ball_measure_default(&jw, &x, std::f64::consts::PI),
            )?;
            whole = whole.max((m / jw.total_mass(dim) - 1.0).abs());
        }
        st.record(
            "weights",
            Check::at_most("whole_ball_measure", whole, t.moment_tol),
        );

        let rule = ctx("quadrature", QuadratureRule::for_weight(w, dim, 10))?;
        let mut moment: f64 = 0.0;
        for alpha in multi_indices(10, dim) {
            let exact = w.moment(&alpha, dim);
            let got = rule.integrate(|x| {
                x.coords()
                    .iter()
                    .zip(&alpha)
                    .map(|(v, a)| v.powi(*a as i32))
                    .product()
            });
            moment = moment.max((got - exact).abs() / w.total_mass(dim));
        }
        st.record(
            "quadrature",
            Check::at_most("moments_deg10", moment, t.moment_tol),
        );

        let basis = ctx("polyspace", OrthoBasis::new(8, w, dim))?;
        let gram = ctx(
            "polyspace",
            basis.verify_gram(&independent_rule(w, dim, 8)?),
        )?;
        st.record(
            "polyspace",
            Check::at_most("gram_independent", gram, t.gram_tol),
        );

        let probes = kernel_sample_points(6, dim, seed)?;
        let kc = ctx(
            "kernels",
            kernel_checks(6, 0.5, dim, dim as f64 + 1.0, seed),
        )?;
        st.record(
            "kernels",
            Check::at_most("routes", kc.routes, t.kernel_routes_tol),
        );
        st.record(
            "kernels",
            Check::below("reproducing", kc.reproducing, t.reproducing_tol),
        );
        st.record(
            "kernels",
            Check::below("derivative", kc.derivative, t.derivative_tol),
        );

        let problem = ctx("christoffel", LpProblem::new(6, 2.0, w, dim))?;
        let mut lp_gap: f64 = 0.0;
        for x in &probes {
            let exact = christoffel_l2(problem.basis(), x)?;
            let solved = ctx("christoffel", problem.solve(x))?.value;
            lp_gap = lp_gap.max((solved - exact).abs() / exact);
        }
        st.record(
            "christoffel",
            Check::at_most("p2_matches_l2", lp_gap, t.lp_p2_match_tol),
        );

        let half = Weight::jacobi(0.5)?;
        let setup = ctx("markov", MarkovSetup::new(1, &half, 2))?;
        let worst = markov::worst_l2(&setup)?.value;
        let trace = markov::trace_formula(&setup)?;
        st.record(
            "markov",
            Check::at_most("hand_worst_l2", (worst - 2.0).abs(), t.hand_value_tol),
        );
        st.record(
            "markov",
            Check::at_most(
                "hand_trace",
                (trace.matrix_traces[0] - 4.0).abs(),
                t.hand_value_tol,
            ),
        );
        let setup = ctx("markov", MarkovSetup::new(6, w, dim))?;
        let rep = ctx("markov", markov::trace_formula(&setup))?;
        st.record(
            "markov",
            Check::at_most("trace_identity", rep.max_rel_diff, t.trace_rel_tol),
        );
    }
    b.artifacts = artifacts;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn table_appends_hash() {
        let mut t = Table::new("a,b");
        t.push("1,2".into());
        assert_eq!(t.render("h"), "a,b,config_hash\n1,2,h\n");
    }

    #[test]
    fn fit_reader_handles_headers() {
        let pts = read_fit_points("n,value\n2,4\n3,9\n").unwrap();
        assert_eq!(pts, vec![(2.0, 4.0), (3.0, 9.0)]);
        let pts = read_fit_points("2,4\n3,9\n").unwrap();
        assert_eq!(pts.len(), 2);
        let pts =
            read_fit_points("n,p,weight,method,value,stderr\n4,2,jacobi:mu=0.5,x,16,0\n").unwrap();
        assert_eq!(pts, vec![(4.0, 16.0)]);
        assert!(read_fit_points("n,value\n2,x\n").is_err());
        let mut row = String::from("n,p,weight,method,value,stderr\n");
        let w = Weight::product(vec![0.5, 0.5], 0.5).unwrap();
        markov::csv_row(&mut row, 3, 2.0, &w, "monte-carlo", 7.5, 0.1);
        assert_eq!(read_fit_points(&row).unwrap(), vec![(3.0, 7.5)]);
    }

    #[test]
    fn fit_of_squares_has_slope_two() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("n,value\n");
        for n in 2..20 {
            csv.push_str(&format!("{n},{}\n", n * n));
        }
        std::fs::write(dir.path().join("sq.csv"), csv).unwrap();
        let cfg = parse_config("experiment = fit\ninput = sq.csv").unwrap();
        let opts = RunOptions {
            base_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let rec = run(&cfg, &opts).unwrap();
        assert!((rec.summary["slope"].as_f64().unwrap() - 2.0).abs() < 1e-12);
        assert!(rec.passed());
    }

    #[test]
    fn worst_rows_and_hash() {
        let cfg = parse_config("experiment = worst\nn = 2..5\np = 2").unwrap();
        let rec = run(&cfg, &RunOptions::default()).unwrap();
        // eigen-exact and lifted row per n
        assert_eq!(rec.table.rows.len(), 8);
        let csv = rec.csv();
        assert!(csv.starts_with("n,p,weight,method,value,stderr,config_hash\n"));
        assert!(csv.lines().skip(1).all(|l| l.ends_with(&cfg.hash())));
        assert!(rec.summary.contains_key("slope_p2"));
    }

    #[test]
    fn usage_errors_are_classified() {
        let cfg = parse_config("experiment = kernel-check\nweight = step:a=0.5;c=2").unwrap();
        let e = run(&cfg, &RunOptions::default()).unwrap_err();
        assert!(e.is_usage(), "{e}");
        let cfg = parse_config("experiment = fit").unwrap();
        assert!(run(&cfg, &RunOptions::default()).unwrap_err().is_usage());
    }

    #[test]
    fn dump_rule_artifact() {
        let cfg = parse_config("experiment = fit\ninput = missing.csv").unwrap();
        assert!(run(
            &cfg,
            &RunOptions {
                dump_rule: true,
                base_dir: None
            }
        )
        .is_err());
        let cfg = parse_config("experiment = basis\nn = 3").unwrap();
        let rec = run(
            &cfg,
            &RunOptions {
                dump_rule: true,
                base_dir: None,
            },
        )
        .unwrap();
        let (name, table) = &rec.artifacts[0];
        assert_eq!(name, "rule.csv");
        assert!(table
            .header
            .starts_with("node_index,coord_0,coord_1,weight"));
        let total: f64 = table
            .rows
            .iter()
            .map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - cfg.weight.total_mass(2)).abs() < 1e-12);
        assert!(rec.passed());
    }
}
