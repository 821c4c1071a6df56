//! Every pass/fail threshold used by the CLI checks and the acceptance suite.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub worst_slope_min: f64,
    pub worst_slope_max: f64,
    pub worst_ratio_window: f64,
    pub lifted_slope_min: f64,
    pub lifted_slope_max: f64,
    pub lifted_dominance_tol: f64,
    pub average_slope_max: f64,
    pub average_ratio_min: f64,
    pub average_ratio_max: f64,
    pub trace_rel_tol: f64,
    pub christoffel_window_p2: f64,
    pub christoffel_window_other: f64,
    pub reproducing_tol: f64,
    pub derivative_tol: f64,
    pub kernel_routes_tol: f64,
    pub kernel_symmetry_tol: f64,
    pub partial_l1_window: f64,
    pub bounded_over_n_window: f64,
    pub needle_nonneg: f64,
    pub needle_window: f64,
    pub chord_tol: f64,
    pub triangle_slack: f64,
    pub hand_value_tol: f64,
    pub gram_tol: f64,
    pub moment_tol: f64,
    pub lp_p2_match_tol: f64,
    pub overlap_ceiling_d2: usize,
    pub runtime_worst_secs: f64,
    pub runtime_sharpness_secs: f64,
    pub runtime_average_secs: f64,
    pub runtime_trace_secs: f64,
    pub runtime_christoffel_secs: f64,
    pub runtime_identities_secs: f64,
    pub runtime_partial_l1_secs: f64,
    pub runtime_needle_secs: f64,
    pub runtime_geometry_secs: f64,
}

pub const VERSION: u32 = 1;

pub const DEFAULTS: Thresholds = Thresholds {
    worst_slope_min: 1.85,
    worst_slope_max: 2.05,
    worst_ratio_window: 10.0,
    lifted_slope_min: 1.9,
    lifted_slope_max: 2.1,
    lifted_dominance_tol: 1e-6,
    average_slope_max: 1.6,
    average_ratio_min: 0.2,
    average_ratio_max: 5.0,
    trace_rel_tol: 1e-8,
    christoffel_window_p2: 50.0,
    christoffel_window_other: 1e3,
    reproducing_tol: 1e-8,
    derivative_tol: 1e-7,
    kernel_routes_tol: 1e-7,
    kernel_symmetry_tol: 1e-9,
    partial_l1_window: 20.0,
    bounded_over_n_window: 50.0,
    needle_nonneg: -1e-9,
    needle_window: 1e3,
    chord_tol: 1e-12,
    triangle_slack: 1e-12,
    hand_value_tol: 1e-10,
    gram_tol: 1e-8,
    moment_tol: 1e-10,
    lp_p2_match_tol: 1e-7,
    overlap_ceiling_d2: 30,
    runtime_worst_secs: 120.0,
    runtime_sharpness_secs: 180.0,
    runtime_average_secs: 300.0,
    runtime_trace_secs: 60.0,
    runtime_christoffel_secs: 300.0,
    runtime_identities_secs: 120.0,
    runtime_partial_l1_secs: 300.0,
    runtime_needle_secs: 180.0,
    runtime_geometry_secs: 60.0,
};

/// `max / min` of positive values; `inf` when empty or non-positive.
pub fn window(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.is_empty() || !(lo > 0.0) {
        return f64::INFINITY;
    }
    hi / lo
}
