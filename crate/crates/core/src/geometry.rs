//! Metric structure of the closed unit ball.
//!
//! Points of the ball are identified with points of the closed upper
//! hemisphere through `x -> (x, sqrt(1 - |x|^2))`. Under this lift the ball
//! distance `dist` is exactly the geodesic distance on the sphere, which is what
//! the grids and separated sets below rely on.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{invalid, Result};

/// Slack allowed when clamping a point back onto the closed ball.
pub const BALL_SLACK: f64 = 1e-12;

/// A point of the closed unit ball in dimension 2 or 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    c: [f64; 3],
    dim: usize,
}

impl Point {
    pub fn new(coords: &[f64]) -> Result<Self> {
        let dim = coords.len();
        if !(2..=3).contains(&dim) {
            return Err(invalid(format!(
                "point dimension must be 2 or 3, got {dim}"
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(invalid("point has non-finite coordinates"));
        }
        let mut c = [0.0; 3];
        c[..dim].copy_from_slice(coords);
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1.0 + BALL_SLACK {
            return Err(invalid(format!(
                "point lies outside the ball (|x| = {norm})"
            )));
        }
        if norm > 1.0 {
            for v in &mut c {
                *v /= norm;
            }
        }
        Ok(Self { c, dim })
    }

    /// Builds a point without validation; the caller guarantees `|x| <= 1`.
    pub(crate) fn from_array(c: [f64; 3], dim: usize) -> Self {
        Self { c, dim }
    }

    pub fn origin(dim: usize) -> Self {
        Self { c: [0.0; 3], dim }
    }

    /// `scale * e_axis`, with `axis` counted from zero.
    pub fn on_axis(dim: usize, axis: usize, scale: f64) -> Result<Self> {
        let mut c = vec![0.0; dim];
        if axis >= dim {
            return Err(invalid(format!(
                "axis {axis} out of range for dimension {dim}"
            )));
        }
        c[axis] = scale;
        Self::new(&c)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.c[..self.dim]
    }

    pub fn norm_sq(&self) -> f64 {
        self.coords().iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `sqrt(1 - |x|^2)`, the height of the lifted point.
    pub fn height(&self) -> f64 {
        (1.0 - self.norm_sq()).max(0.0).sqrt()
    }

    pub fn dot(&self, other: &Point) -> f64 {
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Lift to the upper hemisphere of `S^d` in `R^{d+1}`.
    pub fn lift(&self) -> Vec<f64> {
        let mut v = self.coords().to_vec();
        v.push(self.height());
        v
    }

    pub(crate) fn lift_array(&self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[..self.dim].copy_from_slice(self.coords());
        v[self.dim] = self.height();
        v
    }
}

fn check_dims(x: &Point, y: &Point) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn dist_unchecked(x: &Point, y: &Point) -> f64 {
    let arg = x.dot(y) + x.height() * y.height();
    if arg < 0.5 {
        return arg.clamp(-1.0, 1.0).acos();
    }
    // acos loses half the digits near 1; use the chord of the lifts instead
    let hd = x.height() - y.height();
    let chord_sq: f64 = x
        .coords()
        .iter()
        .zip(y.coords())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        + hd * hd;
    2.0 * (0.5 * chord_sq.sqrt()).min(1.0).asin()
}

/// `d(x,y) = arccos(x.y + sqrt(1-|x|^2) sqrt(1-|y|^2))`, in `[0, pi]`.
pub fn dist(x: &Point, y: &Point) -> Result<f64> {
    check_dims(x, y)?;
    Ok(dist_unchecked(x, y))
}

/// Chordal companion of `dist`; equals `2 sin(dist / 2)`.
pub fn dist_tilde(x: &Point, y: &Point) -> Result<f64> {
    check_dims(x, y)?;
    let diff: f64 = x
        .coords()
        .iter()
        .zip(y.coords())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let dh = x.height() - y.height();
    Ok((diff + dh * dh).sqrt())
}

/// Geodesic distance between unit vectors.
pub fn sphere_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for v in [a, b] {
        let n = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-10 {
            return Err(invalid(format!(
                "vector is not on the unit sphere (|v| = {n})"
            )));
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(s, t)| s * t).sum();
    Ok(dot.clamp(-1.0, 1.0).acos())
}

/// Quasi-uniform points on the full 2-sphere of the given angular spacing,
/// arranged on latitude rings.
fn sphere2_rings(spacing: f64) -> Vec<[f64; 3]> {
    let rings = ((std::f64::consts::PI / spacing).round() as usize).max(1);
    let step = std::f64::consts::PI / rings as f64;
    let mut out = Vec::new();
    for j in 0..=rings {
        let phi = j as f64 * step;
        let count = ((2.0 * std::f64::consts::PI * phi.sin() / step).round() as usize).max(1);
        let offset = if j % 2 == 0 { 0.0 } else { 0.5 };
        for k in 0..count {
            let psi = 2.0 * std::f64::consts::PI * (k as f64 + offset) / count as f64;
            out.push([phi.sin() * psi.cos(), phi.sin() * psi.sin(), phi.cos()]);
        }
    }
    out
}

/// Deterministic quasi-uniform grid of roughly `target` points on the closed
/// ball, built as a latitude grid on the closed upper hemisphere of `S^d` and
/// projected down. Includes the center and boundary points.
pub fn hemisphere_grid(dim: usize, target: usize) -> Result<Vec<Point>> {
    use std::f64::consts::PI;
    if target == 0 {
        return Err(invalid("grid size must be positive"));
    }
    let mut out = Vec::with_capacity(target + target / 4);
    match dim {
        2 => {
            // hemisphere area 2 pi ~ target * spacing^2
            let spacing = (2.0 * PI / target as f64).sqrt();
            let rings = ((PI / 2.0 / spacing).round() as usize).max(1);
            let step = PI / 2.0 / rings as f64;
            for j in 0..=rings {
                let phi = j as f64 * step;
                let count = ((2.0 * PI * phi.sin() / step).round() as usize).max(1);
                let offset = if j % 2 == 0 { 0.0 } else { 0.5 };
                for k in 0..count {
                    let psi = 2.0 * PI * (k as f64 + offset) / count as f64;
                    let r = phi.sin();
                    out.push(Point::from_array([r * psi.cos(), r * psi.sin(), 0.0], 2));
                }
            }
        }
        3 => {
            // upper half of S^3 has volume pi^2
            let spacing = (PI * PI / target as f64).cbrt();
            let shells = ((PI / 2.0 / spacing).round() as usize).max(1);
            let step = PI / 2.0 / shells as f64;
            for j in 0..=shells {
                let phi = j as f64 * step;
                let r = phi.sin();
                if j == 0 {
                    out.push(Point::origin(3));
                    continue;
                }
                for v in sphere2_rings(step / r) {
                    out.push(Point::from_array([r * v[0], r * v[1], r * v[2]], 3));
                }
            }
        }
        _ => return Err(invalid(format!("dimension must be 2 or 3, got {dim}"))),
    }
    Ok(out)
}

/// Default verification-grid size: 1e4 points for d = 2 and 1e5 for d = 3.
pub fn default_grid_size(dim: usize) -> usize {
    if dim == 2 {
        10_000
    } else {
        100_000
    }
}

/// `count` points uniform on the ball (w.r.t. Lebesgue measure), drawn from
/// the stream `(seed, stream_id)`.
pub fn random_ball_points(
    count: usize,
    dim: usize,
    seed: u64,
    stream_id: u64,
) -> Result<Vec<Point>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    if !(2..=3).contains(&dim) {
        return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
    }
    let mut rng = crate::rng::stream(seed, stream_id);
    (0..count)
        .map(|_| {
            let g: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = g
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            let r = rng.random::<f64>().powf(1.0 / dim as f64);
            let c: Vec<f64> = g.iter().map(|v| v / norm * r).collect();
            Point::new(&c)
        })
        .collect()
}

pub fn verification_grid(dim: usize) -> Result<Vec<Point>> {
    hemisphere_grid(dim, default_grid_size(dim))
}

/// An epsilon-separated subset of the ball whose epsilon-balls cover it.
#[derive(Debug, Clone)]
pub struct SeparatedSet {
    pub epsilon: f64,
    pub centers: Vec<Point>,
}

/// Result of checking a separated set against a probe grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageReport {
    pub min_pairwise: f64,
    /// Largest distance from a probe point to its nearest center.
    pub max_cover_dist: f64,
    pub min_overlap: usize,
    pub max_overlap: usize,
}

impl CoverageReport {
    pub fn is_valid(&self, epsilon: f64) -> bool {
        self.min_pairwise >= epsilon - 1e-12
            && self.max_cover_dist <= epsilon + 1e-12
            && self.min_overlap >= 1
    }
}

impl SeparatedSet {
    pub fn dim(&self) -> usize {
        self.centers.first().map(Point::dim).unwrap_or(0)
    }

    pub fn check(&self, grid: &[Point]) -> CoverageReport {
        let eps = self.epsilon;
        let mut min_pairwise = f64::INFINITY;
        for (i, a) in self.centers.iter().enumerate() {
            for b in &self.centers[i + 1..] {
                min_pairwise = min_pairwise.min(dist_unchecked(a, b));
            }
        }
        let per_probe: Vec<(f64, usize)> = grid
            .par_iter()
            .map(|x| {
                let mut nearest = f64::INFINITY;
                let mut count = 0;
                for c in &self.centers {
                    let t = dist_unchecked(x, c);
                    nearest = nearest.min(t);
                    if t <= eps + 1e-12 {
                        count += 1;
                    }
                }
                (nearest, count)
            })
            .collect();
        CoverageReport {
            min_pairwise,
            max_cover_dist: per_probe.iter().map(|p| p.0).fold(0.0, f64::max),
            min_overlap: per_probe.iter().map(|p| p.1).min().unwrap_or(0),
            max_overlap: per_probe.iter().map(|p| p.1).max().unwrap_or(0),
        }
    }

    /// CSV with header `epsilon,center_index,coord_0,...,coord_{d-1}`.
    pub fn to_csv(&self) -> String {
        let dim = self.dim();
        let mut s = String::from("epsilon,center_index");
        for k in 0..dim {
            let _ = write!(s, ",coord_{k}");
        }
        s.push('\n');
        for (i, c) in self.centers.iter().enumerate() {
            let _ = write!(s, "{},{}", self.epsilon, i);
            for v in c.coords() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

fn greedy_insert(centers: &mut Vec<Point>, candidates: &[Point], epsilon: f64) {
    for cand in candidates {
        if centers.iter().all(|c| dist_unchecked(c, cand) >= epsilon) {
            centers.push(*cand);
        }
    }
}

/// Greedy maximal epsilon-separated set.
///
/// Candidates come from a hemisphere grid at spacing about `epsilon / 4`,
/// shuffled by `seed`; a completion pass over `verification` (in grid order)
/// then adds every probe point left uncovered, so the result is maximal with
/// respect to both point sets.
pub fn maximal_separated_set_with(
    epsilon: f64,
    dim: usize,
    seed: u64,
    verification: &[Point],
) -> Result<SeparatedSet> {
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let eps = epsilon.min(std::f64::consts::PI);
    let spacing = eps / 4.0;
    let target = match dim {
        2 => (2.0 * std::f64::consts::PI / (spacing * spacing)) as usize,
        _ => (std::f64::consts::PI.powi(2) / spacing.powi(3)) as usize,
    }
    .clamp(64, 200_000);
    let mut candidates = hemisphere_grid(dim, target)?;
    let mut rng = crate::rng::stream(seed, 0x5e9a);
    candidates.shuffle(&mut rng);
    let mut centers = Vec::new();
    greedy_insert(&mut centers, &candidates, epsilon);
    greedy_insert(&mut centers, verification, epsilon);
    Ok(SeparatedSet { epsilon, centers })
}

/// Maximal epsilon-separated set completed against the default verification grid.
pub fn maximal_separated_set(epsilon: f64, dim: usize, seed: u64) -> Result<SeparatedSet> {
    let grid = verification_grid(dim)?;
    maximal_separated_set_with(epsilon, dim, seed, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn p(c: &[f64]) -> Point {
        Point::new(c).unwrap()
    }

    #[test]
    fn dist_examples() {
        let x = p(&[0.3, -0.2]);
        assert_eq!(dist(&x, &x).unwrap(), 0.0);
        assert!((dist(&Point::origin(2), &p(&[1.0, 0.0])).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!((dist(&p(&[1.0, 0.0]), &p(&[-1.0, 0.0])).unwrap() - PI).abs() < 1e-15);
    }

    #[test]
    fn dist_tilde_examples() {
        let x = p(&[0.1, 0.2, 0.3]);
        assert_eq!(dist_tilde(&x, &x).unwrap(), 0.0);
        assert!((dist_tilde(&p(&[1.0, 0.0]), &p(&[-1.0, 0.0])).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(dist(&Point::origin(2), &Point::origin(3)).is_err());
        assert!(dist_tilde(&Point::origin(2), &Point::origin(3)).is_err());
        assert!(sphere_dist(&[1.0, 0.0], &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn points_outside_ball_are_rejected_and_drift_is_clamped() {
        assert!(Point::new(&[1.0, 1e-3]).is_err());
        let q = p(&[1.0 + 5e-13, 0.0]);
        assert!(q.norm() <= 1.0);
        assert!(Point::new(&[0.0]).is_err());
        assert!(Point::new(&[0.0; 4]).is_err());
    }

    #[test]
    fn sphere_dist_examples() {
        let north = [0.0, 0.0, 1.0];
        assert_eq!(sphere_dist(&north, &north).unwrap(), 0.0);
        let eq = [1.0, 0.0, 0.0];
        assert!((sphere_dist(&north, &eq).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!(sphere_dist(&[0.5, 0.0, 0.0], &eq).is_err());
    }

    #[test]
    fn grid_sizes_are_close_to_target() {
        let g2 = hemisphere_grid(2, 10_000).unwrap();
        assert!((8_000..12_500).contains(&g2.len()), "{}", g2.len());
        let g3 = hemisphere_grid(3, 20_000).unwrap();
        assert!((14_000..28_000).contains(&g3.len()), "{}", g3.len());
        assert!(g2.iter().all(|x| x.norm() <= 1.0));
        assert!(g2.iter().any(|x| (x.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn separated_set_of_diameter_is_a_single_point() {
        let s = maximal_separated_set(PI, 2, 7).unwrap();
        // every pair of points is at distance <= pi; only exact antipodes on
        // the boundary reach pi, and greedy insertion may pick one such pair
        assert!(s.centers.len() <= 2, "{}", s.centers.len());
        let s = maximal_separated_set(PI + 0.1, 2, 7).unwrap();
        assert_eq!(s.centers.len(), 1);
    }

    #[test]
    fn separated_set_half_pi_covers() {
        let grid = verification_grid(2).unwrap();
        let s = maximal_separated_set_with(PI / 2.0, 2, 3, &grid).unwrap();
        assert!((2..=20).contains(&s.centers.len()), "{}", s.centers.len());
        // brute-force covering on the full probe grid
        for x in &grid {
            assert!(s
                .centers
                .iter()
                .any(|c| dist_unchecked(c, x) <= PI / 2.0 + 1e-12));
        }
    }

    #[test]
    fn separated_set_rejects_nonpositive_epsilon() {
        assert!(maximal_separated_set(0.0, 2, 1).is_err());
        assert!(maximal_separated_set(-1.0, 2, 1).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let s = SeparatedSet {
            epsilon: 0.5,
            centers: vec![p(&[0.0, 0.0]), p(&[0.5, 0.1])],
        };
        let csv = s.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epsilon,center_index,coord_0,coord_1"
        );
        assert_eq!(lines.next().unwrap(), "0.5,0,0,0");
        assert_eq!(csv.lines().count(), 3);
    }
}
