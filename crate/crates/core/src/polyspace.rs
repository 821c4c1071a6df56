//! Polynomials on the ball, degree-graded orthonormal bases, differentiation
//! matrices and the operator `D_mu`.
//!
//! Bases are built by a block Stieltjes recurrence: the degree-`k` block is
//! obtained from the products `x_i P` with `P` in block `k - 1`, projected
//! (twice) against everything built so far and orthonormalized through the
//! eigendecomposition of their Gram matrix. The same recurrence
//! evaluates values, gradients and monomial coefficients, so no monomial
//! Gram matrix ever has to be formed.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::Point;
use crate::quadrature::QuadratureRule;
use crate::weights::{dirichlet_moment, Weight};

/// `binomial(n + d, d)`.
pub fn dim_pi(n: usize, d: usize) -> usize {
    let mut num = 1usize;
    for k in 1..=d {
        num = num * (n + k) / k;
    }
    num
}

/// All multi-indices with `|alpha| <= deg`, graded, and within a degree in
/// decreasing lexicographic order (`x_1^k` first).
pub fn multi_indices(deg: usize, d: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(dim_pi(deg, d));
    for k in 0..=deg {
        homogeneous(k as u32, d, &mut Vec::new(), &mut out);
    }
    out
}

fn homogeneous(k: u32, d: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == d {
        let mut a = prefix.clone();
        a.push(k);
        out.push(a);
        return;
    }
    for first in (0..=k).rev() {
        prefix.push(first);
        homogeneous(k - first, d, prefix, out);
        prefix.pop();
    }
}

/// `int_{B^d} x^alpha (1 - |x|^2)^{mu - 1/2} dx`.
pub fn jacobi_moment(alpha: &[u32], mu: f64, d: usize) -> f64 {
    dirichlet_moment(alpha, &vec![0.0; d], mu)
}

/// Polynomial in the monomial basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    dim: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Poly {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::monomial(vec![0; dim], c)
    }

    pub fn monomial(alpha: Vec<u32>, c: f64) -> Self {
        let mut p = Self::zero(alpha.len());
        if c != 0.0 {
            p.terms.insert(alpha, c);
        }
        p
    }

    pub fn from_terms(
        dim: usize,
        terms: impl IntoIterator<Item = (Vec<u32>, f64)>,
    ) -> Result<Self> {
        let mut p = Self::zero(dim);
        for (alpha, c) in terms {
            if alpha.len() != dim {
                return Err(invalid(format!(
                    "multi-index {alpha:?} does not have dimension {dim}"
                )));
            }
            p.add_term(alpha, c);
        }
        Ok(p)
    }

    fn add_term(&mut self, alpha: Vec<u32>, c: f64) {
        if c == 0.0 {
            return;
        }
        use std::collections::btree_map::Entry;
        match self.terms.entry(alpha) {
            Entry::Vacant(e) => {
                e.insert(c);
            }
            Entry::Occupied(mut e) => {
                *e.get_mut() += c;
                if *e.get() == 0.0 {
                    e.remove();
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u32>, f64)> {
        self.terms.iter().map(|(k, v)| (k, *v))
    }

    pub fn coefficient(&self, alpha: &[u32]) -> f64 {
        self.terms.get(alpha).copied().unwrap_or(0.0)
    }

    /// Total degree; `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.terms
            .keys()
            .map(|a| a.iter().sum::<u32>() as usize)
            .max()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut p = Self::zero(self.dim);
        for (a, v) in &self.terms {
            p.add_term(a.clone(), c * v);
        }
        p
    }

    pub fn add(&self, other: &Poly) -> Result<Self> {
        self.same_dim(other)?;
        let mut p = self.clone();
        for (a, v) in &other.terms {
            p.add_term(a.clone(), *v);
        }
        Ok(p)
    }

    pub fn sub(&self, other: &Poly) -> Result<Self> {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Poly) -> Result<Self> {
        self.same_dim(other)?;
        let mut p = Self::zero(self.dim);
        for (a, u) in &self.terms {
            for (b, v) in &other.terms {
                let c: Vec<u32> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                p.add_term(c, u * v);
            }
        }
        Ok(p)
    }

    fn same_dim(&self, other: &Poly) -> Result<()> {
        if self.dim != other.dim {
            return Err(invalid(format!(
                "polynomial dimensions differ: {} vs {}",
                self.dim, other.dim
            )));
        }
        Ok(())
    }

    pub fn differentiate(&self, axis: usize) -> Result<Self> {
        if axis >= self.dim {
            return Err(invalid(format!(
                "axis {axis} out of range for dimension {}",
                self.dim
            )));
        }
        let mut p = Self::zero(self.dim);
        for (a, v) in &self.terms {
            if a[axis] > 0 {
                let mut b = a.clone();
                b[axis] -= 1;
                p.add_term(b, v * a[axis] as f64);
            }
        }
        Ok(p)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(invalid(format!(
                "point has dimension {} but polynomial has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self
            .terms
            .iter()
            .map(|(a, v)| {
                v * a
                    .iter()
                    .zip(x)
                    .map(|(&e, t)| t.powi(e as i32))
                    .product::<f64>()
            })
            .sum())
    }

    /// `D_mu P = Lap P - (x . grad)^2 P - (2 mu + d - 1) (x . grad) P`.
    pub fn apply_dmu(&self, mu: f64) -> Self {
        let d = self.dim as f64;
        let mut p = Self::zero(self.dim);
        for (a, v) in &self.terms {
            let k = a.iter().sum::<u32>() as f64;
            p.add_term(a.clone(), -v * (k * k + (2.0 * mu + d - 1.0) * k));
            for i in 0..self.dim {
                if a[i] >= 2 {
                    let mut b = a.clone();
                    b[i] -= 2;
                    p.add_term(b, v * (a[i] * (a[i] - 1)) as f64);
                }
            }
        }
        p
    }

    /// Largest absolute coefficient.
    pub fn max_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Options for basis construction.
#[derive(Debug, Clone, Copy, Default)]
pub struct BasisOptions {
    /// Permute the candidate products of each block and rotate each block by a
    /// random orthogonal matrix: a different orthonormal basis of the same
    /// graded spaces.
    pub shuffle_seed: Option<u64>,
}

/// Smallest admissible singular value of a candidate block, relative to the
/// largest candidate norm.
const CONDITIONING_RATIO: f64 = 1e-7;

#[derive(Debug, Clone)]
struct Block {
    start: usize,
    size: usize,
    parent: Vec<usize>,
    axis: Vec<usize>,
    /// `start x m`: projection of the `m` candidates onto earlier elements.
    h: DMatrix<f64>,
    /// `m x size`: orthonormalizing transform.
    s: DMatrix<f64>,
}

/// Degree-graded orthonormal basis of `Pi_n^d` in `L_{2,w}`.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    weight: Weight,
    dim: usize,
    degree: usize,
    c0: f64,
    blocks: Vec<Block>,
    gram_residual: f64,
    rule: Arc<QuadratureRule>,
}

/// Builds the basis with `rule`, which must integrate degree `2n` exactly
/// against `w`.
pub fn orthonormal_basis(n: usize, w: &Weight, rule: &QuadratureRule) -> Result<OrthoBasis> {
    OrthoBasis::with_rule(n, w, Arc::new(rule.clone()), BasisOptions::default())
}

impl OrthoBasis {
    /// Builds the basis on the default exact rule for `w`.
    pub fn new(n: usize, w: &Weight, dim: usize) -> Result<Self> {
        Self::with_options(n, w, dim, BasisOptions::default())
    }

    pub fn with_options(n: usize, w: &Weight, dim: usize, opts: BasisOptions) -> Result<Self> {
        let rule = QuadratureRule::for_weight(w, dim, 2 * n + 2)?;
        Self::with_rule(n, w, Arc::new(rule), opts)
    }

    pub fn with_rule(
        n: usize,
        w: &Weight,
        rule: Arc<QuadratureRule>,
        opts: BasisOptions,
    ) -> Result<Self> {
        if rule.target != *w {
            return Err(invalid(format!(
                "rule integrates against {} but the basis weight is {w}",
                rule.target
            )));
        }
        if rule.exactness < 2 * n {
            return Err(invalid(format!(
                "rule exactness {} is below 2n = {}",
                rule.exactness,
                2 * n
            )));
        }
        let dim = rule.dim;
        w.check_dim(dim)?;
        let npts = rule.len();
        let total = dim_pi(n, dim);
        if npts < total {
            return Err(invalid(format!(
                "rule has {npts} nodes, fewer than dim Pi_n = {total}"
            )));
        }
        let sqw = DVector::from_iterator(npts, rule.weights.iter().map(|w| w.sqrt()));
        let x = coord_matrix(&rule.nodes, dim);
        // rows scaled by sqrt(weight) so inner products are plain dot products
        let mut v = DMatrix::<f64>::zeros(npts, total);
        let mass: f64 = rule.weights.iter().sum();
        let c0 = 1.0 / mass.sqrt();
        v.column_mut(0).copy_from(&(&sqw * c0));
        let mut rng = opts.shuffle_seed.map(|s| crate::rng::stream(s, 0xba5e));
        let mut blocks = Vec::with_capacity(n);
        let mut prev_start = 0usize;
        let mut prev_size = 1usize;
        for k in 1..=n {
            let start = dim_pi(k - 1, dim);
            let size = dim_pi(k, dim) - start;
            let mut cand: Vec<(usize, usize)> = (0..dim)
                .flat_map(|a| (prev_start..prev_start + prev_size).map(move |p| (p, a)))
                .collect();
            if let Some(r) = rng.as_mut() {
                cand.shuffle(r);
            }
            let m = cand.len();
            let mut c = DMatrix::<f64>::zeros(npts, m);
            for (j, &(p, a)) in cand.iter().enumerate() {
                let mut col = c.column_mut(j);
                for q in 0..npts {
                    col[q] = x[(q, a)] * v[(q, p)];
                }
            }
            let norms0: Vec<f64> = (0..m).map(|j| c.column(j).norm()).collect();
            // in exact arithmetic only the two previous blocks contribute;
            // the second, full pass restores orthogonality lost to rounding
            let lo = if k >= 3 { dim_pi(k - 3, dim) } else { 0 };
            let local = v.columns(lo, start - lo);
            let h_local = local.transpose() * &c;
            c -= local * &h_local;
            let prev = v.columns(0, start);
            let mut h = prev.transpose() * &c;
            c -= prev * &h;
            {
                let mut rows = h.rows_mut(lo, start - lo);
                rows += &h_local;
            }
            // orthonormalize through the dominant eigenvectors of the
            // candidate Gram matrix; this keeps |S| near 1/sigma_min of the
            // whole candidate set, which bounds error growth when the
            // recurrence is evaluated away from the nodes
            let g = c.transpose() * &c;
            let eig = nalgebra::SymmetricEigen::new(g);
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let scale = norms0.iter().cloned().fold(0.0, f64::max);
            let ratio = eig.eigenvalues[order[size - 1]].max(0.0).sqrt() / scale;
            if !(ratio >= CONDITIONING_RATIO) {
                return Err(Error::Conditioning { block: k, ratio });
            }
            let mut s = DMatrix::from_fn(m, size, |i, j| {
                eig.eigenvectors[(i, order[j])] / eig.eigenvalues[order[j]].sqrt()
            });
            let mut qmat = &c * &s;
            // second orthonormalization pass
            let g2 = qmat.transpose() * &qmat;
            let l2 = g2
                .cholesky()
                .ok_or(Error::Conditioning { block: k, ratio })?
                .l();
            let l2_inv_t = l2
                .try_inverse()
                .ok_or(Error::Conditioning { block: k, ratio })?
                .transpose();
            s = &s * &l2_inv_t;
            qmat = &qmat * &l2_inv_t;
            if let Some(r) = rng.as_mut() {
                let rot = random_orthogonal(size, r);
                s = &s * &rot;
                qmat = &qmat * &rot;
            }
            v.columns_mut(start, size).copy_from(&qmat);
            blocks.push(Block {
                start,
                size,
                parent: cand.iter().map(|c| c.0).collect(),
                axis: cand.iter().map(|c| c.1).collect(),
                h,
                s,
            });
            prev_start = start;
            prev_size = size;
        }
        let gram = v.transpose() * &v;
        let gram_residual = max_deviation_from_identity(&gram);
        Ok(Self {
            weight: w.clone(),
            dim,
            degree: n,
            c0,
            blocks,
            gram_residual,
            rule,
        })
    }

    pub fn weight(&self) -> &Weight {
        &self.weight
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        dim_pi(self.degree, self.dim)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `max |Gram - I|` on the construction rule.
    pub fn gram_residual(&self) -> f64 {
        self.gram_residual
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    /// Index range of the degree-`k` block.
    pub fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        if k == 0 {
            0..1
        } else {
            dim_pi(k - 1, self.dim)..dim_pi(k, self.dim)
        }
    }

    /// Degree of element `j`.
    pub fn element_degree(&self, j: usize) -> usize {
        (0..=self.degree)
            .find(|&k| self.block_range(k).contains(&j))
            .unwrap_or(self.degree)
    }

    /// The basis of `Pi_k` formed by the first `dim_pi(k)` elements.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k > self.degree {
            return Err(invalid(format!(
                "cannot truncate degree {} basis to degree {k}",
                self.degree
            )));
        }
        let mut out = self.clone();
        out.degree = k;
        out.blocks.truncate(k);
        Ok(out)
    }

    /// Values of all elements: `npts x N`.
    pub fn eval_batch(&self, points: &[Point]) -> Result<DMatrix<f64>> {
        Ok(self.batched(points, false)?.0)
    }

    /// Values and gradients: `(values, [d/dx_i values])`, each `npts x N`.
    pub fn eval_with_grad(&self, points: &[Point]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        self.batched(points, true)
    }

    pub fn eval(&self, x: &Point) -> Result<DVector<f64>> {
        let v = self.eval_batch(std::slice::from_ref(x))?;
        Ok(v.row(0).transpose())
    }

    fn batched(&self, points: &[Point], grad: bool) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        if let Some(p) = points.iter().find(|p| p.dim() != self.dim) {
            return Err(invalid(format!(
                "point of dimension {} for a basis in dimension {}",
                p.dim(),
                self.dim
            )));
        }
        const CHUNK: usize = 256;
        let parts: Vec<(DMatrix<f64>, Vec<DMatrix<f64>>)> = points
            .par_chunks(CHUNK)
            .map(|chunk| self.eval_chunk(chunk, grad))
            .collect();
        let total = self.len();
        let mut vals = DMatrix::<f64>::zeros(points.len(), total);
        let mut grads = if grad {
            vec![DMatrix::<f64>::zeros(points.len(), total); self.dim]
        } else {
            Vec::new()
        };
        let mut row = 0;
        for (v, g) in parts {
            let r = v.nrows();
            vals.rows_mut(row, r).copy_from(&v);
            for (dst, src) in grads.iter_mut().zip(&g) {
                dst.rows_mut(row, r).copy_from(src);
            }
            row += r;
        }
        Ok((vals, grads))
    }

    fn eval_chunk(&self, points: &[Point], grad: bool) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let npts = points.len();
        let total = self.len();
        let x = coord_matrix(points, self.dim);
        let mut v = DMatrix::<f64>::zeros(npts, total);
        v.column_mut(0).fill(self.c0);
        let mut g = if grad {
            vec![DMatrix::<f64>::zeros(npts, total); self.dim]
        } else {
            Vec::new()
        };
        for b in &self.blocks {
            let m = b.parent.len();
            let mut c = DMatrix::<f64>::zeros(npts, m);
            for j in 0..m {
                let (p, a) = (b.parent[j], b.axis[j]);
                for q in 0..npts {
                    c[(q, j)] = x[(q, a)] * v[(q, p)];
                }
            }
            for (i, gi) in g.iter_mut().enumerate() {
                let mut cg = DMatrix::<f64>::zeros(npts, m);
                for j in 0..m {
                    let (p, a) = (b.parent[j], b.axis[j]);
                    for q in 0..npts {
                        let own = if a == i { v[(q, p)] } else { 0.0 };
                        cg[(q, j)] = own + x[(q, a)] * gi[(q, p)];
                    }
                }
                cg -= gi.columns(0, b.start) * &b.h;
                gi.columns_mut(b.start, b.size).copy_from(&(cg * &b.s));
            }
            c -= v.columns(0, b.start) * &b.h;
            v.columns_mut(b.start, b.size).copy_from(&(c * &b.s));
        }
        (v, g)
    }

    /// Monomial coefficients of all elements: rows follow `multi_indices(n, d)`.
    pub fn coefficient_matrix(&self) -> DMatrix<f64> {
        let monos = multi_indices(self.degree, self.dim);
        let index: HashMap<&[u32], usize> = monos
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_slice(), i))
            .collect();
        // shift[a][m] = index of monos[m] + e_a
        let shift: Vec<Vec<Option<usize>>> = (0..self.dim)
            .map(|a| {
                monos
                    .iter()
                    .map(|m| {
                        let mut b = m.clone();
                        b[a] += 1;
                        index.get(b.as_slice()).copied()
                    })
                    .collect()
            })
            .collect();
        let total = self.len();
        let mut k = DMatrix::<f64>::zeros(monos.len(), total);
        k[(0, 0)] = self.c0;
        for b in &self.blocks {
            let mut c = DMatrix::<f64>::zeros(monos.len(), b.parent.len());
            for j in 0..b.parent.len() {
                let (p, a) = (b.parent[j], b.axis[j]);
                for m in 0..monos.len() {
                    let coef = k[(m, p)];
                    if coef != 0.0 {
                        let t = shift[a][m].expect("degree stays within n");
                        c[(t, j)] += coef;
                    }
                }
            }
            c -= k.columns(0, b.start) * &b.h;
            k.columns_mut(b.start, b.size).copy_from(&(c * &b.s));
        }
        k
    }

    /// Element `j` as an explicit polynomial.
    pub fn element_poly(&self, j: usize) -> Result<Poly> {
        if j >= self.len() {
            return Err(invalid(format!("element {j} out of range {}", self.len())));
        }
        let k = self.coefficient_matrix();
        let monos = multi_indices(self.degree, self.dim);
        Poly::from_terms(self.dim, monos.into_iter().zip(k.column(j).iter().copied()))
    }

    pub fn elements(&self) -> Vec<Poly> {
        let k = self.coefficient_matrix();
        let monos = multi_indices(self.degree, self.dim);
        (0..self.len())
            .map(|j| {
                Poly::from_terms(
                    self.dim,
                    monos.iter().cloned().zip(k.column(j).iter().copied()),
                )
                .expect("dimensions agree")
            })
            .collect()
    }

    /// `max |Gram - I|` recomputed with another rule for the same weight.
    pub fn verify_gram(&self, rule: &QuadratureRule) -> Result<f64> {
        if rule.target != self.weight {
            return Err(invalid("verification rule has a different weight"));
        }
        if rule.exactness < 2 * self.degree {
            return Err(invalid("verification rule is not exact for degree 2n"));
        }
        let v = self.eval_batch(&rule.nodes)?;
        let sqw = DVector::from_iterator(rule.len(), rule.weights.iter().map(|w| w.sqrt()));
        let vw = DMatrix::from_fn(v.nrows(), v.ncols(), |q, j| v[(q, j)] * sqw[q]);
        Ok(max_deviation_from_identity(&(vw.transpose() * &vw)))
    }

    /// `sum_j P_j(x)^2`.
    pub fn christoffel_sum(&self, points: &[Point]) -> Result<Vec<f64>> {
        let v = self.eval_batch(points)?;
        Ok(v.row_iter().map(|r| r.norm_squared()).collect())
    }

    /// CSV with rows `element_index,alpha_0,...,coefficient`.
    pub fn to_csv(&self) -> String {
        let k = self.coefficient_matrix();
        let monos = multi_indices(self.degree, self.dim);
        let mut s = String::from("element_index");
        for i in 0..self.dim {
            let _ = write!(s, ",alpha_{i}");
        }
        s.push_str(",coefficient\n");
        for j in 0..self.len() {
            for (m, alpha) in monos.iter().enumerate() {
                let c = k[(m, j)];
                if c != 0.0 {
                    let _ = write!(s, "{j}");
                    for a in alpha {
                        let _ = write!(s, ",{a}");
                    }
                    let _ = writeln!(s, ",{c:.17e}");
                }
            }
        }
        s
    }
}

fn random_orthogonal(n: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

fn coord_matrix(points: &[Point], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), dim, |q, i| points[q].coords()[i])
}

fn max_deviation_from_identity(g: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// `D_i`: entry `(k, j) = <d_i P_j, P_k>_{2,w}`, shape `N_{n-1} x N_n`.
#[derive(Debug, Clone)]
pub struct DiffMatrix {
    pub axis: usize,
    pub matrix: DMatrix<f64>,
}

impl DiffMatrix {
    pub fn apply(&self, a: &DVector<f64>) -> DVector<f64> {
        &self.matrix * a
    }
}

/// Differentiation matrix for axis `axis` (0-based) between the degree-`n`
/// basis and a degree-`n - 1` basis of the same weight.
pub fn differentiation_matrix(
    basis_n: &OrthoBasis,
    basis_n_minus_1: &OrthoBasis,
    axis: usize,
) -> Result<DiffMatrix> {
    differentiation_matrices(basis_n, basis_n_minus_1)?
        .into_iter()
        .nth(axis)
        .ok_or_else(|| invalid(format!("axis {axis} out of range")))
}

/// All `d` differentiation matrices at once.
pub fn differentiation_matrices(
    basis_n: &OrthoBasis,
    basis_n_minus_1: &OrthoBasis,
) -> Result<Vec<DiffMatrix>> {
    if basis_n.weight != basis_n_minus_1.weight || basis_n.dim != basis_n_minus_1.dim {
        return Err(invalid("bases belong to different weights or dimensions"));
    }
    if basis_n.degree == 0 || basis_n_minus_1.degree + 1 != basis_n.degree {
        return Err(invalid(format!(
            "basis degrees {} and {} do not differ by one",
            basis_n.degree, basis_n_minus_1.degree
        )));
    }
    let rule = basis_n.rule();
    let (_, grads) = basis_n.eval_with_grad(&rule.nodes)?;
    let low = basis_n_minus_1.eval_batch(&rule.nodes)?;
    let lw = DMatrix::from_fn(low.nrows(), low.ncols(), |q, k| {
        low[(q, k)] * rule.weights[q]
    });
    Ok(grads
        .iter()
        .enumerate()
        .map(|(axis, g)| DiffMatrix {
            axis,
            matrix: lw.transpose() * g,
        })
        .collect())
}
