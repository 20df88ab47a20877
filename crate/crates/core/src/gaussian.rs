//! Gaussian density and mixture algebra.
//!
//! Everything downstream of the belief recursions reduces to three identities:
//! the product of two Gaussian densities is a scaled Gaussian,
//!
//!   φ(x; μ1, P1)·φ(x; μ2, P2) = φ(μ1; μ2, P1+P2)·φ(x; μ̃, P̃),
//!   P̃ = (P1⁻¹ + P2⁻¹)⁻¹,  μ̃ = P̃(P1⁻¹μ1 + P2⁻¹μ2),
//!
//! the affine pushforward through an invertible matrix,
//!
//!   φ(y; Ax+b, P) = |A⁻¹|·φ(x; A⁻¹(y−b), A⁻¹PA⁻ᵀ),
//!
//! and the marginalization of a Gaussian prior through affine-Gaussian
//! dynamics. This module provides those identities plus the mixture
//! plumbing built on them: evaluation, closed-form inner products, box
//! integrals, L1 error against box indicators, and weight-conserving
//! component reduction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::erf;

use crate::{Error, Result};

/// Eigenvalue floor applied to covariances on construction.
pub const COV_EIGEN_FLOOR: f64 = 1e-12;

/// Symmetry tolerance for covariance matrices.
pub const COV_SYMMETRY_TOL: f64 = 1e-10;

const LN_2PI: f64 = 1.837877066409345483560659472811;

// ---------------------------------------------------------------------------
// Axis-aligned boxes
// ---------------------------------------------------------------------------

/// Axis-aligned box `[lo, hi]` per dimension. Used for safe-set cells,
/// observation cells, and quadrature domains. Infinite endpoints are allowed
/// for integration domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::contract("box lo/hi dimension mismatch"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(Error::contract("box must have lo < hi on every axis"));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&xi, (&lo, &hi))| xi >= lo && xi <= hi)
    }

    /// Edge length along `axis`.
    pub fn edge(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    /// Lebesgue measure (product of edges).
    pub fn measure(&self) -> f64 {
        (0..self.dim()).map(|k| self.edge(k)).product()
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|k| self.edge(k).powi(2)).sum::<f64>().sqrt()
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)),
        )
    }
}

// ---------------------------------------------------------------------------
// Gaussian components
// ---------------------------------------------------------------------------

/// One weighted Gaussian density. Weights may exceed 1: α-function mixtures
/// are unnormalized by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Set when the eigenvalue floor had to be applied on construction.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub regularized: bool,
}

impl GaussianComponent {
    /// Builds a component, symmetrizing the covariance and flooring its
    /// spectrum at [`COV_EIGEN_FLOOR`].
    pub fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if cov.nrows() != m || cov.ncols() != m {
            return Err(Error::contract("covariance shape does not match mean"));
        }
        if !weight.is_finite() {
            return Err(Error::contract("component weight must be finite"));
        }
        let max_asym = (&cov - cov.transpose()).abs().max();
        if max_asym > COV_SYMMETRY_TOL * (1.0 + cov.abs().max()) {
            return Err(Error::contract("covariance is not symmetric"));
        }
        let mut sym = 0.5 * (&cov + cov.transpose());
        let min_eig = sym
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let mut regularized = false;
        if min_eig <= COV_EIGEN_FLOOR {
            let shift = COV_EIGEN_FLOOR - min_eig + COV_EIGEN_FLOOR;
            for k in 0..m {
                sym[(k, k)] += shift;
            }
            regularized = true;
        }
        Ok(Self { weight, mean, cov: sym, regularized })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Weighted density value `weight · φ(x; mean, cov)`.
    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.weight * gaussian_pdf(x, &self.mean, &self.cov)
    }

    /// Peak of the unweighted density, `(2π)^{−m/2}|P|^{−1/2}`.
    pub fn peak_density(&self) -> f64 {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .expect("covariance regularized on construction");
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        (-0.5 * (self.dim() as f64 * LN_2PI + log_det)).exp()
    }
}

/// Gaussian density `φ(x; mean, cov)`.
pub fn gaussian_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    gaussian_log_pdf(x, mean, cov).exp()
}

/// Log of the Gaussian density.
pub fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let m = mean.len();
    debug_assert_eq!(x.len(), m);
    let chol = cov
        .clone()
        .cholesky()
        .unwrap_or_else(|| regularize(cov).cholesky().expect("regularized covariance"));
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).expect("triangular solve");
    -0.5 * (m as f64 * LN_2PI + log_det + z.norm_squared())
}

fn regularize(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = 0.5 * (cov + cov.transpose());
    let min_eig = out
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig <= COV_EIGEN_FLOOR {
        let shift = COV_EIGEN_FLOOR - min_eig + COV_EIGEN_FLOOR;
        for k in 0..out.nrows() {
            out[(k, k)] += shift;
        }
    }
    out
}

/// Symmetric positive-definite inverse via Cholesky (with regularization
/// fallback for near-singular inputs).
pub(crate) fn spd_inverse(cov: &DMatrix<f64>) -> DMatrix<f64> {
    match cov.clone().cholesky() {
        Some(c) => c.inverse(),
        None => regularize(cov)
            .cholesky()
            .expect("regularized covariance")
            .inverse(),
    }
}

/// Product identity (two weighted Gaussians over the same variable).
///
/// Returns `(scale, out)` with `scale = φ(μ_a; μ_b, P_a + P_b)` so that
/// pointwise `density_a(x)·density_b(x) = scale · density_out(x)`, where
/// `out.weight = a.weight · b.weight`.
pub fn product(a: &GaussianComponent, b: &GaussianComponent) -> Result<(f64, GaussianComponent)> {
    if a.dim() != b.dim() {
        return Err(Error::contract("product of Gaussians with different dimensions"));
    }
    let sum_cov = &a.cov + &b.cov;
    let scale = gaussian_pdf(&a.mean, &b.mean, &sum_cov);
    let ia = spd_inverse(&a.cov);
    let ib = spd_inverse(&b.cov);
    let prec = &ia + &ib;
    let cov = spd_inverse(&prec);
    let mean = &cov * (&ia * &a.mean + &ib * &b.mean);
    let out = GaussianComponent::new(a.weight * b.weight, mean, cov)?;
    Ok((scale, out))
}

/// Affine pushforward: rewrites `φ(y; A x + b, P)` as a density in `x`.
///
/// Returns `(|A⁻¹|, component)` with mean `A⁻¹(y − b)` and covariance
/// `A⁻¹ P A⁻ᵀ`; the component carries unit weight. Pointwise,
/// `φ(y; Ax+b, P) = scale · φ(x; mean, cov)`.
pub fn affine_pushforward(
    a_mat: &DMatrix<f64>,
    b: &DVector<f64>,
    p: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, GaussianComponent)> {
    let det = a_mat.determinant();
    if det.abs() < 1e-10 {
        return Err(Error::contract("affine pushforward requires an invertible matrix"));
    }
    let a_inv = a_mat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::contract("matrix inversion failed"))?;
    let mean = &a_inv * (y - b);
    let cov = &a_inv * p * a_inv.transpose();
    let comp = GaussianComponent::new(1.0, mean, cov)?;
    Ok((det.abs().recip(), comp))
}

/// Moment-matched (weight-preserving) merge of two components.
pub fn moment_merge(a: &GaussianComponent, b: &GaussianComponent) -> GaussianComponent {
    let w = a.weight + b.weight;
    if w.abs() < f64::MIN_POSITIVE {
        // Degenerate all-zero-weight merge; keep the first component's shape.
        return GaussianComponent::new(0.0, a.mean.clone(), a.cov.clone())
            .expect("valid inputs");
    }
    let (wa, wb) = (a.weight / w, b.weight / w);
    let mean = wa * &a.mean + wb * &b.mean;
    let da = &a.mean - &mean;
    let db = &b.mean - &mean;
    let cov = wa * (&a.cov + &da * da.transpose()) + wb * (&b.cov + &db * db.transpose());
    GaussianComponent::new(w, mean, cov).expect("valid inputs")
}

/// Integral of the *unweighted* density of `comp` over an axis-aligned box.
///
/// Diagonal covariances use exact error-function products; correlated
/// covariances fall back to tensor Gauss-Legendre quadrature in a
/// whitened-extent-clamped domain.
pub fn box_integral(comp: &GaussianComponent, region: &BoxRegion) -> f64 {
    let m = comp.dim();
    assert_eq!(region.dim(), m, "box dimension mismatch");
    let diag_ok = (0..m).all(|i| {
        (0..m).all(|j| {
            i == j
                || comp.cov[(i, j)].abs()
                    <= 1e-12 * (comp.cov[(i, i)] * comp.cov[(j, j)]).sqrt()
        })
    });
    if diag_ok {
        let mut p = 1.0;
        for k in 0..m {
            let sd = comp.cov[(k, k)].sqrt();
            p *= interval_mass(comp.mean[k], sd, region.lo[k], region.hi[k]);
        }
        return p;
    }
    gauss_legendre_box(comp, region)
}

/// Mass of a scalar normal on `[lo, hi]` (endpoints may be infinite).
pub fn interval_mass(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let z = |v: f64| -> f64 {
        if v == f64::INFINITY {
            1.0
        } else if v == f64::NEG_INFINITY {
            -1.0
        } else {
            erf((v - mean) / (sd * std::f64::consts::SQRT_2))
        }
    };
    (0.5 * (z(hi) - z(lo))).max(0.0)
}

fn gauss_legendre_box(comp: &GaussianComponent, region: &BoxRegion) -> f64 {
    // 24-point Gauss-Legendre per axis, domain clamped to mean ± 9 sd.
    const N: usize = 24;
    let (nodes, weights) = gauss_legendre_24();
    let m = comp.dim();
    let mut lo = vec![0.0; m];
    let mut hi = vec![0.0; m];
    for k in 0..m {
        let sd = comp.cov[(k, k)].sqrt();
        lo[k] = region.lo[k].max(comp.mean[k] - 9.0 * sd);
        hi[k] = region.hi[k].min(comp.mean[k] + 9.0 * sd);
        if lo[k] >= hi[k] {
            return 0.0;
        }
    }
    let mut total = 0.0;
    let mut idx = vec![0usize; m];
    let mut x = DVector::zeros(m);
    'outer: loop {
        let mut w = 1.0;
        for k in 0..m {
            let half = 0.5 * (hi[k] - lo[k]);
            x[k] = lo[k] + half * (nodes[idx[k]] + 1.0);
            w *= half * weights[idx[k]];
        }
        total += w * gaussian_pdf(&x, &comp.mean, &comp.cov);
        for k in 0..m {
            idx[k] += 1;
            if idx[k] < N {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    total
}

fn gauss_legendre_24() -> (&'static [f64; 24], &'static [f64; 24]) {
    static NODES: [f64; 24] = [
        -0.9951872199970213, -0.9747285559713095, -0.9382745520027328,
        -0.8864155270044011, -0.8200019859739029, -0.7401241915785544,
        -0.6480936519369756, -0.5454214713888396, -0.4337935076260451,
        -0.3150426796961634, -0.1911188674736163, -0.0640568928626056,
        0.0640568928626056, 0.1911188674736163, 0.3150426796961634,
        0.4337935076260451, 0.5454214713888396, 0.6480936519369756,
        0.7401241915785544, 0.8200019859739029, 0.8864155270044011,
        0.9382745520027328, 0.9747285559713095, 0.9951872199970213,
    ];
    static WEIGHTS: [f64; 24] = [
        0.0123412297999871, 0.0285313886289337, 0.0442774388174196,
        0.0592985849154367, 0.0733464814110804, 0.0861901615319533,
        0.0976186521041141, 0.1074442701159656, 0.1155056680537256,
        0.1216704729278034, 0.1258374563468283, 0.1279381953467522,
        0.1279381953467522, 0.1258374563468283, 0.1216704729278034,
        0.1155056680537256, 0.1074442701159656, 0.0976186521041141,
        0.0861901615319533, 0.0733464814110804, 0.0592985849154367,
        0.0442774388174196, 0.0285313886289337, 0.0123412297999871,
    ];
    (&NODES, &WEIGHTS)
}

// ---------------------------------------------------------------------------
// Mode-indexed mixtures
// ---------------------------------------------------------------------------

/// Mode-indexed weighted sum of Gaussian densities. Holds information
/// states, α-functions, and the RBF indicator alike.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModeMixture {
    pub comps: Vec<Vec<GaussianComponent>>,
}

impl ModeMixture {
    pub fn empty(n_modes: usize) -> Self {
        Self { comps: vec![Vec::new(); n_modes] }
    }

    pub fn n_modes(&self) -> usize {
        self.comps.len()
    }

    pub fn component_count(&self, mode: usize) -> usize {
        self.comps[mode].len()
    }

    pub fn total_weight(&self, mode: usize) -> f64 {
        self.comps[mode].iter().map(|c| c.weight).sum()
    }

    pub fn total_weight_all(&self) -> f64 {
        (0..self.n_modes()).map(|q| self.total_weight(q)).sum()
    }

    /// Evaluates the mixture at a hybrid state.
    pub fn evaluate(&self, x: &DVector<f64>, mode: usize) -> f64 {
        self.comps[mode].iter().map(|c| c.density(x)).sum()
    }

    /// Multiplies every weight by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let comps = self
            .comps
            .iter()
            .map(|v| {
                v.iter()
                    .map(|g| GaussianComponent { weight: c * g.weight, ..g.clone() })
                    .collect()
            })
            .collect();
        Self { comps }
    }

    /// Appends all of `other`'s components mode by mode.
    pub fn absorb(&mut self, other: ModeMixture) {
        assert_eq!(self.n_modes(), other.n_modes());
        for (dst, src) in self.comps.iter_mut().zip(other.comps) {
            dst.extend(src);
        }
    }
}

/// Sum of `weight · φ` over components of mode `q`, evaluated at `x`.
pub fn mixture_evaluate(mix: &ModeMixture, x: &DVector<f64>, mode: usize) -> f64 {
    mix.evaluate(x, mode)
}

/// Closed-form inner product `Σ_q Σ_{a,b} w_a w_b φ(μ_a; μ_b, P_a + P_b)`.
pub fn mixture_inner(a: &ModeMixture, b: &ModeMixture) -> f64 {
    assert_eq!(a.n_modes(), b.n_modes());
    let mut total = 0.0;
    for q in 0..a.n_modes() {
        for ca in &a.comps[q] {
            for cb in &b.comps[q] {
                let sum_cov = &ca.cov + &cb.cov;
                total += ca.weight * cb.weight * gaussian_pdf(&ca.mean, &cb.mean, &sum_cov);
            }
        }
    }
    total
}

/// `∫ f·g` for two weighted components over the same variable.
fn component_inner(a: &GaussianComponent, b: &GaussianComponent) -> f64 {
    let sum_cov = &a.cov + &b.cov;
    a.weight * b.weight * gaussian_pdf(&a.mean, &b.mean, &sum_cov)
}

/// Squared L2 distance `‖f − g‖₂²` between weighted components.
fn l2_distance_sq(a: &GaussianComponent, b: &GaussianComponent, self_a: f64, self_b: f64) -> f64 {
    (self_a + self_b - 2.0 * component_inner(a, b)).max(0.0)
}

fn self_inner(c: &GaussianComponent) -> f64 {
    let double = 2.0 * &c.cov;
    c.weight * c.weight * gaussian_pdf(&c.mean, &c.mean, &double)
}

/// Relative weight below which components are pre-merged into the dominant
/// component before the greedy pass (only when over cap).
const REDUCE_PRUNE_REL: f64 = 1e-12;

/// Reduces each mode to at most `cap` components.
///
/// The closest pair under the L2 density distance is moment-merged, greedily,
/// until the count is at or below `cap`. Per-mode total weight is conserved
/// exactly. Modes already at or below `cap` are returned unchanged.
pub fn mixture_reduce(mix: &ModeMixture, cap: usize) -> ModeMixture {
    assert!(cap >= 1, "reduction cap must be at least 1");
    let comps = mix
        .comps
        .iter()
        .map(|mode_comps| reduce_mode(mode_comps, cap))
        .collect();
    ModeMixture { comps }
}

fn reduce_mode(comps: &[GaussianComponent], cap: usize) -> Vec<GaussianComponent> {
    if comps.len() <= cap {
        return comps.to_vec();
    }
    let total_abs: f64 = comps.iter().map(|c| c.weight.abs()).sum();
    let threshold = REDUCE_PRUNE_REL * total_abs;

    // Negligible components cannot survive a greedy pass anyway; fold them
    // into the dominant component up front to keep the pass quadratic in the
    // number of *significant* components.
    let mut active: Vec<GaussianComponent> = Vec::with_capacity(comps.len());
    let mut pruned: Vec<&GaussianComponent> = Vec::new();
    for c in comps {
        if c.weight.abs() < threshold {
            pruned.push(c);
        } else {
            active.push(c.clone());
        }
    }
    if !pruned.is_empty() {
        let mut pile: Option<GaussianComponent> = None;
        for c in pruned {
            pile = Some(match pile {
                None => c.clone(),
                Some(p) => moment_merge(&p, c),
            });
        }
        let pile = pile.unwrap();
        if active.is_empty() {
            active.push(pile);
        } else if pile.weight != 0.0 {
            let dominant = active
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.weight.abs().total_cmp(&b.1.weight.abs()))
                .map(|(i, _)| i)
                .unwrap();
            active[dominant] = moment_merge(&active[dominant], &pile);
        }
    }
    greedy_pairwise_merge(active, cap)
}

fn greedy_pairwise_merge(mut comps: Vec<GaussianComponent>, cap: usize) -> Vec<GaussianComponent> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    if comps.len() <= cap {
        return comps;
    }

    #[derive(PartialEq)]
    struct Entry {
        dist: f64,
        i: usize,
        j: usize,
        gen_i: u32,
        gen_j: u32,
    }
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.dist
                .total_cmp(&other.dist)
                .then(self.i.cmp(&other.i))
                .then(self.j.cmp(&other.j))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let mut selfs: Vec<f64> = comps.iter().map(self_inner).collect();
    let mut gen = vec![0u32; comps.len()];
    let mut alive: Vec<bool> = vec![true; comps.len()];
    let mut n_alive = comps.len();
    let mut heap: BinaryHeap<Reverse<Entry>> = BinaryHeap::new();
    for i in 0..comps.len() {
        for j in (i + 1)..comps.len() {
            let d = l2_distance_sq(&comps[i], &comps[j], selfs[i], selfs[j]);
            heap.push(Reverse(Entry { dist: d, i, j, gen_i: 0, gen_j: 0 }));
        }
    }

    while n_alive > cap {
        let Entry { i, j, gen_i, gen_j, .. } = match heap.pop() {
            Some(Reverse(e)) => e,
            None => break,
        };
        if !alive[i] || !alive[j] || gen[i] != gen_i || gen[j] != gen_j {
            continue;
        }
        let merged = moment_merge(&comps[i], &comps[j]);
        alive[j] = false;
        n_alive -= 1;
        comps[i] = merged;
        selfs[i] = self_inner(&comps[i]);
        gen[i] += 1;
        for k in 0..comps.len() {
            if k == i || !alive[k] {
                continue;
            }
            let (a, b) = if k < i { (k, i) } else { (i, k) };
            let d = l2_distance_sq(&comps[a], &comps[b], selfs[a], selfs[b]);
            heap.push(Reverse(Entry {
                dist: d,
                i: a,
                j: b,
                gen_i: gen[a],
                gen_j: gen[b],
            }));
        }
    }

    comps
        .into_iter()
        .zip(alive)
        .filter_map(|(c, keep)| keep.then_some(c))
        .collect()
}

/// L1 distance `max_q ‖1_{K_q} − mix_q‖₁` between the box indicators and the
/// mixture, integrated over all of ℝ^m.
///
/// Inside each box a trapezoid mesh is refined until two successive
/// refinements differ by less than 1e-4; the out-of-box part uses the
/// closed-form complement `Σ w − Σ w·∫_box φ` and so requires nonnegative
/// weights (NNLS-fitted indicators satisfy this; mixed signs fall back to
/// quadrature over an inflated box).
pub fn mixture_l1_error(mix: &ModeMixture, boxes: &[BoxRegion]) -> f64 {
    assert_eq!(mix.n_modes(), boxes.len(), "one box per mode");
    let mut worst = 0.0f64;
    for (q, region) in boxes.iter().enumerate() {
        let inside = refine_l1_inside(mix, q, region);
        let comps = &mix.comps[q];
        let nonneg = comps.iter().all(|c| c.weight >= 0.0);
        let outside = if nonneg {
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            let in_box: f64 = comps.iter().map(|c| c.weight * box_integral(c, region)).sum();
            (total - in_box).max(0.0)
        } else {
            quadrature_l1_outside(mix, q, region)
        };
        worst = worst.max(inside + outside);
    }
    worst
}

fn refine_l1_inside(mix: &ModeMixture, q: usize, region: &BoxRegion) -> f64 {
    let mut n = 64usize;
    let mut prev = trapezoid_l1(mix, q, region, n, true);
    loop {
        n *= 2;
        let cur = trapezoid_l1(mix, q, region, n, true);
        if (cur - prev).abs() < 1e-4 || n >= 1 << 16 {
            return cur;
        }
        prev = cur;
    }
}

fn quadrature_l1_outside(mix: &ModeMixture, q: usize, region: &BoxRegion) -> f64 {
    // Inflate by 8 times the widest per-axis sd among components.
    let m = region.dim();
    let mut margin = vec![0.0f64; m];
    for c in &mix.comps[q] {
        for k in 0..m {
            margin[k] = margin[k].max(8.0 * c.cov[(k, k)].sqrt());
        }
    }
    let big = BoxRegion {
        lo: (0..m).map(|k| region.lo[k] - margin[k]).collect(),
        hi: (0..m).map(|k| region.hi[k] + margin[k]).collect(),
    };
    let whole = trapezoid_abs_mass(mix, q, &big, 1 << 12);
    let inside_abs = trapezoid_abs_mass(mix, q, region, 1 << 12);
    (whole - inside_abs).max(0.0)
}

fn mesh_eval<F: FnMut(&DVector<f64>, f64)>(region: &BoxRegion, n_per_axis: usize, mut f: F) {
    let m = region.dim();
    let mut idx = vec![0usize; m];
    let mut x = DVector::zeros(m);
    let h: Vec<f64> = (0..m).map(|k| region.edge(k) / n_per_axis as f64).collect();
    'outer: loop {
        let mut w = 1.0;
        for k in 0..m {
            x[k] = region.lo[k] + idx[k] as f64 * h[k];
            let end = idx[k] == 0 || idx[k] == n_per_axis;
            w *= h[k] * if end { 0.5 } else { 1.0 };
        }
        f(&x, w);
        for k in 0..m {
            idx[k] += 1;
            if idx[k] <= n_per_axis {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
}

fn trapezoid_l1(mix: &ModeMixture, q: usize, region: &BoxRegion, n: usize, against_one: bool) -> f64 {
    let mut total = 0.0;
    mesh_eval(region, n, |x, w| {
        let v = mix.evaluate(x, q);
        let target = if against_one { 1.0 } else { 0.0 };
        total += w * (target - v).abs();
    });
    total
}

fn trapezoid_abs_mass(mix: &ModeMixture, q: usize, region: &BoxRegion, n: usize) -> f64 {
    let mut total = 0.0;
    mesh_eval(region, n, |x, w| {
        total += w * mix.evaluate(x, q).abs();
    });
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn comp1(w: f64, mu: f64, var: f64) -> GaussianComponent {
        GaussianComponent::new(w, DVector::from_vec(vec![mu]), DMatrix::from_vec(1, 1, vec![var]))
            .unwrap()
    }

    #[test]
    fn density_at_mean_standard_normal() {
        let c = comp1(1.0, 0.0, 1.0);
        let x = DVector::from_vec(vec![0.0]);
        assert_relative_eq!(c.density(&x), (2.0 * std::f64::consts::PI).sqrt().recip(), max_relative = 1e-12);
    }

    #[test]
    fn product_of_standard_normals() {
        // Derived oracle: multiply densities pointwise at x ∈ {0, ±1} and fit.
        let a = comp1(1.0, 0.0, 1.0);
        let b = comp1(1.0, 0.0, 1.0);
        let (scale, out) = product(&a, &b).unwrap();
        assert_relative_eq!(scale, 0.28209479177387814, max_relative = 1e-10);
        assert_relative_eq!(out.cov[(0, 0)], 0.5, max_relative = 1e-10);
        assert_relative_eq!(out.mean[0], 0.0, epsilon = 1e-12);
        for xv in [0.0, 1.0, -1.0, 0.37] {
            let x = DVector::from_vec(vec![xv]);
            assert_relative_eq!(a.density(&x) * b.density(&x), scale * out.density(&x), max_relative = 1e-10);
        }
    }

    #[test]
    fn product_identical_components_keeps_mean() {
        let a = comp1(1.0, 2.5, 0.7);
        let (_, out) = product(&a, &a).unwrap();
        assert_relative_eq!(out.mean[0], 2.5, max_relative = 1e-12);
    }

    #[test]
    fn product_with_flat_factor_is_identity() {
        let a = comp1(1.0, 1.0, 0.5);
        let flat = comp1(1.0, 0.0, 1e8);
        let (_, out) = product(&a, &flat).unwrap();
        assert_relative_eq!(out.mean[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(out.cov[(0, 0)], 0.5, max_relative = 1e-6);
    }

    #[test]
    fn pushforward_identity_is_noop() {
        let a = DMatrix::identity(1, 1);
        let b = DVector::zeros(1);
        let p = DMatrix::from_vec(1, 1, vec![1.0]);
        let y = DVector::from_vec(vec![0.3]);
        let (scale, out) = affine_pushforward(&a, &b, &p, &y).unwrap();
        assert_relative_eq!(scale, 1.0, max_relative = 1e-14);
        assert_relative_eq!(out.mean[0], 0.3, max_relative = 1e-14);
        assert_relative_eq!(out.cov[(0, 0)], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn pushforward_scalar_example() {
        // Scalar A=2, b=0, P=1, y=4 → scale 0.5, out = φ(x; 2, 0.25).
        let a = DMatrix::from_vec(1, 1, vec![2.0]);
        let b = DVector::zeros(1);
        let p = DMatrix::from_vec(1, 1, vec![1.0]);
        let y = DVector::from_vec(vec![4.0]);
        let (scale, out) = affine_pushforward(&a, &b, &p, &y).unwrap();
        assert_relative_eq!(scale, 0.5, max_relative = 1e-14);
        assert_relative_eq!(out.mean[0], 2.0, max_relative = 1e-14);
        assert_relative_eq!(out.cov[(0, 0)], 0.25, max_relative = 1e-14);
    }

    #[test]
    fn pushforward_thermostat_scale() {
        let a = DMatrix::from_vec(1, 1, vec![0.9833]);
        let b = DVector::zeros(1);
        let p = DMatrix::from_vec(1, 1, vec![0.25]);
        let y = DVector::from_vec(vec![20.0]);
        let (scale, _) = affine_pushforward(&a, &b, &p, &y).unwrap();
        assert_relative_eq!(scale, 1.0 / 0.9833, max_relative = 1e-14);
    }

    #[test]
    fn pushforward_rejects_singular() {
        let a = DMatrix::from_vec(1, 1, vec![1e-12]);
        let b = DVector::zeros(1);
        let p = DMatrix::from_vec(1, 1, vec![1.0]);
        let y = DVector::zeros(1);
        assert!(affine_pushforward(&a, &b, &p, &y).is_err());
    }

    #[test]
    fn mixture_evaluate_basics() {
        let mut mix = ModeMixture::empty(2);
        let x = DVector::from_vec(vec![0.0]);
        // Empty mode evaluates to zero.
        assert_eq!(mixture_evaluate(&mix, &x, 0), 0.0);
        mix.comps[0].push(comp1(1.0, 0.0, 1.0));
        let single = mixture_evaluate(&mix, &x, 0);
        assert_relative_eq!(single, (2.0 * std::f64::consts::PI).sqrt().recip(), max_relative = 1e-12);
        // Two equal components double the value.
        mix.comps[0].push(comp1(1.0, 0.0, 1.0));
        assert_relative_eq!(mixture_evaluate(&mix, &x, 0), 2.0 * single, max_relative = 1e-12);
    }

    #[test]
    fn box_integral_full_space_and_unit_box() {
        let c = comp1(1.0, 0.0, 1.0);
        let full = BoxRegion { lo: vec![f64::NEG_INFINITY], hi: vec![f64::INFINITY] };
        assert_relative_eq!(box_integral(&c, &full), 1.0, max_relative = 1e-14);
        let unit = BoxRegion::new(vec![-1.0], vec![1.0]).unwrap();
        assert_relative_eq!(box_integral(&c, &unit), 0.6826894921370859, max_relative = 1e-12);
    }

    #[test]
    fn box_integral_far_box_is_negligible() {
        let c = comp1(1.0, 0.0, 1.0);
        let far = BoxRegion::new(vec![10.0], vec![12.0]).unwrap();
        assert!(box_integral(&c, &far) < 1e-20);
    }

    #[test]
    fn box_integral_correlated_matches_diagonalized() {
        // 2-D correlated Gaussian over a box, against a fine trapezoid oracle.
        let cov = DMatrix::from_vec(2, 2, vec![1.0, 0.6, 0.6, 1.5]);
        let c = GaussianComponent::new(1.0, DVector::from_vec(vec![0.2, -0.1]), cov).unwrap();
        let region = BoxRegion::new(vec![-1.0, -1.5], vec![1.2, 0.8]).unwrap();
        let got = box_integral(&c, &region);
        let trap = |n: usize| {
            let mut acc = 0.0;
            mesh_eval(&region, n, |x, w| {
                acc += w * gaussian_pdf(x, &c.mean, &c.cov);
            });
            acc
        };
        // Richardson-extrapolated trapezoid oracle (O(h^4)).
        let (t1, t2) = (trap(600), trap(1200));
        let oracle = t2 + (t2 - t1) / 3.0;
        assert_relative_eq!(got, oracle, max_relative = 1e-9);
        // The quadrature is also stable under panel subdivision.
        let mid = region.center();
        let mut split_total = 0.0;
        for (lo0, hi0) in [(region.lo[0], mid[0]), (mid[0], region.hi[0])] {
            for (lo1, hi1) in [(region.lo[1], mid[1]), (mid[1], region.hi[1])] {
                let sub = BoxRegion::new(vec![lo0, lo1], vec![hi0, hi1]).unwrap();
                split_total += box_integral(&c, &sub);
            }
        }
        assert_relative_eq!(got, split_total, max_relative = 1e-10);
    }

    #[test]
    fn reduce_noop_when_under_cap() {
        let mut mix = ModeMixture::empty(1);
        mix.comps[0].push(comp1(0.4, 0.0, 1.0));
        mix.comps[0].push(comp1(0.6, 3.0, 1.0));
        let out = mixture_reduce(&mix, 2);
        assert_eq!(out.component_count(0), 2);
        assert_relative_eq!(out.comps[0][0].mean[0], 0.0);
        assert_relative_eq!(out.comps[0][1].mean[0], 3.0);
    }

    #[test]
    fn reduce_identical_pair_to_one() {
        let mut mix = ModeMixture::empty(1);
        mix.comps[0].push(comp1(0.3, 1.0, 0.5));
        mix.comps[0].push(comp1(0.3, 1.0, 0.5));
        let out = mixture_reduce(&mix, 1);
        assert_eq!(out.component_count(0), 1);
        let c = &out.comps[0][0];
        assert_relative_eq!(c.weight, 0.6, max_relative = 1e-14);
        assert_relative_eq!(c.mean[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(c.cov[(0, 0)], 0.5, max_relative = 1e-10);
    }

    #[test]
    fn reduce_merges_closest_l2_pair() {
        // Components at 0.0 and 0.4 are closest in L2; 5.0 stays alone.
        let mut mix = ModeMixture::empty(1);
        mix.comps[0].push(comp1(0.5, 0.0, 1.0));
        mix.comps[0].push(comp1(0.3, 0.4, 1.0));
        mix.comps[0].push(comp1(0.2, 5.0, 1.0));
        let out = mixture_reduce(&mix, 2);
        assert_eq!(out.component_count(0), 2);
        let total: f64 = out.comps[0].iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // The merged pair has the weighted mean 0.15; the lone component is 5.0.
        let mut means: Vec<f64> = out.comps[0].iter().map(|c| c.mean[0]).collect();
        means.sort_by(f64::total_cmp);
        assert_relative_eq!(means[0], 0.15, max_relative = 1e-12);
        assert_relative_eq!(means[1], 5.0, max_relative = 1e-12);
    }

    #[test]
    fn l1_error_of_empty_mixture_is_box_measure() {
        let mix = ModeMixture::empty(1);
        let boxes = vec![BoxRegion::new(vec![17.5], vec![22.0]).unwrap()];
        let err = mixture_l1_error(&mix, &boxes);
        assert_relative_eq!(err, 4.5, max_relative = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Pointwise product identity at random evaluation points.
        #[test]
        fn prop_product_pointwise(
            mu_a in -3.0f64..3.0, mu_b in -3.0f64..3.0,
            va in 0.1f64..4.0, vb in 0.1f64..4.0,
            xs in prop::collection::vec(-6.0f64..6.0, 8),
        ) {
            let a = comp1(1.0, mu_a, va);
            let b = comp1(1.0, mu_b, vb);
            let (scale, out) = product(&a, &b).unwrap();
            for xv in xs {
                let x = DVector::from_vec(vec![xv]);
                let lhs = a.density(&x) * b.density(&x);
                let rhs = scale * out.density(&x);
                prop_assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1e-30));
            }
        }

        /// Pointwise pushforward identity at random evaluation points.
        #[test]
        fn prop_pushforward_pointwise(
            a_val in prop::sample::select(vec![-2.0f64, -0.7, 0.3, 0.9833, 2.5]),
            b_val in -2.0f64..2.0, p_val in 0.1f64..4.0,
            y_val in -4.0f64..4.0,
            xs in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let a = DMatrix::from_vec(1, 1, vec![a_val]);
            let b = DVector::from_vec(vec![b_val]);
            let p = DMatrix::from_vec(1, 1, vec![p_val]);
            let y = DVector::from_vec(vec![y_val]);
            let (scale, out) = affine_pushforward(&a, &b, &p, &y).unwrap();
            for xv in xs {
                let x = DVector::from_vec(vec![xv]);
                let lhs = gaussian_pdf(&y, &(&a * &x + &b), &p);
                let rhs = scale * out.density(&x);
                prop_assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1e-30));
            }
        }

        /// Reduction conserves per-mode weight exactly and never grows.
        #[test]
        fn prop_reduce_conserves_weight(
            weights in prop::collection::vec(0.01f64..2.0, 3..20),
            cap in 1usize..6,
        ) {
            let mut mix = ModeMixture::empty(1);
            for (i, w) in weights.iter().enumerate() {
                mix.comps[0].push(comp1(*w, i as f64 * 0.8, 0.5 + 0.1 * i as f64));
            }
            let before: f64 = mix.total_weight(0);
            let out = mixture_reduce(&mix, cap);
            prop_assert!(out.component_count(0) <= cap.max(1));
            prop_assert!(out.component_count(0) <= mix.component_count(0));
            prop_assert!((out.total_weight(0) - before).abs() <= 1e-12 * before.abs().max(1.0));
        }

        /// Box integrals are monotone over nested boxes.
        #[test]
        fn prop_box_integral_monotone(
            mu in -2.0f64..2.0, var in 0.2f64..3.0,
            a in -4.0f64..0.0, b in 0.1f64..4.0, grow in 0.1f64..3.0,
        ) {
            let c = comp1(1.0, mu, var);
            let inner = BoxRegion::new(vec![a], vec![b]).unwrap();
            let outer = BoxRegion::new(vec![a - grow], vec![b + grow]).unwrap();
            prop_assert!(box_integral(&c, &inner) <= box_integral(&c, &outer) + 1e-14);
        }
    }
}
