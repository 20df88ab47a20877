//! Finite-state POMDP abstraction.
//!
//! The safe set is partitioned into uniform cells with representative
//! points; everything outside is absorbed into a single unsafe aggregate
//! `ψ_s`. Transition probabilities between cells are evaluated from the
//! representative point of the source cell with exact box integrals of the
//! Gaussian transition density, which makes the abstract kernel row
//! stochastic by construction. Information states become probability
//! vectors, α-functions become value vectors on the safe cells (implicitly
//! zero at `ψ_s`), and backups reduce to matrix arithmetic against a
//! discretized observation likelihood table.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gaussian::{box_integral, interval_mass, BoxRegion, GaussianComponent};
use crate::model::{InitialDistribution, Observation, PodtshsModel};
use crate::pbvi::{Backend, ObsGrid};
use crate::{Error, Result};

/// Where a cell's representative point sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepPoint {
    /// Lower corner of the cell (the benchmark convention).
    Lower,
    Center,
}

/// Uniform partition of one mode's safe box.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridMode {
    lo: Vec<f64>,
    counts: Vec<usize>,
    h: Vec<f64>,
}

impl GridMode {
    fn n_cells(&self) -> usize {
        self.counts.iter().product()
    }

    fn diameter(&self) -> f64 {
        self.h.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The discrete state space `Z_δ = K_δ ∪ {ψ_s}` with the `ξ`/`Ξ` maps.
///
/// Safe cells are indexed flat across modes; the unsafe aggregate is the
/// virtual index [`StateGrid::psi`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateGrid {
    modes: Vec<GridMode>,
    offsets: Vec<usize>,
    n_states: usize,
    pub rep_point: RepPoint,
    /// Global maximum cell diameter `δ^x`.
    pub delta_x: f64,
}

impl StateGrid {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Index of the absorbing unsafe aggregate `ψ_s`.
    pub fn psi(&self) -> usize {
        self.n_states
    }

    pub fn n_cells(&self, mode: usize) -> usize {
        self.modes[mode].n_cells()
    }

    pub fn mode_of(&self, flat: usize) -> usize {
        debug_assert!(flat < self.n_states);
        match self.offsets.binary_search(&flat) {
            Ok(q) => q,
            Err(q) => q - 1,
        }
    }

    pub fn flat_index(&self, mode: usize, local: usize) -> usize {
        self.offsets[mode] + local
    }

    fn local_coords(&self, flat: usize) -> (usize, Vec<usize>) {
        let q = self.mode_of(flat);
        let mut local = flat - self.offsets[q];
        let gm = &self.modes[q];
        let m = gm.counts.len();
        let mut coords = vec![0usize; m];
        for k in (0..m).rev() {
            coords[k] = local % gm.counts[k];
            local /= gm.counts[k];
        }
        (q, coords)
    }

    /// Representative point `x^{i,q}` of a safe cell.
    pub fn representative(&self, flat: usize) -> DVector<f64> {
        let (q, coords) = self.local_coords(flat);
        let gm = &self.modes[q];
        DVector::from_iterator(
            gm.counts.len(),
            coords.iter().enumerate().map(|(k, &c)| {
                let lo = gm.lo[k] + c as f64 * gm.h[k];
                match self.rep_point {
                    RepPoint::Lower => lo,
                    RepPoint::Center => lo + 0.5 * gm.h[k],
                }
            }),
        )
    }

    /// The cell `Ξ(z)` as a box.
    pub fn cell_box(&self, flat: usize) -> BoxRegion {
        let (q, coords) = self.local_coords(flat);
        let gm = &self.modes[q];
        BoxRegion {
            lo: coords.iter().enumerate().map(|(k, &c)| gm.lo[k] + c as f64 * gm.h[k]).collect(),
            hi: coords
                .iter()
                .enumerate()
                .map(|(k, &c)| gm.lo[k] + (c + 1) as f64 * gm.h[k])
                .collect(),
        }
    }

    /// `ξ(s)`: the flat index of the cell containing `s`, or `None` when the
    /// state is unsafe.
    pub fn xi(&self, x: &DVector<f64>, mode: usize) -> Option<usize> {
        let gm = &self.modes[mode];
        let m = gm.counts.len();
        let mut local = 0usize;
        for k in 0..m {
            let rel = x[k] - gm.lo[k];
            let span = gm.h[k] * gm.counts[k] as f64;
            if rel < 0.0 || rel > span {
                return None;
            }
            let c = ((rel / gm.h[k]) as usize).min(gm.counts[k] - 1);
            local = local * gm.counts[k] + c;
        }
        Some(self.flat_index(mode, local))
    }
}

/// Builds a uniform grid with per-axis cell edges at most `delta_x_target`.
pub fn build_state_grid(
    model: &PodtshsModel,
    delta_x_target: f64,
    rep_point: RepPoint,
) -> Result<StateGrid> {
    if delta_x_target <= 0.0 {
        return Err(Error::contract("delta_x target must be positive"));
    }
    let mut modes = Vec::with_capacity(model.n_modes);
    for k in &model.safe_set {
        if k.measure() <= 0.0 {
            return Err(Error::contract("degenerate safe box"));
        }
        let m = k.dim();
        let counts: Vec<usize> = (0..m)
            .map(|j| ((k.edge(j) / delta_x_target) - 1e-9).ceil().max(1.0) as usize)
            .collect();
        let h: Vec<f64> = (0..m).map(|j| k.edge(j) / counts[j] as f64).collect();
        modes.push(GridMode { lo: k.lo.clone(), counts, h });
    }
    let mut offsets = Vec::with_capacity(modes.len());
    let mut acc = 0usize;
    for gm in &modes {
        offsets.push(acc);
        acc += gm.n_cells();
    }
    let delta_x = modes.iter().map(GridMode::diameter).fold(0.0f64, f64::max);
    Ok(StateGrid { modes, offsets, n_states: acc, rep_point, delta_x })
}

/// Probability vector over `Z_δ`; the last entry is `ψ_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteBelief {
    pub probs: Vec<f64>,
}

impl FiniteBelief {
    pub fn psi_mass(&self) -> f64 {
        *self.probs.last().unwrap()
    }

    pub fn safe_mass(&self) -> f64 {
        self.probs[..self.probs.len() - 1].iter().sum()
    }
}

/// Value vector over the safe cells (implicitly zero at `ψ_s`), tagged with
/// the action that generated it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteAlpha {
    pub values: Vec<f64>,
    pub action: Option<usize>,
}

/// Dense `τ_δ(z' | z, u)` table over `Z_δ × Z_δ` per input.
#[derive(Debug, Clone)]
pub struct TauTable {
    n_states: usize,
    n_inputs: usize,
    data: Vec<f64>,
}

impl TauTable {
    #[inline]
    fn idx(&self, u: usize, z: usize, zp: usize) -> usize {
        let stride = self.n_states + 1;
        (u * stride + z) * stride + zp
    }

    #[inline]
    pub fn get(&self, u: usize, z: usize, zp: usize) -> f64 {
        self.data[self.idx(u, z, zp)]
    }

    fn row(&self, u: usize, z: usize) -> &[f64] {
        let stride = self.n_states + 1;
        let start = (u * stride + z) * stride;
        &self.data[start..start + stride]
    }
}

/// The abstraction bundle: grid plus cached transition table.
#[derive(Debug, Clone)]
pub struct FiniteAbstraction {
    pub grid: StateGrid,
    pub tau: TauTable,
}

impl FiniteAbstraction {
    pub fn build(model: &PodtshsModel, delta_x_target: f64, rep_point: RepPoint) -> Result<Self> {
        let grid = build_state_grid(model, delta_x_target, rep_point)?;
        let tau = build_tau_table(&grid, model);
        Ok(Self { grid, tau })
    }

    /// Single-entry `τ_δ(z' | z, u)`; `z`/`z'` may be [`StateGrid::psi`].
    pub fn tau_delta(&self, zp: usize, z: usize, u: usize) -> f64 {
        self.tau.get(u, z, zp)
    }
}

/// Mass of `N(mean, cov)` over a grid cell; specializes to per-axis erf
/// differences for diagonal covariances.
fn cell_mass(mean: &DVector<f64>, model: &PodtshsModel, cov_diag_sd: Option<&[f64]>, cell: &BoxRegion) -> f64 {
    match cov_diag_sd {
        Some(sds) => {
            let mut p = 1.0;
            for k in 0..cell.dim() {
                p *= interval_mass(mean[k], sds[k], cell.lo[k], cell.hi[k]);
            }
            p
        }
        None => {
            let comp = GaussianComponent::new(1.0, mean.clone(), model.process_cov.clone())
                .expect("valid process covariance");
            box_integral(&comp, cell)
        }
    }
}

fn diag_sds(cov: &nalgebra::DMatrix<f64>) -> Option<Vec<f64>> {
    let m = cov.nrows();
    let diag_ok = (0..m).all(|i| {
        (0..m).all(|j| i == j || cov[(i, j)].abs() <= 1e-12 * (cov[(i, i)] * cov[(j, j)]).sqrt())
    });
    diag_ok.then(|| (0..m).map(|k| cov[(k, k)].sqrt()).collect())
}

fn build_tau_table(grid: &StateGrid, model: &PodtshsModel) -> TauTable {
    let n = grid.n_states();
    let stride = n + 1;
    let n_inputs = model.n_inputs();
    let v_sds = diag_sds(&model.process_cov);

    let rows: Vec<Vec<f64>> = (0..n_inputs * stride)
        .into_par_iter()
        .map(|row_id| {
            let u = row_id / stride;
            let z = row_id % stride;
            let mut row = vec![0.0f64; stride];
            if z == grid.psi() {
                row[grid.psi()] = 1.0;
                return row;
            }
            let q = grid.mode_of(z);
            let x = grid.representative(z);
            let mut sum = 0.0;
            for qp in 0..model.n_modes {
                let tq = model.mode_kernel.prob(qp, q, &x, u);
                if tq <= 0.0 {
                    continue;
                }
                let mean = model.transition_mean(qp, &x, u);
                for local in 0..grid.n_cells(qp) {
                    let zp = grid.flat_index(qp, local);
                    let cell = grid.cell_box(zp);
                    let p = tq * cell_mass(&mean, model, v_sds.as_deref(), &cell);
                    row[zp] = p;
                    sum += p;
                }
            }
            row[grid.psi()] = (1.0 - sum).max(0.0);
            row
        })
        .collect();

    let mut data = Vec::with_capacity(n_inputs * stride * stride);
    for row in rows {
        data.extend(row);
    }
    TauTable { n_states: n, n_inputs, data }
}

/// `ρ_δ`: per-cell integrals of the initial distribution, remainder on `ψ_s`.
pub fn rho_delta(grid: &StateGrid, model: &PodtshsModel) -> FiniteBelief {
    belief_from_gaussian(grid, model, &model.initial)
}

fn belief_from_gaussian(
    grid: &StateGrid,
    _model: &PodtshsModel,
    init: &InitialDistribution,
) -> FiniteBelief {
    let n = grid.n_states();
    let mut probs = vec![0.0f64; n + 1];
    let mean = init.mean_vec();
    let cov = init.cov_mat();
    let comp = GaussianComponent::new(1.0, mean, cov).expect("valid initial covariance");
    let mut sum = 0.0;
    for z in 0..n {
        let q = grid.mode_of(z);
        let rq = init.mode_probs[q];
        if rq <= 0.0 {
            continue;
        }
        let p = rq * box_integral(&comp, &grid.cell_box(z));
        probs[z] = p;
        sum += p;
    }
    probs[n] = (1.0 - sum).max(0.0);
    FiniteBelief { probs }
}

/// One filter step with a continuous observation (Bayes on the safe cells,
/// propagated unsafe mass carried through unchanged).
///
/// Returns the updated belief and the realized likelihood, i.e. the
/// observation density conditioned on safe propagation. When the belief has
/// no safely-propagated mass at all the observation is vacuous: the output
/// is the point mass on `ψ_s` with zero likelihood.
pub fn finite_belief_update(
    abs: &FiniteAbstraction,
    model: &PodtshsModel,
    b: &FiniteBelief,
    u: usize,
    y: &Observation,
) -> Result<(FiniteBelief, f64)> {
    let grid = &abs.grid;
    let n = grid.n_states();
    let psi = grid.psi();
    let mut prop = vec![0.0f64; n];
    let mut prop_psi = b.probs[psi];
    for z in 0..n {
        let bz = b.probs[z];
        if bz == 0.0 {
            continue;
        }
        let row = abs.tau.row(u, z);
        for zp in 0..n {
            prop[zp] += bz * row[zp];
        }
        prop_psi += bz * row[psi];
    }
    let sum_prop: f64 = prop.iter().sum();
    if sum_prop <= 0.0 {
        let mut probs = vec![0.0; n + 1];
        probs[psi] = 1.0;
        return Ok((FiniteBelief { probs }, 0.0));
    }

    let mut unnorm = vec![0.0f64; n];
    let mut sum_unnorm = 0.0;
    for zp in 0..n {
        if prop[zp] == 0.0 {
            continue;
        }
        let q = grid.mode_of(zp);
        let x = grid.representative(zp);
        let g = model.observation_density(&y.yx, y.yq, &x, q)?;
        unnorm[zp] = g * prop[zp];
        sum_unnorm += unnorm[zp];
    }
    if sum_unnorm < 1e-300 {
        return Err(Error::DegenerateObservation);
    }
    let likelihood = sum_unnorm / sum_prop;
    let mut probs = vec![0.0f64; n + 1];
    let mut safe_sum = 0.0;
    for zp in 0..n {
        probs[zp] = unnorm[zp] / likelihood;
        safe_sum += probs[zp];
    }
    probs[psi] = (1.0 - safe_sum).max(0.0);
    Ok((FiniteBelief { probs }, likelihood))
}

/// Discretized observation likelihoods `γ_δ(w | z')` over the safe cells,
/// one row per regular symbol plus the `ψ_y` residual row.
#[derive(Debug, Clone)]
pub struct ObsLikelihoodTable {
    /// `rows[w][z']` for the regular symbols.
    pub rows: Vec<Vec<f64>>,
    /// Residual `1 − Σ_w γ_δ(w|z')`.
    pub psi_row: Vec<f64>,
}

impl ObsLikelihoodTable {
    pub fn build(grid: &StateGrid, model: &PodtshsModel, obs: &ObsGrid) -> Self {
        let n = grid.n_states();
        let w_sds = diag_sds(&model.obs_cov);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(obs.n_symbols());
        for (yq, mode) in obs.per_yq.iter().enumerate() {
            for cell in &mode.cells {
                let mut row = vec![0.0f64; n];
                for (zp, slot) in row.iter_mut().enumerate() {
                    let q = grid.mode_of(zp);
                    let pyq = model.obs_mode_table[q][yq];
                    if pyq == 0.0 {
                        continue;
                    }
                    let mean = &model.c_mats[q] * grid.representative(zp);
                    let mass = match &w_sds {
                        Some(sds) => {
                            let mut p = 1.0;
                            for k in 0..cell.dim() {
                                p *= interval_mass(mean[k], sds[k], cell.lo[k], cell.hi[k]);
                            }
                            p
                        }
                        None => {
                            let comp =
                                GaussianComponent::new(1.0, mean, model.obs_cov.clone())
                                    .expect("valid obs covariance");
                            box_integral(&comp, cell)
                        }
                    };
                    *slot = pyq * mass;
                }
                rows.push(row);
            }
        }
        let mut psi_row = vec![1.0f64; n];
        for row in &rows {
            for (acc, v) in psi_row.iter_mut().zip(row) {
                *acc -= v;
            }
        }
        for v in &mut psi_row {
            *v = v.max(0.0);
        }
        Self { rows, psi_row }
    }

    fn symbol_rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.rows.iter().chain(std::iter::once(&self.psi_row))
    }
}

/// Point-based backup with discretized observations: for each input, select
/// the per-symbol maximizing α against the propagated belief, assemble the
/// candidate vector, and return the best candidate by inner product with the
/// belief. Entries are clamped to [0, 1].
pub fn finite_alpha_backup(
    abs: &FiniteAbstraction,
    obs_table: &ObsLikelihoodTable,
    gamma_next: &[FiniteAlpha],
    b: &FiniteBelief,
) -> FiniteAlpha {
    assert!(!gamma_next.is_empty(), "backup requires a nonempty α-set");
    let grid = &abs.grid;
    let n = grid.n_states();
    let mut best: Option<(f64, FiniteAlpha)> = None;

    for u in 0..abs.tau.n_inputs {
        let mut prop = vec![0.0f64; n];
        for z in 0..n {
            let bz = b.probs[z];
            if bz == 0.0 {
                continue;
            }
            let row = abs.tau.row(u, z);
            for zp in 0..n {
                prop[zp] += bz * row[zp];
            }
        }

        // weighted[z'] accumulates Σ_w γ_δ(w|z')·α*_{(w)}(z').
        let mut weighted = vec![0.0f64; n];
        for obs_row in obs_table.symbol_rows() {
            let mut best_j = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (j, alpha) in gamma_next.iter().enumerate() {
                let score: f64 = (0..n)
                    .map(|zp| alpha.values[zp] * obs_row[zp] * prop[zp])
                    .sum();
                if score > best_score + 1e-15 {
                    best_score = score;
                    best_j = j;
                }
            }
            let chosen = &gamma_next[best_j];
            for zp in 0..n {
                weighted[zp] += chosen.values[zp] * obs_row[zp];
            }
        }

        let mut values = vec![0.0f64; n];
        for (z, slot) in values.iter_mut().enumerate() {
            let row = abs.tau.row(u, z);
            let v: f64 = (0..n).map(|zp| row[zp] * weighted[zp]).sum();
            *slot = v.clamp(0.0, 1.0);
        }
        let v_at_b: f64 = (0..n).map(|z| values[z] * b.probs[z]).sum();
        let better = match &best {
            None => true,
            Some((bv, _)) => v_at_b > bv + 1e-15,
        };
        if better {
            best = Some((v_at_b, FiniteAlpha { values, action: Some(u) }));
        }
    }
    best.expect("at least one input").1
}

// ---------------------------------------------------------------------------
// Binary cache of the transition table
// ---------------------------------------------------------------------------

const TAU_CACHE_MAGIC: &[u8; 8] = b"PTAU0001";

/// Writes the τ_δ table keyed by `key` (row-major 64-bit floats).
pub fn save_tau_cache(abs: &FiniteAbstraction, key: &str, path: &std::path::Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(TAU_CACHE_MAGIC);
    let key_bytes = key.as_bytes();
    out.extend_from_slice(&(key_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(key_bytes);
    out.extend_from_slice(&(abs.tau.n_states as u32).to_le_bytes());
    out.extend_from_slice(&(abs.tau.n_inputs as u32).to_le_bytes());
    for v in &abs.tau.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a cached τ_δ table; returns `None` on any key/shape mismatch.
pub fn load_tau_cache(key: &str, path: &std::path::Path) -> Result<Option<TauTable>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
        let s = bytes.get(*pos..*pos + n)?;
        *pos += n;
        Some(s)
    };
    let Some(magic) = take(&mut pos, 8) else { return Ok(None) };
    if magic != TAU_CACHE_MAGIC {
        return Ok(None);
    }
    let Some(len_bytes) = take(&mut pos, 4) else { return Ok(None) };
    let key_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let Some(key_bytes) = take(&mut pos, key_len) else { return Ok(None) };
    if key_bytes != key.as_bytes() {
        return Ok(None);
    }
    let Some(ns) = take(&mut pos, 4) else { return Ok(None) };
    let n_states = u32::from_le_bytes(ns.try_into().unwrap()) as usize;
    let Some(ni) = take(&mut pos, 4) else { return Ok(None) };
    let n_inputs = u32::from_le_bytes(ni.try_into().unwrap()) as usize;
    let expected = n_inputs * (n_states + 1) * (n_states + 1);
    let Some(raw) = take(&mut pos, expected * 8) else { return Ok(None) };
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Some(TauTable { n_states, n_inputs, data }))
}

// ---------------------------------------------------------------------------
// Backend implementation
// ---------------------------------------------------------------------------

/// The finite-state pipeline as a PBVI backend.
pub struct FiniteBackend {
    model: PodtshsModel,
    pub abs: FiniteAbstraction,
    pub obs_grid: ObsGrid,
    obs_table: ObsLikelihoodTable,
}

impl FiniteBackend {
    pub fn new(model: PodtshsModel, abs: FiniteAbstraction, obs_grid: ObsGrid) -> Self {
        let obs_table = ObsLikelihoodTable::build(&abs.grid, &model, &obs_grid);
        Self { model, abs, obs_grid, obs_table }
    }
}

impl Backend for FiniteBackend {
    type Belief = FiniteBelief;
    type Alpha = FiniteAlpha;

    fn model(&self) -> &PodtshsModel {
        &self.model
    }

    fn name(&self) -> &'static str {
        "finite"
    }

    fn initial_belief(&self) -> FiniteBelief {
        rho_delta(&self.abs.grid, &self.model)
    }

    fn belief_from(&self, init: &InitialDistribution) -> FiniteBelief {
        belief_from_gaussian(&self.abs.grid, &self.model, init)
    }

    fn update(&self, b: &FiniteBelief, u: usize, y: &Observation) -> Result<(FiniteBelief, f64)> {
        finite_belief_update(&self.abs, &self.model, b, u, y)
    }

    fn sample_observation(
        &self,
        b: &FiniteBelief,
        u: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Observation> {
        let grid = &self.abs.grid;
        let n = grid.n_states();
        let safe: f64 = b.probs[..n].iter().sum();
        if safe <= 0.0 {
            return Err(Error::DegenerateObservation);
        }
        for _ in 0..1000 {
            let z = crate::model::sample_categorical(&b.probs[..n], rng);
            let row = self.abs.tau.row(u, z);
            let zp = crate::model::sample_categorical(row, rng);
            if zp == grid.psi() {
                continue;
            }
            let qp = grid.mode_of(zp);
            let x = grid.representative(zp);
            let state = crate::model::HybridState { x, q: qp };
            return Ok(self.model.sample_observation(&state, rng));
        }
        Err(Error::DegenerateObservation)
    }

    fn terminal_alpha(&self) -> FiniteAlpha {
        FiniteAlpha { values: vec![1.0; self.abs.grid.n_states()], action: None }
    }

    fn backup(&self, gamma: &[FiniteAlpha], b: &FiniteBelief) -> FiniteAlpha {
        finite_alpha_backup(&self.abs, &self.obs_table, gamma, b)
    }

    fn alpha_value(&self, alpha: &FiniteAlpha, b: &FiniteBelief) -> f64 {
        alpha.values.iter().zip(&b.probs).map(|(a, p)| a * p).sum()
    }

    fn alpha_action(&self, alpha: &FiniteAlpha) -> Option<usize> {
        alpha.action
    }

    fn alpha_sup(&self, alpha: &FiniteAlpha) -> f64 {
        alpha.values.iter().cloned().fold(0.0f64, f64::max)
    }

    fn rescale(&self, b: &FiniteBelief) -> FiniteBelief {
        let total: f64 = b.probs.iter().sum();
        if total <= 0.0 {
            return b.clone();
        }
        FiniteBelief { probs: b.probs.iter().map(|p| p / total).collect() }
    }

    fn belief_l1(&self, a: &FiniteBelief, b: &FiniteBelief) -> f64 {
        a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).sum()
    }

    fn belief_peak_density(&self, _b: &FiniteBelief) -> f64 {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{thermostat_config, ModeKernel, ModelConfig, PodtshsModel};
    use approx::assert_relative_eq;

    fn thermostat() -> PodtshsModel {
        PodtshsModel::from_config(thermostat_config(0.25, 0.25, 19.0, 5)).unwrap()
    }

    /// Scalar single-mode model on K = [0, 3] with near-identity dynamics.
    fn chain_model(v_var: f64) -> PodtshsModel {
        PodtshsModel::from_config(ModelConfig {
            modes: 1,
            state_dim: 1,
            obs_dim: 1,
            inputs: vec!["u0".into()],
            a: vec![vec![vec![1.0]]],
            g: vec![vec![vec![0.0]]],
            process_cov: vec![vec![v_var]],
            c: vec![vec![vec![1.0]]],
            obs_cov: vec![vec![1.0]],
            mode_kernel: ModeKernel::Constant { table: vec![vec![vec![1.0]]] },
            obs_mode_table: vec![vec![1.0]],
            safe_set: vec![BoxRegion { lo: vec![0.0], hi: vec![3.0] }],
            initial: InitialDistribution {
                mode_probs: vec![1.0],
                mean: vec![1.5],
                cov: vec![vec![0.04]],
            },
            horizon: 2,
        })
        .unwrap()
    }

    #[test]
    fn thermostat_grid_has_45_cells_with_lower_reps() {
        let model = thermostat();
        let grid = build_state_grid(&model, 0.1, RepPoint::Lower).unwrap();
        assert_eq!(grid.n_cells(0), 45);
        assert_eq!(grid.n_cells(1), 45);
        assert_eq!(grid.n_states(), 90);
        assert_relative_eq!(grid.representative(0)[0], 17.5, max_relative = 1e-12);
        assert_relative_eq!(grid.representative(1)[0], 17.6, max_relative = 1e-9);
        assert_relative_eq!(grid.delta_x, 0.1, max_relative = 1e-9);
        // ξ lands in the containing cell.
        let x = DVector::from_vec(vec![17.65]);
        let z = grid.xi(&x, 0).unwrap();
        assert!(grid.cell_box(z).contains(&x));
        assert_eq!(grid.xi(&DVector::from_vec(vec![23.0]), 0), None);
    }

    #[test]
    fn coarse_target_gives_one_cell_and_2d_geometry() {
        let model = thermostat();
        let grid = build_state_grid(&model, 10.0, RepPoint::Lower).unwrap();
        assert_eq!(grid.n_cells(0), 1);

        // 2-D box split 3×3: nine cells, diameter √2·edge.
        let mut cfg = thermostat_config(0.25, 0.25, 19.0, 5);
        cfg.state_dim = 2;
        cfg.obs_dim = 2;
        cfg.a = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2];
        cfg.g = vec![vec![vec![0.0, 0.0]; 2]; 2];
        cfg.process_cov = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        cfg.c = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2];
        cfg.obs_cov = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        cfg.safe_set = vec![BoxRegion { lo: vec![0.0, 0.0], hi: vec![3.0, 3.0] }; 2];
        cfg.initial.mean = vec![1.5, 1.5];
        cfg.initial.cov = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let model2 = PodtshsModel::from_config(cfg).unwrap();
        let grid2 = build_state_grid(&model2, 1.0, RepPoint::Lower).unwrap();
        assert_eq!(grid2.n_cells(0), 9);
        assert_relative_eq!(grid2.delta_x, std::f64::consts::SQRT_2, max_relative = 1e-12);
    }

    #[test]
    fn tau_rows_are_stochastic_and_psi_absorbing() {
        let model = thermostat();
        let abs = FiniteAbstraction::build(&model, 0.25, RepPoint::Lower).unwrap();
        let grid = &abs.grid;
        let psi = grid.psi();
        for u in 0..2 {
            // ψ_s row is the indicator of ψ_s.
            assert_eq!(abs.tau_delta(psi, psi, u), 1.0);
            for zp in 0..grid.n_states() {
                assert_eq!(abs.tau_delta(zp, psi, u), 0.0);
            }
            for z in 0..grid.n_states() {
                let total: f64 = (0..=grid.n_states()).map(|zp| abs.tau_delta(zp, z, u)).sum();
                assert!((total - 1.0).abs() < 1e-12, "row sum {total}");
            }
        }
    }

    #[test]
    fn tau_escaping_dynamics_send_mass_to_psi() {
        // Mean 20 sd outside K: the ψ_s entry takes essentially everything.
        let mut cfg = thermostat_config(0.01, 0.25, 19.0, 5);
        cfg.g = vec![vec![vec![100.0]; 2]; 2];
        let model = PodtshsModel::from_config(cfg).unwrap();
        let abs = FiniteAbstraction::build(&model, 0.5, RepPoint::Lower).unwrap();
        for z in 0..abs.grid.n_states() {
            assert!(abs.tau_delta(abs.grid.psi(), z, 0) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn rho_delta_tail_splits() {
        // Initial mass 10 sd inside K: ψ_s mass negligible.
        let model = chain_model(1.0);
        let grid = build_state_grid(&model, 0.25, RepPoint::Lower).unwrap();
        let rho = rho_delta(&grid, &model);
        assert!(rho.psi_mass() < 1e-12);
        let total: f64 = rho.probs.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);

        // Initial mass far outside K: everything on ψ_s.
        let mut cfg = thermostat_config(0.25, 0.25, 19.0, 5);
        cfg.initial.mean = vec![220.0];
        let far = PodtshsModel::from_config(cfg).unwrap();
        let grid_far = build_state_grid(&far, 0.5, RepPoint::Lower).unwrap();
        let rho_far = rho_delta(&grid_far, &far);
        assert!(rho_far.psi_mass() > 1.0 - 1e-12);

        // Symmetric ρ on a symmetric grid gives a symmetric vector.
        let sym = chain_model(1.0);
        let grid_sym = build_state_grid(&sym, 1.0, RepPoint::Lower).unwrap();
        let rho_sym = rho_delta(&grid_sym, &sym);
        assert_relative_eq!(rho_sym.probs[0], rho_sym.probs[2], max_relative = 1e-12);
    }

    #[test]
    fn belief_update_psi_point_mass_is_absorbing() {
        let model = chain_model(1.0);
        let abs = FiniteAbstraction::build(&model, 1.0, RepPoint::Lower).unwrap();
        let n = abs.grid.n_states();
        let mut probs = vec![0.0; n + 1];
        probs[n] = 1.0;
        let b = FiniteBelief { probs };
        let y = Observation { yx: DVector::from_vec(vec![1.0]), yq: 0 };
        let (out, lik) = finite_belief_update(&abs, &model, &b, 0, &y).unwrap();
        assert_eq!(lik, 0.0);
        assert_eq!(out.psi_mass(), 1.0);
    }

    #[test]
    fn belief_update_matches_hand_computation() {
        // Three cells on [0,3], reps 0/1/2, identity dynamics, V = W = 1.
        let model = chain_model(1.0);
        let abs = FiniteAbstraction::build(&model, 1.0, RepPoint::Lower).unwrap();
        let n = abs.grid.n_states();
        assert_eq!(n, 3);
        let b = FiniteBelief { probs: vec![0.5, 0.3, 0.2, 0.0] };
        let y = Observation { yx: DVector::from_vec(vec![1.2]), yq: 0 };
        let (out, lik) = finite_belief_update(&abs, &model, &b, 0, &y).unwrap();

        // Independent enumeration of the update from erf/φ primitives.
        let phi = |x: f64, mu: f64| {
            (-0.5 * (x - mu) * (x - mu)).exp() / (2.0 * std::f64::consts::PI).sqrt()
        };
        let mass = |mu: f64, lo: f64, hi: f64| interval_mass(mu, 1.0, lo, hi);
        let reps = [0.0, 1.0, 2.0];
        let mut prop = [0.0f64; 3];
        for (z, bz) in b.probs[..3].iter().enumerate() {
            for zp in 0..3 {
                prop[zp] += bz * mass(reps[z], zp as f64, zp as f64 + 1.0);
            }
        }
        let unnorm: Vec<f64> = (0..3).map(|zp| phi(1.2, reps[zp]) * prop[zp]).collect();
        let sum_prop: f64 = prop.iter().sum();
        let sum_unnorm: f64 = unnorm.iter().sum();
        let expected_lik = sum_unnorm / sum_prop;
        assert_relative_eq!(lik, expected_lik, max_relative = 1e-12);
        for zp in 0..3 {
            assert_relative_eq!(out.probs[zp], unnorm[zp] / expected_lik, max_relative = 1e-12);
        }
        let total: f64 = out.probs.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.safe_mass(), sum_prop, max_relative = 1e-9);
    }

    #[test]
    fn belief_update_constant_likelihood_cancels() {
        // With C = 0 and a mode-blind discrete symbol the observation
        // density is constant over the cells, so the safe part of the update
        // is exactly the τ-propagated belief.
        let mut cfg = thermostat_config(0.25, 0.25, 19.5, 5);
        cfg.c = vec![vec![vec![0.0]], vec![vec![0.0]]];
        cfg.obs_mode_table = vec![vec![1.0], vec![1.0]];
        let model = PodtshsModel::from_config(cfg).unwrap();
        let abs = FiniteAbstraction::build(&model, 0.5, RepPoint::Lower).unwrap();
        let backend = FiniteBackend::new(
            model.clone(),
            abs.clone(),
            crate::pbvi::build_obs_grid(&model, 0.5, crate::pbvi::KbarSpec::Epsilon(1e-4)).unwrap(),
        );
        let b = backend.initial_belief();
        let y = Observation { yx: DVector::from_vec(vec![0.0]), yq: 0 };
        let (out, _) = finite_belief_update(&abs, &model, &b, 1, &y).unwrap();
        let n = abs.grid.n_states();
        let mut prop = vec![0.0f64; n];
        for z in 0..n {
            for zp in 0..n {
                prop[zp] += b.probs[z] * abs.tau_delta(zp, z, 1);
            }
        }
        for zp in 0..n {
            assert_relative_eq!(out.probs[zp], prop[zp], max_relative = 1e-9);
        }
    }

    #[test]
    fn backup_perfectly_safe_chain_is_one() {
        // Tiny process noise and mode-preserving dynamics: τ_δ(K|z,u) = 1 to
        // machine precision, so backing up the all-ones terminal α stays 1.
        // Center representatives keep the propagated mass away from ∂K.
        let model = chain_model(1e-8);
        let abs = FiniteAbstraction::build(&model, 1.0, RepPoint::Center).unwrap();
        let obs_grid =
            crate::pbvi::build_obs_grid(&model, 1.0, crate::pbvi::KbarSpec::Epsilon(1e-9)).unwrap();
        let backend = FiniteBackend::new(model.clone(), abs, obs_grid);
        let b = backend.initial_belief();
        let alpha = backend.backup(&[backend.terminal_alpha()], &b);
        for v in &alpha.values {
            assert!((v - 1.0).abs() < 1e-9, "value {v}");
        }
    }

    #[test]
    fn backup_absorbing_model_is_zero() {
        let mut cfg = thermostat_config(0.01, 0.25, 19.0, 5);
        cfg.g = vec![vec![vec![100.0]; 2]; 2];
        let model = PodtshsModel::from_config(cfg).unwrap();
        let abs = FiniteAbstraction::build(&model, 0.5, RepPoint::Lower).unwrap();
        let obs_grid = crate::pbvi::build_obs_grid(
            &model,
            0.5,
            crate::pbvi::KbarSpec::Explicit(BoxRegion::new(vec![16.0], vec![24.0]).unwrap()),
        )
        .unwrap();
        let backend = FiniteBackend::new(model, abs, obs_grid);
        let b = backend.initial_belief();
        let alpha = backend.backup(&[backend.terminal_alpha()], &b);
        for v in &alpha.values {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn backup_matches_exhaustive_enumeration() {
        // 2 cells, 2 observation symbols (+ψ_y), 2 actions: enumerate all
        // |U|·|Γ|^{|W|} candidates of the backup equation directly.
        let mut cfg = thermostat_config(0.25, 0.25, 19.0, 2);
        cfg.modes = 1;
        cfg.a = vec![vec![vec![0.9833]]];
        cfg.g = vec![vec![vec![0.3], vec![0.9]]];
        cfg.c = vec![vec![vec![1.0]]];
        cfg.mode_kernel = ModeKernel::Constant { table: vec![vec![vec![1.0], vec![1.0]]] };
        cfg.obs_mode_table = vec![vec![1.0]];
        cfg.safe_set = vec![BoxRegion { lo: vec![17.5], hi: vec![22.0] }];
        cfg.initial = InitialDistribution {
            mode_probs: vec![1.0],
            mean: vec![19.0],
            cov: vec![vec![1.0]],
        };
        let model = PodtshsModel::from_config(cfg).unwrap();
        let abs = FiniteAbstraction::build(&model, 2.5, RepPoint::Lower).unwrap();
        assert_eq!(abs.grid.n_states(), 2);
        let obs_grid = crate::pbvi::build_obs_grid(
            &model,
            4.0,
            crate::pbvi::KbarSpec::Explicit(BoxRegion::new(vec![16.0], vec![24.0]).unwrap()),
        )
        .unwrap();
        assert_eq!(obs_grid.n_symbols(), 2);
        let obs_table = ObsLikelihoodTable::build(&abs.grid, &model, &obs_grid);
        let backend = FiniteBackend::new(model.clone(), abs.clone(), obs_grid);

        let gamma: Vec<FiniteAlpha> = vec![
            FiniteAlpha { values: vec![1.0, 0.2], action: Some(0) },
            FiniteAlpha { values: vec![0.3, 0.9], action: Some(1) },
        ];
        let b = FiniteBelief { probs: vec![0.6, 0.3, 0.1] };

        let got = backend.backup(&gamma, &b);
        let got_value = backend.alpha_value(&got, &b);

        // Brute force: every (u, per-symbol α assignment).
        let rows: Vec<&Vec<f64>> = obs_table.symbol_rows().collect();
        let n_w = rows.len();
        let mut best = f64::NEG_INFINITY;
        for u in 0..2 {
            let combos = gamma.len().pow(n_w as u32);
            for combo in 0..combos {
                let mut assignment = Vec::with_capacity(n_w);
                let mut c = combo;
                for _ in 0..n_w {
                    assignment.push(c % gamma.len());
                    c /= gamma.len();
                }
                let mut value = 0.0;
                for z in 0..2 {
                    let mut vz = 0.0;
                    for (w, row) in rows.iter().enumerate() {
                        for zp in 0..2 {
                            vz += gamma[assignment[w]].values[zp]
                                * row[zp]
                                * abs.tau_delta(zp, z, u);
                        }
                    }
                    value += vz.clamp(0.0, 1.0) * b.probs[z];
                }
                best = best.max(value);
            }
        }
        assert_relative_eq!(got_value, best, epsilon = 1e-12);
    }

    #[test]
    fn tau_cache_round_trip() {
        let model = chain_model(1.0);
        let abs = FiniteAbstraction::build(&model, 1.0, RepPoint::Lower).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tau.bin");
        let key = format!("{}:1.0:Lower", model.config_hash());
        save_tau_cache(&abs, &key, &path).unwrap();
        let loaded = load_tau_cache(&key, &path).unwrap().expect("cache hit");
        assert_eq!(loaded.data, abs.tau.data);
        assert!(load_tau_cache("other-key", &path).unwrap().is_none());
    }
}
