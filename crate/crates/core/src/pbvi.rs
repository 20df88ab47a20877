//! Point-based value iteration over information states.
//!
//! The engine is generic over the two belief representations through the
//! [`Backend`] trait: it samples a fixed-size set of reachable information
//! states per time level, discretizes the observation space once, and then
//! sweeps backups backward in time Perseus-style (randomized order, skipping
//! points already improved by an α generated at the same level). The
//! resulting per-level α-sets are both the value lower bound and the policy.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::gaussian::BoxRegion;
use crate::model::{InitialDistribution, Observation, PodtshsModel};
use crate::{Error, Result};

/// Improvement slack for the Perseus skip rule and value comparisons.
const VALUE_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Observation grid
// ---------------------------------------------------------------------------

/// Cells of the expanded observation box for one discrete symbol `y^q`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsGridMode {
    /// Expanded box `K̄_{y^q}`; `None` when the symbol has no support.
    pub kbar: Option<BoxRegion>,
    pub cells: Vec<BoxRegion>,
    /// Per-cell representative observation: the in-cell minimizer of the
    /// observation density relative to the safe-set image (for intervals,
    /// the endpoint farther from the image center).
    pub reps: Vec<DVector<f64>>,
}

/// Discretized observation space `W_δ`: per-symbol cell partitions of the
/// expanded boxes plus the implicit residual symbol `ψ_y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsGrid {
    pub per_yq: Vec<ObsGridMode>,
    /// Maximum cell diameter `δ^y`.
    pub delta_y: f64,
    /// Implied tail mass: max over safe states of `γ(Y ∖ K̄ | s)`.
    pub epsilon: f64,
    /// Largest Lebesgue measure among the `K̄_{y^q}`.
    pub lambda_bar: f64,
}

impl ObsGrid {
    /// Total number of regular (non-`ψ_y`) observation symbols.
    pub fn n_symbols(&self) -> usize {
        self.per_yq.iter().map(|m| m.cells.len()).sum()
    }
}

/// How the expanded observation box is determined.
pub enum KbarSpec {
    /// Derive from a tail-mass budget via the Gaussian quantile.
    Epsilon(f64),
    /// Explicit box, shared across all discrete symbols.
    Explicit(BoxRegion),
}

/// Builds the observation grid: `K̄` per discrete symbol, uniform cells of
/// edge at most `delta_y_target`, per-cell representatives at the density
/// minimizer relative to the safe-set image, and the implied tail mass.
pub fn build_obs_grid(
    model: &PodtshsModel,
    delta_y_target: f64,
    spec: KbarSpec,
) -> Result<ObsGrid> {
    if delta_y_target <= 0.0 {
        return Err(Error::contract("delta_y target must be positive"));
    }
    let l = model.obs_dim;
    let lam_w = crate::model::max_eigenvalue(&model.obs_cov);
    let inflate = match &spec {
        KbarSpec::Epsilon(eps) => {
            if !(*eps > 0.0 && *eps < 1.0) {
                return Err(Error::contract("epsilon must lie in (0,1)"));
            }
            let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
            normal.inverse_cdf(1.0 - eps) * lam_w.sqrt()
        }
        KbarSpec::Explicit(_) => 0.0,
    };

    let n_yq = model.n_discrete_obs();
    let mut per_yq = Vec::with_capacity(n_yq);
    for yq in 0..n_yq {
        let support: Vec<usize> = (0..model.n_modes)
            .filter(|&q| model.obs_mode_table[q][yq] > 0.0)
            .collect();
        if support.is_empty() {
            per_yq.push(ObsGridMode { kbar: None, cells: Vec::new(), reps: Vec::new() });
            continue;
        }
        let image = image_bbox(model, &support);
        let kbar = match &spec {
            KbarSpec::Explicit(b) => {
                if b.dim() != l {
                    return Err(Error::contract("explicit kbar dimension mismatch"));
                }
                b.clone()
            }
            KbarSpec::Epsilon(_) => BoxRegion {
                lo: image.lo.iter().map(|v| v - inflate).collect(),
                hi: image.hi.iter().map(|v| v + inflate).collect(),
            },
        };
        let center = image.center();
        let counts: Vec<usize> = (0..l)
            .map(|k| ((kbar.edge(k) / delta_y_target) - 1e-9).ceil().max(1.0) as usize)
            .collect();
        let h: Vec<f64> = (0..l).map(|k| kbar.edge(k) / counts[k] as f64).collect();
        let mut cells = Vec::new();
        let mut reps = Vec::new();
        let mut idx = vec![0usize; l];
        'cells: loop {
            let lo: Vec<f64> = (0..l).map(|k| kbar.lo[k] + idx[k] as f64 * h[k]).collect();
            let hi: Vec<f64> = (0..l).map(|k| kbar.lo[k] + (idx[k] + 1) as f64 * h[k]).collect();
            let rep = DVector::from_iterator(
                l,
                (0..l).map(|k| {
                    if (lo[k] - center[k]).abs() >= (hi[k] - center[k]).abs() {
                        lo[k]
                    } else {
                        hi[k]
                    }
                }),
            );
            cells.push(BoxRegion { lo, hi });
            reps.push(rep);
            for k in 0..l {
                idx[k] += 1;
                if idx[k] < counts[k] {
                    continue 'cells;
                }
                idx[k] = 0;
            }
            break;
        }
        per_yq.push(ObsGridMode { kbar: Some(kbar), cells, reps });
    }

    let delta_y = per_yq
        .iter()
        .flat_map(|m| m.cells.iter().map(|c| c.diameter()))
        .fold(0.0f64, f64::max);
    let lambda_bar = per_yq
        .iter()
        .filter_map(|m| m.kbar.as_ref().map(|b| b.measure()))
        .fold(0.0f64, f64::max);
    let epsilon = implied_tail_mass(model, &per_yq);
    Ok(ObsGrid { per_yq, delta_y, epsilon, lambda_bar })
}

/// Bounding box of `{C(q)·x : x ∈ K_q, q ∈ support}`.
fn image_bbox(model: &PodtshsModel, support: &[usize]) -> BoxRegion {
    let l = model.obs_dim;
    let mut lo = vec![f64::INFINITY; l];
    let mut hi = vec![f64::NEG_INFINITY; l];
    for &q in support {
        let c = &model.c_mats[q];
        let k = &model.safe_set[q];
        let center = k.center();
        let img_center = c * &center;
        for i in 0..l {
            let half: f64 = (0..model.state_dim)
                .map(|j| c[(i, j)].abs() * 0.5 * k.edge(j))
                .sum();
            lo[i] = lo[i].min(img_center[i] - half);
            hi[i] = hi[i].max(img_center[i] + half);
        }
    }
    BoxRegion { lo, hi }
}

/// Max over safe-box corners of the observation mass escaping all `K̄`.
fn implied_tail_mass(model: &PodtshsModel, per_yq: &[ObsGridMode]) -> f64 {
    let m = model.state_dim;
    let mut worst = 0.0f64;
    for q in 0..model.n_modes {
        let k = &model.safe_set[q];
        let n_corners = 1usize << m;
        for corner in 0..n_corners {
            let x = DVector::from_iterator(
                m,
                (0..m).map(|j| if corner >> j & 1 == 0 { k.lo[j] } else { k.hi[j] }),
            );
            let mean = &model.c_mats[q] * &x;
            let comp = crate::gaussian::GaussianComponent::new(1.0, mean, model.obs_cov.clone())
                .expect("valid obs covariance");
            let mut escaped = 0.0;
            for (yq, mode) in per_yq.iter().enumerate() {
                let p_yq = model.obs_mode_table[q][yq];
                if p_yq == 0.0 {
                    continue;
                }
                let inside = match &mode.kbar {
                    Some(b) => crate::gaussian::box_integral(&comp, b),
                    None => 0.0,
                };
                escaped += p_yq * (1.0 - inside).max(0.0);
            }
            worst = worst.max(escaped);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Backend abstraction
// ---------------------------------------------------------------------------

/// One belief-space abstraction: a belief representation, its filter, and its
/// α-function backup. The PBVI engine, the simulator, and the sweeps only
/// talk to this trait.
pub trait Backend: Sync {
    type Belief: Clone + Send + Sync;
    type Alpha: Clone + Send + Sync + Serialize + DeserializeOwned;

    fn model(&self) -> &PodtshsModel;
    fn name(&self) -> &'static str;

    /// The model's initial distribution in this representation.
    fn initial_belief(&self) -> Self::Belief;
    /// An arbitrary Gaussian-times-mode-distribution information state
    /// (sweeps, belief-set seeding).
    fn belief_from(&self, init: &InitialDistribution) -> Self::Belief;

    /// Filter update with a continuous hybrid observation. Returns the
    /// updated belief and the realized likelihood.
    fn update(&self, b: &Self::Belief, u: usize, y: &Observation) -> Result<(Self::Belief, f64)>;

    /// Draws `y ~ p(y | b, u)` (conditioned on safe propagation) by sampling
    /// a state from the belief, propagating it, and observing.
    fn sample_observation(
        &self,
        b: &Self::Belief,
        u: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Observation>;

    fn terminal_alpha(&self) -> Self::Alpha;
    /// Point-based backup of `b` against the next level's α-set. The action
    /// tag of the returned α is always set.
    fn backup(&self, gamma: &[Self::Alpha], b: &Self::Belief) -> Self::Alpha;

    fn alpha_value(&self, alpha: &Self::Alpha, b: &Self::Belief) -> f64;
    fn alpha_action(&self, alpha: &Self::Alpha) -> Option<usize>;
    /// Sup-norm estimate of the α (`ᾱ`); identically 1 for the finite
    /// backend whose vectors are clamped to [0,1].
    fn alpha_sup(&self, alpha: &Self::Alpha) -> f64;

    /// Rescales an information state to unit total mass (conditioning
    /// hygiene; every downstream decision is invariant to positive scaling).
    fn rescale(&self, b: &Self::Belief) -> Self::Belief;
    /// L1 distance between belief representations (δ^σ proxy metric).
    fn belief_l1(&self, a: &Self::Belief, b: &Self::Belief) -> f64;
    /// Max component peak density (`φ*_σ`); 1 for the finite backend.
    fn belief_peak_density(&self, b: &Self::Belief) -> f64;
}

// ---------------------------------------------------------------------------
// Belief sets
// ---------------------------------------------------------------------------

/// One sampled information state with the lineage that generated it.
#[derive(Debug, Clone)]
pub struct SampledBelief<B> {
    pub belief: B,
    /// Likelihood of the observation that produced this belief (None at
    /// level 0).
    pub likelihood: Option<f64>,
    /// Action applied to the parent (None at level 0).
    pub action: Option<usize>,
}

/// Per-time-step collections of sampled beliefs, one chain per initial draw.
#[derive(Debug, Clone)]
pub struct BeliefSet<B> {
    pub levels: Vec<Vec<SampledBelief<B>>>,
}

impl<B> BeliefSet<B> {
    pub fn count(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    /// Realized likelihood sequences, one per chain (levels 1..=N).
    pub fn likelihood_traces(&self) -> Vec<Vec<f64>> {
        let count = self.count();
        (0..count)
            .map(|i| {
                self.levels[1..]
                    .iter()
                    .filter_map(|level| level[i].likelihood)
                    .collect()
            })
            .collect()
    }
}

const OBSERVATION_RETRIES: usize = 100;

/// Samples `count` belief chains over the model horizon: level 0 holds
/// initial states with means uniform on the safe set, each later level holds
/// the filter updates of the previous one under a uniformly random input and
/// an observation drawn from the belief itself.
pub fn sample_belief_sets<Bk: Backend>(
    backend: &Bk,
    count: usize,
    seed: u64,
) -> Result<BeliefSet<Bk::Belief>> {
    if count == 0 {
        return Err(Error::contract("belief count must be at least 1"));
    }
    let model = backend.model();
    let n = model.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut level0 = Vec::with_capacity(count);
    for _ in 0..count {
        let q_anchor = crate::model::sample_categorical(&model.initial.mode_probs, &mut rng);
        let k = &model.safe_set[q_anchor];
        let mean: Vec<f64> = (0..model.state_dim)
            .map(|j| rng.gen_range(k.lo[j]..k.hi[j]))
            .collect();
        let init = InitialDistribution {
            mode_probs: model.initial.mode_probs.clone(),
            mean,
            cov: model.initial.cov.clone(),
        };
        level0.push(SampledBelief {
            belief: backend.rescale(&backend.belief_from(&init)),
            likelihood: None,
            action: None,
        });
    }

    let mut levels = vec![level0];
    for _ in 0..n {
        let prev = levels.last().unwrap();
        let mut next = Vec::with_capacity(count);
        for sb in prev {
            let u = rng.gen_range(0..model.n_inputs());
            let mut updated = None;
            for _ in 0..OBSERVATION_RETRIES {
                let y = backend.sample_observation(&sb.belief, u, &mut rng)?;
                match backend.update(&sb.belief, u, &y) {
                    Ok((b, lik)) => {
                        updated = Some((backend.rescale(&b), lik));
                        break;
                    }
                    Err(Error::DegenerateObservation) => continue,
                    Err(e) => return Err(e),
                }
            }
            let (belief, lik) = updated.ok_or(Error::DegenerateObservation)?;
            next.push(SampledBelief { belief, likelihood: Some(lik), action: Some(u) });
        }
        levels.push(next);
    }
    Ok(BeliefSet { levels })
}

// ---------------------------------------------------------------------------
// Gamma sets, policies, solving
// ---------------------------------------------------------------------------

/// Per-time-step α-sets with action tags; doubles as the extracted policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Policy<A> {
    /// `levels[n]` represents the value-to-go from time `n`; never empty.
    pub levels: Vec<Vec<A>>,
}

impl<A> Policy<A> {
    pub fn horizon(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Maximizing inner product over an α-set, with the winning α's index and
/// action tag. Ties break toward the lowest index.
pub fn evaluate_value<Bk: Backend>(
    backend: &Bk,
    level: &[Bk::Alpha],
    belief: &Bk::Belief,
) -> (f64, Option<usize>, usize) {
    assert!(!level.is_empty(), "α-set level must not be empty");
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, alpha) in level.iter().enumerate() {
        let v = backend.alpha_value(alpha, belief);
        if v > best + VALUE_EPS {
            best = v;
            best_idx = i;
        }
    }
    (best, backend.alpha_action(&level[best_idx]), best_idx)
}

/// Per-run statistics the bound formulas consume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveTrace {
    /// `ᾱ_n` per level (index 0..=N).
    pub alpha_sup: Vec<f64>,
    /// `φ*_{σ,n}` per level: max component peak density over sampled beliefs.
    pub sigma_peak: Vec<f64>,
    /// Realized likelihood sequences of the sampled chains.
    pub likelihood_traces: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SolveResult<A> {
    pub policy: Policy<A>,
    /// `max_α ⟨α, ρ⟩` at time 0.
    pub value: f64,
    pub initial_action: Option<usize>,
    pub trace: SolveTrace,
}

/// Backward Perseus sweep over the sampled belief levels.
///
/// Candidates for one level are independent given the next level's α-set, so
/// they are computed in parallel; insertion then runs serially in a seeded
/// random order, skipping belief points whose value an already-inserted α of
/// this level has reached. Results are independent of worker count.
pub fn solve<Bk: Backend>(
    backend: &Bk,
    beliefs: &BeliefSet<Bk::Belief>,
    seed: u64,
) -> SolveResult<Bk::Alpha> {
    let n = backend.model().horizon;
    assert_eq!(beliefs.levels.len(), n + 1, "belief set levels must match horizon");

    let mut levels: Vec<Vec<Bk::Alpha>> = vec![Vec::new(); n + 1];
    levels[n] = vec![backend.terminal_alpha()];

    for t in (0..n).rev() {
        let gamma_next = &levels[t + 1];
        let points = &beliefs.levels[t];
        let candidates: Vec<Bk::Alpha> = points
            .par_iter()
            .map(|sb| backend.backup(gamma_next, &sb.belief))
            .collect();

        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB4C0 + t as u64));
        order.shuffle(&mut rng);

        let mut added: Vec<Bk::Alpha> = Vec::new();
        for i in order {
            let cand_val = backend.alpha_value(&candidates[i], &points[i].belief);
            let already = added
                .iter()
                .map(|a| backend.alpha_value(a, &points[i].belief))
                .fold(f64::NEG_INFINITY, f64::max);
            if !added.is_empty() && already >= cand_val - VALUE_EPS {
                continue;
            }
            added.push(candidates[i].clone());
        }
        if added.is_empty() {
            added.push(candidates[0].clone());
        }
        levels[t] = added;
    }

    let alpha_sup: Vec<f64> = levels
        .iter()
        .map(|level| level.iter().map(|a| backend.alpha_sup(a)).fold(0.0f64, f64::max))
        .collect();
    let sigma_peak: Vec<f64> = beliefs
        .levels
        .iter()
        .map(|level| {
            level
                .iter()
                .map(|sb| backend.belief_peak_density(&sb.belief))
                .fold(0.0f64, f64::max)
        })
        .collect();

    let rho = backend.initial_belief();
    let (value, initial_action, _) = evaluate_value(backend, &levels[0], &rho);
    SolveResult {
        policy: Policy { levels },
        value,
        initial_action,
        trace: SolveTrace {
            alpha_sup,
            sigma_peak,
            likelihood_traces: beliefs.likelihood_traces(),
        },
    }
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Empirical proxy for the Hausdorff belief-set density δ^σ: the directed
/// max-min L1 distance from a denser probe set to the sampled set, maximized
/// over time levels. The true supremum over the reachable information set is
/// not computable; reports label this value as a proxy.
pub fn hausdorff_delta_sigma<Bk: Backend>(
    backend: &Bk,
    sampled: &BeliefSet<Bk::Belief>,
    probe: &BeliefSet<Bk::Belief>,
) -> f64 {
    assert!(probe.count() > 0, "probe set must be nonempty");
    let mut worst = 0.0f64;
    for (level_s, level_p) in sampled.levels.iter().zip(&probe.levels) {
        for p in level_p {
            let nearest = level_s
                .iter()
                .map(|s| backend.belief_l1(&p.belief, &s.belief))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(nearest);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{thermostat_config, PodtshsModel};

    fn thermostat() -> PodtshsModel {
        PodtshsModel::from_config(thermostat_config(0.25, 0.25, 19.0, 5)).unwrap()
    }

    #[test]
    fn obs_grid_explicit_kbar_matches_example() {
        // K̄ = [16, 24] at δ^y = 0.5 gives 16 cells per discrete symbol.
        let model = thermostat();
        let grid = build_obs_grid(
            &model,
            0.5,
            KbarSpec::Explicit(BoxRegion::new(vec![16.0], vec![24.0]).unwrap()),
        )
        .unwrap();
        assert_eq!(grid.per_yq.len(), 2);
        assert_eq!(grid.per_yq[0].cells.len(), 16);
        assert_eq!(grid.n_symbols(), 32);
        assert!((grid.delta_y - 0.5).abs() < 1e-12);
        assert!((grid.lambda_bar - 8.0).abs() < 1e-12);
        assert!(grid.epsilon < 2e-2 && grid.epsilon > 0.0);
    }

    #[test]
    fn obs_grid_epsilon_inflation_matches_quantile() {
        // ε = 1e-6, scalar w = 1 must inflate by at least 4.75 per side.
        let mut cfg = thermostat_config(0.25, 1.0, 19.0, 5);
        cfg.obs_cov = vec![vec![1.0]];
        let model = PodtshsModel::from_config(cfg).unwrap();
        let grid = build_obs_grid(&model, 0.5, KbarSpec::Epsilon(1e-6)).unwrap();
        let kbar = grid.per_yq[0].kbar.as_ref().unwrap();
        assert!(kbar.lo[0] <= 17.5 - 4.75);
        assert!(kbar.hi[0] >= 22.0 + 4.75);
        assert!(grid.epsilon <= 2e-6);
    }

    #[test]
    fn obs_grid_reps_are_far_endpoints() {
        let model = thermostat();
        let grid = build_obs_grid(
            &model,
            0.5,
            KbarSpec::Explicit(BoxRegion::new(vec![16.0], vec![24.0]).unwrap()),
        )
        .unwrap();
        let mode = &grid.per_yq[0];
        // Image center is 19.75; each representative is the farther endpoint
        // of its cell, never an interior point.
        for (cell, rep) in mode.cells.iter().zip(&mode.reps) {
            assert!(rep[0] == cell.lo[0] || rep[0] == cell.hi[0]);
            let center = 19.75;
            let other = if rep[0] == cell.lo[0] { cell.hi[0] } else { cell.lo[0] };
            assert!((rep[0] - center).abs() >= (other - center).abs() - 1e-12);
        }
    }

    #[test]
    fn mix_seed_is_stable() {
        assert_eq!(mix_seed(42, 1), mix_seed(42, 1));
        assert_ne!(mix_seed(42, 1), mix_seed(42, 2));
        assert_ne!(mix_seed(42, 1), mix_seed(43, 1));
    }
}
