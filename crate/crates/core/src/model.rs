//! The system model: switched-affine dynamics with additive Gaussian noise,
//! hybrid (continuous + mode) observations, per-mode box safe sets, and the
//! analytic constants (Lipschitz bounds, density maxima) the error-bound
//! formulas consume.
//!
//! The continuous state evolves as `x' = A(q') x + g(q', u) + v` with
//! `v ~ N(0, V)` and the mode updating first; observations are
//! `y^x = C(q) x + w`, `w ~ N(0, W)`, plus a discrete symbol `y^q`
//! distributed per mode. Everything here is immutable after construction and
//! all density evaluations are pure.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::gaussian::{gaussian_pdf, BoxRegion};
use crate::{Error, Result};

/// A hybrid state `s = (x, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub x: DVector<f64>,
    pub q: usize,
}

/// A hybrid observation `y = (y^x, y^q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub yx: DVector<f64>,
    pub yq: usize,
}

/// Mode transition kernel `T_q`.
///
/// The constant variant satisfies Assumption 1 (no x-dependence) and is the
/// only one the Gaussian pipeline accepts. `AxisBlend` linearly interpolates
/// between two tables along one state axis, giving an x-dependent kernel with
/// a closed-form Lipschitz constant for the finite pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModeKernel {
    Constant {
        /// `table[q][u][q']`
        table: Vec<Vec<Vec<f64>>>,
    },
    AxisBlend {
        axis: usize,
        x_lo: f64,
        x_hi: f64,
        table_lo: Vec<Vec<Vec<f64>>>,
        table_hi: Vec<Vec<Vec<f64>>>,
    },
}

impl ModeKernel {
    /// `T_q(q' | q, x, u)`.
    pub fn prob(&self, q_next: usize, q: usize, x: &DVector<f64>, u: usize) -> f64 {
        match self {
            ModeKernel::Constant { table } => table[q][u][q_next],
            ModeKernel::AxisBlend { axis, x_lo, x_hi, table_lo, table_hi } => {
                let t = ((x[*axis] - x_lo) / (x_hi - x_lo)).clamp(0.0, 1.0);
                (1.0 - t) * table_lo[q][u][q_next] + t * table_hi[q][u][q_next]
            }
        }
    }

    pub fn is_x_dependent(&self) -> bool {
        match self {
            ModeKernel::Constant { .. } => false,
            ModeKernel::AxisBlend { table_lo, table_hi, .. } => {
                table_lo != table_hi
            }
        }
    }

    /// Lipschitz constant of the kernel in `x` (zero under Assumption 1).
    pub fn h_q(&self) -> f64 {
        match self {
            ModeKernel::Constant { .. } => 0.0,
            ModeKernel::AxisBlend { x_lo, x_hi, table_lo, table_hi, .. } => {
                let mut worst = 0.0f64;
                for (tl, th) in table_lo.iter().zip(table_hi) {
                    for (rl, rh) in tl.iter().zip(th) {
                        for (a, b) in rl.iter().zip(rh) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
                worst / (x_hi - x_lo)
            }
        }
    }

    fn validate(&self, n_modes: usize, n_inputs: usize, state_dim: usize) -> Result<()> {
        let check_table = |table: &Vec<Vec<Vec<f64>>>, path: &str| -> Result<()> {
            if table.len() != n_modes {
                return Err(Error::config(path, format!("expected {n_modes} mode rows")));
            }
            for (q, per_u) in table.iter().enumerate() {
                if per_u.len() != n_inputs {
                    return Err(Error::config(
                        format!("{path}[{q}]"),
                        format!("expected {n_inputs} input rows"),
                    ));
                }
                for (u, row) in per_u.iter().enumerate() {
                    if row.len() != n_modes {
                        return Err(Error::config(
                            format!("{path}[{q}][{u}]"),
                            format!("expected {n_modes} entries"),
                        ));
                    }
                    if row.iter().any(|p| *p < 0.0) {
                        return Err(Error::config(
                            format!("{path}[{q}][{u}]"),
                            "negative probability",
                        ));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        return Err(Error::config(
                            format!("{path}[{q}][{u}]"),
                            format!("row sums to {sum}, expected 1 within 1e-12"),
                        ));
                    }
                }
            }
            Ok(())
        };
        match self {
            ModeKernel::Constant { table } => check_table(table, "mode_kernel.table"),
            ModeKernel::AxisBlend { axis, x_lo, x_hi, table_lo, table_hi } => {
                if *axis >= state_dim {
                    return Err(Error::config("mode_kernel.axis", "axis out of range"));
                }
                if x_lo >= x_hi {
                    return Err(Error::config("mode_kernel.x_lo", "requires x_lo < x_hi"));
                }
                check_table(table_lo, "mode_kernel.table_lo")?;
                check_table(table_hi, "mode_kernel.table_hi")
            }
        }
    }
}

/// Initial hybrid distribution `ρ(x, q) = R_q(q) · φ(x; μ0, P0)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialDistribution {
    pub mode_probs: Vec<f64>,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl InitialDistribution {
    pub fn mean_vec(&self) -> DVector<f64> {
        DVector::from_vec(self.mean.clone())
    }

    pub fn cov_mat(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.cov)
    }
}

/// Lipschitz constants of the transition and observation densities plus the
/// density maxima `φ*_v = (2π)^{−m/2}|V|^{−1/2}` and
/// `φ*_w = (2π)^{−l/2}|W|^{−1/2}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub h_x1: f64,
    pub h_x2: f64,
    pub h_y1: f64,
    pub h_y2: f64,
    pub h_q: f64,
    pub phi_v_star: f64,
    pub phi_w_star: f64,
}

/// The partially observable switched-affine hybrid system.
#[derive(Debug, Clone)]
pub struct PodtshsModel {
    pub n_modes: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub inputs: Vec<String>,
    /// Per-mode dynamics matrix `A(q')`.
    pub a_mats: Vec<DMatrix<f64>>,
    /// Affine offset `g(q', u)`, indexed `[q'][u]`.
    pub g_offsets: Vec<Vec<DVector<f64>>>,
    /// Process noise covariance `V`.
    pub process_cov: DMatrix<f64>,
    /// Per-mode observation matrix `C(q)`.
    pub c_mats: Vec<DMatrix<f64>>,
    /// Observation noise covariance `W`.
    pub obs_cov: DMatrix<f64>,
    pub mode_kernel: ModeKernel,
    /// `Y_q(y^q | q)`, indexed `[q][y^q]`.
    pub obs_mode_table: Vec<Vec<f64>>,
    /// Per-mode safe box `K_q`.
    pub safe_set: Vec<BoxRegion>,
    pub initial: InitialDistribution,
    pub horizon: usize,

    chol_v: Cholesky<f64, Dyn>,
    chol_w: Cholesky<f64, Dyn>,
    chol_p0: Cholesky<f64, Dyn>,
}

/// Raw JSON mirror of [`PodtshsModel`]; validated on conversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modes: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub inputs: Vec<String>,
    pub a: Vec<Vec<Vec<f64>>>,
    pub g: Vec<Vec<Vec<f64>>>,
    pub process_cov: Vec<Vec<f64>>,
    pub c: Vec<Vec<Vec<f64>>>,
    pub obs_cov: Vec<Vec<f64>>,
    pub mode_kernel: ModeKernel,
    pub obs_mode_table: Vec<Vec<f64>>,
    pub safe_set: Vec<BoxRegion>,
    pub initial: InitialDistribution,
    pub horizon: usize,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = if nr == 0 { 0 } else { rows[0].len() };
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

fn spd_cholesky(m: &DMatrix<f64>, path: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::config(path, "matrix must be square"));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * (1.0 + m.abs().max()) {
        return Err(Error::config(path, "matrix must be symmetric"));
    }
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::config(path, "matrix must be positive definite"))
}

impl PodtshsModel {
    pub fn from_config(cfg: ModelConfig) -> Result<Self> {
        let n_modes = cfg.modes;
        let m = cfg.state_dim;
        let l = cfg.obs_dim;
        if n_modes == 0 {
            return Err(Error::config("modes", "need at least one mode"));
        }
        if m == 0 {
            return Err(Error::config("state_dim", "need at least one continuous dimension"));
        }
        if l == 0 || l > m {
            return Err(Error::config("obs_dim", "requires 1 <= obs_dim <= state_dim"));
        }
        if cfg.inputs.is_empty() {
            return Err(Error::config("inputs", "need at least one input"));
        }
        let n_inputs = cfg.inputs.len();

        if cfg.a.len() != n_modes {
            return Err(Error::config("a", format!("expected {n_modes} matrices")));
        }
        let mut a_mats = Vec::with_capacity(n_modes);
        for (q, rows) in cfg.a.iter().enumerate() {
            let mat = rows_to_matrix(rows);
            if mat.nrows() != m || mat.ncols() != m {
                return Err(Error::config(format!("a[{q}]"), format!("expected {m}x{m}")));
            }
            a_mats.push(mat);
        }

        if cfg.g.len() != n_modes {
            return Err(Error::config("g", format!("expected {n_modes} rows")));
        }
        let mut g_offsets = Vec::with_capacity(n_modes);
        for (q, per_u) in cfg.g.iter().enumerate() {
            if per_u.len() != n_inputs {
                return Err(Error::config(format!("g[{q}]"), format!("expected {n_inputs} vectors")));
            }
            let mut row = Vec::with_capacity(n_inputs);
            for (u, v) in per_u.iter().enumerate() {
                if v.len() != m {
                    return Err(Error::config(format!("g[{q}][{u}]"), format!("expected {m} entries")));
                }
                row.push(DVector::from_vec(v.clone()));
            }
            g_offsets.push(row);
        }

        let process_cov = rows_to_matrix(&cfg.process_cov);
        if process_cov.nrows() != m {
            return Err(Error::config("process_cov", format!("expected {m}x{m}")));
        }
        let chol_v = spd_cholesky(&process_cov, "process_cov")?;

        if cfg.c.len() != n_modes {
            return Err(Error::config("c", format!("expected {n_modes} matrices")));
        }
        let mut c_mats = Vec::with_capacity(n_modes);
        for (q, rows) in cfg.c.iter().enumerate() {
            let mat = rows_to_matrix(rows);
            if mat.nrows() != l || mat.ncols() != m {
                return Err(Error::config(format!("c[{q}]"), format!("expected {l}x{m}")));
            }
            c_mats.push(mat);
        }

        let obs_cov = rows_to_matrix(&cfg.obs_cov);
        if obs_cov.nrows() != l {
            return Err(Error::config("obs_cov", format!("expected {l}x{l}")));
        }
        let chol_w = spd_cholesky(&obs_cov, "obs_cov")?;

        cfg.mode_kernel.validate(n_modes, n_inputs, m)?;

        if cfg.obs_mode_table.len() != n_modes {
            return Err(Error::config("obs_mode_table", format!("expected {n_modes} rows")));
        }
        let n_yq = cfg.obs_mode_table[0].len();
        if n_yq == 0 {
            return Err(Error::config("obs_mode_table[0]", "need at least one discrete observation"));
        }
        for (q, row) in cfg.obs_mode_table.iter().enumerate() {
            if row.len() != n_yq {
                return Err(Error::config(format!("obs_mode_table[{q}]"), "ragged table"));
            }
            if row.iter().any(|p| *p < 0.0) {
                return Err(Error::config(format!("obs_mode_table[{q}]"), "negative probability"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::config(
                    format!("obs_mode_table[{q}]"),
                    format!("row sums to {sum}, expected 1 within 1e-12"),
                ));
            }
        }

        if cfg.safe_set.len() != n_modes {
            return Err(Error::config("safe_set", format!("expected {n_modes} boxes")));
        }
        for (q, region) in cfg.safe_set.iter().enumerate() {
            if region.dim() != m {
                return Err(Error::config(format!("safe_set[{q}]"), format!("expected dimension {m}")));
            }
            if region.lo.iter().zip(&region.hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite())
            {
                return Err(Error::config(
                    format!("safe_set[{q}]"),
                    "safe boxes must be nonempty and compact",
                ));
            }
        }

        if cfg.initial.mode_probs.len() != n_modes {
            return Err(Error::config("initial.mode_probs", format!("expected {n_modes} entries")));
        }
        let rsum: f64 = cfg.initial.mode_probs.iter().sum();
        if (rsum - 1.0).abs() > 1e-12 || cfg.initial.mode_probs.iter().any(|p| *p < 0.0) {
            return Err(Error::config("initial.mode_probs", "must be a distribution (1e-12)"));
        }
        if cfg.initial.mean.len() != m {
            return Err(Error::config("initial.mean", format!("expected {m} entries")));
        }
        let p0 = rows_to_matrix(&cfg.initial.cov);
        if p0.nrows() != m {
            return Err(Error::config("initial.cov", format!("expected {m}x{m}")));
        }
        let chol_p0 = spd_cholesky(&p0, "initial.cov")?;

        Ok(Self {
            n_modes,
            state_dim: m,
            obs_dim: l,
            inputs: cfg.inputs,
            a_mats,
            g_offsets,
            process_cov,
            c_mats,
            obs_cov,
            mode_kernel: cfg.mode_kernel,
            obs_mode_table: cfg.obs_mode_table,
            safe_set: cfg.safe_set,
            initial: cfg.initial,
            horizon: cfg.horizon,
            chol_v,
            chol_w,
            chol_p0,
        })
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(json)?;
        Self::from_config(cfg)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_discrete_obs(&self) -> usize {
        self.obs_mode_table[0].len()
    }

    /// Extra requirements of the Gaussian-mixture pipeline: `A(q)` and `C(q)`
    /// invertible (Assumption 2) and `T_q` independent of `x` (Assumption 1).
    pub fn validate_gaussian_pipeline(&self) -> Result<()> {
        if self.mode_kernel.is_x_dependent() {
            return Err(Error::contract(
                "gaussian pipeline requires an x-independent mode kernel (Assumption 1)",
            ));
        }
        if self.obs_dim != self.state_dim {
            return Err(Error::contract(
                "gaussian pipeline requires square invertible C (Assumption 2)",
            ));
        }
        for (q, a) in self.a_mats.iter().enumerate() {
            if a.determinant().abs() < 1e-10 {
                return Err(Error::contract(format!("A({q}) is singular (Assumption 2)")));
            }
        }
        for (q, c) in self.c_mats.iter().enumerate() {
            if c.clone().determinant().abs() < 1e-10 {
                return Err(Error::contract(format!("C({q}) is singular (Assumption 2)")));
            }
        }
        Ok(())
    }

    /// Mean of the continuous transition, `A(q') x + g(q', u)`.
    pub fn transition_mean(&self, q_next: usize, x: &DVector<f64>, u: usize) -> DVector<f64> {
        &self.a_mats[q_next] * x + &self.g_offsets[q_next][u]
    }

    /// `τ_x(x' | q', x, u) = φ(x'; A(q')x + g(q',u), V)`.
    pub fn continuous_transition_density(
        &self,
        x_next: &DVector<f64>,
        q_next: usize,
        x: &DVector<f64>,
        u: usize,
    ) -> Result<f64> {
        if x_next.len() != self.state_dim || x.len() != self.state_dim {
            return Err(Error::contract("state dimension mismatch"));
        }
        if q_next >= self.n_modes || u >= self.n_inputs() {
            return Err(Error::contract("mode or input index out of range"));
        }
        let mean = self.transition_mean(q_next, x, u);
        Ok(gaussian_pdf(x_next, &mean, &self.process_cov))
    }

    /// `γ(y | s) = φ(y^x; C(q)x, W) · Y_q(y^q | q)`.
    pub fn observation_density(
        &self,
        yx: &DVector<f64>,
        yq: usize,
        x: &DVector<f64>,
        q: usize,
    ) -> Result<f64> {
        if yx.len() != self.obs_dim || x.len() != self.state_dim {
            return Err(Error::contract("observation dimension mismatch"));
        }
        if q >= self.n_modes {
            return Err(Error::contract("mode index out of range"));
        }
        if yq >= self.n_discrete_obs() {
            return Err(Error::contract("unknown discrete observation symbol"));
        }
        let mean = &self.c_mats[q] * x;
        Ok(gaussian_pdf(yx, &mean, &self.obs_cov) * self.obs_mode_table[q][yq])
    }

    /// Continuous observation density only, `φ(y^x; C(q)x, W)`.
    pub fn obs_density_continuous(&self, yx: &DVector<f64>, x: &DVector<f64>, q: usize) -> f64 {
        let mean = &self.c_mats[q] * x;
        gaussian_pdf(yx, &mean, &self.obs_cov)
    }

    /// Spectral-norm and Gaussian-derivative maxima consumed by the bound
    /// formulas. The second-argument constants carry the matrix norm; the
    /// first-argument ones use the same maximizer with the identity in its
    /// place.
    pub fn compute_lipschitz_constants(&self) -> Result<LipschitzConstants> {
        let m = self.state_dim as f64;
        let l = self.obs_dim as f64;
        let det_v = self.process_cov.determinant();
        let det_w = self.obs_cov.determinant();
        if det_v <= 0.0 || det_w <= 0.0 {
            return Err(Error::contract("singular noise covariance"));
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let phi_v_star = two_pi.powf(-m / 2.0) / det_v.sqrt();
        let phi_w_star = two_pi.powf(-l / 2.0) / det_w.sqrt();
        let lam_v = max_eigenvalue(&self.process_cov);
        let lam_w = max_eigenvalue(&self.obs_cov);
        let e_half = (-0.5f64).exp();
        let max_norm_a = self.a_mats.iter().map(spectral_norm).fold(0.0f64, f64::max);
        let max_norm_c = self.c_mats.iter().map(spectral_norm).fold(0.0f64, f64::max);
        Ok(LipschitzConstants {
            h_x1: e_half * phi_v_star / lam_v.sqrt(),
            h_x2: max_norm_a * e_half * phi_v_star / lam_v.sqrt(),
            h_y1: e_half * phi_w_star / lam_w.sqrt(),
            h_y2: max_norm_c * e_half * phi_w_star / lam_w.sqrt(),
            h_q: self.mode_kernel.h_q(),
            phi_v_star,
            phi_w_star,
        })
    }

    // --- sampling (used by the simulator and belief-set generation) ---

    pub fn sample_initial<R: Rng>(&self, rng: &mut R) -> HybridState {
        let q = sample_categorical(&self.initial.mode_probs, rng);
        let z = standard_normal_vec(self.state_dim, rng);
        let x = self.initial.mean_vec() + self.chol_p0.l() * z;
        HybridState { x, q }
    }

    pub fn sample_mode_transition<R: Rng>(
        &self,
        q: usize,
        x: &DVector<f64>,
        u: usize,
        rng: &mut R,
    ) -> usize {
        let probs: Vec<f64> = (0..self.n_modes)
            .map(|qn| self.mode_kernel.prob(qn, q, x, u))
            .collect();
        sample_categorical(&probs, rng)
    }

    pub fn sample_continuous_transition<R: Rng>(
        &self,
        q_next: usize,
        x: &DVector<f64>,
        u: usize,
        rng: &mut R,
    ) -> DVector<f64> {
        let z = standard_normal_vec(self.state_dim, rng);
        self.transition_mean(q_next, x, u) + self.chol_v.l() * z
    }

    pub fn sample_observation<R: Rng>(&self, state: &HybridState, rng: &mut R) -> Observation {
        let z = standard_normal_vec(self.obs_dim, rng);
        let yx = &self.c_mats[state.q] * &state.x + self.chol_w.l() * z;
        let yq = sample_categorical(&self.obs_mode_table[state.q], rng);
        Observation { yx, yq }
    }

    pub fn is_safe(&self, state: &HybridState) -> bool {
        self.safe_set[state.q].contains(&state.x)
    }

    /// Stable hash of the model configuration, embedded in artifacts.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let cfg = self.to_config();
        let json = serde_json::to_string(&cfg).expect("model serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_config(&self) -> ModelConfig {
        let mat_rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
        };
        ModelConfig {
            modes: self.n_modes,
            state_dim: self.state_dim,
            obs_dim: self.obs_dim,
            inputs: self.inputs.clone(),
            a: self.a_mats.iter().map(&mat_rows).collect(),
            g: self
                .g_offsets
                .iter()
                .map(|per_u| per_u.iter().map(|v| v.iter().cloned().collect()).collect())
                .collect(),
            process_cov: mat_rows(&self.process_cov),
            c: self.c_mats.iter().map(&mat_rows).collect(),
            obs_cov: mat_rows(&self.obs_cov),
            mode_kernel: self.mode_kernel.clone(),
            obs_mode_table: self.obs_mode_table.clone(),
            safe_set: self.safe_set.clone(),
            initial: self.initial.clone(),
            horizon: self.horizon,
        }
    }
}

pub(crate) fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        draw -= p;
        if draw <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

pub(crate) fn standard_normal_vec<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    max_eigenvalue(&gram).max(0.0).sqrt()
}

pub(crate) fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The §-style thermostat benchmark: one heated room, heater on/off modes,
/// `x' = (1−b)x + c·q' + b·x_a + v` with `b=0.0167`, `c=0.8`, `x_a=6`,
/// temperature kept in `[17.5, 22]`, mode perfectly observed.
pub fn thermostat_config(v_var: f64, w_var: f64, mu0: f64, horizon: usize) -> ModelConfig {
    let b = 0.0167;
    let c = 0.8;
    let xa = 6.0;
    let a = 1.0 - b;
    ModelConfig {
        modes: 2,
        state_dim: 1,
        obs_dim: 1,
        inputs: vec!["off".into(), "on".into()],
        a: vec![vec![vec![a]], vec![vec![a]]],
        g: vec![
            vec![vec![b * xa], vec![b * xa]],
            vec![vec![c + b * xa], vec![c + b * xa]],
        ],
        process_cov: vec![vec![v_var]],
        c: vec![vec![vec![1.0]], vec![vec![1.0]]],
        obs_cov: vec![vec![w_var]],
        // Commanded mode reached w.p. 0.9, otherwise the previous mode holds.
        mode_kernel: ModeKernel::Constant {
            table: vec![
                vec![vec![1.0, 0.0], vec![0.1, 0.9]],
                vec![vec![0.9, 0.1], vec![0.0, 1.0]],
            ],
        },
        obs_mode_table: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        safe_set: vec![
            BoxRegion { lo: vec![17.5], hi: vec![22.0] },
            BoxRegion { lo: vec![17.5], hi: vec![22.0] },
        ],
        initial: InitialDistribution {
            mode_probs: vec![1.0, 0.0],
            mean: vec![mu0],
            cov: vec![vec![1.0]],
        },
        horizon,
    }
}
