//! The particle system definition: weights, species, kernels, noise, and
//! dynamics order, together with exact and random-batch force evaluation.

mod config;
mod forces;
mod kernel;

pub use config::ModelConfig;
pub use kernel::{
    DriftField, InteractionKernel, KernelSpec, PairEntry, PairTable, Parity, RadialKernel,
};

use crate::error::{RbmError, Result};
use crate::rng::{RngStream, StreamPurpose};

/// Per-particle weights `m_j >= 0` (masses or charge magnitudes) with the
/// derived mean `M = (1/N) sum m_j` and normalized weights
/// `omega_j = N m_j / sum m_k`, so that `(1/N) sum omega_j = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    m: Vec<f64>,
    mean: f64,
    omega: Vec<f64>,
}

impl WeightVector {
    pub fn new(m: Vec<f64>) -> Result<Self> {
        if m.is_empty() {
            return Err(RbmError::invalid_argument("weight vector must be non-empty"));
        }
        let mut total = 0.0;
        for (j, &mj) in m.iter().enumerate() {
            if !mj.is_finite() {
                return Err(RbmError::numeric(format!("weight m[{j}] = {mj} is not finite")));
            }
            if mj < 0.0 {
                return Err(RbmError::invalid_argument(format!(
                    "weight m[{j}] = {mj} is negative"
                )));
            }
            total += mj;
        }
        if total <= 0.0 {
            return Err(RbmError::invalid_argument(
                "at least one weight must be positive",
            ));
        }
        let n = m.len() as f64;
        let omega: Vec<f64> = m.iter().map(|&mj| n * mj / total).collect();
        Ok(WeightVector {
            mean: total / n,
            m,
            omega,
        })
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        WeightVector::new(vec![value; n])
    }

    /// Weights drawn i.i.d. uniform in `[lo, hi)` from a dedicated stream of
    /// the master seed.
    pub fn seeded_range(n: usize, lo: f64, hi: f64, master_seed: u64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
            return Err(RbmError::invalid_argument(format!(
                "weight range [{lo}, {hi}) must be finite, ordered, and non-negative"
            )));
        }
        let mut rng = RngStream::new(master_seed, StreamPurpose::Weights, 0, 0);
        WeightVector::new((0..n).map(|_| rng.uniform_in(lo, hi)).collect())
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn masses(&self) -> &[f64] {
        &self.m
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    /// The mean mass `M` of Assumption-style bookkeeping.
    pub fn mean_mass(&self) -> f64 {
        self.mean
    }

    /// The bound `A = max_j m_j`.
    pub fn max_mass(&self) -> f64 {
        self.m.iter().cloned().fold(0.0, f64::max)
    }
}

/// Species labels and optional signed charges `z in {-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesSpec {
    labels: Vec<u32>,
    charges: Option<Vec<i8>>,
}

impl SpeciesSpec {
    /// Single species, no charges.
    pub fn uniform(n: usize) -> Self {
        SpeciesSpec {
            labels: vec![0; n],
            charges: None,
        }
    }

    /// Two species derived from charge signs: positive charges get label 0,
    /// negative charges label 1.
    pub fn from_charges(charges: Vec<i8>) -> Result<Self> {
        Self::validate_charges(&charges)?;
        let labels = charges.iter().map(|&z| if z > 0 { 0 } else { 1 }).collect();
        Ok(SpeciesSpec {
            labels,
            charges: Some(charges),
        })
    }

    pub fn new(labels: Vec<u32>, charges: Option<Vec<i8>>) -> Result<Self> {
        if let Some(z) = &charges {
            Self::validate_charges(z)?;
            if z.len() != labels.len() {
                return Err(RbmError::invalid_argument(format!(
                    "charges length {} does not match labels length {}",
                    z.len(),
                    labels.len()
                )));
            }
        }
        Ok(SpeciesSpec { labels, charges })
    }

    fn validate_charges(charges: &[i8]) -> Result<()> {
        for (j, &z) in charges.iter().enumerate() {
            if z != 1 && z != -1 {
                return Err(RbmError::invalid_argument(format!(
                    "charge z[{j}] = {z} must be +1 or -1"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn charges(&self) -> Option<&[i8]> {
        self.charges.as_deref()
    }
}

/// Order of the dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dynamics {
    /// Overdamped: positions driven directly by forces and noise.
    FirstOrder,
    /// Underdamped: forces and noise act on velocities, with friction `gamma`.
    SecondOrder { gamma: f64 },
}

/// Initial particle positions (velocities start at zero for second-order
/// dynamics).
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// i.i.d. `mean + std * N(0, 1)` in every component.
    Normal { mean: f64, std: f64 },
    /// Explicit positions, flattened row-major `N x d`.
    Positions(Vec<f64>),
}

/// Positions (and velocities, for second-order dynamics) of `N` particles at
/// one time. Storage is row-major `N x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub t: f64,
    dim: usize,
    x: Vec<f64>,
    v: Option<Vec<f64>>,
}

impl ParticleState {
    pub fn new(t: f64, dim: usize, x: Vec<f64>, v: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 || !x.len().is_multiple_of(dim) {
            return Err(RbmError::invalid_argument(format!(
                "position buffer length {} is not a multiple of dimension {dim}",
                x.len()
            )));
        }
        if let Some(v) = &v {
            if v.len() != x.len() {
                return Err(RbmError::invalid_argument(
                    "velocity buffer length differs from position buffer",
                ));
            }
        }
        let state = ParticleState { t, dim, x, v };
        state.check_finite()?;
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_particles(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    pub fn velocities(&self) -> Option<&[f64]> {
        self.v.as_deref()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity(&self, i: usize) -> Option<&[f64]> {
        self.v.as_ref().map(|v| &v[i * self.dim..(i + 1) * self.dim])
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.x
    }

    pub(crate) fn velocities_mut(&mut self) -> Option<&mut [f64]> {
        self.v.as_deref_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|c| c.is_finite())
            && self.v.as_ref().is_none_or(|v| v.iter().all(|c| c.is_finite()))
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(RbmError::numeric(format!(
                "particle state at t = {} contains non-finite entries",
                self.t
            )))
        }
    }
}

/// Parameters for building a [`SystemModel`]. `new` fills in inert defaults
/// (unit weights, one species, zero kernel and drift, zero noise) so tests
/// and callers override only what they care about.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dim: usize,
    pub n_particles: usize,
    pub batch_size: usize,
    pub weights: WeightVector,
    pub species: SpeciesSpec,
    pub kernel: KernelSpec,
    pub sigma: f64,
    pub dynamics: Dynamics,
    pub t_final: f64,
    pub tau: f64,
    pub initial: InitialCondition,
}

impl ModelParams {
    pub fn new(dim: usize, n_particles: usize, batch_size: usize) -> Self {
        ModelParams {
            dim,
            n_particles,
            batch_size,
            weights: WeightVector::uniform(n_particles.max(1), 1.0)
                .expect("uniform unit weights are valid"),
            species: SpeciesSpec::uniform(n_particles),
            kernel: KernelSpec::zero(),
            sigma: 0.0,
            dynamics: Dynamics::FirstOrder,
            t_final: 1.0,
            tau: 0.1,
            initial: InitialCondition::Normal { mean: 0.0, std: 1.0 },
        }
    }

    pub fn build(self) -> Result<SystemModel> {
        SystemModel::new(self)
    }
}

/// Immutable description of the full experiment: dimension, particle count,
/// batch size, weights, species, kernels, noise, dynamics order, horizon,
/// and macro step. All force and simulation operations hang off this type
/// and are pure functions of their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    dim: usize,
    n_particles: usize,
    batch_size: usize,
    weights: WeightVector,
    species: SpeciesSpec,
    kernel: KernelSpec,
    sigma: f64,
    dynamics: Dynamics,
    t_final: f64,
    tau: f64,
    initial: InitialCondition,
}

impl SystemModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        let ModelParams {
            dim,
            n_particles,
            batch_size,
            weights,
            species,
            kernel,
            sigma,
            dynamics,
            t_final,
            tau,
            initial,
        } = params;

        if dim == 0 {
            return Err(RbmError::invalid_model("dimension must be at least 1"));
        }
        if n_particles == 0 {
            return Err(RbmError::invalid_model("particle count must be at least 1"));
        }
        if batch_size == 0 || !n_particles.is_multiple_of(batch_size) {
            return Err(RbmError::invalid_model(format!(
                "batch size {batch_size} must divide the particle count {n_particles}"
            )));
        }
        if weights.len() != n_particles {
            return Err(RbmError::invalid_model(format!(
                "weight vector length {} does not match N = {n_particles}",
                weights.len()
            )));
        }
        if species.len() != n_particles {
            return Err(RbmError::invalid_model(format!(
                "species spec length {} does not match N = {n_particles}",
                species.len()
            )));
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(RbmError::invalid_model(format!(
                "noise amplitude sigma = {sigma} must be finite and non-negative"
            )));
        }
        if let Dynamics::SecondOrder { gamma } = dynamics {
            if !gamma.is_finite() || gamma < 0.0 {
                return Err(RbmError::invalid_model(format!(
                    "friction gamma = {gamma} must be finite and non-negative"
                )));
            }
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(RbmError::invalid_model(format!(
                "final time T = {t_final} must be positive"
            )));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(RbmError::invalid_model(format!(
                "step tau = {tau} must be positive"
            )));
        }
        match &kernel.interaction {
            InteractionKernel::Charged(_) => {
                if species.charges().is_none() {
                    return Err(RbmError::invalid_model(
                        "charged kernel requires species charges",
                    ));
                }
            }
            InteractionKernel::PairwiseTable(table) => {
                for &a in species.labels() {
                    for &b in species.labels() {
                        if table.get(a, b).is_none() {
                            return Err(RbmError::invalid_model(format!(
                                "pairwise table has no entry for species pair ({a}, {b})"
                            )));
                        }
                    }
                }
            }
            _ => {}
        }
        if let InitialCondition::Positions(x) = &initial {
            if x.len() != n_particles * dim {
                return Err(RbmError::invalid_model(format!(
                    "explicit initial positions have length {}, expected N*d = {}",
                    x.len(),
                    n_particles * dim
                )));
            }
            if !x.iter().all(|c| c.is_finite()) {
                return Err(RbmError::numeric("initial positions contain non-finite entries"));
            }
        }
        if let InitialCondition::Normal { mean, std } = initial {
            if !mean.is_finite() || !std.is_finite() || std < 0.0 {
                return Err(RbmError::invalid_model(
                    "initial distribution must have finite mean and non-negative std",
                ));
            }
        }

        Ok(SystemModel {
            dim,
            n_particles,
            batch_size,
            weights,
            species,
            kernel,
            sigma,
            dynamics,
            t_final,
            tau,
            initial,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_batches(&self) -> usize {
        self.n_particles / self.batch_size
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn species(&self) -> &SpeciesSpec {
        &self.species
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dynamics(&self) -> Dynamics {
        self.dynamics
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn initial(&self) -> &InitialCondition {
        &self.initial
    }

    /// Number of macro iterations `N_T = ceil(T / tau)`.
    pub fn n_macro_steps(&self) -> u64 {
        (self.t_final / self.tau).ceil() as u64
    }

    /// Whether the state carries velocities.
    pub fn has_velocities(&self) -> bool {
        matches!(self.dynamics, Dynamics::SecondOrder { .. })
    }

    /// Draws the initial state of one realization from the stream
    /// `(seed, Init, realization)`. Second-order dynamics start at rest.
    pub fn sample_initial(&self, master_seed: u64, realization: u64) -> ParticleState {
        let len = self.n_particles * self.dim;
        let x = match &self.initial {
            InitialCondition::Positions(x) => x.clone(),
            InitialCondition::Normal { mean, std } => {
                let mut rng = RngStream::new(master_seed, StreamPurpose::Init, realization, 0);
                (0..len).map(|_| mean + std * rng.normal()).collect()
            }
        };
        let v = self.has_velocities().then(|| vec![0.0; len]);
        ParticleState::new(0.0, self.dim, x, v).expect("initial state is finite by construction")
    }

    /// The same model with a different macro step (used by tau sweeps; the
    /// weights and species are shared, not resampled).
    pub fn with_tau(&self, tau: f64) -> Result<SystemModel> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(RbmError::invalid_model(format!(
                "step tau = {tau} must be positive"
            )));
        }
        let mut out = self.clone();
        out.tau = tau;
        Ok(out)
    }

    /// Parses a JSON configuration document and builds the model. The seed
    /// feeds seeded weight ranges; it is the same master seed used for
    /// simulation streams.
    pub fn from_config_str(json: &str, master_seed: u64) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(json)
            .map_err(|e| RbmError::config(format!("failed to parse config: {e}")))?;
        cfg.build(master_seed)
    }
}
