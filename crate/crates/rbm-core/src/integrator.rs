//! Euler-Maruyama time stepping for the reference (full interaction) and
//! random-batch systems, coupled through shared Brownian increments.
//!
//! Coupling convention: one realization owns a ladder of fine noise blocks
//! per macro step, drawn from the stream `(seed, Noise, realization, k)`.
//! The reference solver consumes the fine blocks one by one; the batch
//! solver consumes exact partial sums of them. Both solvers see the same
//! initial state, so the pathwise gap `Z^i = X~^i - X^i` measures only the
//! batching (plus step-refinement) error.

use std::sync::Arc;

use crate::batching::{random_partition, BatchPartition};
use crate::error::{RbmError, Result};
use crate::model::{Dynamics, ParticleState, SystemModel};
use crate::rng::{RngStream, StreamPurpose};

/// Gaussian increments for one sub-step: `N x d` entries, i.i.d. with
/// variance `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    dt: f64,
    increments: Vec<f64>,
}

impl NoiseBlock {
    pub fn sample(n_particles: usize, dim: usize, dt: f64, rng: &mut RngStream) -> Self {
        let sqrt_dt = dt.sqrt();
        let increments = (0..n_particles * dim)
            .map(|_| sqrt_dt * rng.normal())
            .collect();
        NoiseBlock { dt, increments }
    }

    /// Exact sum of consecutive blocks; variances add.
    pub fn sum_of(blocks: &[NoiseBlock]) -> NoiseBlock {
        assert!(!blocks.is_empty());
        let mut out = blocks[0].clone();
        for b in &blocks[1..] {
            out.dt += b.dt;
            for (o, &inc) in out.increments.iter_mut().zip(&b.increments) {
                *o += inc;
            }
        }
        out
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
}

/// One coupled realization recorded on the macro grid `t_k = k*tau`.
#[derive(Debug, Clone)]
pub struct CoupledTrajectory {
    model: Arc<SystemModel>,
    times: Vec<f64>,
    ref_states: Vec<ParticleState>,
    rbm_states: Vec<ParticleState>,
    seed: u64,
    realization: u64,
}

impl CoupledTrajectory {
    pub fn model(&self) -> &Arc<SystemModel> {
        &self.model
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_grid_points(&self) -> usize {
        self.times.len()
    }

    pub fn ref_state(&self, k: usize) -> &ParticleState {
        &self.ref_states[k]
    }

    pub fn rbm_state(&self, k: usize) -> &ParticleState {
        &self.rbm_states[k]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn realization(&self) -> u64 {
        self.realization
    }

    #[cfg(test)]
    pub(crate) fn replace_rbm_state(&mut self, k: usize, state: ParticleState) {
        self.rbm_states[k] = state;
    }

    /// Grid index of time `t`, or an error when `t` is off the grid.
    pub fn grid_index_of(&self, t: f64) -> Result<usize> {
        let tau = self.model.tau();
        let k = (t / tau).round() as i64;
        if k < 0 || k as usize >= self.times.len() || (t - k as f64 * tau).abs() > 1e-9 * tau.max(1.0)
        {
            return Err(RbmError::invalid_argument(format!(
                "time {t} is not on the macro grid (tau = {tau})"
            )));
        }
        Ok(k as usize)
    }
}

fn check_positive_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(RbmError::invalid_argument(format!(
            "time step {dt} must be positive"
        )));
    }
    Ok(())
}

fn check_noise(model: &SystemModel, noise: &NoiseBlock) -> Result<()> {
    if noise.increments.len() != model.n_particles() * model.dim() {
        return Err(RbmError::invalid_argument(
            "noise block shape does not match model",
        ));
    }
    Ok(())
}

/// One Euler-Maruyama step of the full-interaction system.
///
/// First order: `x += F_i(x) dt + sigma * dW`. Second order: `x += v dt`,
/// `v += (F_i(x) - gamma v) dt + sigma * dW` with noise acting on the
/// velocities.
pub fn step_reference(
    model: &SystemModel,
    state: &ParticleState,
    dt: f64,
    noise: &NoiseBlock,
) -> Result<ParticleState> {
    model.check_state(state)?;
    check_positive_dt(dt)?;
    check_noise(model, noise)?;
    let mut forces = vec![0.0; model.n_particles() * model.dim()];
    model.forces_full_into(state.positions(), &mut forces)?;
    advance(model, state, dt, &forces, noise)
}

/// `substeps` Euler-Maruyama sub-steps of size `tau/substeps` under a fixed
/// division, consuming one noise block per sub-step. Interactions are
/// evaluated inside batches only, costing O(Np) per sweep.
pub fn step_rbm(
    model: &SystemModel,
    state: &ParticleState,
    partition: &BatchPartition,
    tau: f64,
    substeps: usize,
    noise: &[NoiseBlock],
) -> Result<ParticleState> {
    model.check_state(state)?;
    model.check_partition(partition)?;
    check_positive_dt(tau)?;
    if substeps == 0 {
        return Err(RbmError::invalid_argument("substeps must be at least 1"));
    }
    if noise.len() != substeps {
        return Err(RbmError::invalid_argument(format!(
            "expected {substeps} noise blocks, got {}",
            noise.len()
        )));
    }
    let dt = tau / substeps as f64;
    let mut forces = vec![0.0; model.n_particles() * model.dim()];
    let mut current = state.clone();
    for block in noise {
        check_noise(model, block)?;
        if (block.dt - dt).abs() > 1e-12 * dt.max(1.0) {
            return Err(RbmError::invalid_argument(format!(
                "noise block variance {} does not match sub-step {dt}",
                block.dt
            )));
        }
        model.forces_batch_into(current.positions(), partition, &mut forces)?;
        current = advance(model, &current, dt, &forces, block)?;
    }
    Ok(current)
}

fn advance(
    model: &SystemModel,
    state: &ParticleState,
    dt: f64,
    forces: &[f64],
    noise: &NoiseBlock,
) -> Result<ParticleState> {
    let sigma = model.sigma();
    let mut next = state.clone();
    next.t = state.t + dt;
    match model.dynamics() {
        Dynamics::FirstOrder => {
            let x = next.positions_mut();
            for (c, (&f, &dw)) in forces.iter().zip(&noise.increments).enumerate() {
                x[c] += f * dt + sigma * dw;
            }
        }
        Dynamics::SecondOrder { gamma } => {
            let v_old = state.velocities().expect("checked by check_state");
            {
                let x = next.positions_mut();
                for (c, &vc) in v_old.iter().enumerate() {
                    x[c] += vc * dt;
                }
            }
            let v = next.velocities_mut().expect("checked by check_state");
            for (c, (&f, &dw)) in forces.iter().zip(&noise.increments).enumerate() {
                v[c] += (f - gamma * v[c]) * dt + sigma * dw;
            }
        }
    }
    if !next.is_finite() {
        return Err(RbmError::numeric(format!(
            "state diverged at t = {}",
            next.t
        )));
    }
    Ok(next)
}

/// Runs the `N_T = ceil(T/tau)` macro steps of one coupled realization.
///
/// Per macro step `k`: a fresh division is drawn from the stream
/// `(seed, Partition, realization, k)`; `ref_substeps_per_tau` fine noise
/// blocks are drawn from `(seed, Noise, realization, k)`; the reference
/// solver advances on the fine grid while the batch solver advances in
/// `rbm_substeps_per_tau` sub-steps whose noise is the exact sum of the
/// corresponding fine blocks. Both state sequences are recorded on the
/// macro grid.
pub fn simulate_coupled(
    model: &Arc<SystemModel>,
    seed: u64,
    realization: u64,
    ref_substeps_per_tau: usize,
    rbm_substeps_per_tau: usize,
) -> Result<CoupledTrajectory> {
    if ref_substeps_per_tau == 0 || rbm_substeps_per_tau == 0 {
        return Err(RbmError::invalid_argument(
            "sub-step counts must be at least 1",
        ));
    }
    if !ref_substeps_per_tau.is_multiple_of(rbm_substeps_per_tau) {
        return Err(RbmError::invalid_argument(format!(
            "reference sub-steps {ref_substeps_per_tau} must be a multiple of batch sub-steps {rbm_substeps_per_tau}"
        )));
    }
    let tau = model.tau();
    let n_steps = model.n_macro_steps();
    let fine_dt = tau / ref_substeps_per_tau as f64;
    let blocks_per_rbm_substep = ref_substeps_per_tau / rbm_substeps_per_tau;

    let initial = model.sample_initial(seed, realization);
    let mut ref_state = initial.clone();
    let mut rbm_state = initial;
    let mut times = Vec::with_capacity(n_steps as usize + 1);
    let mut ref_states = Vec::with_capacity(n_steps as usize + 1);
    let mut rbm_states = Vec::with_capacity(n_steps as usize + 1);
    times.push(0.0);
    ref_states.push(ref_state.clone());
    rbm_states.push(rbm_state.clone());

    let diverged = |e: RbmError, k: u64| match e {
        RbmError::NumericDomain(_) => RbmError::Diverged {
            realization,
            step: k,
        },
        other => other,
    };

    for k in 0..n_steps {
        let mut noise_rng = RngStream::new(seed, StreamPurpose::Noise, realization, k);
        let fine_blocks: Vec<NoiseBlock> = (0..ref_substeps_per_tau)
            .map(|_| NoiseBlock::sample(model.n_particles(), model.dim(), fine_dt, &mut noise_rng))
            .collect();

        let mut partition_rng = RngStream::new(seed, StreamPurpose::Partition, realization, k);
        let partition = random_partition(model.n_particles(), model.batch_size(), &mut partition_rng)?;

        for block in &fine_blocks {
            ref_state =
                step_reference(model, &ref_state, fine_dt, block).map_err(|e| diverged(e, k))?;
        }

        let rbm_noise: Vec<NoiseBlock> = fine_blocks
            .chunks_exact(blocks_per_rbm_substep)
            .map(NoiseBlock::sum_of)
            .collect();
        rbm_state = step_rbm(
            model,
            &rbm_state,
            &partition,
            tau,
            rbm_substeps_per_tau,
            &rbm_noise,
        )
        .map_err(|e| diverged(e, k))?;

        // Keep recorded times exactly on the grid; the per-step t field
        // accumulates rounding otherwise.
        let t = (k + 1) as f64 * tau;
        ref_state.t = t;
        rbm_state.t = t;
        times.push(t);
        ref_states.push(ref_state.clone());
        rbm_states.push(rbm_state.clone());
    }

    Ok(CoupledTrajectory {
        model: Arc::clone(model),
        times,
        ref_states,
        rbm_states,
        seed,
        realization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        DriftField, Dynamics, InitialCondition, InteractionKernel, KernelSpec, ModelParams,
        RadialKernel, WeightVector,
    };

    fn noise_zero(n: usize, d: usize, dt: f64) -> NoiseBlock {
        NoiseBlock {
            dt,
            increments: vec![0.0; n * d],
        }
    }

    fn noise_from(dt: f64, increments: Vec<f64>) -> NoiseBlock {
        NoiseBlock { dt, increments }
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let m = ModelParams::new(1, 4, 2).build().unwrap();
        let s = ParticleState::new(0.0, 1, vec![0.5, -1.0, 2.0, 0.0], None).unwrap();
        let next = step_reference(&m, &s, 0.1, &noise_zero(4, 1, 0.1)).unwrap();
        assert_eq!(next.positions(), s.positions());
        assert!((next.t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn linear_drift_explicit_euler() {
        let mut params = ModelParams::new(1, 2, 2);
        params.kernel = KernelSpec::new(InteractionKernel::Zero, DriftField::Linear { gain: -1.0 });
        let m = params.build().unwrap();
        let s = ParticleState::new(0.0, 1, vec![1.0, -2.0], None).unwrap();
        let next = step_reference(&m, &s, 0.1, &noise_zero(2, 1, 0.1)).unwrap();
        assert!((next.positions()[0] - 0.9).abs() <= 1e-15);
        assert!((next.positions()[1] + 1.8).abs() <= 1e-15);
    }

    #[test]
    fn pure_diffusion_reproduces_noise_exactly() {
        let mut params = ModelParams::new(1, 2, 2);
        params.sigma = 1.0;
        let m = params.build().unwrap();
        let s = ParticleState::new(0.0, 1, vec![0.0, 0.0], None).unwrap();
        let noise = noise_from(0.25, vec![0.3, -0.7]);
        let next = step_reference(&m, &s, 0.25, &noise).unwrap();
        assert_eq!(next.positions(), &[0.3, -0.7]);
    }

    #[test]
    fn rbm_step_zero_kernel_matches_reference() {
        let mut params = ModelParams::new(1, 4, 2);
        params.kernel = KernelSpec::new(InteractionKernel::Zero, DriftField::Linear { gain: -0.5 });
        params.sigma = 0.7;
        let m = params.build().unwrap();
        let s = ParticleState::new(0.0, 1, vec![1.0, 2.0, -1.0, 0.5], None).unwrap();
        let noise = noise_from(0.1, vec![0.05, -0.02, 0.11, 0.0]);
        let partition = BatchPartition::from_batches(2, vec![0, 2, 1, 3]).unwrap();
        let a = step_reference(&m, &s, 0.1, &noise).unwrap();
        let b = step_rbm(&m, &s, &partition, 0.1, 1, std::slice::from_ref(&noise)).unwrap();
        assert_eq!(a.positions(), b.positions());
    }

    #[test]
    fn rbm_single_batch_is_bitwise_reference() {
        let mut params = ModelParams::new(1, 4, 4);
        params.weights = WeightVector::new(vec![1.0, 2.0, 0.5, 1.5]).unwrap();
        params.kernel = KernelSpec::new(
            InteractionKernel::RadialSmooth(RadialKernel::Gaussian { amp: 1.0, width: 1.0 }),
            DriftField::Linear { gain: -0.2 },
        );
        params.sigma = 0.3;
        let m = params.build().unwrap();
        let s = ParticleState::new(0.0, 1, vec![0.1, 0.9, -0.4, 1.7], None).unwrap();
        let noise = noise_from(0.125, vec![0.01, -0.03, 0.02, 0.04]);
        let partition = BatchPartition::from_batches(4, vec![0, 1, 2, 3]).unwrap();
        let a = step_reference(&m, &s, 0.125, &noise).unwrap();
        let b = step_rbm(&m, &s, &partition, 0.125, 1, std::slice::from_ref(&noise)).unwrap();
        assert_eq!(a.positions(), b.positions());
    }

    #[test]
    fn rbm_step_hand_computed() {
        // sigma = 0, F(r) = r, division {{0,1},{2,3}}, tau = 0.1, one
        // sub-step: each particle moves toward its batch mate.
        let mut params = ModelParams::new(1, 4, 2);
        params.kernel = KernelSpec::new(
            InteractionKernel::RadialSmooth(RadialKernel::Linear { gain: 1.0 }),
            DriftField::Zero,
        );
        let m = params.build().unwrap();
        let s = ParticleState::new(0.0, 1, vec![0.0, 1.0, 2.0, 3.0], None).unwrap();
        let partition = BatchPartition::from_batches(2, vec![0, 1, 2, 3]).unwrap();
        let noise = noise_zero(4, 1, 0.1);
        let next = step_rbm(&m, &s, &partition, 0.1, 1, std::slice::from_ref(&noise)).unwrap();
        let expected = [-0.1, 1.1, 1.9, 3.1];
        for (got, want) in next.positions().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn step_rbm_validates_noise_blocks() {
        let m = ModelParams::new(1, 4, 2).build().unwrap();
        let s = ParticleState::new(0.0, 1, vec![0.0; 4], None).unwrap();
        let partition = BatchPartition::from_batches(2, vec![0, 1, 2, 3]).unwrap();
        // Wrong block count.
        assert!(step_rbm(&m, &s, &partition, 0.1, 2, &[noise_zero(4, 1, 0.05)]).is_err());
        // Wrong per-block variance.
        assert!(step_rbm(&m, &s, &partition, 0.1, 1, &[noise_zero(4, 1, 0.2)]).is_err());
    }

    fn coupled_model(kernel: KernelSpec, sigma: f64, n: usize, p: usize) -> Arc<SystemModel> {
        let mut params = ModelParams::new(1, n, p);
        params.kernel = kernel;
        params.sigma = sigma;
        params.t_final = 1.0;
        params.tau = 0.25;
        Arc::new(params.build().unwrap())
    }

    fn max_gap(traj: &CoupledTrajectory) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..traj.n_grid_points() {
            let r = traj.ref_state(k).positions();
            let b = traj.rbm_state(k).positions();
            for (a, b) in r.iter().zip(b) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    #[test]
    fn zero_kernel_coupling_gap_is_zero() {
        // Matched grids: the two chains are the same discrete map, so the
        // gap is exactly zero.
        let m = coupled_model(
            KernelSpec::new(InteractionKernel::Zero, DriftField::Linear { gain: -1.0 }),
            1.0,
            4,
            2,
        );
        let traj = simulate_coupled(&m, 42, 0, 1, 1).unwrap();
        assert_eq!(max_gap(&traj), 0.0);

        // Refined reference, no drift: the reference adds the fine noise
        // sequentially while the batch side adds its exact sum, so the gap
        // is rounding only.
        let m = coupled_model(KernelSpec::zero(), 1.0, 4, 2);
        let traj = simulate_coupled(&m, 42, 0, 4, 1).unwrap();
        assert!(max_gap(&traj) <= 1e-14);
    }

    #[test]
    fn single_batch_matched_grids_gap_is_zero() {
        let m = coupled_model(
            KernelSpec::new(
                InteractionKernel::RadialSmooth(RadialKernel::Gaussian { amp: 1.0, width: 1.0 }),
                DriftField::Linear { gain: -0.5 },
            ),
            1.0,
            4,
            4,
        );
        let traj = simulate_coupled(&m, 42, 0, 1, 1).unwrap();
        assert!(max_gap(&traj) <= 1e-13);
    }

    #[test]
    fn constant_kernel_equal_weights_gap_is_numerically_zero() {
        // K_ij = c with equal weights: both force sums collapse to m*c.
        let m = coupled_model(
            KernelSpec::new(
                InteractionKernel::RadialSmooth(RadialKernel::Constant { value: 0.8 }),
                DriftField::Zero,
            ),
            0.5,
            6,
            2,
        );
        let traj = simulate_coupled(&m, 7, 0, 2, 1).unwrap();
        assert!(max_gap(&traj) <= 1e-12);
    }

    #[test]
    fn coupled_trajectories_are_bitwise_deterministic() {
        let m = coupled_model(
            KernelSpec::new(
                InteractionKernel::RadialSmooth(RadialKernel::Gaussian { amp: 1.0, width: 1.0 }),
                DriftField::Linear { gain: -1.0 },
            ),
            1.0,
            8,
            2,
        );
        let a = simulate_coupled(&m, 11, 3, 4, 2).unwrap();
        let b = simulate_coupled(&m, 11, 3, 4, 2).unwrap();
        for k in 0..a.n_grid_points() {
            assert_eq!(a.ref_state(k).positions(), b.ref_state(k).positions());
            assert_eq!(a.rbm_state(k).positions(), b.rbm_state(k).positions());
        }
        let c = simulate_coupled(&m, 11, 4, 4, 2).unwrap();
        assert_ne!(
            a.ref_state(1).positions(),
            c.ref_state(1).positions(),
            "different realizations must differ"
        );
    }

    #[test]
    fn expansive_drift_reports_divergence() {
        let mut params = ModelParams::new(1, 4, 2);
        params.kernel =
            KernelSpec::new(InteractionKernel::Zero, DriftField::Linear { gain: 1e200 });
        params.t_final = 1.0;
        params.tau = 0.25;
        let m = Arc::new(params.build().unwrap());
        match simulate_coupled(&m, 0, 5, 1, 1) {
            Err(crate::error::RbmError::Diverged { realization, .. }) => {
                assert_eq!(realization, 5)
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn incompatible_substep_counts_are_rejected() {
        let m = coupled_model(KernelSpec::zero(), 1.0, 4, 2);
        assert!(simulate_coupled(&m, 0, 0, 3, 2).is_err());
        assert!(simulate_coupled(&m, 0, 0, 0, 1).is_err());
        assert!(simulate_coupled(&m, 0, 0, 4, 2).is_ok());
    }

    #[test]
    fn grid_index_lookup() {
        let m = coupled_model(KernelSpec::zero(), 0.0, 4, 2);
        let traj = simulate_coupled(&m, 0, 0, 1, 1).unwrap();
        assert_eq!(traj.grid_index_of(0.5).unwrap(), 2);
        assert!(traj.grid_index_of(0.3).is_err());
        assert!(traj.grid_index_of(9.0).is_err());
    }

    #[test]
    fn second_order_energy_drift_shrinks_with_dt() {
        // Conservative Hamiltonian case: sigma = 0, gamma = 0, odd kernel.
        // Explicit Euler gains energy at rate O(dt); halving dt should
        // roughly halve the drift over a fixed horizon.
        let energy = |m: &SystemModel, s: &ParticleState| -> f64 {
            let masses = m.weights().masses();
            let mut e = 0.0;
            for i in 0..m.n_particles() {
                let v = s.velocity(i).unwrap();
                e += 0.5 * masses[i] * v.iter().map(|c| c * c).sum::<f64>();
            }
            // Pair potential of F(r) = amp*r*exp(-r^2/w^2):
            // V(r) = (amp*w^2/2) * exp(-r^2/w^2), F = -grad V.
            let (amp, w) = (1.0, 1.0);
            for i in 0..m.n_particles() {
                for j in 0..m.n_particles() {
                    if i == j {
                        continue;
                    }
                    let dx = s.position(i)[0] - s.position(j)[0];
                    let v = 0.5 * amp * w * w * (-dx * dx / (w * w)).exp();
                    e += masses[i] * masses[j] * v / (2.0 * (m.n_particles() as f64 - 1.0));
                }
            }
            e
        };

        let drift_for = |dt: f64| -> f64 {
            let mut params = ModelParams::new(1, 4, 2);
            params.dynamics = Dynamics::SecondOrder { gamma: 0.0 };
            params.kernel = KernelSpec::new(
                InteractionKernel::RadialSmooth(RadialKernel::Gaussian { amp: 1.0, width: 1.0 }),
                DriftField::Zero,
            );
            params.initial = InitialCondition::Positions(vec![-1.0, -0.3, 0.4, 1.2]);
            let m = params.build().unwrap();
            let mut s = m.sample_initial(0, 0);
            // Kick velocities so kinetic energy participates.
            {
                let v = s.velocities_mut().unwrap();
                v.copy_from_slice(&[0.3, -0.1, 0.2, -0.4]);
            }
            let e0 = energy(&m, &s);
            let steps = (1.0 / dt).round() as usize;
            let zero = noise_zero(4, 1, dt);
            for _ in 0..steps {
                s = step_reference(&m, &s, dt, &zero).unwrap();
            }
            (energy(&m, &s) - e0).abs()
        };

        let coarse = drift_for(0.01);
        let fine = drift_for(0.005);
        let ratio = coarse / fine;
        assert!(
            (1.4..=2.8).contains(&ratio),
            "energy drift ratio {ratio} not consistent with O(dt)"
        );
    }
}
