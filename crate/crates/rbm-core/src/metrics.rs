//! Error functionals: the weighted pathwise (strong) error, weighted
//! empirical measures and their test-function (weak) errors, and the exact
//! moment identities of the per-particle force error `chi`.

use std::io::Write;
use std::sync::Arc;

use crate::batching::{for_each_division, n_divisions, random_partition, ENUMERATION_LIMIT};
use crate::error::{RbmError, Result};
use crate::integrator::CoupledTrajectory;
use crate::model::{ParticleState, SpeciesSpec, SystemModel, WeightVector};
use crate::rng::RngStream;

/// Bounded smooth test functions for weak-error measurement.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    /// `phi(x) = c`; bound `|c|`.
    Constant(f64),
    /// `phi(x) = cos(k . x)`; bound 1.
    CosineMode { k: Vec<f64> },
    /// `phi(x) = exp(-|x - center|^2 / width^2)`; bound 1.
    GaussianBump { center: Vec<f64>, width: f64 },
    /// Smoothly cut-off coordinate `phi(x) = scale * tanh(x_axis / scale)`;
    /// bound `scale`, and `phi(x) ~ x_axis` for `|x_axis| << scale`.
    Coordinate { axis: usize, scale: f64 },
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::CosineMode { k } => {
                let dot: f64 = k.iter().zip(x).map(|(a, b)| a * b).sum();
                dot.cos()
            }
            TestFunction::GaussianBump { center, width } => {
                let r2: f64 = center
                    .iter()
                    .zip(x)
                    .map(|(c, xc)| (xc - c) * (xc - c))
                    .sum();
                (-r2 / (width * width)).exp()
            }
            TestFunction::Coordinate { axis, scale } => scale * (x[*axis] / scale).tanh(),
        }
    }

    /// Documented sup bound of `|phi|`.
    pub fn bound(&self) -> f64 {
        match self {
            TestFunction::Constant(c) => c.abs(),
            TestFunction::CosineMode { .. } | TestFunction::GaussianBump { .. } => 1.0,
            TestFunction::Coordinate { scale, .. } => scale.abs(),
        }
    }

    /// The default measurement battery: three cosine modes and one Gaussian
    /// bump.
    pub fn default_battery(dim: usize) -> Vec<TestFunction> {
        let mut battery = Vec::with_capacity(4);
        for (idx, freq) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            let mut k = vec![0.0; dim];
            k[idx % dim] = freq;
            battery.push(TestFunction::CosineMode { k });
        }
        battery.push(TestFunction::GaussianBump {
            center: vec![0.0; dim],
            width: 1.0,
        });
        battery
    }
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ValueWithError {
    pub value: f64,
    pub stderr: f64,
}

/// `<mu^N, phi> = (1/N) sum_j omega_j phi(X^j)`.
pub fn empirical_apply(
    state: &ParticleState,
    weights: &WeightVector,
    phi: &TestFunction,
) -> Result<f64> {
    if weights.len() != state.n_particles() {
        return Err(RbmError::invalid_argument(format!(
            "weights length {} does not match state ({} particles)",
            weights.len(),
            state.n_particles()
        )));
    }
    state.check_finite()?;
    Ok(empirical_apply_unchecked(state, weights, |x| phi.eval(x)))
}

fn empirical_apply_unchecked(
    state: &ParticleState,
    weights: &WeightVector,
    phi: impl Fn(&[f64]) -> f64,
) -> f64 {
    let n = state.n_particles();
    let mut acc = 0.0;
    for (j, &w) in weights.omega().iter().enumerate() {
        acc += w * phi(state.position(j));
    }
    acc / n as f64
}

/// Per-species empirical measure: the sum restricted to particles with the
/// given species label, keeping the common `1/N` normalization so that the
/// per-species values sum to the full measure.
pub fn empirical_apply_species(
    state: &ParticleState,
    weights: &WeightVector,
    species: &SpeciesSpec,
    label: u32,
    phi: &TestFunction,
) -> Result<f64> {
    if weights.len() != state.n_particles() || species.len() != state.n_particles() {
        return Err(RbmError::invalid_argument(
            "weights/species length does not match state",
        ));
    }
    state.check_finite()?;
    let n = state.n_particles();
    let omega = weights.omega();
    let labels = species.labels();
    let mut acc = 0.0;
    for j in 0..n {
        if labels[j] == label {
            acc += omega[j] * phi.eval(state.position(j));
        }
    }
    Ok(acc / n as f64)
}

fn check_ensemble(ensemble: &[CoupledTrajectory]) -> Result<&Arc<SystemModel>> {
    let first = ensemble
        .first()
        .ok_or_else(|| RbmError::invalid_argument("ensemble is empty"))?;
    for traj in &ensemble[1..] {
        if traj.model().as_ref() != first.model().as_ref()
            || traj.n_grid_points() != first.n_grid_points()
        {
            return Err(RbmError::invalid_argument(
                "ensemble trajectories do not share a model and grid",
            ));
        }
    }
    Ok(first.model())
}

fn mean_and_stderr(samples: &[f64]) -> ValueWithError {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let stderr = if samples.len() < 2 {
        0.0
    } else {
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    ValueWithError {
        value: mean,
        stderr,
    }
}

/// The weighted pathwise gap of one realization at grid index `k`:
/// `(1/(2N)) sum_i m_i |X~^i - X^i|^2`.
pub(crate) fn weighted_gap_at(traj: &CoupledTrajectory, k: usize) -> f64 {
    let model = traj.model();
    let n = model.n_particles();
    let d = model.dim();
    let m = model.weights().masses();
    let r = traj.ref_state(k).positions();
    let b = traj.rbm_state(k).positions();
    let mut acc = 0.0;
    for i in 0..n {
        let mut gap2 = 0.0;
        for c in 0..d {
            let z = b[i * d + c] - r[i * d + c];
            gap2 += z * z;
        }
        acc += m[i] * gap2;
    }
    acc / (2.0 * n as f64)
}

/// Per-grid-point weighted gap profile of one realization.
pub(crate) fn strong_gap_profile(traj: &CoupledTrajectory) -> Vec<f64> {
    (0..traj.n_grid_points())
        .map(|k| weighted_gap_at(traj, k))
        .collect()
}

/// The strong error `J(t) = (1/(2N)) sum_i m_i E|X~^i(t) - X^i(t)|^2`,
/// estimated over the ensemble: per-particle squared gaps are averaged over
/// realizations first, then weighted by `m_i/(2N)`. The standard error is
/// that of the per-realization weighted gaps.
pub fn strong_error_at_time(ensemble: &[CoupledTrajectory], t: f64) -> Result<ValueWithError> {
    check_ensemble(ensemble)?;
    let k = ensemble[0].grid_index_of(t)?;
    strong_error_at_index(ensemble, k)
}

/// [`strong_error_at_time`] addressed by grid index.
pub fn strong_error_at_index(ensemble: &[CoupledTrajectory], k: usize) -> Result<ValueWithError> {
    let model = check_ensemble(ensemble)?.clone();
    if k >= ensemble[0].n_grid_points() {
        return Err(RbmError::invalid_argument(format!(
            "grid index {k} out of range"
        )));
    }
    let n = model.n_particles();
    let d = model.dim();
    let r_count = ensemble.len() as f64;

    // Realization-average of |Z^i|^2 per particle, then the weighted sum.
    let mut mean_gap2 = vec![0.0; n];
    for traj in ensemble {
        let r = traj.ref_state(k).positions();
        let b = traj.rbm_state(k).positions();
        for i in 0..n {
            let mut gap2 = 0.0;
            for c in 0..d {
                let z = b[i * d + c] - r[i * d + c];
                gap2 += z * z;
            }
            mean_gap2[i] += gap2;
        }
    }
    let m = model.weights().masses();
    let mut value = 0.0;
    for i in 0..n {
        value += m[i] * mean_gap2[i] / r_count;
    }
    value /= 2.0 * n as f64;

    // Standard error from the per-realization weighted gaps.
    let per_realization: Vec<f64> = ensemble.iter().map(|t| weighted_gap_at(t, k)).collect();
    let stderr = mean_and_stderr(&per_realization).stderr;
    Ok(ValueWithError { value, stderr })
}

/// Per-test-function difference profiles of one realization:
/// `out[phi][k] = <mu_rbm(k), phi> - <mu_ref(k), phi>`.
pub(crate) fn weak_diff_profile(traj: &CoupledTrajectory, battery: &[TestFunction]) -> Vec<Vec<f64>> {
    let model = traj.model();
    let weights = model.weights();
    battery
        .iter()
        .map(|phi| {
            (0..traj.n_grid_points())
                .map(|k| {
                    let a = empirical_apply_unchecked(traj.rbm_state(k), weights, |x| phi.eval(x));
                    let b = empirical_apply_unchecked(traj.ref_state(k), weights, |x| phi.eval(x));
                    a - b
                })
                .collect()
        })
        .collect()
}

/// The weak error at grid index `k`:
/// `E_k = |(1/N) sum_i omega_i E phi(X~^i(k tau)) - (1/N) sum_i omega_i E phi(X^i(k tau))|`.
///
/// Batch values are read from `rbm_ensemble`, reference values from
/// `ref_ensemble`; passing the same ensemble for both yields the coupled
/// (common-noise) estimator, whose standard error comes from the paired
/// per-realization differences.
pub fn weak_error(
    ref_ensemble: &[CoupledTrajectory],
    rbm_ensemble: &[CoupledTrajectory],
    weights: &WeightVector,
    phi: &TestFunction,
    k: usize,
) -> Result<ValueWithError> {
    weak_error_with(ref_ensemble, rbm_ensemble, weights, |x| phi.eval(x), k)
}

pub(crate) fn weak_error_with(
    ref_ensemble: &[CoupledTrajectory],
    rbm_ensemble: &[CoupledTrajectory],
    weights: &WeightVector,
    phi: impl Fn(&[f64]) -> f64 + Copy,
    k: usize,
) -> Result<ValueWithError> {
    let ref_model = check_ensemble(ref_ensemble)?;
    let rbm_model = check_ensemble(rbm_ensemble)?;
    if ref_model.as_ref() != rbm_model.as_ref() {
        return Err(RbmError::invalid_argument(
            "reference and batch ensembles were generated from different models",
        ));
    }
    if weights.len() != ref_model.n_particles() {
        return Err(RbmError::invalid_argument(
            "weights length does not match ensemble model",
        ));
    }
    if k >= ref_ensemble[0].n_grid_points() || k >= rbm_ensemble[0].n_grid_points() {
        return Err(RbmError::invalid_argument(format!(
            "grid index {k} out of range"
        )));
    }
    let rbm_vals: Vec<f64> = rbm_ensemble
        .iter()
        .map(|t| empirical_apply_unchecked(t.rbm_state(k), weights, phi))
        .collect();
    let ref_vals: Vec<f64> = ref_ensemble
        .iter()
        .map(|t| empirical_apply_unchecked(t.ref_state(k), weights, phi))
        .collect();
    let rbm_mean = mean_and_stderr(&rbm_vals);
    let ref_mean = mean_and_stderr(&ref_vals);
    let value = (rbm_mean.value - ref_mean.value).abs();
    let stderr = if rbm_ensemble.len() == ref_ensemble.len() {
        let diffs: Vec<f64> = rbm_vals
            .iter()
            .zip(&ref_vals)
            .map(|(a, b)| a - b)
            .collect();
        mean_and_stderr(&diffs).stderr
    } else {
        (rbm_mean.stderr * rbm_mean.stderr + ref_mean.stderr * ref_mean.stderr).sqrt()
    };
    Ok(ValueWithError { value, stderr })
}

/// Result of checking the force-error moment identities at one state.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ChiMomentReport {
    /// `|E chi_i|` (Euclidean norm of the mean vector).
    pub mean_norm: f64,
    /// `E |chi_i|^2`.
    pub second_moment: f64,
    /// `(1/(p-1) - 1/(N-1)) * Lambda_i`.
    pub predicted: f64,
    /// True when every division was enumerated.
    pub exhaustive: bool,
    pub samples: u64,
}

fn chi_moment_prereqs(model: &SystemModel, state: &ParticleState, i: usize) -> Result<()> {
    model.check_state(state)?;
    let n = model.n_particles();
    if n < 3 {
        return Err(RbmError::invalid_argument(
            "chi moment check needs at least 3 particles (Lambda_i)",
        ));
    }
    if model.batch_size() < 2 {
        return Err(RbmError::invalid_model(
            "chi moment check needs batch size at least 2",
        ));
    }
    if i >= n {
        return Err(RbmError::invalid_argument(format!(
            "particle index {i} out of range for N = {n}"
        )));
    }
    Ok(())
}

/// Exhaustive check of `E chi_i = 0` and
/// `E |chi_i|^2 = (1/(p-1) - 1/(N-1)) Lambda_i` by enumerating every
/// division. Errors when there are more than [`ENUMERATION_LIMIT`]
/// divisions; the Monte Carlo variant covers that regime.
pub fn chi_moment_check(
    model: &SystemModel,
    state: &ParticleState,
    i: usize,
) -> Result<ChiMomentReport> {
    chi_moment_prereqs(model, state, i)?;
    let n = model.n_particles();
    let p = model.batch_size();
    match n_divisions(n, p) {
        Some(c) if c <= ENUMERATION_LIMIT => {}
        _ => {
            return Err(RbmError::invalid_argument(format!(
                "too many divisions to enumerate for N = {n}, p = {p}; use the Monte Carlo variant"
            )))
        }
    }
    let d = model.dim();
    let mut mean = vec![0.0; d];
    let mut second = 0.0;
    let mut count = 0u64;
    let mut failure = None;
    for_each_division(n, p, |partition| {
        if failure.is_some() {
            return;
        }
        match model.chi(i, state, partition) {
            Ok(chi) => {
                for (acc, &c) in mean.iter_mut().zip(&chi) {
                    *acc += c;
                }
                second += chi.iter().map(|c| c * c).sum::<f64>();
                count += 1;
            }
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    finish_chi_report(model, state, i, mean, second, count, true)
}

/// Monte Carlo variant of [`chi_moment_check`] with a declared sample count.
pub fn chi_moment_check_mc(
    model: &SystemModel,
    state: &ParticleState,
    i: usize,
    samples: u64,
    rng: &mut RngStream,
) -> Result<ChiMomentReport> {
    chi_moment_prereqs(model, state, i)?;
    if samples == 0 {
        return Err(RbmError::invalid_argument("sample count must be positive"));
    }
    let d = model.dim();
    let mut mean = vec![0.0; d];
    let mut second = 0.0;
    for _ in 0..samples {
        let partition = random_partition(model.n_particles(), model.batch_size(), rng)?;
        let chi = model.chi(i, state, &partition)?;
        for (acc, &c) in mean.iter_mut().zip(&chi) {
            *acc += c;
        }
        second += chi.iter().map(|c| c * c).sum::<f64>();
    }
    finish_chi_report(model, state, i, mean, second, samples, false)
}

/// Enumerates when feasible, otherwise samples.
pub fn chi_moment_check_auto(
    model: &SystemModel,
    state: &ParticleState,
    i: usize,
    samples: u64,
    rng: &mut RngStream,
) -> Result<ChiMomentReport> {
    let enumerable = matches!(
        n_divisions(model.n_particles(), model.batch_size()),
        Some(c) if c <= ENUMERATION_LIMIT
    );
    if enumerable {
        chi_moment_check(model, state, i)
    } else {
        chi_moment_check_mc(model, state, i, samples, rng)
    }
}

fn finish_chi_report(
    model: &SystemModel,
    state: &ParticleState,
    i: usize,
    mut mean: Vec<f64>,
    second: f64,
    count: u64,
    exhaustive: bool,
) -> Result<ChiMomentReport> {
    let c = count as f64;
    for entry in mean.iter_mut() {
        *entry /= c;
    }
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let second_moment = second / c;
    let n = model.n_particles() as f64;
    let p = model.batch_size() as f64;
    let predicted = (1.0 / (p - 1.0) - 1.0 / (n - 1.0)) * model.lambda_i(i, state)?;
    Ok(ChiMomentReport {
        mean_norm,
        second_moment,
        predicted,
        exhaustive,
        samples: count,
    })
}

/// One row of a convergence table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ErrorRow {
    pub tau: f64,
    pub error: f64,
    pub stderr: f64,
    pub realizations: usize,
    /// Diagnostics accumulated by the sweep (divergences, monotonicity
    /// warnings). Not part of the CSV schema.
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub note: String,
}

/// `(tau, error, stderr)` rows sorted by `tau` descending.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ErrorTable {
    rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub fn new(rows: Vec<ErrorRow>) -> Result<Self> {
        for pair in rows.windows(2) {
            // Strictly descending; the comparison form also rejects NaN.
            if pair[0].tau.partial_cmp(&pair[1].tau) != Some(std::cmp::Ordering::Greater) {
                return Err(RbmError::invalid_argument(
                    "error table rows must be sorted by tau, strictly descending",
                ));
            }
        }
        Ok(ErrorTable { rows })
    }

    pub fn rows(&self) -> &[ErrorRow] {
        &self.rows
    }

    /// CSV with header `tau,error,stderr,realizations`, `.` decimals and LF
    /// line endings.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"tau,error,stderr,realizations\n")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                row.tau, row.error, row.stderr, row.realizations
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}
