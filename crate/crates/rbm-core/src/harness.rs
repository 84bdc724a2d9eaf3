//! Tau sweeps, convergence-order fits, and per-step cost benchmarks.
//!
//! A sweep distributes `(tau, realization)` work items over the rayon
//! worker pool and aggregates in a fixed order, so its output is
//! byte-identical for any worker count.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{RbmError, Result};
use crate::integrator::{simulate_coupled, step_reference, step_rbm, NoiseBlock};
use crate::metrics::{
    strong_gap_profile, weak_diff_profile, ErrorRow, ErrorTable, TestFunction,
};
use crate::model::{ModelConfig, SystemModel};
use crate::rng::{RngStream, StreamPurpose};

/// Which error functional a sweep measures.
#[derive(Debug, Clone)]
pub enum MetricKind {
    /// Supremum over grid times of the weighted pathwise error.
    Strong,
    /// Supremum over grid times and the test-function battery of the
    /// empirical-measure error.
    Weak { battery: Vec<TestFunction> },
}

/// A tau sweep: base model, decreasing step list, realization count,
/// reference refinement, and metric.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub model: Arc<SystemModel>,
    /// Strictly decreasing; every entry must divide the horizon `T`.
    pub tau_list: Vec<f64>,
    pub realizations: usize,
    /// Reference sub-steps per batch sub-step; the reference grid is this
    /// many times finer than the batch grid.
    pub ref_refinement: usize,
    /// Batch-solver sub-steps per macro step (1 reproduces the plain
    /// algorithm).
    pub rbm_substeps: usize,
    pub metric: MetricKind,
    pub seed: u64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.tau_list.is_empty() {
            return Err(RbmError::invalid_argument("tau list is empty"));
        }
        for pair in self.tau_list.windows(2) {
            // Strictly decreasing; the negation also rejects NaN entries.
            if pair[0].partial_cmp(&pair[1]) != Some(std::cmp::Ordering::Greater) {
                return Err(RbmError::invalid_argument(
                    "tau list must be strictly decreasing",
                ));
            }
        }
        let t_final = self.model.t_final();
        for &tau in &self.tau_list {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(RbmError::invalid_argument(format!("bad tau {tau}")));
            }
            let steps = t_final / tau;
            if (steps - steps.round()).abs() > 1e-12 * steps.max(1.0) {
                return Err(RbmError::invalid_argument(format!(
                    "tau = {tau} does not divide T = {t_final}; grids would not align"
                )));
            }
        }
        if self.realizations == 0 {
            return Err(RbmError::invalid_argument("need at least one realization"));
        }
        if self.ref_refinement == 0 || self.rbm_substeps == 0 {
            return Err(RbmError::invalid_argument(
                "refinement and sub-step counts must be at least 1",
            ));
        }
        if let MetricKind::Weak { battery } = &self.metric {
            if battery.is_empty() {
                return Err(RbmError::invalid_argument("weak metric needs a test battery"));
            }
        }
        Ok(())
    }

    fn ref_substeps_per_tau(&self) -> usize {
        self.ref_refinement * self.rbm_substeps
    }
}

/// Least-squares power-law fit of an error table in log-log space.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Per-used-row residuals `(tau, log(error) - fit)`.
    pub residuals: Vec<(f64, f64)>,
    /// Rows excluded from the fit with the reason.
    pub excluded: Vec<(f64, String)>,
}

/// A fit either succeeds or is refused with a diagnostic; a refused fit is
/// not a hard error for the sweep (the table is still valid output).
#[derive(Debug, Clone, serde::Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitOutcome {
    Fitted(OrderFit),
    Refused { reason: String },
}

impl FitOutcome {
    pub fn fitted(&self) -> Option<&OrderFit> {
        match self {
            FitOutcome::Fitted(fit) => Some(fit),
            FitOutcome::Refused { .. } => None,
        }
    }

    pub fn is_refused(&self) -> bool {
        matches!(self, FitOutcome::Refused { .. })
    }
}

/// Output of one sweep: the measured table plus the order fit (or the
/// refusal diagnostic).
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepResult {
    pub table: ErrorTable,
    pub fit: FitOutcome,
}

/// Ordinary least squares of `log error` against `log tau`.
///
/// Rows are usable when their error is finite, positive, not flagged by the
/// sweep, and clears the noise floor (`error > 10 * stderr`). Refuses the
/// fit for an all-zero table or fewer than 3 usable rows.
pub fn fit_order(table: &ErrorTable) -> Result<OrderFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut taus = Vec::new();
    let mut excluded = Vec::new();
    let mut zero_rows = 0usize;
    for row in table.rows() {
        if !row.note.is_empty() && row.note.contains("diverged") {
            excluded.push((row.tau, format!("flagged: {}", row.note)));
            continue;
        }
        if !row.error.is_finite() {
            excluded.push((row.tau, "non-finite error".to_string()));
            continue;
        }
        if row.error <= 0.0 {
            zero_rows += 1;
            excluded.push((row.tau, "zero error".to_string()));
            continue;
        }
        if row.error <= 10.0 * row.stderr {
            excluded.push((row.tau, "noise-dominated (error <= 10 * stderr)".to_string()));
            continue;
        }
        xs.push(row.tau.ln());
        ys.push(row.error.ln());
        taus.push(row.tau);
    }
    if zero_rows == table.rows().len() {
        return Err(RbmError::FitRefused("all-zero error table".to_string()));
    }
    if xs.len() < 3 {
        return Err(RbmError::FitRefused(format!(
            "only {} usable rows (need 3)",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(&ys) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(RbmError::FitRefused(
            "degenerate tau values (no spread)".to_string(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut residuals = Vec::with_capacity(xs.len());
    for ((&x, &y), &tau) in xs.iter().zip(&ys).zip(&taus) {
        let r = y - (intercept + slope * x);
        residuals.push((tau, r));
        ss_res += r * r;
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res.abs() < 1e-24 {
        1.0
    } else {
        0.0
    };
    Ok(OrderFit {
        slope,
        intercept,
        r_squared,
        residuals,
        excluded,
    })
}

fn fit_outcome(table: &ErrorTable) -> FitOutcome {
    match fit_order(table) {
        Ok(fit) => FitOutcome::Fitted(fit),
        Err(RbmError::FitRefused(reason)) => FitOutcome::Refused { reason },
        Err(other) => FitOutcome::Refused {
            reason: other.to_string(),
        },
    }
}

/// Flags rows whose error grew as tau shrank beyond twice the combined
/// standard errors. Soft diagnostic, never fatal.
fn flag_non_monotone(rows: &mut [ErrorRow]) {
    for idx in 1..rows.len() {
        let prev = rows[idx - 1].error;
        let prev_se = rows[idx - 1].stderr;
        let cur = rows[idx].error;
        let cur_se = rows[idx].stderr;
        if prev.is_finite() && cur.is_finite() && cur > prev + 2.0 * (prev_se + cur_se) {
            push_note(&mut rows[idx], "non-monotone vs previous row");
        }
    }
}

fn push_note(row: &mut ErrorRow, note: &str) {
    if !row.note.is_empty() {
        row.note.push_str("; ");
    }
    row.note.push_str(note);
}

/// Per-realization outcome of one `(tau, realization)` work item.
enum ItemOutcome {
    Strong(Vec<f64>),
    Weak(Vec<Vec<f64>>),
    Diverged,
}

fn run_items(plan: &SweepPlan, models: &[Arc<SystemModel>]) -> Result<Vec<Vec<ItemOutcome>>> {
    let jobs: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|ti| (0..plan.realizations as u64).map(move |r| (ti, r)))
        .collect();
    let battery = match &plan.metric {
        MetricKind::Strong => None,
        MetricKind::Weak { battery } => Some(battery.clone()),
    };
    let outcomes: Vec<(usize, ItemOutcome)> = jobs
        .par_iter()
        .map(|&(ti, r)| {
            let model = &models[ti];
            let traj = simulate_coupled(
                model,
                plan.seed,
                r,
                plan.ref_substeps_per_tau(),
                plan.rbm_substeps,
            );
            let outcome = match traj {
                Ok(traj) => match &battery {
                    None => ItemOutcome::Strong(strong_gap_profile(&traj)),
                    Some(battery) => ItemOutcome::Weak(weak_diff_profile(&traj, battery)),
                },
                Err(RbmError::Diverged { .. }) => ItemOutcome::Diverged,
                Err(e) => return Err(e),
            };
            Ok((ti, outcome))
        })
        .collect::<Result<Vec<_>>>()?;

    // Regroup in (tau, realization) order; rayon's collect preserves the
    // job order, so this is deterministic for any worker count.
    let mut grouped: Vec<Vec<ItemOutcome>> = (0..models.len()).map(|_| Vec::new()).collect();
    for (ti, outcome) in outcomes {
        grouped[ti].push(outcome);
    }
    Ok(grouped)
}

fn stderr_of(samples: &[f64], mean: f64) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 0.0;
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// For each tau, runs the coupled realizations and records the supremum
/// over grid times of the strong error `J`, then fits the order.
pub fn run_strong_sweep(plan: &SweepPlan) -> Result<SweepResult> {
    plan.validate()?;
    if !matches!(plan.metric, MetricKind::Strong) {
        return Err(RbmError::invalid_argument(
            "plan metric is not the strong error",
        ));
    }
    let models = tau_models(plan)?;
    let grouped = run_items(plan, &models)?;

    let mut rows = Vec::with_capacity(models.len());
    for (ti, outcomes) in grouped.iter().enumerate() {
        let mut profiles: Vec<&Vec<f64>> = Vec::new();
        let mut diverged = 0usize;
        for outcome in outcomes {
            match outcome {
                ItemOutcome::Strong(profile) => profiles.push(profile),
                ItemOutcome::Diverged => diverged += 1,
                ItemOutcome::Weak(_) => unreachable!("strong sweep produced weak outcome"),
            }
        }
        let tau = plan.tau_list[ti];
        if diverged > 0 {
            rows.push(ErrorRow {
                tau,
                error: f64::NAN,
                stderr: f64::NAN,
                realizations: profiles.len(),
                note: format!("diverged: {diverged} realizations"),
            });
            continue;
        }
        let n_grid = profiles[0].len();
        let r_count = profiles.len() as f64;
        let mut sup = 0.0;
        let mut sup_k = 0usize;
        for k in 0..n_grid {
            let mean = profiles.iter().map(|p| p[k]).sum::<f64>() / r_count;
            if mean > sup {
                sup = mean;
                sup_k = k;
            }
        }
        let at_sup: Vec<f64> = profiles.iter().map(|p| p[sup_k]).collect();
        let stderr = stderr_of(&at_sup, sup);
        rows.push(ErrorRow {
            tau,
            error: sup,
            stderr,
            realizations: profiles.len(),
            note: String::new(),
        });
    }
    flag_non_monotone(&mut rows);
    let table = ErrorTable::new(rows)?;
    let fit = fit_outcome(&table);
    Ok(SweepResult { table, fit })
}

/// For each tau, estimates the supremum over grid times of the weak error
/// (max over the test battery) with the coupled estimator, then fits the
/// order. The fit is refused as underpowered when the standard error
/// exceeds 30% of the measured error at every tau.
pub fn run_weak_sweep(plan: &SweepPlan) -> Result<SweepResult> {
    plan.validate()?;
    let battery_len = match &plan.metric {
        MetricKind::Weak { battery } => battery.len(),
        MetricKind::Strong => {
            return Err(RbmError::invalid_argument(
                "plan metric is not the weak error",
            ))
        }
    };
    let models = tau_models(plan)?;
    let grouped = run_items(plan, &models)?;

    let mut rows = Vec::with_capacity(models.len());
    for (ti, outcomes) in grouped.iter().enumerate() {
        let mut profiles: Vec<&Vec<Vec<f64>>> = Vec::new();
        let mut diverged = 0usize;
        for outcome in outcomes {
            match outcome {
                ItemOutcome::Weak(profile) => profiles.push(profile),
                ItemOutcome::Diverged => diverged += 1,
                ItemOutcome::Strong(_) => unreachable!("weak sweep produced strong outcome"),
            }
        }
        let tau = plan.tau_list[ti];
        if diverged > 0 {
            rows.push(ErrorRow {
                tau,
                error: f64::NAN,
                stderr: f64::NAN,
                realizations: profiles.len(),
                note: format!("diverged: {diverged} realizations"),
            });
            continue;
        }
        let n_grid = profiles[0][0].len();
        let r_count = profiles.len() as f64;
        let mut sup = 0.0;
        let mut sup_stderr = 0.0;
        for phi in 0..battery_len {
            for k in 0..n_grid {
                let mean = profiles.iter().map(|p| p[phi][k]).sum::<f64>() / r_count;
                let value = mean.abs();
                if value > sup {
                    let samples: Vec<f64> = profiles.iter().map(|p| p[phi][k]).collect();
                    sup = value;
                    sup_stderr = stderr_of(&samples, mean);
                }
            }
        }
        rows.push(ErrorRow {
            tau,
            error: sup,
            stderr: sup_stderr,
            realizations: profiles.len(),
            note: String::new(),
        });
    }
    flag_non_monotone(&mut rows);
    let table = ErrorTable::new(rows)?;
    let finite_rows: Vec<&ErrorRow> = table.rows().iter().filter(|r| r.error.is_finite()).collect();
    let underpowered = !finite_rows.is_empty()
        && finite_rows
            .iter()
            .all(|r| r.stderr > 0.30 * r.error && r.error > 0.0);
    let fit = if underpowered {
        FitOutcome::Refused {
            reason: "underpowered: stderr exceeds 30% of the error at every tau".to_string(),
        }
    } else {
        fit_outcome(&table)
    };
    Ok(SweepResult { table, fit })
}

fn tau_models(plan: &SweepPlan) -> Result<Vec<Arc<SystemModel>>> {
    plan.tau_list
        .iter()
        .map(|&tau| plan.model.with_tau(tau).map(Arc::new))
        .collect()
}

/// One row of the step-cost benchmark.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub full_ns_per_step: f64,
    pub rbm_ns_per_step: f64,
    /// `rbm_ns_per_step / full_ns_per_step`.
    pub ratio: f64,
    /// Inner loop counts chosen automatically to beat timer resolution.
    pub full_inner_loops: u32,
    pub rbm_inner_loops: u32,
}

/// Writes bench rows as CSV (`n,full_ns_per_step,rbm_ns_per_step,ratio`).
pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], mut w: W) -> Result<()> {
    w.write_all(b"n,full_ns_per_step,rbm_ns_per_step,ratio\n")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{}",
            row.n, row.full_ns_per_step, row.rbm_ns_per_step, row.ratio
        )?;
    }
    Ok(())
}

/// Wall-clock comparison of one full-interaction step against one
/// random-batch macro step (including partition generation) across a family
/// of system sizes built from `template` with `N` overridden. Runs
/// serially; the point is per-step cost, not throughput.
pub fn bench_step_cost(
    template: &ModelConfig,
    n_values: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if n_values.is_empty() {
        return Err(RbmError::invalid_argument("no system sizes given"));
    }
    let min_n = *n_values.iter().min().unwrap() as f64;
    let max_n = *n_values.iter().max().unwrap() as f64;
    if max_n / min_n < 100.0 {
        return Err(RbmError::invalid_argument(
            "system sizes must span at least two decades",
        ));
    }
    if repetitions == 0 {
        return Err(RbmError::invalid_argument("need at least one repetition"));
    }

    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut cfg = template.clone();
        cfg.n = n;
        let model = Arc::new(cfg.build(seed)?);
        let state = model.sample_initial(seed, 0);
        let tau = model.tau();
        let dt_noise = NoiseBlock::sample(
            model.n_particles(),
            model.dim(),
            tau,
            &mut RngStream::new(seed, StreamPurpose::Noise, 0, 0),
        );

        let (full_ns, full_inner) = time_median_ns(repetitions, || {
            let next = step_reference(&model, &state, tau, &dt_noise).expect("bench step");
            std::hint::black_box(next.positions()[0]);
        });

        let mut partition_step = 0u64;
        let (rbm_ns, rbm_inner) = time_median_ns(repetitions, || {
            let mut rng = RngStream::new(seed, StreamPurpose::Partition, 0, partition_step);
            partition_step = partition_step.wrapping_add(1);
            let partition =
                crate::batching::random_partition(model.n_particles(), model.batch_size(), &mut rng)
                    .expect("bench partition");
            let next = step_rbm(
                &model,
                &state,
                &partition,
                tau,
                1,
                std::slice::from_ref(&dt_noise),
            )
            .expect("bench rbm step");
            std::hint::black_box(next.positions()[0]);
        });

        rows.push(BenchRow {
            n,
            full_ns_per_step: full_ns,
            rbm_ns_per_step: rbm_ns,
            ratio: rbm_ns / full_ns,
            full_inner_loops: full_inner,
            rbm_inner_loops: rbm_inner,
        });
    }
    Ok(rows)
}

/// Median of `repetitions` timings. Each timing runs the closure in an
/// inner loop whose count doubles until the measured window is comfortably
/// above timer resolution, and reports nanoseconds per call.
fn time_median_ns(repetitions: usize, mut f: impl FnMut()) -> (f64, u32) {
    const MIN_WINDOW_NS: u128 = 10_000_000; // 10 ms
    // Warm-up and inner-loop calibration.
    let mut inner: u32 = 1;
    loop {
        let start = Instant::now();
        for _ in 0..inner {
            f();
        }
        let elapsed = start.elapsed().as_nanos();
        if elapsed >= MIN_WINDOW_NS || inner >= 1 << 20 {
            break;
        }
        inner = inner.saturating_mul(2);
    }
    let mut samples: Vec<f64> = (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..inner {
                f();
            }
            start.elapsed().as_nanos() as f64 / inner as f64
        })
        .collect();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if samples.len() % 2 == 1 {
        samples[samples.len() / 2]
    } else {
        0.5 * (samples[samples.len() / 2 - 1] + samples[samples.len() / 2])
    };
    (median, inner)
}
