//! `rbm` — random batch simulation of weighted multispecies particle
//! systems, with strong/weak convergence measurement and step-cost benches.
//!
//! Exit codes: 0 on success, 2 when an order fit is refused, 1 on errors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use rbm_core::batching::indicator_moment_check;
use rbm_core::harness::{
    bench_step_cost, run_strong_sweep, run_weak_sweep, write_bench_csv, FitOutcome, MetricKind,
    SweepPlan, SweepResult,
};
use rbm_core::integrator::{simulate_coupled, CoupledTrajectory};
use rbm_core::metrics::{chi_moment_check_auto, TestFunction};
use rbm_core::model::{ModelConfig, SystemModel};
use rbm_core::rng::{RngStream, StreamPurpose};
use rbm_core::{RbmError, Result};

#[derive(Parser)]
#[command(
    name = "rbm",
    about = "Random batch method for interacting particle systems with weights and species",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON model configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for all random streams.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output path prefix for CSV files.
    #[arg(long, global = true)]
    out: Option<String>,

    /// Worker threads (0 = auto).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Print a machine-readable JSON summary to stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run coupled reference/batch realizations and write trajectory CSVs.
    Simulate {
        /// Number of independent realizations.
        #[arg(long, default_value_t = 1)]
        realizations: u64,
        /// Reference sub-steps per batch sub-step.
        #[arg(long, default_value_t = 10)]
        refinement: usize,
        /// Batch-solver sub-steps per macro step.
        #[arg(long, default_value_t = 1)]
        rbm_substeps: usize,
    },
    /// Sweep tau and fit the strong (pathwise) convergence order.
    StrongOrder {
        /// Comma-separated decreasing tau list.
        #[arg(long, default_value = "0.125,0.0625,0.03125,0.015625,0.0078125")]
        taus: String,
        #[arg(long, default_value_t = 200)]
        realizations: usize,
        #[arg(long, default_value_t = 16)]
        refinement: usize,
        #[arg(long, default_value_t = 1)]
        rbm_substeps: usize,
    },
    /// Sweep tau and fit the weak (empirical measure) convergence order.
    WeakOrder {
        #[arg(long, default_value = "0.25,0.125,0.0625,0.03125,0.015625")]
        taus: String,
        #[arg(long, default_value_t = 1000)]
        realizations: usize,
        #[arg(long, default_value_t = 4)]
        refinement: usize,
        #[arg(long, default_value_t = 1)]
        rbm_substeps: usize,
    },
    /// Check the batch-indicator and force-error moment identities.
    Consistency {
        /// Monte Carlo samples when exact enumeration is infeasible.
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
    },
    /// Compare full-interaction and random-batch per-step wall time.
    Bench {
        /// Comma-separated system sizes (must span >= 2 decades).
        #[arg(long, default_value = "128,512,2048,4096,8192,10000,16384")]
        sizes: String,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RbmError::FitRefused(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if cli.workers > 0 {
        pool = pool.num_threads(cli.workers);
    }
    pool.build_global()
        .map_err(|e| RbmError::invalid_argument(format!("worker pool: {e}")))?;

    match &cli.command {
        Command::Simulate {
            realizations,
            refinement,
            rbm_substeps,
        } => cmd_simulate(cli, *realizations, *refinement, *rbm_substeps),
        Command::StrongOrder {
            taus,
            realizations,
            refinement,
            rbm_substeps,
        } => cmd_sweep(cli, taus, *realizations, *refinement, *rbm_substeps, true),
        Command::WeakOrder {
            taus,
            realizations,
            refinement,
            rbm_substeps,
        } => cmd_sweep(cli, taus, *realizations, *refinement, *rbm_substeps, false),
        Command::Consistency { samples } => cmd_consistency(cli, *samples),
        Command::Bench { sizes, repetitions } => cmd_bench(cli, sizes, *repetitions),
    }
}

fn load_config(cli: &Cli) -> Result<ModelConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| RbmError::invalid_argument("--config is required"))?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| RbmError::config(format!("{}: {e}", path.display())))
}

fn load_model(cli: &Cli) -> Result<Arc<SystemModel>> {
    Ok(Arc::new(load_config(cli)?.build(cli.seed)?))
}

fn require_out(cli: &Cli) -> Result<&str> {
    cli.out
        .as_deref()
        .ok_or_else(|| RbmError::invalid_argument("--out is required for this subcommand"))
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| RbmError::invalid_argument(format!("bad {what} entry '{tok}'")))
        })
        .collect()
}

fn cmd_simulate(
    cli: &Cli,
    realizations: u64,
    refinement: usize,
    rbm_substeps: usize,
) -> Result<ExitCode> {
    let model = load_model(cli)?;
    let out = require_out(cli)?;
    let trajectories: Vec<CoupledTrajectory> = (0..realizations)
        .into_par_iter()
        .map(|r| simulate_coupled(&model, cli.seed, r, refinement * rbm_substeps, rbm_substeps))
        .collect::<Result<Vec<_>>>()?;

    let mut files = Vec::new();
    for traj in &trajectories {
        for solver in ["ref", "rbm"] {
            let path = format!("{out}_r{}_{solver}.csv", traj.realization());
            let file = fs::File::create(&path)?;
            let mut w = BufWriter::new(file);
            write_trajectory_csv(&mut w, traj, solver == "rbm")?;
            w.flush()?;
            files.push(path);
        }
    }

    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "command": "simulate",
                "seed": cli.seed,
                "realizations": realizations,
                "macro_steps": model.n_macro_steps(),
                "files": files,
            })
        );
    } else {
        println!(
            "simulated {realizations} coupled realizations ({} macro steps); wrote {} files",
            model.n_macro_steps(),
            files.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn write_trajectory_csv<W: Write>(w: &mut W, traj: &CoupledTrajectory, rbm: bool) -> Result<()> {
    let model = traj.model();
    let d = model.dim();
    let mut header = String::from("t,particle");
    for c in 1..=d {
        header.push_str(&format!(",x_{c}"));
    }
    if model.has_velocities() {
        for c in 1..=d {
            header.push_str(&format!(",v_{c}"));
        }
    }
    writeln!(w, "{header}")?;
    for k in 0..traj.n_grid_points() {
        let state = if rbm { traj.rbm_state(k) } else { traj.ref_state(k) };
        let t = traj.times()[k];
        for i in 0..model.n_particles() {
            write!(w, "{t},{i}")?;
            for &c in state.position(i) {
                write!(w, ",{c}")?;
            }
            if let Some(v) = state.velocity(i) {
                for &c in v {
                    write!(w, ",{c}")?;
                }
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

fn cmd_sweep(
    cli: &Cli,
    taus: &str,
    realizations: usize,
    refinement: usize,
    rbm_substeps: usize,
    strong: bool,
) -> Result<ExitCode> {
    let model = load_model(cli)?;
    let tau_list: Vec<f64> = parse_list(taus, "tau")?;
    let metric = if strong {
        MetricKind::Strong
    } else {
        MetricKind::Weak {
            battery: TestFunction::default_battery(model.dim()),
        }
    };
    let plan = SweepPlan {
        model,
        tau_list,
        realizations,
        ref_refinement: refinement,
        rbm_substeps,
        metric,
        seed: cli.seed,
    };
    let result = if strong {
        run_strong_sweep(&plan)?
    } else {
        run_weak_sweep(&plan)?
    };

    let csv_path = match cli.out.as_deref() {
        Some(prefix) => {
            let path = format!("{prefix}.csv");
            let file = fs::File::create(&path)?;
            let mut w = BufWriter::new(file);
            result.table.write_csv(&mut w)?;
            w.flush()?;
            Some(path)
        }
        None => None,
    };

    let command = if strong { "strong-order" } else { "weak-order" };
    print_sweep_summary(cli, command, &result, csv_path.as_deref());
    Ok(if result.fit.is_refused() {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_sweep_summary(cli: &Cli, command: &str, result: &SweepResult, csv: Option<&str>) {
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "command": command,
                "seed": cli.seed,
                "rows": result.table.rows(),
                "fit": result.fit,
                "csv": csv,
            })
        );
        return;
    }
    println!("{command} (seed {}):", cli.seed);
    println!("  tau         error          stderr         realizations");
    for row in result.table.rows() {
        let note = if row.note.is_empty() {
            String::new()
        } else {
            format!("  [{}]", row.note)
        };
        println!(
            "  {:<10} {:<14.6e} {:<14.6e} {}{}",
            row.tau, row.error, row.stderr, row.realizations, note
        );
    }
    match &result.fit {
        FitOutcome::Fitted(fit) => {
            println!(
                "  fitted order: slope {:.4}, intercept {:.4}, R^2 {:.5}",
                fit.slope, fit.intercept, fit.r_squared
            );
            for (tau, reason) in &fit.excluded {
                println!("  excluded tau = {tau}: {reason}");
            }
        }
        FitOutcome::Refused { reason } => println!("  fit refused: {reason}"),
    }
    if let Some(path) = csv {
        println!("  table written to {path}");
    }
}

fn cmd_consistency(cli: &Cli, samples: u64) -> Result<ExitCode> {
    let model = load_model(cli)?;
    let mut indicator_rng = RngStream::new(cli.seed, StreamPurpose::Diagnostics, 0, 1);
    let indicator = indicator_moment_check(
        model.n_particles(),
        model.batch_size(),
        samples,
        &mut indicator_rng,
    )?;
    let state = model.sample_initial(cli.seed, 0);
    let mut chi_rng = RngStream::new(cli.seed, StreamPurpose::Diagnostics, 0, 2);
    let chi = chi_moment_check_auto(&model, &state, 0, samples, &mut chi_rng)?;

    let summary = serde_json::json!({
        "command": "consistency",
        "seed": cli.seed,
        "n": model.n_particles(),
        "p": model.batch_size(),
        "indicator": indicator,
        "chi": chi,
    });
    // This report is JSON either way; --json only suppresses the pretty
    // indentation.
    if cli.json {
        println!("{summary}");
    } else {
        println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(cli: &Cli, sizes: &str, repetitions: usize) -> Result<ExitCode> {
    let config = load_config(cli)?;
    let sizes: Vec<usize> = parse_list(sizes, "size")?;
    let rows = bench_step_cost(&config, &sizes, repetitions, cli.seed)?;

    let csv_path = match cli.out.as_deref() {
        Some(prefix) => {
            let path = format!("{prefix}.csv");
            let file = fs::File::create(&path)?;
            let mut w = BufWriter::new(file);
            write_bench_csv(&rows, &mut w)?;
            w.flush()?;
            Some(path)
        }
        None => None,
    };

    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "command": "bench",
                "rows": rows,
                "csv": csv_path,
            })
        );
    } else {
        println!("bench (seed {}):", cli.seed);
        println!("  n        full ns/step     rbm ns/step      ratio");
        for row in &rows {
            println!(
                "  {:<8} {:<16.0} {:<16.0} {:.5}",
                row.n, row.full_ns_per_step, row.rbm_ns_per_step, row.ratio
            );
        }
        if let Some(path) = csv_path {
            println!("  table written to {path}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
