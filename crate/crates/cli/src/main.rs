use clap::{Parser, Subcommand, ValueEnum};
use cmpc_core::cmpc::NominalTrajectory;
use cmpc_core::sim::{export_csv, export_json, import_json, write_plots};
use cmpc_core::{metrics, run_closed_loop, Metrics, Scenario};
use std::path::PathBuf;
use std::process::ExitCode;

/// Closed-loop safe consensus MPC simulations.
#[derive(Debug, Parser)]
#[command(name = "cmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write the run log.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Also write SVG figures.
        #[arg(long)]
        plots: bool,
    },
    /// Validate a scenario and report feasibility margins along the
    /// zero-input rollout.
    Check {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Summarize a `run.json` log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Exit status 1: bad input. Status 2: the run itself failed.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

fn invalid<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            format,
            plots,
        } => run(&scenario, &out, format, plots),
        Command::Check { scenario } => check(&scenario),
        Command::Metrics { log, epsilon } => show_metrics(&log, epsilon),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &std::path::Path) -> Result<Scenario, Failure> {
    Scenario::from_path(path).map_err(invalid)
}

fn run(scenario: &std::path::Path, out: &std::path::Path, format: Format, plots: bool) -> Result<(), Failure> {
    let s = load(scenario)?;
    let log = run_closed_loop(&s).map_err(runtime)?;
    let written = match format {
        Format::Csv => export_csv(&log, out).map_err(runtime)?,
        Format::Json => vec![export_json(&log, out).map_err(runtime)?],
    };
    for p in &written {
        println!("wrote {}", p.display());
    }
    if plots {
        for p in write_plots(&log, out).map_err(runtime)? {
            println!("wrote {}", p.display());
        }
    }
    if !log.steps.is_empty() {
        print_metrics(&metrics(&log, 0.05));
    }
    if let Some(reason) = &log.abort {
        return Err(runtime(anyhow::anyhow!(
            "run aborted after {} steps: {reason}",
            log.steps.len()
        )));
    }
    Ok(())
}

fn check(path: &std::path::Path) -> Result<(), Failure> {
    let s = load(path)?;
    let controller = s.controller().map_err(invalid)?;
    let x0 = s.initial_states().map_err(invalid)?;
    let nominal = NominalTrajectory::zero_input(controller.model(), &x0, s.cmpc.horizon).map_err(invalid)?;
    let margins = controller.feasibility_margins(&x0, &nominal).map_err(runtime)?;
    println!("scenario {} is valid", path.display());
    println!(
        "{} agents, {} edges, {} obstacles, horizon {}, {} decision variables",
        s.agents.len(),
        s.topology.edges().len(),
        s.obstacles.len(),
        s.cmpc.horizon,
        controller.layout().dim()
    );
    println!(
        "feasibility margins (U_min >= F_max): {}/{} rows satisfied",
        margins.satisfied_count(),
        margins.entries.len()
    );
    for inst in &controller.layout().instances {
        let rows: Vec<_> = margins.entries.iter().filter(|e| e.instance == *inst).collect();
        let ok = rows.iter().filter(|e| e.satisfied).count();
        let worst = rows.iter().map(|e| e.u_min - e.f_max).fold(f64::INFINITY, f64::min);
        let eta = rows.iter().map(|e| e.eta.amax()).fold(0.0, f64::max);
        println!(
            "  agent {} vs {:?}: {ok}/{} satisfied, worst U_min - F_max = {worst:.4e}, max |eta| = {eta:.3e}",
            inst.agent,
            inst.kind,
            rows.len()
        );
    }
    Ok(())
}

fn show_metrics(path: &std::path::Path, epsilon: f64) -> Result<(), Failure> {
    if !(epsilon > 0.0) {
        return Err(invalid(anyhow::anyhow!("epsilon must be positive, got {epsilon}")));
    }
    let log = import_json(path).map_err(invalid)?;
    if log.steps.is_empty() {
        return Err(invalid(anyhow::anyhow!("{} contains no steps", path.display())));
    }
    print_metrics(&metrics(&log, epsilon));
    Ok(())
}

fn print_metrics(m: &Metrics) {
    let t = m
        .consensus_time
        .map_or_else(|| "not reached".to_string(), |t| t.to_string());
    println!("consensus time T({}): {t}", m.epsilon);
    println!("final consensus error: {:.6e}", m.final_consensus_error);
    println!("min h1 (agents): {:.6e}", m.min_h1);
    println!("min h2 (obstacles): {:.6e}", m.min_h2);
    println!(
        "cost increases: {} ({} after t = 10); J peak {:.6e}, final {:.6e}",
        m.cost_increases, m.cost_increases_after_10, m.peak_cost, m.final_cost
    );
    println!("input bound violations: {}", m.input_violations);
    println!(
        "infeasible steps: {}, unconverged steps: {}",
        m.infeasible_steps, m.unconverged_steps
    );
    println!(
        "SQP iterations: max {} over t <= 3, mean {:.3} over t >= 10",
        m.max_iterations_first_4, m.mean_iterations_after_10
    );
    println!(
        "wall time per step: mean {:.3} ms, max {:.3} ms",
        m.mean_wall_time_s * 1e3,
        m.max_wall_time_s * 1e3
    );
}
