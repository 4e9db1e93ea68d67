use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chaos_core::engine::{Engine, RunOutput, Strategy};
use chaos_core::report::{comparison_text, metrics_csv, summary_text};
use chaos_core::scenario::{load_scenario, ScenarioErrors, ScenarioFile};
use chaos_core::solve::{parse_solve_input, solve};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chaos-sim", version, about = "Deterministic simulator for elastic training clusters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write metrics.csv, trace and summary files.
    Run {
        scenario: PathBuf,
        /// Override the scenario's strategy.
        #[arg(long, conflicts_with = "compare")]
        strategy: Option<Strategy>,
        /// Run all four strategies on the same event stream.
        #[arg(long)]
        compare: bool,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Solve a standalone replication instance and compare methods.
    Solve { input: PathBuf },
    /// Parse and validate a scenario without running it.
    Validate { scenario: PathBuf },
}

enum Failure {
    Invalid(String),
    Engine(String),
}

impl From<ScenarioErrors> for Failure {
    fn from(e: ScenarioErrors) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Engine(format!("cannot write {}: {e}", path.display()))
}

fn write(path: PathBuf, text: &str) -> Result<(), Failure> {
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn run_strategies(sc: &ScenarioFile, strategies: &[Strategy]) -> Result<Vec<RunOutput>, Failure> {
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = strategies
            .iter()
            .map(|&s| {
                let input = sc.with_strategy(s).to_sim_input();
                scope.spawn(move || Engine::new(input).and_then(Engine::run))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("engine thread panicked")).collect()
    });
    results
        .into_iter()
        .zip(strategies)
        .map(|(r, s)| r.map_err(|e| Failure::Engine(format!("{s}: {e}"))))
        .collect()
}

fn cmd_run(path: &Path, strategy: Option<Strategy>, compare: bool, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut sc = load_scenario(path)?;
    if let Some(seed) = seed {
        sc = sc.with_seed(seed);
    }
    let strategies = if compare {
        Strategy::ALL.to_vec()
    } else {
        vec![strategy.unwrap_or(sc.config.strategy)]
    };
    let runs = run_strategies(&sc, &strategies)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let refs: Vec<&RunOutput> = runs.iter().collect();
    write(out.join("metrics.csv"), &metrics_csv(&refs))?;
    let mut summary = String::new();
    for run in &runs {
        let name = if compare { format!("trace-{}.txt", run.strategy) } else { "trace.txt".to_string() };
        write(out.join(name), &run.trace_text())?;
        summary.push_str(&summary_text(run));
        summary.push('\n');
    }
    if compare {
        summary.push_str(&comparison_text(&refs));
    }
    write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_solve(path: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let input = parse_solve_input(&text)?;
    let report = solve(&input).map_err(|e| Failure::Engine(e.to_string()))?;
    print!("{report}");
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let sc = load_scenario(path)?;
    let standby = sc.nodes.iter().filter(|n| n.standby).count();
    println!(
        "ok: {} nodes ({} standby), {} links, {} events, {:.1} MiB state",
        sc.nodes.len(),
        standby,
        sc.links.len(),
        sc.events.len(),
        sc.total_mib()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run { scenario, strategy, compare, seed, out } => cmd_run(scenario, *strategy, *compare, *seed, out),
        Cmd::Solve { input } => cmd_solve(input),
        Cmd::Validate { scenario } => cmd_validate(scenario),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Engine(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
