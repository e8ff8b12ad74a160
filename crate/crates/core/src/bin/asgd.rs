use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use asgd::config::{Config, ConfigError};
use asgd::engine::epoch_sgd;
use asgd::harness::{
    bounded_delay_setup, default_sweep, fullsgd_setup, run_failure_prob_experiment,
    run_fullsgd_experiment, run_invariant_sweep, run_slowdown_experiment, sequential_setup,
    trace_checks, Backend, FailureProbSetup, HarnessError,
};
use asgd::problems::dist_sq;
use asgd::report::{ExperimentReport, ReportFormat};
use asgd::shared_model::SharedModel;
use asgd::sim::{simulate, ReplayFile, SimOptions, Strategy};
use asgd::theory::{
    all_bounds, consistent_read_learning_rate, feasibility_check, minimal_adversary_tau,
    sequential_learning_rate, tuned_learning_rate, BoundVariant,
};
use asgd::verdict::Verdict;

#[derive(Parser)]
#[command(name = "asgd", version, about = "Lock-free asynchronous SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print every failure-probability bound, feasibility and step sizes.
    Bounds {
        #[arg(long)]
        config: PathBuf,
    },
    /// One epoch on real threads.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the per-iteration trace CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One simulated execution under an adversarial scheduler.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// sequential, round-robin, uniform, bounded-delay or stale-replay;
        /// overrides `sim.strategy`.
        #[arg(long)]
        strategy: Option<String>,
        /// Directory for trace, event and replay files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stale-gradient slowdown against sequential SGD.
    Slowdown {
        #[arg(long)]
        alpha: f64,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        tau_list: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo failure probability against the theoretical bound.
    McFailProb {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Without a config: quadratic, noise 0.1, four threads under
        /// bounded delay 16 (one sequential thread for the sequential
        /// variant), T sized for a bound of 0.2.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum, default_value_t = BackendArg::Sim)]
        backend: BackendArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustive schedule-invariant checks over many simulated executions.
    Invariants {
        #[arg(long, value_enum, default_value_t = SweepArg::Default)]
        sweep: SweepArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Epoch-based SGD with step-size halving, repeated over seeds.
    Fullsgd {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Without a config: quadratic d = 2, noise 0.05, box radius 2,
        /// four threads, ε = 0.05, T = 1000, first step size 0.5.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Sequential,
    ConsistentRead,
    LockFreeTuned,
    LockFreeGeneric,
}

impl From<VariantArg> for BoundVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Sequential => BoundVariant::Sequential,
            VariantArg::ConsistentRead => BoundVariant::ConsistentRead,
            VariantArg::LockFreeTuned => BoundVariant::LockFreeTuned,
            VariantArg::LockFreeGeneric => BoundVariant::LockFreeGeneric,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Threads,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Default,
    Sequential,
}

/// Failure that maps to an exit code.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Sim(_) | HarnessError::Engine(_) => Failure::Runtime(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<bool, Failure> {
    match command {
        Command::Bounds { config } => bounds(&config),
        Command::Run { config, out } => run(&config, out.as_deref()),
        Command::Simulate { config, strategy, out } => sim(&config, strategy.as_deref(), out.as_deref()),
        Command::Slowdown { alpha, tau_list, trials, out } => {
            if tau_list.is_empty() {
                return Err(Failure::Config("--tau-list needs at least one value".into()));
            }
            finish(run_slowdown_experiment(alpha, &tau_list, trials)?, out.as_deref())
        }
        Command::McFailProb { trials, config, dim, variant, backend, out } => {
            let mut setup = match config {
                Some(path) => setup_from_config(&path, trials)?,
                None if matches!(variant, Some(VariantArg::Sequential)) => sequential_setup(dim, trials, 1)?,
                None => bounded_delay_setup(dim, trials, 1)?,
            };
            if let Some(v) = variant {
                setup.variant = v.into();
            }
            setup.backend = match backend {
                BackendArg::Sim => Backend::Simulator,
                BackendArg::Threads => Backend::Threads,
            };
            finish(run_failure_prob_experiment(&setup)?, out.as_deref())
        }
        Command::Invariants { sweep, out } => {
            let (configs, skipped) = match sweep {
                SweepArg::Default => default_sweep(),
                SweepArg::Sequential => (asgd::harness::sequential_sweep(), vec![]),
            };
            let mut report = run_invariant_sweep(&configs)?;
            report.warnings.extend(skipped.into_iter().map(|s| format!("skipped {s}")));
            finish(report, out.as_deref())
        }
        Command::Fullsgd { trials, config, out } => {
            let (spec, x0, cfg) = match config {
                Some(path) => {
                    let c = Config::load(path)?;
                    let spec = c.problem()?;
                    let x0 = c.x0(&spec)?;
                    let cfg = c.epoch_config(&spec, &x0)?;
                    (spec, x0, cfg)
                }
                None => fullsgd_setup(0.05, 1000, 1)?,
            };
            finish(run_fullsgd_experiment(&spec, &x0, &cfg, trials)?, out.as_deref())
        }
    }
}

fn setup_from_config(path: &Path, trials: usize) -> Result<FailureProbSetup, Failure> {
    let c = Config::load(path)?;
    let spec = c.problem()?;
    let x0 = c.x0(&spec)?;
    let params = c.bound_params(&spec, &x0)?;
    let run = c.epoch_config(&spec, &x0)?;
    let strategy = c.strategy(None)?;
    let variant = if strategy == Strategy::Sequential {
        BoundVariant::Sequential
    } else {
        BoundVariant::LockFreeTuned
    };
    Ok(FailureProbSetup {
        spec,
        x0,
        run,
        strategy,
        params,
        variant,
        trials,
        backend: Backend::Simulator,
    })
}

fn finish(report: ExperimentReport, out: Option<&Path>) -> Result<bool, Failure> {
    for v in &report.verdicts {
        println!("{}", v.summary());
        if let Some(c) = &v.counterexample {
            println!("  counterexample: {c}");
        }
    }
    for (k, v) in &report.aggregates {
        println!("{k} = {v}");
    }
    for (k, v) in &report.bounds {
        println!("bound {k} = {v}");
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    if let Some(dir) = out {
        for path in report.emit(dir, &ReportFormat::ALL)? {
            println!("wrote {}", path.display());
        }
    }
    Ok(report.passed())
}

fn bounds(path: &Path) -> Result<bool, Failure> {
    let c = Config::load(path)?;
    let spec = c.problem()?;
    let x0 = c.x0(&spec)?;
    let p = c.bound_params(&spec, &x0)?;
    println!("c = {}, L = {}, M = {}, d = {}, n = {}, τ_max = {}", p.c, p.l, p.m, p.d, p.n, p.tau_max);
    println!("ε = {}, ϑ = {}, T = {}, ‖x0 − x*‖² = {}", p.epsilon, p.theta, p.horizon, p.x0_dist_sq);
    println!("alpha in use      {:.6e}", p.alpha);
    println!("alpha tuned       {:.6e}", tuned_learning_rate(&p));
    println!("alpha sequential  {:.6e}", sequential_learning_rate(&p));
    println!("alpha consistent  {:.6e}", consistent_read_learning_rate(&p));
    match feasibility_check(&p) {
        Ok(f) => println!(
            "feasibility       value {:.6e}, margin {:.6e} ({})",
            f.value,
            f.margin,
            if f.feasible { "feasible" } else { "infeasible" }
        ),
        Err(e) => println!("feasibility       {e}"),
    }
    println!("{:<20} {:>14} {:>10}", "variant", "raw", "clamped");
    for (variant, value) in all_bounds(&p) {
        match value {
            Ok(b) => println!(
                "{:<20} {:>14.6e} {:>10.6}{}",
                variant.name(),
                b.raw,
                b.clamped,
                if b.is_vacuous() { "  vacuous" } else { "" }
            ),
            Err(e) => println!("{:<20} {e}", variant.name()),
        }
    }
    match minimal_adversary_tau(p.alpha) {
        Ok(t) => println!("lower-bound τ threshold at this alpha: {t}"),
        Err(e) => println!("lower-bound τ threshold: {e}"),
    }
    Ok(true)
}

fn report_checks(verdicts: &[Verdict]) -> bool {
    for v in verdicts {
        println!("{}", v.summary());
        if let Some(c) = &v.counterexample {
            println!("  counterexample: {c}");
        }
    }
    verdicts.iter().all(|v| v.passed)
}

fn run(path: &Path, out: Option<&Path>) -> Result<bool, Failure> {
    let c = Config::load(path)?;
    let spec = c.problem()?;
    let x0 = c.x0(&spec)?;
    let cfg = c.epoch_config(&spec, &x0)?;
    let model = SharedModel::new(&x0);
    let result = epoch_sgd(&spec, &model, &cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("iterations     {}", result.iterations);
    println!("hit time       {}", result.hit_time.map_or("none".into(), |t| t.to_string()));
    println!("final dist²    {}", result.final_dist_sq);
    println!("model dist²    {}", dist_sq(&result.final_model, &spec.x_star));
    for w in &result.warnings {
        println!("warning: {w}");
    }
    let mut ok = true;
    if let Some(stats) = &result.contention {
        println!("τ_max {}  τ_avg {:.4}  max delay {}", stats.tau_max, stats.tau_avg, stats.max_delay);
    }
    if let Some(trace) = &result.trace {
        ok = report_checks(&trace_checks(trace));
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            let p = dir.join("iterations.csv");
            std::fs::write(&p, trace.iterations_csv(&spec.x_star))?;
            println!("wrote {}", p.display());
        }
    }
    Ok(ok)
}

fn sim(path: &Path, strategy: Option<&str>, out: Option<&Path>) -> Result<bool, Failure> {
    let c = Config::load(path)?;
    let spec = c.problem()?;
    let x0 = c.x0(&spec)?;
    let cfg = c.epoch_config(&spec, &x0)?;
    let strategy = c.strategy(strategy)?;
    let opts = SimOptions {
        record_events: out.is_some(),
    };
    let outcome = simulate(&spec, &x0, &cfg, &strategy, opts).map_err(|e| match e {
        asgd::sim::SimError::InvalidStrategy(m) | asgd::sim::SimError::InvalidConfig(m) => Failure::Config(m),
        other => Failure::Runtime(other.to_string()),
    })?;
    println!("strategy       {}", strategy.name());
    println!("iterations     {}", outcome.run.iterations);
    println!("hit time       {}", outcome.run.hit_time.map_or("none".into(), |t| t.to_string()));
    println!("final dist²    {}", outcome.run.final_dist_sq);
    println!(
        "τ_max {}  τ_avg {:.4}  max delay {}",
        outcome.stats.tau_max, outcome.stats.tau_avg, outcome.stats.max_delay
    );
    println!("trace hash     {}", outcome.trace_hash());
    let ok = report_checks(&trace_checks(&outcome.trace));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("iterations.csv", outcome.trace.iterations_csv(&spec.x_star).into_bytes()),
            ("events.csv", outcome.trace.events_csv().into_bytes()),
            ("schedule.replay", ReplayFile::from_outcome(&cfg, &strategy, &outcome).encode()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(ok)
}
