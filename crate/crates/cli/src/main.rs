//! `steppo`: train, compare and audit runs of the step-level RL laboratory.
//!
//! Every subcommand that produces files writes its resolved config first.
//! Failures print one line `error: <Category>: <message>` and exit with
//! 2 (BadArguments), 3 (ConfigError) or 1 (RuntimeFailure).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use steppo::credit::Regime;
use steppo::gateway_datapool::{Datapool, Gateway, ProducerMessage};
use steppo::harness::{self, ExperimentConfig, HarnessError, Lab, PolicyInit, RunResult};
use steppo::prefix_tree::{prompt_prefix_stats, StepReplay};
use steppo::store::{self, meta, Trajectory};

#[derive(Parser)]
#[command(name = "steppo", version, about = "Step-level agentic RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config over its seeds (sync or async per `run.async_enabled`).
    Train(ConfigArgs),
    /// Run configs that differ only in regime and report the comparison.
    Compare(CompareArgs),
    /// Sample rollouts and measure retokenization drift, or audit a trajectory file.
    DriftAudit(DriftArgs),
    /// Prefix-sharing statistics of a trajectory file.
    PrefixStats(FileArgs),
    /// Ingest a trajectory file into a datapool and report its statistics.
    PoolStats(PoolArgs),
    /// Resolve and validate a config, printing the result.
    ValidateConfig(ConfigArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `clip.learning_rate=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory; defaults to `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// One config per regime. With at most one config, use `--regimes`.
    #[arg(long = "config")]
    configs: Vec<PathBuf>,
    /// Comma-separated regimes to derive from a single config.
    #[arg(long, value_delimiter = ',')]
    regimes: Vec<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DriftArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Audit this trajectory JSONL instead of sampling.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    rollouts: usize,
    /// Mask non-canonical tokens while sampling.
    #[arg(long)]
    canonical: bool,
    /// Sample from a uniform policy instead of the configured initialization.
    #[arg(long)]
    uniform: bool,
}

#[derive(Args)]
struct FileArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[command(flatten)]
    base: ConfigArgs,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long)]
    trajectories: PathBuf,
    /// Trainer version for staleness; defaults to the newest record version.
    #[arg(long)]
    version: Option<u64>,
    #[command(flatten)]
    base: ConfigArgs,
}

enum CliError {
    BadArguments(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    fn report(&self) -> ExitCode {
        let (cat, msg, code) = match self {
            CliError::BadArguments(m) => ("BadArguments", m, 2),
            CliError::Config(m) => ("ConfigError", m, 3),
            CliError::Runtime(m) => ("RuntimeFailure", m, 1),
        };
        eprintln!("error: {cat}: {}", msg.replace('\n', " "));
        ExitCode::from(code)
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>, CliError> {
    let mut out = args
        .overrides
        .iter()
        .map(|s| harness::parse_override(s).map_err(|e| CliError::BadArguments(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = args.seed {
        out.push(("run.seeds".into(), format!("[{s}]")));
    }
    if let Some(r) = &args.regime {
        r.parse::<Regime>().map_err(CliError::BadArguments)?;
        out.push(("credit.regime".into(), r.clone()));
    }
    if let Some(n) = args.iterations {
        out.push(("run.iterations".into(), n.to_string()));
    }
    Ok(out)
}

fn load_config(path: Option<&Path>, ov: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    Ok(harness::resolve_config(text.as_deref(), ov)?)
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    load_config(args.config.as_deref(), &overrides(args)?)
}

fn out_dir(explicit: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = explicit.map_or_else(|| PathBuf::from(&cfg.run.output_dir), Path::to_path_buf);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_run_files(dir: &Path, runs: &[RunResult]) -> Result<(), CliError> {
    harness::write_metrics_jsonl(&dir.join("metrics.jsonl"), runs)?;
    write(&dir.join("curves.csv"), harness::curves_csv(runs))?;
    let batches: Vec<Trajectory> = runs.iter().flat_map(|r| r.last_batch.iter().cloned()).collect();
    let traj_path = dir.join("trajectories.jsonl");
    store::serialize_jsonl(&batches, &traj_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in runs {
        write(
            &dir.join(format!("policy_{}_seed{}.txt", r.regime, r.seed)),
            r.final_policy.to_text(),
        )?;
    }
    Ok(())
}

fn print_run(r: &RunResult, window: usize) {
    println!(
        "regime={} seed={} iterations={} final_return={:.4} final_success={:.4} worker_failures={}",
        r.regime,
        r.seed,
        r.rows.len(),
        r.final_return(window),
        r.final_success(window),
        r.worker_failures.len()
    );
    for f in &r.worker_failures {
        println!("  worker failure: {f}");
    }
}

fn train(args: ConfigArgs) -> Result<(), CliError> {
    let cfg = resolve(&args)?;
    let dir = out_dir(args.out.as_deref(), &cfg)?;
    write(&dir.join("resolved_config.toml"), cfg.to_toml())?;
    let runs = harness::run(&cfg)?;
    write_run_files(&dir, &runs)?;
    for r in &runs {
        print_run(r, cfg.run.final_window);
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<(), CliError> {
    let base = ConfigArgs {
        overrides: args.overrides.clone(),
        seed: args.seed,
        iterations: args.iterations,
        ..ConfigArgs::default()
    };
    let ov = overrides(&base)?;
    let mut configs = Vec::new();
    for p in &args.configs {
        configs.push(load_config(Some(p), &ov)?);
    }
    if !args.regimes.is_empty() {
        if configs.len() > 1 {
            return Err(CliError::BadArguments("--regimes takes at most one --config".into()));
        }
        if configs.is_empty() {
            configs.push(load_config(None, &ov)?);
        }
        let c = configs.pop().expect("one config");
        for r in &args.regimes {
            let regime = r.parse::<Regime>().map_err(CliError::BadArguments)?;
            configs.push(c.with_regime(regime));
        }
    }
    if configs.len() < 2 {
        return Err(CliError::BadArguments("compare needs at least two regimes".into()));
    }
    let dir = out_dir(args.out.as_deref(), &configs[0])?;
    for c in &configs {
        write(&dir.join(format!("resolved_config.{}.toml", c.regime())), c.to_toml())?;
    }
    let report = harness::run_comparison(&configs)?;
    harness::write_metrics_jsonl(&dir.join("metrics.jsonl"), &report.runs)?;
    write(&dir.join("curves.csv"), report.curves_csv())?;
    let md = report.summary_markdown();
    write(&dir.join("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn drift_audit(args: DriftArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.base)?;
    let dir = out_dir(args.base.out.as_deref(), &cfg)?;
    write(&dir.join("resolved_config.toml"), cfg.to_toml())?;
    let lab = Lab::new(&cfg)?;
    let seed = cfg.run.seeds[0];
    let report = match &args.trajectories {
        Some(path) => {
            let trajs = store::load_jsonl(path).map_err(|e| CliError::Runtime(e.to_string()))?;
            steppo::tokenizer::DriftReport::audit(
                trajs.iter().flat_map(|t| t.records()).map(|r| &r.response_ids),
                &lab.vocab,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?
        }
        None => {
            let mut c = cfg.clone();
            if args.uniform {
                c.policy.init = PolicyInit::Zeros;
            }
            let lab = Lab::new(&c)?;
            let policy = lab.initial_policy();
            lab.sample_drift(&policy, args.rollouts, seed, args.canonical)
                .map_err(CliError::Runtime)?
                .0
        }
    };
    let summary = json!({
        "sequences": report.entries.len(),
        "drifted": report.drifted(),
        "drift_rate": report.drift_rate(),
        "canonical_only": args.canonical,
        "seed": seed,
    });
    write(
        &dir.join("drift_report.json"),
        serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    println!("{summary}");
    Ok(())
}

fn prefix_stats(args: FileArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.base)?;
    let dir = out_dir(args.base.out.as_deref(), &cfg)?;
    write(&dir.join("resolved_config.toml"), cfg.to_toml())?;
    let trajs = store::load_jsonl(&args.trajectories).map_err(|e| CliError::Runtime(e.to_string()))?;
    let records: Vec<_> = trajs.iter().flat_map(|t| t.records()).collect();
    let prompts =
        prompt_prefix_stats(records.iter().copied()).ok_or_else(|| CliError::Runtime("no prompt tokens".into()))?;
    let replay = StepReplay::build(records.iter().copied());
    let summary = json!({
        "records": records.len(),
        "prompt_tokens": prompts.total_tokens,
        "prompt_unique_nodes": prompts.unique_nodes,
        "prompt_savings_ratio": prompts.savings_ratio,
        "step_tokens": replay.tree.total_inserted_tokens(),
        "step_unique_nodes": replay.tree.unique_nodes(),
        "step_savings_ratio": replay.tree.savings_ratio().unwrap_or(0.0),
    });
    write(
        &dir.join("prefix_stats.json"),
        serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    println!("{summary}");
    Ok(())
}

fn pool_stats(args: PoolArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.base)?;
    let dir = out_dir(args.base.out.as_deref(), &cfg)?;
    write(&dir.join("resolved_config.toml"), cfg.to_toml())?;
    let lab = Lab::new(&cfg)?;
    let trajs = store::load_jsonl(&args.trajectories).map_err(|e| CliError::Runtime(e.to_string()))?;
    let pool = Arc::new(
        Datapool::new(cfg.pool)
            .map_err(|e| CliError::Config(e.to_string()))?
            .with_vocab_size(lab.vocab.len()),
    );
    let gateway = Gateway::new(lab.vocab.clone(), pool.clone());
    let mut newest = 0;
    for rec in trajs.into_iter().flat_map(Trajectory::into_records) {
        newest = newest.max(rec.policy_version);
        let producer = rec
            .metadata
            .get(meta::PRODUCER)
            .cloned()
            .unwrap_or_else(|| "file".into());
        let _ = gateway.submit(&producer, ProducerMessage::StepNative(rec));
    }
    let stats = pool.stats(args.version.unwrap_or(newest));
    let text = serde_json::to_string_pretty(&stats).expect("json");
    write(&dir.join("pool_stats.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn validate_config(args: ConfigArgs) -> Result<(), CliError> {
    let cfg = resolve(&args)?;
    if let Some(out) = &args.out {
        let dir = out_dir(Some(out), &cfg)?;
        write(&dir.join("resolved_config.toml"), cfg.to_toml())?;
    }
    print!("{}", cfg.to_toml());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or("").to_string();
            return CliError::BadArguments(first.trim_start_matches("error: ").to_string()).report();
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Compare(a) => compare(a),
        Command::DriftAudit(a) => drift_audit(a),
        Command::PrefixStats(a) => prefix_stats(a),
        Command::PoolStats(a) => pool_stats(a),
        Command::ValidateConfig(a) => validate_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
