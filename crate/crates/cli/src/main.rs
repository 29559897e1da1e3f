use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use cfqp::cfqp::CfqpModel;
use cfqp::datagen::{generate, save_dataset};
use cfqp::experiment::{self, ExperimentConfig};
use cfqp::{Error, Matrix};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

/// Counterfactual query prediction: benchmarks, training and evaluation.
#[derive(Parser)]
#[command(name = "cfqp", version)]
struct Cli {
    /// Worker threads for fold and model parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the first fold's dataset and write it to `--out`.
    Generate(Common),
    /// Train and evaluate every configured method on every fold.
    Run(Common),
    /// Validation-driven sweep over the number of clusters.
    SweepK(Common),
    /// Sweep the correlation between covariates and class (images only).
    SweepRho(Common),
    /// Check the counterfactual bound on the configured generator.
    OracleCheck(Common),
    /// Answer one counterfactual query with a saved model.
    Predict(PredictArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory written by a run with `save_checkpoints`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON file with `x`, `t`, `y` and `t_prime`.
    #[arg(long, conflicts_with_all = ["x", "t", "y", "t_prime"])]
    query: Option<PathBuf>,
    /// Covariates, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true)]
    t: Option<f64>,
    /// Factual outcome, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y: Option<Vec<f64>>,
    #[arg(long = "t-prime", allow_hyphen_values = true)]
    t_prime: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Query {
    x: Vec<f64>,
    t: f64,
    y: Vec<f64>,
    t_prime: f64,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(|e| ConfigError(e.to_string()))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(f) = c.folds {
        cfg.folds = f;
    }
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn query(args: &PredictArgs) -> anyhow::Result<Query> {
    if let Some(p) = &args.query {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        return serde_json::from_str(&text).map_err(|e| ConfigError(format!("query {}: {e}", p.display())).into());
    }
    match (&args.x, args.t, &args.y, args.t_prime) {
        (Some(x), Some(t), Some(y), Some(t_prime)) => Ok(Query {
            x: x.clone(),
            t,
            y: y.clone(),
            t_prime,
        }),
        _ => Err(ConfigError("predict needs --query or all of --x, --t, --y, --t-prime".into()).into()),
    }
}

fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let q = query(args)?;
    let model = CfqpModel::load(Path::new(&args.checkpoint))
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let input_dim = model.models[0].input_dim();
    if q.x.len() + 1 != input_dim || q.y.len() != model.models[0].output_dim() {
        bail!(ConfigError(format!(
            "query has {} covariates and {} outcomes; the model expects {} and {}",
            q.x.len(),
            q.y.len(),
            input_dim - 1,
            model.models[0].output_dim()
        )));
    }
    let factual = Matrix::from_vec(1, input_dim, q.x.iter().copied().chain([q.t]).collect())?;
    let y = Matrix::from_vec(1, q.y.len(), q.y)?;
    let cluster = model.infer_clusters(&factual, &y)?[0];
    let y_prime = model.predict_cf(&factual, &y, &[q.t_prime])?;
    print_json(&serde_json::json!({ "cluster": cluster, "y_prime": y_prime.row(0) }))
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate(c) => {
            let cfg = load_config(c)?;
            let gen = cfg.gen_config(0)?;
            let ds = generate(&gen)?;
            let manifest = save_dataset(&ds, &cfg.out)?;
            print_json(&manifest)
        }
        Command::Run(c) => {
            let out = experiment::run(&load_config(c)?)?;
            print!("{}", out.table.to_csv()?);
            Ok(())
        }
        Command::SweepK(c) => {
            let out = experiment::sweep_k(&load_config(c)?)?;
            print!("{}", out.table.to_csv()?);
            Ok(())
        }
        Command::SweepRho(c) => {
            let out = experiment::sweep_rho(&load_config(c)?)?;
            print!("{}", out.table.to_csv()?);
            Ok(())
        }
        Command::OracleCheck(c) => {
            let out = experiment::oracle_check(&load_config(c)?)?;
            print_json(&out)?;
            if !out.pass {
                log::warn!("bound check did not pass");
            }
            Ok(())
        }
        Command::Predict(p) => predict(p),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.is::<ConfigError>() || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_))) {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
