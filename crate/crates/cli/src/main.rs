//! `nowcast`: synthesize data, build datasets, train, evaluate and predict.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or format
//! error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nowcast_core::error::{Error, ErrorClass, Result};
use nowcast_core::model::ModelKind;
use nowcast_core::pipeline::{cmd_build, cmd_eval, cmd_predict, cmd_synth, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Precipitation nowcasting with 3D UNets")]
struct Cli {
    /// JSON run configuration; unspecified keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, validation split, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic precipitation and wind grids.
    Synth(SynthArgs),
    /// Derive wind speed, crop, normalize, filter and split into manifests.
    Build,
    /// Train one model for one horizon (resumes an interrupted run).
    Train(TrainArgs),
    /// Score persistence and trained models on the test split.
    Eval(EvalArgs),
    /// Produce a single nowcast.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of frames.
    #[arg(long)]
    length: Option<usize>,
    /// Grid size as HEIGHTxWIDTH; required unless the config sets it.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    horizon: Option<usize>,
    /// Overrides `train.max_epochs`.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated model kinds to score next to persistence.
    #[arg(long, value_delimiter = ',', default_value = "core-unet,wf-unet")]
    models: Vec<ModelKind>,
    /// Comma-separated horizons (overrides `eval.horizons`).
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long)]
    horizon: Option<usize>,
    /// Frame index of the most recent input.
    #[arg(long)]
    anchor: usize,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad grid size `{s}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// Whether the config file states the synthetic grid size itself.
fn config_sets_grid(path: Option<&Path>) -> Result<bool> {
    let Some(path) = path else { return Ok(false) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let synth = &value["synthetic"];
    Ok(synth.get("height").is_some() && synth.get("width").is_some())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config.resolved())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::Synth(args) => {
            match args.grid {
                Some((h, w)) => {
                    config.synthetic.height = h;
                    config.synthetic.width = w;
                }
                None if !config_sets_grid(cli.config.as_deref())? => {
                    return Err(Error::Config(
                        "grid size missing: pass --grid HEIGHTxWIDTH or set synthetic.height/width in the config".into(),
                    ));
                }
                None => {}
            }
            if let Some(n) = args.length {
                config.synthetic.sequence_length = n;
            }
            for p in cmd_synth(&config)? {
                println!("{}", p.display());
            }
        }
        Command::Build => {
            let manifests = cmd_build(&config)?;
            for (h, m) in config.horizons().iter().zip(&manifests) {
                println!(
                    "horizon {h}: train {} val {} test {}",
                    m.splits.train.len(),
                    m.splits.val.len(),
                    m.splits.test.len()
                );
            }
        }
        Command::Train(args) => {
            if let Some(h) = args.horizon {
                config.train.horizon = h;
            }
            if let Some(e) = args.epochs {
                config.train.max_epochs = e;
            }
            let outcome = cmd_train(&config, args.model, None)?;
            let h = &outcome.history;
            println!(
                "{} h{}: {} epochs, best epoch {} (val {:.4e}), stopped by {:?}",
                args.model,
                config.train.horizon,
                h.epochs.len(),
                h.best_epoch,
                h.best_val_loss.unwrap_or(f64::NAN),
                h.stop_reason
            );
            println!("{}", config.layout().checkpoint(args.model, config.train.horizon).display());
        }
        Command::Eval(args) => {
            if let Some(h) = &args.horizons {
                config.eval.horizons = h.clone();
            }
            let report = cmd_eval(&config, &args.models)?;
            println!("model,horizon,mse,accuracy,precision,recall");
            for r in &report.rows {
                println!(
                    "{},{},{:.4e},{:.4},{},{}",
                    r.model,
                    r.horizon,
                    r.mse,
                    r.accuracy,
                    fmt_opt(r.precision),
                    fmt_opt(r.recall)
                );
            }
            println!("{}", config.layout().eval_dir().display());
        }
        Command::Predict(args) => {
            if let Some(h) = args.horizon {
                config.train.horizon = h;
            }
            let (frame, path) = cmd_predict(&config, args.model, args.anchor)?;
            let v = frame.values();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            println!("{}x{} nowcast, mean {mean:.4e}, max {max:.4e} (normalized)", frame.height(), frame.width());
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}
