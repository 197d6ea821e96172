//! `dapcal`: run distance-aware prior calibration experiments from a JSON config.
//!
//! Every subcommand takes `--config file.json`. Top-level keys can be
//! overridden with dedicated flags, and any key with `--set path.to.key=value`
//! (the value is parsed as JSON, falling back to a string).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dapcal::pipeline::{run_pipeline, run_stage, ExperimentConfig, Stage};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "dapcal", version, about = "Distance-aware prior calibration pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or split the datasets.
    GenData(Common),
    /// Fit the MAP network and the posterior approximation.
    Train(Common),
    /// Choose φ on the calibration set.
    Calibrate(Common),
    /// Write uncalibrated and calibrated predictions.
    Predict(Common),
    /// Compute metrics from the predictions.
    Evaluate(Common),
    /// Write the calibration loss and mean epistemic variance over the φ grid.
    SweepPhi(Common),
    /// All stages in order.
    Run(Common),
    /// Print the resolved configuration and its hash.
    Config(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `distance.subsample_ref`.
    #[arg(long)]
    subsample_ref: Option<usize>,
    /// `path.to.key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| format!("cannot set {path}: {} is not an object", keys[..i].join(".")))?;
        if i + 1 == keys.len() {
            obj.insert((*k).to_string(), value);
            return Ok(());
        }
        cur = obj.entry(*k).or_insert_with(|| Value::Object(Default::default()));
    }
    Err("empty key".into())
}

fn resolve(c: &Common) -> Result<ExperimentConfig, dapcal::Error> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| dapcal::Error::Config(format!("cannot read {}: {e}", c.config.display())))?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| dapcal::Error::Config(format!("{}: {e}", c.config.display())))?;
    let mut sets: Vec<(String, Value)> = Vec::new();
    if let Some(s) = c.seed {
        sets.push(("seed".into(), s.into()));
    }
    if let Some(t) = c.threads {
        sets.push(("threads".into(), t.into()));
    }
    if let Some(o) = &c.output_dir {
        sets.push(("output_dir".into(), o.display().to_string().into()));
    }
    if let Some(k) = c.subsample_ref {
        sets.push(("distance.subsample_ref".into(), k.into()));
    }
    for s in &c.sets {
        let (k, raw) = s
            .split_once('=')
            .ok_or_else(|| dapcal::Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        sets.push((k.to_string(), val));
    }
    for (k, val) in sets {
        set_path(&mut v, &k, val).map_err(dapcal::Error::Config)?;
    }
    ExperimentConfig::from_json(&v.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, stage) = match &cli.command {
        Command::GenData(c) => (c, Some(Stage::GenData)),
        Command::Train(c) => (c, Some(Stage::Train)),
        Command::Calibrate(c) => (c, Some(Stage::Calibrate)),
        Command::Predict(c) => (c, Some(Stage::Predict)),
        Command::Evaluate(c) => (c, Some(Stage::Evaluate)),
        Command::SweepPhi(c) => (c, Some(Stage::SweepPhi)),
        Command::Run(c) | Command::Config(c) => (c, None),
    };
    let result = resolve(common).and_then(|cfg| match (&cli.command, stage) {
        (Command::Config(_), _) => {
            let json = serde_json::to_string_pretty(&cfg)?;
            println!("{json}");
            println!("config_hash={}", cfg.hash());
            Ok(())
        }
        (_, Some(s)) => run_stage(&cfg, s),
        (_, None) => run_pipeline(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
