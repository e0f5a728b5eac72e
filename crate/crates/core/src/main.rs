use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dbu_core::config::SynthSource;
use dbu_core::models::ModelKind;
use dbu_core::report::cmd_report;
use dbu_core::run::{cmd_attack, cmd_certify, cmd_data_synth, cmd_eval, cmd_train, Run, Selection};
use dbu_core::Error;

/// Dirichlet-based uncertainty workbench.
#[derive(Parser)]
#[command(name = "dbu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured model and seed.
    Train(RunArgs),
    /// Write adversarial example archives for the test set.
    Attack(RunArgs),
    /// Certify smoothed scores of test and OOD points.
    Certify(RunArgs),
    /// Evaluate tasks, accuracy and smoothed cells.
    Eval(RunArgs),
    /// Build tables and histograms from a run directory.
    Report {
        run_dir: PathBuf,
    },
    /// Write a synthetic blob dataset as CSV.
    DataSynth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    seeds: Option<u64>,
    /// `z_score` or `min_max`.
    #[arg(long)]
    scaling: Option<String>,
    /// Only this model kind (repeatable).
    #[arg(long = "model", value_name = "KIND")]
    models: Vec<String>,
    /// Only this seed (repeatable).
    #[arg(long = "seed", value_name = "SEED")]
    only_seeds: Vec<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    n_per_class: usize,
    #[arg(long)]
    separation: f64,
    #[arg(long)]
    ood_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn open(&self) -> Result<(Run, Selection), Error> {
        let mut sets = self.sets.clone();
        if let Some(v) = &self.output_dir {
            sets.push(format!("output_dir={}", toml_string(v)));
        }
        if let Some(v) = self.seeds {
            sets.push(format!("seeds={v}"));
        }
        if let Some(v) = &self.scaling {
            sets.push(format!("dataset.scaling={}", toml_string(v)));
        }
        let run = Run::from_config_file(&self.config, &sets)?;
        let models = self
            .models
            .iter()
            .map(|m| ModelKind::parse(m))
            .collect::<Result<_, _>>()?;
        Ok((
            run,
            Selection {
                models,
                seeds: self.only_seeds.clone(),
            },
        ))
    }
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = json!({ "kind": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { pointer, msg } => {
            rec["pointer"] = json!(pointer);
            rec["message"] = json!(msg);
        }
        Error::Parse { line, .. } => rec["line"] = json!(line),
        Error::MissingArtifacts(list) => rec["missing"] = json!(list),
        _ => {}
    }
    json!({ "error": rec })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse { .. } => 2,
        Error::MissingArtifacts(_) => 3,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Train(a) => {
            let (run, sel) = a.open()?;
            print_paths(&cmd_train(&run, &sel)?);
        }
        Command::Attack(a) => {
            let (run, sel) = a.open()?;
            print_paths(&cmd_attack(&run, &sel)?);
        }
        Command::Certify(a) => {
            let (run, sel) = a.open()?;
            print_paths(&cmd_certify(&run, &sel)?);
        }
        Command::Eval(a) => {
            let (run, sel) = a.open()?;
            print_paths(&cmd_eval(&run, &sel)?);
        }
        Command::Report { run_dir } => {
            let out = cmd_report(&run_dir)?;
            print_paths(&out.written);
            if !out.missing.is_empty() {
                eprintln!("{}", json!({ "warning": { "kind": "missing_artifacts", "missing": out.missing } }));
            }
        }
        Command::DataSynth(a) => {
            let src = SynthSource {
                k: a.k,
                dim: a.dim,
                n_per_class: a.n_per_class,
                separation: a.separation,
                ood_shift: a.ood_shift,
                seed: a.seed,
            };
            cmd_data_synth(&src, &a.out)?;
            println!("{}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": msg.trim_end() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
