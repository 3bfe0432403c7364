use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use f2a::config::RunConfig;
use f2a::metrics::MetricReport;
use f2a::pipeline;

#[derive(Parser)]
#[command(name = "f2a", version, about = "Forecast-to-anomaly training and scoring")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: desk or full.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a config key, e.g. `--set model.k=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic precursor-anomaly series as CSV.
    Synth,
    /// Rebuild the retrieval store from a trained checkpoint.
    BuildDb,
    /// Pretrain the forecaster, build the store and fine-tune.
    Train,
    /// Score evaluation and calibration windows.
    Predict,
    /// Compute metrics from score files.
    Eval,
    /// Train, predict and eval in one go.
    Run,
    /// Run every ablation variant and write ablation.csv.
    Ablate,
    /// Print the resolved configuration.
    ShowConfig,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    Ok(match (&c.config, &c.preset) {
        (Some(path), _) => RunConfig::load(Some(path), &c.set)?,
        (None, preset) => RunConfig::load_preset(preset.as_deref().unwrap_or("desk"), &c.set)?,
    })
}

fn print_reports(rows: &[MetricReport]) {
    println!("{}", f2a::metrics::METRIC_CSV_HEADER);
    for r in rows {
        println!("{}", r.csv_row());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let force = cli.common.force;
    match cli.cmd {
        Cmd::Synth => {
            for p in pipeline::cmd_synth(&cfg, force)? {
                println!("wrote {}", p.display());
            }
        }
        Cmd::BuildDb => {
            let store = pipeline::cmd_build_db(&cfg, force)?;
            println!("store: {} records", store.len());
        }
        Cmd::Train => {
            let out = pipeline::cmd_train(&cfg, force)?;
            for e in &out.log {
                println!("{}", e.line());
            }
        }
        Cmd::Predict => {
            for s in pipeline::cmd_predict(&cfg, force)? {
                println!("{}: {} scored timesteps", s.name, s.eval.len());
            }
        }
        Cmd::Eval => print_reports(&pipeline::cmd_eval(&cfg, force)?),
        Cmd::Run => {
            pipeline::cmd_train(&cfg, force)?;
            pipeline::cmd_predict(&cfg, force)?;
            print_reports(&pipeline::cmd_eval(&cfg, force)?);
        }
        Cmd::Ablate => print_reports(&pipeline::cmd_ablate(&cfg, force)?),
        Cmd::ShowConfig => {
            for key in f2a::config::keys() {
                println!("{key} = {}", cfg.get(key).unwrap_or_default());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
