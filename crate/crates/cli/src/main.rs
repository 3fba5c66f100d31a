use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ditar_cli::{cmd_ablate, cmd_flops, cmd_gen_data, cmd_sample, cmd_train, cmd_verify, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "ditar", version, about = "Toy-scale patch-based autoregressive diffusion experiments")]
struct Cli {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Master seed, added to every section seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, short, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Override any config key, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and held-out toy datasets.
    GenData,
    /// Train a model and evaluate it on the held-out split.
    Train {
        /// Continue from the checkpoint in the output root.
        #[arg(long)]
        resume: bool,
    },
    /// Continue held-out prompts across a temperature sweep.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the sweep arms in `[[ablate.arms]]`.
    Ablate {
        /// Run a single arm.
        #[arg(long)]
        arm: Option<String>,
    },
    /// Inference FLOPs report.
    Flops,
    /// Re-check the config hash embedded in output files.
    Verify {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Command::Train { resume: true } = cli.command {
        overrides.push("train.resume=true".into());
    }
    let load = || RunConfig::load(cli.config.as_deref(), &overrides);
    match &cli.command {
        Command::GenData => {
            let g = cmd_gen_data(&load()?, &cli.out)?;
            println!("wrote {} ({} examples)", g.train.display(), g.train_examples);
            println!("wrote {} ({} examples)", g.heldout.display(), g.heldout_examples);
        }
        Command::Train { .. } => {
            let rec = cmd_train(&load()?, &cli.out)?;
            if let Some(last) = rec.loss_curve.last() {
                println!("step {} total loss {:.4}", last.step + 1, last.total);
            }
            if let Some(m) = &rec.final_metrics {
                println!("{}", serde_json::to_string_pretty(m).unwrap_or_default());
            }
        }
        Command::Sample { checkpoint } => {
            let s = cmd_sample(&load()?, &cli.out, checkpoint.as_deref())?;
            println!("temperature\tdispersion\tmax_abs\tmean_patches");
            for r in &s.rows {
                println!("{}\t{:.6}\t{:.4}\t{:.2}", r.temperature, r.dispersion, r.max_abs, r.mean_patches);
            }
        }
        Command::Ablate { arm } => {
            for o in cmd_ablate(&load()?, &cli.out, arm.as_deref())? {
                let m = o.record.final_metrics.unwrap_or_default();
                println!(
                    "{}\tfreq_acc {:.3}\trmse {:.4}\tboundary {:.4}\tstop_acc {:.3}",
                    o.arm.name, m.frequency_accuracy, m.continuation_rmse, m.boundary_discontinuity, m.stop_accuracy
                );
            }
        }
        Command::Flops => print!("{}", cmd_flops(&load()?, &cli.out)?.to_table()),
        Command::Verify { files } => {
            let expected = match &cli.config {
                Some(_) => Some(load()?),
                None => None,
            };
            for v in cmd_verify(files, expected.as_ref())? {
                println!("ok\t{}\t{}\t{}", v.kind, v.config_hash, v.path.display());
            }
        }
        Command::ShowConfig => print!("{}", load()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ditar: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
