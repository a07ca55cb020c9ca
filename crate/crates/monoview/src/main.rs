use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use monoview::commands;
use monoview::config::AngleMode;
use monoview::dataset::Split;
use monoview::RunConfig;

#[derive(Parser)]
#[command(name = "monoview", version, about = "Single-projection volume reconstruction and tumor segmentation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArg {
    /// Directory holding manifest.csv (defaults to the output directory).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom, fit the motion model and write the dataset.
    Synth(Common),
    /// Train on the train split and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// `random` (stored projections) or `fixed:<deg>`.
        #[arg(long, default_value = "random")]
        angle: AngleMode,
    },
    /// Evaluate the test split under each configured noise level.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the four module configurations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        quiet: bool,
    },
    /// Reconstruct one projection file and time the network.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        projection: PathBuf,
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
    /// Collect the result tables of a directory into report.md.
    Report(Common),
}

fn resolve(common: &Common) -> anyhow::Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    cfg.out_dir = out.clone();
    Ok((cfg, out))
}

fn data_dir<'a>(data: &'a DataArg, out: &'a Path) -> &'a Path {
    data.data.as_deref().unwrap_or(out)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let (cfg, out) = resolve(&common)?;
            let m = commands::cmd_synth(&cfg, &out)?;
            let counts = [Split::Train, Split::Val, Split::Test].map(|s| m.split(s).len());
            println!(
                "wrote {} samples (train {}, val {}, test {}) to {}",
                m.records.len(),
                counts[0],
                counts[1],
                counts[2],
                out.display()
            );
        }
        Command::Train { common, data, quiet } => {
            let (cfg, out) = resolve(&common)?;
            let (_, log) = commands::cmd_train(&cfg, data_dir(&data, &out), &out, !quiet)?;
            println!(
                "best epoch {} (val {}); checkpoint {}",
                log.best_epoch,
                log.best_val().unwrap_or(f64::NAN),
                out.join(commands::CHECKPOINT_FILE).display()
            );
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            angle,
        } => {
            let (cfg, out) = resolve(&common)?;
            let report = commands::cmd_eval(&cfg, data_dir(&data, &out), &checkpoint, split, angle, &out)?;
            print!("{}", monoview::report::eval_csv(&report)?);
        }
        Command::NoiseSweep { common, data, checkpoint } => {
            let (cfg, out) = resolve(&common)?;
            let rows = commands::cmd_noise_sweep(&cfg, data_dir(&data, &out), &checkpoint, &out)?;
            print!("{}", monoview::report::noise_table_csv(&rows)?);
        }
        Command::Ablate { common, data, quiet } => {
            let (cfg, out) = resolve(&common)?;
            let rows = commands::cmd_ablate(&cfg, data_dir(&data, &out), &out, !quiet)?;
            print!("{}", monoview::report::ablation_table_csv(&rows)?);
        }
        Command::Infer {
            common,
            checkpoint,
            projection,
            reps,
        } => {
            let (cfg, out) = resolve(&common)?;
            let r = commands::cmd_infer(&cfg, &checkpoint, &projection, reps, &out)?;
            println!("volume {}", r.volume_path.display());
            if let Some(p) = &r.mask_path {
                println!("mask {}", p.display());
            }
            match r.centroid_mm {
                Some(c) => println!("centroid_mm {:.3} {:.3} {:.3}", c[0], c[1], c[2]),
                None => println!("centroid_mm undefined"),
            }
            println!(
                "latency over {} timed passes: median {:.2} ms, p95 {:.2} ms",
                r.latencies_ms.len(),
                r.median_ms,
                r.p95_ms
            );
        }
        Command::Report(common) => {
            let (_, out) = resolve(&common)?;
            println!("{}", commands::cmd_report(&out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ").replace('"', "'");
            eprintln!("error: msg=\"{msg}\"");
            ExitCode::FAILURE
        }
    }
}
