use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oopk_cli::config::{Preset, RunConfig};
use oopk_cli::{CliError, SweepAxis};
use oopk_core::exec::Exec;

#[derive(Parser)]
#[command(name = "oopk", version, about = "Continual test-time adaptation with orthogonal low-rank adapters and image masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Learning-rate preset; replaces any `adapt.lr` from the config.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Dataset directory, overriding `paths.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint, overriding `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the clean source set, the corrupted target stream and manifests.
    GenData(Common),
    /// Train the source segmentation network on clean scenes.
    Pretrain(Common),
    /// Online adaptation over the target stream.
    Adapt(Common),
    /// Frozen evaluation of a checkpoint on the target stream.
    Eval(Common),
    /// Fold adapters into their base weights.
    Merge(Common),
    /// Compare settings along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// Angle versus magnitude reconstruction experiment.
    Toy(Common),
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let stage = "config";
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
    .map_err(|source| CliError { stage, source })?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = c.preset {
        cfg.preset = p;
        cfg.adapt.lr = None;
    }
    if let Some(d) = &c.data {
        cfg.paths.data = d.clone();
    }
    if let Some(k) = &c.checkpoint {
        cfg.paths.checkpoint = k.clone();
    }
    cfg.validate().map_err(|source| CliError { stage, source })?;
    Ok(cfg)
}

fn exec(c: &Common) -> Exec {
    if c.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => {
            let s = oopk_cli::cmd_gen_data(&resolve(&c)?, &c.out, exec(&c))?;
            println!("wrote {} files ({} stream samples) to {}", s.files, s.stream_entries, c.out.display());
        }
        Command::Pretrain(c) => {
            let m = oopk_cli::cmd_pretrain(&resolve(&c)?, &c.out, exec(&c))?;
            println!("source clean mIoU {:.1}", 100.0 * m.clean_miou);
        }
        Command::Adapt(c) => {
            let s = oopk_cli::cmd_adapt(&resolve(&c)?, &c.out, exec(&c))?;
            println!(
                "mean mIoU {:.1} (source {:.1})",
                100.0 * s.adapted.mean_miou(),
                100.0 * s.source.mean_miou()
            );
        }
        Command::Eval(c) => {
            let r = oopk_cli::cmd_eval(&resolve(&c)?, &c.out, exec(&c))?;
            println!("mean mIoU {:.1}", 100.0 * r.mean_miou());
        }
        Command::Merge(c) => {
            let s = oopk_cli::cmd_merge(&resolve(&c)?, &c.out, exec(&c))?;
            println!(
                "merged {} → {} parameters, max deviation {:e} over {} inputs",
                s.params_before, s.params_after, s.max_deviation, s.inputs
            );
        }
        Command::Sweep { common, axis } => {
            let rows = oopk_cli::cmd_sweep(&resolve(&common)?, axis, &common.out, exec(&common))?;
            print!("{}", oopk_cli::sweep_csv(axis, &rows));
        }
        Command::Toy(c) => {
            let s = oopk_cli::cmd_toy(&resolve(&c)?, &c.out, exec(&c))?;
            print!("{}", s.errors.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
