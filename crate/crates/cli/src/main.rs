//! `ssp`: synthesize data, train, evaluate, predict and profile sparse-view
//! structure prediction networks.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssp_core::{Result, SspError};

use config::{Layered, Overrides};

#[derive(Parser)]
#[command(name = "ssp", version, about = "Sparse-view volumetric structure prediction", after_help = exit::TABLE)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reuse a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads.
    #[arg(long, global = true, env = "SSP_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        per_task: Option<usize>,
        /// Target grid as D,H,W.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 3]>,
        #[arg(long)]
        ratio: Option<usize>,
    },
    /// Train a network on a dataset directory.
    Train {
        #[command(flatten)]
        topology: TopologyFlags,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        eval_interval: Option<usize>,
    },
    /// Report metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, val or test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Predict the dense grid for one sparse input volume.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sparse input stack (VXG1).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        task: Option<usize>,
    },
    /// Count MACs, parameters and peak activation memory.
    Profile {
        #[command(flatten)]
        topology: TopologyFlags,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> =
        s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|p: Vec<usize>| format!("expected D,H,W, got {} values", p.len()))
}

#[derive(Args)]
struct TopologyFlags {
    /// paper, desk or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// pure2d, hybrid_2to3d, hybrid_3to2d or pure3d.
    #[arg(long)]
    kind: Option<String>,
    /// prefix, postfix or none.
    #[arg(long)]
    interp: Option<String>,
    /// nearest or linear.
    #[arg(long)]
    interp_mode: Option<String>,
}

impl TopologyFlags {
    fn apply(self, o: &mut Overrides) {
        o.set("preset", self.preset)
            .set("topology.kind", self.kind)
            .set("topology.interp", self.interp)
            .set("topology.interp_mode", self.interp_mode);
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

fn threads(requested: Option<usize>, config: Option<&std::path::Path>) -> Result<()> {
    let from_file = match (requested, config) {
        (None, Some(p)) => {
            let v: serde_json::Value =
                serde_json::from_slice(&std::fs::read(p)?).map_err(|e| SspError::Config(format!("{}: {e}", p.display())))?;
            v.get("threads").and_then(|t| t.as_u64()).map(|t| t as usize)
        }
        _ => None,
    };
    if let Some(n) = requested.or(from_file) {
        if n == 0 {
            return Err(SspError::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| SspError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let Common { config, seed, out, force, threads: n } = cli.common;
    threads(n, config.as_deref())?;
    let mut o = Overrides::default();
    o.set("seed", seed).set("out", out).set("threads", n);
    let name = match &cli.command {
        Command::Synth { .. } => "synth",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Infer { .. } => "infer",
        Command::Profile { .. } => "profile",
    };
    match cli.command {
        Command::Synth { tasks, per_task, shape, ratio } => {
            o.set("synth.tasks", tasks).set("synth.per_task", per_task).set("synth.shape", shape).set("synth.ratio", ratio);
            commands::synth(Layered::load(config.as_deref(), name, o)?, force)
        }
        Command::Train { topology, data, resume, steps, batch_size, lr, eval_interval } => {
            topology.apply(&mut o);
            o.set("data", data)
                .set("resume", resume)
                .set("train.steps", steps)
                .set("train.batch_size", batch_size)
                .set("train.lr", lr)
                .set("train.eval_interval", eval_interval);
            commands::train_cmd(Layered::load(config.as_deref(), name, o)?, force)
        }
        Command::Eval { checkpoint, data, split } => {
            o.set("checkpoint", checkpoint).set("data", data).set("split", split);
            commands::eval(Layered::load(config.as_deref(), name, o)?, force)
        }
        Command::Infer { checkpoint, input, task } => {
            o.set("checkpoint", checkpoint).set("input", input).set("task", task);
            commands::infer(Layered::load(config.as_deref(), name, o)?, force)
        }
        Command::Profile { topology, batch, format } => {
            topology.apply(&mut o);
            o.set("batch", batch);
            commands::profile(Layered::load(config.as_deref(), name, o)?, force, matches!(format, Format::Json))
        }
    }
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        exit::report("internal", exit::INTERNAL, info.to_string());
        std::process::exit(exit::INTERNAL as i32);
    }));
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            exit::report("usage", exit::USAGE, e.render().to_string().trim().to_string());
            return ExitCode::from(exit::USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, name) = exit::classify(&e);
            exit::report(name, code, e.to_string());
            ExitCode::from(code)
        }
    }
}
