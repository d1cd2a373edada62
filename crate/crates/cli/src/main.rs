//! `meshvit` command-line entry point.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Settings;

/// Parallel-block ViT toolkit: model inspection, invariant suites, mesh
/// simulation, toy training and learning-rate schedules.
#[derive(Debug, Parser)]
#[command(name = "meshvit", version)]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// vit_g, vit_e, vit_22b, or tiny.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct ModelFlags {
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    mlp: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    image: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    qk_norm: Option<bool>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter count, FLOPs per token and fused matmul shapes.
    Inspect {
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Run invariant suites; exit 1 on any failure.
    Verify {
        /// all, tensor, model, shard or mesh.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long, hide = true, default_value = "none")]
        inject_fault: String,
    },
    /// Simulate one forward over a t×k mesh and report the timeline.
    Simulate {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        link_bandwidth: Option<f64>,
        #[arg(long)]
        device_flops: Option<f64>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        shard_threshold: Option<u64>,
    },
    /// Toy training run with telemetry.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        cooldown: Option<usize>,
        #[arg(long)]
        total: Option<usize>,
        /// replicated or sharded.
        #[arg(long)]
        execution: Option<String>,
        /// Model-ring size for sharded execution.
        #[arg(long)]
        k: Option<usize>,
        /// Run the paired QK-norm on/off comparison instead.
        #[arg(long)]
        ablate_qk: bool,
        /// Comma-separated learning rates for the comparison.
        #[arg(long)]
        ablate_lrs: Option<String>,
        #[arg(long)]
        prescale: Option<f64>,
    },
    /// Learning rate per step as CSV.
    Schedule {
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        cooldown: Option<usize>,
        #[arg(long)]
        total: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
}

impl ModelFlags {
    fn apply(&self, s: &mut Settings) -> meshvit::Result<()> {
        s.set_opt("width", self.width)?;
        s.set_opt("depth", self.depth)?;
        s.set_opt("mlp", self.mlp)?;
        s.set_opt("heads", self.heads)?;
        s.set_opt("patch", self.patch)?;
        s.set_opt("image", self.image)?;
        s.set_opt("classes", self.classes)?;
        s.set_opt("qk_norm", self.qk_norm)
    }
}

fn flag_settings(cli: &Cli) -> meshvit::Result<Settings> {
    let mut s = Settings::default();
    s.set_opt("seed", cli.seed)?;
    s.set_opt("out", cli.out.as_ref().map(|p| p.display().to_string()))?;
    s.set_opt("preset", cli.preset.as_ref())?;
    match &cli.command {
        Command::Inspect { model } => model.apply(&mut s)?,
        Command::Verify { scope, .. } => s.set_opt("scope", scope.as_ref())?,
        Command::Simulate { model, t, k, link_bandwidth, device_flops, tokens, shard_threshold } => {
            model.apply(&mut s)?;
            s.set_opt("t", *t)?;
            s.set_opt("k", *k)?;
            s.set_opt("link_bandwidth", *link_bandwidth)?;
            s.set_opt("device_flops", *device_flops)?;
            s.set_opt("tokens", *tokens)?;
            s.set_opt("shard_threshold", *shard_threshold)?;
        }
        Command::Train {
            model,
            steps,
            batch,
            lr,
            warmup,
            cooldown,
            total,
            execution,
            k,
            ablate_qk,
            ablate_lrs,
            prescale,
        } => {
            model.apply(&mut s)?;
            s.set_opt("steps", *steps)?;
            s.set_opt("batch", *batch)?;
            s.set_opt("lr", *lr)?;
            s.set_opt("warmup", *warmup)?;
            s.set_opt("cooldown", *cooldown)?;
            s.set_opt("total", *total)?;
            s.set_opt("execution", execution.as_ref())?;
            s.set_opt("k", *k)?;
            if *ablate_qk {
                s.set("ablate_qk", "true")?;
            }
            s.set_opt("ablate_lrs", ablate_lrs.as_ref())?;
            s.set_opt("prescale", *prescale)?;
        }
        Command::Schedule { lr, warmup, cooldown, total, stride } => {
            s.set_opt("lr", *lr)?;
            s.set_opt("warmup", *warmup)?;
            s.set_opt("cooldown", *cooldown)?;
            s.set_opt("total", *total)?;
            s.set_opt("stride", *stride)?;
        }
    }
    Ok(s)
}

fn resolve(cli: &Cli) -> meshvit::Result<Settings> {
    let defaults = Settings::from_pairs(match cli.command {
        Command::Inspect { .. } => commands::INSPECT_DEFAULTS,
        Command::Verify { .. } => commands::VERIFY_DEFAULTS,
        Command::Simulate { .. } => commands::SIMULATE_DEFAULTS,
        Command::Train { .. } => commands::TRAIN_DEFAULTS,
        Command::Schedule { .. } => commands::SCHEDULE_DEFAULTS,
    });
    let file = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    Ok(defaults.overlay(&file).overlay(&flag_settings(cli)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|s| match &cli.command {
        Command::Inspect { .. } => commands::inspect(&s),
        Command::Verify { inject_fault, .. } => commands::verify(&s, inject_fault),
        Command::Simulate { .. } => commands::simulate(&s),
        Command::Train { .. } => commands::train(&s),
        Command::Schedule { .. } => commands::schedule(&s),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::EXIT_CONFIG)
        }
    }
}
