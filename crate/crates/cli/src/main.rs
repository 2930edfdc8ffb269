use std::path::PathBuf;
use std::process::ExitCode;

use bevseg::harness::eval::eval_command;
use bevseg::harness::gradcheck::run_suite;
use bevseg::harness::predict::{predict_command, render_command};
use bevseg::harness::shapes::shapes_report;
use bevseg::harness::train::train_command;
use bevseg::harness::RunConfig;
use bevseg::model::Preset;
use bevseg::scene::{Dataset, SceneSampler, Split};
use bevseg::tensor::OpKind;
use bevseg::{Error, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bevseg", version, about = "Bird's-eye-view segmentation from a single front camera")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. They override the config file.
#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// vit-desk, vit-b16 or vit-l16.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<Preset>,
    /// Output directory (the dataset root for `generate`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Any config key, e.g. `--set lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (scenes and split manifest).
    Generate,
    /// Train on the dataset's training split.
    Train,
    /// Score a checkpoint on the validation split.
    Eval {
        #[arg(long, value_name = "PATH", required_unless_present = "truth")]
        checkpoint: Option<PathBuf>,
        /// Score the labels against themselves.
        #[arg(long, conflicts_with = "checkpoint")]
        truth: bool,
    },
    /// Render a checkpoint's prediction for one scene as pixmaps.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        scene: PathBuf,
    },
    /// Render a scene's front view and ground truth as pixmaps.
    Render {
        #[arg(long, value_name = "PATH")]
        scene: PathBuf,
    },
    /// Finite-difference check of every op and one end-to-end path.
    Gradcheck {
        /// Skip the end-to-end check.
        #[arg(long)]
        ops_only: bool,
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Print every stage's tensor shape for the preset.
    Shapes,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(preset) = common.preset {
        cfg.preset = preset;
    }
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = cli.common.out.clone();
    match cli.command {
        Command::Generate => {
            let root = out.unwrap_or_else(|| cfg.data_dir.clone());
            let ds = Dataset::generate(&root, cfg.seed, cfg.train_scenes, cfg.val_scenes, &SceneSampler::default())?;
            println!(
                "wrote {} scenes ({} train, {} val) to {}",
                ds.ids(Split::Train).len() + ds.ids(Split::Val).len(),
                cfg.train_scenes,
                cfg.val_scenes,
                root.display()
            );
        }
        Command::Train => {
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            cfg.validate()?;
            let outcome = train_command(&cfg)?;
            println!(
                "{} steps, loss {:.6} -> {:.6}; run written to {}",
                outcome.log.len(),
                outcome.initial_loss().unwrap_or(f64::NAN),
                outcome.final_loss().unwrap_or(f64::NAN),
                cfg.out_dir.display()
            );
        }
        Command::Eval { checkpoint, truth } => {
            let (_, text) = eval_command(&cfg, checkpoint.as_deref(), truth)?;
            print!("{text}");
        }
        Command::Predict { checkpoint, scene } => {
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            print_paths(&predict_command(&cfg, &checkpoint, &scene)?);
        }
        Command::Render { scene } => {
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            print_paths(&render_command(&cfg, &scene)?);
        }
        Command::Gradcheck { ops_only, inject_fault } => {
            let fault = inject_fault.as_deref().map(parse_op).transpose()?;
            let preset = (!ops_only).then_some(cfg.preset);
            let report = run_suite(preset, fault)?;
            print!("{}", report.to_text());
            report.into_result()?;
        }
        Command::Shapes => print!("{}", shapes_report(cfg.preset)?),
    }
    Ok(())
}

fn parse_op(name: &str) -> Result<OpKind> {
    OpKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::Usage(format!("unknown op {name:?}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
