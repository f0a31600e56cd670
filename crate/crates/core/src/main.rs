use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use defattn::cli::{self, RunConfig};
use defattn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "defattn",
    version,
    about = "Deformable-attention video segmentation and distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Sequence id, e.g. `val-0003`.
    #[arg(long, global = true)]
    seq: Option<String>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic train/val splits.
    GenData,
    /// Train the teacher; `--checkpoint` resumes.
    TrainTeacher,
    /// Distil a student from the teacher given by `--checkpoint`.
    Distill,
    /// Score a checkpoint and write a JSON report.
    Eval,
    /// Write attention heatmaps and keypoints for `--seq`.
    VizAttn,
}

fn run(args: &Cli) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let ckpt = args.checkpoint.as_deref();
    match args.command {
        Command::GenData => {
            let dirs = cli::cmd_gen_data(&cfg)?;
            println!("wrote {} sequences under {}", dirs.len(), cfg.data_root.display());
        }
        Command::TrainTeacher => {
            let s = cli::cmd_train_teacher(&cfg, ckpt)?;
            println!("teacher checkpoint {}", s.checkpoint.display());
            println!(
                "val J {:.4} F {:.4} J&F {:.4}",
                s.val.global.j, s.val.global.f, s.val.global.jf
            );
            if !s.gate_passed {
                return Err(Error::Numeric(format!(
                    "teacher validation J&F {:.4} is below the gate {}",
                    s.val.global.jf, cfg.teacher_gate
                )));
            }
        }
        Command::Distill => {
            let s = cli::cmd_distill(&cfg, ckpt)?;
            println!("student checkpoint {}", s.checkpoint.display());
            println!(
                "val J {:.4} F {:.4} J&F {:.4}",
                s.val.global.j, s.val.global.f, s.val.global.jf
            );
        }
        Command::Eval => {
            let report = cli::cmd_eval(&cfg, ckpt)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::VizAttn => {
            let ckpt = ckpt.ok_or_else(|| Error::Config("viz-attn needs --checkpoint".into()))?;
            let seq = args
                .seq
                .as_deref()
                .ok_or_else(|| Error::Config("viz-attn needs --seq".into()))?;
            let s = cli::cmd_viz_attn(&cfg, ckpt, seq)?;
            println!("wrote {} heatmaps to {}", s.heatmaps.len(), s.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    if let Some(n) = std::env::var("DEFATTN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = run(&args);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(cli::exit_code(&result) as u8)
}
