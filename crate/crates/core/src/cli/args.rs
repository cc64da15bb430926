use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::commands::*;
use super::config::RunConfig;
use crate::error::Result;
use crate::eval::SynthSceneSpec;
use crate::inference::{PredictionDump, TridentNMSConfig};

#[derive(Debug, Parser)]
#[command(name = "prnet", version, about = "Dual-decoder HOI detector: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with annotations and a simulated detection dump.
    Generate(GenerateArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Run a checkpoint over the evaluation set and report mAP.
    Eval(EvalArgs),
    /// Re-score a cached raw dump under a grid of suppression settings.
    NmsSweep(SweepArgs),
    /// Write decoder cross-attention maps for one image.
    ExportAttention(AttentionArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scene spec (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Single shared decoder feeding every head.
    #[arg(long)]
    pub no_parallel_predictor: bool,
    /// Zero the consistency loss weight.
    #[arg(long)]
    pub no_consistency_loss: bool,
    /// Deep supervision on intermediate decoder layers.
    #[arg(long, value_enum)]
    pub aux_loss: Option<Switch>,
    /// Continue from latest.ckpt in the checkpoint directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to latest.ckpt in the configured checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub reports: Option<PathBuf>,
    /// Score the raw top-k detections without suppression.
    #[arg(long)]
    pub no_nms: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Supplies the eval settings and default paths.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Raw dump; defaults to the one in the reports directory.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `[[grid]]` entries; the ten-row ablation grid when omitted.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one grayscale PNG per query into this directory.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Pixels per token in the PNGs.
    #[arg(long, default_value_t = 8)]
    pub scale: u32,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let mut spec = match &a.spec {
                Some(p) => load_spec(p)?,
                None => SynthSceneSpec::default(),
            };
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let d = cmd_generate(&spec, &a.out)?;
            println!(
                "wrote {} train and {} test images to {}",
                d.train.images.len(),
                d.test.images.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            TrainOverrides {
                no_parallel_predictor: a.no_parallel_predictor,
                no_consistency_loss: a.no_consistency_loss,
                aux_loss: a.aux_loss.map(|s| s == Switch::On),
                seed: a.seed,
                epochs: a.epochs,
                train_data: a.train_data,
                checkpoints: a.checkpoints,
            }
            .apply(&mut cfg);
            let r = cmd_train(&cfg, a.resume)?;
            let last = r.losses.last().map_or(f64::NAN, |l| l.total);
            println!(
                "epochs {} steps {} final loss {last:.6}{}",
                r.epochs_completed,
                r.steps_completed,
                if r.stopped_early { " (target reached)" } else { "" }
            );
        }
        Command::Eval(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            if let Some(d) = a.dataset {
                cfg.paths.eval_data = d;
            }
            if let Some(r) = a.reports {
                cfg.paths.reports = r;
            }
            let ck = a.checkpoint.unwrap_or_else(|| cfg.paths.checkpoints.join("latest.ckpt"));
            let out = cmd_eval(&cfg, &ck, a.no_nms)?;
            println!("{}", serde_json::to_string_pretty(&out.result)?);
        }
        Command::NmsSweep(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(d) = a.dataset {
                cfg.paths.eval_data = d;
            }
            if let Some(r) = a.reports {
                cfg.paths.reports = r;
            }
            let dump = a.dump.unwrap_or_else(|| cfg.paths.reports.join(RAW_DUMP));
            let grid = match &a.grid {
                Some(p) => load_grid(p)?,
                None => TridentNMSConfig::ablation_grid(),
            };
            let raw = PredictionDump::load(&dump)?;
            let data = crate::eval::Dataset::load(&cfg.paths.eval_data)?;
            let rows = cmd_nms_sweep(&raw, &data, &grid, &cfg.eval)?;
            write_sweep(&rows, &cfg.paths.reports)?;
            print!("{}", render_sweep_table(&rows));
        }
        Command::ExportAttention(a) => {
            let e = cmd_export_attention(&a.checkpoint, &a.image, &a.out, a.images.as_deref(), a.scale)?;
            println!("wrote {} attention maps to {}", e.records.len(), a.out.display());
        }
    }
    Ok(())
}
