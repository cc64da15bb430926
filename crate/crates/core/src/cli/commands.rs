use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use super::config::{model_config_diff, RunConfig, RESOLVED_CONFIG};
use crate::error::{Error, Result};
use crate::eval::{generate_synthetic_dataset, image_to_tensor, mean_ap, APResult, Dataset, EvalConfig, SynthSceneSpec, SyntheticDataset};
use crate::inference::{raw_detections, ImageDetections, NmsMode, PredictionDump, TridentNMSConfig};
use crate::model::checkpoint::{self, TrainingState};
use crate::model::{attention_image, export_attention, AttentionExport, PrNet};
use crate::training::{fit, FitPaths, FitReport, Sample};

pub const RAW_DUMP: &str = "raw_detections.json";
pub const FINAL_DUMP: &str = "detections.json";
pub const EVAL_REPORT: &str = "eval.json";
pub const SWEEP_REPORT: &str = "nms_sweep.json";
pub const SWEEP_TABLE: &str = "nms_sweep.txt";

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// Reads a scene spec from TOML, or JSON when the extension says so.
pub fn load_spec(path: &Path) -> Result<SynthSceneSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let spec: SynthSceneSpec = if is_json(path) {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    Ok(spec)
}

pub fn cmd_generate(spec: &SynthSceneSpec, out: &Path) -> Result<SyntheticDataset> {
    spec.validate()?;
    let data = generate_synthetic_dataset(spec)?;
    data.write(out)?;
    Ok(data)
}

/// Command-line switches layered over a config file.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub no_parallel_predictor: bool,
    pub no_consistency_loss: bool,
    pub aux_loss: Option<bool>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub train_data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.no_parallel_predictor {
            cfg.model.parallel_predictor = false;
        }
        if self.no_consistency_loss {
            cfg.loss.w_consistency = 0.0;
        }
        if let Some(a) = self.aux_loss {
            cfg.loss.aux_loss = a;
        }
        if let Some(s) = self.seed {
            cfg.schedule.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.schedule.epochs = e;
        }
        if let Some(p) = &self.train_data {
            cfg.paths.train_data = p.clone();
        }
        if let Some(p) = &self.checkpoints {
            cfg.paths.checkpoints = p.clone();
        }
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        e => e,
    })
}

fn image_root(dataset: &Path) -> &Path {
    dataset.parent().unwrap_or(Path::new("."))
}

fn load_checked_model(cfg: &RunConfig, path: &Path) -> Result<(PrNet, Option<TrainingState>)> {
    let ck = checkpoint::load(path)?;
    let diff = model_config_diff(&cfg.model, &ck.config);
    if !diff.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured model: {}",
            path.display(),
            diff.join("; ")
        )));
    }
    Ok((PrNet::from_checkpoint(&ck)?, ck.training))
}

/// Trains from scratch, or from `latest.ckpt` in the checkpoint directory
/// when `resume` is set. All configuration problems are reported before any
/// data is read.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<FitReport> {
    cfg.validate()?;
    let data = load_dataset(&cfg.paths.train_data)?;
    cfg.check_dataset(&data)?;
    let paths = FitPaths::new(cfg.paths.checkpoints.clone());
    let (mut model, state) = if resume {
        let latest = paths.latest();
        if !latest.exists() {
            return Err(Error::Checkpoint(format!("nothing to resume: {} not found", latest.display())));
        }
        let (m, s) = load_checked_model(cfg, &latest)?;
        let s = s.ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", latest.display())))?;
        (m, Some(s))
    } else {
        (PrNet::new(cfg.model.clone(), cfg.schedule.seed)?, None)
    };
    let samples: Vec<Sample> = data
        .load_samples(image_root(&cfg.paths.train_data))?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    cfg.save(&cfg.paths.checkpoints.join(RESOLVED_CONFIG))?;
    fit(&mut model, &samples, &cfg.schedule, &cfg.loss, &paths, state)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    /// Top-k detections before suppression.
    pub raw: PredictionDump,
    /// Detections that were scored.
    pub detections: PredictionDump,
    pub result: APResult,
}

/// Runs the model over the evaluation set and writes the raw dump, the
/// scored dump, the AP report and the resolved config to the reports
/// directory.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, no_nms: bool) -> Result<EvalOutcome> {
    cfg.validate()?;
    let (model, _) = load_checked_model(cfg, checkpoint)?;
    let data = load_dataset(&cfg.paths.eval_data)?;
    cfg.check_dataset(&data)?;
    let images = data
        .load_samples(image_root(&cfg.paths.eval_data))?
        .into_iter()
        .map(|(image_id, s)| {
            Ok(ImageDetections {
                image_id,
                detections: raw_detections(&model, &s.image, cfg.eval.top_k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let raw = PredictionDump { images };
    let detections = if no_nms { raw.clone() } else { raw.apply_nms(&cfg.nms) };
    let result = mean_ap(&detections, &data, &cfg.eval)?;

    let dir = &cfg.paths.reports;
    fs::create_dir_all(dir)?;
    cfg.save(&dir.join(RESOLVED_CONFIG))?;
    raw.save(&dir.join(RAW_DUMP))?;
    detections.save(&dir.join(FINAL_DUMP))?;
    fs::write(dir.join(EVAL_REPORT), serde_json::to_string_pretty(&result)?)?;
    Ok(EvalOutcome { raw, detections, result })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub nms: TridentNMSConfig,
    #[serde(rename = "mAP_full")]
    pub map_full: f64,
    #[serde(rename = "mAP_rare")]
    pub map_rare: Option<f64>,
    #[serde(rename = "mAP_nonrare")]
    pub map_nonrare: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct GridFile {
    grid: Vec<TridentNMSConfig>,
}

/// Reads `[[grid]]` entries from TOML, or `{"grid": [...]}` from JSON.
pub fn load_grid(path: &Path) -> Result<Vec<TridentNMSConfig>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let g: GridFile = if is_json(path) {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    for c in &g.grid {
        c.validate()?;
    }
    Ok(g.grid)
}

fn sweep_cell(raw: &PredictionDump, data: &Dataset, nms: &TridentNMSConfig, eval: &EvalConfig) -> Result<SweepRow> {
    let r = mean_ap(&raw.apply_nms(nms), data, eval)?;
    Ok(SweepRow {
        nms: nms.clone(),
        map_full: r.map_full,
        map_rare: r.map_rare,
        map_nonrare: r.map_nonrare,
    })
}

/// Scores every suppression setting in `grid` on a cached raw dump. Cells
/// are spread over the available cores; row order follows `grid`.
pub fn cmd_nms_sweep(
    raw: &PredictionDump,
    data: &Dataset,
    grid: &[TridentNMSConfig],
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    eval.validate()?;
    for c in grid {
        c.validate()?;
    }
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(grid.len());
    let chunk = grid.len().div_ceil(workers);
    let parts = thread::scope(|s| {
        let handles: Vec<_> = grid
            .chunks(chunk)
            .map(|cells| s.spawn(move || cells.iter().map(|c| sweep_cell(raw, data, c, eval)).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect::<Vec<_>>()
    });
    let mut rows = Vec::with_capacity(grid.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Plain-text table with one row per setting, mAP in percent.
pub fn render_sweep_table(rows: &[SweepRow]) -> String {
    let header = ["mode", "w_h", "w_o", "w_rel", "threshold", "Full", "Rare", "Non-Rare"];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                match r.nms.mode {
                    NmsMode::Product => "product".to_string(),
                    NmsMode::Sum => "sum".to_string(),
                },
                format!("{}", r.nms.w_h),
                format!("{}", r.nms.w_o),
                format!("{}", r.nms.w_rel),
                format!("{}", r.nms.threshold),
                pct(Some(r.map_full)),
                pct(r.map_rare),
                pct(r.map_nonrare),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &body {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(width)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1)));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Writes the sweep as JSON and as an aligned table.
pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SWEEP_REPORT), serde_json::to_string_pretty(rows)?)?;
    fs::write(dir.join(SWEEP_TABLE), render_sweep_table(rows))?;
    Ok(())
}

/// Runs one image through a checkpoint and writes every decoder
/// cross-attention map. With `images_dir`, each query's map is also saved
/// as a grayscale PNG named `<predictor>-l<layer>-h<head>-q<query>.png`.
pub fn cmd_export_attention(
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    images_dir: Option<&Path>,
    scale: u32,
) -> Result<AttentionExport> {
    let ck = checkpoint::load(checkpoint)?;
    let model = PrNet::from_checkpoint(&ck)?;
    let img = image::open(image)
        .map_err(|e| Error::Data(format!("{}: {e}", image.display())))?
        .to_rgb8();
    let (_, _, records) = model.predict(&image_to_tensor(&img))?;
    let grid = model.config.grid();
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    export_attention(&records, grid, out)?;
    let export = AttentionExport::from_records(&records, grid)?;
    if let Some(dir) = images_dir {
        fs::create_dir_all(dir)?;
        for rec in &export.records {
            let tag = serde_json::to_value(rec.predictor)?;
            let tag = tag.as_str().unwrap_or("decoder");
            for (q, map) in rec.queries.iter().enumerate() {
                let name = format!("{tag}-l{}-h{}-q{q:03}.png", rec.layer, rec.head);
                attention_image(map, scale.max(1))
                    .save(dir.join(name))
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            }
        }
    }
    Ok(export)
}
