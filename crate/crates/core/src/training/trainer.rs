use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{layer_loss, total_loss, GroundTruthHOI, LossBreakdown, LossNorm, LossWeights};
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, TrainingState};
use crate::model::{PrNet, BACKBONE_PREFIX};
use crate::nn::{AdamW, Graph, Tensor};

/// One training image with its annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub gts: Vec<GroundTruthHOI>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub backbone: f64,
    pub rest: f64,
}

impl LearningRates {
    fn of(&self, name: &str) -> f64 {
        if name.starts_with(BACKBONE_PREFIX) {
            self.backbone
        } else {
            self.rest
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_backbone: f64,
    /// Epochs (0-based) at whose start the learning rates are multiplied by
    /// `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Write `epoch-NNNN.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Stop as soon as a step's total loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 4,
            lr: 1e-4,
            lr_backbone: 1e-5,
            decay_epochs: vec![100, 130],
            decay_factor: 0.1,
            weight_decay: AdamW::DEFAULT_WEIGHT_DECAY,
            clip_norm: 0.1,
            seed: 0,
            checkpoint_every: 10,
            target_loss: None,
        }
    }
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> LearningRates {
        let k = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        let f = self.decay_factor.powi(k as i32);
        LearningRates {
            backbone: self.lr_backbone * f,
            rest: self.lr * f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        for (n, v) in [
            ("lr", self.lr),
            ("lr_backbone", self.lr_backbone),
            ("decay_factor", self.decay_factor),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bad.push(format!("{n} = {v}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule: {}", bad.join(", "))))
        }
    }
}

fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Forward, match and loss for a batch in one graph. Dropout is driven by
/// `seed` when the graph is in training mode.
pub fn batch_loss(g: &mut Graph, model: &PrNet, batch: &[Sample], w: &LossWeights) -> Result<super::LossVars> {
    let q = model.config.num_queries;
    let num_gts = batch.iter().map(|s| s.gts.len()).sum();
    let norm = LossNorm::new(num_gts, q * batch.len(), w);
    let mut parts = Vec::new();
    for s in batch {
        for gt in &s.gts {
            gt.check_classes(model.config.num_object_classes, model.config.num_relation_classes)?;
        }
        let out = model.forward(g, &s.image)?;
        let (il, rl, _) = layer_loss(g, &out.outputs, &s.gts, w, norm)?;
        parts.push((il, rl));
        if w.aux_loss {
            for layer in &out.aux {
                let (il, rl, _) = layer_loss(g, layer, &s.gts, w, norm)?;
                parts.push((il, rl));
            }
        }
    }
    total_loss(g, &parts)
}

/// One optimisation step: forward, match, loss, backward, clip, AdamW with
/// separate backbone and head learning rates.
pub fn train_step(
    model: &mut PrNet,
    batch: &[Sample],
    opt: &mut AdamW,
    w: &LossWeights,
    lr: LearningRates,
    clip_norm: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Usage("train_step needs a non-empty batch".into()));
    }
    let (grads, breakdown) = {
        let mut g = Graph::with_params(&model.params).train(seed);
        let vars = batch_loss(&mut g, model, batch, w)?;
        let breakdown = LossBreakdown::from_vars(&g, &vars);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {breakdown:?}")));
        }
        (g.backward(vars.total)?, breakdown)
    };
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params);
    model.params.clip_grad_norm(clip_norm);
    opt.step_with(&mut model.params, |_, name| lr.of(name));
    Ok(breakdown)
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    step: u64,
    epoch: usize,
    lr_backbone: f64,
    lr: f64,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    step: u64,
    error: String,
    param_norms: Vec<(&'a str, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    /// Steps run in this call (excludes any resumed prefix).
    pub losses: Vec<LossBreakdown>,
    pub epochs_completed: usize,
    pub steps_completed: u64,
    pub stopped_early: bool,
}

/// Files written by [`fit`] under `dir`.
pub struct FitPaths {
    pub dir: PathBuf,
}

impl FitPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.ndjson")
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.ckpt")
    }

    pub fn epoch(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:04}.ckpt"))
    }

    pub fn nan_dump(&self) -> PathBuf {
        self.dir.join("nonfinite_dump.json")
    }
}

fn write_dump(path: &Path, model: &PrNet, epoch: usize, step: u64, err: &Error) -> Result<()> {
    let dump = NonFiniteDump {
        epoch,
        step,
        error: err.to_string(),
        param_norms: model
            .params
            .iter()
            .map(|(_, p)| (p.name.as_str(), p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&dump)?)?;
    Ok(())
}

/// Epoch loop with step decay. Each epoch shuffles with a seed derived from
/// `(seed, epoch)` and each step seeds dropout from `(seed, step)`, so a run
/// resumed from an epoch checkpoint continues identically. `latest.ckpt` is
/// rewritten after every epoch; metrics are appended one JSON line per step.
pub fn fit(
    model: &mut PrNet,
    data: &[Sample],
    sched: &Schedule,
    w: &LossWeights,
    paths: &FitPaths,
    resume: Option<TrainingState>,
) -> Result<FitReport> {
    sched.validate()?;
    w.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    fs::create_dir_all(&paths.dir)?;
    let (start_epoch, mut step, mut opt) = match resume {
        Some(t) => (t.epoch as usize, t.step, t.optimizer),
        None => (0, 0, AdamW::new(&model.params, sched.weight_decay)),
    };
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(start_epoch > 0)
        .truncate(start_epoch == 0)
        .open(paths.metrics())?;

    let mut report = FitReport {
        epochs_completed: start_epoch,
        steps_completed: step,
        ..FitReport::default()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in start_epoch..sched.epochs {
        let lr = sched.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(sched.seed, epoch as u64)));
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let loss = match train_step(model, &batch, &mut opt, w, lr, sched.clip_norm, mix(!sched.seed, step)) {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    write_dump(&paths.nan_dump(), model, epoch, step, &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            step += 1;
            let line = MetricsLine {
                step,
                epoch,
                lr_backbone: lr.backbone,
                lr: lr.rest,
                loss: &loss,
            };
            writeln!(metrics, "{}", serde_json::to_string(&line)?)?;
            let done = sched.target_loss.is_some_and(|t| loss.total < t);
            report.losses.push(loss);
            if done {
                report.stopped_early = true;
                break;
            }
        }
        metrics.flush()?;
        report.epochs_completed = epoch + 1;
        report.steps_completed = step;
        let state = TrainingState {
            epoch: (epoch + 1) as u64,
            step,
            optimizer: opt.clone(),
        };
        checkpoint::save(&paths.latest(), model, Some(&state))?;
        if sched.checkpoint_every > 0 && (epoch + 1) % sched.checkpoint_every == 0 {
            checkpoint::save(&paths.epoch(epoch + 1), model, Some(&state))?;
        }
        if report.stopped_early {
            break;
        }
    }
    Ok(report)
}
