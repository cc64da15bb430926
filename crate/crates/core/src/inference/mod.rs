//! Scored HOI detections from raw decoder outputs: score composition,
//! top-k selection and Trident-NMS.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BBox, InstanceOutputs, PrNet, RelationOutputs};
use crate::nn::kernels::sigmoid;
use crate::nn::Tensor;

/// Detections kept before NMS.
pub const DEFAULT_TOP_K: usize = 100;

/// One query's paired instance and relation predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HOIPrediction {
    pub human_box: BBox,
    pub object_box: BBox,
    pub relation_box: BBox,
    pub object_class: usize,
    pub object_score: f64,
    pub relation_scores: Vec<f64>,
    /// `object_score * relation_scores[k]`.
    pub hoi_scores: Vec<f64>,
    pub query_index: usize,
}

/// A single (pair, relation class) detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HOIDetection {
    pub human_box: BBox,
    pub object_box: BBox,
    pub relation_box: BBox,
    pub object_class: usize,
    pub relation_class: usize,
    pub score: f64,
    pub query_index: usize,
}

impl HOIDetection {
    pub fn category(&self) -> (usize, usize) {
        (self.object_class, self.relation_class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMode {
    Product,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TridentNMSConfig {
    pub mode: NmsMode,
    pub w_h: f64,
    pub w_o: f64,
    pub w_rel: f64,
    /// A detection is dropped when its TriIoU with a kept one is strictly
    /// greater than this.
    pub threshold: f64,
}

impl Default for TridentNMSConfig {
    fn default() -> Self {
        Self {
            mode: NmsMode::Product,
            w_h: 1.0,
            w_o: 0.5,
            w_rel: 0.5,
            threshold: 0.5,
        }
    }
}

impl TridentNMSConfig {
    pub fn new(mode: NmsMode, w_h: f64, w_o: f64, w_rel: f64, threshold: f64) -> Self {
        Self {
            mode,
            w_h,
            w_o,
            w_rel,
            threshold,
        }
    }

    /// The ten weight/threshold settings of the Trident-NMS ablation: five
    /// sum-mode rows followed by five product-mode rows.
    pub fn ablation_grid() -> Vec<Self> {
        use NmsMode::{Product, Sum};
        vec![
            Self::new(Sum, 0.33, 0.33, 0.33, 0.5),
            Self::new(Sum, 0.33, 0.33, 0.33, 0.7),
            Self::new(Sum, 0.4, 0.4, 0.2, 0.7),
            Self::new(Sum, 0.5, 0.4, 0.1, 0.7),
            Self::new(Sum, 0.6, 0.3, 0.1, 0.7),
            Self::new(Product, 1.0, 1.0, 1.0, 0.5),
            Self::new(Product, 1.0, 1.0, 0.5, 0.5),
            Self::new(Product, 0.5, 0.5, 0.5, 0.5),
            Self::new(Product, 0.5, 1.0, 0.5, 0.5),
            Self::new(Product, 1.0, 0.5, 0.5, 0.5),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (n, v) in [("w_h", self.w_h), ("w_o", self.w_o), ("w_rel", self.w_rel)] {
            if !(v.is_finite() && v >= 0.0) {
                bad.push(format!("{n} = {v} must be finite and >= 0"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            bad.push(format!("threshold = {} must lie in (0, 1]", self.threshold));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid NMS config: {}", bad.join("; "))))
        }
    }
}

/// Pairs query `i` of the instance outputs with query `i` of the relation
/// outputs. Queries whose most probable class is no-object are dropped.
pub fn compose_predictions(inst: &InstanceOutputs, rel: &RelationOutputs) -> Vec<HOIPrediction> {
    let k1 = inst.object_logits.cols();
    let no_object = k1 - 1;
    let mut out = Vec::new();
    for q in 0..inst.human_boxes.len() {
        let logits = inst.object_logits.row(q);
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
        // first maximum wins, so a tie with a real class keeps the query
        let argmax = (0..k1).fold(0, |best, k| if probs[k] > probs[best] { k } else { best });
        if argmax == no_object {
            continue;
        }
        let object_score = probs[argmax];
        let relation_scores: Vec<f64> = rel.relation_logits.row(q).iter().map(|&x| sigmoid(x)).collect();
        let hoi_scores = relation_scores.iter().map(|s| object_score * s).collect();
        out.push(HOIPrediction {
            human_box: inst.human_boxes[q],
            object_box: inst.object_boxes[q],
            relation_box: rel.relation_boxes[q],
            object_class: argmax,
            object_score,
            relation_scores,
            hoi_scores,
            query_index: q,
        });
    }
    out
}

/// Descending score, then ascending query index, then relation class.
pub fn detection_order(a: &HOIDetection, b: &HOIDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.query_index.cmp(&b.query_index))
        .then(a.relation_class.cmp(&b.relation_class))
}

/// Flattens every (prediction, relation class) pair and keeps the `k`
/// highest-scoring, in [`detection_order`].
pub fn top_k(preds: &[HOIPrediction], k: usize) -> Vec<HOIDetection> {
    let mut all: Vec<HOIDetection> = preds
        .iter()
        .flat_map(|p| {
            p.hoi_scores.iter().enumerate().map(move |(c, &score)| HOIDetection {
                human_box: p.human_box,
                object_box: p.object_box,
                relation_box: p.relation_box,
                object_class: p.object_class,
                relation_class: c,
                score,
                query_index: p.query_index,
            })
        })
        .collect();
    all.sort_by(detection_order);
    all.truncate(k);
    all
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: BBox, b: BBox) -> f64 {
    a.iou(b)
}

/// Combines human, object and relation IoUs. Product mode uses `0^0 = 1`.
pub fn tri_iou_from(ious: [f64; 3], cfg: &TridentNMSConfig) -> f64 {
    let ws = [cfg.w_h, cfg.w_o, cfg.w_rel];
    match cfg.mode {
        NmsMode::Product => ious
            .iter()
            .zip(ws)
            .map(|(&x, w)| if w == 0.0 { 1.0 } else { x.powf(w) })
            .product(),
        NmsMode::Sum => ious.iter().zip(ws).map(|(&x, w)| w * x).sum(),
    }
}

pub fn tri_iou(a: &HOIDetection, b: &HOIDetection, cfg: &TridentNMSConfig) -> f64 {
    tri_iou_from(
        [
            iou(a.human_box, b.human_box),
            iou(a.object_box, b.object_box),
            iou(a.relation_box, b.relation_box),
        ],
        cfg,
    )
}

/// Greedy per-category suppression. Within each (object class, relation
/// class) group, detections are visited in [`detection_order`] and dropped
/// when their TriIoU with an already kept detection exceeds the threshold.
/// The result is in [`detection_order`].
pub fn trident_nms(dets: &[HOIDetection], cfg: &TridentNMSConfig) -> Vec<HOIDetection> {
    let mut groups: BTreeMap<(usize, usize), Vec<&HOIDetection>> = BTreeMap::new();
    for d in dets {
        groups.entry(d.category()).or_default().push(d);
    }
    let mut kept = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| detection_order(a, b));
        let mut keep: Vec<&HOIDetection> = Vec::new();
        for d in group {
            if keep.iter().all(|k| tri_iou(k, d, cfg) <= cfg.threshold) {
                keep.push(d);
            }
        }
        kept.extend(keep.into_iter().cloned());
    }
    kept.sort_by(detection_order);
    kept
}

/// Raw (pre-NMS) detections of one image: compose and keep the top `k`.
pub fn raw_detections(model: &PrNet, image: &Tensor, k: usize) -> Result<Vec<HOIDetection>> {
    let (inst, rel, _) = model.predict(image)?;
    Ok(top_k(&compose_predictions(&inst, &rel), k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<HOIDetection>,
}

/// Per-image detection lists, boxes in normalised `(cx, cy, w, h)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub images: Vec<ImageDetections>,
}

impl PredictionDump {
    pub fn apply_nms(&self, cfg: &TridentNMSConfig) -> Self {
        Self {
            images: self
                .images
                .iter()
                .map(|im| ImageDetections {
                    image_id: im.image_id,
                    detections: trident_nms(&im.detections, cfg),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
