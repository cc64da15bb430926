use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::inference::{HOIDetection, PredictionDump};
use crate::training::GroundTruthHOI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Categories with fewer training instances than this are rare.
    pub rare_threshold: usize,
    /// `(object_class, relation_class)` pairs to score; empty means the
    /// dataset's own table.
    pub hoi_category_table: Vec<(usize, usize)>,
    /// Detections per image kept before NMS.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            rare_threshold: 10,
            hoi_category_table: Vec::new(),
            top_k: crate::inference::DEFAULT_TOP_K,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!("iou_threshold = {} must lie in (0, 1)", self.iou_threshold)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one detection, in the order detections were processed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionMatch {
    /// Index into the input detections.
    pub det: usize,
    pub score: f64,
    /// Ground truth consumed by this detection; `None` for a false positive.
    pub gt: Option<usize>,
}

impl DetectionMatch {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

fn min_iou(d: &HOIDetection, g: &GroundTruthHOI) -> f64 {
    d.human_box.iou(g.human_box).min(d.object_box.iou(g.object_box))
}

/// Greedy matching for one image. Detections are visited by descending
/// score (ties by input order). A detection is a true positive when some
/// unused ground truth of the same object and relation class has
/// `min(IoU_human, IoU_object) >= iou_threshold`; the best such ground truth
/// (lowest index on ties) is consumed.
pub fn match_detections(dets: &[HOIDetection], gts: &[GroundTruthHOI], iou_threshold: f64) -> Vec<DetectionMatch> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.object_class != d.object_class || !g.relation_classes.contains(&d.relation_class) {
                    continue;
                }
                let o = min_iou(d, g);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            DetectionMatch {
                det: i,
                score: d.score,
                gt: best.map(|(j, _)| j),
            }
        })
        .collect()
}

/// All-points interpolated area under the precision-recall curve.
/// Detections are ranked by descending score (ties keep input order).
/// Returns `None` when there is no ground truth.
pub fn average_precision(tp: &[bool], scores: &[f64], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    assert_eq!(tp.len(), scores.len(), "one score per detection");
    let mut order: Vec<usize> = (0..tp.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut hits, mut seen) = (0usize, 0usize);
    for i in order {
        seen += 1;
        if tp[i] {
            hits += 1;
        }
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / seen as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAP {
    pub object_class: usize,
    pub relation_class: usize,
    /// `None` when the evaluation set has no instance of the category.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
    pub train_frequency: usize,
    pub rare: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub full: usize,
    pub rare: usize,
    pub nonrare: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    #[serde(rename = "mAP_full")]
    pub map_full: f64,
    /// `None` when no rare category has ground truth.
    #[serde(rename = "mAP_rare")]
    pub map_rare: Option<f64>,
    #[serde(rename = "mAP_nonrare")]
    pub map_nonrare: Option<f64>,
    /// Categories with ground truth in each split.
    pub counts: SplitCounts,
    pub per_category: Vec<CategoryAP>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean AP over HOI categories with Full / Rare / Non-Rare splits. Rarity
/// comes from the dataset's training frequencies.
pub fn mean_ap(dump: &PredictionDump, data: &Dataset, cfg: &EvalConfig) -> Result<APResult> {
    cfg.validate()?;
    let gts = data.gts_by_image()?;
    if gts.values().all(Vec::is_empty) {
        return Err(Error::Data("evaluation set has no ground-truth HOIs".into()));
    }
    let table = if cfg.hoi_category_table.is_empty() {
        data.categories.hoi_pairs.clone()
    } else {
        cfg.hoi_category_table.clone()
    };
    let freq: BTreeMap<(usize, usize), usize> = data
        .categories
        .hoi_pairs
        .iter()
        .copied()
        .zip(data.categories.train_frequencies.iter().copied())
        .collect();

    #[derive(Default)]
    struct Acc {
        tp: Vec<bool>,
        scores: Vec<f64>,
        num_gt: usize,
    }
    let mut acc: BTreeMap<(usize, usize), Acc> = table.iter().map(|&c| (c, Acc::default())).collect();
    for image in gts.values() {
        for g in image {
            for &r in &g.relation_classes {
                if let Some(a) = acc.get_mut(&(g.object_class, r)) {
                    a.num_gt += 1;
                }
            }
        }
    }
    for im in &dump.images {
        let Some(image_gts) = gts.get(&im.image_id) else {
            return Err(Error::Data(format!("detections for unknown image {}", im.image_id)));
        };
        let mut by_cat: BTreeMap<(usize, usize), Vec<HOIDetection>> = BTreeMap::new();
        for d in &im.detections {
            if acc.contains_key(&d.category()) {
                by_cat.entry(d.category()).or_default().push(d.clone());
            }
        }
        for (cat, dets) in by_cat {
            let a = acc.get_mut(&cat).expect("category tabulated");
            for m in match_detections(&dets, image_gts, cfg.iou_threshold) {
                a.tp.push(m.is_tp());
                a.scores.push(m.score);
            }
        }
    }

    let mut per_category = Vec::with_capacity(acc.len());
    let (mut full, mut rare, mut nonrare) = (Vec::new(), Vec::new(), Vec::new());
    for &cat in &table {
        let a = &acc[&cat];
        let train_frequency = freq.get(&cat).copied().unwrap_or(0);
        let is_rare = train_frequency < cfg.rare_threshold;
        let ap = average_precision(&a.tp, &a.scores, a.num_gt);
        if let Some(v) = ap {
            full.push(v);
            if is_rare {
                rare.push(v);
            } else {
                nonrare.push(v);
            }
        }
        per_category.push(CategoryAP {
            object_class: cat.0,
            relation_class: cat.1,
            ap,
            num_gt: a.num_gt,
            num_detections: a.tp.len(),
            train_frequency,
            rare: is_rare,
        });
    }
    Ok(APResult {
        map_full: mean(&full).ok_or_else(|| Error::Data("no scored category has ground truth".into()))?,
        map_rare: mean(&rare),
        map_nonrare: mean(&nonrare),
        counts: SplitCounts {
            full: full.len(),
            rare: rare.len(),
            nonrare: nonrare.len(),
        },
        per_category,
    })
}
