use serde::{Deserialize, Serialize};

use super::boxes::{giou_loss_sum, outer_box_var};
use super::matcher::{hungarian_match, MatchResult};
use crate::error::{Error, Result};
use crate::model::{BBox, InstanceVars, LayerOutputs, RelationVars};
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGroundTruth")]
pub struct GroundTruthHOI {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    /// Sorted, deduplicated, non-empty.
    pub relation_classes: Vec<usize>,
    /// Always the outer box of the human and object boxes; recomputed on
    /// load, so never serialised.
    #[serde(skip_serializing)]
    pub relation_box: BBox,
}

#[derive(Deserialize)]
struct RawGroundTruth {
    human_box: BBox,
    object_box: BBox,
    object_class: usize,
    relation_classes: Vec<usize>,
}

impl TryFrom<RawGroundTruth> for GroundTruthHOI {
    type Error = Error;

    fn try_from(r: RawGroundTruth) -> Result<Self> {
        Self::new(r.human_box, r.object_box, r.object_class, r.relation_classes)
    }
}

impl GroundTruthHOI {
    pub fn new(human_box: BBox, object_box: BBox, object_class: usize, mut relation_classes: Vec<usize>) -> Result<Self> {
        relation_classes.sort_unstable();
        relation_classes.dedup();
        if relation_classes.is_empty() {
            return Err(Error::Data("ground-truth HOI has no relation class".into()));
        }
        if !human_box.is_valid_ground_truth() || !object_box.is_valid_ground_truth() {
            return Err(Error::Data(format!("invalid ground-truth box {human_box:?} / {object_box:?}")));
        }
        Ok(Self {
            human_box,
            object_box,
            object_class,
            relation_classes,
            relation_box: human_box.outer(object_box),
        })
    }

    /// Checks class indices against the model's class counts.
    pub fn check_classes(&self, num_object_classes: usize, num_relation_classes: usize) -> Result<()> {
        if self.object_class >= num_object_classes {
            return Err(Error::Data(format!(
                "object class {} out of range for {num_object_classes} classes",
                self.object_class
            )));
        }
        if let Some(&c) = self.relation_classes.iter().find(|&&c| c >= num_relation_classes) {
            return Err(Error::Data(format!(
                "relation class {c} out of range for {num_relation_classes} classes"
            )));
        }
        Ok(())
    }
}

/// Which queries the relation classification loss covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLossScope {
    /// Every query; unmatched ones get all-zero targets.
    #[default]
    AllQueries,
    MatchedOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_box_l1: f64,
    pub w_giou: f64,
    pub w_obj_class: f64,
    pub w_rel_class: f64,
    pub w_consistency: f64,
    pub no_object_coef: f64,
    /// Detach the pseudo relation box so the consistency term only moves
    /// the relation box.
    pub consistency_stop_gradient: bool,
    /// Add a GIoU term on the relation box.
    pub relation_giou: bool,
    /// Supervise every decoder layer, not just the last.
    pub aux_loss: bool,
    pub action_scope: ActionLossScope,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_box_l1: 2.5,
            w_giou: 1.0,
            w_obj_class: 1.0,
            w_rel_class: 1.0,
            w_consistency: 0.5,
            no_object_coef: 0.1,
            consistency_stop_gradient: false,
            relation_giou: false,
            aux_loss: true,
            action_scope: ActionLossScope::AllQueries,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [
            ("w_box_l1", self.w_box_l1),
            ("w_giou", self.w_giou),
            ("w_obj_class", self.w_obj_class),
            ("w_rel_class", self.w_rel_class),
            ("w_consistency", self.w_consistency),
            ("no_object_coef", self.no_object_coef),
        ];
        let bad: Vec<String> = ws
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(n, v)| format!("{n} = {v}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and >= 0: {}", bad.join(", "))))
        }
    }
}

/// Batch-level normalisers shared by every image and decoder layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossNorm {
    /// Matched pairs in the batch, floored at 1.
    pub matched: f64,
    /// Sum of per-query class weights in the batch.
    pub class_weight: f64,
}

impl LossNorm {
    pub fn new(num_gts: usize, num_queries: usize, w: &LossWeights) -> Self {
        let cw = num_gts as f64 + (num_queries - num_gts) as f64 * w.no_object_coef;
        Self {
            matched: (num_gts as f64).max(1.0),
            class_weight: if cw > 0.0 { cw } else { 1.0 },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InstanceLoss {
    pub l_hr: Var,
    pub l_or: Var,
    pub l_giou_h: Var,
    pub l_giou_o: Var,
    pub l_oc: Var,
    pub l_il: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RelationLoss {
    pub l_ur: Var,
    pub l_uc: Var,
    pub l_giou_u: Var,
    pub l_ac: Var,
    pub l_rl: Var,
}

/// Graph handles for every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub instance: InstanceLoss,
    pub relation: RelationLoss,
    pub total: Var,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_hr: f64,
    pub l_or: f64,
    pub l_oc: f64,
    pub l_giou_h: f64,
    pub l_giou_o: f64,
    pub l_ur: f64,
    pub l_uc: f64,
    pub l_giou_u: f64,
    pub l_ac: f64,
    pub l_il: f64,
    pub l_rl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_vars(g: &Graph, v: &LossVars) -> Self {
        let x = |var: Var| g.value(var).item();
        let (i, r) = (&v.instance, &v.relation);
        Self {
            l_hr: x(i.l_hr),
            l_or: x(i.l_or),
            l_oc: x(i.l_oc),
            l_giou_h: x(i.l_giou_h),
            l_giou_o: x(i.l_giou_o),
            l_ur: x(r.l_ur),
            l_uc: x(r.l_uc),
            l_giou_u: x(r.l_giou_u),
            l_ac: x(r.l_ac),
            l_il: x(i.l_il),
            l_rl: x(r.l_rl),
            total: x(v.total),
        }
    }

    /// `(l_il, l_rl)` recomputed from the individual terms.
    pub fn recompose(&self, w: &LossWeights) -> (f64, f64) {
        let il = w.w_box_l1 * (self.l_hr + self.l_or) + w.w_giou * (self.l_giou_h + self.l_giou_o) + w.w_obj_class * self.l_oc;
        let mut rl = w.w_box_l1 * self.l_ur + w.w_consistency * self.l_uc + w.w_rel_class * self.l_ac;
        if w.relation_giou {
            rl += w.w_giou * self.l_giou_u;
        }
        (il, rl)
    }
}

fn zero(g: &mut Graph) -> Result<Var> {
    g.constant(Tensor::scalar(0.0))
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = zero(g)?;
    for &(w, v) in terms {
        let s = g.scale(v, w)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

fn box_targets(gts: &[GroundTruthHOI], m: &MatchResult, f: impl Fn(&GroundTruthHOI) -> BBox) -> Result<Tensor> {
    let data = m.pairs.iter().flat_map(|&(_, j)| f(&gts[j]).to_array()).collect();
    Tensor::new(vec![m.len(), 4], data)
}

fn queries(m: &MatchResult) -> Vec<usize> {
    m.pairs.iter().map(|&(q, _)| q).collect()
}

/// Matched-pair L1 between predicted rows and targets, divided by `norm`.
fn matched_l1(g: &mut Graph, pred: Var, target: Tensor, m: &MatchResult, norm: f64) -> Result<Var> {
    let rows = g.select_rows(pred, &queries(m))?;
    let t = g.constant(target)?;
    let l = g.l1_loss(rows, t)?;
    g.scale(l, 1.0 / norm)
}

fn matched_giou(g: &mut Graph, pred: Var, target: Tensor, m: &MatchResult, norm: f64) -> Result<Var> {
    let rows = g.select_rows(pred, &queries(m))?;
    let t = g.constant(target)?;
    let l = giou_loss_sum(g, rows, t)?;
    g.scale(l, 1.0 / norm)
}

/// Box regression, GIoU and object classification losses of the instance
/// branch.
pub fn instance_loss(
    g: &mut Graph,
    inst: &InstanceVars,
    m: &MatchResult,
    gts: &[GroundTruthHOI],
    w: &LossWeights,
    norm: LossNorm,
) -> Result<InstanceLoss> {
    let (l_hr, l_or, l_giou_h, l_giou_o) = if m.is_empty() {
        let z = zero(g)?;
        (z, z, z, z)
    } else {
        let th = box_targets(gts, m, |t| t.human_box)?;
        let to = box_targets(gts, m, |t| t.object_box)?;
        (
            matched_l1(g, inst.human_boxes, th.clone(), m, norm.matched)?,
            matched_l1(g, inst.object_boxes, to.clone(), m, norm.matched)?,
            matched_giou(g, inst.human_boxes, th, m, norm.matched)?,
            matched_giou(g, inst.object_boxes, to, m, norm.matched)?,
        )
    };

    let shape = g.shape(inst.object_logits);
    let (nq, no_object) = (shape[0], shape[1] - 1);
    let mut targets = vec![no_object; nq];
    let mut weights = vec![w.no_object_coef; nq];
    for &(q, j) in &m.pairs {
        targets[q] = gts[j].object_class;
        weights[q] = 1.0;
    }
    let ce = g.cross_entropy(inst.object_logits, &targets, &weights)?;
    let l_oc = g.scale(ce, 1.0 / norm.class_weight)?;

    let l_il = weighted_sum(
        g,
        &[
            (w.w_box_l1, l_hr),
            (w.w_box_l1, l_or),
            (w.w_giou, l_giou_h),
            (w.w_giou, l_giou_o),
            (w.w_obj_class, l_oc),
        ],
    )?;
    Ok(InstanceLoss {
        l_hr,
        l_or,
        l_giou_h,
        l_giou_o,
        l_oc,
        l_il,
    })
}

/// Relation box regression, consistency with the outer box of the paired
/// human/object predictions, and multi-label relation classification.
pub fn relation_loss(
    g: &mut Graph,
    rel: &RelationVars,
    inst: &InstanceVars,
    m: &MatchResult,
    gts: &[GroundTruthHOI],
    w: &LossWeights,
    norm: LossNorm,
) -> Result<RelationLoss> {
    let (l_ur, l_uc, l_giou_u) = if m.is_empty() {
        let z = zero(g)?;
        (z, z, z)
    } else {
        let tu = box_targets(gts, m, |t| t.relation_box)?;
        let l_ur = matched_l1(g, rel.relation_boxes, tu.clone(), m, norm.matched)?;
        let q = queries(m);
        let pu = g.select_rows(rel.relation_boxes, &q)?;
        let ph = g.select_rows(inst.human_boxes, &q)?;
        let po = g.select_rows(inst.object_boxes, &q)?;
        let mut pseudo = outer_box_var(g, ph, po)?;
        if w.consistency_stop_gradient {
            pseudo = g.stop_gradient(pseudo)?;
        }
        let uc = g.l1_loss(pu, pseudo)?;
        let l_uc = g.scale(uc, 1.0 / norm.matched)?;
        let l_giou_u = if w.relation_giou {
            matched_giou(g, rel.relation_boxes, tu, m, norm.matched)?
        } else {
            zero(g)?
        };
        (l_ur, l_uc, l_giou_u)
    };

    let shape = g.shape(rel.relation_logits).to_vec();
    let r = shape[1];
    let l_ac = match w.action_scope {
        ActionLossScope::AllQueries => {
            let mut t = Tensor::zeros(&shape);
            for &(q, j) in &m.pairs {
                for &c in &gts[j].relation_classes {
                    t.data_mut()[q * r + c] = 1.0;
                }
            }
            let bce = g.sigmoid_bce(rel.relation_logits, &t)?;
            g.scale(bce, 1.0 / (r as f64 * norm.matched))?
        }
        ActionLossScope::MatchedOnly if m.is_empty() => zero(g)?,
        ActionLossScope::MatchedOnly => {
            let mut t = Tensor::zeros(&[m.len(), r]);
            for (k, &(_, j)) in m.pairs.iter().enumerate() {
                for &c in &gts[j].relation_classes {
                    t.data_mut()[k * r + c] = 1.0;
                }
            }
            let rows = g.select_rows(rel.relation_logits, &queries(m))?;
            let bce = g.sigmoid_bce(rows, &t)?;
            g.scale(bce, 1.0 / (r as f64 * norm.matched))?
        }
    };

    let mut terms = vec![(w.w_box_l1, l_ur), (w.w_consistency, l_uc), (w.w_rel_class, l_ac)];
    if w.relation_giou {
        terms.push((w.w_giou, l_giou_u));
    }
    let l_rl = weighted_sum(g, &terms)?;
    Ok(RelationLoss {
        l_ur,
        l_uc,
        l_giou_u,
        l_ac,
        l_rl,
    })
}

/// Field-wise sum over images and decoder layers; `total = l_il + l_rl`.
pub fn total_loss(g: &mut Graph, parts: &[(InstanceLoss, RelationLoss)]) -> Result<LossVars> {
    let z = zero(g)?;
    let mut i = InstanceLoss {
        l_hr: z,
        l_or: z,
        l_giou_h: z,
        l_giou_o: z,
        l_oc: z,
        l_il: z,
    };
    let mut r = RelationLoss {
        l_ur: z,
        l_uc: z,
        l_giou_u: z,
        l_ac: z,
        l_rl: z,
    };
    for (pi, pr) in parts {
        i.l_hr = g.add(i.l_hr, pi.l_hr)?;
        i.l_or = g.add(i.l_or, pi.l_or)?;
        i.l_giou_h = g.add(i.l_giou_h, pi.l_giou_h)?;
        i.l_giou_o = g.add(i.l_giou_o, pi.l_giou_o)?;
        i.l_oc = g.add(i.l_oc, pi.l_oc)?;
        i.l_il = g.add(i.l_il, pi.l_il)?;
        r.l_ur = g.add(r.l_ur, pr.l_ur)?;
        r.l_uc = g.add(r.l_uc, pr.l_uc)?;
        r.l_giou_u = g.add(r.l_giou_u, pr.l_giou_u)?;
        r.l_ac = g.add(r.l_ac, pr.l_ac)?;
        r.l_rl = g.add(r.l_rl, pr.l_rl)?;
    }
    let total = g.add(i.l_il, r.l_rl)?;
    Ok(LossVars {
        instance: i,
        relation: r,
        total,
    })
}

/// Matches one decoder layer's predictions and builds both loss parts.
pub fn layer_loss(
    g: &mut Graph,
    out: &LayerOutputs,
    gts: &[GroundTruthHOI],
    w: &LossWeights,
    norm: LossNorm,
) -> Result<(InstanceLoss, RelationLoss, MatchResult)> {
    let m = hungarian_match(&out.instance.values(g), &out.relation.values(g), gts, w)?;
    let il = instance_loss(g, &out.instance, &m, gts, w, norm)?;
    let rl = relation_loss(g, &out.relation, &out.instance, &m, gts, w, norm)?;
    Ok((il, rl, m))
}
