//! One-to-one assignment of prediction slots to ground-truth HOIs.

use serde::{Deserialize, Serialize};

use super::loss::{GroundTruthHOI, LossWeights};
use crate::error::{Error, Result};
use crate::model::{InstanceOutputs, RelationOutputs};
use crate::nn::kernels::sigmoid;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query_index, gt_index)`, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Queries assigned to no-object, ascending.
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, num_queries: usize) -> Self {
        pairs.sort_unstable();
        let mut used = vec![false; num_queries];
        for &(q, _) in &pairs {
            used[q] = true;
        }
        let unmatched = (0..num_queries).filter(|&q| !used[q]).collect();
        Self { pairs, unmatched }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Rectangular Hungarian algorithm with row/column potentials. `rows` index
/// the columns of `cost` (ground truths) and `cols` its rows (queries);
/// requires `rows.len() <= cols.len()`. Returns the total cost and, for each
/// entry of `rows`, the position in `cols` it is assigned to.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    let c = |i: usize, j: usize| cost[cols[j - 1]][rows[i - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[cols[assign[i]]][rows[i]]).sum();
    (total, assign)
}

/// Minimum-cost assignment of every ground truth (column of `cost`) to a
/// distinct query (row of `cost`). Among optimal assignments the one whose
/// query list, read in ground-truth order, is lexicographically smallest is
/// returned. Pairs are `(query, gt)` in ground-truth order.
pub fn linear_sum_assignment(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let m = cost.len();
    let n = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Data("cost matrix rows differ in length".into()));
    }
    if n > m {
        return Err(Error::Data(format!("{n} ground truths exceed {m} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let all_gts: Vec<usize> = (0..n).collect();
    let mut free: Vec<usize> = (0..m).collect();
    let (best, _) = solve(cost, &all_gts, &free);
    let tol = 1e-9 * best.abs().max(1.0);

    let mut pairs = Vec::with_capacity(n);
    let mut fixed = 0.0;
    for j in 0..n {
        let rest = &all_gts[j + 1..];
        let pick = free
            .iter()
            .position(|&q| {
                let others: Vec<usize> = free.iter().copied().filter(|&x| x != q).collect();
                fixed + cost[q][j] + solve(cost, rest, &others).0 <= best + tol
            })
            .expect("some query completes an optimal assignment");
        let q = free.remove(pick);
        fixed += cost[q][j];
        pairs.push((q, j));
    }
    Ok(pairs)
}

/// Joint matching cost of every query (rows) against every ground truth
/// (columns), mixing instance and relation terms.
pub fn matching_cost(
    inst: &InstanceOutputs,
    rel: &RelationOutputs,
    gts: &[GroundTruthHOI],
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    let l1 = |a: [f64; 4], b: [f64; 4]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let k1 = inst.object_logits.cols();
    (0..inst.human_boxes.len())
        .map(|q| {
            let logits = inst.object_logits.row(q);
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            let (hb, ob, ub) = (inst.human_boxes[q], inst.object_boxes[q], rel.relation_boxes[q]);
            let rel_logits = rel.relation_logits.row(q);
            gts.iter()
                .map(|gt| {
                    let boxes = l1(hb.to_array(), gt.human_box.to_array())
                        + l1(ob.to_array(), gt.object_box.to_array())
                        + l1(ub.to_array(), gt.relation_box.to_array());
                    let giou = (1.0 - hb.giou(gt.human_box)) + (1.0 - ob.giou(gt.object_box));
                    let p_obj = if gt.object_class < k1 {
                        (logits[gt.object_class] - mx).exp() / z
                    } else {
                        0.0
                    };
                    let p_rel = gt
                        .relation_classes
                        .iter()
                        .map(|&c| sigmoid(rel_logits[c]))
                        .sum::<f64>()
                        / gt.relation_classes.len() as f64;
                    w.w_box_l1 * boxes + w.w_giou * giou - w.w_obj_class * p_obj - w.w_rel_class * p_rel
                })
                .collect()
        })
        .collect()
}

/// Single joint assignment covering both predictors: query `i` of the
/// instance and relation branches is one HOI slot.
pub fn hungarian_match(
    inst: &InstanceOutputs,
    rel: &RelationOutputs,
    gts: &[GroundTruthHOI],
    w: &LossWeights,
) -> Result<MatchResult> {
    let q = inst.human_boxes.len();
    if gts.len() > q {
        return Err(Error::Data(format!("{} ground-truth HOIs exceed {q} queries", gts.len())));
    }
    if gts.is_empty() {
        return Ok(MatchResult::from_pairs(Vec::new(), q));
    }
    let cost = matching_cost(inst, rel, gts, w);
    Ok(MatchResult::from_pairs(linear_sum_assignment(&cost)?, q))
}
