//! Box geometry on graph variables. Boxes are `[n, 4]` rows of
//! `(cx, cy, w, h)`.

use crate::error::Result;
use crate::model::BBox;
use crate::nn::{Graph, Var};

/// Smallest axis-aligned box containing both `a` and `b`.
pub fn outer_box(a: BBox, b: BBox) -> BBox {
    a.outer(b)
}

/// Corner columns `(x0, y0, x1, y1)`, each `[n, 1]`.
pub fn corners(g: &mut Graph, boxes: Var) -> Result<[Var; 4]> {
    let cx = g.slice_last(boxes, 0, 1)?;
    let cy = g.slice_last(boxes, 1, 1)?;
    let w = g.slice_last(boxes, 2, 1)?;
    let h = g.slice_last(boxes, 3, 1)?;
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
}

fn from_corners(g: &mut Graph, [x0, y0, x1, y1]: [Var; 4]) -> Result<Var> {
    let sx = g.add(x0, x1)?;
    let sy = g.add(y0, y1)?;
    let cx = g.scale(sx, 0.5)?;
    let cy = g.scale(sy, 0.5)?;
    let w = g.sub(x1, x0)?;
    let h = g.sub(y1, y0)?;
    g.concat_last(&[cx, cy, w, h])
}

/// Row-wise outer box of two `[n, 4]` box sets through min/max, so the
/// gradient reaches whichever input defines each edge.
pub fn outer_box_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let [ax0, ay0, ax1, ay1] = corners(g, a)?;
    let [bx0, by0, bx1, by1] = corners(g, b)?;
    let c = [g.minimum(ax0, bx0)?, g.minimum(ay0, by0)?, g.maximum(ax1, bx1)?, g.maximum(ay1, by1)?];
    from_corners(g, c)
}

fn area(g: &mut Graph, x0: Var, y0: Var, x1: Var, y1: Var) -> Result<Var> {
    let w = g.sub(x1, x0)?;
    let h = g.sub(y1, y0)?;
    g.mul(w, h)
}

/// Row-wise generalized IoU, `[n, 1]`.
pub fn giou_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let [ax0, ay0, ax1, ay1] = corners(g, a)?;
    let [bx0, by0, bx1, by1] = corners(g, b)?;
    let area_a = area(g, ax0, ay0, ax1, ay1)?;
    let area_b = area(g, bx0, by0, bx1, by1)?;

    let ix0 = g.maximum(ax0, bx0)?;
    let iy0 = g.maximum(ay0, by0)?;
    let ix1 = g.minimum(ax1, bx1)?;
    let iy1 = g.minimum(ay1, by1)?;
    let iw = g.sub(ix1, ix0)?;
    let ih = g.sub(iy1, iy0)?;
    let iw = g.relu(iw)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;
    let sum = g.add(area_a, area_b)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;

    let ex0 = g.minimum(ax0, bx0)?;
    let ey0 = g.minimum(ay0, by0)?;
    let ex1 = g.maximum(ax1, bx1)?;
    let ey1 = g.maximum(ay1, by1)?;
    let enclosing = area(g, ex0, ey0, ex1, ey1)?;
    let gap = g.sub(enclosing, union)?;
    let penalty = g.div(gap, enclosing)?;
    g.sub(iou, penalty)
}

/// `sum_i (1 - GIoU(a_i, b_i))`.
pub fn giou_loss_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let giou = giou_var(g, a, b)?;
    let n = g.shape(giou)[0] as f64;
    let s = g.sum(giou)?;
    let neg = g.scale(s, -1.0)?;
    g.add_scalar(neg, n)
}
