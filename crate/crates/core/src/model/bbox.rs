use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalised centre format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Smallest box containing both. When one box already contains the
    /// other it is returned unchanged.
    pub fn outer(self, other: BBox) -> BBox {
        let [a0, a1, a2, a3] = self.to_xyxy();
        let [b0, b1, b2, b3] = other.to_xyxy();
        if a0 <= b0 && a1 <= b1 && a2 >= b2 && a3 >= b3 {
            return self;
        }
        if b0 <= a0 && b1 <= a1 && b2 >= a2 && b3 >= a3 {
            return other;
        }
        BBox::from_xyxy(a0.min(b0), a1.min(b1), a2.max(b2), a3.max(b3))
    }

    pub fn intersection_area(self, other: BBox) -> f64 {
        let [a0, a1, a2, a3] = self.to_xyxy();
        let [b0, b1, b2, b3] = other.to_xyxy();
        let w = (a2.min(b2) - a0.max(b0)).max(0.0);
        let h = (a3.min(b3) - a1.max(b1)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(self, other: BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalised IoU in `[-1, 1]`.
    pub fn giou(self, other: BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let hull = self.outer(other).area();
        if union <= 0.0 || hull <= 0.0 {
            return 0.0;
        }
        inter / union - (hull - union) / hull
    }

    pub fn is_valid_ground_truth(self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0
    }
}
