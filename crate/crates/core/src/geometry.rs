//! Axis-aligned boxes in normalised centre form.
//!
//! `w` is the horizontal extent (the `L` box parameter) and `h` the vertical
//! extent (the `W` box parameter); both are fractions of image width/height.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    /// From corner coordinates `(x0, y0, x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn l1(&self, other: &BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

/// Intersection over union; zero when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection(&ca, &cb);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalised IoU in `[-1, 1]`.
///
/// Degenerate boxes contribute IoU 0; the enclosing hull still spans their
/// extents (which collapse to their centres).
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU and its gradient with respect to `(a.cx, a.cy, a.w, a.h)`.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let ca = a.corners();
    let cb = b.corners();

    let (iw, d_iw) = overlap_1d(ca[0], ca[2], cb[0], cb[2]);
    let (ih, d_ih) = overlap_1d(ca[1], ca[3], cb[1], cb[3]);
    let inter = iw * ih;
    // derivatives w.r.t. (ax0, ay0, ax1, ay1)
    let d_inter = [d_iw[0] * ih, d_ih[0] * iw, d_iw[1] * ih, d_ih[1] * iw];

    let (aw, ah) = (ca[2] - ca[0], ca[3] - ca[1]);
    let area_a = aw * ah;
    let area_b = (cb[2] - cb[0]) * (cb[3] - cb[1]);
    let d_area_a = [-ah, -aw, ah, aw];
    let union = area_a + area_b - inter;

    let (hw, d_hw) = hull_1d(ca[0], ca[2], cb[0], cb[2]);
    let (hh, d_hh) = hull_1d(ca[1], ca[3], cb[1], cb[3]);
    let hull = hw * hh;
    let d_hull = [d_hw[0] * hh, d_hh[0] * hw, d_hw[1] * hh, d_hh[1] * hw];

    let mut value = 0.0;
    let mut d_corner = [0.0; 4];
    if union > 0.0 {
        value += inter / union;
        for k in 0..4 {
            let d_union = d_area_a[k] - d_inter[k];
            d_corner[k] += (d_inter[k] * union - inter * d_union) / (union * union);
        }
    }
    if hull > 0.0 {
        // -(hull - union)/hull = union/hull - 1
        value += union / hull - 1.0;
        for k in 0..4 {
            let d_union = d_area_a[k] - d_inter[k];
            d_corner[k] += (d_union * hull - union * d_hull[k]) / (hull * hull);
        }
    }
    // corners -> (cx, cy, w, h)
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    (value, grad)
}

/// Overlap length of `[a0,a1]` and `[b0,b1]` with derivative w.r.t. `(a0, a1)`.
fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> (f64, [f64; 2]) {
    let len = a1.min(b1) - a0.max(b0);
    if len <= 0.0 {
        return (0.0, [0.0, 0.0]);
    }
    let d0 = if a0 > b0 { -1.0 } else { 0.0 };
    let d1 = if a1 < b1 { 1.0 } else { 0.0 };
    (len, [d0, d1])
}

/// Enclosing length with derivative w.r.t. `(a0, a1)`.
fn hull_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> (f64, [f64; 2]) {
    let len = a1.max(b1) - a0.min(b0);
    let d0 = if a0 < b0 { -1.0 } else { 0.0 };
    let d1 = if a1 > b1 { 1.0 } else { 0.0 };
    (len.max(0.0), [d0, d1])
}

/// L1 distance over the four box parameters and its gradient w.r.t. `a`.
pub fn l1_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let (aa, bb) = (a.to_array(), b.to_array());
    let mut grad = [0.0; 4];
    let mut total = 0.0;
    for k in 0..4 {
        let d = aa[k] - bb[k];
        total += d.abs();
        grad[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_identical_is_one() {
        let a = BBox::new(0.4, 0.6, 0.2, 0.3);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn giou_disjoint_unit_boxes() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(2.5, 0.5, 1.0, 1.0);
        assert!((giou(&a, &b) + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_nested_box() {
        let outer = BBox::new(0.0, 0.0, 2.0, 2.0);
        let inner = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!((giou(&inner, &outer) - 0.25).abs() < 1e-15);
        assert!((box_iou(&inner, &outer) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_area_boxes_have_zero_iou() {
        let a = BBox::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(box_iou(&a, &a), 0.0);
        let g = giou(&a, &BBox::new(0.5, 0.5, 0.2, 0.2));
        assert!(g.is_finite() && (-1.0..=1.0).contains(&g));
    }

    #[test]
    fn iou_half_shift() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(box_iou(&a, &BBox::new(3.0, 3.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let cases = [
            (BBox::new(0.4, 0.5, 0.3, 0.2), BBox::new(0.5, 0.45, 0.25, 0.32)),
            (BBox::new(0.2, 0.2, 0.1, 0.1), BBox::new(0.7, 0.8, 0.2, 0.3)),
            (BBox::new(0.5, 0.5, 0.5, 0.5), BBox::new(0.52, 0.49, 0.2, 0.1)),
        ];
        let h = 1e-7;
        for (a, b) in cases {
            let (_, grad) = giou_with_grad(&a, &b);
            for k in 0..4 {
                let mut p = a.to_array();
                let mut m = a.to_array();
                p[k] += h;
                m[k] -= h;
                let fd = (giou(&BBox::from_slice(&p), &b) - giou(&BBox::from_slice(&m), &b))
                    / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-6, "k={k} fd={fd} an={}", grad[k]);
            }
        }
    }
}
