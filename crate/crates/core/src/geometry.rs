//! Bounding-box math in center/size convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with center `(x, y)`, width `w` and height `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!(
                "box ({x}, {y}, {w}, {h}) needs finite coordinates and positive size"
            )));
        }
        Ok(BBox { x, y, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn x0(&self) -> f64 {
        self.x - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.y - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        iw * ih
    }

    /// True when `self` lies within `other`'s extent.
    pub fn is_inside(&self, other: &BBox) -> bool {
        self.x0() >= other.x0()
            && self.x1() <= other.x1()
            && self.y0() >= other.y0()
            && self.y1() <= other.y1()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    let x0 = a.x0().min(b.x0());
    let y0 = a.y0().min(b.y0());
    let x1 = a.x1().max(b.x1());
    let y1 = a.y1().max(b.y1());
    BBox {
        x: (x0 + x1) / 2.0,
        y: (y0 + y1) / 2.0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

pub const GEOMETRIC_FEATURE_DIM: usize = 6;

/// Relative position, scale, aspect ratios and overlap of a subject/object
/// box pair:
///
/// ```text
/// [ (xo-xs)/√(ws·hs), (yo-ys)/√(ws·hs), √(wo·ho / ws·hs), ws/hs, wo/ho, IoU ]
/// ```
pub fn geometric_feature(subject: &BBox, object: &BBox) -> [f64; GEOMETRIC_FEATURE_DIM] {
    let s_scale = (subject.w * subject.h).sqrt();
    [
        (object.x - subject.x) / s_scale,
        (object.y - subject.y) / s_scale,
        ((object.w * object.h) / (subject.w * subject.h)).sqrt(),
        subject.w / subject.h,
        object.w / object.h,
        iou(subject, object),
    ]
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower index first. A proposal is dropped when
/// its IoU with an already-kept proposal exceeds `iou_threshold`.
pub fn nms(proposals: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&i, &j| {
        proposals[j]
            .1
            .total_cmp(&proposals[i].1)
            .then_with(|| i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&proposals[i].0, &proposals[k].0) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0, 0, 0, 1]").is_err());
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(5.0, 0.0, 2.0, 2.0)), 0.0);
        let v = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 2.0, 2.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn union_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(union_box(&a, &a), a);
        assert_eq!(union_box(&a, &b(4.0, 0.0, 2.0, 2.0)), b(2.0, 0.0, 6.0, 2.0));
        let outer = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(union_box(&outer, &b(1.0, 1.0, 2.0, 2.0)), outer);
    }

    #[test]
    fn geometric_feature_hand_cases() {
        let s = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(geometric_feature(&s, &s), [0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(
            geometric_feature(&s, &b(0.0, 0.0, 4.0, 4.0)),
            [0.0, 0.0, 2.0, 1.0, 1.0, 0.25]
        );
        assert_eq!(
            geometric_feature(&s, &b(2.0, 2.0, 2.0, 2.0)),
            [1.0, 1.0, 1.0, 1.0, 1.0, 0.0]
        );
    }

    #[test]
    fn nms_cases() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(nms(&[(a, 0.3)], 0.5), vec![0]);
        assert_eq!(nms(&[(a, 0.9), (a, 0.8)], 0.5), vec![0]);
        assert_eq!(nms(&[(a, 0.8), (a, 0.9)], 0.5), vec![1]);
        assert_eq!(nms(&[(a, 0.5), (a, 0.5)], 0.5), vec![0]);
        assert_eq!(nms(&[(a, 0.5), (a, 0.5)], 1.0), vec![0, 1]);
        assert!(nms(&[], 0.5).is_empty());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-5.0..5.0f64, -5.0..5.0f64, 0.1..4.0f64, 0.1..4.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn self_feature_shape(a in arb_box()) {
            let r = geometric_feature(&a, &a);
            let ar = a.w / a.h;
            prop_assert_eq!(r[0], 0.0);
            prop_assert_eq!(r[1], 0.0);
            prop_assert!((r[2] - 1.0).abs() < 1e-12);
            prop_assert_eq!(r[3], ar);
            prop_assert_eq!(r[4], ar);
            prop_assert!((r[5] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn union_laws(a in arb_box(), c in arb_box(), d in arb_box()) {
            let close = |p: BBox, q: BBox| {
                p.to_array().iter().zip(q.to_array()).all(|(u, v)| (u - v).abs() < 1e-12)
            };
            prop_assert!(close(union_box(&a, &c), union_box(&c, &a)));
            prop_assert!(close(
                union_box(&union_box(&a, &c), &d),
                union_box(&a, &union_box(&c, &d))
            ));
            prop_assert!(close(union_box(&a, &a), a));
        }

        #[test]
        fn nms_kept_pairs_respect_threshold(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..12),
            thr in 0.1..0.9f64,
        ) {
            let kept = nms(&boxes, thr);
            for (i, &p) in kept.iter().enumerate() {
                for &q in &kept[i + 1..] {
                    prop_assert!(iou(&boxes[p].0, &boxes[q].0) <= thr);
                    prop_assert!(boxes[p].1 >= boxes[q].1);
                }
            }
        }
    }
}
