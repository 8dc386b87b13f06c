//! Axis-aligned boxes, overlap metrics, and the relative spatial
//! configuration of an object box with respect to a human box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in normalized image coordinates, stored in corner
/// form. Width and height are strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite corner in [{x1}, {y1}, {x2}, {y2}]")));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!("zero or negative area [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Like [`Box::new`] but additionally requires every corner in `[0, 1]`.
    pub fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::new(x1, y1, x2, y2)?;
        if !b.is_normalized() {
            return Err(Error::InvalidBox(format!("outside the unit square [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// Top-left corner plus size.
    pub fn from_tlwh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn unit() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// `(cx, cy, w, h)`
    pub fn center_form(&self) -> [f64; 4] {
        [
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.width(),
            self.height(),
        ]
    }

    /// `(x, y, w, h)` with `(x, y)` the top-left corner.
    pub fn tlwh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn is_normalized(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Clamps into the unit square while keeping each side at least
    /// `min_side` long (`min_side <= 1`).
    pub fn clamp_unit(&self, min_side: f64) -> Self {
        let fix = |lo: f64, hi: f64| {
            let mut lo = lo.clamp(0.0, 1.0);
            let mut hi = hi.clamp(0.0, 1.0);
            if hi - lo < min_side {
                let mid = ((lo + hi) / 2.0).clamp(min_side / 2.0, 1.0 - min_side / 2.0);
                lo = mid - min_side / 2.0;
                hi = mid + min_side / 2.0;
            }
            (lo, hi)
        };
        let (x1, x2) = fix(self.x1, self.x2);
        let (y1, y2) = fix(self.y1, self.y2);
        Self { x1, y1, x2, y2 }
    }

    fn intersection_area(&self, other: &Box) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn enclosing_area(&self, other: &Box) -> f64 {
        (self.x2.max(other.x2) - self.x1.min(other.x1)) * (self.y2.max(other.y2) - self.y1.min(other.y1))
    }
}

impl TryFrom<[f64; 4]> for Box {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Box::new(c[0], c[1], c[2], c[3])
    }
}

impl From<Box> for [f64; 4] {
    fn from(b: Box) -> Self {
        b.corners()
    }
}

/// Intersection over union.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union.
pub fn giou(a: &Box, b: &Box) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.enclosing_area(b);
    inter / union - (hull - union) / hull
}

/// Object box placement relative to a human box: offsets are scaled by the
/// human's size and size ratios are natural logs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rsc {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Rsc {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

pub fn rsc(human: &Box, object: &Box) -> Rsc {
    let [xh, yh, wh, hh] = human.tlwh();
    let [xo, yo, wo, ho] = object.tlwh();
    Rsc {
        dx: (xo - xh) / wh,
        dy: (yo - yh) / hh,
        dw: (wo / wh).ln(),
        dh: (ho / hh).ln(),
    }
}

/// Inverse of [`rsc`]; the result is not clamped.
pub fn apply_rsc(human: &Box, r: &Rsc) -> Box {
    let [xh, yh, wh, hh] = human.tlwh();
    let (x, y) = (xh + r.dx * wh, yh + r.dy * hh);
    let (w, h) = (wh * r.dw.exp(), hh * r.dh.exp());
    Box {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        assert_eq!(iou(&Box::unit(), &Box::unit()), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 0.5, 0.5), &b(0.5, 0.5, 1.0, 1.0)), 0.0);
        // inter = 0.01, union = 0.07
        let v = iou(&b(0.0, 0.0, 0.2, 0.2), &b(0.1, 0.1, 0.3, 0.3));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn giou_fixtures() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        assert_eq!(giou(&a, &a), 1.0);
        let v = giou(&a, &b(0.1, 0.1, 0.3, 0.3));
        assert!((v - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-12);
        assert!(giou(&b(0.0, 0.0, 0.1, 0.1), &b(0.8, 0.8, 0.9, 0.9)) < 0.0);
    }

    #[test]
    fn rsc_fixtures() {
        let h = Box::from_tlwh(0.1, 0.2, 0.4, 0.2).unwrap();
        assert_eq!(rsc(&h, &h), Rsc::default());
        let o = Box::from_tlwh(0.3, 0.24, 0.2, 0.1).unwrap();
        let r = rsc(&h, &o);
        assert!((r.dx - 0.5).abs() < 1e-12);
        assert!((r.dy - 0.2).abs() < 1e-12);
        assert!((r.dw + std::f64::consts::LN_2).abs() < 1e-12);
        assert!((r.dh + std::f64::consts::LN_2).abs() < 1e-12);

        let wide = Box::from_tlwh(0.1, 0.2, 0.8, 0.2).unwrap();
        let r = rsc(&h, &wide);
        assert_eq!(r.dx, 0.0);
        assert!((r.dw - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn apply_rsc_fixtures() {
        let h = Box::from_tlwh(0.1, 0.2, 0.4, 0.2).unwrap();
        assert_eq!(apply_rsc(&h, &Rsc::default()), h);
        let o = Box::from_tlwh(0.3, 0.24, 0.2, 0.1).unwrap();
        let back = apply_rsc(&h, &rsc(&h, &o));
        for (p, q) in back.corners().iter().zip(o.corners()) {
            assert!((p - q).abs() < 1e-12);
        }
        let doubled = apply_rsc(&h, &Rsc { dw: std::f64::consts::LN_2, ..Rsc::default() });
        assert!((doubled.width() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(Box::new(0.2, 0.2, 0.2, 0.5).is_err());
        assert!(Box::new(0.2, 0.6, 0.3, 0.5).is_err());
        assert!(Box::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(Box::normalized(-0.1, 0.0, 0.5, 0.5).is_err());
        assert!(serde_json::from_str::<Box>("[0.5, 0.5, 0.1, 0.9]").is_err());
    }

    #[test]
    fn clamp_keeps_min_side() {
        let c = b(-0.5, 0.98, 0.02, 1.4).clamp_unit(1.0 / 16.0);
        assert!(c.is_normalized());
        assert!(c.width() >= 1.0 / 16.0 - 1e-15);
        assert!(c.height() >= 1.0 / 16.0 - 1e-15);
    }

    fn arb_box() -> impl Strategy<Value = Box> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, fw, fh)| {
            let w = (1.0 - x) * fw;
            let h = (1.0 - y) * fh;
            Box::from_tlwh(x, y, w, h).unwrap()
        })
    }

    proptest! {
        #[test]
        fn corner_center_round_trip(a in arb_box()) {
            let [cx, cy, w, h] = a.center_form();
            let back = Box::from_center(cx, cy, w, h).unwrap();
            for (p, q) in back.corners().iter().zip(a.corners()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn overlap_metric_properties(a in arb_box(), c in arb_box()) {
            prop_assert_eq!(iou(&a, &c), iou(&c, &a));
            let (i, g) = (iou(&a, &c), giou(&a, &c));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!(g <= i + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0);
        }

        #[test]
        fn rsc_round_trip(h in arb_box(), o in arb_box()) {
            let back = apply_rsc(&h, &rsc(&h, &o));
            for (p, q) in back.corners().iter().zip(o.corners()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
            prop_assert!(rsc(&h, &o).to_array().iter().all(|v| v.is_finite()));
        }
    }
}
