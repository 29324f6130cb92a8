//! Axis-aligned boxes in continuous pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open box `[x1, x2) × [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f32; 4]", try_from = "[f32; 4]")]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox([x1, y1, x2, y2]))
        }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translate(&self, dx: f32, dy: f32) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f32 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clamps to `[0, width] × [0, height]`; `None` when nothing is left.
    pub fn clamp_to(&self, width: f32, height: f32) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    /// Whether the pixel with integer index `(px, py)` has its center inside.
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        let x = px as f32 + 0.5;
        let y = py as f32 + 0.5;
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f32; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f32; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_fixed_cases() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
        let third = iou(&a, &b(5.0, 0.0, 15.0, 10.0));
        assert!((third - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f32::NAN, 5.0).is_err());
        assert!(BBox::new(3.0, 0.0, 1.0, 5.0).is_err());
    }

    #[test]
    fn clamp_drops_outside() {
        let outside = b(-20.0, -20.0, -5.0, -5.0);
        assert!(outside.clamp_to(100.0, 100.0).is_none());
        let partial = b(-5.0, 10.0, 20.0, 120.0).clamp_to(100.0, 100.0).unwrap();
        assert_eq!(partial.to_array(), [0.0, 10.0, 20.0, 100.0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0f32..100.0, 0f32..100.0, 0.5f32..60.0, 0.5f32..60.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }
}
