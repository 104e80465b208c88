//! Axis-aligned boxes in normalized image coordinates.

use crate::error::{Error, Result};

/// Center/size box, all values as fractions of image width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Lexicographic `(cx, cy, w, h)` order, used to break confidence ties.
    pub fn total_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.cx
            .total_cmp(&other.cx)
            .then(self.cy.total_cmp(&other.cy))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    // Areas from the same corner values as the overlap, so iou(a, a) == 1.
    let aa = (a.x2() - a.x1()) * (a.y2() - a.y1());
    let ba = (b.x2() - b.x1()) * (b.y2() - b.y1());
    if !(aa > 0.0 && ba > 0.0) {
        return 0.0;
    }
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    (inter / (aa + ba - inter)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            bbox: BBox::new(cx, cy, w, h),
            class_id,
        }
    }

    /// Checks `0 < w, h <= 1` and that the center lies inside the image.
    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        let finite = [b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite());
        if !finite
            || !(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0)
            || !(0.0..=1.0).contains(&b.cx)
            || !(0.0..=1.0).contains(&b.cy)
        {
            return Err(Error::Input(format!("ground-truth box outside [0, 1]: {b:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class_id: usize,
}

/// Highest confidence first; ties broken by class id, then box coordinates.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.total_cmp(&b.bbox))
}
