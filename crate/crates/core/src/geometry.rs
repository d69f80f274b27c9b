//! Box algebra in center parameterization.
//!
//! A [`BBox`] stores its center and extent; corner form is derived on demand.
//! [`encode_offset`] and [`decode_offset`] implement the R-CNN style regression
//! targets: translations scaled by the source extent and log-ratios of extents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box: center `(cx, cy)`, width `w`, height `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Regression target taking a source box onto a destination box.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxOffset {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// How a ratio is compared against a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// `iou >= threshold`
    #[default]
    Inclusive,
    /// `iou > threshold`
    Strict,
}

impl ThresholdMode {
    #[inline]
    pub fn passes(self, value: f64, threshold: f64) -> bool {
        match self {
            ThresholdMode::Inclusive => value >= threshold,
            ThresholdMode::Strict => value > threshold,
        }
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from corner coordinates `x1 < x2`, `y1 < y2`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "non-positive extent in {self:?}"
            )));
        }
        Ok(())
    }

    /// `[x1, y1, x2, y2]`
    #[inline]
    pub fn corners(&self) -> [f64; 4] {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    #[inline]
    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1) * (y2 - y1)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    /// Smallest box covering both.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        let a = self.corners();
        let b = other.corners();
        let (x1, y1) = (a[0].min(b[0]), a[1].min(b[1]));
        let (x2, y2) = (a[2].max(b[2]), a[3].max(b[3]));
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// Area of the corner-form intersection (0 when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let a = self.corners();
        let b = other.corners();
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        iw * ih
    }

    /// Center and extent divided by the image extent.
    pub fn normalized(&self, width: f64, height: f64) -> [f64; 4] {
        [
            self.cx / width,
            self.cy / height,
            self.w / width,
            self.h / height,
        ]
    }
}

impl BoxOffset {
    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxOffset {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union of two valid boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// [`iou`] without validation, for hot loops over already-validated boxes.
#[inline]
pub fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn encode_offset(r: &BBox, g: &BBox) -> Result<BoxOffset> {
    r.validate()?;
    g.validate()?;
    Ok(BoxOffset {
        tx: (g.cx - r.cx) / r.w,
        ty: (g.cy - r.cy) / r.h,
        tw: (g.w / r.w).ln(),
        th: (g.h / r.h).ln(),
    })
}

pub fn decode_offset(r: &BBox, t: &BoxOffset) -> Result<BBox> {
    r.validate()?;
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("offset {t:?}")));
    }
    let out = BBox {
        cx: r.w * t.tx + r.cx,
        cy: r.h * t.ty + r.cy,
        w: r.w * t.tw.exp(),
        h: r.h * t.th.exp(),
    };
    if !(out.w.is_finite() && out.h.is_finite()) {
        return Err(Error::NonFinite(format!(
            "decoded extent overflow from {t:?}"
        )));
    }
    out.validate()?;
    Ok(out)
}

/// Index of the highest-IoU proposal among those passing `threshold`;
/// ties resolve to the lowest index.
pub fn best_target_proposal(
    proposals: &[BBox],
    gt: &BBox,
    threshold: f64,
    mode: ThresholdMode,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in proposals.iter().enumerate() {
        let v = iou_unchecked(p, gt);
        if !mode.passes(v, threshold) {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Intersects `b` with `bounds` in corner form.
pub fn clip_box(b: &BBox, bounds: &BBox) -> Result<BBox> {
    b.validate()?;
    bounds.validate()?;
    let [x1, y1, x2, y2] = b.corners();
    let [bx1, by1, bx2, by2] = bounds.corners();
    let (nx1, ny1) = (x1.max(bx1), y1.max(by1));
    let (nx2, ny2) = (x2.min(bx2), y2.min(by2));
    if nx2 <= nx1 || ny2 <= ny1 {
        return Err(Error::OutOfBounds);
    }
    if nx1 == x1 && ny1 == y1 && nx2 == x2 && ny2 == y2 {
        return Ok(*b);
    }
    BBox::from_corners(nx1, ny1, nx2, ny2)
}

/// Bounds box for an image of the given extent with its origin at a corner.
pub fn image_bounds(width: f64, height: f64) -> Result<BBox> {
    BBox::new(width / 2.0, height / 2.0, width, height)
}
