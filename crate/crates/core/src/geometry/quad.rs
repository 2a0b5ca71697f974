use super::hull::Polygon;
use super::raster::rasterize_convex_polygon;
use super::{PixelMask, Point};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle `[x_min, x_max] x [y_min, y_max]` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let r = Rect {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !r.is_ordered() {
            return Err(Error::Geometry(format!("rectangle is not ordered: {r:?}")));
        }
        Ok(r)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Rect {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Continuous intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &Rect) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Clamps into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: f64, height: f64) -> Rect {
        Rect {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }
}

/// Quadrilateral given by its four named corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub tl: Point,
    pub tr: Point,
    pub br: Point,
    pub bl: Point,
}

impl Quad {
    pub fn from_rect(r: &Rect) -> Self {
        corners_from_boxes(r, r)
    }

    /// Corners in boundary order TL, TR, BR, BL.
    pub fn corners(&self) -> [Point; 4] {
        [self.tl, self.tr, self.br, self.bl]
    }

    /// `[tl.x, tl.y, tr.x, tr.y, br.x, br.y, bl.x, bl.y]`.
    pub fn to_array(&self) -> [f64; 8] {
        let c = self.corners();
        [c[0].x, c[0].y, c[1].x, c[1].y, c[2].x, c[2].y, c[3].x, c[3].y]
    }

    pub fn polygon(&self) -> Result<Polygon> {
        Polygon::new(self.corners().to_vec())
    }

    /// Simple, convex and of positive area.
    pub fn is_valid(&self) -> bool {
        self.polygon().map(|p| p.is_convex()).unwrap_or(false)
    }

    pub fn envelope(&self) -> Rect {
        let c = self.corners();
        let fold = |f: fn(f64, f64) -> f64, g: fn(&Point) -> f64, init: f64| {
            c.iter().map(g).fold(init, f)
        };
        Rect {
            x_min: fold(f64::min, |p| p.x, f64::INFINITY),
            y_min: fold(f64::min, |p| p.y, f64::INFINITY),
            x_max: fold(f64::max, |p| p.x, f64::NEG_INFINITY),
            y_max: fold(f64::max, |p| p.y, f64::NEG_INFINITY),
        }
    }

    /// Pixels whose centres lie in the quad; errors unless the quad is valid.
    pub fn rasterize(&self, width: usize, height: usize) -> Result<PixelMask> {
        rasterize_convex_polygon(&self.polygon()?, width, height)
    }

    fn scaled(&self, s: f64, dx: f64, dy: f64) -> Quad {
        let f = |p: Point| Point::new(p.x * s - dx, p.y * s - dy);
        Quad {
            tl: f(self.tl),
            tr: f(self.tr),
            br: f(self.br),
            bl: f(self.bl),
        }
    }
}

/// A quadrilateral encoded by the two rectangles spanned by its diagonals, plus class
/// probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedBBox {
    /// Spanned by the top-left and bottom-right corners.
    pub box_tlbr: Rect,
    /// Spanned by the top-right and bottom-left corners.
    pub box_trbl: Rect,
    pub class_probs: Vec<f64>,
    /// Largest entry of `class_probs`.
    pub score: f64,
}

impl GeneralizedBBox {
    pub fn new(box_tlbr: Rect, box_trbl: Rect, class_probs: Vec<f64>) -> Result<Self> {
        if !box_tlbr.is_ordered() || !box_trbl.is_ordered() {
            return Err(Error::Geometry("generalized box rectangles must be ordered".into()));
        }
        if class_probs.is_empty() || class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Geometry("class probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = class_probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Geometry(format!("class probabilities sum to {total}")));
        }
        let score = class_probs.iter().copied().fold(0.0, f64::max);
        Ok(GeneralizedBBox {
            box_tlbr,
            box_trbl,
            class_probs,
            score,
        })
    }

    /// Index of the most probable class; the first one on ties.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn corners(&self) -> Quad {
        corners_from_boxes(&self.box_tlbr, &self.box_trbl)
    }
}

pub fn corners_from_boxes(box_tlbr: &Rect, box_trbl: &Rect) -> Quad {
    Quad {
        tl: Point::new(box_tlbr.x_min, box_tlbr.y_min),
        tr: Point::new(box_trbl.x_max, box_trbl.y_min),
        br: Point::new(box_tlbr.x_max, box_tlbr.y_max),
        bl: Point::new(box_trbl.x_min, box_trbl.y_max),
    }
}

/// Inverse of [`corners_from_boxes`]. Errors when TL is not above-left of BR or TR is
/// not above-right of BL.
pub fn boxes_from_corners(q: &Quad) -> Result<(Rect, Rect)> {
    let tlbr = Rect {
        x_min: q.tl.x,
        y_min: q.tl.y,
        x_max: q.br.x,
        y_max: q.br.y,
    };
    let trbl = Rect {
        x_min: q.bl.x,
        y_min: q.tr.y,
        x_max: q.tr.x,
        y_max: q.bl.y,
    };
    if !tlbr.is_ordered() || !trbl.is_ordered() {
        return Err(Error::Geometry(format!("corner ordering is inconsistent: {q:?}")));
    }
    Ok((tlbr, trbl))
}

/// Extreme-point corners of an instance: TL minimizes x+y, BR maximizes x+y, TR maximizes
/// x−y and BL minimizes x−y over set pixels, each placed at the matching corner of the
/// chosen pixel so that an axis-aligned rectangle mask yields its exact outline.
pub fn gbbox_corners_from_mask(mask: &PixelMask) -> Result<Quad> {
    let mut it = mask.iter_set().map(|(x, y)| (x as i64, y as i64));
    let first = it
        .next()
        .ok_or_else(|| Error::Geometry("corner extraction from an empty mask".into()))?;
    let (mut tl, mut br, mut tr, mut bl) = (first, first, first, first);
    // row-major visiting order: strict comparisons keep the first pixel on ties for TL and
    // TR, non-strict ones keep the last for BR and BL
    for p in it {
        if p.0 + p.1 < tl.0 + tl.1 {
            tl = p;
        }
        if p.0 + p.1 >= br.0 + br.1 {
            br = p;
        }
        if p.0 - p.1 > tr.0 - tr.1 {
            tr = p;
        }
        if p.0 - p.1 <= bl.0 - bl.1 {
            bl = p;
        }
    }
    let pt = |p: (i64, i64), dx: i64, dy: i64| Point::new((p.0 + dx) as f64, (p.1 + dy) as f64);
    Ok(Quad {
        tl: pt(tl, 0, 0),
        tr: pt(tr, 1, 0),
        br: pt(br, 1, 1),
        bl: pt(bl, 0, 1),
    })
}

/// Intersection over union of two convex quads, counted on a raster with `resolution`
/// cells per pixel. Invalid quads count as empty; an empty union gives 0.
pub fn quad_iou(a: &Quad, b: &Quad, resolution: f64) -> f64 {
    assert!(resolution > 0.0, "quad_iou resolution must be positive");
    let (ea, eb) = (a.envelope(), b.envelope());
    if !ea.overlaps(&eb) {
        return 0.0;
    }
    let x0 = (ea.x_min.min(eb.x_min) * resolution).floor();
    let y0 = (ea.y_min.min(eb.y_min) * resolution).floor();
    let x1 = (ea.x_max.max(eb.x_max) * resolution).ceil();
    let y1 = (ea.y_max.max(eb.y_max) * resolution).ceil();
    let (w, h) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let raster = |q: &Quad| {
        q.scaled(resolution, x0, y0)
            .rasterize(w, h)
            .unwrap_or_else(|_| PixelMask::new(w, h))
    };
    let (ma, mb) = (raster(a), raster(b));
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in ma.bits().iter().zip(mb.bits()) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
