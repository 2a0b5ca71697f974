//! Exact 2D geometry on pixel grids.
//!
//! Floating-point coordinates are snapped to a 1/16-pixel grid, and every orientation
//! and containment predicate is then evaluated in integer arithmetic, so hulls and
//! rasterizations need no epsilon.

mod components;
mod hull;
mod mask;
mod quad;
mod raster;

pub use components::{connected_components, label_components};
pub use hull::{convex_hull, convex_hull_of_pixels, Hull, Polygon};
pub use mask::{LabelMap, PixelMask, IGNORE_LABEL};
pub use quad::{
    boxes_from_corners, corners_from_boxes, gbbox_corners_from_mask, quad_iou, GeneralizedBBox,
    Quad, Rect,
};
pub use raster::rasterize_convex_polygon;

use serde::{Deserialize, Serialize};

/// Snapping grid: coordinates are multiples of `1 / SNAP` pixels.
pub const SNAP: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// The point snapped onto the 1/16 grid.
    pub fn snapped(self) -> Self {
        let g = self.grid();
        Point::new(g.0 as f64 / SNAP, g.1 as f64 / SNAP)
    }

    pub(crate) fn grid(self) -> (i64, i64) {
        ((self.x * SNAP).round() as i64, (self.y * SNAP).round() as i64)
    }

    pub(crate) fn from_grid(g: (i64, i64)) -> Self {
        Point::new(g.0 as f64 / SNAP, g.1 as f64 / SNAP)
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point::new(x, y)
    }
}

/// `(a - o) x (b - o)` on grid coordinates.
#[inline]
pub(crate) fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i128 {
    let (ax, ay) = ((a.0 - o.0) as i128, (a.1 - o.1) as i128);
    let (bx, by) = ((b.0 - o.0) as i128, (b.1 - o.1) as i128);
    ax * by - ay * bx
}

/// Grid coordinates of the centre of pixel `(col, row)`.
#[inline]
pub(crate) fn pixel_centre(col: i64, row: i64) -> (i64, i64) {
    let s = SNAP as i64;
    (col * s + s / 2, row * s + s / 2)
}
