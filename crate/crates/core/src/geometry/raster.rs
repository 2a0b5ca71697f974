use super::hull::{contains_grid, Hull, Polygon};
use super::{pixel_centre, PixelMask, SNAP};
use crate::error::{Error, Result};

/// Sets pixel `(c, r)` iff its centre lies inside or on `poly`.
pub fn rasterize_convex_polygon(poly: &Polygon, width: usize, height: usize) -> Result<PixelMask> {
    if !poly.is_convex() {
        return Err(Error::Geometry("rasterization needs a convex polygon".into()));
    }
    let g = poly.grid();
    Ok(rasterize_grid(&g, width, height, |q| contains_grid(&g, q)))
}

/// Visits only the rows and columns covered by the bounding box of `g`.
fn rasterize_grid(
    g: &[(i64, i64)],
    width: usize,
    height: usize,
    inside: impl Fn((i64, i64)) -> bool,
) -> PixelMask {
    let mut mask = PixelMask::new(width, height);
    let s = SNAP as i64;
    let min_x = g.iter().map(|p| p.0).min().unwrap_or(0);
    let max_x = g.iter().map(|p| p.0).max().unwrap_or(-1);
    let min_y = g.iter().map(|p| p.1).min().unwrap_or(0);
    let max_y = g.iter().map(|p| p.1).max().unwrap_or(-1);
    // pixel c has centre 16c+8; candidate columns satisfy min_x <= 16c+8 <= max_x
    let c0 = (min_x - s / 2).div_euclid(s).max(0);
    let c1 = (max_x - s / 2).div_euclid(s).min(width as i64 - 1);
    let r0 = (min_y - s / 2).div_euclid(s).max(0);
    let r1 = (max_y - s / 2).div_euclid(s).min(height as i64 - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if inside(pixel_centre(c, r)) {
                mask.set(c as usize, r as usize, true);
            }
        }
    }
    mask
}

impl Hull {
    /// Pixels whose centres lie inside or on the hull.
    pub fn rasterize(&self, width: usize, height: usize) -> PixelMask {
        let g: Vec<(i64, i64)> = self.vertices().iter().map(|p| p.grid()).collect();
        match self {
            Hull::Polygon(_) => rasterize_grid(&g, width, height, |q| contains_grid(&g, q)),
            _ => rasterize_grid(&g, width, height, |q| self.contains_grid(q)),
        }
    }
}
