use super::{cross, Point};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Simple polygon with counter-clockwise vertices snapped to the 1/16 grid.
///
/// Orientation is measured in the coordinate frame as given: with image coordinates
/// (y pointing down) a counter-clockwise polygon appears clockwise on screen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Snaps, reorients to counter-clockwise and validates the polygon.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Geometry(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Geometry("polygon vertex is not finite".into()));
        }
        let mut grid: Vec<(i64, i64)> = vertices.iter().map(|p| p.grid()).collect();
        let area2 = signed_area2(&grid);
        if area2 == 0 {
            return Err(Error::Geometry("polygon has zero area".into()));
        }
        if area2 < 0 {
            grid.reverse();
        }
        if !is_simple(&grid) {
            return Err(Error::Geometry("polygon is self-intersecting".into()));
        }
        Ok(Polygon {
            vertices: grid.into_iter().map(Point::from_grid).collect(),
        })
    }

    pub(crate) fn from_hull_grid(grid: &[(i64, i64)]) -> Self {
        debug_assert!(grid.len() >= 3 && signed_area2(grid) > 0);
        Polygon {
            vertices: grid.iter().map(|&g| Point::from_grid(g)).collect(),
        }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub(crate) fn grid(&self) -> Vec<(i64, i64)> {
        self.vertices.iter().map(|p| p.grid()).collect()
    }

    pub fn area(&self) -> f64 {
        signed_area2(&self.grid()) as f64 / (2.0 * super::SNAP * super::SNAP)
    }

    /// A simple polygon is convex iff it never turns right.
    pub fn is_convex(&self) -> bool {
        let g = self.grid();
        let n = g.len();
        (0..n).all(|i| cross(g[i], g[(i + 1) % n], g[(i + 2) % n]) >= 0)
    }

    /// Inside-or-on test; only meaningful for convex polygons.
    pub fn contains(&self, p: Point) -> bool {
        let g = self.grid();
        contains_grid(&g, p.grid())
    }
}

pub(crate) fn contains_grid(g: &[(i64, i64)], p: (i64, i64)) -> bool {
    let n = g.len();
    (0..n).all(|i| cross(g[i], g[(i + 1) % n], p) >= 0)
}

fn signed_area2(g: &[(i64, i64)]) -> i128 {
    let n = g.len();
    (0..n)
        .map(|i| {
            let (a, b) = (g[i], g[(i + 1) % n]);
            a.0 as i128 * b.1 as i128 - b.0 as i128 * a.1 as i128
        })
        .sum()
}

fn on_segment(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> bool {
    cross(a, b, p) == 0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

fn segments_touch(a: (i64, i64), b: (i64, i64), c: (i64, i64), d: (i64, i64)) -> bool {
    let d1 = cross(c, d, a).signum();
    let d2 = cross(c, d, b).signum();
    let d3 = cross(a, b, c).signum();
    let d4 = cross(a, b, d).signum();
    if d1 * d2 < 0 && d3 * d4 < 0 {
        return true;
    }
    on_segment(c, d, a) || on_segment(c, d, b) || on_segment(a, b, c) || on_segment(a, b, d)
}

fn is_simple(g: &[(i64, i64)]) -> bool {
    let n = g.len();
    for i in 0..n {
        if g[i] == g[(i + 1) % n] {
            return false;
        }
    }
    for i in 0..n {
        let (a, b) = (g[i], g[(i + 1) % n]);
        for j in i + 1..n {
            let (c, d) = (g[j], g[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // shared vertex only: the far endpoint must not fold back onto the edge
                let (shared, other_a, other_c) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                if cross(other_a, shared, other_c) == 0 {
                    let back = (other_a.0 - shared.0) as i128 * (other_c.0 - shared.0) as i128
                        + (other_a.1 - shared.1) as i128 * (other_c.1 - shared.1) as i128;
                    if back > 0 {
                        return false;
                    }
                }
                continue;
            }
            if segments_touch(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Convex hull of a point set. Degenerate inputs produce the lower-dimensional cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Hull {
    /// All points coincide.
    Point(Point),
    /// All points are collinear; the two extreme points.
    Segment(Point, Point),
    Polygon(Polygon),
}

impl Hull {
    pub fn is_degenerate(&self) -> bool {
        !matches!(self, Hull::Polygon(_))
    }

    pub fn vertices(&self) -> Vec<Point> {
        match self {
            Hull::Point(p) => vec![*p],
            Hull::Segment(a, b) => vec![*a, *b],
            Hull::Polygon(p) => p.vertices().to_vec(),
        }
    }

    pub fn as_polygon(&self) -> Option<&Polygon> {
        match self {
            Hull::Polygon(p) => Some(p),
            _ => None,
        }
    }

    /// Inside-or-on test, exact on the snapped grid.
    pub fn contains(&self, p: Point) -> bool {
        let q = p.grid();
        match self {
            Hull::Point(a) => a.grid() == q,
            Hull::Segment(a, b) => on_segment(a.grid(), b.grid(), q),
            Hull::Polygon(poly) => poly.contains(p),
        }
    }

    pub(crate) fn contains_grid(&self, q: (i64, i64)) -> bool {
        match self {
            Hull::Point(a) => a.grid() == q,
            Hull::Segment(a, b) => on_segment(a.grid(), b.grid(), q),
            Hull::Polygon(poly) => contains_grid(&poly.grid(), q),
        }
    }
}

/// Monotone-chain hull on grid coordinates: counter-clockwise, collinear points dropped.
pub(crate) fn hull_grid(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut out: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while out.len() >= 2 && cross(out[out.len() - 2], out[out.len() - 1], p) <= 0 {
            out.pop();
        }
        out.push(p);
    }
    let lower_len = out.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while out.len() >= lower_len && cross(out[out.len() - 2], out[out.len() - 1], p) <= 0 {
            out.pop();
        }
        out.push(p);
    }
    out.pop();
    out
}

fn hull_from_grid(h: Vec<(i64, i64)>) -> Hull {
    match h.len() {
        1 => Hull::Point(Point::from_grid(h[0])),
        2 => Hull::Segment(Point::from_grid(h[0]), Point::from_grid(h[1])),
        _ => Hull::Polygon(Polygon::from_hull_grid(&h)),
    }
}

/// Minimal convex hull of `points` after snapping to the 1/16 grid.
pub fn convex_hull(points: &[Point]) -> Result<Hull> {
    if points.is_empty() {
        return Err(Error::Geometry("convex hull of an empty point set".into()));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::Geometry("convex hull input is not finite".into()));
    }
    Ok(hull_from_grid(hull_grid(points.iter().map(|p| p.grid()).collect())))
}

/// Hull of the centres of the given pixels `(col, row)`.
pub fn convex_hull_of_pixels(pixels: impl IntoIterator<Item = (usize, usize)>) -> Result<Hull> {
    let pts: Vec<(i64, i64)> = pixels
        .into_iter()
        .map(|(c, r)| super::pixel_centre(c as i64, r as i64))
        .collect();
    if pts.is_empty() {
        return Err(Error::Geometry("convex hull of an empty pixel set".into()));
    }
    Ok(hull_from_grid(hull_grid(pts)))
}
