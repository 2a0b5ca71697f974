//! Synthetic deformed facades.
//!
//! Windows are laid out on a rectangular grid in facade-plane coordinates `(u, t)`. Each
//! grid column `j` is scaled by `decay^j` (depth), and the plane is mapped to the image
//! by a height shear `y = t + tan(φ) · (u − W_f / 2)`. A second facade, when present, is
//! the mirror image of the first. Every instance is a parallelogram whose corners are
//! known exactly, and its mask is the pixel-centre rasterization of those corners.

use super::{Instance, LabelSet, LabeledSample};
use crate::error::{Error, Result};
use crate::geometry::{LabelMap, PixelMask, Point, Quad, IGNORE_LABEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Largest facade count; each scene draws between 1 and this many (at most 2).
    pub facades: usize,
    /// Inclusive range of grid rows.
    pub rows: (usize, usize),
    /// Inclusive range of grid columns.
    pub cols: (usize, usize),
    /// Height-shear angle range in degrees, inside (−60, 60).
    pub shear_range: (f64, f64),
    /// Lower bound of the per-scene column scale decay, in (0, 1]; 1 disables decay.
    pub decay: f64,
    /// Per-pixel noise amplitude as a fraction of full scale.
    pub noise: f64,
    /// Largest number of occluding blobs; their pixels are labelled ignore.
    pub occluders: usize,
    /// Background / window labels only.
    pub binary: bool,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 96,
            height: 96,
            facades: 2,
            rows: (2, 4),
            cols: (2, 4),
            shear_range: (-40.0, 40.0),
            decay: 0.8,
            noise: 0.06,
            occluders: 2,
            binary: false,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("scene must be at least 16x16, got {}x{}", self.width, self.height));
        }
        if !(1..=2).contains(&self.facades) {
            return bad(format!("facade count must be 1 or 2, got {}", self.facades));
        }
        let (a, b) = self.shear_range;
        if !(a > -60.0 && b < 60.0 && a <= b) {
            return bad(format!("shear range ({a}, {b}) must be ordered and inside (-60, 60)"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} outside (0, 1]", self.decay));
        }
        if self.rows.0 == 0 || self.cols.0 == 0 || self.rows.0 > self.rows.1 || self.cols.0 > self.cols.1 {
            return bad("grid row and column ranges must be non-empty and positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        Ok(())
    }

    pub fn label_set(&self) -> LabelSet {
        if self.binary {
            LabelSet::binary()
        } else {
            LabelSet::facade()
        }
    }
}

/// A generated sample plus generation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScene {
    pub sample: LabeledSample,
    /// Grid cells per facade times facades.
    pub slots: usize,
    /// Cells whose instance was dropped (outside the frame, collapsed or fully occluded).
    pub skipped: usize,
    pub shear_deg: f64,
    pub decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Material {
    Sky,
    Facade(usize),
    Balcony,
    Window(usize),
    Door,
    Shop,
    Occluder(usize),
}

#[derive(Clone, Copy)]
enum Kind {
    Window,
    Door,
    Shop,
}

/// An axis-aligned box in facade-plane coordinates.
#[derive(Clone, Copy)]
struct PlaneBox {
    u0: f64,
    u1: f64,
    t0: f64,
    t1: f64,
}

struct Frame {
    x0: f64,
    x1: f64,
    mirrored: bool,
    tan: f64,
}

impl Frame {
    fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    fn map(&self, u: f64, t: f64) -> Point {
        let x = if self.mirrored { self.x1 - u } else { self.x0 + u };
        Point::new(x, t + self.tan * (u - 0.5 * self.width()))
    }

    fn local_u(&self, x: f64) -> f64 {
        if self.mirrored {
            self.x1 - x
        } else {
            x - self.x0
        }
    }

    fn quad(&self, b: &PlaneBox) -> Quad {
        let (l0, l1) = (self.map(b.u0, b.t0), self.map(b.u1, b.t0));
        let (r1, r0) = (self.map(b.u1, b.t1), self.map(b.u0, b.t1));
        if self.mirrored {
            Quad { tl: l1, tr: l0, br: r0, bl: r1 }
        } else {
            Quad { tl: l0, tr: l1, br: r1, bl: r0 }
        }
    }
}

struct Plan {
    top: f64,
    items: Vec<(PlaneBox, Kind)>,
    balconies: Vec<PlaneBox>,
    slots: usize,
}

/// Lays out one facade of width `wf` in plane coordinates.
fn plan_facade(p: &SceneParams, rng: &mut ChaCha8Rng, wf: f64, tan: f64, decay: f64) -> Plan {
    let h = p.height as f64;
    let drift = tan.abs() * wf / 2.0;
    // the facade top may leave the frame on the high side; windows may not
    let top = rng.gen_range(0.06..0.14) * h;
    let band0 = (top + rng.gen_range(2.0..5.0)).max(drift + 1.0);
    let band1 = h - 2.0 - drift;
    let rows = rng.gen_range(p.rows.0..=p.rows.1);
    let cols = rng.gen_range(p.cols.0..=p.cols.1);
    let margin = 2.0;
    let norm: f64 = (0..cols).map(|j| decay.powi(j as i32)).sum();
    let p0 = (wf - 2.0 * margin) / norm;
    let width_ratio = rng.gen_range(0.45..0.65);
    let height_ratio = rng.gen_range(0.5..0.68);
    let q = (band1 - band0).max(0.0) / rows as f64;
    let mid = 0.5 * (band0 + band1);
    let door_col = (!p.binary && rows >= 2 && rng.gen_bool(0.5)).then(|| rng.gen_range(0..cols));
    let shops = !p.binary && door_col.is_none() && rows >= 2 && rng.gen_bool(0.35);
    let fit = |w: f64, hh: f64| if tan == 0.0 { w } else { w.min((hh - 1.5) / tan.abs()) };
    let mut items = Vec::with_capacity(rows * cols);
    let mut balconies = Vec::new();
    let mut u = margin;
    for j in 0..cols {
        let s = decay.powi(j as i32);
        let pitch = p0 * s;
        let hh = q * s * height_ratio;
        let w = fit(pitch * width_ratio, hh).max(0.0);
        let cu = u + 0.5 * pitch;
        for r in 0..rows {
            let ct = mid + (r as f64 - 0.5 * (rows - 1) as f64) * q * s;
            let win = PlaneBox {
                u0: cu - 0.5 * w,
                u1: cu + 0.5 * w,
                t0: ct - 0.5 * hh,
                t1: ct + 0.5 * hh,
            };
            let bottom = r + 1 == rows;
            if bottom && door_col == Some(j) {
                let dw = fit((w * 1.15).min(pitch * 0.8), hh * 1.3);
                let t1 = (win.t1 + 0.3 * hh).min(band1);
                items.push((PlaneBox { u0: cu - 0.5 * dw, u1: cu + 0.5 * dw, t0: win.t0, t1 }, Kind::Door));
            } else if bottom && shops {
                let sw = fit(pitch * 0.8, hh * 1.1);
                let t1 = (win.t1 + 0.1 * hh).min(band1);
                items.push((PlaneBox { u0: cu - 0.5 * sw, u1: cu + 0.5 * sw, t0: win.t0, t1 }, Kind::Shop));
            } else {
                items.push((win, Kind::Window));
                if !p.binary && !bottom && rng.gen_bool(0.25) {
                    let ext = (0.5 * (pitch - w) - 0.5).clamp(0.0, 1.0);
                    balconies.push(PlaneBox {
                        u0: win.u0 - ext,
                        u1: win.u1 + ext,
                        t0: win.t1 + 0.5,
                        t1: win.t1 + 2.5,
                    });
                }
            }
        }
        u += pitch;
    }
    Plan {
        top,
        items,
        balconies,
        slots: rows * cols,
    }
}

fn inside_frame(q: &Quad, w: f64, h: f64) -> bool {
    q.corners().iter().all(|c| c.x >= 0.0 && c.x <= w && c.y >= 0.0 && c.y <= h)
}

fn mask_extent_ok(m: &PixelMask) -> bool {
    let mut xs = (usize::MAX, 0);
    let mut ys = (usize::MAX, 0);
    for (x, y) in m.iter_set() {
        xs = (xs.0.min(x), xs.1.max(x));
        ys = (ys.0.min(y), ys.1.max(y));
    }
    xs.0 != usize::MAX && xs.1 - xs.0 >= 1 && ys.1 - ys.0 >= 1
}

/// Generates sample `index` of the stream seeded by `params.seed`.
pub fn generate_scene(params: &SceneParams, index: u64) -> Result<GeneratedScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index);
    let (w, h) = (params.width, params.height);
    let (wf_, hf) = (w as f64, h as f64);
    let labels = params.label_set();
    let class = |name: &str| labels.index_of(name).map(|i| i as u8);
    let (lbl_facade, lbl_window, lbl_door, lbl_shop, lbl_balcony) =
        (class("facade"), class("window"), class("door"), class("shop"), class("balcony"));

    let (lo, hi) = params.shear_range;
    let shear_deg = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let tan = shear_deg.to_radians().tan();
    let decay = if params.decay >= 1.0 { 1.0 } else { rng.gen_range(params.decay..=1.0) };
    let frames: Vec<Frame> = if rng.gen_range(1..=params.facades) == 2 {
        let mid = (w / 2) as f64;
        vec![
            Frame { x0: 0.0, x1: mid, mirrored: false, tan },
            Frame { x0: mid, x1: wf_, mirrored: true, tan },
        ]
    } else {
        let fw = (rng.gen_range(0.6..0.75) * wf_).round();
        let x0 = rng.gen_range(0.0..=(wf_ - fw)).round();
        vec![Frame { x0, x1: x0 + fw, mirrored: rng.gen_bool(0.5), tan }]
    };
    let plan = plan_facade(params, &mut rng, frames[0].width(), tan, decay);

    let mut material = vec![Material::Sky; w * h];
    let mut semantic = LabelMap::filled(w, h, 0);
    for (f, frame) in frames.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let x = c as f64 + 0.5;
                if x < frame.x0 || x >= frame.x1 {
                    continue;
                }
                let u = frame.local_u(x);
                if r as f64 + 0.5 >= plan.top + tan * (u - 0.5 * frame.width()) {
                    material[r * w + c] = Material::Facade(f);
                    semantic.set(c, r, lbl_facade.unwrap_or(0));
                }
            }
        }
    }

    let mut skipped = 0;
    let mut instances = Vec::new();
    for frame in &frames {
        for b in &plan.balconies {
            let q = frame.quad(b);
            if let (true, Ok(m)) = (inside_frame(&q, wf_, hf), q.rasterize(w, h)) {
                for (x, y) in m.iter_set() {
                    material[y * w + x] = Material::Balcony;
                    semantic.set(x, y, lbl_balcony.unwrap_or(0));
                }
            }
        }
        for (b, kind) in &plan.items {
            let q = frame.quad(b);
            let raster = if inside_frame(&q, wf_, hf) { q.rasterize(w, h).ok() } else { None };
            let Some(mask) = raster.filter(mask_extent_ok) else {
                log::debug!("skipping a collapsed or out-of-frame instance at {:?}", q.tl);
                skipped += 1;
                continue;
            };
            let (label, mat) = match kind {
                Kind::Window => (lbl_window, Material::Window(instances.len())),
                Kind::Door => (lbl_door, Material::Door),
                Kind::Shop => (lbl_shop, Material::Shop),
            };
            let label = label.expect("instance kinds exist in the label set");
            for (x, y) in mask.iter_set() {
                material[y * w + x] = mat;
                semantic.set(x, y, label);
            }
            instances.push(Instance {
                class: label as usize,
                mask,
                corners: q,
            });
        }
    }

    let n_occ = rng.gen_range(0..=params.occluders);
    for k in 0..n_occ {
        let cx = rng.gen_range(0.0..wf_);
        let cy = rng.gen_range(0.75 * hf..hf - 4.0);
        let rx = rng.gen_range(0.06..0.14) * wf_;
        let ry = rng.gen_range(0.05..0.10) * hf;
        for r in 0..h {
            for c in 0..w {
                let dx = (c as f64 + 0.5 - cx) / rx;
                let dy = (r as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    material[r * w + c] = Material::Occluder(k);
                    semantic.set(c, r, IGNORE_LABEL);
                    for inst in instances.iter_mut() {
                        inst.mask.set(c, r, false);
                    }
                }
            }
        }
    }
    // fragments left by occluders are too small to annotate; they become ignored pixels
    let (kept, dropped): (Vec<Instance>, Vec<Instance>) = instances.into_iter().partition(|i| i.mask.count() >= 4);
    for inst in &dropped {
        semantic.paint(&inst.mask, IGNORE_LABEL)?;
    }
    skipped += dropped.len();
    let instances = kept;

    let rgb = render(&material, w, h, frames.len(), params.noise, &mut rng);
    let sample = LabeledSample::from_rgb(format!("synth_{index:05}"), &rgb, semantic, instances)?;
    Ok(GeneratedScene {
        sample,
        slots: plan.slots * frames.len(),
        skipped,
        shear_deg,
        decay,
    })
}

fn render(material: &[Material], w: usize, h: usize, facades: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut colour = |lo: [f64; 3], hi: [f64; 3]| -> [f64; 3] {
        [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), rng.gen_range(lo[2]..hi[2])]
    };
    let facade: Vec<[f64; 3]> = (0..facades).map(|_| colour([150., 115., 85.], [225., 190., 160.])).collect();
    let window_base = colour([25., 40., 70.], [60., 75., 115.]);
    let occluder: Vec<[f64; 3]> = (0..8).map(|_| colour([10., 10., 10.], [120., 120., 140.])).collect();
    let amp = noise * 255.0;
    let mut out = vec![0u8; 3 * w * h];
    for (i, m) in material.iter().enumerate() {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let base = match *m {
            Material::Sky => [135.0 + 60.0 * y / h as f64, 180.0 + 40.0 * y / h as f64, 235.0],
            Material::Facade(f) => {
                let brick = if (y as usize) % 5 == 0 { 22.0 } else { 0.0 };
                facade[f].map(|v| v - brick)
            }
            Material::Balcony => [95.0, 95.0, 100.0],
            Material::Window(k) => {
                let tint = ((k * 37) % 21) as f64 - 10.0;
                [window_base[0] + tint, window_base[1] + tint, window_base[2] + 0.5 * x % 8.0]
            }
            Material::Door => [105.0, 62.0, 35.0],
            Material::Shop => [70.0, 115.0, 135.0],
            Material::Occluder(k) => occluder[k % occluder.len()],
        };
        for c in 0..3 {
            let n = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
            out[i * 3 + c] = (base[c] + n).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Samples `0..count` of the stream seeded by `params.seed`.
pub fn generate_dataset(params: &SceneParams, count: usize) -> Result<Vec<GeneratedScene>> {
    (0..count as u64).map(|i| generate_scene(params, i)).collect()
}
