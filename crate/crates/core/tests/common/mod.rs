//! Independent reference implementations shared by the oracle suites.
//!
//! Each oracle uses a different algorithm from the library code it checks: direct
//! loops instead of im2col, tent-weight sums instead of floor-based bilinear reads,
//! supporting-edge enumeration instead of monotone chains, union-find instead of a
//! stack fill.

#![allow(dead_code)]

pub mod detect;
pub mod grads;
pub mod training;

use facade_core::detect::DetectionTarget;
use facade_core::geometry::{convex_hull, GeneralizedBBox, Hull, LabelMap, PixelMask, Point, Rect};
use facade_core::tensor::Tensor;
use rand::{Rng, SeedableRng};

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv2d_naive(x: &Tensor, k: &Tensor, stride: usize, pad: usize, dil: usize) -> Tensor {
    let &[n, c, h, w] = x.shape() else { panic!("input rank") };
    let &[ko, kc, kh, kw] = k.shape() else { panic!("kernel rank") };
    assert_eq!(c, kc);
    let ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let wo = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(&[n, ko, ho, wo]);
    for b in 0..n {
        for o in 0..ko {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for a in 0..kh {
                            for e in 0..kw {
                                let y = (i * stride + a * dil) as isize - pad as isize;
                                let xx = (j * stride + e * dil) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x.get(&[b, ci, y as usize, xx as usize]) * k.get(&[o, ci, a, e]);
                            }
                        }
                    }
                    out.set(&[b, o, i, j], acc);
                }
            }
        }
    }
    out
}

/// Kernel resampling through the explicit inverse of the 2x2 matrix
/// `[[s, 0], [tan(phi), 1]]`, reading the base plane with tent weights
/// `max(0, 1 - |dx|) * max(0, 1 - |dy|)` summed over every base cell.
pub fn affine_resample(base: &Tensor, phi_deg: f64, flip: bool) -> Tensor {
    let &[k, c, size, size2] = base.shape() else { panic!("kernel rank") };
    assert_eq!(size, size2);
    let s = if flip { -1.0 } else { 1.0 };
    let t = phi_deg.to_radians().tan();
    let (a, b, cc, d) = (s, 0.0, t, 1.0);
    let det = a * d - b * cc;
    let inv = [d / det, -b / det, -cc / det, a / det];
    let half = (size / 2) as f64;
    let mut out = Tensor::zeros(base.shape());
    for ko in 0..k {
        for ci in 0..c {
            for row in 0..size {
                for col in 0..size {
                    let (ut, vt) = (col as f64 - half, row as f64 - half);
                    let u = inv[0] * ut + inv[1] * vt;
                    let v = inv[2] * ut + inv[3] * vt;
                    let mut acc = 0.0;
                    for r in 0..size {
                        for q in 0..size {
                            let wx = (1.0 - (u - (q as f64 - half)).abs()).max(0.0);
                            let wy = (1.0 - (v - (r as f64 - half)).abs()).max(0.0);
                            acc += wx * wy * base.get(&[ko, ci, r, q]);
                        }
                    }
                    out.set(&[ko, ci, row, col], acc);
                }
            }
        }
    }
    out
}

/// Hull vertices by supporting-edge enumeration: `(p, q)` is a hull edge when every
/// point lies left of or on the line through it, and points on the line lie within the
/// segment. Vertices are returned sorted; exact on integer input.
pub fn hull_oracle(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let within = |p: (i64, i64), q: (i64, i64), r: (i64, i64)| {
        r.0 >= p.0.min(q.0) && r.0 <= p.0.max(q.0) && r.1 >= p.1.min(q.1) && r.1 <= p.1.max(q.1)
    };
    let mut verts = Vec::new();
    for &p in &pts {
        for &q in &pts {
            if p == q {
                continue;
            }
            let supports = pts.iter().all(|&r| {
                let c = cross(p, q, r);
                c > 0 || (c == 0 && within(p, q, r))
            });
            if supports {
                verts.push(p);
                verts.push(q);
            }
        }
    }
    verts.sort_unstable();
    verts.dedup();
    if verts.is_empty() {
        // All points collinear: the two extremes.
        return vec![pts[0], *pts.last().unwrap()];
    }
    verts
}

/// 4-connected partition by union-find, as sorted pixel-index lists sorted by first index.
pub fn components_oracle(mask: &PixelMask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if bits[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in (0..w * h).filter(|&i| bits[i]) {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Quadratic greedy suppression: each candidate, taken by descending score with ties by
/// index, survives unless an earlier survivor overlaps it by more than `thr`.
pub fn nms_oracle(scores: &[f64], thr: f64, iou: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let n = scores.len();
    let mut ranked = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !used[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        ranked.push(b);
    }
    let mut keep: Vec<usize> = Vec::new();
    for i in ranked {
        if !keep.iter().any(|&k| iou(k, i) > thr) {
            keep.push(i);
        }
    }
    keep
}

/// Pixel-centre inside test against a convex polygon given in either orientation.
pub fn inside_convex(poly: &[Point], x: f64, y: f64) -> bool {
    let n = poly.len();
    let mut pos = false;
    let mut neg = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let c = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
        pos |= c > 0.0;
        neg |= c < 0.0;
    }
    !(pos && neg)
}

/// Per-pixel fusion: the highest-scoring detection above `t` covering a pixel wins.
pub fn fuse_oracle(semantic: &LabelMap, dets: &[GeneralizedBBox], t: f64) -> LabelMap {
    let mut out = semantic.clone();
    for y in 0..semantic.height {
        for x in 0..semantic.width {
            let mut best: Option<&GeneralizedBBox> = None;
            for d in dets.iter().filter(|d| d.score > t) {
                let q = d.corners();
                // Geometry lives on the 1/16 grid.
                let c = q.corners().map(|p| p.snapped());
                if !q.is_valid() || !inside_convex(&c, x as f64 + 0.5, y as f64 + 0.5) {
                    continue;
                }
                if best.is_none_or(|b| d.score > b.score) {
                    best = Some(d);
                }
            }
            if let Some(d) = best {
                out.set(x, y, d.class() as u8);
            }
        }
    }
    out
}

pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Rect {
    Rect::new(x0, y0, x1, y1).unwrap()
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Hand formula for the region loss: mean over regions of cross-entropy plus the sum of
/// smooth-L1 over all eight deltas of foreground regions.
pub fn detection_loss_reference(logits: &[Vec<f64>], deltas: &[[f64; 8]], targets: &[DetectionTarget]) -> f64 {
    let k = targets.len() as f64;
    let mut total = 0.0;
    for ((l, d), t) in logits.iter().zip(deltas).zip(targets) {
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - l[t.cls_index];
        if let Some([a, b]) = t.deltas {
            for (i, tv) in a.iter().chain(&b).enumerate() {
                total += smooth_l1(d[i] - tv);
            }
        }
    }
    total / k
}

/// Worst `|T(flip x) - flip T(x)|` over random flip-closed groups, kernels and inputs.
pub fn flip_equivariance_worst(cases: usize) -> f64 {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let groups = [
        facade_core::transconv::KernelGroupSpec::from_flags(&[], false, true, false).unwrap(),
        facade_core::transconv::KernelGroupSpec::from_flags(&facade_core::transconv::KernelGroupSpec::DEFAULT_ANGLES, true, true, false).unwrap(),
        facade_core::transconv::KernelGroupSpec::from_flags(&[20.0, 0.0, 135.0], true, true, false).unwrap(),
    ];
    let mut worst = 0.0f64;
    for i in 0..cases {
        let spec = &groups[i % groups.len()];
        let size = [3, 5, 7][rng.gen_range(0..3)];
        let (h, w) = (rng.gen_range(size..=12), rng.gen_range(size..=12));
        let c = rng.gen_range(1..=3);
        let x = random_tensor(&mut rng, &[1, c, h, w]);
        let k = random_tensor(&mut rng, &[2, c, size, size]);
        let g = facade_core::tensor::Conv2dGeom::same(size, 1);
        let a = facade_core::transconv::transconv_forward(&x.flip_horizontal(), &k, spec, g).unwrap();
        let b = facade_core::transconv::transconv_forward(&x, &k, spec, g).unwrap().flip_horizontal();
        worst = worst.max(a.max_abs_diff(&b));
    }
    worst
}


fn random_points(rng: &mut impl Rng) -> Vec<(i64, i64)> {
    let n = rng.gen_range(1..=12);
    // Small boxes make duplicates and collinear triples common.
    let span = [4, 8, 64][rng.gen_range(0..3)];
    (0..n).map(|_| (rng.gen_range(0..span) * 4, rng.gen_range(0..span) * 4)).collect()
}

fn hull_vertices(h: &Hull) -> Vec<(i64, i64)> {
    let mut v: Vec<(i64, i64)> = h.vertices().into_iter().map(|p| ((p.x * 16.0) as i64, (p.y * 16.0) as i64)).collect();
    v.sort_unstable();
    v
}

/// Random sets of at most 12 points, in 1/16 grid units, on which the library hull
/// differs from [`hull_oracle`] or is not a positively oriented convex polygon.
pub fn hull_mismatches(sets: usize) -> usize {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    (0..sets)
        .filter(|_| {
            let pts = random_points(&mut rng);
            let input: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64 / 16.0, y as f64 / 16.0)).collect();
            let hull = convex_hull(&input).unwrap();
            let ccw = hull.as_polygon().is_none_or(|p| p.area() > 0.0 && p.is_convex());
            hull_vertices(&hull) != hull_oracle(&pts) || !ccw
        })
        .count()
}

/// Random 32x32 masks whose components differ from [`components_oracle`].
pub fn component_mismatches(masks: usize) -> usize {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    (0..masks)
        .filter(|_| {
            let mask = random_mask(&mut rng, 32, 32);
            let got: Vec<Vec<usize>> = facade_core::geometry::connected_components(&mask)
                .iter()
                .map(|c| c.bits().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
                .collect();
            got != components_oracle(&mask)
        })
        .count()
}

pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize) -> PixelMask {
    let density = rng.gen_range(0.2..0.7);
    let bits = (0..w * h).map(|_| rng.gen_bool(density)).collect();
    PixelMask::from_bits(w, h, bits).unwrap()
}

fn in_triangle(a: (i64, i64), b: (i64, i64), c: (i64, i64), q: (i64, i64)) -> bool {
    let side = |p: (i64, i64), r: (i64, i64)| (r.0 - p.0) * (q.1 - p.1) - (r.1 - p.1) * (q.0 - p.0);
    let s = [side(a, b), side(b, c), side(c, a)];
    let collinear_ok = |p: (i64, i64), r: (i64, i64)| {
        side(p, r) == 0 && q.0 >= p.0.min(r.0) && q.0 <= p.0.max(r.0) && q.1 >= p.1.min(r.1) && q.1 <= p.1.max(r.1)
    };
    !(s.iter().any(|&v| v > 0) && s.iter().any(|&v| v < 0)) && (s.iter().any(|&v| v != 0) || collinear_ok(a, b) || collinear_ok(b, c) || collinear_ok(a, c))
}

/// Pixel centres in 1/16 units.
fn centre(i: usize, w: usize) -> (i64, i64) {
    (16 * (i % w) as i64 + 8, 16 * (i / w) as i64 + 8)
}

/// Union over instances of every pixel whose centre lies in a triangle spanned by three
/// hull vertices of `pred ∩ instance` (vertices may repeat, which covers segments and points).
pub fn convex_target_oracle(pred: &PixelMask, instances: &[&PixelMask]) -> PixelMask {
    let w = pred.width();
    let mut out = vec![false; pred.bits().len()];
    for inst in instances {
        let pts: Vec<(i64, i64)> = (0..out.len())
            .filter(|&i| pred.bits()[i] && inst.bits()[i])
            .map(|i| centre(i, w))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let v = hull_oracle(&pts);
        for (i, o) in out.iter_mut().enumerate() {
            let q = centre(i, w);
            *o |= v.iter().any(|&a| v.iter().any(|&b| v.iter().any(|&c| in_triangle(a, b, c, q))));
        }
    }
    PixelMask::from_bits(w, pred.height(), out).unwrap()
}

/// Random rectangle with each side in `1..=max` inside a `w x h` frame.
pub fn random_rect_mask(rng: &mut impl Rng, w: usize, h: usize, max: usize) -> PixelMask {
    let (rw, rh) = (rng.gen_range(1..=max.min(w)), rng.gen_range(1..=max.min(h)));
    let (x0, y0) = (rng.gen_range(0..=w - rw), rng.gen_range(0..=h - rh));
    PixelMask::from_fn(w, h, |x, y| (x0..x0 + rw).contains(&x) && (y0..y0 + rh).contains(&y))
}

/// Random predictions and instance sets on which `convex_target` differs from
/// [`convex_target_oracle`].
pub fn convex_target_mismatches(cases: usize) -> usize {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
    (0..cases)
        .filter(|_| {
            let (w, h) = (14, 12);
            let pred = random_mask(&mut rng, w, h);
            let insts: Vec<PixelMask> = (0..rng.gen_range(1..=3)).map(|_| random_rect_mask(&mut rng, w, h, 7)).collect();
            let refs: Vec<&PixelMask> = insts.iter().collect();
            facade_core::convex::convex_target(&pred, &refs).unwrap() != convex_target_oracle(&pred, &refs)
        })
        .count()
}

/// Detection over `classes` classes whose most probable class is `class` at `score`;
/// the rest of the mass is spread evenly.
pub fn detection(tlbr: Rect, trbl: Rect, class: usize, score: f64, classes: usize) -> GeneralizedBBox {
    let rest = (1.0 - score) / (classes - 1) as f64;
    let probs = (0..classes).map(|k| if k == class { score } else { rest }).collect();
    GeneralizedBBox::new(tlbr, trbl, probs).unwrap()
}

pub fn random_detections(rng: &mut impl Rng, w: f64, h: f64, classes: usize) -> Vec<GeneralizedBBox> {
    let r = |rng: &mut dyn rand::RngCore| {
        let (x0, y0) = (rng.gen_range(-2.0..w), rng.gen_range(-2.0..h));
        rect(x0, y0, x0 + rng.gen_range(1.0..w / 2.0), y0 + rng.gen_range(1.0..h / 2.0))
    };
    (0..rng.gen_range(0..6))
        .map(|_| {
            let a = r(rng);
            let b = if rng.gen_bool(0.5) { a } else { r(rng) };
            detection(a, b, rng.gen_range(1..classes), rng.gen_range(0.3..1.0), classes)
        })
        .collect()
}

/// Named fusion cases on a 10x10 all-background map: `(name, holds)`.
pub fn fusion_truth_table() -> Vec<(String, bool)> {
    use facade_core::eval::fuse;
    let sem = LabelMap::filled(10, 10, 1);
    let block = rect(2.0, 2.0, 6.0, 6.0);
    let one = [detection(block, block, 2, 0.6, 6)];
    let low = [detection(block, block, 2, 0.4, 6)];
    let count = |l: &LabelMap, k: u8| l.labels.iter().filter(|&&v| v == k).count();
    let fused = |d: &[GeneralizedBBox], t: f64| fuse(&sem, d, t).unwrap();
    let overlap = [
        detection(rect(1.0, 1.0, 6.0, 6.0), rect(1.0, 1.0, 6.0, 6.0), 2, 0.7, 6),
        detection(rect(4.0, 4.0, 9.0, 9.0), rect(4.0, 4.0, 9.0, 9.0), 3, 0.9, 6),
    ];
    let o = fused(&overlap, 0.5);
    vec![
        ("no detections leave the semantic map".into(), fused(&[], 0.5).labels == sem),
        ("score 0.6 above T=0.5 paints 16 pixels".into(), count(&fused(&one, 0.5).labels, 2) == 16),
        ("score 0.4 below T=0.5 is dropped".into(), fused(&low, 0.5).labels == sem),
        ("score equal to T is dropped".into(), fused(&one, 0.6).labels == sem),
        ("T=1 is the identity".into(), fused(&one, 1.0).labels == sem && fused(&overlap, 1.0).labels == sem),
        ("T=0 applies every detection".into(), count(&fused(&low, 0.0).labels, 2) == 16),
        ("overlap goes to the higher score".into(), o.labels.get(5, 5) == 3 && o.labels.get(3, 3) == 2),
        ("overlap matches the per-pixel oracle".into(), o.labels == fuse_oracle(&sem, &overlap, 0.5)),
        ("threshold outside [0, 1] is rejected".into(), fuse(&sem, &one, 1.5).is_err()),
    ]
}

pub const MONOTONE_THRESHOLDS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Random scenes on which detection-sourced pixel counts increase with the threshold or
/// the fused map differs from [`fuse_oracle`].
pub fn fusion_violations(scenes: usize) -> usize {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
    (0..scenes)
        .filter(|_| {
            let labels = (0..16 * 12).map(|_| rng.gen_range(0..6)).collect();
            let sem = LabelMap::new(16, 12, labels).unwrap();
            let dets = random_detections(&mut rng, 16.0, 12.0, 6);
            let mut last = usize::MAX;
            MONOTONE_THRESHOLDS.iter().any(|&t| {
                let f = facade_core::eval::fuse(&sem, &dets, t).unwrap();
                let n = f.detection_pixels();
                let bad = n > last || f.labels != fuse_oracle(&sem, &dets, t);
                last = n;
                bad
            })
        })
        .count()
}

/// Hand-written 8x8 Labelme annotation plus generated image and mask, and a save/load
/// round trip over synthetic scenes: `(name, holds)`.
pub fn labelme_checks() -> Vec<(String, bool)> {
    use facade_core::data::{generate_dataset, load_sample, save_sample, write_gray_png, write_rgb_png, LabelSet, SceneParams};
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let fixture = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/labelme_8x8/instances/f.json");
    std::fs::create_dir_all(root.join("instances")).unwrap();
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("semantic")).unwrap();
    std::fs::copy(&fixture, root.join("instances/f.json")).unwrap();
    let rgb: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
    write_rgb_png(&root.join("images/f.png"), 8, 8, &rgb).unwrap();
    // Window (2) over a 6x6 block; the polygon covers only part of it.
    let sem: Vec<u8> = (0..64).map(|i| if (1..7).contains(&(i % 8)) && (1..7).contains(&(i / 8)) { 2 } else { 1 }).collect();
    write_gray_png(&root.join("semantic/f.png"), 8, 8, &sem).unwrap();
    let labels = LabelSet::facade();
    let s = load_sample(root, "f", &labels).unwrap();
    let window = s.instances.first();
    let expected = PixelMask::from_fn(8, 8, |x, y| (2..5).contains(&x) && (2..5).contains(&y));
    let corners_ok = window.is_some_and(|w| {
        w.corners.to_array() == [2.0, 2.0, 5.0, 2.0, 5.0, 5.0, 2.0, 5.0]
    });

    let params = SceneParams { width: 48, height: 40, ..SceneParams::default() };
    let scenes = generate_dataset(&params, 5).unwrap();
    let round_trip = scenes.iter().all(|g| {
        save_sample(root, &g.sample, &labels).unwrap();
        load_sample(root, &g.sample.id, &labels).unwrap() == g.sample
    });
    vec![
        ("polygon (2,2)-(5,5) rasterizes to 9 pixels".into(), window.is_some_and(|w| w.class == 2 && w.mask == expected)),
        ("instance corners are the polygon outline".into(), corners_ok),
        ("unknown labels and short polygons are skipped".into(), s.instances.len() == 1),
        ("image and mask load unchanged".into(), s.rgb() == rgb && s.semantic.labels == sem),
        ("save/load round trip is exact on 5 scenes".into(), round_trip),
    ]
}
