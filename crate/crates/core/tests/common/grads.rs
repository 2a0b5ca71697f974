//! Central-difference gradient checks for every differentiable operation.

use std::sync::Arc;

use facade_core::config::RunConfig;
use facade_core::convex::{convex_loss_from_targets, convex_targets, ConvexConfig, LabelMode};
use facade_core::data::{Instance, LabeledSample};
use facade_core::detect::{detection_loss, generate_anchors, proposal_loss, AnchorLabel, DetectionTarget};
use facade_core::geometry::{gbbox_corners_from_mask, LabelMap, PixelMask, Rect};
use facade_core::model::{combine_losses, FacadeRcnn};
use facade_core::tensor::{grad_check, Conv2dGeom, PlaneMap, RoiBox, Tape, Tensor, Var};
use facade_core::transconv::{transconv_forward_var, KernelGroupSpec};
use facade_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_tensor;

pub const STEP: f64 = 1e-5;
pub const INSTANCES: usize = 20;
pub const OP_LIMIT: f64 = 1e-4;
pub const MODEL_LIMIT: f64 = 1e-3;

pub struct GradResult {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub limit: f64,
}

impl GradResult {
    pub fn pass(&self) -> bool {
        self.instances >= INSTANCES && self.worst < self.limit
    }
}

/// `sum(w ⊙ y)` with a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let p = tape.mul_const(y, w)?;
    Ok(tape.sum(p))
}

fn run(op: &'static str, mut instance: impl FnMut(&mut ChaCha8Rng) -> f64) -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ op.len() as u64);
    let worst = (0..INSTANCES).map(|_| instance(&mut rng)).fold(0.0, f64::max);
    GradResult {
        op,
        instances: INSTANCES,
        worst,
        limit: OP_LIMIT,
    }
}

/// Values bounded away from zero so no central difference straddles a kink.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn random_geom(rng: &mut impl Rng) -> (Conv2dGeom, usize) {
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let geom = Conv2dGeom::new(rng.gen_range(1..=2), rng.gen_range(0..=2), rng.gen_range(1..=2));
    (geom, k)
}

fn conv_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (geom, k) = random_geom(rng);
    let (n, c, ko) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let h = rng.gen_range(geom.dilation * (k - 1) + 1..=9);
    let w = rng.gen_range(geom.dilation * (k - 1) + 1..=9);
    let x = random_tensor(rng, &[n, c, h, w]);
    let kern = random_tensor(rng, &[ko, c, k, k]);
    let out = facade_core::tensor::conv2d(&x, &kern, geom).unwrap();
    let wt = random_tensor(rng, out.shape());
    let kc = kern.clone();
    let ex = grad_check(
        |t, v| {
            let kv = t.constant(kc.clone());
            let y = t.conv2d(v, kv, geom)?;
            project(t, y, &wt)
        },
        &x,
        STEP,
    )
    .unwrap();
    let xc = x.clone();
    let ek = grad_check(
        |t, v| {
            let xv = t.constant(xc.clone());
            let y = t.conv2d(xv, v, geom)?;
            project(t, y, &wt)
        },
        &kern,
        STEP,
    )
    .unwrap();
    ex.max(ek)
}

fn relu_instance(rng: &mut ChaCha8Rng) -> f64 {
    let x = away_from_zero(rng, &[2, 3, 4]);
    let w = random_tensor(rng, &[2, 3, 4]);
    grad_check(
        |t, v| {
            let y = t.relu(v);
            project(t, y, &w)
        },
        &x,
        STEP,
    )
    .unwrap()
}

fn smooth_l1_instance(rng: &mut ChaCha8Rng) -> f64 {
    // Magnitudes on both sides of the |x| = 1 seam, away from it and from 0.
    let x = Tensor::from_fn(&[12], |i| {
        let m = if i % 2 == 0 { rng.gen_range(0.05..0.95) } else { rng.gen_range(1.05..3.0) };
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let w = random_tensor(rng, &[12]);
    grad_check(
        |t, v| {
            let y = t.smooth_l1(v);
            project(t, y, &w)
        },
        &x,
        STEP,
    )
    .unwrap()
}

fn cross_entropy_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let x = random_tensor(rng, &[n, c, h, w]).scaled(3.0);
    let targets: Vec<Option<usize>> = (0..n * h * w)
        .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..c)))
        .collect();
    grad_check(|t, v| t.cross_entropy(v, &targets), &x, STEP).unwrap()
}

fn bce_instance(rng: &mut ChaCha8Rng) -> f64 {
    let x = random_tensor(rng, &[10]).scaled(4.0);
    let targets = Tensor::from_fn(&[10], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let weights = Tensor::from_fn(&[10], |_| rng.gen_range(0.0..1.0));
    grad_check(|t, v| t.bce_with_logits(v, &targets, &weights), &x, STEP).unwrap()
}

fn dense_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=4));
    let a = random_tensor(rng, &[m, k]);
    let b = random_tensor(rng, &[k, n]);
    let bias = random_tensor(rng, &[n]);
    let w = random_tensor(rng, &[m, n]);
    let (bc, biasc) = (b.clone(), bias.clone());
    let ea = grad_check(
        |t, v| {
            let bv = t.constant(bc.clone());
            let biasv = t.constant(biasc.clone());
            let y = t.matmul(v, bv)?;
            let y = t.add_row_bias(y, biasv)?;
            project(t, y, &w)
        },
        &a,
        STEP,
    )
    .unwrap();
    let ac = a.clone();
    let eb = grad_check(
        |t, v| {
            let av = t.constant(ac.clone());
            let y = t.matmul(av, v)?;
            project(t, y, &w)
        },
        &b,
        STEP,
    )
    .unwrap();
    ea.max(eb)
}

fn affine_instance(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.gen_range(1..=4);
    let x = random_tensor(rng, &[2, c, 3, 3]);
    let scale = random_tensor(rng, &[c]);
    let shift = random_tensor(rng, &[c]);
    let w = random_tensor(rng, &[2, c, 3, 3]);
    let (sc, sh) = (scale.clone(), shift.clone());
    let ex = grad_check(
        |t, v| {
            let s = t.constant(sc.clone());
            let b = t.constant(sh.clone());
            let y = t.channel_affine(v, Some(s), Some(b))?;
            project(t, y, &w)
        },
        &x,
        STEP,
    )
    .unwrap();
    let xc = x.clone();
    let es = grad_check(
        |t, v| {
            let xv = t.constant(xc.clone());
            let y = t.channel_affine(xv, Some(v), None)?;
            project(t, y, &w)
        },
        &scale,
        STEP,
    )
    .unwrap();
    ex.max(es)
}

fn upsample_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (oh, ow) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
    let x = random_tensor(rng, &[1, 2, h, w]);
    let wt = random_tensor(rng, &[1, 2, oh, ow]);
    grad_check(
        |t, v| {
            let y = t.upsample_bilinear(v, oh, ow)?;
            project(t, y, &wt)
        },
        &x,
        STEP,
    )
    .unwrap()
}

fn roi_align_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    let x = random_tensor(rng, &[1, 2, h, w]);
    let rois: Vec<RoiBox> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let (x0, y0) = (rng.gen_range(0.0..w as f64 - 1.0), rng.gen_range(0.0..h as f64 - 1.0));
            RoiBox {
                x0,
                y0,
                x1: rng.gen_range(x0 + 0.5..=w as f64),
                y1: rng.gen_range(y0 + 0.5..=h as f64),
            }
        })
        .collect();
    let size = rng.gen_range(1..=3);
    let wt = random_tensor(rng, &[rois.len(), 2, size, size]);
    grad_check(
        |t, v| {
            let y = t.roi_align(v, &rois, size)?;
            project(t, y, &wt)
        },
        &x,
        STEP,
    )
    .unwrap()
}

fn plane_map_instance(rng: &mut ChaCha8Rng) -> f64 {
    let entries = (0..12).map(|_| (rng.gen_range(0..4), rng.gen_range(0..6), rng.gen_range(-1.0..1.0))).collect();
    let map = Arc::new(PlaneMap {
        plane_in: 6,
        plane_out: 4,
        entries,
    });
    let x = random_tensor(rng, &[3, 2, 3]);
    let w = random_tensor(rng, &[3, 2, 2]);
    grad_check(
        |t, v| {
            let y = t.plane_map(v, map.clone(), &[2, 2])?;
            project(t, y, &w)
        },
        &x,
        STEP,
    )
    .unwrap()
}

fn transconv_instance(rng: &mut ChaCha8Rng) -> f64 {
    let spec = match rng.gen_range(0..3) {
        0 => KernelGroupSpec::from_flags(&KernelGroupSpec::DEFAULT_ANGLES, true, true, false),
        1 => KernelGroupSpec::from_flags(&[20.0, 0.0, 135.0], true, false, true),
        _ => KernelGroupSpec::from_flags(&[], false, true, false),
    }
    .unwrap();
    let k = [3, 5][rng.gen_range(0..2)];
    let c = rng.gen_range(1..=2);
    let x = random_tensor(rng, &[1, c, 7, 7]);
    let base = random_tensor(rng, &[2, c, k, k]);
    let geom = Conv2dGeom::same(k, 1);
    let w = random_tensor(rng, &[1, 2, 7, 7]);
    let (xc, sp) = (x.clone(), spec.clone());
    let eb = grad_check(
        |t, v| {
            let xv = t.constant(xc.clone());
            let y = transconv_forward_var(t, xv, v, &sp, geom)?;
            project(t, y, &w)
        },
        &base,
        STEP,
    )
    .unwrap();
    let bc = base.clone();
    let ex = grad_check(
        |t, v| {
            let bv = t.constant(bc.clone());
            let y = transconv_forward_var(t, v, bv, &spec, geom)?;
            project(t, y, &w)
        },
        &x,
        STEP,
    )
    .unwrap();
    eb.max(ex)
}

fn proposal_instance(rng: &mut ChaCha8Rng) -> f64 {
    let anchors = generate_anchors(2, 2, 4.0, &[4.0, 6.0], &[1.0]);
    let a = anchors.len();
    let gts = vec![Rect::new(1.0, 1.0, 5.5, 6.0).unwrap(), Rect::new(3.0, 2.0, 8.0, 7.5).unwrap()];
    let labels: Vec<AnchorLabel> = (0..a)
        .map(|_| match rng.gen_range(0..4) {
            0 => AnchorLabel::Positive(rng.gen_range(0..2)),
            1 => AnchorLabel::Ignore,
            _ => AnchorLabel::Negative,
        })
        .collect();
    let obj = random_tensor(rng, &[a]).scaled(2.0);
    let del = away_from_zero(rng, &[a, 4]).scaled(0.3);
    let (anc, g, l, dc) = (anchors.clone(), gts.clone(), labels.clone(), del.clone());
    let eo = grad_check(
        |t, v| {
            let d = t.constant(dc.clone());
            proposal_loss(t, v, d, &anc, &g, &l)
        },
        &obj,
        STEP,
    )
    .unwrap();
    let oc = obj.clone();
    let ed = grad_check(
        |t, v| {
            let o = t.constant(oc.clone());
            proposal_loss(t, o, v, &anchors, &gts, &labels)
        },
        &del,
        STEP,
    )
    .unwrap();
    eo.max(ed)
}

fn detection_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (k, c) = (rng.gen_range(1..=4), rng.gen_range(2..=4));
    let targets: Vec<DetectionTarget> = (0..k)
        .map(|_| {
            let cls = rng.gen_range(0..c);
            DetectionTarget {
                cls_index: cls,
                deltas: (cls > 0).then(|| {
                    let mut d = [[0.0; 4]; 2];
                    d.iter_mut().flatten().for_each(|v| *v = rng.gen_range(-0.5..0.5));
                    d
                }),
            }
        })
        .collect();
    let logits = random_tensor(rng, &[k, c]).scaled(2.0);
    // Offsets from the targets stay clear of the smooth-L1 seams at 0 and ±1.
    let deltas = Tensor::from_fn(&[k, 8], |i| {
        let t = targets[i / 8].deltas.map_or(0.0, |d| d[(i % 8) / 4][i % 4]);
        let m = [rng.gen_range(0.05..0.9), rng.gen_range(1.1..2.0)][rng.gen_range(0..2)];
        t + if rng.gen_bool(0.5) { m } else { -m }
    });
    let (tc, dc) = (targets.clone(), deltas.clone());
    let el = grad_check(
        |t, v| {
            let d = t.constant(dc.clone());
            detection_loss(t, v, d, &tc)
        },
        &logits,
        STEP,
    )
    .unwrap();
    let lc = logits.clone();
    let ed = grad_check(
        |t, v| {
            let l = t.constant(lc.clone());
            detection_loss(t, l, v, &targets)
        },
        &deltas,
        STEP,
    )
    .unwrap();
    el.max(ed)
}

fn convex_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (w, h, c) = (8, 6, 4);
    let logits = random_tensor(rng, &[1, c, h, w]).scaled(2.0);
    let mut gt = LabelMap::filled(w, h, 0);
    let mut instances = Vec::new();
    for class in 1..c {
        let (x0, y0) = (rng.gen_range(0..w - 2), rng.gen_range(0..h - 2));
        let (x1, y1) = (rng.gen_range(x0 + 1..w), rng.gen_range(y0 + 1..h));
        let m = PixelMask::from_fn(w, h, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y));
        gt.paint(&m, class as u8).unwrap();
        instances.push((class, m));
    }
    let refs: Vec<(usize, &PixelMask)> = instances.iter().map(|(c, m)| (*c, m)).collect();
    let cfg = ConvexConfig {
        classes: vec![1, 2, 3],
        ..ConvexConfig::default()
    };
    let pred = facade_core::convex::argmax_labels(&logits).unwrap();
    // Targets come from the unperturbed argmax and stay fixed during differencing.
    let set = convex_targets(&pred, w, h, &refs, &cfg).unwrap();
    let mode = if rng.gen_bool(0.5) { LabelMode::Class } else { LabelMode::GroundTruth };
    grad_check(|t, v| convex_loss_from_targets(t, v, &gt, &set, mode), &logits, STEP).unwrap()
}

/// An 8x8 two-class scene with one 3x3 window.
pub fn tiny_sample(rng: &mut impl Rng) -> LabeledSample {
    let (x0, y0) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let mask = PixelMask::from_fn(8, 8, |x, y| (x0..x0 + 3).contains(&x) && (y0..y0 + 3).contains(&y));
    let mut semantic = LabelMap::filled(8, 8, 0);
    semantic.paint(&mask, 1).unwrap();
    let corners = gbbox_corners_from_mask(&mask).unwrap();
    let rgb: Vec<u8> = (0..8 * 8 * 3).map(|_| rng.gen()).collect();
    LabeledSample::from_rgb(
        "tiny".into(),
        &rgb,
        semantic,
        vec![Instance {
            class: 1,
            mask,
            corners,
        }],
    )
    .unwrap()
}

pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.classes = 2;
    cfg.model.widths = vec![3, 4, 4, 4];
    cfg.model.seed = seed;
    cfg.model.alpha = 1.0;
    cfg.convex.classes = vec![1];
    cfg.detect.anchor_scales = vec![4.0, 6.0];
    cfg.detect.roi_batch = 4;
    cfg
}

/// Checks the gradient of the total loss with respect to one parameter tensor at up to
/// 24 random coordinates. The error is relative to the largest analytic entry of the
/// whole tensor.
fn model_instance(rng: &mut ChaCha8Rng, index: usize) -> f64 {
    let model = FacadeRcnn::new(tiny_config(index as u64)).unwrap();
    let sample = tiny_sample(rng);
    let names: Vec<String> = model.params().iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let name = &names[(index * 7) % names.len()];
    let mut base = Tape::new();
    let p = model.bind(&mut base);
    let fwd = model.forward(&mut base, &p, &sample.image, false).unwrap();
    let targets = model.prepare_targets(&base, &fwd, &sample, rng).unwrap();
    let alpha = model.config().model.alpha;
    let f = |t: &mut Tape, v: Var| -> Result<Var> {
        let p = model.bind_with(t, name, v)?;
        let fwd = model.forward(t, &p, &sample.image, false)?;
        let terms = model.loss_terms(t, &p, &fwd, &sample, &targets)?;
        Ok(combine_losses(t, terms, alpha)?.0)
    };
    let id = model.params().id(name).unwrap();
    let x = model.params().get(id).value.clone();
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v).unwrap();
    let analytic = tape.backward(out).unwrap().get(&tape, v);
    let scale = analytic.data().iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let eval = |x: &Tensor| {
        let mut t = Tape::new();
        let v = t.leaf(x.clone(), false);
        let out = f(&mut t, v).unwrap();
        t.value(out).item().unwrap()
    };
    let coords: Vec<usize> = if x.numel() <= 24 {
        (0..x.numel()).collect()
    } else {
        (0..24).map(|_| rng.gen_range(0..x.numel())).collect()
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = eval(&probe);
        probe.data_mut()[i] = orig - STEP;
        let down = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max((numeric - analytic.data()[i]).abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

pub fn model_check() -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7469_6e79);
    let worst = (0..INSTANCES).map(|i| model_instance(&mut rng, i)).fold(0.0, f64::max);
    GradResult {
        op: "end-to-end tiny model",
        instances: INSTANCES,
        worst,
        limit: MODEL_LIMIT,
    }
}

/// Every operation with its worst relative error over the random instances.
pub fn suite() -> Vec<GradResult> {
    vec![
        run("conv2d", conv_instance),
        run("relu", relu_instance),
        run("smooth_l1", smooth_l1_instance),
        run("cross_entropy", cross_entropy_instance),
        run("bce_with_logits", bce_instance),
        run("matmul + row bias", dense_instance),
        run("channel_affine", affine_instance),
        run("upsample_bilinear", upsample_instance),
        run("roi_align", roi_align_instance),
        run("plane_map", plane_map_instance),
        run("transconv_forward", transconv_instance),
        run("proposal_loss", proposal_instance),
        run("detection_loss", detection_instance),
        run("convex_loss", convex_instance),
        model_check(),
    ]
}
