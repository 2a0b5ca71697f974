use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::detect::{generate_anchors, Anchor};
use crate::error::{shape_err, Error, Result};
use crate::geometry::Rect;
use crate::tensor::{Conv2dGeom, ParamId, ParamStore, PlaneMap, RoiBox, Tape, Tensor, Var};
use crate::transconv::TransConv;

/// Channels of the shared stride-4 feature consumed by both branches.
pub const NECK_CHANNELS: usize = 32;
const HEAD_HIDDEN: usize = 128;
/// Spatial size of pooled region features.
pub const ROI_SIZE: usize = 7;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: ParamId,
    geom: Conv2dGeom,
    trans: Option<TransConv>,
    norm: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct DetectionParams {
    rpn_conv: Dense,
    rpn_obj: Dense,
    rpn_delta: Dense,
    fc: Dense,
    cls: Dense,
    reg: Dense,
}

/// Per-channel mean and variance of one normalization input, gathered in training.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[1,C,H,W]` semantic logits at input resolution.
    pub logits: Var,
    /// `[1,NECK_CHANNELS,H/4,W/4]` shared feature.
    pub feature: Var,
    /// `[A]` objectness logits in anchor order (detection only).
    pub objectness: Option<Var>,
    /// `[A,4]` proposal deltas in anchor order (detection only).
    pub rpn_deltas: Option<Var>,
    pub anchors: Vec<Anchor>,
    pub width: usize,
    pub height: usize,
    /// One entry per normalization layer, in layer order.
    pub norm_stats: Vec<ChannelStats>,
}

/// Parameters bound to one tape, indexed like the parameter store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id_index(id)]
    }

    /// `(param, var)` pairs for gradient collection.
    pub fn bindings(&self, store: &ParamStore) -> Vec<(ParamId, Var)> {
        debug_assert_eq!(store.len(), self.vars.len());
        self.vars.iter().enumerate().map(|(i, &v)| (ParamId(i), v)).collect()
    }
}

fn id_index(id: ParamId) -> usize {
    id.0
}

/// The facade parsing network: a dilated conv backbone, a stride-4 neck, a semantic head
/// and an optional two-stage generalized-box detector.
#[derive(Clone, Debug)]
pub struct FacadeRcnn {
    config: RunConfig,
    params: ParamStore,
    backbone: Vec<ConvUnit>,
    lateral: Dense,
    top: Dense,
    seg_conv: Dense,
    seg_cls: Dense,
    detection: Option<DetectionParams>,
    norm_updates: u64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Uniform `±sqrt(gain / fan_in)` from a stream keyed by the seed and parameter name, so a
/// parameter's initial value does not depend on which other parameters exist.
fn init_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let bound = (gain / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

struct Builder {
    seed: u64,
    store: ParamStore,
}

impl Builder {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<ParamId> {
        let t = init_uniform(self.seed, name, shape, fan_in, gain);
        self.store.add(name, t, true)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value), trainable)
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<NormIds> {
        Ok(NormIds {
            gamma: self.constant(&format!("{prefix}.gamma"), &[c], 1.0, true)?,
            beta: self.constant(&format!("{prefix}.beta"), &[c], 0.0, true)?,
            mean: self.constant(&format!("{prefix}.running_mean"), &[c], 0.0, false)?,
            var: self.constant(&format!("{prefix}.running_var"), &[c], 1.0, false)?,
        })
    }

    /// Convolution kernel `[out,in,k,k]` with a per-channel bias.
    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Result<Dense> {
        Ok(Dense {
            weight: self.weight(&format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k, gain)?,
            bias: self.constant(&format!("{prefix}.bias"), &[cout], 0.0, true)?,
        })
    }

    /// Matrix `[in,out]` with a row bias.
    fn linear(&mut self, prefix: &str, cin: usize, cout: usize, gain: f64) -> Result<Dense> {
        Ok(Dense {
            weight: self.weight(&format!("{prefix}.weight"), &[cin, cout], cin, gain)?,
            bias: self.constant(&format!("{prefix}.bias"), &[cout], 0.0, true)?,
        })
    }
}

const HE: f64 = 6.0;
const OUTPUT_GAIN: f64 = 1.0;

impl FacadeRcnn {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let spec = config.kernel_spec()?;
        let mut b = Builder {
            seed: m.seed,
            store: ParamStore::new(),
        };
        let mut backbone = Vec::with_capacity(8);
        let mut cin = 3;
        for stage in 0..4 {
            let (w, s, d) = (m.widths[stage], m.strides[stage], m.dilations[stage]);
            for (j, tag) in ["a", "b"].iter().enumerate() {
                let prefix = format!("backbone.s{}.conv{tag}", stage + 1);
                let transconv_slot = if j == 0 { stage == 0 && config.transconv.stages.contains(&0) } else {
                    config.transconv.stages.contains(&(stage + 1))
                };
                let trans = if transconv_slot && !spec.is_identity() {
                    Some(TransConv::new(spec.clone(), 3)?)
                } else {
                    None
                };
                // Keeps the summed kernel near the plain-conv scale at initialization.
                let gain = HE / trans.as_ref().map_or(1.0, |t| t.spec().len() as f64);
                let weight = b.weight(&format!("{prefix}.weight"), &[w, cin, 3, 3], cin * 9, gain)?;
                let norm = b.norm(&format!("{prefix}.norm"), w)?;
                let geom = Conv2dGeom::new(if j == 0 { s } else { 1 }, d, d);
                backbone.push(ConvUnit {
                    weight,
                    geom,
                    trans,
                    norm,
                });
                cin = w;
            }
        }
        let lateral = b.conv("neck.lateral", m.widths[1], NECK_CHANNELS, 1, HE)?;
        let top = b.conv("neck.top", m.widths[3], NECK_CHANNELS, 1, HE)?;
        let seg_conv = b.conv("seg.conv", NECK_CHANNELS, NECK_CHANNELS, 3, HE)?;
        let seg_cls = b.conv("seg.cls", NECK_CHANNELS, m.classes, 1, OUTPUT_GAIN)?;
        let detection = if m.detection {
            let a = config.detect.anchor_scales.len() * config.detect.anchor_ratios.len();
            Some(DetectionParams {
                rpn_conv: b.conv("rpn.conv", NECK_CHANNELS, NECK_CHANNELS, 3, HE)?,
                rpn_obj: b.conv("rpn.objectness", NECK_CHANNELS, a, 1, OUTPUT_GAIN)?,
                rpn_delta: b.conv("rpn.deltas", NECK_CHANNELS, 4 * a, 1, OUTPUT_GAIN)?,
                fc: b.linear("head.fc", NECK_CHANNELS * ROI_SIZE * ROI_SIZE, HEAD_HIDDEN, HE)?,
                cls: b.linear("head.cls", HEAD_HIDDEN, m.classes, OUTPUT_GAIN)?,
                reg: b.linear("head.reg", HEAD_HIDDEN, 8, OUTPUT_GAIN)?,
            })
        } else {
            None
        };
        Ok(FacadeRcnn {
            config,
            params: b.store,
            backbone,
            lateral,
            top,
            seg_conv,
            seg_cls,
            detection,
            norm_updates: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_detection(&self) -> bool {
        self.detection.is_some()
    }

    pub fn classes(&self) -> usize {
        self.config.model.classes
    }

    /// Total downsampling of the backbone; input sides must be multiples of it.
    pub fn output_stride(&self) -> usize {
        self.config.model.strides.iter().product()
    }

    /// Stride of the shared neck feature.
    pub fn feature_stride(&self) -> usize {
        self.config.model.strides[..2].iter().product()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), p.trainable)).collect(),
        }
    }

    /// Like [`Self::bind`] but substitutes `var` for the parameter `name`.
    pub fn bind_with(&self, tape: &mut Tape, name: &str, var: Var) -> Result<Bound> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if tape.shape(var) != self.params.get(id).value.shape() {
            return Err(shape_err!("substitute for {name} has shape {:?}", tape.shape(var)));
        }
        let mut bound = self.bind(tape);
        bound.vars[id_index(id)] = var;
        Ok(bound)
    }

    fn check_input(&self, image: &Tensor) -> Result<(usize, usize)> {
        let &[3, h, w] = image.shape() else {
            return Err(shape_err!("model input must be [3,H,W], got {:?}", image.shape()));
        };
        let s = self.output_stride();
        if h % s != 0 || w % s != 0 {
            return Err(shape_err!("input height and width must be multiples of {s}, got {h}x{w}"));
        }
        Ok((h, w))
    }

    fn normalize(&self, tape: &mut Tape, p: &Bound, x: Var, n: NormIds, stats: Option<&mut Vec<ChannelStats>>) -> Result<Var> {
        let mean = self.params.get(n.mean).value.data();
        let var = self.params.get(n.var).value.data();
        if let Some(stats) = stats {
            stats.push(channel_stats(tape.value(x)));
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let c = inv.len();
        let inv_t = Tensor::from_vec(&[c], inv);
        let scale = tape.mul_const(p.var(n.gamma), &inv_t)?;
        // shift = beta - gamma * mean / sqrt(var + eps)
        let ms = Tensor::from_fn(&[c], |i| -mean[i] * inv_t.data()[i]);
        let gm = tape.mul_const(p.var(n.gamma), &ms)?;
        let shift = tape.add(p.var(n.beta), gm)?;
        tape.channel_affine(x, Some(scale), Some(shift))
    }

    fn conv_bias(&self, tape: &mut Tape, p: &Bound, x: Var, d: Dense, geom: Conv2dGeom) -> Result<Var> {
        let y = tape.conv2d(x, p.var(d.weight), geom)?;
        tape.channel_affine(y, None, Some(p.var(d.bias)))
    }

    /// Runs the network on `image[3,H,W]`. With `collect_stats` the pre-normalization
    /// channel statistics are returned for the running-average update.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: &Tensor, collect_stats: bool) -> Result<Forward> {
        let (h, w) = self.check_input(image)?;
        let x = tape.constant(image.clone().reshape(&[1, 3, h, w])?);
        let mut stats = collect_stats.then(Vec::new);
        let mut x = x;
        let mut stage2 = None;
        for (i, unit) in self.backbone.iter().enumerate() {
            let y = match &unit.trans {
                Some(tc) => tc.forward(tape, x, p.var(unit.weight), unit.geom)?,
                None => tape.conv2d(x, p.var(unit.weight), unit.geom)?,
            };
            let y = self.normalize(tape, p, y, unit.norm, stats.as_mut())?;
            x = tape.relu(y);
            if i == 3 {
                stage2 = Some(x);
            }
        }
        let stage2 = stage2.expect("four stages");
        let (fh, fw) = (tape.shape(stage2)[2], tape.shape(stage2)[3]);
        let lateral = self.conv_bias(tape, p, stage2, self.lateral, Conv2dGeom::default())?;
        let top = self.conv_bias(tape, p, x, self.top, Conv2dGeom::default())?;
        let top = tape.upsample_bilinear(top, fh, fw)?;
        let feature = tape.add(lateral, top)?;
        let feature = tape.relu(feature);

        let s = self.conv_bias(tape, p, feature, self.seg_conv, Conv2dGeom::same(3, 1))?;
        let s = tape.relu(s);
        let s = self.conv_bias(tape, p, s, self.seg_cls, Conv2dGeom::default())?;
        let logits = tape.upsample_bilinear(s, h, w)?;

        let mut out = Forward {
            logits,
            feature,
            objectness: None,
            rpn_deltas: None,
            anchors: Vec::new(),
            width: w,
            height: h,
            norm_stats: stats.unwrap_or_default(),
        };
        if let Some(d) = &self.detection {
            let det = &self.config.detect;
            let a = det.anchor_scales.len() * det.anchor_ratios.len();
            let r = self.conv_bias(tape, p, feature, d.rpn_conv, Conv2dGeom::same(3, 1))?;
            let r = tape.relu(r);
            let obj = self.conv_bias(tape, p, r, d.rpn_obj, Conv2dGeom::default())?;
            let del = self.conv_bias(tape, p, r, d.rpn_delta, Conv2dGeom::default())?;
            let cells = fh * fw;
            let obj = tape.reshape(obj, &[a * cells])?;
            let obj = tape.plane_map(obj, Arc::new(anchor_order_map(a, cells, 1)), &[a * cells])?;
            let del = tape.reshape(del, &[4 * a * cells])?;
            let del = tape.plane_map(del, Arc::new(anchor_order_map(a, cells, 4)), &[a * cells, 4])?;
            out.objectness = Some(obj);
            out.rpn_deltas = Some(del);
            out.anchors = generate_anchors(fh, fw, self.feature_stride() as f64, &det.anchor_scales, &det.anchor_ratios);
        }
        Ok(out)
    }

    /// Region head on image-space `rois`: `([R,C] class logits, [R,8] deltas)`.
    pub fn head(&self, tape: &mut Tape, p: &Bound, feature: Var, rois: &[Rect]) -> Result<(Var, Var)> {
        let d = self
            .detection
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("detection branch is disabled".into()))?;
        let s = self.feature_stride() as f64;
        let boxes: Vec<RoiBox> = rois
            .iter()
            .map(|r| RoiBox {
                x0: r.x_min / s,
                y0: r.y_min / s,
                x1: r.x_max / s,
                y1: r.y_max / s,
            })
            .collect();
        let pooled = tape.roi_align(feature, &boxes, ROI_SIZE)?;
        let flat = tape.reshape(pooled, &[rois.len(), NECK_CHANNELS * ROI_SIZE * ROI_SIZE])?;
        let hidden = self.linear(tape, p, flat, d.fc)?;
        let hidden = tape.relu(hidden);
        let cls = self.linear(tape, p, hidden, d.cls)?;
        let reg = self.linear(tape, p, hidden, d.reg)?;
        Ok((cls, reg))
    }

    fn linear(&self, tape: &mut Tape, p: &Bound, x: Var, d: Dense) -> Result<Var> {
        let y = tape.matmul(x, p.var(d.weight))?;
        tape.add_row_bias(y, p.var(d.bias))
    }

    /// Sets the running statistics layer by layer from `images`, so each layer is measured
    /// with every earlier layer already normalized by its calibrated statistics.
    pub fn calibrate_norms(&mut self, images: &[&Tensor]) -> Result<()> {
        if images.is_empty() {
            return Ok(());
        }
        for layer in 0..self.backbone.len() {
            let mut stats = Vec::with_capacity(images.len());
            for image in images {
                let mut tape = Tape::new();
                let p = self.bind(&mut tape);
                let f = self.forward_stats_until(&mut tape, &p, image, layer + 1)?;
                stats.push(f);
            }
            self.set_norm_from(layer, &stats);
        }
        self.norm_updates = self.norm_updates.max(1);
        Ok(())
    }

    fn forward_stats_until(&self, tape: &mut Tape, p: &Bound, image: &Tensor, layers: usize) -> Result<ChannelStats> {
        let (h, w) = self.check_input(image)?;
        let mut x = tape.constant(image.clone().reshape(&[1, 3, h, w])?);
        let mut stats = Vec::new();
        for unit in &self.backbone[..layers] {
            let y = match &unit.trans {
                Some(tc) => tc.forward(tape, x, p.var(unit.weight), unit.geom)?,
                None => tape.conv2d(x, p.var(unit.weight), unit.geom)?,
            };
            let y = self.normalize(tape, p, y, unit.norm, Some(&mut stats))?;
            x = tape.relu(y);
        }
        Ok(stats.pop().expect("at least one layer"))
    }

    fn set_norm_from(&mut self, layer: usize, stats: &[ChannelStats]) {
        let unit = &self.backbone[layer];
        let (mean, var) = pooled(stats.iter());
        self.params.get_mut(unit.norm.mean).value.data_mut().copy_from_slice(&mean);
        self.params.get_mut(unit.norm.var).value.data_mut().copy_from_slice(&var);
    }

    /// Folds per-sample channel statistics (in sample order) into the running averages.
    /// The first updates use a cumulative average, later ones an exponential one.
    pub fn update_norm_stats(&mut self, batch: &[Vec<ChannelStats>]) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        const MOMENTUM: f64 = 0.1;
        let m = MOMENTUM.max(1.0 / (self.norm_updates + 1) as f64);
        for (layer, unit) in self.backbone.iter().enumerate() {
            let layer_stats = batch
                .iter()
                .map(|s| s.get(layer).ok_or_else(|| Error::InvalidArgument("missing normalization statistics".into())))
                .collect::<Result<Vec<_>>>()?;
            let (mean, var) = pooled(layer_stats.into_iter());
            let rm = self.params.get_mut(unit.norm.mean).value.data_mut();
            rm.iter_mut().zip(&mean).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
            let rv = self.params.get_mut(unit.norm.var).value.data_mut();
            rv.iter_mut().zip(&var).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
        }
        self.norm_updates += 1;
        Ok(())
    }
}

/// Mean and variance of the union of equally sized samples.
fn pooled<'a>(stats: impl Iterator<Item = &'a ChannelStats>) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::new();
    let mut second = Vec::new();
    let mut n = 0.0;
    for s in stats {
        if mean.is_empty() {
            mean = vec![0.0; s.mean.len()];
            second = vec![0.0; s.mean.len()];
        }
        for k in 0..s.mean.len() {
            mean[k] += s.mean[k];
            second[k] += s.var[k] + s.mean[k] * s.mean[k];
        }
        n += 1.0;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let var = second.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0)).collect();
    (mean, var)
}

fn channel_stats(x: &Tensor) -> ChannelStats {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let d = x.data();
    for b in 0..n {
        for k in 0..c {
            let plane = &d[(b * c + k) * inner..(b * c + k + 1) * inner];
            mean[k] += plane.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for k in 0..c {
            let plane = &d[(b * c + k) * inner..(b * c + k + 1) * inner];
            var[k] += plane.iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    ChannelStats { mean, var }
}

/// Reorders `[anchor, component, cell]` head output into `[cell, anchor, component]`.
fn anchor_order_map(anchors: usize, cells: usize, components: usize) -> PlaneMap {
    let n = anchors * cells * components;
    let mut entries = Vec::with_capacity(n);
    for cell in 0..cells {
        for a in 0..anchors {
            for k in 0..components {
                let out = (cell * anchors + a) * components + k;
                let inp = (a * components + k) * cells + cell;
                entries.push((out, inp, 1.0));
            }
        }
    }
    PlaneMap {
        plane_in: n,
        plane_out: n,
        entries,
    }
}
