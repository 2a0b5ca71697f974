//! Differentiable operations recorded on a [`Tape`].

use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, Conv2dGeom, ConvShape};
use super::gemm::{gemm, MatRef};
use super::tape::{accumulate, Tape, Var};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Elementwise smooth-L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Row-wise log-softmax of a row-major `[rows, cols]` buffer.
pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Row-wise softmax of a row-major `[rows, cols]` buffer.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    log_softmax_rows(x, cols).into_iter().map(f64::exp).collect()
}

/// A sparse linear map applied independently to every contiguous plane of a tensor.
///
/// `entries` are `(output index, input index, weight)` triples within one plane.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneMap {
    pub plane_in: usize,
    pub plane_out: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl PlaneMap {
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let planes = input.len() / self.plane_in;
        let mut out = vec![0.0; planes * self.plane_out];
        let mut written = vec![false; self.plane_out];
        for p in 0..planes {
            let src = &input[p * self.plane_in..(p + 1) * self.plane_in];
            let dst = &mut out[p * self.plane_out..(p + 1) * self.plane_out];
            written.fill(false);
            // The first contribution is assigned rather than added so a single unit-weight
            // entry reproduces its source bit for bit (including -0.0).
            for &(o, i, w) in &self.entries {
                if written[o] {
                    dst[o] += w * src[i];
                } else {
                    dst[o] = w * src[i];
                    written[o] = true;
                }
            }
        }
        out
    }
}

/// A region of interest in feature-map coordinates (`x1`, `y1` exclusive edge positions).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    SmoothL1(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: Conv2dGeom,
        shape: ConvShape,
    },
    ChannelAffine {
        input: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        channels: usize,
        inner: usize,
    },
    Upsample {
        input: Var,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        input: Var,
        bias: Var,
    },
    PlaneMap {
        input: Var,
        map: Arc<PlaneMap>,
    },
    RoiAlign {
        input: Var,
        channels: usize,
        plane: usize,
        /// Per `(roi, bin)`: `(offset within a feature plane, weight)` taps.
        taps: Vec<Vec<(usize, f64)>>,
    },
    CrossEntropy {
        logits: Var,
        /// Softmax probabilities laid out like the logits.
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        classes: usize,
        inner: usize,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Relu(..) => "relu",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::MatMul { .. } => "matmul",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::PlaneMap { .. } => "plane_map",
            Op::RoiAlign { .. } => "roi_align",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::SmoothL1(a)
            | Op::Reshape(a) => vec![a],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::ChannelAffine {
                input,
                scale,
                shift,
                ..
            } => std::iter::once(input).chain(scale).chain(shift).collect(),
            Op::Upsample { input, .. } => vec![input],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::AddRowBias { input, bias } => vec![input, bias],
            Op::PlaneMap { input, .. } => vec![input],
            Op::RoiAlign { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::BceWithLogits { logits, .. } => vec![logits],
        }
    }

    /// Propagates `g` (the gradient of this node's output) into the inputs' slots.
    pub fn backward(
        &self,
        tape: &Tape,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |v: Var| tape.value(v).data();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(tape, grads, *a, |d| add_into(d, g));
                accumulate(tape, grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                accumulate(tape, grads, *a, |d| add_into(d, g));
                accumulate(tape, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(tape, grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                accumulate(tape, grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                accumulate(tape, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
            }
            Op::AddConst(a) | Op::Reshape(a) => accumulate(tape, grads, *a, |d| add_into(d, g)),
            Op::MulConst(a, c) => {
                accumulate(tape, grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * c[i];
                    }
                });
            }
            Op::Sum(a) => accumulate(tape, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = tape.value(*a).numel() as f64;
                accumulate(tape, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(tape, grads, *a, |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::SmoothL1(a) => {
                let x = val(*a);
                accumulate(tape, grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * smooth_l1_grad(x[i]);
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                shape,
            } => {
                let want_x = tape.requires_grad(*input);
                let want_k = tape.requires_grad(*kernel);
                let (dx, dk) =
                    conv2d_backward(val(*input), val(*kernel), g, shape, *geom, want_x, want_k);
                if let Some(dx) = dx {
                    accumulate(tape, grads, *input, |d| add_into(d, &dx));
                }
                if let Some(dk) = dk {
                    accumulate(tape, grads, *kernel, |d| add_into(d, &dk));
                }
            }
            Op::ChannelAffine {
                input,
                scale,
                shift,
                channels,
                inner,
            } => {
                let x = val(*input);
                let (c_n, inner) = (*channels, *inner);
                let sc = scale.map(|s| val(s));
                accumulate(tape, grads, *input, |d| {
                    for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                        let c = (i / inner) % c_n;
                        *d += g * sc.map_or(1.0, |s| s[c]);
                    }
                });
                if let Some(s) = scale {
                    accumulate(tape, grads, *s, |d| {
                        for (i, (g, x)) in g.iter().zip(x).enumerate() {
                            d[(i / inner) % c_n] += g * x;
                        }
                    });
                }
                if let Some(b) = shift {
                    accumulate(tape, grads, *b, |d| {
                        for (i, g) in g.iter().enumerate() {
                            d[(i / inner) % c_n] += g;
                        }
                    });
                }
            }
            Op::Upsample {
                input,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                let (ys, xs) = (resize_taps(*in_h, *out_h), resize_taps(*in_w, *out_w));
                accumulate(tape, grads, *input, |d| {
                    let planes = d.len() / (in_h * in_w);
                    for p in 0..planes {
                        let src = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                        let dst = &mut d[p * in_h * in_w..(p + 1) * in_h * in_w];
                        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                                let gv = src[oy * out_w + ox];
                                dst[y0 * in_w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                                dst[y0 * in_w + x1] += gv * (1.0 - wy) * wx;
                                dst[y1 * in_w + x0] += gv * wy * (1.0 - wx);
                                dst[y1 * in_w + x1] += gv * wy * wx;
                            }
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                accumulate(tape, grads, *a, |d| {
                    gemm(m, n, k, 1.0, MatRef::row_major(g, n), MatRef::transposed(bv, n), 1.0, d);
                });
                accumulate(tape, grads, *b, |d| {
                    gemm(k, m, n, 1.0, MatRef::transposed(av, k), MatRef::row_major(g, n), 1.0, d);
                });
            }
            Op::AddRowBias { input, bias } => {
                accumulate(tape, grads, *input, |d| add_into(d, g));
                let n = tape.value(*bias).numel();
                accumulate(tape, grads, *bias, |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::PlaneMap { input, map } => {
                accumulate(tape, grads, *input, |d| {
                    let planes = d.len() / map.plane_in;
                    for p in 0..planes {
                        let src = &g[p * map.plane_out..(p + 1) * map.plane_out];
                        let dst = &mut d[p * map.plane_in..(p + 1) * map.plane_in];
                        for &(o, i, w) in &map.entries {
                            dst[i] += w * src[o];
                        }
                    }
                });
            }
            Op::RoiAlign {
                input,
                channels,
                plane,
                taps,
            } => {
                let bins_per_roi = out.shape()[2] * out.shape()[3];
                accumulate(tape, grads, *input, |d| {
                    for (rb, bin_taps) in taps.iter().enumerate() {
                        let (r, b) = (rb / bins_per_roi, rb % bins_per_roi);
                        for c in 0..*channels {
                            let gv = g[(r * channels + c) * bins_per_roi + b];
                            let base = c * plane;
                            for &(o, w) in bin_taps {
                                d[base + o] += gv * w;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                classes,
                inner,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = g[0] / *count as f64;
                let (cn, inner) = (*classes, *inner);
                accumulate(tape, grads, *logits, |d| {
                    for (pos, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let (n, s) = (pos / inner, pos % inner);
                        for c in 0..cn {
                            let idx = (n * cn + c) * inner + s;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            d[idx] += scale * (probs[idx] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let x = val(*logits);
                accumulate(tape, grads, *logits, |d| {
                    for i in 0..d.len() {
                        if weights[i] != 0.0 {
                            d[i] += g[0] * weights[i] * (sigmoid(x[i]) - targets[i]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source taps `(lo, hi, weight of hi)` for half-pixel-centred bilinear resizing.
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(())
}

fn zip_values(tape: &Tape, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (av, bv) = (tape.value(a), tape.value(b));
    Tensor::from_vec(
        av.shape(),
        av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = zip_values(self, a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = zip_values(self, a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = zip_values(self, a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(a).add(c)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    /// `a * c` elementwise for a constant tensor `c` of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err!("mul_const: {:?} vs {:?}", self.shape(a), c.shape()));
        }
        let av = self.value(a);
        let v = Tensor::from_vec(
            av.shape(),
            av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
        );
        Ok(self.push(v, Op::MulConst(a, c.data().to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Sum of several scalars (or same-shape tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let v = self.value(a).map(smooth_l1);
        self.push(v, Op::SmoothL1(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: Conv2dGeom) -> Result<Var> {
        let shape = ConvShape::infer(self.shape(input), self.shape(kernel), geom)?;
        let v = conv2d_forward(self.value(input).data(), self.value(kernel).data(), &shape, geom);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                geom,
                shape,
            },
        ))
    }

    /// `y[n,c,..] = x[n,c,..] * scale[c] + shift[c]` on a `[N,C,...]` input.
    pub fn channel_affine(
        &mut self,
        input: Var,
        scale: Option<Var>,
        shift: Option<Var>,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("channel_affine needs [N,C,...], got {:?}", shape));
        }
        let channels = shape[1];
        for p in scale.iter().chain(shift.iter()) {
            if self.shape(*p) != [channels] {
                return Err(shape_err!(
                    "channel_affine parameter shape {:?}, expected [{channels}]",
                    self.shape(*p)
                ));
            }
        }
        let inner: usize = shape[2..].iter().product();
        let x = self.value(input).data();
        let sc = scale.map(|s| self.value(s).data());
        let sh = shift.map(|s| self.value(s).data());
        let data = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / inner) % channels;
                v * sc.map_or(1.0, |s| s[c]) + sh.map_or(0.0, |s| s[c])
            })
            .collect();
        let v = Tensor::from_vec(&shape, data);
        Ok(self.push(
            v,
            Op::ChannelAffine {
                input,
                scale,
                shift,
                channels,
                inner,
            },
        ))
    }

    /// Bilinear resize of the last two axes (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("upsample_bilinear of {:?} to {out_h}x{out_w}", shape));
        }
        let (in_h, in_w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (ys, xs) = (resize_taps(in_h, out_h), resize_taps(in_w, out_w));
        let x = self.value(input).data();
        let planes = x.len() / (in_h * in_w);
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
            for &(y0, y1, wy) in &ys {
                for &(x0, x1, wx) in &xs {
                    let top = src[y0 * in_w + x0] * (1.0 - wx) + src[y0 * in_w + x1] * wx;
                    let bot = src[y1 * in_w + x0] * (1.0 - wx) + src[y1 * in_w + x1] * wx;
                    out.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([out_h, out_w]);
        let v = Tensor::from_vec(&out_shape, out);
        Ok(self.push(
            v,
            Op::Upsample {
                input,
                in_h,
                in_w,
                out_h,
                out_w,
            },
        ))
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(shape_err!(
                "matmul needs two matrices, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        };
        if k != k2 {
            return Err(shape_err!("matmul inner extents {k} and {k2} differ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(self.value(a).data(), k),
            MatRef::row_major(self.value(b).data(), n),
            0.0,
            &mut out,
        );
        let v = Tensor::from_vec(&[m, n], out);
        Ok(self.push(v, Op::MatMul { a, b, m, k, n }))
    }

    /// Adds a `[N]` bias to every row of a `[M,N]` matrix.
    pub fn add_row_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (&[_, n], &[nb]) = (self.shape(input), self.shape(bias)) else {
            return Err(shape_err!(
                "add_row_bias of {:?} and {:?}",
                self.shape(input),
                self.shape(bias)
            ));
        };
        if n != nb {
            return Err(shape_err!("add_row_bias width {n} vs bias {nb}"));
        }
        let b = self.value(bias).data();
        let x = self.value(input);
        let data = x.data().iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let v = Tensor::from_vec(x.shape(), data);
        Ok(self.push(v, Op::AddRowBias { input, bias }))
    }

    /// Applies a sparse per-plane linear map to the trailing `plane_in` elements.
    pub fn plane_map(&mut self, input: Var, map: Arc<PlaneMap>, out_tail: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let numel: usize = shape.iter().product();
        if numel % map.plane_in != 0 || out_tail.iter().product::<usize>() != map.plane_out {
            return Err(shape_err!("plane_map does not fit input {:?}", shape));
        }
        let tail_rank = out_tail.len();
        let mut out_shape = shape[..shape.len().saturating_sub(tail_rank)].to_vec();
        out_shape.extend_from_slice(out_tail);
        let v = Tensor::new(out_shape, map.apply(self.value(input).data()))?;
        Ok(self.push(v, Op::PlaneMap { input, map }))
    }

    /// Crop-and-resize pooling of `input[1,C,H,W]` into `[R,C,size,size]`.
    ///
    /// Each output bin averages a 2x2 grid of bilinear samples; samples further than one
    /// cell outside the map read zero, the rest are clamped to the border.
    pub fn roi_align(&mut self, input: Var, rois: &[RoiBox], size: usize) -> Result<Var> {
        let &[1, channels, h, w] = self.shape(input) else {
            return Err(shape_err!("roi_align needs [1,C,H,W], got {:?}", self.shape(input)));
        };
        if rois.is_empty() || size == 0 {
            return Err(shape_err!("roi_align needs at least one roi and a positive size"));
        }
        let mut taps = Vec::with_capacity(rois.len() * size * size);
        for roi in rois {
            let bw = (roi.x1 - roi.x0).max(1e-6) / size as f64;
            let bh = (roi.y1 - roi.y0).max(1e-6) / size as f64;
            for by in 0..size {
                for bx in 0..size {
                    let mut bin = Vec::with_capacity(16);
                    for sy in 0..2 {
                        for sx in 0..2 {
                            // Feature cell centres sit at integer + 0.5 in roi coordinates.
                            let y = roi.y0 + bh * (by as f64 + (sy as f64 + 0.5) / 2.0) - 0.5;
                            let x = roi.x0 + bw * (bx as f64 + (sx as f64 + 0.5) / 2.0) - 0.5;
                            bilinear_taps(x, y, w, h, 0.25, &mut bin);
                        }
                    }
                    taps.push(bin);
                }
            }
        }
        let plane = h * w;
        let x = self.value(input).data();
        let bins = size * size;
        let mut out = vec![0.0; rois.len() * channels * bins];
        for (rb, bin_taps) in taps.iter().enumerate() {
            let (r, b) = (rb / bins, rb % bins);
            for c in 0..channels {
                let src = &x[c * plane..(c + 1) * plane];
                out[(r * channels + c) * bins + b] =
                    bin_taps.iter().map(|&(o, wgt)| wgt * src[o]).sum();
            }
        }
        let v = Tensor::from_vec(&[rois.len(), channels, size, size], out);
        Ok(self.push(
            v,
            Op::RoiAlign {
                input,
                channels,
                plane,
                taps,
            },
        ))
    }

    /// Mean softmax cross-entropy over positions with a target.
    ///
    /// `logits` is `[N,C,...]` with classes on axis 1; `targets` has one entry per
    /// `(n, spatial position)` in row-major order, `None` meaning "ignore". With no
    /// targets at all the loss is defined as zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("cross_entropy needs [N,C,...], got {:?}", shape));
        }
        let (n, classes) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if targets.len() != n * inner {
            return Err(shape_err!(
                "cross_entropy: {} targets for logits {:?}",
                targets.len(),
                shape
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {classes} classes"
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        let mut count = 0;
        let mut column = vec![0.0; classes];
        for ni in 0..n {
            for s in 0..inner {
                for (c, col) in column.iter_mut().enumerate() {
                    *col = x[(ni * classes + c) * inner + s];
                }
                let logp = log_softmax_rows(&column, classes);
                for (c, lp) in logp.iter().enumerate() {
                    probs[(ni * classes + c) * inner + s] = lp.exp();
                }
                if let Some(t) = targets[ni * inner + s] {
                    total -= logp[t];
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                classes,
                inner,
                count,
            },
        ))
    }

    /// Weighted sum of elementwise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, weights: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() || targets.shape() != weights.shape() {
            return Err(shape_err!(
                "bce_with_logits shapes {:?}, {:?}, {:?}",
                self.shape(logits),
                targets.shape(),
                weights.shape()
            ));
        }
        let x = self.value(logits).data();
        let loss = x
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .filter(|(_, &w)| w != 0.0)
            .map(|((&x, &t), &w)| w * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
                weights: weights.data().to_vec(),
            },
        ))
    }
}

fn bilinear_taps(x: f64, y: f64, w: usize, h: usize, weight: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    for (o, wt) in [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ] {
        if wt != 0.0 {
            out.push((o, wt * weight));
        }
    }
}
