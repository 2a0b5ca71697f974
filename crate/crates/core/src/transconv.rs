//! Transformed-kernel convolution.
//!
//! A base kernel is sheared along the vertical axis, optionally mirrored horizontally
//! and optionally rotated by quarter turns. Each transformed copy is convolved with the
//! input and the responses are summed. Coordinates `(u, v)` are measured from the
//! kernel centre with `u` horizontal (column) and `v` vertical (row); a member
//! `(phi, m)` maps `(u, v)` to `((-1)^m u, u tan(phi) + v)`. Kernels are resampled by
//! pulling every target cell back through the inverse map and reading the base kernel
//! bilinearly, with zeros outside its support.
//!
//! The transform is linear in kernel values, so the summed response equals a single
//! convolution with the summed kernel. [`transconv_forward`] uses that route.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv2d, Conv2dGeom, PlaneMap, Tape, Tensor, Var};

/// One member of a kernel group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelTransform {
    /// Shear angle in degrees, in `[0, 180)` and not 90.
    pub shear_deg: f64,
    pub flip: bool,
    /// Counter-clockwise quarter turns applied after shearing and flipping.
    pub quarter_turns: u8,
}

impl KernelTransform {
    pub const IDENTITY: KernelTransform = KernelTransform {
        shear_deg: 0.0,
        flip: false,
        quarter_turns: 0,
    };

    pub fn shear_flip(shear_deg: f64, flip: bool) -> Self {
        KernelTransform {
            shear_deg,
            flip,
            quarter_turns: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..180.0).contains(&self.shear_deg) {
            return Err(Error::InvalidArgument(format!(
                "shear angle {} outside [0, 180)",
                self.shear_deg
            )));
        }
        if self.shear_deg == 90.0 {
            return Err(Error::InvalidArgument(
                "shear angle 90 degrees has an unbounded tangent".into(),
            ));
        }
        if self.quarter_turns > 3 {
            return Err(Error::InvalidArgument(format!(
                "quarter turns must be 0..=3, got {}",
                self.quarter_turns
            )));
        }
        Ok(())
    }
}

/// Signed shear angle in degrees mapped onto `[0, 180)`, e.g. `-30` becomes `150`.
pub fn wrap_angle(deg: f64) -> f64 {
    deg.rem_euclid(180.0)
}

/// The set of kernel transforms whose convolution responses are summed.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGroupSpec {
    members: Vec<KernelTransform>,
}

impl Default for KernelGroupSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl KernelGroupSpec {
    /// Default shear angles: -30, 0 and +30 degrees.
    pub const DEFAULT_ANGLES: [f64; 3] = [150.0, 0.0, 30.0];

    /// The singleton identity group (a plain convolution).
    pub fn identity() -> Self {
        KernelGroupSpec {
            members: vec![KernelTransform::IDENTITY],
        }
    }

    /// Product group built from ablation flags: shear angles (when `shear`), mirror
    /// (when `flip`) and the four quarter turns (when `rotate`). Angle 0 is always
    /// included.
    pub fn from_flags(angles: &[f64], shear: bool, flip: bool, rotate: bool) -> Result<Self> {
        let mut phis = vec![0.0];
        if shear {
            for &a in angles {
                let a = wrap_angle(a);
                if !phis.contains(&a) {
                    phis.push(a);
                }
            }
        }
        let flips: &[bool] = if flip { &[false, true] } else { &[false] };
        let turns: &[u8] = if rotate { &[0, 1, 2, 3] } else { &[0] };
        let mut members = Vec::new();
        for &quarter_turns in turns {
            for &shear_deg in &phis {
                for &flip in flips {
                    members.push(KernelTransform {
                        shear_deg,
                        flip,
                        quarter_turns,
                    });
                }
            }
        }
        Self::from_members(members)
    }

    pub fn from_members(members: Vec<KernelTransform>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("kernel group has no members".into()));
        }
        for m in &members {
            m.validate()?;
        }
        if !members.iter().any(KernelTransform::is_identity) {
            return Err(Error::InvalidArgument(
                "kernel group must contain the identity transform".into(),
            ));
        }
        let spec = KernelGroupSpec { members };
        if spec.members.iter().any(|m| m.flip) && !spec.is_flip_closed() {
            return Err(Error::InvalidArgument(
                "kernel group with flipped members must pair every member with its mirror".into(),
            ));
        }
        Ok(spec)
    }

    pub fn members(&self) -> &[KernelTransform] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.members.len() == 1 && self.members[0].is_identity()
    }

    /// Every member `(phi, m, k)` has its partner `(phi, 1 - m, k)`.
    pub fn is_flip_closed(&self) -> bool {
        self.members.iter().all(|a| {
            self.members.iter().any(|b| {
                b.shear_deg == a.shear_deg && b.quarter_turns == a.quarter_turns && b.flip != a.flip
            })
        })
    }

    /// The summed resampling map of all members for a `size x size` kernel plane.
    pub fn summed_map(&self, size: usize) -> Result<PlaneMap> {
        let mut dense = vec![0.0; size.pow(4)];
        for m in &self.members {
            for (o, i, w) in transform_map(size, *m)?.entries {
                dense[o * size * size + i] += w;
            }
        }
        let plane = size * size;
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(idx, &w)| (idx / plane, idx % plane, w))
            .collect();
        Ok(PlaneMap {
            plane_in: plane,
            plane_out: plane,
            entries,
        })
    }
}

fn check_kernel(base: &Tensor) -> Result<usize> {
    let &[_, _, h, w] = base.shape() else {
        return Err(shape_err!("kernel must be [K,C,h,w], got {:?}", base.shape()));
    };
    if h != w || h % 2 == 0 {
        return Err(shape_err!("kernel plane must be square with odd size, got {h}x{w}"));
    }
    Ok(h)
}

/// Source cell of target `(row, col)` under `turns` counter-clockwise quarter turns.
fn unrotate(mut row: usize, mut col: usize, size: usize, turns: u8) -> (usize, usize) {
    for _ in 0..turns {
        (row, col) = (col, size - 1 - row);
    }
    (row, col)
}

/// Resampling entries `(target, source, weight)` of one transform on a kernel plane.
pub fn transform_map(size: usize, t: KernelTransform) -> Result<PlaneMap> {
    t.validate()?;
    if size % 2 == 0 {
        return Err(shape_err!("kernel size must be odd, got {size}"));
    }
    let half = (size / 2) as f64;
    let tan = t.shear_deg.to_radians().tan();
    let tan = if t.shear_deg == 0.0 { 0.0 } else { tan };
    let sign = if t.flip { -1.0 } else { 1.0 };
    let mut entries = Vec::new();
    for row in 0..size {
        for col in 0..size {
            let (sr, sc) = unrotate(row, col, size, t.quarter_turns);
            let target = row * size + col;
            let (u_t, v_t) = (sc as f64 - half, sr as f64 - half);
            let u = sign * u_t;
            let v = v_t - u * tan;
            let (x, y) = (u + half, v + half);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let w = wy * wx;
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    if w == 0.0 || yy < 0.0 || xx < 0.0 || yy >= size as f64 || xx >= size as f64 {
                        continue;
                    }
                    entries.push((target, yy as usize * size + xx as usize, w));
                }
            }
        }
    }
    Ok(PlaneMap {
        plane_in: size * size,
        plane_out: size * size,
        entries,
    })
}

/// Shears (and optionally mirrors) every spatial plane of `base[K,C,W,W]`.
pub fn transform_kernel(base: &Tensor, phi_deg: f64, flip: bool) -> Result<Tensor> {
    let size = check_kernel(base)?;
    let map = transform_map(size, KernelTransform::shear_flip(phi_deg, flip))?;
    Tensor::new(base.shape().to_vec(), map.apply(base.data()))
}

/// Exact counter-clockwise rotation of every spatial plane by `k` quarter turns.
pub fn rotate_kernel(base: &Tensor, k: u8) -> Result<Tensor> {
    let size = check_kernel(base)?;
    if k > 3 {
        return Err(Error::InvalidArgument(format!("quarter turns must be 0..=3, got {k}")));
    }
    let plane = size * size;
    let mut out = base.clone();
    for (dst, src) in out.data_mut().chunks_mut(plane).zip(base.data().chunks(plane)) {
        for row in 0..size {
            for col in 0..size {
                let (sr, sc) = unrotate(row, col, size, k);
                dst[row * size + col] = src[sr * size + sc];
            }
        }
    }
    Ok(out)
}

/// A base kernel together with its transformed copies, one per group member.
#[derive(Clone, Debug)]
pub struct TransKernel {
    pub base: Tensor,
    pub transformed: Vec<Tensor>,
}

impl TransKernel {
    pub fn new(base: Tensor, spec: &KernelGroupSpec) -> Result<Self> {
        let size = check_kernel(&base)?;
        let transformed = spec
            .members()
            .iter()
            .map(|m| {
                let map = transform_map(size, *m)?;
                Tensor::new(base.shape().to_vec(), map.apply(base.data()))
            })
            .collect::<Result<_>>()?;
        Ok(TransKernel { base, transformed })
    }

    pub fn summed(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.base.shape());
        for t in &self.transformed {
            acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
        acc
    }
}

/// Precomputed group map for one kernel size, shared read-only by forward passes.
#[derive(Clone, Debug)]
pub struct TransConv {
    spec: KernelGroupSpec,
    size: usize,
    map: Arc<PlaneMap>,
}

impl TransConv {
    pub fn new(spec: KernelGroupSpec, size: usize) -> Result<Self> {
        let map = Arc::new(spec.summed_map(size)?);
        Ok(TransConv { spec, size, map })
    }

    pub fn spec(&self) -> &KernelGroupSpec {
        &self.spec
    }

    /// Group-summed kernel `sum_g T_g(base)`.
    pub fn effective_kernel(&self, base: &Tensor) -> Result<Tensor> {
        if check_kernel(base)? != self.size {
            return Err(shape_err!("kernel size differs from the prepared group map ({})", self.size));
        }
        Tensor::new(base.shape().to_vec(), self.map.apply(base.data()))
    }

    /// Differentiable group-summed convolution on a tape.
    pub fn forward(&self, tape: &mut Tape, input: Var, base: Var, geom: Conv2dGeom) -> Result<Var> {
        if check_kernel(tape.value(base))? != self.size {
            return Err(shape_err!("kernel size differs from the prepared group map ({})", self.size));
        }
        let kernel = if self.spec.is_identity() {
            base
        } else {
            tape.plane_map(base, self.map.clone(), &[self.size, self.size])?
        };
        tape.conv2d(input, kernel, geom)
    }
}

/// `sum over members of conv2d(input, T_member(base))`, evaluated as one convolution
/// with the summed kernel.
pub fn transconv_forward(
    input: &Tensor,
    base: &Tensor,
    spec: &KernelGroupSpec,
    geom: Conv2dGeom,
) -> Result<Tensor> {
    let tc = TransConv::new(spec.clone(), check_kernel(base)?)?;
    conv2d(input, &tc.effective_kernel(base)?, geom)
}

/// Tape version of [`transconv_forward`]; gradients reach `base` through every member.
pub fn transconv_forward_var(
    tape: &mut Tape,
    input: Var,
    base: Var,
    spec: &KernelGroupSpec,
    geom: Conv2dGeom,
) -> Result<Var> {
    let size = check_kernel(tape.value(base))?;
    TransConv::new(spec.clone(), size)?.forward(tape, input, base, geom)
}
