//! 2D cross-correlation (no kernel flip) with zero padding, via im2col and gemm.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{shape_err, Result};

/// Stride, symmetric zero padding and dilation of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Conv2dGeom {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dGeom {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel of the given size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dGeom::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Validated shapes of one convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvShape {
    pub fn infer(input: &[usize], kernel: &[usize], geom: Conv2dGeom) -> Result<Self> {
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(shape_err!("conv2d stride and dilation must be positive"));
        }
        let &[n, c, h, w] = input else {
            return Err(shape_err!("conv2d input must be [N,C,H,W], got {:?}", input));
        };
        let &[k, kc, kh, kw] = kernel else {
            return Err(shape_err!("conv2d kernel must be [K,C,h,w], got {:?}", kernel));
        };
        if kc != c {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {c} channels, kernel expects {kc}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("conv2d kernel extents must be odd, got {kh}x{kw}"));
        }
        let ho = geom.output_extent(h, kh).ok_or_else(|| {
            shape_err!(
                "conv2d input height {h} with padding {} is smaller than the dilated kernel span {}",
                geom.padding,
                geom.dilation * (kh - 1) + 1
            )
        })?;
        let wo = geom.output_extent(w, kw).ok_or_else(|| {
            shape_err!(
                "conv2d input width {w} with padding {} is smaller than the dilated kernel span {}",
                geom.padding,
                geom.dilation * (kw - 1) + 1
            )
        })?;
        Ok(ConvShape {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `[C,H,W]` into `[C*kh*kw, Ho*Wo]`.
fn im2col(x: &[f64], s: &ConvShape, g: Conv2dGeom, cols: &mut [f64]) {
    let plane = s.out_plane();
    let mut row = 0;
    for c in 0..s.c {
        let xc = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = (i * g.dilation) as isize - g.padding as isize;
                let dx = (j * g.dilation) as isize - g.padding as isize;
                for oy in 0..s.ho {
                    let y = (oy * g.stride) as isize + dy;
                    let out_row = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    if y < 0 || y >= s.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &xc[y as usize * s.w..(y as usize + 1) * s.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let x = (ox * g.stride) as isize + dx;
                        *o = if x < 0 || x >= s.w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds `[C*kh*kw, Ho*Wo]` back onto one image, accumulating into `dx`.
fn col2im(cols: &[f64], s: &ConvShape, g: Conv2dGeom, dx: &mut [f64]) {
    let plane = s.out_plane();
    let mut row = 0;
    for c in 0..s.c {
        let xc = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = (i * g.dilation) as isize - g.padding as isize;
                let dxo = (j * g.dilation) as isize - g.padding as isize;
                for oy in 0..s.ho {
                    let y = (oy * g.stride) as isize + dy;
                    if y < 0 || y >= s.h as isize {
                        continue;
                    }
                    let dst = &mut xc[y as usize * s.w..(y as usize + 1) * s.w];
                    for ox in 0..s.wo {
                        let x = (ox * g.stride) as isize + dxo;
                        if x >= 0 && x < s.w as isize {
                            dst[x as usize] += src[oy * s.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlates `input[N,C,H,W]` with `kernel[K,C,h,w]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, geom: Conv2dGeom) -> Result<Tensor> {
    let s = ConvShape::infer(input.shape(), kernel.shape(), geom)?;
    Ok(conv2d_forward(input.data(), kernel.data(), &s, geom))
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], s: &ConvShape, g: Conv2dGeom) -> Tensor {
    let plane = s.out_plane();
    let patch = s.patch();
    let mut out = vec![0.0; s.n * s.k * plane];
    let mut cols = vec![0.0; patch * plane];
    for n in 0..s.n {
        im2col(&x[n * s.c * s.h * s.w..(n + 1) * s.c * s.h * s.w], s, g, &mut cols);
        gemm(
            s.k,
            patch,
            plane,
            1.0,
            MatRef::row_major(kernel, patch),
            MatRef::row_major(&cols, plane),
            0.0,
            &mut out[n * s.k * plane..(n + 1) * s.k * plane],
        );
    }
    Tensor::from_vec(&[s.n, s.k, s.ho, s.wo], out)
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    s: &ConvShape,
    g: Conv2dGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = s.out_plane();
    let patch = s.patch();
    let image = s.c * s.h * s.w;
    let mut dx = want_input.then(|| vec![0.0; s.n * image]);
    let mut dk = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut cols = vec![0.0; patch * plane];
    for n in 0..s.n {
        let go = &grad_out[n * s.k * plane..(n + 1) * s.k * plane];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[n * image..(n + 1) * image], s, g, &mut cols);
            // dK[K, patch] += dOut[K, plane] * cols^T
            gemm(
                s.k,
                plane,
                patch,
                1.0,
                MatRef::row_major(go, plane),
                MatRef::transposed(&cols, plane),
                1.0,
                dk,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[patch, plane] = K^T * dOut
            gemm(
                patch,
                s.k,
                plane,
                1.0,
                MatRef::transposed(kernel, patch),
                MatRef::row_major(go, plane),
                0.0,
                &mut cols,
            );
            col2im(&cols, s, g, &mut dx[n * image..(n + 1) * image]);
        }
    }
    (dx, dk)
}
