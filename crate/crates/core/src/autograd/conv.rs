//! 2D cross-correlation via im2col + GEMM.

use super::linalg::gemm;
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Zero padding applied to each side of the spatial axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self::symmetric(p, p)
    }

    pub fn symmetric(ph: usize, pw: usize) -> Self {
        Self {
            top: ph,
            bottom: ph,
            left: pw,
            right: pw,
        }
    }

    /// Padding that keeps stride-1 output extents equal to the input's.
    /// Even kernels put the extra row/column on the bottom/right.
    pub fn same(kh: usize, kw: usize) -> Self {
        let top = (kh - 1) / 2;
        let left = (kw - 1) / 2;
        Self {
            top,
            bottom: kh - 1 - top,
            left,
            right: kw - 1 - left,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(input: Dims, weight: Dims, stride: usize, pad: Padding) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, wcin, kh, kw] = weight;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin} (weight dims {weight:?})"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let ph = h + pad.top + pad.bottom;
        let pw = w + pad.left + pad.right;
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            hout: (ph - kh) / stride + 1,
            wout: (pw - kw) / stride + 1,
        })
    }

    pub fn out_dims(&self) -> Dims {
        [self.n, self.cout, self.hout, self.wout]
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.hout * self.wout
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Padding::default()
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.col_rows() * self.positions()) as u64
    }
}

/// Output column range `[lo, hi)` for which `o * stride + k - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    // o * stride + k >= pad  and  o * stride + k < len + pad
    let lo = if pad > k { (pad - k).div_ceil(stride).min(out) } else { 0 };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad.top, g.stride, g.h, g.hout);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad.left, g.stride, g.w, g.wout);
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                dst.iter_mut().for_each(|v| *v = 0.0);
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad.top;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad.left;
                        drow[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            drow[ox] = src[ox * g.stride + kx - g.pad.left];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad.top, g.stride, g.h, g.hout);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad.left, g.stride, g.w, g.wout);
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad.top;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wout..(oy + 1) * g.wout];
                    for ox in ox_lo..ox_hi {
                        drow[ox * g.stride + kx - g.pad.left] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Forward pass on raw values; shared by the tape op and accounting probes.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: Padding) -> Result<(Tensor, ConvGeom)> {
    let g = ConvGeom::new(input.dims(), weight.dims(), stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.numel(), g.cout),
            ));
        }
    }
    let p = g.positions();
    let k = g.col_rows();
    let in_plane = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..g.n {
        let x = &input.data()[n * in_plane..(n + 1) * in_plane];
        let y = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let b_mat: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut cols);
            &cols
        };
        gemm(g.cout, k, p, weight.data(), false, b_mat, false, y, beta);
    }
    Ok((Tensor::from_parts(g.out_dims(), out), g))
}

pub(super) fn backward(
    input: &Tensor,
    weight: &Tensor,
    g: &ConvGeom,
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> [Option<Vec<f64>>; 2] {
    let p = g.positions();
    let k = g.col_rows();
    let in_plane = g.cin * g.h * g.w;
    let mut dx = need_input.then(|| vec![0.0; input.numel()]);
    let mut dw = need_weight.then(|| vec![0.0; weight.numel()]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if g.is_pointwise() || !need_input {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for n in 0..g.n {
        let gy = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
        let x = &input.data()[n * in_plane..(n + 1) * in_plane];
        if let Some(dw) = dw.as_mut() {
            let b_mat: &[f64] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            // dW(cout, k) += gy(cout, p) * cols^T(p, k)
            gemm(g.cout, p, k, gy, false, b_mat, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                gemm(k, g.cout, p, weight.data(), true, gy, false, dxn, 1.0);
            } else {
                gemm(k, g.cout, p, weight.data(), true, gy, false, &mut dcols, 0.0);
                col2im(g, &dcols, dxn);
            }
        }
    }
    [dx, dw]
}

pub(super) fn bias_grad(g: &ConvGeom, grad_out: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let mut db = vec![0.0; g.cout];
    for n in 0..g.n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = (n * g.cout + co) * p;
            *acc += grad_out[base..base + p].iter().sum::<f64>();
        }
    }
    db
}

impl Tape {
    /// Cross-correlation of `input (N,Cin,H,W)` with `weight (Cout,Cin,kh,kw)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let (out, geom) = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        self.count_macs(geom.macs());
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }
}
