//! Bilinear resampling with half-pixel sample centres (`align_corners = false`).

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Per output index: (lower source index, upper source index, weight of upper).
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("interpolate_bilinear", format!("output {out_h}x{out_w}")));
    }
    let [n, c, h, w] = x.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone().with_requires_grad(false));
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &xd[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Ok(Tensor::from_parts([n, c, out_h, out_w], out))
}

pub(super) fn backward(in_dims: Dims, out_dims: Dims, g: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = in_dims;
    let [_, _, out_h, out_w] = out_dims;
    if (h, w) == (out_h, out_w) {
        return g.to_vec();
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        let gp = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = gp[oy * out_w + ox];
                d[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                d[y0 * w + x1] += gv * (1.0 - ly) * lx;
                d[y1 * w + x0] += gv * ly * (1.0 - lx);
                d[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    dx
}

impl Tape {
    pub fn interpolate_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_forward(self.value(input), out_h, out_w)?;
        self.push(out, Op::Bilinear { input })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_and_constants() {
        let x = Tensor::from_fn([1, 2, 3, 5], |_, c, h, w| (c * 15 + h * 5 + w) as f64);
        assert_eq!(bilinear_forward(&x, 3, 5).unwrap().data(), x.data());
        let k = Tensor::full([1, 1, 3, 4], 2.5);
        for (oh, ow) in [(1, 1), (7, 2), (12, 16)] {
            let y = bilinear_forward(&k, oh, ow).unwrap();
            assert!(y.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn two_by_two_upscale_by_formula() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_forward(&x, 4, 4).unwrap();
        // Independent evaluation: source coordinate (o + 0.5) * 0.5 - 0.5 clamped
        // into [0, 1]; the map is f(r, c) = 2r + c, linear in both axes.
        for oy in 0..4 {
            for ox in 0..4 {
                let r = ((oy as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                let c = ((ox as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
                assert!((y.at(0, 0, oy, ox) - (2.0 * r + c)).abs() < 1e-12);
            }
        }
        assert_eq!(
            [y.at(0, 0, 0, 0), y.at(0, 0, 0, 3), y.at(0, 0, 3, 0), y.at(0, 0, 3, 3)],
            [0.0, 1.0, 2.0, 3.0]
        );
    }
}
