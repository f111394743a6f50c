use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Windowed max with padding cells excluded. Returns the output and, per output
/// cell, the flat input index of the first maximum in row-major window order.
pub fn max_pool2d_forward(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    if k == 0 || stride == 0 {
        return Err(Error::Config(format!("max_pool2d kernel {k} / stride {stride} must be positive")));
    }
    if 2 * pad > k {
        return Err(Error::Config(format!("max_pool2d padding {pad} exceeds half of kernel {k}")));
    }
    let [n, c, h, w] = x.dims();
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape("max_pool2d", format!("kernel {k} larger than padded {h}x{w}")));
    }
    let hout = (h + 2 * pad - k) / stride + 1;
    let wout = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * hout * wout);
    let mut argmax = Vec::with_capacity(n * c * hout * wout);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..hout {
            let y0 = (oy * stride) as isize - pad as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..wout {
                let x0 = (ox * stride) as isize - pad as isize;
                let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)) as usize;
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        let i = base + iy * w + ix;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts([n, c, hout, wout], out), argmax))
}

pub(super) fn backward(input_len: usize, argmax: &[usize], g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, gv) in argmax.iter().zip(g) {
        dx[i] += gv;
    }
    dx
}

impl Tape {
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, argmax) = max_pool2d_forward(self.value(input), k, stride, pad)?;
        self.push(out, Op::MaxPool { input, argmax })
    }

    /// Stride-1 pooling whose output extents equal the input's; `k` must be odd.
    pub fn max_pool2d_same(&mut self, input: Var, k: usize) -> Result<Var> {
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "same-size max pooling needs an odd kernel, got {k}"
            )));
        }
        self.max_pool2d(input, k, 1, (k - 1) / 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_window_max() {
        let x = Tensor::new([1, 1, 1, 4], vec![1.0, 9.0, 2.0, 3.0]).unwrap();
        let (y, _) = max_pool2d_forward(&x, 3, 1, 1).unwrap();
        assert_eq!(y.data(), &[9.0, 9.0, 9.0, 3.0]);
    }

    #[test]
    fn constant_map_is_preserved() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 2, 6, 5], 7.0));
        for k in [1, 3, 5, 7] {
            let y = tape.max_pool2d_same(x, k).unwrap();
            assert_eq!(tape.value(y), tape.value(x));
        }
    }

    #[test]
    fn ramp_takes_bottom_right_of_window() {
        let (h, w, k) = (9, 11, 5);
        let x = Tensor::from_fn([1, 1, h, w], |_, _, y, x| (y * w + x) as f64);
        let (out, _) = max_pool2d_forward(&x, k, 1, 2).unwrap();
        for y in 0..h {
            for xx in 0..w {
                let by = (y + 2).min(h - 1);
                let bx = (xx + 2).min(w - 1);
                assert_eq!(out.at(0, 0, y, xx), (by * w + bx) as f64);
            }
        }
    }

    #[test]
    fn even_kernel_same_size_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        assert!(matches!(tape.max_pool2d_same(x, 4), Err(Error::Config(_))));
    }

    #[test]
    fn ties_route_to_first_occurrence() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new([1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap());
        let y = tape.max_pool2d(x, 2, 1, 0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
