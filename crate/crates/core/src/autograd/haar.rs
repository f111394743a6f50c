use super::{Op, Tape, Var};
use crate::error::Result;
use crate::tensor::Dims;
use crate::wavelet::haar_dwt2;

/// Adjoint of the stacked analysis map `[A | H | V | D]` (each C channels).
pub(super) fn backward(in_dims: Dims, g: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = in_dims;
    let (h2, w2) = (h / 2, w / 2);
    let band = c * h2 * w2;
    let mut dx = vec![0.0; n * c * h * w];
    for b in 0..n {
        let gb = &g[b * 4 * band..(b + 1) * 4 * band];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = (ch * h2 + i) * w2 + j;
                    let (ga, gh, gv, gd) = (gb[o], gb[band + o], gb[2 * band + o], gb[3 * band + o]);
                    let base = ((b * c + ch) * h + 2 * i) * w + 2 * j;
                    dx[base] = (ga + gh + gv + gd) / 4.0;
                    dx[base + 1] = (ga + gh - gv - gd) / 4.0;
                    dx[base + w] = (ga - gh + gv - gd) / 4.0;
                    dx[base + w + 1] = (ga - gh - gv + gd) / 4.0;
                }
            }
        }
    }
    dx
}

impl Tape {
    /// One-level Haar analysis; output `(N, 4C, H/2, W/2)` with channel groups
    /// `[A | H | V | D]`.
    pub fn haar_dwt2(&mut self, input: Var) -> Result<Var> {
        let q = haar_dwt2(self.value(input))?;
        let stacked = q.stacked();
        self.push(stacked, Op::HaarDwt { input })
    }
}
