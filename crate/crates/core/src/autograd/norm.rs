//! Batch normalization (per channel over N,H,W) and layer normalization
//! (per spatial position over C).

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Per-channel batch statistics observed in a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

fn check_affine(op: &'static str, c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            op,
            format!("gamma/beta lengths {}/{} for {c} channels", gamma.numel(), beta.numel()),
        ));
    }
    Ok(())
}

pub(super) fn batch_norm_train_backward(dims: Dims, gamma: &[f64], xhat: &[f64], inv_std: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                sg += g[i];
                sgx += g[i] * xhat[i];
            }
        }
        dgamma[ch] = sgx;
        dbeta[ch] = sg;
        let k = gamma[ch] * inv_std[ch] / m;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dx[i] = k * (m * g[i] - sg - xhat[i] * sgx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(super) fn batch_norm_eval_backward(x: &Tensor, gamma: &[f64], mean: &[f64], inv_std: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let xd = x.data();
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for i in base..base + plane {
                dx[i] = g[i] * scale;
                dgamma[ch] += g[i] * (xd[i] - mean[ch]) * inv_std[ch];
                dbeta[ch] += g[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(super) fn layer_norm_backward(dims: Dims, gamma: &[f64], xhat: &[f64], inv_std: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let cf = c as f64;
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let (mut s1, mut s2) = (0.0, 0.0);
            for k in 0..c {
                let i = base + k * plane + p;
                let gh = g[i] * gamma[k];
                s1 += gh;
                s2 += gh * xhat[i];
                dgamma[k] += g[i] * xhat[i];
                dbeta[k] += g[i];
            }
            let is = inv_std[b * plane + p];
            for k in 0..c {
                let i = base + k * plane + p;
                let gh = g[i] * gamma[k];
                dx[i] = is / cf * (cf * gh - s1 - xhat[i] * s2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl Tape {
    /// Training-mode batch norm; returns the batch statistics for running-stat updates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims();
        check_affine("batch_norm", c, self.value(gamma), self.value(beta))?;
        let plane = h * w;
        let m = n * plane;
        let xd = x.data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                s += xd[base..base + plane].iter().sum::<f64>();
            }
            mean[ch] = s / m as f64;
            let mut v = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                v += xd[base..base + plane].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
            var[ch] = v / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
        let stats = BatchStats {
            var_unbiased: var.iter().map(|v| v * unbias).collect(),
            mean,
        };
        let value = Tensor::from_parts(x.dims(), out);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((v, stats))
    }

    /// Evaluation-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64], eps: f64) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims();
        check_affine("batch_norm", c, self.value(gamma), self.value(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats for {c} channels")));
        }
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    out[i] = gv[ch] * (xd[i] - running_mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::from_parts(x.dims(), out);
        self.push(
            value,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        )
    }

    /// Normalizes each spatial position's channel vector, then applies a per-channel affine.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims();
        check_affine("layer_norm", c, self.value(gamma), self.value(beta))?;
        let plane = h * w;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xd = x.data();
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; n * plane];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mean = (0..c).map(|k| xd[base + k * plane + p]).sum::<f64>() / c as f64;
                let var = (0..c).map(|k| (xd[base + k * plane + p] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * plane + p] = is;
                for k in 0..c {
                    let i = base + k * plane + p;
                    xhat[i] = (xd[i] - mean) * is;
                    out[i] = gv[k] * xhat[i] + bv[k];
                }
            }
        }
        let value = Tensor::from_parts(x.dims(), out);
        self.push(
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }
}
