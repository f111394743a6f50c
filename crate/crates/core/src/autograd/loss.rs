//! Fused pixelwise losses over `(N, K, H, W)` maps with `(N, H, W)` labels.

use super::linalg::softmax_channels_value;
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

fn validate_labels(dims: Dims, labels: &[usize], ignore: Option<usize>) -> Result<usize> {
    let [n, k, h, w] = dims;
    if labels.len() != n * h * w {
        return Err(Error::shape(
            "loss",
            format!("{} labels for prediction dims {dims:?}", labels.len()),
        ));
    }
    let mut count = 0;
    for &l in labels {
        if Some(l) == ignore {
            continue;
        }
        if l >= k {
            return Err(Error::ClassRange { id: l, classes: k });
        }
        count += 1;
    }
    Ok(count)
}

pub(super) fn cross_entropy_backward(dims: Dims, probs: &[f64], labels: &[usize], ignore: Option<usize>, count: usize, g: f64) -> Vec<f64> {
    let [n, k, h, w] = dims;
    let plane = h * w;
    let mut d = vec![0.0; probs.len()];
    if count == 0 {
        return d;
    }
    let scale = g / count as f64;
    for b in 0..n {
        for p in 0..plane {
            let l = labels[b * plane + p];
            if Some(l) == ignore {
                continue;
            }
            for c in 0..k {
                let i = (b * k + c) * plane + p;
                d[i] = scale * (probs[i] - if c == l { 1.0 } else { 0.0 });
            }
        }
    }
    d
}

pub(super) fn dice_backward(probs: &Tensor, labels: &[usize], ignore: Option<usize>, count: usize, eps: f64, g: f64) -> Vec<f64> {
    let [n, k, h, w] = probs.dims();
    let plane = h * w;
    let mut d = vec![0.0; probs.numel()];
    if count == 0 {
        return d;
    }
    let scale = -2.0 * g / count as f64;
    for b in 0..n {
        for p in 0..plane {
            let l = labels[b * plane + p];
            if Some(l) == ignore {
                continue;
            }
            // Only the true class has y = 1; d/dp [p / (p + 1 + eps)] = (1 + eps) / (p + 1 + eps)^2.
            let i = (b * k + l) * plane + p;
            let den = probs.data()[i] + 1.0 + eps;
            d[i] = scale * (1.0 + eps) / (den * den);
        }
    }
    d
}

impl Tape {
    /// Mean negative log-likelihood over non-ignored pixels.
    ///
    /// Returns the loss and whether every pixel was ignored (the loss is then 0).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore: Option<usize>) -> Result<(Var, bool)> {
        let x = self.value(logits);
        let dims = x.dims();
        let count = validate_labels(dims, labels, ignore)?;
        let [n, k, h, w] = dims;
        let plane = h * w;
        let probs = softmax_channels_value(x);
        let xd = x.data();
        let mut total = 0.0;
        for b in 0..n {
            for p in 0..plane {
                let l = labels[b * plane + p];
                if Some(l) == ignore {
                    continue;
                }
                let col = |c: usize| xd[(b * k + c) * plane + p];
                let max = (0..k).map(col).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (col(c) - max).exp()).sum::<f64>().ln();
                total += lse - col(l);
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let v = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                count,
                probs: probs.into_data(),
            },
        )?;
        Ok((v, count == 0))
    }

    /// Soft dice `1 - (2/N) sum_n sum_k p y / (p + y + eps)` over non-ignored pixels,
    /// with `probs` already softmax-normalized along channels.
    pub fn dice_loss(&mut self, probs: Var, labels: &[usize], ignore: Option<usize>, eps: f64) -> Result<Var> {
        let p = self.value(probs);
        let dims = p.dims();
        let count = validate_labels(dims, labels, ignore)?;
        let [n, k, h, w] = dims;
        let plane = h * w;
        let mut acc = 0.0;
        for b in 0..n {
            for q in 0..plane {
                let l = labels[b * plane + q];
                if Some(l) == ignore {
                    continue;
                }
                // Terms with y = 0 vanish: p * 0 / (p + eps) = 0.
                let pv = p.data()[(b * k + l) * plane + q];
                acc += pv / (pv + 1.0 + eps);
            }
        }
        let loss = if count == 0 { 0.0 } else { 1.0 - 2.0 * acc / count as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::Dice {
                probs,
                labels: labels.to_vec(),
                ignore,
                count,
                eps,
            },
        )
    }
}
