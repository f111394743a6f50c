//! Training objective: pixelwise cross-entropy plus soft dice on softmax probabilities.

use crate::autograd::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    /// Every pixel carried the ignore label; both terms are then 0.
    pub all_ignored: bool,
}

/// Records `ce + dice` for `logits (N, K, H, W)` against `labels (N*H*W)`.
pub fn total_loss(tape: &mut Tape, logits: Var, labels: &[usize], ignore: Option<usize>, dice_eps: f64) -> Result<(Var, LossValue)> {
    let (ce, all_ignored) = tape.cross_entropy(logits, labels, ignore)?;
    let probs = tape.softmax_channels(logits)?;
    let dice = tape.dice_loss(probs, labels, ignore, dice_eps)?;
    let total = tape.add(ce, dice)?;
    let value = LossValue {
        total: tape.value(total).item()?,
        ce: tape.value(ce).item()?,
        dice: tape.value(dice).item()?,
        all_ignored,
    };
    Ok((total, value))
}
