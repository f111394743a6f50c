//! Central-difference audit of reverse-mode gradients.
//!
//! The audited function receives a fresh tape and the inputs as tracked leaves and must
//! return a scalar. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Audit at most this many entries per input (sampled without replacement).
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Skip entries whose one-sided differences disagree (a kink inside `[x-h, x+h]`).
    pub skip_kinks: bool,
    /// Entries failing at `step` are re-estimated at `step / sqrt(wide_factor)`,
    /// `step / wide_factor` and `step * wide_factor`.
    pub wide_factor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_entries: None,
            seed: 0,
            skip_kinks: true,
            wide_factor: 100.0,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_entries(mut self, n: usize) -> Self {
        self.max_entries = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Entries whose step-`h` estimate misses but a wider step confirms the
    /// analytic value to within tolerance plus the measured roundoff of `f`
    /// (tiny derivatives that the base step cannot resolve).
    pub below_noise: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry with its analytic and numeric derivative.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Audits `f` with respect to every tensor in `inputs`.
pub fn gradcheck<F>(f: F, inputs: &[(&str, Tensor)], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let base = tape.value(root).item()?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let again = eval(&f, &values)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Audit(format!(
            "function is not deterministic: {base:e} then {again:e}"
        )));
    }

    let h = opts.step;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let len = values[k].numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < len => {
                let mut idx = sample(&mut rng, len, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let mut report = InputReport {
            name: (*name).to_string(),
            checked: 0,
            skipped_kinks: 0,
            below_noise: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        let mut probes = Vec::with_capacity(entries.len());
        for i in entries {
            let x0 = values[k].data()[i];
            values[k].data_mut()[i] = x0 + h;
            let fp = eval(&f, &values)?;
            values[k].data_mut()[i] = x0 - h;
            let fm = eval(&f, &values)?;
            values[k].data_mut()[i] = x0;
            let (fwd, bwd) = ((fp - base) / h, (base - fm) / h);
            let spread = (fwd - bwd).abs();
            let kink = opts.skip_kinks && spread > 1e-6 && spread > 0.05 * fwd.abs().max(bwd.abs());
            probes.push((i, fp, fm, kink));
        }
        // Over a step of 1e-5 the second difference of a smooth f is roundoff, so
        // its largest value bounds the error in evaluating f.
        let roundoff = probes
            .iter()
            .filter(|p| !p.3)
            .map(|&(_, fp, fm, _)| (fp - 2.0 * base + fm).abs())
            .fold(0.0, f64::max);
        for (i, fp, fm, kink) in probes {
            if kink {
                report.skipped_kinks += 1;
                continue;
            }
            let a = analytic[k][i];
            let mut numeric = (fp - fm) / (2.0 * h);
            let mut e = rel_err(a, numeric);
            if e > opts.tol {
                // A kink just inside the base step bends one side only; narrower
                // steps usually land on the smooth piece.
                let x0 = values[k].data()[i];
                for div in [opts.wide_factor.sqrt(), opts.wide_factor] {
                    let narrow_h = h / div;
                    values[k].data_mut()[i] = x0 + narrow_h;
                    let fp1 = eval(&f, &values)?;
                    values[k].data_mut()[i] = x0 - narrow_h;
                    let fm1 = eval(&f, &values)?;
                    values[k].data_mut()[i] = x0;
                    let narrow = (fp1 - fm1) / (2.0 * narrow_h);
                    if rel_err(a, narrow) < e {
                        numeric = narrow;
                        e = rel_err(a, narrow);
                    }
                    if e <= opts.tol {
                        break;
                    }
                }
            }
            if e > opts.tol {
                // A wider step divides the roundoff by `wide_factor`; what remains is
                // allowed on top of the relative tolerance. A wrong analytic value of
                // any resolvable size still disagrees.
                let x0 = values[k].data()[i];
                let wide_h = h * opts.wide_factor;
                values[k].data_mut()[i] = x0 + wide_h;
                let fp2 = eval(&f, &values)?;
                values[k].data_mut()[i] = x0 - wide_h;
                let fm2 = eval(&f, &values)?;
                values[k].data_mut()[i] = x0;
                let wide = (fp2 - fm2) / (2.0 * wide_h);
                if (a - wide).abs() <= opts.tol * a.abs().max(wide.abs()) + roundoff / wide_h {
                    report.below_noise += 1;
                    continue;
                }
            }
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((i, a, numeric));
            }
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        inputs: reports,
        tol: opts.tol,
    })
}

/// Deterministic pseudo-random tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(dims: crate::tensor::Dims, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that every
/// output entry contributes a distinct, well-scaled gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random_tensor(tape.dims(out), seed));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sum_of_squares_passes() {
        let x = random_tensor([1, 1, 3, 5], 1);
        let report = gradcheck(
            |t, v| {
                let s = t.softmax_rows(v[0])?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            },
            &[("x", x)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.inputs[0].checked, 15);
    }

    #[test]
    fn constant_function_passes() {
        let x = random_tensor([1, 1, 2, 2], 2);
        let report = gradcheck(
            |t, v| {
                let z = t.scale(v[0], 0.0)?;
                t.sum(z)
            },
            &[("x", x)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn doubled_backward_fails() {
        let x = random_tensor([1, 1, 2, 3], 3);
        let report = gradcheck(
            |t, v| {
                let val = t.value(v[0]).map(|x| x * x);
                let sq = t.custom(
                    &[v[0]],
                    val,
                    Box::new(|ins, _, g| {
                        // true derivative is 2x; report 4x
                        vec![ins[0].data().iter().zip(g).map(|(x, g)| 4.0 * x * g).collect()]
                    }),
                )?;
                t.sum(sq)
            },
            &[("x", x)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_err() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn wrong_tiny_gradient_beside_large_value_still_fails() {
        let x = random_tensor([1, 1, 1, 3], 10);
        let report = gradcheck(
            |t, v| {
                let val = t.value(v[0]).map(|x| 1e-7 * x * x);
                let sq = t.custom(
                    &[v[0]],
                    val,
                    Box::new(|ins, _, g| vec![ins[0].data().iter().zip(g).map(|(x, g)| 4e-7 * x * g).collect()]),
                )?;
                let big = t.constant(Tensor::full([1, 1, 1, 3], 1e3));
                let s = t.add(sq, big)?;
                t.sum(s)
            },
            &[("x", x)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed(), "{report:?}");
    }

    #[test]
    fn nondeterminism_is_audit_error() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let err = gradcheck(
            |t, v| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let s = t.scale(v[0], 1.0 + k)?;
                t.sum(s)
            },
            &[("x", random_tensor([1, 1, 1, 2], 4))],
            &GradcheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Audit(_)));
    }

    #[test]
    fn conv_weight_on_two_channel_input() {
        let x = random_tensor([1, 2, 5, 5], 5);
        let w = random_tensor([3, 2, 3, 3], 6);
        let b = random_tensor([3, 1, 1, 1], 7);
        let report = gradcheck(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, crate::autograd::Padding::uniform(1))?;
                weighted_sum(t, y, 8)
            },
            &[("x", x), ("w", w), ("b", b)],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sampling_limits_entries() {
        let x = random_tensor([1, 1, 4, 4], 9);
        let report = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[("x", x)],
            &GradcheckOptions::default().with_max_entries(5),
        )
        .unwrap();
        assert_eq!(report.inputs[0].checked, 5);
    }
}
