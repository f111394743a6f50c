//! Named gradient audits for every differentiable operation, each branch, and
//! the full network.
//!
//! Operations and branches are held to a relative error of 1e-4, the network to
//! 1e-3 on a sample of entries per tensor. With `fault` set, the audited output
//! passes through an identity whose backward pass scales the gradient by
//! [`FAULT_GAIN`], which every audit must then reject.

use crate::autograd::{Gather, Padding, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::global::GlobalBranch;
use crate::gradcheck::{gradcheck, random_tensor, weighted_sum, GradcheckOptions, GradcheckReport};
use crate::local::LocalBranch;
use crate::loss::total_loss;
use crate::mdaf::Mdaf;
use crate::model::Sffnet;
use crate::nn::{gradcheck_module, ParamStore};
use crate::tensor::{Dims, Tensor};
use crate::wtfd::Wtfd;

pub const OP_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;
pub const FAULT_GAIN: f64 = 1.01;
const NETWORK_ENTRIES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditKind {
    Op,
    Branch,
    Network,
}

#[derive(Clone, Copy, Debug)]
pub struct Audit {
    pub name: &'static str,
    pub kind: AuditKind,
}

impl Audit {
    pub fn tol(&self) -> f64 {
        match self.kind {
            AuditKind::Network => NETWORK_TOL,
            _ => OP_TOL,
        }
    }
}

const fn op(name: &'static str) -> Audit {
    Audit { name, kind: AuditKind::Op }
}

const fn branch(name: &'static str) -> Audit {
    Audit {
        name,
        kind: AuditKind::Branch,
    }
}

pub const AUDITS: &[Audit] = &[
    op("conv2d"),
    op("conv2d_strided"),
    op("strip_conv"),
    op("add_mul_scale"),
    op("relu"),
    op("sum_mean"),
    op("matmul"),
    op("matmul_nt"),
    op("linear"),
    op("softmax_rows"),
    op("softmax_channels"),
    op("max_pool"),
    op("bilinear"),
    op("haar_dwt2"),
    op("window_partition"),
    op("reflect_pad_crop"),
    op("concat_slice"),
    op("reshape"),
    op("batch_norm_train"),
    op("batch_norm_eval"),
    op("layer_norm"),
    op("cross_entropy"),
    op("dice_loss"),
    op("total_loss"),
    branch("wtfd"),
    branch("global"),
    branch("local"),
    branch("mdaf"),
    Audit {
        name: "network",
        kind: AuditKind::Network,
    },
];

pub fn find(name: &str) -> Option<Audit> {
    AUDITS.iter().copied().find(|a| a.name == name)
}

/// Identity forward; backward scales the incoming gradient by [`FAULT_GAIN`].
fn inject_fault(tape: &mut Tape, out: Var) -> Result<Var> {
    let value = tape.value(out).clone().with_requires_grad(false);
    tape.custom(&[out], value, Box::new(|_, _, g| vec![g.iter().map(|x| x * FAULT_GAIN).collect()]))
}

fn finish(tape: &mut Tape, out: Var, fault: bool, seed: u64) -> Result<Var> {
    let out = if fault { inject_fault(tape, out)? } else { out };
    weighted_sum(tape, out, seed)
}

fn labels(n: usize, k: usize, seed: u64, ignore_every: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            if ignore_every > 0 && i % ignore_every == ignore_every - 1 {
                255
            } else {
                ((i as u64 * 7 + seed * 3 + i as u64 / 3) % k as u64) as usize
            }
        })
        .collect()
}

fn positive(dims: Dims, seed: u64) -> Tensor {
    random_tensor(dims, seed).map(|v| 0.5 + 0.5 * v.abs())
}

/// Runs audit `name` on inputs drawn from `seed`.
pub fn run(name: &str, seed: u64, fault: bool) -> Result<GradcheckReport> {
    let audit = find(name).ok_or_else(|| Error::Config(format!("unknown audit {name}")))?;
    let opts = GradcheckOptions {
        tol: audit.tol(),
        seed,
        ..GradcheckOptions::default()
    };
    let r = |dims: Dims, k: u64| random_tensor(dims, seed.wrapping_mul(1000).wrapping_add(k));
    let ws = seed.wrapping_add(77);

    macro_rules! check {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            gradcheck(
                |$t: &mut Tape, $v: &[Var]| {
                    let out: Var = $body?;
                    finish($t, out, fault, ws)
                },
                &$inputs,
                &opts,
            )
        };
    }

    match name {
        "conv2d" => check!(
            [("x", r([2, 2, 5, 5], 1)), ("w", r([3, 2, 3, 3], 2)), ("b", r([3, 1, 1, 1], 3))],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::uniform(1))
        ),
        "conv2d_strided" => check!(
            [("x", r([1, 2, 6, 7], 1)), ("w", r([2, 2, 4, 2], 2))],
            |t, v| t.conv2d(v[0], v[1], None, 2, Padding::same(4, 2))
        ),
        "strip_conv" => check!(
            [("x", r([1, 2, 4, 9], 1)), ("w", r([2, 2, 1, 7], 2)), ("b", r([2, 1, 1, 1], 3))],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::same(1, 7))
        ),
        "add_mul_scale" => check!([("a", r([1, 2, 3, 3], 1)), ("b", r([1, 2, 3, 3], 2))], |t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[1])?;
            t.scale(p, -1.5)
        }),
        "relu" => check!([("x", r([1, 2, 4, 4], 1))], |t, v| t.relu(v[0])),
        "sum_mean" => check!([("x", r([2, 1, 3, 3], 1))], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let a = t.sum(sq)?;
            let b = t.mean(v[0])?;
            t.add(a, b)
        }),
        "matmul" => check!([("a", r([2, 1, 3, 4], 1)), ("b", r([2, 1, 4, 2], 2))], |t, v| t.matmul(v[0], v[1])),
        "matmul_nt" => check!([("a", r([1, 2, 3, 4], 1)), ("b", r([1, 2, 5, 4], 2))], |t, v| t.matmul_nt(v[0], v[1])),
        "linear" => check!(
            [("x", r([1, 1, 5, 3], 1)), ("w", r([1, 1, 4, 3], 2)), ("b", r([1, 1, 1, 4], 3))],
            |t, v| t.linear(v[0], v[1], Some(v[2]))
        ),
        "softmax_rows" => check!([("x", r([2, 1, 3, 4], 1).map(|x| 3.0 * x))], |t, v| t.softmax_rows(v[0])),
        "softmax_channels" => check!([("x", r([2, 4, 2, 3], 1).map(|x| 3.0 * x))], |t, v| t.softmax_channels(v[0])),
        "max_pool" => check!([("x", r([1, 2, 5, 5], 1))], |t, v| {
            let a = t.max_pool2d(v[0], 2, 2, 0)?;
            let b = t.max_pool2d_same(v[0], 3)?;
            let b = t.sum(b)?;
            let a = t.sum(a)?;
            t.add(a, b)
        }),
        "bilinear" => check!([("x", r([1, 2, 3, 4], 1))], |t, v| {
            let up = t.interpolate_bilinear(v[0], 7, 5)?;
            let down = t.interpolate_bilinear(v[0], 2, 3)?;
            let (u, d) = (t.sum(up)?, t.mean(down)?);
            let tail = t.interpolate_bilinear(v[0], 6, 8)?;
            let s = t.add(u, d)?;
            let tail = weighted_sum(t, tail, 3)?;
            t.add(s, tail)
        }),
        "haar_dwt2" => check!([("x", r([2, 2, 4, 6], 1))], |t, v| t.haar_dwt2(v[0])),
        "window_partition" => check!([("x", r([1, 3, 4, 6], 1))], |t, v| {
            let g = Gather::window_partition(t.dims(v[0]), 2)?;
            t.gather(v[0], &g)
        }),
        "reflect_pad_crop" => check!([("x", r([1, 2, 5, 3], 1))], |t, v| {
            let (p, (h, w)) = t.pad_to_multiple(v[0], 4)?;
            let sq = t.mul(p, p)?;
            let c = t.crop(sq, h - 1, w)?;
            let s = t.sum(c)?;
            let p = weighted_sum(t, p, 9)?;
            t.add(s, p)
        }),
        "concat_slice" => check!([("a", r([2, 2, 3, 3], 1)), ("b", r([2, 1, 3, 3], 2))], |t, v| {
            let c = t.concat_channels(&[v[0], v[1], v[0]])?;
            t.slice_channels(c, 1, 4)
        }),
        "reshape" => check!([("x", r([1, 2, 3, 4], 1))], |t, v| {
            let y = t.reshape(v[0], [1, 1, 6, 4])?;
            t.mul(y, y)
        }),
        "batch_norm_train" => check!(
            [("x", r([3, 2, 3, 3], 1)), ("gamma", positive([1, 2, 1, 1], 2)), ("beta", r([1, 2, 1, 1], 3))],
            |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)
        ),
        "batch_norm_eval" => check!(
            [("x", r([2, 2, 3, 3], 1)), ("gamma", positive([1, 2, 1, 1], 2)), ("beta", r([1, 2, 1, 1], 3))],
            |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.7, 1.3], 1e-5)
        ),
        "layer_norm" => check!(
            [("x", r([2, 4, 2, 3], 1)), ("gamma", positive([1, 4, 1, 1], 2)), ("beta", r([1, 4, 1, 1], 3))],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)
        ),
        "cross_entropy" => {
            let l = labels(2 * 3 * 4, 3, seed, 7);
            check!([("logits", r([2, 3, 3, 4], 1).map(|x| 2.0 * x))], |t, v| t
                .cross_entropy(v[0], &l, Some(255))
                .map(|(y, _)| y))
        }
        "dice_loss" => {
            let l = labels(2 * 3 * 4, 3, seed, 5);
            check!([("probs", positive([2, 3, 3, 4], 1))], |t, v| t.dice_loss(v[0], &l, Some(255), 1e-6))
        }
        "total_loss" => {
            let l = labels(3 * 4, 4, seed, 0);
            check!([("logits", r([1, 4, 3, 4], 1))], |t, v| total_loss(t, v[0], &l, Some(255), 1e-6).map(|(y, _)| y))
        }
        "wtfd" => {
            let mut s = ParamStore::new(seed);
            let m = Wtfd::new(&mut s, "wtfd", 3, 4)?;
            module(&s, "wtfd", r([2, 3, 6, 6], 1), &opts, fault, |ctx, x| {
                let f = m.forward(ctx, x)?;
                let parts = [f.low, f.high].into_iter().flatten().collect::<Vec<_>>();
                ctx.tape.concat_channels(&parts)
            })
        }
        "global" => {
            let mut s = ParamStore::new(seed);
            let g = GlobalBranch::new(&mut s, "global", 3, 4, 2, 2)?;
            module(&s, "global", r([2, 3, 8, 8], 1), &opts, fault, |ctx, x| g.forward(ctx, x))
        }
        "local" => {
            let mut s = ParamStore::new(seed);
            let l = LocalBranch::new(&mut s, "local", 3, 4)?;
            module(&s, "local", r([2, 3, 8, 8], 1), &opts, fault, |ctx, x| l.forward(ctx, x))
        }
        "mdaf" => {
            let mut s = ParamStore::new(seed);
            let m = Mdaf::new(&mut s, "mdaf", 4, Some(2.0))?;
            module(&s, "mdaf", r([1, 8, 3, 3], 1), &opts, fault, |ctx, x| {
                let fs = ctx.tape.slice_channels(x, 0, 4)?;
                let ff = ctx.tape.slice_channels(x, 4, 8)?;
                m.forward(ctx, fs, ff)
            })
        }
        "network" => {
            let (net, store) = Sffnet::build(&ModelConfig::micro(), seed)?;
            let opts = opts.with_max_entries(NETWORK_ENTRIES);
            module(&store, "", r([1, 3, 16, 16], 1), &opts, fault, |ctx, x| net.forward(ctx, x))
        }
        _ => unreachable!("every registered audit has a case"),
    }
}

fn module<F>(
    store: &ParamStore,
    prefix: &str,
    input: Tensor,
    opts: &GradcheckOptions,
    fault: bool,
    forward: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut crate::nn::Ctx, Var) -> Result<Var>,
{
    let ids = store.ids_with_prefix(prefix);
    gradcheck_module(store, &ids, Some(input), opts, |ctx, x| {
        let out = forward(ctx, x.expect("module audits take an input"))?;
        if fault {
            inject_fault(ctx.tape, out)
        } else {
            Ok(out)
        }
    })
}
