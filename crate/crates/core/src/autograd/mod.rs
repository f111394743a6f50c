//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value, the input handles
//! it consumed, and whatever intermediates its backward rule needs. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and `backward` is a single reverse sweep.

mod conv;
mod elementwise;
mod haar;
mod interp;
mod linalg;
mod loss;
mod norm;
mod pool;
mod shape;

pub use conv::{conv2d_forward, ConvGeom, Padding};
pub use interp::bilinear_forward;
pub use norm::BatchStats;
pub use pool::max_pool2d_forward;
pub use shape::{reflect_index, Gather};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for user-defined operations: `(inputs, output, d_output) -> d_inputs`.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Bilinear {
        input: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows {
        input: Var,
    },
    SoftmaxChannels {
        input: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Relu {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    HaarDwt {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        ignore: Option<usize>,
        count: usize,
        probs: Vec<f64>,
    },
    Dice {
        probs: Var,
        labels: Vec<usize>,
        ignore: Option<usize>,
        count: usize,
        eps: f64,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Bilinear { .. } => "interpolate_bilinear",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::Matmul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Sum { .. } => "sum",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::HaarDwt { .. } => "haar_dwt2",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dice { .. } => "dice_loss",
            Op::Custom { .. } => "custom",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by forward convolutions, products and projections so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn count_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// Records an input; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input with gradient tracking on.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records an input with gradient tracking off.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> crate::tensor::Dims {
        self.nodes[v.0].value.dims()
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNormTrain {
                input, gamma, beta, ..
            }
            | Op::BatchNormEval {
                input, gamma, beta, ..
            }
            | Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::MaxPool { input, .. }
            | Op::Bilinear { input }
            | Op::SoftmaxRows { input }
            | Op::SoftmaxChannels { input }
            | Op::Scale { input, .. }
            | Op::Relu { input }
            | Op::Sum { input }
            | Op::Gather { input, .. }
            | Op::Reshape { input }
            | Op::HaarDwt { input } => vec![*input],
            Op::Matmul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat { inputs } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Dice { probs, .. } => vec![*probs],
        }
    }

    /// Records a user-defined operation whose forward value is already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: CustomBackward) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Propagates d(root)/d(leaf) into every reachable leaf's gradient accumulator.
    ///
    /// Leaf gradients accumulate across calls; call [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got dims {:?}",
                self.nodes[root.0].value.dims()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (v, delta) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => conv::backward(val(*input), val(*weight), geom, g, needs(*input), needs(*weight))
                .into_iter()
                .zip([Some(*input), Some(*weight)])
                .filter_map(|(d, v)| Some((v?, d?)))
                .chain(bias.filter(|b| needs(*b)).map(|b| (b, conv::bias_grad(geom, g))))
                .collect(),
            Op::MaxPool { input, argmax } => {
                vec![(*input, pool::backward(val(*input).numel(), argmax, g))]
            }
            Op::Bilinear { input } => {
                vec![(*input, interp::backward(val(*input).dims(), node.value.dims(), g))]
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    norm::batch_norm_train_backward(val(*input).dims(), val(*gamma).data(), xhat, inv_std, g);
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    norm::batch_norm_eval_backward(val(*input), val(*gamma).data(), mean, inv_std, g);
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) =
                    norm::layer_norm_backward(val(*input).dims(), val(*gamma).data(), xhat, inv_std, g);
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::SoftmaxRows { input } => {
                vec![(*input, linalg::softmax_rows_backward(&node.value, g))]
            }
            Op::SoftmaxChannels { input } => {
                vec![(*input, linalg::softmax_channels_backward(&node.value, g))]
            }
            Op::Matmul { a, b, trans_b } => {
                let (da, db) = linalg::matmul_backward(val(*a), val(*b), *trans_b, g, needs(*a), needs(*b));
                [(*a, da), (*b, db)]
                    .into_iter()
                    .filter_map(|(v, d)| Some((v, d?)))
                    .collect()
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (dx, dw, db) = linalg::linear_backward(val(*input), val(*weight), g, needs(*input));
                let mut out = vec![(*weight, dw)];
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale { input, factor } => vec![(*input, g.iter().map(|v| v * factor).collect())],
            Op::Relu { input } => vec![(
                *input,
                g.iter()
                    .zip(val(*input).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Sum { input } => vec![(*input, vec![g[0]; val(*input).numel()])],
            Op::Concat { inputs } => shape::concat_backward(inputs, |v| val(v).dims(), g),
            Op::Gather { input, index } => vec![(*input, shape::gather_backward(val(*input).numel(), index, g))],
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::HaarDwt { input } => vec![(*input, haar::backward(val(*input).dims(), g))],
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                count,
                probs,
            } => vec![(*logits, loss::cross_entropy_backward(val(*logits).dims(), probs, labels, *ignore, *count, g[0]))],
            Op::Dice {
                probs,
                labels,
                ignore,
                count,
                eps,
            } => vec![(*probs, loss::dice_backward(val(*probs), labels, *ignore, *count, *eps, g[0]))],
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs.iter().copied().zip(backward(&ins, &node.value, g)).collect()
            }
        }
    }
}
