//! Named parameter storage and the layers built on it.
//!
//! A [`ParamStore`] owns every trainable tensor and normalization buffer. A forward
//! pass runs inside a [`Ctx`], which lazily records each parameter on the tape the
//! first time a layer asks for it and collects batch statistics for later folding
//! into the running buffers.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    by_name: HashMap<String, ParamId>,
    buffer_names: HashMap<String, BufferId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            by_name: HashMap::new(),
            buffer_names: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<BufferId> {
        let name = name.into();
        if self.by_name.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate buffer name {name}")));
        }
        let id = BufferId(self.buffers.len());
        self.buffer_names.insert(name.clone(), id);
        self.buffers.push(Buffer { name, tensor });
        Ok(id)
    }

    /// Parameter drawn from `U(-bound, bound)`.
    pub fn uniform(&mut self, name: impl Into<String>, dims: Dims, bound: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-bound..bound));
        self.add_param(name, t)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_names.get(name).copied()
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.params.len())
            .map(ParamId)
            .filter(|id| self.params[id.0].name.starts_with(prefix))
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_stats(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let m = u.momentum;
            let mean = self.buffers[u.mean.0].tensor.data_mut();
            for (r, b) in mean.iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            let var = self.buffers[u.var.0].tensor.data_mut();
            for (r, b) in var.iter_mut().zip(&u.stats.var_unbiased) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

/// Batch statistics waiting to be folded into a norm layer's running buffers.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// State carried through one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    mode: Mode,
    vars: Vec<Option<Var>>,
    updates: Vec<StatUpdate>,
}

/// What a finished forward pass leaves behind besides the tape.
pub struct Recording {
    pub vars: Vec<Option<Var>>,
    pub updates: Vec<StatUpdate>,
}

impl Recording {
    /// Gradient of every parameter touched by the pass, indexed by [`ParamId`].
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| tape.grad(v)).map(<[f64]>::to_vec))
            .collect()
    }
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            vars: vec![None; store.params.len()],
            updates: Vec::new(),
        }
    }

    /// Like [`Ctx::new`], with some parameters already present on the tape.
    pub fn bound(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, bindings: &[(ParamId, Var)]) -> Self {
        let mut ctx = Self::new(tape, store, mode);
        for &(id, v) in bindings {
            ctx.vars[id.0] = Some(v);
        }
        ctx
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.params[id.0].tensor.clone());
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn finish(self) -> Recording {
        Recording {
            vars: self.vars,
            updates: self.updates,
        }
    }
}

/// Bound `1/sqrt(fan_in)` used for every weight and bias.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: Padding,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: Padding,
        bias: bool,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv {name}: channels {cin}->{cout}, kernel {kernel:?}, stride {stride}"
            )));
        }
        let bound = fan_in_bound(cin * kernel.0 * kernel.1);
        let weight = store.uniform(format!("{name}.weight"), [cout, cin, kernel.0, kernel.1], bound)?;
        let bias = if bias {
            Some(store.uniform(format!("{name}.bias"), [1, cout, 1, 1], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        })
    }

    /// Stride-1 convolution whose output extents equal the input's.
    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: (usize, usize), bias: bool) -> Result<Self> {
        Self::new(store, name, cin, cout, kernel, 1, Padding::same(kernel.0, kernel.1), bias)
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::new(store, name, cin, cout, (1, 1), 1, Padding::default(), bias)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.kernel.0 * self.kernel.1 + if self.bias.is_some() { self.cout } else { 0 }
    }

    /// Output extents for an `h x w` input.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad;
        (
            (h + p.top + p.bottom - self.kernel.0) / self.stride + 1,
            (w + p.left + p.right - self.kernel.1) / self.stride + 1,
        )
    }

    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        (self.cout * self.cin * self.kernel.0 * self.kernel.1 * h_out * w_out) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.weight"), Tensor::full([1, c, 1, 1], 1.0))?,
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros([1, c, 1, 1]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([1, c, 1, 1]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full([1, c, 1, 1], 1.0))?,
            channels: c,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
                ctx.updates.push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: BN_MOMENTUM,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                ctx.tape.batch_norm_eval(
                    x,
                    g,
                    b,
                    store.buffer(self.running_mean).data(),
                    store.buffer(self.running_var).data(),
                    BN_EPS,
                )
            }
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl LayerNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.weight"), Tensor::full([1, c, 1, 1], 1.0))?,
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros([1, c, 1, 1]))?,
            channels: c,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Token projection over the last axis of `(N, C, T, Cin)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let bound = fan_in_bound(cin);
        let weight = store.uniform(format!("{name}.weight"), [1, 1, cout, cin], bound)?;
        let bias = if bias {
            Some(store.uniform(format!("{name}.bias"), [1, 1, 1, cout], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin + if self.bias.is_some() { self.cout } else { 0 }
    }
}

/// Convolution without bias followed by batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Result<Self> {
        let pad = Padding::uniform((kernel - 1) / 2);
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, (kernel, kernel), stride, pad, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
            relu,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        if self.relu {
            ctx.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}

/// Audits a layer stack's parameters and input through [`crate::gradcheck`].
///
/// `forward` receives a context whose parameters listed in `ids` are bound to the
/// audited tape leaves, and the input var. The output is reduced with fixed random
/// weights before differentiation.
pub fn gradcheck_module<F>(
    store: &ParamStore,
    ids: &[ParamId],
    input: Option<Tensor>,
    opts: &crate::gradcheck::GradcheckOptions,
    forward: F,
) -> Result<crate::gradcheck::GradcheckReport>
where
    F: Fn(&mut Ctx, Option<Var>) -> Result<Var>,
{
    let mut inputs: Vec<(String, Tensor)> = Vec::new();
    if let Some(x) = &input {
        inputs.push(("input".to_string(), x.clone()));
    }
    for &id in ids {
        inputs.push((store.params[id.0].name.clone(), store.param(id).clone()));
    }
    let named: Vec<(&str, Tensor)> = inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    let offset = usize::from(input.is_some());
    crate::gradcheck::gradcheck(
        |tape, vars| {
            let bindings: Vec<(ParamId, Var)> = ids.iter().copied().zip(vars[offset..].iter().copied()).collect();
            let x = (offset == 1).then(|| vars[0]);
            let out = {
                let mut ctx = Ctx::bound(tape, store, Mode::Eval, &bindings);
                forward(&mut ctx, x)?
            };
            crate::gradcheck::weighted_sum(tape, out, 0x5eed)
        },
        &named,
        opts,
    )
}
