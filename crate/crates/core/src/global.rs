//! Global branch: stride-2 downsampling, windowed self-attention, and
//! inter-window mixing by a square plus two strip convolutions in place of
//! shifted windows.

use crate::autograd::{Gather, Var};
use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Linear, ParamStore};

/// Single- or multi-head self-attention applied independently inside each window.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl WindowAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), c, c, true)?,
            k: Linear::new(store, &format!("{name}.k"), c, c, true)?,
            v: Linear::new(store, &format!("{name}.v"), c, c, true)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, true)?,
            heads,
            channels: c,
        })
    }

    /// `tokens (B, 1, T, C)`, one window per batch entry. Returns the projected
    /// output and the attention weights `(B, heads, T, T)`.
    pub fn forward(&self, ctx: &mut Ctx, tokens: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(ctx, tokens)?;
        let k = self.k.forward(ctx, tokens)?;
        let v = self.v.forward(ctx, tokens)?;
        let split = Gather::split_heads(ctx.tape.dims(q), self.heads)?;
        let (q, k, v) = if self.heads == 1 {
            (q, k, v)
        } else {
            (ctx.tape.gather(q, &split)?, ctx.tape.gather(k, &split)?, ctx.tape.gather(v, &split)?)
        };
        let dh = self.channels / self.heads;
        let scores = ctx.tape.matmul_nt(q, k)?;
        let scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = ctx.tape.softmax_rows(scores)?;
        let mixed = ctx.tape.matmul(attn, v)?;
        let mixed = if self.heads == 1 {
            mixed
        } else {
            ctx.tape.gather(mixed, &split.inverse())?
        };
        Ok((self.out.forward(ctx, mixed)?, attn))
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.out.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub down: Conv2d,
    pub attn: WindowAttention,
    pub square: Conv2d,
    pub row: Conv2d,
    pub col: Conv2d,
    pub fuse: Conv2d,
    pub bn: BatchNorm2d,
    pub window: usize,
}

impl GlobalBranch {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cm: usize, window: usize, heads: usize) -> Result<Self> {
        let ws = window;
        Ok(Self {
            down: Conv2d::new(store, &format!("{name}.down"), cin, cm, (3, 3), 2, crate::autograd::Padding::uniform(1), true)?,
            attn: WindowAttention::new(store, &format!("{name}.attn"), cm, heads)?,
            square: Conv2d::same(store, &format!("{name}.square"), cm, cm, (ws, ws), true)?,
            row: Conv2d::same(store, &format!("{name}.row"), cm, cm, (1, ws), true)?,
            col: Conv2d::same(store, &format!("{name}.col"), cm, cm, (ws, 1), true)?,
            fuse: Conv2d::pointwise(store, &format!("{name}.fuse"), 2 * cm, cm, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cm)?,
            window,
        })
    }

    /// Windowed attention over a `(N, C, H, W)` map; extents that are not multiples
    /// of the window are reflect-padded and cropped back afterwards.
    pub fn window_attention(&self, ctx: &mut Ctx, d: Var) -> Result<(Var, Var)> {
        let (padded, (h, w)) = ctx.tape.pad_to_multiple(d, self.window)?;
        let pd = ctx.tape.dims(padded);
        let tiles = ctx.tape.gather(padded, &Gather::window_partition(pd, self.window)?)?;
        let (att, weights) = self.attn.forward(ctx, tiles)?;
        let back = ctx.tape.gather(att, &Gather::window_unpartition(pd, self.window)?)?;
        Ok((ctx.tape.crop(back, h, w)?, weights))
    }

    /// Sum of the square and the two strip convolutions, all same-size.
    pub fn mix(&self, ctx: &mut Ctx, fp: Var) -> Result<Var> {
        let a = self.square.forward(ctx, fp)?;
        let b = self.row.forward(ctx, fp)?;
        let c = self.col.forward(ctx, fp)?;
        ctx.tape.add_all(&[a, b, c])
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let d = self.down.forward(ctx, x)?;
        let (fp, _) = self.window_attention(ctx, d)?;
        let mix = self.mix(ctx, fp)?;
        let cat = ctx.tape.concat_channels(&[d, mix])?;
        let y = self.fuse.forward(ctx, cat)?;
        self.bn.forward(ctx, y)
    }

    pub fn num_params(&self) -> usize {
        self.down.num_params()
            + self.attn.num_params()
            + self.square.num_params()
            + self.row.num_params()
            + self.col.num_params()
            + self.fuse.num_params()
            + self.bn.num_params()
    }
}
