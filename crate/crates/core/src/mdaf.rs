//! Multiscale dual-representation alignment: each input is layer-normalized,
//! mapped by strip convolutions at three scales and projected to Q/K/V; each
//! domain's queries then attend over the other domain's keys and values.

use crate::autograd::{Gather, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm2d, ParamStore};

pub const STRIP_SCALES: [usize; 3] = [7, 11, 21];

/// Largest token count (H*W) accepted by the dense cross-attention.
pub const MAX_TOKENS: usize = 4096;

#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// A `1 x k` and a `k x 1` convolution applied in parallel and summed.
#[derive(Clone, Debug)]
pub struct StripPair {
    pub row: Conv2d,
    pub col: Conv2d,
}

impl StripPair {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, k: usize) -> Result<Self> {
        Ok(Self {
            row: Conv2d::same(store, &format!("{name}.row"), c, c, (1, k), true)?,
            col: Conv2d::same(store, &format!("{name}.col"), c, c, (k, 1), true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let a = self.row.forward(ctx, x)?;
        let b = self.col.forward(ctx, x)?;
        ctx.tape.add(a, b)
    }

    pub fn num_params(&self) -> usize {
        self.row.num_params() + self.col.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct MultiscaleMap {
    pub ln: LayerNorm2d,
    pub strips: Vec<StripPair>,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
}

impl MultiscaleMap {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let strips = STRIP_SCALES
            .iter()
            .map(|&k| StripPair::new(store, &format!("{name}.strip{k}"), c, k))
            .collect::<Result<_>>()?;
        Ok(Self {
            ln: LayerNorm2d::new(store, &format!("{name}.ln"), c)?,
            strips,
            q: Conv2d::pointwise(store, &format!("{name}.q"), c, c, true)?,
            k: Conv2d::pointwise(store, &format!("{name}.k"), c, c, true)?,
            v: Conv2d::pointwise(store, &format!("{name}.v"), c, c, true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Qkv> {
        let n = self.ln.forward(ctx, x)?;
        let mut scales = Vec::with_capacity(self.strips.len());
        for s in &self.strips {
            scales.push(s.forward(ctx, n)?);
        }
        let m = ctx.tape.add_all(&scales)?;
        Ok(Qkv {
            q: self.q.forward(ctx, m)?,
            k: self.k.forward(ctx, m)?,
            v: self.v.forward(ctx, m)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.ln.num_params()
            + self.strips.iter().map(StripPair::num_params).sum::<usize>()
            + self.q.num_params()
            + self.k.num_params()
            + self.v.num_params()
    }
}

/// `softmax(q k^T / temperature) v` over token layouts `(N, 1, T, C)`.
/// Returns the mixed tokens and the attention weights `(N, 1, T, T)`.
pub fn attend_tokens(ctx: &mut Ctx, q: Var, k: Var, v: Var, temperature: f64) -> Result<(Var, Var)> {
    let scores = ctx.tape.matmul_nt(q, k)?;
    let scores = ctx.tape.scale(scores, 1.0 / temperature)?;
    let attn = ctx.tape.softmax_rows(scores)?;
    Ok((ctx.tape.matmul(attn, v)?, attn))
}

#[derive(Clone, Debug)]
pub struct Mdaf {
    pub spatial: MultiscaleMap,
    pub frequency: MultiscaleMap,
    /// Projects frequency-queried spatial attention to `C/2` channels.
    pub out_spatial: Conv2d,
    /// Projects spatial-queried frequency attention to `C/2` channels.
    pub out_frequency: Conv2d,
    pub channels: usize,
    pub temperature: Option<f64>,
}

/// Intermediate values of one alignment pass, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct MdafTrace {
    pub out: Var,
    pub f1: Var,
    pub f2: Var,
    pub attn1: Var,
    pub attn2: Var,
}

impl Mdaf {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, temperature: Option<f64>) -> Result<Self> {
        if c < 2 || c % 2 != 0 {
            return Err(Error::Config(format!("alignment width must be even, got {c}")));
        }
        Ok(Self {
            spatial: MultiscaleMap::new(store, &format!("{name}.spatial"), c)?,
            frequency: MultiscaleMap::new(store, &format!("{name}.frequency"), c)?,
            out_spatial: Conv2d::pointwise(store, &format!("{name}.out_spatial"), c, c / 2, true)?,
            out_frequency: Conv2d::pointwise(store, &format!("{name}.out_frequency"), c, c / 2, true)?,
            channels: c,
            temperature,
        })
    }

    /// `softmax(Q_other K_mine^T / t) V_mine`, projected by `out`, as a `(N, C/2, H, W)` map.
    pub fn daf_attend(&self, ctx: &mut Ctx, mine: &Qkv, other_q: Var, out: &Conv2d) -> Result<(Var, Var)> {
        let d = ctx.tape.dims(mine.k);
        if ctx.tape.dims(other_q) != d {
            return Err(Error::shape(
                "daf_attend",
                format!("query dims {:?} vs key dims {d:?}", ctx.tape.dims(other_q)),
            ));
        }
        let [_, c, h, w] = d;
        let t = self.temperature.unwrap_or(((c * h * w) as f64).sqrt());
        let tok = Gather::to_tokens(d);
        let q = ctx.tape.gather(other_q, &tok)?;
        let k = ctx.tape.gather(mine.k, &tok)?;
        let v = ctx.tape.gather(mine.v, &tok)?;
        let (mixed, attn) = attend_tokens(ctx, q, k, v, t)?;
        let map = ctx.tape.gather(mixed, &Gather::from_tokens(d))?;
        Ok((out.forward(ctx, map)?, attn))
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, fs: Var, ff: Var) -> Result<MdafTrace> {
        let d = ctx.tape.dims(fs);
        if ctx.tape.dims(ff) != d {
            return Err(Error::shape(
                "mdaf",
                format!("spatial {d:?} vs frequency {:?}", ctx.tape.dims(ff)),
            ));
        }
        if d[2] * d[3] > MAX_TOKENS {
            return Err(Error::Config(format!(
                "cross-attention over {}x{} = {} tokens exceeds the {MAX_TOKENS}-token limit",
                d[2],
                d[3],
                d[2] * d[3]
            )));
        }
        let t1 = self.spatial.forward(ctx, fs)?;
        let t2 = self.frequency.forward(ctx, ff)?;
        let (f1, attn1) = self.daf_attend(ctx, &t1, t2.q, &self.out_spatial)?;
        let (f2, attn2) = self.daf_attend(ctx, &t2, t1.q, &self.out_frequency)?;
        let out = ctx.tape.concat_channels(&[f1, f2])?;
        Ok(MdafTrace {
            out,
            f1,
            f2,
            attn1,
            attn2,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, fs: Var, ff: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, fs, ff)?.out)
    }

    pub fn num_params(&self) -> usize {
        self.spatial.num_params()
            + self.frequency.num_params()
            + self.out_spatial.num_params()
            + self.out_frequency.num_params()
    }
}
