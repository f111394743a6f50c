//! Local branch: a direct two-conv path alongside a bottleneck / spatial pyramid
//! pooling / bottleneck path, fused by a 1x1 projection.

use crate::autograd::{Padding, Var};
use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, ConvBn, Ctx, ParamStore};

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

/// 1x1 then same-size 3x3.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl Bottleneck {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, mid: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::pointwise(store, &format!("{name}.reduce"), cin, mid, true)?,
            expand: Conv2d::same(store, &format!("{name}.expand"), mid, cout, (3, 3), true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.reduce.forward(ctx, x)?;
        self.expand.forward(ctx, y)
    }

    pub fn num_params(&self) -> usize {
        self.reduce.num_params() + self.expand.num_params()
    }
}

/// Channel concatenation of same-size max pools (5, 9, 13) and the input: `4C` channels.
pub fn spp(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(4);
    for k in SPP_KERNELS {
        parts.push(ctx.tape.max_pool2d_same(x, k)?);
    }
    parts.push(x);
    ctx.tape.concat_channels(&parts)
}

#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub direct_a: Conv2d,
    pub direct_b: Conv2d,
    pub spp_in: ConvBn,
    pub bottleneck_in: Bottleneck,
    pub bottleneck_out: Bottleneck,
    pub fuse: Conv2d,
    pub bn: BatchNorm2d,
}

impl LocalBranch {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cm: usize) -> Result<Self> {
        let half = (cm / 2).max(1);
        Ok(Self {
            direct_a: Conv2d::same(store, &format!("{name}.direct_a"), cin, cm, (3, 3), true)?,
            direct_b: Conv2d::new(store, &format!("{name}.direct_b"), cm, cm, (3, 3), 2, Padding::uniform(1), true)?,
            spp_in: ConvBn::new(store, &format!("{name}.spp_in"), cin, cm, 3, 2, false)?,
            bottleneck_in: Bottleneck::new(store, &format!("{name}.bottleneck_in"), cm, half, cm)?,
            bottleneck_out: Bottleneck::new(store, &format!("{name}.bottleneck_out"), 4 * cm, 2 * cm, cm)?,
            fuse: Conv2d::pointwise(store, &format!("{name}.fuse"), 2 * cm, cm, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cm)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let d = self.direct_a.forward(ctx, x)?;
        let d = self.direct_b.forward(ctx, d)?;
        let s = self.spp_in.forward(ctx, x)?;
        let s = self.bottleneck_in.forward(ctx, s)?;
        let s = spp(ctx, s)?;
        let s = self.bottleneck_out.forward(ctx, s)?;
        let cat = ctx.tape.concat_channels(&[d, s])?;
        let y = self.fuse.forward(ctx, cat)?;
        self.bn.forward(ctx, y)
    }

    pub fn num_params(&self) -> usize {
        self.direct_a.num_params()
            + self.direct_b.num_params()
            + self.spp_in.num_params()
            + self.bottleneck_in.num_params()
            + self.bottleneck_out.num_params()
            + self.fuse.num_params()
            + self.bn.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{random_tensor, GradcheckOptions};
    use crate::nn::{gradcheck_module, Mode};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn eval<T>(store: &ParamStore, f: impl FnOnce(&mut Ctx) -> T) -> T {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
        f(&mut ctx)
    }

    fn spp_value(x: Tensor) -> Tensor {
        let s = ParamStore::new(0);
        eval(&s, |ctx| {
            let v = ctx.input(x);
            let y = spp(ctx, v).unwrap();
            ctx.tape.value(y).clone()
        })
    }

    #[test]
    fn spp_of_constant_is_constant() {
        let y = spp_value(Tensor::full([1, 2, 5, 7], 4.5));
        assert_eq!(y.dims(), [1, 8, 5, 7]);
        assert!(y.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn spp_bright_pixel_squares() {
        let mut x = Tensor::zeros([1, 1, 15, 15]);
        x.set(0, 0, 7, 7, 1.0);
        let y = spp_value(x.clone());
        for (group, k) in SPP_KERNELS.iter().enumerate() {
            let r = (k / 2) as isize;
            for i in 0..15 {
                for j in 0..15 {
                    let inside = (i as isize - 7).abs() <= r && (j as isize - 7).abs() <= r;
                    assert_eq!(y.at(0, group, i, j), if inside { 1.0 } else { 0.0 });
                }
            }
        }
        assert_eq!(y.channels(3, 4).unwrap(), x);
    }

    #[test]
    fn spp_widths() {
        assert_eq!(spp_value(Tensor::zeros([1, 8, 3, 3])).dims(), [1, 32, 3, 3]);
    }

    #[test]
    fn identity_bottleneck_passes_through() {
        let mut s = ParamStore::new(0);
        let b = Bottleneck::new(&mut s, "b", 3, 3, 3).unwrap();
        for conv in [&b.reduce, &b.expand] {
            let [co, ci, kh, kw] = s.param(conv.weight).dims();
            let w = s.param_mut(conv.weight);
            w.data_mut().fill(0.0);
            for c in 0..co.min(ci) {
                w.set(c, c, kh / 2, kw / 2, 1.0);
            }
            s.param_mut(conv.bias.unwrap()).data_mut().fill(0.0);
        }
        let x = random_tensor([2, 3, 5, 4], 1);
        let y = eval(&s, |ctx| {
            let v = ctx.input(x.clone());
            let y = b.forward(ctx, v).unwrap();
            ctx.tape.value(y).clone()
        });
        assert_eq!(y, x);
    }

    #[test]
    fn output_dims_and_zero_response() {
        let mut s = ParamStore::new(0);
        let l = LocalBranch::new(&mut s, "l", 6, 4).unwrap();
        for p in s.params_mut() {
            if p.name.ends_with(".bias") && !p.name.contains("bn") {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let (dims, zero) = eval(&s, |ctx| {
            let x = ctx.input(random_tensor([1, 6, 16, 16], 2));
            let y = l.forward(ctx, x).unwrap();
            let z = ctx.input(Tensor::zeros([1, 6, 16, 16]));
            let yz = l.forward(ctx, z).unwrap();
            (ctx.tape.dims(y), ctx.tape.value(yz).clone())
        });
        assert_eq!(dims, [1, 4, 8, 8]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcheck_passes() {
        let mut s = ParamStore::new(3);
        let l = LocalBranch::new(&mut s, "l", 3, 4).unwrap();
        let ids = s.ids_with_prefix("l");
        let report = gradcheck_module(
            &s,
            &ids,
            Some(random_tensor([2, 3, 8, 8], 4)),
            &GradcheckOptions::default(),
            |ctx, x| l.forward(ctx, x.unwrap()),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #[test]
        fn spp_keeps_extent_and_dominates_identity(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
            let x = random_tensor([1, 2, h, w], seed);
            let y = spp_value(x.clone());
            prop_assert_eq!(y.dims(), [1, 8, h, w]);
            for g in 0..3 {
                for c in 0..2 {
                    for i in 0..h {
                        for j in 0..w {
                            prop_assert!(y.at(0, 2 * g + c, i, j) >= x.at(0, c, i, j));
                        }
                    }
                }
            }
        }

        #[test]
        fn local_halves_even_extents(h in 1usize..6, w in 1usize..6) {
            let mut s = ParamStore::new(0);
            let l = LocalBranch::new(&mut s, "l", 2, 2).unwrap();
            let dims = eval(&s, |ctx| {
                let x = ctx.input(random_tensor([1, 2, 2 * h, 2 * w], 1));
                let y = l.forward(ctx, x).unwrap();
                ctx.tape.dims(y)
            });
            prop_assert_eq!(dims, [1, 2, h, w]);
        }
    }
}
