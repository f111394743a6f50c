//! Wavelet feature decomposer: 1x1 pre-projection, one Haar level, then separate
//! projections of the approximation band (low frequency) and the stacked detail
//! bands (high frequency).

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, ParamStore};

/// 1x1 projection to `C_m` channels followed by batch norm.
#[derive(Clone, Debug)]
pub struct BandProjection {
    pub proj: Conv2d,
    pub bn: BatchNorm2d,
}

impl BandProjection {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cm: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::pointwise(store, &format!("{name}_proj"), cin, cm, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}_bn"), cm)?,
        })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.proj.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params() + self.bn.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct Wtfd {
    pub pre_proj: Conv2d,
    pub low: Option<BandProjection>,
    pub high: Option<BandProjection>,
    pub channels: usize,
}

/// Low- and high-frequency features, each `(N, C_m, H/2, W/2)`; a band whose
/// projection was not built is `None`.
#[derive(Clone, Copy, Debug)]
pub struct FrequencyFeatures {
    pub low: Option<Var>,
    pub high: Option<Var>,
}

impl Wtfd {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cm: usize) -> Result<Self> {
        Self::with_bands(store, name, cin, cm, true, true)
    }

    pub fn with_bands(store: &mut ParamStore, name: &str, cin: usize, cm: usize, low: bool, high: bool) -> Result<Self> {
        if !low && !high {
            return Err(Error::Config("wavelet decomposer needs at least one band".into()));
        }
        let pre_proj = Conv2d::pointwise(store, &format!("{name}.pre_proj"), cin, cin, true)?;
        let low = if low {
            Some(BandProjection::new(store, &format!("{name}.low"), cin, cm)?)
        } else {
            None
        };
        let high = if high {
            Some(BandProjection::new(store, &format!("{name}.high"), 3 * cin, cm)?)
        } else {
            None
        };
        Ok(Self {
            pre_proj,
            low,
            high,
            channels: cin,
        })
    }

    /// Odd extents are reflect-padded by one row/column before the transform.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<FrequencyFeatures> {
        let (x, _) = ctx.tape.pad_to_multiple(x, 2)?;
        let p = self.pre_proj.forward(ctx, x)?;
        let bands = ctx.tape.haar_dwt2(p)?;
        let c = self.channels;
        let low = match &self.low {
            Some(b) => {
                let a = ctx.tape.slice_channels(bands, 0, c)?;
                Some(b.forward(ctx, a)?)
            }
            None => None,
        };
        let high = match &self.high {
            Some(b) => {
                let hvd = ctx.tape.slice_channels(bands, c, 4 * c)?;
                Some(b.forward(ctx, hvd)?)
            }
            None => None,
        };
        Ok(FrequencyFeatures { low, high })
    }

    pub fn num_params(&self) -> usize {
        self.pre_proj.num_params()
            + self.low.as_ref().map_or(0, BandProjection::num_params)
            + self.high.as_ref().map_or(0, BandProjection::num_params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{random_tensor, GradcheckOptions};
    use crate::nn::{gradcheck_module, Mode};
    use crate::tensor::Tensor;
    use crate::wavelet::haar_dwt2;

    fn run(store: &ParamStore, w: &Wtfd, x: Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
        let xv = ctx.input(x);
        let f = w.forward(&mut ctx, xv).unwrap();
        (ctx.tape.value(f.low.unwrap()).clone(), ctx.tape.value(f.high.unwrap()).clone())
    }

    fn set_identity(store: &mut ParamStore, conv: &Conv2d) {
        let t = store.param_mut(conv.weight);
        let [co, ci, _, _] = t.dims();
        for o in 0..co {
            for i in 0..ci {
                t.set(o, i, 0, 0, if o == i { 1.0 } else { 0.0 });
            }
        }
        if let Some(b) = conv.bias {
            store.param_mut(b).data_mut().fill(0.0);
        }
    }

    #[test]
    fn output_dims() {
        let mut s = ParamStore::new(0);
        let w = Wtfd::new(&mut s, "wtfd", 12, 12).unwrap();
        let (l, h) = run(&s, &w, random_tensor([1, 12, 16, 16], 1));
        assert_eq!(l.dims(), [1, 12, 8, 8]);
        assert_eq!(h.dims(), [1, 12, 8, 8]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut s = ParamStore::new(0);
        let w = Wtfd::new(&mut s, "wtfd", 3, 4).unwrap();
        s.param_mut(w.pre_proj.bias.unwrap()).data_mut().fill(0.0);
        let (l, h) = run(&s, &w, Tensor::zeros([2, 3, 6, 6]));
        assert!(l.data().iter().chain(h.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projections_expose_bands() {
        let mut s = ParamStore::new(0);
        let w = Wtfd::new(&mut s, "wtfd", 2, 2).unwrap();
        set_identity(&mut s, &w.pre_proj);
        set_identity(&mut s, &w.low.as_ref().unwrap().proj);
        let x = random_tensor([1, 2, 8, 8], 5);
        let q = haar_dwt2(&x).unwrap();
        let (l, _) = run(&s, &w, x);
        // eval BN with fresh running stats scales by 1/sqrt(1 + eps)
        let k = 1.0 / (1.0 + crate::nn::BN_EPS).sqrt();
        for (a, b) in l.data().iter().zip(q.a.data()) {
            assert!((a - k * b).abs() < 1e-14);
        }
    }

    #[test]
    fn odd_extent_is_padded() {
        let mut s = ParamStore::new(0);
        let w = Wtfd::new(&mut s, "wtfd", 2, 2).unwrap();
        let (l, _) = run(&s, &w, random_tensor([1, 2, 7, 5], 2));
        assert_eq!(l.dims(), [1, 2, 4, 3]);
    }

    #[test]
    fn single_band_builds_only_its_projection() {
        let mut s = ParamStore::new(0);
        let full = Wtfd::new(&mut s, "a", 3, 4).unwrap();
        let low = Wtfd::with_bands(&mut s, "b", 3, 4, true, false).unwrap();
        assert_eq!(full.num_params() - low.num_params(), 3 * 3 * 4 + 2 * 4);
        assert!(Wtfd::with_bands(&mut s, "c", 3, 4, false, false).is_err());
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &s, Mode::Eval);
        let x = ctx.input(random_tensor([1, 3, 4, 4], 1));
        let f = low.forward(&mut ctx, x).unwrap();
        assert!(f.low.is_some() && f.high.is_none());
    }

    #[test]
    fn gradcheck_passes() {
        let mut s = ParamStore::new(3);
        let w = Wtfd::new(&mut s, "wtfd", 3, 4).unwrap();
        let ids = s.ids_with_prefix("wtfd");
        let report = gradcheck_module(
            &s,
            &ids,
            Some(random_tensor([2, 3, 6, 6], 4)),
            &GradcheckOptions::default(),
            |ctx, x| {
                let f = w.forward(ctx, x.unwrap())?;
                ctx.tape.concat_channels(&[f.low.unwrap(), f.high.unwrap()])
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
