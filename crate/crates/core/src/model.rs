//! Two-stage network: a plain conv backbone and multi-scale fusion, then
//! global/local/frequency mapping branches, pairwise alignment and a
//! segmentation head.

use crate::autograd::Var;
use crate::config::{FusionMode, ModelConfig, Pairing};
use crate::error::{Error, Result};
use crate::global::GlobalBranch;
use crate::local::LocalBranch;
use crate::mdaf::Mdaf;
use crate::nn::{Conv2d, ConvBn, Ctx, ParamStore};
use crate::wtfd::Wtfd;

/// Backbone outputs at strides 2, 4, 8 and 16 of the input with widths C, 2C, 4C, 8C.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    pub x1: Var,
    pub x2: Var,
    pub x3: Var,
    pub x4: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBn,
    pub x1: ConvBn,
    /// Stride-2 transition then a 3x3 refinement, for x2, x3, x4.
    pub stages: Vec<(ConvBn, ConvBn)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let stem = ConvBn::new(store, &format!("{name}.stem"), 3, c, 3, 2, true)?;
        let x1 = ConvBn::new(store, &format!("{name}.x1"), c, c, 3, 1, true)?;
        let mut stages = Vec::with_capacity(3);
        for (i, width) in [2 * c, 4 * c, 8 * c].into_iter().enumerate() {
            let prev = c << i;
            let s = format!("{name}.stage{}", i + 2);
            stages.push((
                ConvBn::new(store, &format!("{s}.down"), prev, width, 3, 2, true)?,
                ConvBn::new(store, &format!("{s}.conv"), width, width, 3, 1, true)?,
            ));
        }
        Ok(Self { stem, x1, stages })
    }

    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<BackboneFeatures> {
        let s = self.stem.forward(ctx, img)?;
        let x1 = self.x1.forward(ctx, s)?;
        let mut outs = Vec::with_capacity(3);
        let mut x = x1;
        for (down, conv) in &self.stages {
            let y = down.forward(ctx, x)?;
            x = conv.forward(ctx, y)?;
            outs.push(x);
        }
        Ok(BackboneFeatures {
            x1,
            x2: outs[0],
            x3: outs[1],
            x4: outs[2],
        })
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params()
            + self.x1.num_params()
            + self.stages.iter().map(|(a, b)| a.num_params() + b.num_params()).sum::<usize>()
    }
}

/// Resizes x2, x3, x4 to half the x1 extent, projects each to C channels and concatenates.
#[derive(Clone, Debug)]
pub struct Stage1Fuse {
    pub proj: [Conv2d; 3],
}

impl Stage1Fuse {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            proj: [
                Conv2d::pointwise(store, &format!("{name}.proj2"), 2 * c, c, true)?,
                Conv2d::pointwise(store, &format!("{name}.proj3"), 4 * c, c, true)?,
                Conv2d::pointwise(store, &format!("{name}.proj4"), 8 * c, c, true)?,
            ],
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, f: &BackboneFeatures) -> Result<Var> {
        let [_, _, h, w] = ctx.tape.dims(f.x1);
        let (th, tw) = (h.div_ceil(2), w.div_ceil(2));
        let mut parts = Vec::with_capacity(3);
        for (x, proj) in [f.x2, f.x3, f.x4].into_iter().zip(&self.proj) {
            let r = ctx.tape.interpolate_bilinear(x, th, tw)?;
            parts.push(proj.forward(ctx, r)?);
        }
        ctx.tape.concat_channels(&parts)
    }

    pub fn num_params(&self) -> usize {
        self.proj.iter().map(Conv2d::num_params).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Global,
    Local,
    Low,
    High,
}

/// Stage-2 branch outputs, `(N, C_m, H/4, W/4)` relative to x1; disabled branches are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Mapped {
    pub global: Option<Var>,
    pub local: Option<Var>,
    pub low: Option<Var>,
    pub high: Option<Var>,
}

impl Mapped {
    pub fn get(&self, s: Source) -> Option<Var> {
        match s {
            Source::Global => self.global,
            Source::Local => self.local,
            Source::Low => self.low,
            Source::High => self.high,
        }
    }
}

#[derive(Clone, Debug)]
pub enum SlotOp {
    Mdaf(Mdaf),
    /// 1x1 over the channel concatenation of the pair.
    Concat(Conv2d),
    /// 1x1 over the elementwise sum of the pair.
    Add(Conv2d),
    /// 1x1 over the single surviving member.
    Project(Conv2d),
}

/// One aligned spatial/frequency pair.
#[derive(Clone, Debug)]
pub struct PairSlot {
    pub spatial: Source,
    pub frequency: Source,
    pub op: SlotOp,
}

impl PairSlot {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        spatial: (Source, bool),
        frequency: (Source, bool),
    ) -> Result<Option<Self>> {
        let cm = cfg.mapped_channels;
        let op = match (spatial.1, frequency.1) {
            (false, false) => return Ok(None),
            (true, true) => match cfg.fusion {
                FusionMode::Mdaf => SlotOp::Mdaf(Mdaf::new(store, name, cm, cfg.temperature)?),
                FusionMode::Concat => SlotOp::Concat(Conv2d::pointwise(store, &format!("{name}.cat"), 2 * cm, cm, true)?),
                FusionMode::Add => SlotOp::Add(Conv2d::pointwise(store, &format!("{name}.add"), cm, cm, true)?),
            },
            _ => SlotOp::Project(Conv2d::pointwise(store, &format!("{name}.proj"), cm, cm, true)?),
        };
        Ok(Some(Self {
            spatial: spatial.0,
            frequency: frequency.0,
            op,
        }))
    }

    pub fn forward(&self, ctx: &mut Ctx, m: &Mapped) -> Result<Var> {
        let s = m.get(self.spatial);
        let f = m.get(self.frequency);
        let missing = || Error::Contract(format!("alignment inputs {:?}/{:?} missing", self.spatial, self.frequency));
        match &self.op {
            SlotOp::Mdaf(mdaf) => mdaf.forward(ctx, s.ok_or_else(missing)?, f.ok_or_else(missing)?),
            SlotOp::Concat(conv) => {
                let cat = ctx.tape.concat_channels(&[s.ok_or_else(missing)?, f.ok_or_else(missing)?])?;
                conv.forward(ctx, cat)
            }
            SlotOp::Add(conv) => {
                let sum = ctx.tape.add(s.ok_or_else(missing)?, f.ok_or_else(missing)?)?;
                conv.forward(ctx, sum)
            }
            SlotOp::Project(conv) => conv.forward(ctx, s.or(f).ok_or_else(missing)?),
        }
    }

    pub fn num_params(&self) -> usize {
        match &self.op {
            SlotOp::Mdaf(m) => m.num_params(),
            SlotOp::Concat(c) | SlotOp::Add(c) | SlotOp::Project(c) => c.num_params(),
        }
    }
}

/// `Y = 1x1(Cat(resized aligned pairs, x1, resized 1x1(X')))`, then 3x3+BN+ReLU,
/// a 1x1 classifier and bilinear upsampling to the input size.
#[derive(Clone, Debug)]
pub struct Head {
    pub x_proj: Conv2d,
    pub fuse: Conv2d,
    pub refine: ConvBn,
    pub classify: Conv2d,
}

impl Head {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, cm: usize, slots: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            x_proj: Conv2d::pointwise(store, &format!("{name}.x_proj"), 3 * c, c, true)?,
            fuse: Conv2d::pointwise(store, &format!("{name}.fuse"), slots * cm + 2 * c, c, true)?,
            refine: ConvBn::new(store, &format!("{name}.refine"), c, c, 3, 1, true)?,
            classify: Conv2d::pointwise(store, &format!("{name}.classify"), c, classes, true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, aligned: &[Var], x1: Var, xp: Var, out_hw: (usize, usize)) -> Result<Var> {
        let [_, _, h, w] = ctx.tape.dims(x1);
        let mut parts = Vec::with_capacity(aligned.len() + 2);
        for &a in aligned {
            parts.push(ctx.tape.interpolate_bilinear(a, h, w)?);
        }
        parts.push(x1);
        let p = self.x_proj.forward(ctx, xp)?;
        parts.push(ctx.tape.interpolate_bilinear(p, h, w)?);
        let cat = ctx.tape.concat_channels(&parts)?;
        let y = self.fuse.forward(ctx, cat)?;
        let y = self.refine.forward(ctx, y)?;
        let logits = self.classify.forward(ctx, y)?;
        ctx.tape.interpolate_bilinear(logits, out_hw.0, out_hw.1)
    }

    pub fn num_params(&self) -> usize {
        self.x_proj.num_params() + self.fuse.num_params() + self.refine.num_params() + self.classify.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct Sffnet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub stage1: Stage1Fuse,
    pub global: Option<GlobalBranch>,
    pub local: Option<LocalBranch>,
    pub wtfd: Option<Wtfd>,
    pub slots: Vec<PairSlot>,
    pub head: Head,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub features: BackboneFeatures,
    pub fused: Var,
    pub mapped: Mapped,
    pub aligned: Vec<Var>,
    pub logits: Var,
}

impl Sffnet {
    /// Registers every parameter in `store` and returns the network.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, cm) = (cfg.base_channels, cfg.mapped_channels);
        let b = cfg.branches;
        let backbone = Backbone::new(store, "backbone", c)?;
        let stage1 = Stage1Fuse::new(store, "fuse1", c)?;
        let global = if b.global {
            Some(GlobalBranch::new(store, "global", 3 * c, cm, cfg.window_size, cfg.heads)?)
        } else {
            None
        };
        let local = if b.local {
            Some(LocalBranch::new(store, "local", 3 * c, cm)?)
        } else {
            None
        };
        let wtfd = if b.wtfd_low || b.wtfd_high {
            Some(Wtfd::with_bands(store, "wtfd", 3 * c, cm, b.wtfd_low, b.wtfd_high)?)
        } else {
            None
        };
        let (with_global, with_local) = match cfg.pairing {
            Pairing::GlobalLow => ((Source::Low, b.wtfd_low), (Source::High, b.wtfd_high)),
            Pairing::GlobalHigh => ((Source::High, b.wtfd_high), (Source::Low, b.wtfd_low)),
        };
        let mut slots = Vec::with_capacity(2);
        if let Some(s) = PairSlot::new(store, "align_global", cfg, (Source::Global, b.global), with_global)? {
            slots.push(s);
        }
        if let Some(s) = PairSlot::new(store, "align_local", cfg, (Source::Local, b.local), with_local)? {
            slots.push(s);
        }
        let head = Head::new(store, "head", c, cm, slots.len(), cfg.num_classes)?;
        Ok(Self {
            config: cfg.clone(),
            backbone,
            stage1,
            global,
            local,
            wtfd,
            slots,
            head,
        })
    }

    /// Builds a network with a fresh store seeded by `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new(seed);
        let net = Self::new(&mut store, cfg)?;
        Ok((net, store))
    }

    pub fn map(&self, ctx: &mut Ctx, xp: Var) -> Result<Mapped> {
        let mut m = Mapped::default();
        if let Some(g) = &self.global {
            m.global = Some(g.forward(ctx, xp)?);
        }
        if let Some(l) = &self.local {
            m.local = Some(l.forward(ctx, xp)?);
        }
        if let Some(w) = &self.wtfd {
            let f = w.forward(ctx, xp)?;
            m.low = f.low;
            m.high = f.high;
        }
        Ok(m)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, img: Var) -> Result<Trace> {
        let [_, c, h, w] = ctx.tape.dims(img);
        if c != 3 {
            return Err(Error::shape("model input", format!("expected 3 channels, got {c}")));
        }
        self.config.check_input(h, w)?;
        let features = self.backbone.forward(ctx, img)?;
        let fused = self.stage1.forward(ctx, &features)?;
        let mapped = self.map(ctx, fused)?;
        let mut aligned = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            aligned.push(slot.forward(ctx, &mapped)?);
        }
        let logits = self.head.forward(ctx, &aligned, features.x1, fused, (h, w))?;
        Ok(Trace {
            features,
            fused,
            mapped,
            aligned,
            logits,
        })
    }

    /// Class logits `(N, K, h, w)` for images `(N, 3, h, w)`.
    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, img)?.logits)
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params()
            + self.stage1.num_params()
            + self.global.as_ref().map_or(0, GlobalBranch::num_params)
            + self.local.as_ref().map_or(0, LocalBranch::num_params)
            + self.wtfd.as_ref().map_or(0, Wtfd::num_params)
            + self.slots.iter().map(PairSlot::num_params).sum::<usize>()
            + self.head.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::config::Variant;
    use crate::gradcheck::{random_tensor, GradcheckOptions};
    use crate::nn::{gradcheck_module, Mode};
    use crate::tensor::Tensor;

    fn run(net: &Sffnet, store: &ParamStore, img: Tensor) -> Trace {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
        let x = ctx.input(img);
        net.forward_traced(&mut ctx, x).unwrap()
    }

    fn with_values<T>(net: &Sffnet, store: &ParamStore, img: Tensor, f: impl FnOnce(&Tape, &Trace) -> T) -> T {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
        let x = ctx.input(img);
        let tr = net.forward_traced(&mut ctx, x).unwrap();
        drop(ctx);
        f(&tape, &tr)
    }

    #[test]
    fn backbone_ladder_at_64() {
        let (net, store) = Sffnet::build(&ModelConfig::default(), 0).unwrap();
        with_values(&net, &store, random_tensor([1, 3, 64, 64], 1), |t, tr| {
            let f = tr.features;
            assert_eq!(t.dims(f.x1), [1, 16, 32, 32]);
            assert_eq!(t.dims(f.x2), [1, 32, 16, 16]);
            assert_eq!(t.dims(f.x3), [1, 64, 8, 8]);
            assert_eq!(t.dims(f.x4), [1, 128, 4, 4]);
            assert_eq!(t.dims(tr.fused), [1, 48, 16, 16]);
            for v in [tr.mapped.global, tr.mapped.local, tr.mapped.low, tr.mapped.high] {
                assert_eq!(t.dims(v.unwrap()), [1, 16, 8, 8]);
            }
            assert_eq!(t.dims(tr.logits), [1, 6, 64, 64]);
        });
    }

    #[test]
    fn doubling_resolution_doubles_features() {
        let (net, store) = Sffnet::build(&ModelConfig::micro(), 0).unwrap();
        let a = with_values(&net, &store, random_tensor([1, 3, 16, 32], 1), |t, tr| t.dims(tr.features.x4));
        let b = with_values(&net, &store, random_tensor([1, 3, 32, 64], 1), |t, tr| t.dims(tr.features.x4));
        assert_eq!((a[2] * 2, a[3] * 2), (b[2], b[3]));
    }

    #[test]
    fn zero_image_zero_biases_give_zero_features() {
        let (net, mut store) = Sffnet::build(&ModelConfig::micro(), 0).unwrap();
        for p in store.params_mut() {
            if p.name.ends_with(".bias") {
                p.tensor.data_mut().fill(0.0);
            }
        }
        with_values(&net, &store, Tensor::zeros([1, 3, 32, 32]), |t, tr| {
            let f = tr.features;
            for v in [f.x1, f.x2, f.x3, f.x4, tr.fused] {
                assert!(t.value(v).data().iter().all(|&e| e == 0.0));
            }
        });
    }

    #[test]
    fn stage1_channels_follow_resized_x2() {
        let mut store = ParamStore::new(0);
        let fuse = Stage1Fuse::new(&mut store, "f", 2).unwrap();
        let w = store.param_mut(fuse.proj[0].weight);
        w.data_mut().fill(0.0);
        w.set(0, 0, 0, 0, 1.0);
        w.set(1, 1, 0, 0, 1.0);
        for p in &fuse.proj {
            store.param_mut(p.bias.unwrap()).data_mut().fill(0.0);
        }
        let x2 = random_tensor([1, 4, 3, 3], 1);
        let expect = crate::autograd::bilinear_forward(&x2, 4, 4).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let f = BackboneFeatures {
            x1: ctx.input(Tensor::zeros([1, 2, 8, 8])),
            x2: ctx.input(x2),
            x3: ctx.input(Tensor::zeros([1, 8, 2, 2])),
            x4: ctx.input(Tensor::zeros([1, 16, 1, 1])),
        };
        let y = fuse.forward(&mut ctx, &f).unwrap();
        let y = ctx.tape.value(y);
        assert_eq!(y.dims(), [1, 6, 4, 4]);
        assert!(y.channels(0, 2).unwrap().max_abs_diff(&expect.channels(0, 2).unwrap()) < 1e-15);
        assert!(y.channels(2, 6).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (net, store) = Sffnet::build(&ModelConfig::micro(), 0).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let x = ctx.input(Tensor::zeros([1, 3, 24, 32]));
        assert!(matches!(net.forward(&mut ctx, x), Err(Error::Shape { .. })));
        let x = ctx.input(Tensor::zeros([1, 1, 32, 32]));
        assert!(matches!(net.forward(&mut ctx, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn variants_construct_run_and_never_gain_params() {
        let base = ModelConfig::micro();
        let full = Sffnet::build(&Variant::Full.apply(&base), 0).unwrap().0.num_params();
        for v in Variant::ALL {
            let (net, store) = Sffnet::build(&v.apply(&base), 0).unwrap();
            assert_eq!(net.num_params(), store.num_scalars(), "{}", v.label());
            if v.is_removal() {
                assert!(net.num_params() < full, "{}", v.label());
            }
            let tr = run(&net, &store, random_tensor([2, 3, 32, 16], 3));
            assert_eq!(tr.aligned.len(), 2);
        }
    }

    #[test]
    fn single_member_pairs_project_and_empty_pairs_drop() {
        let mut cfg = ModelConfig::micro();
        cfg.branches.global = false;
        let (net, _) = Sffnet::build(&cfg, 0).unwrap();
        assert!(matches!(net.slots[0].op, SlotOp::Project(_)));
        assert!(matches!(net.slots[1].op, SlotOp::Mdaf(_)));
        cfg.branches.wtfd_low = false;
        let (net, store) = Sffnet::build(&cfg, 0).unwrap();
        assert_eq!(net.slots.len(), 1);
        assert_eq!(net.slots[0].spatial, Source::Local);
        let tr = run(&net, &store, random_tensor([1, 3, 16, 16], 1));
        assert_eq!(tr.aligned.len(), 1);
    }

    #[test]
    fn pairing_swaps_frequency_partners() {
        let mut cfg = ModelConfig::micro();
        cfg.pairing = Pairing::GlobalHigh;
        let (net, _) = Sffnet::build(&cfg, 0).unwrap();
        assert_eq!(net.slots[0].frequency, Source::High);
        assert_eq!(net.slots[1].frequency, Source::Low);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let (net, store) = Sffnet::build(&ModelConfig::micro(), 7).unwrap();
        let img = random_tensor([1, 3, 32, 32], 2);
        let a = with_values(&net, &store, img.clone(), |t, tr| t.value(tr.logits).clone());
        let b = with_values(&net, &store, img, |t, tr| t.value(tr.logits).clone());
        assert_eq!(a, b);
        let (net2, store2) = Sffnet::build(&ModelConfig::micro(), 7).unwrap();
        let c = with_values(&net2, &store2, random_tensor([1, 3, 32, 32], 2), |t, tr| t.value(tr.logits).clone());
        assert_eq!(a, c);
    }

    #[test]
    fn full_network_gradcheck_on_micro_config() {
        let (net, store) = Sffnet::build(&ModelConfig::micro(), 11).unwrap();
        let ids: Vec<_> = store.ids_with_prefix("");
        let report = gradcheck_module(
            &store,
            &ids,
            Some(random_tensor([1, 3, 16, 16], 12)),
            &GradcheckOptions::default().with_tol(1e-3).with_max_entries(24),
            |ctx, x| net.forward(ctx, x.unwrap()),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
