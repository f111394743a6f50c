//! Closed-form parameter and multiply-accumulate counts per module.
//!
//! Counts are derived from the configuration alone, without building the network,
//! so they can be checked against an enumeration of stored tensors. MACs cover
//! convolutions, token projections and attention products for one image;
//! normalization, pooling, resizing and elementwise ops are not counted.

use std::fmt;

use crate::config::{FusionMode, ModelConfig, Pairing};
use crate::error::Result;
use crate::mdaf::STRIP_SCALES;

/// Reported size of the windowed global branch at full scale: millions of
/// parameters and billions of operations.
pub const REFERENCE_GLOBAL_PARAMS_M: f64 = 0.48;
pub const REFERENCE_GLOBAL_GFLOPS: f64 = 1.99;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModuleCount {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

impl ModuleCount {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }

    fn conv(&mut self, cin: usize, cout: usize, k: (usize, usize), bias: bool, out: (usize, usize)) {
        self.params += cout * cin * k.0 * k.1 + if bias { cout } else { 0 };
        self.macs += (cout * cin * k.0 * k.1 * out.0 * out.1) as u64;
    }

    fn norm(&mut self, c: usize) {
        self.params += 2 * c;
    }

    fn linear(&mut self, cin: usize, cout: usize, tokens: usize) {
        self.params += cout * cin + cout;
        self.macs += (tokens * cin * cout) as u64;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamFlopReport {
    pub input: (usize, usize),
    pub modules: Vec<ModuleCount>,
}

impl ParamFlopReport {
    pub fn total_params(&self) -> usize {
        self.modules.iter().map(|m| m.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.modules.iter().map(|m| m.macs).sum()
    }

    pub fn module(&self, name: &str) -> Option<&ModuleCount> {
        self.modules.iter().find(|m| m.name == name)
    }
}

impl fmt::Display for ParamFlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>12} {:>16}", "module", "params", "MACs")?;
        for m in &self.modules {
            writeln!(f, "{:<14} {:>12} {:>16}", m.name, m.params, m.macs)?;
        }
        write!(f, "{:<14} {:>12} {:>16}", "total", self.total_params(), self.total_macs())
    }
}

fn half(x: (usize, usize)) -> (usize, usize) {
    (x.0.div_ceil(2), x.1.div_ceil(2))
}

/// Global branch on an `cin x xp` input.
pub fn global_branch(cin: usize, cm: usize, ws: usize, xp: (usize, usize)) -> ModuleCount {
    let mut m = ModuleCount::new("global");
    let g = half(xp);
    m.conv(cin, cm, (3, 3), true, g);
    let windows = g.0.div_ceil(ws) * g.1.div_ceil(ws);
    let t = ws * ws;
    for _ in 0..4 {
        m.linear(cm, cm, windows * t);
    }
    m.macs += (2 * windows * t * t * cm) as u64;
    m.conv(cm, cm, (ws, ws), true, g);
    m.conv(cm, cm, (1, ws), true, g);
    m.conv(cm, cm, (ws, 1), true, g);
    m.conv(2 * cm, cm, (1, 1), false, g);
    m.norm(cm);
    m
}

fn local_branch(cin: usize, cm: usize, xp: (usize, usize)) -> ModuleCount {
    let mut m = ModuleCount::new("local");
    let g = half(xp);
    let mid = (cm / 2).max(1);
    m.conv(cin, cm, (3, 3), true, xp);
    m.conv(cm, cm, (3, 3), true, g);
    m.conv(cin, cm, (3, 3), false, g);
    m.norm(cm);
    m.conv(cm, mid, (1, 1), true, g);
    m.conv(mid, cm, (3, 3), true, g);
    m.conv(4 * cm, 2 * cm, (1, 1), true, g);
    m.conv(2 * cm, cm, (3, 3), true, g);
    m.conv(2 * cm, cm, (1, 1), false, g);
    m.norm(cm);
    m
}

fn wavelet_decomposer(cin: usize, cm: usize, low: bool, high: bool, xp: (usize, usize)) -> ModuleCount {
    let mut m = ModuleCount::new("wtfd");
    let padded = (xp.0 + xp.0 % 2, xp.1 + xp.1 % 2);
    let g = half(padded);
    m.conv(cin, cin, (1, 1), true, padded);
    if low {
        m.conv(cin, cm, (1, 1), false, g);
        m.norm(cm);
    }
    if high {
        m.conv(3 * cin, cm, (1, 1), false, g);
        m.norm(cm);
    }
    m
}

fn alignment(name: &str, cfg: &ModelConfig, present: (bool, bool), g: (usize, usize)) -> Option<ModuleCount> {
    let cm = cfg.mapped_channels;
    let mut m = ModuleCount::new(name);
    let tokens = g.0 * g.1;
    match present {
        (false, false) => return None,
        (true, true) => match cfg.fusion {
            FusionMode::Mdaf => {
                for _ in 0..2 {
                    m.norm(cm);
                    for k in STRIP_SCALES {
                        m.conv(cm, cm, (1, k), true, g);
                        m.conv(cm, cm, (k, 1), true, g);
                    }
                    for _ in 0..3 {
                        m.conv(cm, cm, (1, 1), true, g);
                    }
                    m.macs += (2 * tokens * tokens * cm) as u64;
                    m.conv(cm, cm / 2, (1, 1), true, g);
                }
            }
            FusionMode::Concat => m.conv(2 * cm, cm, (1, 1), true, g),
            FusionMode::Add => m.conv(cm, cm, (1, 1), true, g),
        },
        _ => m.conv(cm, cm, (1, 1), true, g),
    }
    Some(m)
}

/// Per-module counts for one `h x w` image.
pub fn count_params_flops(cfg: &ModelConfig, input: (usize, usize)) -> Result<ParamFlopReport> {
    cfg.validate()?;
    cfg.check_input(input.0, input.1)?;
    let (c, cm) = (cfg.base_channels, cfg.mapped_channels);
    let b = cfg.branches;
    let x1 = half(input);
    let xp = half(x1);
    let g = half(xp);

    let mut backbone = ModuleCount::new("backbone");
    backbone.conv(3, c, (3, 3), false, x1);
    backbone.norm(c);
    backbone.conv(c, c, (3, 3), false, x1);
    backbone.norm(c);
    let mut ext = x1;
    for i in 0..3 {
        ext = half(ext);
        let (cin, cout) = (c << i, c << (i + 1));
        backbone.conv(cin, cout, (3, 3), false, ext);
        backbone.norm(cout);
        backbone.conv(cout, cout, (3, 3), false, ext);
        backbone.norm(cout);
    }

    let mut fuse1 = ModuleCount::new("fuse1");
    for k in 1..=3 {
        fuse1.conv(c << k, c, (1, 1), true, xp);
    }

    let mut modules = vec![backbone, fuse1];
    if b.global {
        modules.push(global_branch(3 * c, cm, cfg.window_size, xp));
    }
    if b.local {
        modules.push(local_branch(3 * c, cm, xp));
    }
    if b.wtfd_low || b.wtfd_high {
        modules.push(wavelet_decomposer(3 * c, cm, b.wtfd_low, b.wtfd_high, xp));
    }
    let (with_global, with_local) = match cfg.pairing {
        Pairing::GlobalLow => (b.wtfd_low, b.wtfd_high),
        Pairing::GlobalHigh => (b.wtfd_high, b.wtfd_low),
    };
    let mut slots = 0;
    for (name, pair) in [("align_global", (b.global, with_global)), ("align_local", (b.local, with_local))] {
        if let Some(m) = alignment(name, cfg, pair, g) {
            modules.push(m);
            slots += 1;
        }
    }

    let mut head = ModuleCount::new("head");
    head.conv(3 * c, c, (1, 1), true, xp);
    head.conv(slots * cm + 2 * c, c, (1, 1), true, x1);
    head.conv(c, c, (3, 3), false, x1);
    head.norm(c);
    head.conv(c, cfg.num_classes, (1, 1), true, x1);
    modules.push(head);

    Ok(ParamFlopReport { input, modules })
}

/// Global branch at full scale: a `3C = 288`-channel fused map of 64x64 (a 512x512
/// image behind a stride-4 backbone stem and the half-resolution fusion), `C_m = 96`,
/// window 8.
pub fn full_scale_global() -> ModuleCount {
    global_branch(288, 96, 8, (64, 64))
}
