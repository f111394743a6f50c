//! Run configuration: model architecture, training, augmentation, and synthetic data.
//!
//! Files are TOML; unknown keys are rejected. Any key can be overridden with a
//! dotted `section.key=value` assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Cross-attention alignment of each spatial/frequency pair.
    Mdaf,
    /// Channel concatenation followed by a 1x1 projection.
    Concat,
    /// Elementwise sum followed by a 1x1 projection.
    Add,
}

/// Which frequency feature each spatial feature is aligned with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// global with low-frequency, local with high-frequency
    GlobalLow,
    /// global with high-frequency, local with low-frequency
    GlobalHigh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchFlags {
    pub global: bool,
    pub local: bool,
    pub wtfd_low: bool,
    pub wtfd_high: bool,
}

impl Default for BranchFlags {
    fn default() -> Self {
        Self {
            global: true,
            local: true,
            wtfd_low: true,
            wtfd_high: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone width `C`; stages use C, 2C, 4C, 8C.
    pub base_channels: usize,
    /// Width `C_m` of every stage-2 branch output.
    pub mapped_channels: usize,
    pub window_size: usize,
    pub num_classes: usize,
    pub heads: usize,
    /// Divisor of the cross-attention logits; `sqrt(C*H*W)` when absent.
    pub temperature: Option<f64>,
    pub branches: BranchFlags,
    pub fusion: FusionMode,
    pub pairing: Pairing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            mapped_channels: 16,
            window_size: 8,
            num_classes: 6,
            heads: 1,
            temperature: None,
            branches: BranchFlags::default(),
            fusion: FusionMode::Mdaf,
            pairing: Pairing::GlobalLow,
        }
    }
}

impl ModelConfig {
    pub fn micro() -> Self {
        Self {
            base_channels: 4,
            mapped_channels: 4,
            window_size: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.base_channels == 0 {
            return fail("base_channels must be positive".into());
        }
        if self.mapped_channels < 2 || self.mapped_channels % 2 != 0 {
            return fail(format!(
                "mapped_channels must be even and at least 2, got {}",
                self.mapped_channels
            ));
        }
        if self.window_size == 0 {
            return fail("window_size must be positive".into());
        }
        if self.heads == 0 || self.mapped_channels % self.heads != 0 {
            return fail(format!(
                "heads ({}) must divide mapped_channels ({})",
                self.heads, self.mapped_channels
            ));
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return fail(format!("temperature must be positive, got {t}"));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(
                "model input",
                format!("{h}x{w} is not a positive multiple of 16"),
            ));
        }
        Ok(())
    }
}

/// The seven configurations of the component-removal study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoGlobal,
    NoLocal,
    NoWtfdLow,
    NoWtfdHigh,
    ConcatFusion,
    AddFusion,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoGlobal,
        Variant::NoLocal,
        Variant::NoWtfdLow,
        Variant::NoWtfdHigh,
        Variant::ConcatFusion,
        Variant::AddFusion,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "SFFNet",
            Variant::NoGlobal => "SFFNet w/o Global",
            Variant::NoLocal => "SFFNet w/o Local",
            Variant::NoWtfdLow => "SFFNet w/o WTFD-L",
            Variant::NoWtfdHigh => "SFFNet w/o WTFD-H",
            Variant::ConcatFusion => "SFFNet w/o MDAF + Cat",
            Variant::AddFusion => "SFFNet w/o MDAF + Add",
        }
    }

    /// True for the variants that remove exactly one branch.
    pub fn is_removal(self) -> bool {
        matches!(
            self,
            Variant::NoGlobal | Variant::NoLocal | Variant::NoWtfdLow | Variant::NoWtfdHigh
        )
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.branches = BranchFlags::default();
        c.fusion = FusionMode::Mdaf;
        match self {
            Variant::Full => {}
            Variant::NoGlobal => c.branches.global = false,
            Variant::NoLocal => c.branches.local = false,
            Variant::NoWtfdLow => c.branches.wtfd_low = false,
            Variant::NoWtfdHigh => c.branches.wtfd_high = false,
            Variant::ConcatFusion => c.fusion = FusionMode::Concat,
            Variant::AddFusion => c.fusion = FusionMode::Add,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// First restart period of the cosine schedule, in epochs.
    pub restart_period: usize,
    pub restart_mult: usize,
    pub dice_eps: f64,
    /// Label value excluded from loss and metrics.
    pub ignore_index: usize,
    /// Stop once training-set mIoU reaches this value.
    pub target_miou: Option<f64>,
    pub augment: bool,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            batch_size: 4,
            lr: 6e-4,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            restart_period: 15,
            restart_mult: 2,
            dice_eps: 1e-6,
            ignore_index: 255,
            target_miou: None,
            augment: true,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return fail(format!("need 0 <= min_lr <= lr, got {} / {}", self.min_lr, self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.restart_period == 0 || self.restart_mult == 0 {
            return fail("restart_period and restart_mult must be positive".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub scales: Vec<f64>,
    pub hflip: f64,
    pub vflip: f64,
    /// Allowed counter-clockwise quarter turns.
    pub rotations: Vec<u8>,
    /// Square crop side; 0 keeps the scaled extent (rounded down to a multiple of 16).
    pub crop: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            hflip: 0.5,
            vflip: 0.5,
            rotations: vec![0, 1, 2, 3],
            crop: 64,
        }
    }
}

impl AugmentSpec {
    pub fn identity(crop: usize) -> Self {
        Self {
            scales: vec![1.0],
            hflip: 0.0,
            vflip: 0.0,
            rotations: vec![0],
            crop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("augment.scales must be non-empty and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip) || !(0.0..=1.0).contains(&self.vflip) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|&r| r > 3) {
            return Err(Error::Config("augment.rotations must be quarter turns in 0..=3".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub size: usize,
    pub num_classes: usize,
    /// Scales every foreground class's target area fraction; 0 yields pure background.
    pub density: f64,
    /// Darkening factor at the core of a shadow band, in [0, 1).
    pub shadow_strength: f64,
    pub shadow_bands: usize,
    /// Label fully shadowed pixels with the ignore index.
    pub shadow_ignore: bool,
    pub texture_amplitude: f64,
    pub seed: u64,
    /// Fraction of generated tiles assigned to the validation split.
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 6,
            density: 1.0,
            shadow_strength: 0.35,
            shadow_bands: 1,
            shadow_ignore: false,
            texture_amplitude: 0.04,
            seed: 0,
            val_fraction: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("data.size must be at least 8, got {}", self.size)));
        }
        if !(2..=6).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "data.num_classes must be in 2..=6, got {}",
                self.num_classes
            )));
        }
        if !(self.density >= 0.0 && self.density <= 1.5) {
            return Err(Error::Config("data.density must lie in [0, 1.5]".into()));
        }
        if !(0.0..1.0).contains(&self.shadow_strength) {
            return Err(Error::Config("data.shadow_strength must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(Error::Config("data.val_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Classes left out of the class means (still counted in overall accuracy).
    pub exclude_classes: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub data: SyntheticSpec,
    pub metrics: MetricsConfig,
}

/// Every configuration key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("model.base_channels", "backbone width C (stages C, 2C, 4C, 8C)"),
    ("model.mapped_channels", "output width of each stage-2 branch (even)"),
    ("model.window_size", "window side for windowed self-attention"),
    ("model.num_classes", "number of segmentation classes"),
    ("model.heads", "attention heads in the global branch"),
    ("model.temperature", "cross-attention logit divisor (default sqrt(C*H*W))"),
    ("model.branches.global", "enable the global branch"),
    ("model.branches.local", "enable the local branch"),
    ("model.branches.wtfd_low", "enable the low-frequency wavelet feature"),
    ("model.branches.wtfd_high", "enable the high-frequency wavelet features"),
    ("model.fusion", "spatial/frequency fusion: mdaf | concat | add"),
    ("model.pairing", "frequency partner of the global branch: global_low | global_high"),
    ("train.seed", "seed for initialization, shuffling and augmentation"),
    ("train.epochs", "maximum number of epochs"),
    ("train.batch_size", "images per optimizer step"),
    ("train.lr", "peak learning rate"),
    ("train.min_lr", "learning rate at the end of each cosine cycle"),
    ("train.beta1", "first-moment decay"),
    ("train.beta2", "second-moment decay"),
    ("train.eps", "optimizer denominator guard"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.restart_period", "epochs in the first cosine cycle"),
    ("train.restart_mult", "cycle length multiplier after each restart"),
    ("train.dice_eps", "dice ratio denominator guard"),
    ("train.ignore_index", "label value excluded from loss and metrics"),
    ("train.target_miou", "stop early once train mIoU reaches this value"),
    ("train.augment", "apply random augmentation to training batches"),
    ("train.eval_every", "evaluate every this many epochs"),
    ("augment.scales", "random scale factors"),
    ("augment.hflip", "horizontal flip probability"),
    ("augment.vflip", "vertical flip probability"),
    ("augment.rotations", "allowed quarter turns (0-3)"),
    ("augment.crop", "square crop side (0 = no crop)"),
    ("data.size", "synthetic tile side in pixels"),
    ("data.num_classes", "synthetic classes (2-6)"),
    ("data.density", "scale of foreground class area fractions"),
    ("data.shadow_strength", "darkening at the core of shadow bands"),
    ("data.shadow_bands", "shadow bands per tile"),
    ("data.shadow_ignore", "label deep shadow pixels as ignore"),
    ("data.texture_amplitude", "additive texture noise amplitude"),
    ("data.seed", "synthetic corpus seed"),
    ("data.val_fraction", "fraction of tiles in the validation split"),
    ("metrics.exclude_classes", "classes left out of mean F1 / mIoU"),
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.data.validate()?;
        if self.data.num_classes > self.model.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes ({}) exceeds model.num_classes ({})",
                self.data.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides; values are TOML literals, bare words are strings.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for a in assignments {
            let a = a.as_ref();
            let (key, raw) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {a:?} is not key=value")))?;
            let key = key.trim();
            if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            let value = parse_value(raw.trim());
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().expect("split yields one part");
            let mut table = &mut root;
            for p in parts {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
            }
            table.insert(leaf.to_string(), value);
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_keys(prefix: &str, t: &toml::Table, out: &mut Vec<String>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => leaf_keys(&key, inner, out),
                _ => out.push(key),
            }
        }
    }

    #[test]
    fn key_list_covers_every_field() {
        let mut cfg = RunConfig::default();
        cfg.model.temperature = Some(1.0);
        cfg.train.target_miou = Some(0.5);
        let table = toml::Table::try_from(&cfg).unwrap();
        let mut keys = Vec::new();
        leaf_keys("", &table, &mut keys);
        keys.sort();
        let mut documented: Vec<String> = CONFIG_KEYS.iter().map(|(k, _)| k.to_string()).collect();
        documented.sort();
        assert_eq!(keys, documented);
    }

    #[test]
    fn round_trip_and_unknown_key() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(
            RunConfig::from_toml("[model]\nwidth = 3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::default()
            .with_overrides(&["model.window_size=4", "model.fusion=concat", "train.target_miou=0.9"])
            .unwrap();
        assert_eq!(cfg.model.window_size, 4);
        assert_eq!(cfg.model.fusion, FusionMode::Concat);
        assert_eq!(cfg.train.target_miou, Some(0.9));
        assert!(RunConfig::default().with_overrides(&["model.nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["model.num_classes=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["model.fusion=sum"]).is_err());
    }

    #[test]
    fn variants_toggle_one_thing() {
        let base = ModelConfig::default();
        assert_eq!(Variant::Full.apply(&base), base);
        let v = Variant::NoWtfdHigh.apply(&base);
        assert!(!v.branches.wtfd_high && v.branches.wtfd_low);
        assert_eq!(Variant::AddFusion.apply(&base).fusion, FusionMode::Add);
        assert_eq!(Variant::ALL.iter().filter(|v| v.is_removal()).count(), 4);
    }
}
