//! Domain vocabulary and configuration records.
//!
//! A [`ModelConfig`] is the single source of truth for which blocks a model
//! instantiates, the training recipe, and the seed. Configs are immutable
//! after [`ModelConfig::validated`] and safe to share across threads.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::ConfigError;

/// Network input side length after preprocessing.
pub const INPUT_SIZE: usize = 224;
/// Side length of the token grid fed to the transformer (stride-16 stem).
pub const TOKEN_GRID: usize = 14;
/// Segmentation classes: background plus eight organs.
pub const NUM_CLASSES: usize = 9;

/// The nine segmentation classes in their fixed id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OrganClass {
    Background,
    Aorta,
    Gallbladder,
    KidneyLeft,
    KidneyRight,
    Liver,
    Pancreas,
    Spleen,
    Stomach,
}

impl OrganClass {
    pub const ALL: [OrganClass; 9] = [
        OrganClass::Background,
        OrganClass::Aorta,
        OrganClass::Gallbladder,
        OrganClass::KidneyLeft,
        OrganClass::KidneyRight,
        OrganClass::Liver,
        OrganClass::Pancreas,
        OrganClass::Spleen,
        OrganClass::Stomach,
    ];

    /// The eight foreground organs (ids 1..=8). Metric averages run over
    /// exactly this set; background is excluded.
    pub const ORGANS: [OrganClass; 8] = [
        OrganClass::Aorta,
        OrganClass::Gallbladder,
        OrganClass::KidneyLeft,
        OrganClass::KidneyRight,
        OrganClass::Liver,
        OrganClass::Pancreas,
        OrganClass::Spleen,
        OrganClass::Stomach,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<OrganClass> {
        OrganClass::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OrganClass::Background => "background",
            OrganClass::Aorta => "aorta",
            OrganClass::Gallbladder => "gallbladder",
            OrganClass::KidneyLeft => "kidney_left",
            OrganClass::KidneyRight => "kidney_right",
            OrganClass::Liver => "liver",
            OrganClass::Pancreas => "pancreas",
            OrganClass::Spleen => "spleen",
            OrganClass::Stomach => "stomach",
        }
    }

    /// Column label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            OrganClass::Background => "Background",
            OrganClass::Aorta => "Aorta",
            OrganClass::Gallbladder => "Gallbladder",
            OrganClass::KidneyLeft => "Kidney (L)",
            OrganClass::KidneyRight => "Kidney (R)",
            OrganClass::Liver => "Liver",
            OrganClass::Pancreas => "Pancreas",
            OrganClass::Spleen => "Spleen",
            OrganClass::Stomach => "Stomach",
        }
    }
}

/// Ablation variant: which of the two added block families are instantiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    OnlyMewb,
    OnlyDaPlus,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::OnlyMewb,
        Variant::OnlyDaPlus,
        Variant::Full,
    ];

    pub fn uses_mewb(self) -> bool {
        matches!(self, Variant::OnlyMewb | Variant::Full)
    }

    pub fn uses_da_plus(self) -> bool {
        matches!(self, Variant::OnlyDaPlus | Variant::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::OnlyMewb => "only_mewb",
            Variant::OnlyDaPlus => "only_da_plus",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Variant, ConfigError> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "only_mewb" => Ok(Variant::OnlyMewb),
            "only_da_plus" => Ok(Variant::OnlyDaPlus),
            "full" => Ok(Variant::Full),
            other => Err(ConfigError::Parse(format!(
                "unknown variant {other:?} (expected baseline|only_mewb|only_da_plus|full)"
            ))),
        }
    }

    /// Report row label (ablation tables).
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::OnlyMewb => "Only MEWB",
            Variant::OnlyDaPlus => "Only DA+",
            Variant::Full => "Full",
        }
    }
}

/// Composite-loss weights; all supported configurations satisfy w_c + w_d = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_c: f64,
    pub w_d: f64,
}

impl LossWeights {
    pub fn new(w_c: f64, w_d: f64) -> LossWeights {
        LossWeights { w_c, w_d }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_c: 0.6, w_d: 0.4 }
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Poly,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Poly => "poly",
        }
    }

    pub fn parse(s: &str) -> Result<Schedule, ConfigError> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "poly" => Ok(Schedule::Poly),
            other => Err(ConfigError::Parse(format!(
                "unknown schedule {other:?} (expected constant|poly)"
            ))),
        }
    }
}

/// SGD recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 6,
            max_epochs: 200,
            schedule: Schedule::Poly,
        }
    }
}

/// Which skip connection "layer 1" refers to. `ShallowFirst` counts from the
/// highest-resolution skip; `DeepFirst` from the lowest. Both orderings are
/// reproducible because the layer numbering in ablation tables is ambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipOrder {
    ShallowFirst,
    DeepFirst,
}

impl SkipOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipOrder::ShallowFirst => "shallow_first",
            SkipOrder::DeepFirst => "deep_first",
        }
    }

    pub fn parse(s: &str) -> Result<SkipOrder, ConfigError> {
        match s {
            "shallow_first" => Ok(SkipOrder::ShallowFirst),
            "deep_first" => Ok(SkipOrder::DeepFirst),
            other => Err(ConfigError::Parse(format!(
                "unknown skip_order {other:?} (expected shallow_first|deep_first)"
            ))),
        }
    }
}

/// Full architecture + variant + training hyperparameter record.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Skip-connection layers refined by a dual-attention block; subset of {1,2,3}.
    pub skip_da_layers: BTreeSet<u8>,
    pub patch_size: usize,
    pub transformer_layers: usize,
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub num_classes: usize,
    pub group_norm_groups: usize,
    pub ffn_expansion: usize,
    pub attention_reduction: usize,
    /// Stem block output channels at strides 2/4/8 plus the stride-16
    /// bottleneck width; strictly increasing.
    pub stem_channels: [usize; 4],
    /// Decoder widths: neck at 14x14, then the three upsampling stages.
    pub decoder_channels: [usize; 4],
    pub skip_order: SkipOrder,
    /// Position-attention rows attend to at most this many (pooled) key
    /// positions; maps with more positions pool keys/values down to fit.
    pub pam_max_positions: usize,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            skip_da_layers: [1, 2, 3].into_iter().collect(),
            patch_size: 16,
            transformer_layers: 12,
            hidden_dim: 768,
            attention_heads: 12,
            num_classes: NUM_CLASSES,
            group_norm_groups: 4,
            ffn_expansion: 4,
            attention_reduction: 8,
            stem_channels: [64, 128, 256, 512],
            decoder_channels: [512, 256, 128, 64],
            skip_order: SkipOrder::ShallowFirst,
            pam_max_positions: 1024,
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Default config for a given variant, with the skip set the variant
    /// implies: DA-bearing variants refine all three skips, the others none.
    pub fn for_variant(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.variant = variant;
        cfg.skip_da_layers = if variant.uses_da_plus() {
            [1, 2, 3].into_iter().collect()
        } else {
            BTreeSet::new()
        };
        cfg
    }

    /// A compact configuration with the same topology and defaults scaled
    /// down for CPU-scale experiments and tests.
    pub fn compact(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::for_variant(variant);
        cfg.transformer_layers = 2;
        cfg.hidden_dim = 64;
        cfg.attention_heads = 4;
        cfg.stem_channels = [8, 16, 32, 64];
        cfg.decoder_channels = [64, 32, 16, 8];
        cfg
    }

    /// Validate every config invariant, returning the config unchanged on
    /// success. Any accepted config can instantiate a model.
    pub fn validated(self) -> Result<ModelConfig, ConfigError> {
        let inv = |msg: String| Err(ConfigError::Invariant(msg));

        if self.num_classes != NUM_CLASSES {
            return inv(format!(
                "num_classes must be {NUM_CLASSES} (background + 8 organs), got {}",
                self.num_classes
            ));
        }
        if self.patch_size == 0 || INPUT_SIZE % self.patch_size != 0 {
            return inv(format!(
                "patch_size must divide {INPUT_SIZE}, got {}",
                self.patch_size
            ));
        }
        if INPUT_SIZE / self.patch_size != TOKEN_GRID {
            return inv(format!(
                "patch_size {} maps the {INPUT_SIZE} input to a {} token grid; \
                 the stride-16 stem requires a {TOKEN_GRID}x{TOKEN_GRID} grid (patch_size 16)",
                self.patch_size,
                INPUT_SIZE / self.patch_size
            ));
        }
        if self.transformer_layers == 0 {
            return inv("transformer_layers must be >= 1".into());
        }
        if self.hidden_dim == 0 || self.attention_heads == 0 {
            return inv("hidden_dim and attention_heads must be >= 1".into());
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return inv(format!(
                "hidden_dim {} must be divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            ));
        }
        if self.group_norm_groups == 0 {
            return inv("group_norm_groups must be >= 1".into());
        }
        if self.ffn_expansion == 0 {
            return inv("ffn_expansion must be >= 1".into());
        }
        if self.attention_reduction == 0 {
            return inv("attention_reduction must be >= 1".into());
        }
        if self.pam_max_positions == 0 {
            return inv("pam_max_positions must be >= 1".into());
        }

        for layer in &self.skip_da_layers {
            if !(1..=3).contains(layer) {
                return inv(format!(
                    "skip_da_layers must be a subset of {{1,2,3}}, got {layer}"
                ));
            }
        }
        if !self.variant.uses_da_plus() && !self.skip_da_layers.is_empty() {
            return inv(format!(
                "variant={} carries no dual-attention blocks, so skip_da_layers must be empty",
                self.variant.as_str()
            ));
        }

        let [c1, c2, c3, c4] = self.stem_channels;
        if !(c1 >= 1 && c1 < c2 && c2 < c3 && c3 < c4) {
            return inv(format!(
                "stem_channels must be strictly increasing and positive, got {:?}",
                self.stem_channels
            ));
        }
        for (name, c) in [("stem", c1), ("stem", c2), ("stem", c3), ("stem", c4)] {
            if c % self.group_norm_groups != 0 {
                return inv(format!(
                    "{name} channel count {c} must be divisible by group_norm_groups {}",
                    self.group_norm_groups
                ));
            }
        }
        let [d0, d1, d2, d3] = self.decoder_channels;
        for d in [d0, d1, d2, d3] {
            if d == 0 || d % self.group_norm_groups != 0 {
                return inv(format!(
                    "decoder channel count {d} must be positive and divisible by group_norm_groups {}",
                    self.group_norm_groups
                ));
            }
        }
        if self.variant.uses_mewb() {
            // One spectral block at the bottleneck and one per decoder stage;
            // each splits its channels four ways.
            for c in [c4, d1, d2, d3] {
                if c % 4 != 0 {
                    return inv(format!(
                        "channel count {c} at a multi-axis block must be divisible by 4"
                    ));
                }
            }
        }
        if self.variant.uses_da_plus() {
            let r = self.attention_reduction;
            if c4 % r != 0 {
                return inv(format!(
                    "bottleneck width {c4} must be divisible by attention_reduction {r}"
                ));
            }
            for layer in &self.skip_da_layers {
                let c = self.skip_channels()[(*layer as usize) - 1];
                if c % r != 0 {
                    return inv(format!(
                        "skip layer {layer} width {c} must be divisible by attention_reduction {r}"
                    ));
                }
            }
        }

        let w = self.loss_weights;
        for (name, v) in [("w_c", w.w_c), ("w_d", w.w_d)] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return inv(format!("loss weight {name} must be in [0,1], got {v}"));
            }
        }
        if (w.w_c + w.w_d - 1.0).abs() > 1e-9 {
            return inv(format!(
                "loss weights must sum to 1, got w_c + w_d = {}",
                w.w_c + w.w_d
            ));
        }

        let o = &self.optimizer;
        for (name, v) in [
            ("learning_rate", o.learning_rate),
            ("momentum", o.momentum),
            ("weight_decay", o.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return inv(format!("optimizer.{name} must be finite and >= 0, got {v}"));
            }
        }
        if o.learning_rate <= 0.0 {
            return inv("optimizer.learning_rate must be positive".into());
        }
        if o.batch_size == 0 {
            return inv("optimizer.batch_size must be >= 1".into());
        }
        if o.max_epochs == 0 {
            return inv("optimizer.max_epochs must be >= 1".into());
        }

        Ok(self)
    }

    /// Channel widths of the three skip connections, shallowest (highest
    /// resolution) first.
    pub fn skip_channels(&self) -> [usize; 3] {
        [
            self.stem_channels[0],
            self.stem_channels[1],
            self.stem_channels[2],
        ]
    }

    /// Skip index (0-based, shallowest first) refined by table layer `layer`
    /// (1-based), honoring the configured ordering.
    pub fn skip_index_for_layer(&self, layer: u8) -> usize {
        match self.skip_order {
            SkipOrder::ShallowFirst => (layer as usize) - 1,
            SkipOrder::DeepFirst => 3 - layer as usize,
        }
    }

    /// Serialize to the flat `key = value` format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant.as_str());
        let skips: Vec<String> = self.skip_da_layers.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(
            s,
            "skip_da_layers = {}",
            if skips.is_empty() {
                "none".to_string()
            } else {
                skips.join(",")
            }
        );
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "transformer_layers = {}", self.transformer_layers);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "attention_heads = {}", self.attention_heads);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "group_norm_groups = {}", self.group_norm_groups);
        let _ = writeln!(s, "ffn_expansion = {}", self.ffn_expansion);
        let _ = writeln!(s, "attention_reduction = {}", self.attention_reduction);
        let _ = writeln!(
            s,
            "stem_channels = {}",
            join_usizes(&self.stem_channels)
        );
        let _ = writeln!(
            s,
            "decoder_channels = {}",
            join_usizes(&self.decoder_channels)
        );
        let _ = writeln!(s, "skip_order = {}", self.skip_order.as_str());
        let _ = writeln!(s, "pam_max_positions = {}", self.pam_max_positions);
        let _ = writeln!(s, "loss_weights.w_c = {}", fmt_f64(self.loss_weights.w_c));
        let _ = writeln!(s, "loss_weights.w_d = {}", fmt_f64(self.loss_weights.w_d));
        let _ = writeln!(
            s,
            "optimizer.learning_rate = {}",
            fmt_f64(self.optimizer.learning_rate)
        );
        let _ = writeln!(s, "optimizer.momentum = {}", fmt_f64(self.optimizer.momentum));
        let _ = writeln!(
            s,
            "optimizer.weight_decay = {}",
            fmt_f64(self.optimizer.weight_decay)
        );
        let _ = writeln!(s, "optimizer.batch_size = {}", self.optimizer.batch_size);
        let _ = writeln!(s, "optimizer.max_epochs = {}", self.optimizer.max_epochs);
        let _ = writeln!(s, "optimizer.schedule = {}", self.optimizer.schedule.as_str());
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Parse the flat `key = value` format. Unknown keys are rejected.
    /// Omitted keys keep their defaults; `skip_da_layers` defaults to the
    /// variant-implied set when absent.
    pub fn parse(text: &str) -> Result<ModelConfig, ConfigError> {
        let mut cfg = ModelConfig::default();
        let mut saw_variant = false;
        let mut saw_skips = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::Parse(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let ctx = |e: std::num::ParseIntError| {
                ConfigError::Parse(format!("line {}: {key}: {e}", lineno + 1))
            };
            let ctxf = |e: std::num::ParseFloatError| {
                ConfigError::Parse(format!("line {}: {key}: {e}", lineno + 1))
            };
            match key {
                "variant" => {
                    cfg.variant = Variant::parse(value)?;
                    saw_variant = true;
                }
                "skip_da_layers" => {
                    cfg.skip_da_layers = parse_skip_set(value)?;
                    saw_skips = true;
                }
                "patch_size" => cfg.patch_size = value.parse().map_err(ctx)?,
                "transformer_layers" => cfg.transformer_layers = value.parse().map_err(ctx)?,
                "hidden_dim" => cfg.hidden_dim = value.parse().map_err(ctx)?,
                "attention_heads" => cfg.attention_heads = value.parse().map_err(ctx)?,
                "num_classes" => cfg.num_classes = value.parse().map_err(ctx)?,
                "group_norm_groups" => cfg.group_norm_groups = value.parse().map_err(ctx)?,
                "ffn_expansion" => cfg.ffn_expansion = value.parse().map_err(ctx)?,
                "attention_reduction" => cfg.attention_reduction = value.parse().map_err(ctx)?,
                "stem_channels" => cfg.stem_channels = parse_usize4(key, value)?,
                "decoder_channels" => cfg.decoder_channels = parse_usize4(key, value)?,
                "skip_order" => cfg.skip_order = SkipOrder::parse(value)?,
                "pam_max_positions" => cfg.pam_max_positions = value.parse().map_err(ctx)?,
                "loss_weights.w_c" => cfg.loss_weights.w_c = value.parse().map_err(ctxf)?,
                "loss_weights.w_d" => cfg.loss_weights.w_d = value.parse().map_err(ctxf)?,
                "optimizer.learning_rate" => {
                    cfg.optimizer.learning_rate = value.parse().map_err(ctxf)?
                }
                "optimizer.momentum" => cfg.optimizer.momentum = value.parse().map_err(ctxf)?,
                "optimizer.weight_decay" => {
                    cfg.optimizer.weight_decay = value.parse().map_err(ctxf)?
                }
                "optimizer.batch_size" => cfg.optimizer.batch_size = value.parse().map_err(ctx)?,
                "optimizer.max_epochs" => cfg.optimizer.max_epochs = value.parse().map_err(ctx)?,
                "optimizer.schedule" => cfg.optimizer.schedule = Schedule::parse(value)?,
                "seed" => cfg.seed = value.parse().map_err(ctx)?,
                other => {
                    return Err(ConfigError::Parse(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }

        if saw_variant && !saw_skips {
            cfg.skip_da_layers = if cfg.variant.uses_da_plus() {
                [1, 2, 3].into_iter().collect()
            } else {
                BTreeSet::new()
            };
        }
        cfg.validated()
    }

    pub fn from_file(path: &Path) -> Result<ModelConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        ModelConfig::parse(&text)
    }

    pub fn to_file(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usize4(key: &str, value: &str) -> Result<[usize; 4], ConfigError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(ConfigError::Parse(format!(
            "{key}: expected 4 comma-separated integers, got {value:?}"
        )));
    }
    let mut out = [0usize; 4];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse()
            .map_err(|e| ConfigError::Parse(format!("{key}: {e}")))?;
    }
    Ok(out)
}

fn parse_skip_set(value: &str) -> Result<BTreeSet<u8>, ConfigError> {
    if value.is_empty() || value == "none" {
        return Ok(BTreeSet::new());
    }
    let mut set = BTreeSet::new();
    for part in value.split(',') {
        let layer: u8 = part.trim().parse().map_err(|e| {
            ConfigError::Parse(format!("skip_da_layers: bad entry {part:?}: {e}"))
        })?;
        set.insert(layer);
    }
    Ok(set)
}

/// Format a float so that round-tripping through the config text is lossless.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_accepted() {
        let cfg = ModelConfig::default().validated().unwrap();
        assert_eq!(cfg.variant, Variant::Full);
        assert_eq!(
            cfg.skip_da_layers,
            [1u8, 2, 3].into_iter().collect::<BTreeSet<_>>()
        );
        assert_eq!(cfg.patch_size, 16);
        assert_eq!(cfg.transformer_layers, 12);
        assert_eq!(cfg.hidden_dim, 768);
        assert_eq!(cfg.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.optimizer.weight_decay, 1e-4);
        assert_eq!(cfg.optimizer.batch_size, 6);
        assert_eq!(cfg.optimizer.max_epochs, 200);
    }

    #[test]
    fn loss_weight_sum_enforced() {
        let mut cfg = ModelConfig::default();
        cfg.loss_weights = LossWeights::new(0.6, 0.4);
        assert!(cfg.clone().validated().is_ok());
        cfg.loss_weights = LossWeights::new(0.6, 0.6);
        let err = cfg.validated().unwrap_err();
        assert!(err.to_string().contains("sum to 1"), "{err}");
    }

    #[test]
    fn baseline_rejects_skip_layers() {
        let mut cfg = ModelConfig::for_variant(Variant::Baseline);
        assert!(cfg.clone().validated().is_ok());
        cfg.skip_da_layers.insert(1);
        assert!(cfg.validated().is_err());
    }

    #[test]
    fn only_mewb_rejects_skip_layers() {
        let mut cfg = ModelConfig::for_variant(Variant::OnlyMewb);
        cfg.skip_da_layers.insert(2);
        assert!(cfg.validated().is_err());
    }

    #[test]
    fn patch_size_must_match_token_grid() {
        let mut cfg = ModelConfig::default();
        cfg.patch_size = 13;
        assert!(cfg.clone().validated().is_err());
        cfg.patch_size = 32; // divides 224 but yields a 7x7 grid
        assert!(cfg.validated().is_err());
    }

    #[test]
    fn organ_ids_are_stable() {
        assert_eq!(OrganClass::Background.id(), 0);
        assert_eq!(OrganClass::Aorta.id(), 1);
        assert_eq!(OrganClass::Stomach.id(), 8);
        assert_eq!(OrganClass::from_id(3), Some(OrganClass::KidneyLeft));
        assert_eq!(OrganClass::from_id(9), None);
        assert_eq!(OrganClass::ORGANS.len(), 8);
        assert_eq!(OrganClass::ALL.len(), 9);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = ModelConfig::compact(Variant::OnlyDaPlus);
        cfg.skip_da_layers = [1u8, 3].into_iter().collect();
        cfg.loss_weights = LossWeights::new(0.7, 0.3);
        cfg.optimizer.learning_rate = 0.004999999999999999;
        cfg.seed = 987654321;
        let text = cfg.to_text();
        let parsed = ModelConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn parse_rejects_unknown_keys() {
        let err = ModelConfig::parse("variannt = full\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn variant_implies_default_skip_set() {
        let cfg = ModelConfig::parse("variant = baseline\n").unwrap();
        assert!(cfg.skip_da_layers.is_empty());
        let cfg = ModelConfig::parse("variant = full\n").unwrap();
        assert_eq!(cfg.skip_da_layers.len(), 3);
    }

    #[test]
    fn skip_layer_ordering_maps_to_resolutions() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.skip_index_for_layer(1), 0);
        assert_eq!(cfg.skip_index_for_layer(3), 2);
        let mut deep = ModelConfig::default();
        deep.skip_order = SkipOrder::DeepFirst;
        assert_eq!(deep.skip_index_for_layer(1), 2);
        assert_eq!(deep.skip_index_for_layer(3), 0);
    }
}
