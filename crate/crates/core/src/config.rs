//! Model configurations: the three named variants, a desk-scale variant,
//! validation, and JSON config files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CnnBackboneKind {
    Resnet18,
    Resnet34,
    Resnet50,
    Resnet101,
    Densenet121,
    Densenet169,
    Densenet201,
    /// Stem of 16 channels and one basic block per stage (16/32/64).
    Tiny,
}

impl CnnBackboneKind {
    pub const ALL: [CnnBackboneKind; 8] = [
        CnnBackboneKind::Resnet18,
        CnnBackboneKind::Resnet34,
        CnnBackboneKind::Resnet50,
        CnnBackboneKind::Resnet101,
        CnnBackboneKind::Densenet121,
        CnnBackboneKind::Densenet169,
        CnnBackboneKind::Densenet201,
        CnnBackboneKind::Tiny,
    ];

    /// Channels of the stride-4, stride-8 and stride-16 feature maps.
    pub fn channels(self) -> [usize; 3] {
        match self {
            CnnBackboneKind::Resnet18 | CnnBackboneKind::Resnet34 => [64, 128, 256],
            CnnBackboneKind::Resnet50 | CnnBackboneKind::Resnet101 => [256, 512, 1024],
            CnnBackboneKind::Densenet121 => [256, 512, 1024],
            CnnBackboneKind::Densenet169 => [256, 512, 1280],
            CnnBackboneKind::Densenet201 => [256, 512, 1792],
            CnnBackboneKind::Tiny => [16, 32, 64],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CnnBackboneKind::Resnet18 => "resnet18",
            CnnBackboneKind::Resnet34 => "resnet34",
            CnnBackboneKind::Resnet50 => "resnet50",
            CnnBackboneKind::Resnet101 => "resnet101",
            CnnBackboneKind::Densenet121 => "densenet121",
            CnnBackboneKind::Densenet169 => "densenet169",
            CnnBackboneKind::Densenet201 => "densenet201",
            CnnBackboneKind::Tiny => "tiny",
        }
    }
}

impl fmt::Display for CnnBackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CnnBackboneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        CnnBackboneKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| format!("unknown backbone `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlfConfig {
    pub dim_small: usize,
    pub dim_large: usize,
    /// Transformer encoders on the small (deep) level.
    pub depth_small: usize,
    /// Transformer encoders on the large (shallow) level.
    pub depth_large: usize,
    /// MLP expansion ratio of the encoders.
    pub mlp_ratio: f64,
    pub num_heads: usize,
    /// Heads of the large level when it differs from `num_heads` (which then
    /// applies to the small level only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads_large: Option<usize>,
}

impl DlfConfig {
    pub fn heads_small(&self) -> usize {
        self.num_heads
    }

    pub fn heads_large(&self) -> usize {
        self.num_heads_large.unwrap_or(self.num_heads)
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (self.mlp_ratio * dim as f64).round() as usize
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub cnn: CnnBackboneKind,
    /// Token dimension D' of the first transformer stage.
    pub embed_dim: usize,
    pub stage_depths: [usize; 3],
    pub stage_heads: [usize; 3],
    pub window_size: usize,
    pub dlf: DlfConfig,
    pub num_classes: usize,
    pub input_hw: [usize; 2],
    /// Channel width of the decoder.
    pub decoder_dim: usize,
    #[serde(default = "yes")]
    pub use_dlf: bool,
    /// Keep batch norms on their running statistics even while training.
    #[serde(default)]
    pub freeze_bn: bool,
    /// Zero the last norm scale of every residual block at initialization.
    #[serde(default)]
    pub zero_init_residual: bool,
}

pub const NAMED_MODELS: [&str; 3] = ["hiformer-s", "hiformer-b", "hiformer-l"];

fn named(name: &str, cnn: CnnBackboneKind, depth_small: usize, mlp_ratio: f64, heads: usize) -> ModelConfig {
    ModelConfig {
        name: name.to_string(),
        cnn,
        embed_dim: 96,
        stage_depths: [2, 2, 6],
        stage_heads: [3, 6, 12],
        window_size: 7,
        dlf: DlfConfig {
            dim_small: 384,
            dim_large: 96,
            depth_small,
            depth_large: 1,
            mlp_ratio,
            num_heads: heads,
            num_heads_large: None,
        },
        num_classes: 9,
        input_hw: [224, 224],
        decoder_dim: 96,
        use_dlf: true,
        freeze_bn: false,
        zero_init_residual: false,
    }
}

/// Desk-scale configuration used by tests and quick experiments.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        name: "hiformer-tiny".to_string(),
        cnn: CnnBackboneKind::Tiny,
        embed_dim: 8,
        stage_depths: [2, 2, 2],
        stage_heads: [1, 2, 4],
        window_size: 2,
        dlf: DlfConfig {
            dim_small: 32,
            dim_large: 8,
            depth_small: 1,
            depth_large: 1,
            mlp_ratio: 2.0,
            num_heads: 2,
            num_heads_large: None,
        },
        num_classes: 2,
        input_hw: [32, 32],
        decoder_dim: 8,
        use_dlf: true,
        freeze_bn: false,
        zero_init_residual: false,
    }
}

/// Named configuration, or a JSON config file when `name` is a path.
pub fn build_config(name: &str) -> Result<ModelConfig> {
    let cfg = match name.to_ascii_lowercase().as_str() {
        "hiformer-s" | "s" => named("hiformer-s", CnnBackboneKind::Resnet34, 1, 1.0, 3),
        "hiformer-b" | "b" => named("hiformer-b", CnnBackboneKind::Resnet50, 2, 2.0, 6),
        "hiformer-l" | "l" => named("hiformer-l", CnnBackboneKind::Resnet34, 4, 4.0, 6),
        "hiformer-tiny" | "tiny" => tiny_config(),
        _ if Path::new(name).is_file() => ModelConfig::from_file(name)?,
        _ => return Err(Error::UnknownModel(name.to_string())),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn invalid(rule: &'static str, detail: String) -> Error {
    Error::InvalidConfig { rule, detail }
}

impl ModelConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Channel width of transformer stage `i`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Token grid of stage `i` (stride 4, 8, 16).
    pub fn stage_grid(&self, i: usize) -> (usize, usize) {
        (self.input_hw[0] >> (i + 2), self.input_hw[1] >> (i + 2))
    }

    /// Checks every structural rule; the error names the violated one.
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_hw;
        if self.embed_dim == 0 || self.window_size == 0 || self.num_classes == 0 || self.decoder_dim == 0 {
            return Err(invalid(
                "positive-sizes",
                "embed_dim, window_size, num_classes and decoder_dim must be positive".into(),
            ));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(invalid("input-divisible-by-16", format!("input {h}x{w}")));
        }
        for i in 0..3 {
            let (depth, heads, dim) = (self.stage_depths[i], self.stage_heads[i], self.stage_dim(i));
            if depth == 0 || depth % 2 != 0 {
                return Err(invalid(
                    "stage-depths-even",
                    format!("stage {i} has depth {depth}; blocks come in regular/shifted pairs"),
                ));
            }
            if heads == 0 || dim % heads != 0 {
                return Err(invalid("stage-heads-divide-dim", format!("stage {i}: {heads} heads for dim {dim}")));
            }
            let (gh, gw) = self.stage_grid(i);
            if gh % self.window_size != 0 || gw % self.window_size != 0 {
                return Err(invalid(
                    "grid-divisible-by-window",
                    format!("stage {i} grid {gh}x{gw}, window {}", self.window_size),
                ));
            }
        }
        let d = &self.dlf;
        if d.dim_small != 4 * d.dim_large {
            return Err(invalid(
                "dlf-small-is-4x-large",
                format!("dim_small {} vs dim_large {}", d.dim_small, d.dim_large),
            ));
        }
        if d.dim_large != self.embed_dim {
            return Err(invalid(
                "dlf-dims-match-trunk",
                format!("dim_large {} vs embed_dim {}", d.dim_large, self.embed_dim),
            ));
        }
        if d.depth_small == 0 || d.depth_large == 0 {
            return Err(invalid("dlf-depth-positive", format!("S={} L={}", d.depth_small, d.depth_large)));
        }
        if !(d.mlp_ratio.is_finite() && d.mlp_ratio > 0.0) || d.mlp_hidden(d.dim_large) == 0 {
            return Err(invalid("dlf-mlp-ratio-positive", format!("r={}", d.mlp_ratio)));
        }
        for (heads, what) in [(d.heads_small(), "small"), (d.heads_large(), "large")] {
            if heads == 0 || d.dim_small % heads != 0 || d.dim_large % heads != 0 {
                return Err(invalid(
                    "dlf-heads-divide-dims",
                    format!("{heads} {what}-level heads for dims {} and {}", d.dim_small, d.dim_large),
                ));
            }
        }
        Ok(())
    }
}

/// Learnable element counts, total and per top-level module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub per_module: Vec<(String, usize)>,
}

impl ParamReport {
    /// Groups `(name, count)` pairs by the first dotted component of the name.
    pub fn from_named<'a>(items: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut per_module: Vec<(String, usize)> = Vec::new();
        let mut total = 0;
        for (name, n) in items {
            let module = name.split('.').next().unwrap_or(name);
            total += n;
            match per_module.iter_mut().find(|(m, _)| m == module) {
                Some((_, c)) => *c += n,
                None => per_module.push((module.to_string(), n)),
            }
        }
        ParamReport { total, per_module }
    }

    pub fn module(&self, name: &str) -> usize {
        self.per_module.iter().find(|(m, _)| m == name).map_or(0, |(_, c)| *c)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (m, c) in &self.per_module {
            writeln!(f, "{m:<10} {c:>12}  ({:.2} M)", *c as f64 / 1e6)?;
        }
        write!(f, "{:<10} {:>12}  ({:.2} M)", "total", self.total, self.total as f64 / 1e6)
    }
}
