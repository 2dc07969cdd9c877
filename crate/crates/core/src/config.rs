//! Run configuration: one TOML file with six sections (`[tokenizer]`,
//! `[entropy-model]`, `[schedule]`, `[coder]`, `[corpus]`, `[run]`).
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. Every section has a desk-scale default that trains in
//! minutes; the full-scale settings remain expressible through the same
//! fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

/// Multi-scale tokenizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Number of stride-2 downsampling stages; must satisfy
    /// 2^num_stages == max(scale_factors).
    pub num_stages: usize,
    /// Channel width of the stem and of each stage is
    /// base_channels * channel_multipliers[i]; when the list is shorter
    /// than num_stages + 1 its last entry is repeated.
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Dimension of the latent vectors that get quantized.
    pub latent_dim: usize,
    pub num_scales: usize,
    /// Downsampling factor per scale, strictly increasing powers of two
    /// (finest first).
    pub scale_factors: Vec<usize>,
    /// Window side per scale in token units, listed coarsest first;
    /// window_sides[i] * descending_factor[i] must be constant so each
    /// window covers the same pixel footprint at every scale.
    pub window_sides: Vec<usize>,
    pub groupnorm_groups: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Weight on the commitment term of the codebook loss.
    pub commitment_beta: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            num_stages: 4,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4, 4],
            latent_dim: 8,
            num_scales: 3,
            scale_factors: vec![4, 8, 16],
            window_sides: vec![1, 2, 4],
            groupnorm_groups: 4,
            codebook_size: 64,
            commitment_beta: 0.25,
        }
    }
}

impl TokenizerConfig {
    /// Channel widths for the stem (index 0) and each stage (1..=num_stages),
    /// with the multiplier list extended by its last entry as needed.
    pub fn channel_widths(&self) -> Vec<usize> {
        let last = *self.channel_multipliers.last().unwrap_or(&1);
        (0..=self.num_stages)
            .map(|i| {
                let m = self.channel_multipliers.get(i).copied().unwrap_or(last);
                self.base_channels * m
            })
            .collect()
    }

    /// Scale factors listed coarsest first (descending).
    pub fn factors_coarse_first(&self) -> Vec<usize> {
        let mut f = self.scale_factors.clone();
        f.sort_unstable_by(|a, b| b.cmp(a));
        f
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_factors.is_empty() {
            return Err(Error::config("scale_factors must be non-empty"));
        }
        if self.num_scales != self.scale_factors.len() {
            return Err(Error::config(format!(
                "num_scales = {} but {} scale factors given",
                self.num_scales,
                self.scale_factors.len()
            )));
        }
        for w in self.scale_factors.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config(
                    "scale_factors must be strictly increasing",
                ));
            }
        }
        for &f in &self.scale_factors {
            if f == 0 || !f.is_power_of_two() {
                return Err(Error::config(format!(
                    "scale factor {f} is not a power of two"
                )));
            }
        }
        let max_f = *self.scale_factors.last().unwrap();
        if self.num_stages == 0 || (1usize << self.num_stages) != max_f {
            return Err(Error::config(format!(
                "num_stages = {} cannot reach a /{} latent grid: need log2({}) = {} stride-2 stages",
                self.num_stages,
                max_f,
                max_f,
                max_f.trailing_zeros()
            )));
        }
        if self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::config("base_channels and latent_dim must be positive"));
        }
        if self.channel_multipliers.is_empty() {
            return Err(Error::config("channel_multipliers must be non-empty"));
        }
        if self.channel_multipliers.len() > self.num_stages + 1 {
            return Err(Error::config(format!(
                "{} channel multipliers for {} stages (want at most num_stages + 1)",
                self.channel_multipliers.len(),
                self.num_stages
            )));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::config("channel multipliers must be positive"));
        }
        if self.groupnorm_groups == 0 {
            return Err(Error::config("groupnorm_groups must be positive"));
        }
        for c in self.channel_widths() {
            if c % self.groupnorm_groups != 0 {
                return Err(Error::config(format!(
                    "groupnorm_groups = {} does not divide channel width {}",
                    self.groupnorm_groups, c
                )));
            }
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook_size must be at least 2"));
        }
        if self.window_sides.len() != self.num_scales {
            return Err(Error::config(format!(
                "{} window sides for {} scales",
                self.window_sides.len(),
                self.num_scales
            )));
        }
        let desc = self.factors_coarse_first();
        let footprint = self.window_sides[0] * desc[0];
        for (i, (&w, &f)) in self.window_sides.iter().zip(desc.iter()).enumerate() {
            if w == 0 {
                return Err(Error::config("window sides must be positive"));
            }
            if w * f != footprint {
                return Err(Error::config(format!(
                    "window side {} at scale factor /{} covers {} pixels, expected {} (scale index {})",
                    w,
                    f,
                    w * f,
                    footprint,
                    i
                )));
            }
        }
        if !self.commitment_beta.is_finite() || self.commitment_beta < 0.0 {
            return Err(Error::config("commitment_beta must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Masked-transformer entropy model settings. The vocabulary size is the
/// codebook size and the input width is the latent dimension, both taken
/// from [`TokenizerConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EntropyModelConfig {
    fn default() -> Self {
        EntropyModelConfig {
            depth: 2,
            heads: 2,
            model_dim: 32,
            mlp_ratio: 4,
        }
    }
}

impl EntropyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.model_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::config(
                "entropy model depth, heads, model_dim and mlp_ratio must be positive",
            ));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim = {} not divisible by heads = {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Which (τ, λ) table entry a training run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// "low" or "high" bitrate regime.
    pub regime: String,
    /// Index into the regime's λ list.
    pub level: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            regime: "high".to_string(),
            level: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        crate::losses::schedule(&self.regime, self.level).map(|_| ())
    }
}

/// Range coder settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoderConfig {
    /// Probabilities are quantized to integer counts summing to
    /// 2^precision.
    pub precision: u32,
}

impl Default for CoderConfig {
    fn default() -> Self {
        CoderConfig { precision: 16 }
    }
}

impl CoderConfig {
    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        if self.precision < 2 || self.precision > 24 {
            return Err(Error::config(format!(
                "coder precision {} outside the supported range 2..=24",
                self.precision
            )));
        }
        if (1u64 << self.precision) < codebook_size as u64 {
            return Err(Error::config(format!(
                "2^{} < codebook size {}: every symbol needs a count of at least 1",
                self.precision, codebook_size
            )));
        }
        Ok(())
    }
}

/// Synthetic corpus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// One of "gradients", "checkerboards", "blobs", "textures", "mixed".
    pub kind: String,
    pub count: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub seed: u64,
    /// When set, load PPM images from this directory instead of
    /// generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            kind: "mixed".to_string(),
            count: 24,
            image_size: 16,
            seed: 7,
            path: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        const KINDS: [&str; 5] = ["gradients", "checkerboards", "blobs", "textures", "mixed"];
        if !KINDS.contains(&self.kind.as_str()) {
            return Err(Error::config(format!(
                "unknown corpus kind {:?} (expected one of {:?})",
                self.kind, KINDS
            )));
        }
        if self.count == 0 {
            return Err(Error::config("corpus count must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("corpus image_size must be positive"));
        }
        Ok(())
    }
}

/// Optimization settings shared by the three training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Steps per stage, indexed by stage - 1.
    pub steps: [usize; 3],
    /// Learning rate per stage, indexed by stage - 1.
    pub lr: [f64; 3],
    pub batch_size: usize,
    /// Global gradient-norm clip applied before every step.
    pub clip_norm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: [400, 300, 200],
            lr: [0.05, 0.05, 0.02],
            batch_size: 4,
            clip_norm: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps.iter().any(|&s| s == 0) {
            return Err(Error::config("every stage needs at least one step"));
        }
        if self.lr.iter().any(|&l| !l.is_finite() || l <= 0.0) {
            return Err(Error::config("learning rates must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be positive and finite"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Top-level config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub tokenizer: TokenizerConfig,
    #[serde(rename = "entropy-model")]
    pub entropy_model: EntropyModelConfig,
    pub schedule: ScheduleConfig,
    pub coder: CoderConfig,
    pub corpus: CorpusConfig,
    pub run: RunConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.entropy_model.validate()?;
        self.schedule.validate()?;
        self.coder.validate(self.tokenizer.codebook_size)?;
        self.corpus.validate()?;
        self.run.validate()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(s).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Config> {
        let s = std::fs::read_to_string(path)?;
        Config::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// FNV-1a over the serialized form; embedded in bundle metadata so a
    /// bundle can detect being paired with a different configuration.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_toml_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let s = cfg.to_toml_string();
        let back = Config::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = Config::default().to_toml_string();
        s.push_str("\n[tokenizer.extra]\nfoo = 1\n");
        assert!(Config::from_toml_str(&s).is_err());
        let bad = "[tokenizer]\nnot_a_field = 3\n";
        assert!(Config::from_toml_str(bad).is_err());
    }

    #[test]
    fn full_scale_settings_are_expressible() {
        let mut cfg = Config::default();
        cfg.tokenizer.num_stages = 6;
        cfg.tokenizer.base_channels = 128;
        cfg.tokenizer.channel_multipliers = vec![1, 1, 2, 2, 4, 4, 4];
        cfg.tokenizer.latent_dim = 32;
        cfg.tokenizer.scale_factors = vec![16, 32, 64];
        cfg.tokenizer.window_sides = vec![4, 8, 16];
        cfg.tokenizer.codebook_size = 4096;
        cfg.tokenizer.groupnorm_groups = 32;
        cfg.entropy_model = EntropyModelConfig {
            depth: 12,
            heads: 8,
            model_dim: 768,
            mlp_ratio: 4,
        };
        cfg.validate().unwrap();
        assert_eq!(
            cfg.tokenizer.channel_widths(),
            vec![128, 128, 256, 256, 512, 512, 512]
        );
    }

    #[test]
    fn stage_count_must_reach_the_coarsest_scale() {
        let mut cfg = TokenizerConfig::default();
        cfg.num_stages = 3;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stride-2"), "{err}");
    }

    #[test]
    fn window_footprint_mismatch_is_rejected() {
        let mut cfg = TokenizerConfig::default();
        cfg.window_sides = vec![1, 2, 8];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn multiplier_list_extends_with_last_entry() {
        let cfg = TokenizerConfig::default();
        assert_eq!(cfg.channel_widths(), vec![8, 16, 32, 32, 32]);
    }
}
