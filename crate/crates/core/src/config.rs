//! Run configuration.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::corpus::DataFormat;
use crate::error::{Error, Result};
use crate::sampler::{SamplingMode, Weighting};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain encoder-decoder, no attention.
    Seq2seq,
    /// Encoder-decoder with attention over source states (residual when stacked).
    Seq2seqAttn,
    /// Latent bag chosen as the k most probable words.
    LbowTopk,
    /// Latent bag sampled with Gumbel top-k.
    LbowGumbel,
    /// Planner and decoder trained separately; the decoder sees only the bag.
    BowHard,
    /// The decoder sees the true target bag.
    CheatingBow,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Seq2seq,
        Variant::Seq2seqAttn,
        Variant::LbowTopk,
        Variant::LbowGumbel,
        Variant::BowHard,
        Variant::CheatingBow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Seq2seq => "seq2seq",
            Variant::Seq2seqAttn => "seq2seq_attn",
            Variant::LbowTopk => "lbow_topk",
            Variant::LbowGumbel => "lbow_gumbel",
            Variant::BowHard => "bow_hard",
            Variant::CheatingBow => "cheating_bow",
        }
    }

    /// Variants with a planner and a bag-conditioned decoder.
    pub fn uses_bag(self) -> bool {
        !matches!(self, Variant::Seq2seq | Variant::Seq2seqAttn)
    }

    pub fn uses_attention(self) -> bool {
        self != Variant::Seq2seq
    }

    /// Whether the decoder reads the source encoding.
    pub fn reads_source(self) -> bool {
        self != Variant::BowHard
    }
}

impl core::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> core::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Bag selection rule; `auto` follows the variant (gumbel for `lbow_gumbel`,
/// deterministic top-k otherwise).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingChoice {
    Auto,
    Gumbel,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub bow_emb: bool,
    pub copy: bool,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Neighbor distributions per source word (`l`).
    pub neighbors: usize,
    /// Bag size (`k`).
    pub bag_size: usize,
    pub weighting: Weighting,
    pub sampling: SamplingChoice,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LbowTopk,
            bow_emb: false,
            copy: false,
            emb_dim: 32,
            hidden_dim: 32,
            layers: 1,
            neighbors: 3,
            bag_size: 10,
            weighting: Weighting::Perturbed,
            sampling: SamplingChoice::Auto,
        }
    }
}

impl ModelConfig {
    pub fn sampling_mode(&self) -> SamplingMode {
        match (self.sampling, self.variant) {
            (SamplingChoice::Gumbel, _) | (SamplingChoice::Auto, Variant::LbowGumbel) => SamplingMode::Gumbel,
            _ => SamplingMode::Deterministic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.bag_size < 1 {
            return bad("bag_size (k) must be at least 1".into());
        }
        if self.neighbors < 1 {
            return bad("neighbors (l) must be at least 1".into());
        }
        if self.emb_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return bad("emb_dim, hidden_dim and layers must be positive".into());
        }
        if (self.bow_emb || self.copy) && !self.variant.uses_bag() {
            return bad(format!("extensions bow_emb/copy need a bag-conditioned variant, not {}", self.variant));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_bow: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Held-out instances decoded after each epoch for the per-epoch report (0 = none).
    pub epoch_eval_size: usize,
    /// 1 = greedy decoding.
    pub beam_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_bow: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            max_len: 16,
            seed: 1,
            clip_norm: 5.0,
            epoch_eval_size: 64,
            beam_width: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda_bow >= 0.0 && self.lambda_bow.is_finite()) {
            return bad("lambda_bow must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.beam_width < 1 {
            return bad("beam_width must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_format: DataFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stoplist: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<String>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_format: DataFormat::Quora,
            train: None,
            test: None,
            vocab: None,
            stoplist: None,
            checkpoint_dir: None,
            report_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::default();
        c.model.bag_size = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.max_len = 1;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.variant = Variant::Seq2seq;
        c.model.copy = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sampling_follows_variant() {
        let mut m = ModelConfig::default();
        assert_eq!(m.sampling_mode(), SamplingMode::Deterministic);
        m.variant = Variant::LbowGumbel;
        assert_eq!(m.sampling_mode(), SamplingMode::Gumbel);
        m.sampling = SamplingChoice::Deterministic;
        assert_eq!(m.sampling_mode(), SamplingMode::Deterministic);
    }
}
