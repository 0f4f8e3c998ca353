use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::encoder::{DocStrategy, EncoderConfig, SegmentPooling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// First segment only, pooled, linear head.
    Truncate,
    /// Per-segment pooled vectors averaged, linear head.
    HierMean,
    /// Per-segment pooled vectors, elementwise max, linear head.
    HierMax,
    /// Label-wise attention over all stacked content tokens.
    Laat,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Truncate, Strategy::HierMean, Strategy::HierMax, Strategy::Laat];

    pub fn doc_strategy(self) -> DocStrategy {
        match self {
            Strategy::Truncate => DocStrategy::Truncate,
            Strategy::HierMean | Strategy::HierMax => DocStrategy::HierSegments,
            Strategy::Laat => DocStrategy::StackedTokens,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Truncate => "truncate",
            Strategy::HierMean => "hier_mean",
            Strategy::HierMax => "hier_max",
            Strategy::Laat => "laat",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected truncate, hier_mean, hier_max or laat)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision {s:?} (expected f32 or f64)")),
        }
    }
}

/// Encoder and head sizes. The vocabulary size comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub pooling: SegmentPooling,
    /// Inner attention width of the label-wise head; `None` ties it to `d_model`.
    pub d_attn: Option<usize>,
    pub head_bias: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let e = EncoderConfig::desk(4);
        Self {
            d_model: e.d_model,
            n_heads: e.n_heads,
            n_layers: e.n_layers,
            d_ff: e.d_ff,
            max_len: e.max_len,
            pooling: e.pooling,
            d_attn: None,
            head_bias: true,
        }
    }
}

impl ArchConfig {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
            pooling: self.pooling,
        }
    }

    pub fn d_attn(&self) -> usize {
        self.d_attn.unwrap_or(self.d_model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub arch: ArchConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation micro-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Decision threshold used for validation scoring.
    pub threshold: f64,
    /// Initialize head biases to the training label log-odds.
    pub prior_bias_init: bool,
    /// Stop as soon as validation micro-F1 reaches this value.
    pub stop_at_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Laat,
            arch: ArchConfig::default(),
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 20,
            patience: 3,
            seed: 42,
            precision: Precision::F32,
            threshold: 0.5,
            prior_bias_init: true,
            stop_at_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return fail("batch_size, max_epochs and patience must be positive".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!("patience ({}) exceeds max_epochs ({})", self.patience, self.max_epochs));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if self.arch.d_attn == Some(0) {
            return fail("d_attn must be positive".into());
        }
        if self.prior_bias_init && !self.arch.head_bias {
            return fail("prior_bias_init requires head_bias".into());
        }
        self.arch.encoder(4).validate()?;
        Ok(())
    }

    /// Choices the method description leaves open, recorded with each model.
    pub fn unreported_choices(&self) -> Vec<String> {
        vec![
            "loss: per-label binary cross-entropy with logits, mean over batch and labels".into(),
            format!("optimizer: adam lr={} beta1=0.9 beta2=0.999 eps=1e-8", self.learning_rate),
            format!("batch_size: {}", self.batch_size),
            format!("epoch budget: max_epochs={} patience={}", self.max_epochs, self.patience),
            format!("decision threshold: {} inclusive", self.threshold),
            format!("label-wise attention width: {}", self.arch.d_attn()),
            format!("head bias: {} (prior log-odds init: {})", self.arch.head_bias, self.prior_bias_init),
        ]
    }
}
