use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coarse::SimilarityConfig;
use crate::encoders::SentencePooling;
use crate::error::{Error, Result};
use crate::metrics::MilPooling;

/// Which objective trains the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Coarse-to-fine teacher distilled into the matching head.
    Full,
    MilNce,
    MilMargin,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::MilNce => "mil_nce",
            Method::MilMargin => "mil_margin",
        }
    }
}

/// Every knob of a training run. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub lambda_cls: f64,
    pub lambda_match: f64,
    pub lambda_recon: f64,
    /// Rank candidates by reconstruction loss; when off, every candidate gets reward 1.
    pub use_recon: bool,
    pub use_distill: bool,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_scenes: usize,
    pub queries_per_scene: usize,
    pub mask_ratio: f64,
    pub top_k: usize,
    pub num_proposals: usize,
    pub hidden_dim: usize,
    /// Factor on the 27 geometric attributes (metres) before the attribute
    /// encoders, so box coordinates do not drown the appearance features.
    pub geometry_scale: f64,
    pub attribute_layers: usize,
    pub attention_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub head_heads: usize,
    pub sentence_pooling: SentencePooling,
    pub similarity: SimilarityConfig,
    /// First epoch (1-based) in which reconstruction and distillation train.
    pub recon_start_epoch: usize,
    /// After this epoch (1-based), the K/2 largest reconstruction losses of
    /// each query are left out of the reconstruction objective.
    pub ignore_topk_half_after_epoch: usize,
    pub next_token_recon: bool,
    pub pseudo_label_temperature: f64,
    pub mil_pooling: MilPooling,
    pub mil_margin: f64,
    pub init_word_embeddings: bool,
    /// Fraction of scenes held out for checkpoint selection.
    pub validation_fraction: f64,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Full,
            seed: 0,
            lambda_cls: 2.0,
            lambda_match: 2.0,
            lambda_recon: 1.0,
            use_recon: true,
            use_distill: true,
            learning_rate: 1e-3,
            lr_min: 0.0,
            weight_decay: 5e-4,
            grad_clip: 5.0,
            epochs: 20,
            batch_scenes: 12,
            queries_per_scene: 8,
            mask_ratio: 0.3,
            top_k: 4,
            num_proposals: 32,
            hidden_dim: 64,
            geometry_scale: 0.1,
            attribute_layers: 2,
            attention_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            head_heads: 4,
            sentence_pooling: SentencePooling::FinalState,
            similarity: SimilarityConfig::default(),
            recon_start_epoch: 2,
            ignore_topk_half_after_epoch: 3,
            next_token_recon: false,
            pseudo_label_temperature: 1.0,
            mil_pooling: MilPooling::Max,
            mil_margin: 0.2,
            init_word_embeddings: true,
            validation_fraction: 0.1,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.lambda_cls, self.lambda_match, self.lambda_recon].iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        if self.top_k == 0 || self.top_k > self.num_proposals {
            return bad(format!("top_k {} must be in 1..={}", self.top_k, self.num_proposals));
        }
        if self.epochs == 0 || self.epochs < self.recon_start_epoch {
            return bad(format!("epochs {} must be ≥ max(1, recon_start_epoch {})", self.epochs, self.recon_start_epoch));
        }
        if !(self.geometry_scale > 0.0 && self.geometry_scale.is_finite()) {
            return bad(format!("geometry_scale {} must be positive", self.geometry_scale));
        }
        if self.batch_scenes < 2 {
            return bad("batch_scenes must be at least 2".into());
        }
        if self.queries_per_scene == 0 {
            return bad("queries_per_scene must be positive".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1]", self.mask_ratio));
        }
        for (name, dim, heads) in [
            ("attention_heads", self.hidden_dim, self.attention_heads),
            ("decoder_heads", self.hidden_dim, self.decoder_heads),
            ("head_heads", self.hidden_dim, self.head_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return bad(format!("hidden_dim {dim} not divisible by {name} {heads}"));
            }
        }
        if !(self.learning_rate > 0.0) || self.lr_min < 0.0 || self.weight_decay < 0.0 {
            return bad("learning rate must be positive, lr_min and weight_decay non-negative".into());
        }
        if !(self.pseudo_label_temperature > 0.0) {
            return bad("pseudo_label_temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction {} outside [0, 1)", self.validation_fraction));
        }
        if !self.similarity.use_class_term && !self.similarity.use_feature_term {
            return bad("similarity needs at least one of the class and feature terms".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// Whether reconstruction and distillation train in `epoch` (1-based).
    pub fn teacher_active(&self, epoch: usize) -> bool {
        !self.use_recon || epoch >= self.recon_start_epoch
    }

    pub fn ignore_top_half(&self, epoch: usize) -> bool {
        epoch > self.ignore_topk_half_after_epoch
    }
}

/// Per-term weights in effect for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub distill: f64,
    pub cls: f64,
    pub matching: f64,
    pub recon: f64,
}

impl LossWeights {
    pub fn for_epoch(config: &TrainConfig, epoch: usize) -> Self {
        let teacher = if config.teacher_active(epoch) { 1.0 } else { 0.0 };
        Self {
            distill: if config.use_distill { teacher } else { 0.0 },
            cls: config.lambda_cls,
            matching: config.lambda_match,
            recon: if config.use_recon { teacher * config.lambda_recon } else { 0.0 },
        }
    }
}
