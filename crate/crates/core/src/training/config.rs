//! Flat `key = value` configuration files.
//!
//! Keys are the field names of [`TrainConfig`] (or [`SynthConfig`]), with
//! nested groups written as dotted keys:
//!
//! ```text
//! epochs = 50
//! lr = 0.001
//! adapter.variant = "caliber-x"
//! adapter.sublayers = ["query", "value"]
//! prior.gamma = 0.008
//! ```
//!
//! The syntax is the dotted-key subset of TOML. Omitted keys take their
//! defaults and unknown keys are rejected.

use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::crossmodal::CrossModalConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::variational::PriorConfig;

/// Training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Negative ELBO.
    #[default]
    Elbo,
    /// Negative log-likelihood only; no KL nodes are recorded.
    MaximumLikelihood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub objective: Objective,
    pub prior: PriorConfig,
    pub adapter: AdapterConfig,
    pub backbone: BackboneConfig,
    pub crossmodal: CrossModalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            weight_decay: 1e-3,
            batch_size: 32,
            seed: 0,
            grad_clip: 0.0,
            objective: Objective::Elbo,
            prior: PriorConfig::default(),
            adapter: AdapterConfig::default(),
            backbone: BackboneConfig::default(),
            crossmodal: CrossModalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be nonnegative".into()));
        }
        self.prior.validate()?;
        self.adapter.validate()?;
        self.backbone.validate()?;
        self.crossmodal.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = parse_flat(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical flat text; `parse(to_text())` returns an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let objective = match self.objective {
            Objective::Elbo => "elbo",
            Objective::MaximumLikelihood => "maximum-likelihood",
        };
        let p = &self.prior;
        let a = &self.adapter;
        let b = &self.backbone;
        let c = &self.crossmodal;
        let sublayers: Vec<String> = a.sublayers.iter().map(|s| format!("\"{s}\"")).collect();
        let lines = [
            format!("epochs = {}", self.epochs),
            format!("lr = {:?}", self.lr),
            format!("weight_decay = {:?}", self.weight_decay),
            format!("batch_size = {}", self.batch_size),
            format!("seed = {}", self.seed),
            format!("grad_clip = {:?}", self.grad_clip),
            format!("objective = \"{objective}\""),
            format!("prior.beta = {:?}", p.beta),
            format!("prior.gamma = {:?}", p.gamma),
            format!("prior.epsilon = {:?}", p.epsilon),
            format!("prior.delta = {:?}", p.delta),
            format!("adapter.variant = \"{}\"", a.variant),
            format!("adapter.rank = {}", a.rank),
            format!("adapter.alpha = {:?}", a.alpha),
            format!("adapter.sublayers = [{}]", sublayers.join(", ")),
            format!("backbone.layers = {}", b.layers),
            format!("backbone.d_model = {}", b.d_model),
            format!("backbone.heads = {}", b.heads),
            format!("backbone.ffn_width = {}", b.ffn_width),
            format!("backbone.max_tokens = {}", b.max_tokens),
            format!("backbone.vocab = {}", b.vocab),
            format!("backbone.seed = {}", b.seed),
            format!("crossmodal.context_width = {}", c.context_width),
            format!("crossmodal.attention_width = {}", c.attention_width),
            format!("crossmodal.heads = {}", c.heads),
            format!("crossmodal.projector_hidden = {}", c.projector_hidden),
        ];
        for line in lines {
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

impl SynthConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = parse_flat(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        [
            format!("n_samples = {}", self.n_samples),
            format!("min_tokens = {}", self.min_tokens),
            format!("max_tokens = {}", self.max_tokens),
            format!("min_frames = {}", self.min_frames),
            format!("max_frames = {}", self.max_frames),
            format!("audio_width = {}", self.audio_width),
            format!("vocab = {}", self.vocab),
            format!("classes = {}", self.classes),
            format!("signal_strength = {:?}", self.signal_strength),
            format!("noise_sigma = {:?}", self.noise_sigma),
            format!("text_ambiguity = {:?}", self.text_ambiguity),
            format!("window_len = {}", self.window_len),
            format!("marker_scale = {:?}", self.marker_scale),
            format!("class_separation = {:?}", self.class_separation),
            format!("min_clarity = {:?}", self.min_clarity),
            format!("seed = {}", self.seed),
            format!("task_seed = {}", self.task_seed),
        ]
        .iter()
        .map(|l| format!("{l}\n"))
        .collect()
    }
}

fn parse_flat<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &location(text, &e)))
}

fn location(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
