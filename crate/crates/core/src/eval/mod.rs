//! Monte Carlo predictive inference, discrimination and calibration
//! metrics, attention export and the transfer-fusion baseline.

mod baseline;
mod metrics;
mod predict;

pub use baseline::{
    dataset_features, pooled_features, transfer_baseline, BaselineConfig, BaselineResult,
    TransferHead,
};
pub use metrics::{
    auc, ece, ece_from_confidences, entropy_split, mean_nll, multiclass_auc, EntropySplit,
    ReliabilityBin, ReliabilityBins,
};
pub use predict::{entropy, forward_probs, predict_mc, PredictiveResult};

use serde::{Deserialize, Serialize};

use crate::adapters::{ForwardOptions, Model};
use crate::crossmodal::AttentionRecord;
use crate::data::{Dataset, MultimodalSample};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::variational::ZeroNoise;

/// Default number of Monte Carlo forward passes.
pub const DEFAULT_MC_SAMPLES: usize = 10;
pub const ECE_BINS: usize = 10;

/// Metrics of one model on one dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub results: Vec<PredictiveResult>,
    pub labels: Vec<u32>,
    pub auc: f64,
    pub ece: f64,
    pub bins: ReliabilityBins,
    /// `None` when every prediction is correct (or every one wrong).
    pub entropy: Option<EntropySplit>,
    pub nll: f64,
    pub mean_entropy: f64,
}

/// Predicts every sample with `m` Monte Carlo draws and computes all metrics.
pub fn evaluate(model: &Model, data: &Dataset, m: usize, seed: u64) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Metric("cannot evaluate an empty dataset".into()));
    }
    let results = data
        .samples
        .iter()
        .map(|s| predict_mc(model, s, m, seed))
        .collect::<Result<Vec<_>>>()?;
    let labels = data.labels();
    let probs: Vec<Vec<f64>> = results.iter().map(|r| r.probs.clone()).collect();
    let auc = multiclass_auc(&probs, &labels, data.classes)?;
    let (ece, bins) = ece(&results, &labels, ECE_BINS)?;
    let entropy = entropy_split(&results, &labels).ok();
    let nll = mean_nll(&results, &labels);
    let mean_entropy = results.iter().map(|r| r.entropy).sum::<f64>() / results.len() as f64;
    Ok(Evaluation { results, labels, auc, ece, bins, entropy, nll, mean_entropy })
}

/// The JSON metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub auc: f64,
    pub ece: f64,
    pub mean_entropy_correct: Option<f64>,
    pub mean_entropy_incorrect: Option<f64>,
    pub nll: f64,
    /// Seconds since the Unix epoch; the only field that varies between
    /// otherwise identical runs.
    pub timestamp: u64,
}

impl MetricsReport {
    pub fn new(variant: &str, seed: u64, eval: &Evaluation, timestamp: u64) -> Self {
        Self {
            variant: variant.to_string(),
            seed,
            auc: eval.auc,
            ece: eval.ece,
            mean_entropy_correct: eval.entropy.as_ref().map(|e| e.mean_correct),
            mean_entropy_incorrect: eval.entropy.as_ref().map(|e| e.mean_incorrect),
            nll: eval.nll,
            timestamp,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Posterior-mean cross-attention weights of one sample (`ξ = 0`).
pub fn attention_record(model: &Model, sample: &MultimodalSample) -> Result<AttentionRecord> {
    if !model.variant().has_attention() {
        return Err(Error::Input(format!(
            "variant {} has no cross-modal attention to export",
            model.variant()
        )));
    }
    let mut tape = Tape::new();
    let opts = ForwardOptions { record_attention: true, ..Default::default() };
    let out = model.forward_with(&mut tape, &sample.tokens, Some(&sample.frames), &mut ZeroNoise, opts)?;
    out.attention
        .ok_or_else(|| Error::Context("every audio frame is masked; no attention to export".into()))
}
