use crate::adapters::{ForwardOptions, Model};
use crate::data::MultimodalSample;
use crate::error::Result;
use crate::numerics::{softmax_row, Tape};
use crate::variational::{KeyedNoise, NoiseSource, ZeroNoise};

/// Monte Carlo posterior-predictive output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveResult {
    /// Average of the per-draw softmax outputs.
    pub probs: Vec<f64>,
    /// Entropy of `probs` in nats.
    pub entropy: f64,
    /// Softmax output of each draw.
    pub draws: Vec<Vec<f64>>,
}

impl PredictiveResult {
    pub fn from_draws(draws: Vec<Vec<f64>>) -> Self {
        let classes = draws[0].len();
        let mut probs = vec![0.0; classes];
        for d in &draws {
            for (p, q) in probs.iter_mut().zip(d) {
                *p += q;
            }
        }
        let m = draws.len() as f64;
        probs.iter_mut().for_each(|p| *p /= m);
        let entropy = entropy(&probs);
        Self { probs, entropy, draws }
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted_class()]
    }
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities of one forward pass with the given noise.
pub fn forward_probs(model: &Model, sample: &MultimodalSample, noise: &mut dyn NoiseSource) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = model.forward_with(
        &mut tape,
        &sample.tokens,
        Some(&sample.frames),
        noise,
        ForwardOptions::default(),
    )?;
    softmax_row(tape.value(out.logits).as_slice())
}

/// Averages `m` stochastic forward passes. Draw `j` uses the noise stream
/// keyed by `(seed, j, sample.id)`. `m = 0` selects the deterministic
/// posterior-mean prediction (`ξ = 0` everywhere). Variants without latent
/// noise need only one pass; it is replicated `m` times.
pub fn predict_mc(model: &Model, sample: &MultimodalSample, m: usize, seed: u64) -> Result<PredictiveResult> {
    if m == 0 {
        let probs = forward_probs(model, sample, &mut ZeroNoise)?;
        return Ok(PredictiveResult::from_draws(vec![probs]));
    }
    if !model.variant().is_stochastic() {
        let probs = forward_probs(model, sample, &mut ZeroNoise)?;
        return Ok(PredictiveResult::from_draws(vec![probs; m]));
    }
    let draws = (0..m as u64)
        .map(|j| forward_probs(model, sample, &mut KeyedNoise::new(seed, j, sample.id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictiveResult::from_draws(draws))
}
