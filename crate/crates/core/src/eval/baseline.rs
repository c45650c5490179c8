//! Transfer-fusion baseline: frozen mean-pooled text and audio embeddings,
//! concatenated and fed to a small perceptron (`in → 32 → 16 → C`, tanh).

use crate::backbone::{FrozenBackbone, NoAdapters};
use crate::data::{Dataset, MultimodalSample};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, keyed_seed, softmax_row, Matrix, ParamId, ParamStore, Rng, Tape};
use crate::training::{adamw_step, AdamState, AdamW};

use super::metrics::multiclass_auc;

pub const HIDDEN: [usize; 2] = [32, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            weight_decay: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mean-pooled frozen text representation followed by the mean of the
/// unmasked audio frames (zeros when every frame is masked).
pub fn pooled_features(backbone: &FrozenBackbone, sample: &MultimodalSample) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = backbone.forward(&mut tape, &sample.tokens, &mut NoAdapters)?;
    let mut feats = tape.value(out.pooled).as_slice().to_vec();
    match sample.frames.pooled() {
        Ok(a) => feats.extend_from_slice(a.as_slice()),
        Err(_) => feats.extend(std::iter::repeat_n(0.0, sample.frames.width())),
    }
    Ok(feats)
}

pub fn dataset_features(backbone: &FrozenBackbone, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.samples.iter().map(|s| pooled_features(backbone, s)).collect()
}

#[derive(Clone, Debug)]
pub struct TransferHead {
    pub store: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl TransferHead {
    pub fn new(input: usize, classes: usize, seed: u64) -> Self {
        let mut rng = Rng::new(derive_seed(seed, "transfer-head"));
        let mut store = ParamStore::new();
        let widths = [input, HIDDEN[0], HIDDEN[1], classes];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.normal() * std).collect();
                let weight = store.register(
                    format!("mlp{i}.weight"),
                    Matrix::from_vec(w[1], w[0], data).expect("finite init"),
                );
                let bias = store.register(format!("mlp{i}.bias"), Matrix::zeros(1, w[1]));
                (weight, bias)
            })
            .collect();
        Self { store, layers }
    }

    /// `32·in + 32 + 16·32 + 16 + C·16 + C`
    pub fn param_count(input: usize, classes: usize) -> usize {
        HIDDEN[0] * input + HIDDEN[0] + HIDDEN[1] * HIDDEN[0] + HIDDEN[1] + classes * HIDDEN[1] + classes
    }

    fn logits(&self, tape: &mut Tape, x: Matrix) -> Result<crate::numerics::Var> {
        let mut h = tape.constant(x);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = tape.param(&self.store, w);
            let b = tape.param(&self.store, b);
            h = tape.matmul_nt(h, w)?;
            h = tape.add_row(h, b)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, Matrix::row_vector(x.to_vec()))?;
        softmax_row(tape.value(logits).as_slice())
    }

    /// Minibatch AdamW on the summed cross-entropy.
    pub fn fit(&mut self, x: &[Vec<f64>], y: &[u32], cfg: &BaselineConfig) -> Result<Vec<f64>> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Input("baseline needs matching, nonempty features and labels".into()));
        }
        let classes = self.store.get(self.layers[2].1).cols();
        let opt = AdamW::new(cfg.lr, cfg.weight_decay);
        let mut state = AdamState::zeros_like(&self.store.values());
        let names: Vec<String> = self.store.iter().map(|(_, n, _)| n.to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let shuffle = derive_seed(cfg.seed, "transfer-shuffle");
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..x.len()).collect();
            Rng::new(keyed_seed(shuffle, &[epoch as u64])).shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let width = x[batch[0]].len();
                let mut data = Vec::with_capacity(batch.len() * width);
                let mut onehot = Matrix::zeros(batch.len(), classes);
                for (row, &i) in batch.iter().enumerate() {
                    data.extend_from_slice(&x[i]);
                    onehot.set(row, y[i] as usize, 1.0);
                }
                let mut tape = Tape::new();
                let logits = self.logits(&mut tape, Matrix::from_vec(batch.len(), width, data)?)?;
                let logp = tape.log_softmax_rows(logits);
                let onehot = tape.constant(onehot);
                let picked = tape.mul(logp, onehot)?;
                let ll = tape.sum(picked);
                epoch_loss -= tape.scalar(ll);
                let grads = tape.backward_seeded(ll, -1.0).param_grads(&tape, &self.store);
                let mut params = self.store.values();
                adamw_step(&mut params, &grads, &mut state, &opt, &names)?;
                self.store.set_values(&params);
            }
            trace.push(epoch_loss);
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub auc: f64,
    pub probs: Vec<Vec<f64>>,
}

/// Trains the fusion head on `(train_x, train_y)` and reports AUC on the
/// held-out `(test_x, test_y)`.
pub fn transfer_baseline(
    train_x: &[Vec<f64>],
    train_y: &[u32],
    test_x: &[Vec<f64>],
    test_y: &[u32],
    classes: usize,
    cfg: &BaselineConfig,
) -> Result<BaselineResult> {
    let input = train_x
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Input("empty baseline training set".into()))?;
    let mut head = TransferHead::new(input, classes, cfg.seed);
    head.fit(train_x, train_y, cfg)?;
    let probs = test_x.iter().map(|x| head.predict(x)).collect::<Result<Vec<_>>>()?;
    let auc = multiclass_auc(&probs, test_y, classes)?;
    Ok(BaselineResult { auc, probs })
}
