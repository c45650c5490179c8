//! Minibatch ELBO ascent with AdamW over the trainable parameters only.
//!
//! Each optimiser step draws a batch from a per-epoch shuffle, records one
//! tape per sample, seeds its backward pass with `−1` (so adjoints are those of
//! the negative objective) and sums the per-sample gradients in batch order.
//! Noise for sample `i` at step `t` comes from the counter-keyed stream
//! `(noise_seed, t, id_i, site, token)`, so results do not depend on the order
//! in which samples are processed.

mod adamw;
mod checkpoint;
mod config;

use std::sync::Arc;

pub use adamw::{adamw_step, AdamState, AdamW};
pub use checkpoint::{config_hash, Checkpoint};
pub use config::{Objective, TrainConfig};

use crate::adapters::{Model, ModelSpec, Variant};
use crate::backbone::FrozenBackbone;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, keyed_seed, Matrix, Rng};
use crate::variational::{sample_objective, ElboOptions};

/// Sub-seeds derived from the single training seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub model: u64,
    pub shuffle: u64,
    pub noise: u64,
}

impl Seeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            model: derive_seed(seed, "model-init"),
            shuffle: derive_seed(seed, "batch-shuffle"),
            noise: derive_seed(seed, "latent-noise"),
        }
    }
}

/// Model spec implied by a training config and a dataset header.
pub fn model_spec(config: &TrainConfig, classes: usize, audio_width: usize) -> ModelSpec {
    ModelSpec {
        backbone: config.backbone.clone(),
        crossmodal: config.crossmodal.clone(),
        adapter: config.adapter.clone(),
        prior: config.prior,
        classes,
        audio_width,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Summed negative objective of every completed epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub frozen_fingerprint: u64,
}

pub struct Trainer {
    config: TrainConfig,
    seeds: Seeds,
    model: Model,
    opt: AdamW,
    adam: AdamState,
    step: u64,
    epoch_losses: Vec<f64>,
    partial_epoch_loss: f64,
    order_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh model initialised from `config.seed`, sized for `data`.
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        if data.vocab > config.backbone.vocab || data.max_tokens() > config.backbone.max_tokens {
            return Err(Error::Config(format!(
                "dataset (vocab {}, up to {} tokens) does not fit the backbone (vocab {}, max_tokens {})",
                data.vocab,
                data.max_tokens(),
                config.backbone.vocab,
                config.backbone.max_tokens
            )));
        }
        let backbone = Arc::new(FrozenBackbone::build(config.backbone.clone())?);
        Self::with_backbone(config, backbone, data.classes, data.audio_width)
    }

    /// As [`Trainer::new`] but sharing an existing frozen backbone.
    pub fn with_backbone(
        config: TrainConfig,
        backbone: Arc<FrozenBackbone>,
        classes: usize,
        audio_width: usize,
    ) -> Result<Self> {
        config.validate()?;
        let seeds = Seeds::from_seed(config.seed);
        let model = Model::new(model_spec(&config, classes, audio_width), backbone, seeds.model)?;
        let adam = AdamState::zeros_like(&model.store().values());
        Ok(Self {
            opt: AdamW::new(config.lr, config.weight_decay),
            config,
            seeds,
            model,
            adam,
            step: 0,
            epoch_losses: Vec::new(),
            partial_epoch_loss: 0.0,
            order_cache: None,
        })
    }

    /// Restores the exact training state stored in `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new_for_checkpoint(ckpt)?;
        let store = trainer.model.store();
        let names: Vec<&str> = store.iter().map(|(_, n, _)| n).collect();
        if names.len() != ckpt.names.len() || names.iter().zip(&ckpt.names).any(|(a, b)| a != b) {
            return Err(Error::Config("checkpoint parameters do not match the model layout".into()));
        }
        for (p, q) in store.values().iter().zip(&ckpt.params) {
            if p.shape() != q.shape() {
                return Err(Error::Config("checkpoint parameter shapes do not match".into()));
            }
        }
        trainer.model.store_mut().set_values(&ckpt.params);
        trainer.adam = ckpt.adam.clone();
        trainer.step = ckpt.step;
        trainer.epoch_losses = ckpt.epoch_losses.clone();
        trainer.partial_epoch_loss = ckpt.partial_epoch_loss;
        Ok(trainer)
    }

    fn new_for_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let backbone = Arc::new(FrozenBackbone::build(ckpt.config.backbone.clone())?);
        Self::with_backbone(ckpt.config.clone(), backbone, ckpt.classes, ckpt.audio_width)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let spec = self.model.spec();
        Checkpoint {
            config: self.config.clone(),
            classes: spec.classes,
            audio_width: spec.audio_width,
            step: self.step,
            epoch_losses: self.epoch_losses.clone(),
            partial_epoch_loss: self.partial_epoch_loss,
            names: self.model.store().iter().map(|(_, n, _)| n.to_string()).collect(),
            params: self.model.store().values(),
            adam: self.adam.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Mutable access to the model; the optimiser state is left as is.
    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> u64 {
        data.len().div_ceil(self.config.batch_size) as u64
    }

    fn epoch_order(&mut self, epoch: u64, n: usize) -> &[usize] {
        let stale = !matches!(&self.order_cache, Some((e, o)) if *e == epoch && o.len() == n);
        if stale {
            let mut order: Vec<usize> = (0..n).collect();
            Rng::new(keyed_seed(self.seeds.shuffle, &[epoch])).shuffle(&mut order);
            self.order_cache = Some((epoch, order));
        }
        &self.order_cache.as_ref().expect("just filled").1
    }

    /// Gradient of the batch's negative objective and its value, without
    /// updating anything.
    pub fn batch_gradient(&self, data: &Dataset, batch: &[usize], step: u64) -> Result<(f64, Vec<Matrix>)> {
        let store = self.model.store();
        let mut grads = store.zeros_like();
        let prior = self.config.prior;
        let include_kl = self.config.objective == Objective::Elbo;
        let opts = ElboOptions {
            kl_share: batch.len() as f64 / data.len() as f64,
            noise_seed: self.seeds.noise,
            step,
        };
        let as_training = |e: Error| match e {
            Error::Training { .. } => e,
            other => Error::Training { step, message: other.to_string() },
        };
        let mut loss = 0.0;
        for &i in batch {
            let sample = &data.samples[i];
            let obj = sample_objective(&self.model, sample, sample.id, &prior, &opts, include_kl)
                .map_err(as_training)?;
            let adjoints = obj.tape.backward_seeded(obj.objective, -1.0);
            adjoints.accumulate_into(&obj.tape, &mut grads);
            loss -= obj.tape.scalar(obj.objective);
        }
        if include_kl && self.model.variant() == Variant::Blob {
            let mut tape = crate::numerics::Tape::new();
            if let Some(kls) = self.model.global_kl(&mut tape).map_err(as_training)? {
                let mut total = kls[0];
                for &kl in &kls[1..] {
                    total = tape.add(total, kl).map_err(as_training)?;
                }
                let weighted = tape.scale(total, prior.gamma * opts.kl_share);
                tape.backward(weighted).accumulate_into(&tape, &mut grads);
                loss += tape.scalar(weighted);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training { step, message: format!("loss diverged to {loss}") });
        }
        Ok((loss, grads))
    }

    /// One optimiser step on the next batch. Returns the batch's negative objective.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Input("cannot train on an empty dataset".into()));
        }
        let per_epoch = self.steps_per_epoch(data);
        let (epoch, b) = (self.step / per_epoch, (self.step % per_epoch) as usize);
        let bs = self.config.batch_size;
        let n = data.len();
        let batch: Vec<usize> = self.epoch_order(epoch, n)[b * bs..((b + 1) * bs).min(n)].to_vec();
        let step = self.step;
        let (loss, mut grads) = self.batch_gradient(data, &batch, step)?;
        if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.config.grad_clip);
        }
        let names: Vec<String> = self.model.store().iter().map(|(_, n, _)| n.to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut params = self.model.store().values();
        adamw_step(&mut params, &grads, &mut self.adam, &self.opt, &names).map_err(|e| match e {
            Error::Training { message, .. } => Error::Training { step, message },
            other => other,
        })?;
        self.model.store_mut().set_values(&params);
        self.step += 1;
        self.partial_epoch_loss += loss;
        if b as u64 + 1 == per_epoch {
            self.epoch_losses.push(self.partial_epoch_loss);
            self.partial_epoch_loss = 0.0;
        }
        Ok(loss)
    }

    /// Runs until `config.epochs` epochs are complete. The frozen backbone's
    /// fingerprint is compared before and after.
    pub fn train(&mut self, data: &Dataset) -> Result<TrainReport> {
        let before = self.model.backbone().fingerprint();
        let total = self.config.epochs as u64 * self.steps_per_epoch(data);
        while self.step < total {
            self.step(data)?;
        }
        let after = self.model.backbone().fingerprint();
        if before != after {
            return Err(Error::Training {
                step: self.step,
                message: "frozen backbone changed during training".into(),
            });
        }
        Ok(TrainReport {
            epoch_losses: self.epoch_losses.clone(),
            steps: self.step,
            frozen_fingerprint: after,
        })
    }
}

/// Scales all gradients so their joint Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) {
    let norm = grads.iter().map(Matrix::frobenius_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
}

/// Trains a fresh model on `data` and returns it with the loss report.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let report = trainer.train(data)?;
    Ok((trainer.into_model(), report))
}
