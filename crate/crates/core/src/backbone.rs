//! Frozen toy transformer encoder with adapter injection points.
//!
//! The encoder is pre-norm: each layer computes `x̂ = LN(x)`, multi-head
//! self-attention on `x̂` with residual, then a tanh feed-forward block on
//! `LN(x)` with residual. A final `LN` is mean-pooled over tokens and fed to a
//! trainable linear classification head. Layer norms carry no affine part.
//!
//! Every weight here is frozen. Weights reach the tape only through
//! [`Tape::linear_const`] or as constants, so no adjoint can ever be produced
//! for them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Matrix, ParamId, ParamStore, Rng, Tape, Var};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Linear sublayers of a self-attention block that can host an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Sublayer {
    Query,
    Key,
    Value,
    Output,
}

impl Sublayer {
    pub fn as_str(self) -> &'static str {
        match self {
            Sublayer::Query => "query",
            Sublayer::Key => "key",
            Sublayer::Value => "value",
            Sublayer::Output => "output",
        }
    }
}

impl fmt::Display for Sublayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<String> for Sublayer {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Sublayer> for String {
    fn from(s: Sublayer) -> String {
        s.as_str().to_string()
    }
}

impl FromStr for Sublayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "query" | "q" => Ok(Sublayer::Query),
            "key" | "k" => Ok(Sublayer::Key),
            "value" | "v" => Ok(Sublayer::Value),
            "output" | "o" => Ok(Sublayer::Output),
            other => Err(Error::Config(format!("unknown sublayer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    /// Hidden width `d`. Every attention projection is `d × d`, so the adapted
    /// input width `k` equals `d`.
    pub d_model: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_tokens: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 2,
            ffn_width: 64,
            max_tokens: 32,
            vocab: 64,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 {
            return fail("backbone needs at least one layer");
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be positive and divisible by heads");
        }
        if self.ffn_width == 0 || self.max_tokens == 0 || self.vocab == 0 {
            return fail("ffn_width, max_tokens and vocab must be positive");
        }
        Ok(())
    }

    /// Input width of every adaptable sublayer.
    pub fn input_width(&self) -> usize {
        self.d_model
    }
}

/// Frozen weights of one encoder layer. Linear maps are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub w_query: Arc<Matrix>,
    pub w_key: Arc<Matrix>,
    pub w_value: Arc<Matrix>,
    pub w_output: Arc<Matrix>,
    pub w_ffn_in: Arc<Matrix>,
    pub b_ffn_in: Matrix,
    pub w_ffn_out: Arc<Matrix>,
    pub b_ffn_out: Matrix,
}

impl LayerWeights {
    fn projection(&self, sublayer: Sublayer) -> &Arc<Matrix> {
        match sublayer {
            Sublayer::Query => &self.w_query,
            Sublayer::Key => &self.w_key,
            Sublayer::Value => &self.w_value,
            Sublayer::Output => &self.w_output,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    /// `vocab × d`
    pub token_embedding: Matrix,
    /// `max_tokens × d`
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
}

/// Per-layer inputs `x^{ℓ−1}` of the adapted attention projections
/// (the layer-normed hidden states), each `T_x × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub per_layer: Vec<Matrix>,
}

/// Supplies the additive update `Δh` for an adapted sublayer.
pub trait SublayerHook {
    /// Called once per (layer, sublayer) with the sublayer input (`T_x × k`).
    /// Returning `None` leaves the frozen output untouched.
    fn delta(&mut self, tape: &mut Tape, layer: usize, sublayer: Sublayer, input: Var)
        -> Result<Option<Var>>;
}

/// Hook that adapts nothing: the pure frozen forward.
pub struct NoAdapters;

impl SublayerHook for NoAdapters {
    fn delta(&mut self, _: &mut Tape, _: usize, _: Sublayer, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

#[derive(Debug)]
pub struct BackboneOutput {
    pub hidden: HiddenStates,
    /// Mean-pooled final representation, `1 × d`.
    pub pooled: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    weights: BackboneWeights,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Matrix::from_raw(rows, cols, data)
}

impl FrozenBackbone {
    /// Deterministic random initialisation from `config.seed`.
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(config.seed, "backbone"));
        let d = config.d_model;
        let f = config.ffn_width;
        let proj_std = 1.0 / (d as f64).sqrt();
        let token_embedding = gaussian(&mut rng, config.vocab, d, 1.0);
        let position_embedding = gaussian(&mut rng, config.max_tokens, d, 0.5);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                w_query: Arc::new(gaussian(&mut rng, d, d, proj_std)),
                w_key: Arc::new(gaussian(&mut rng, d, d, proj_std)),
                w_value: Arc::new(gaussian(&mut rng, d, d, proj_std)),
                w_output: Arc::new(gaussian(&mut rng, d, d, proj_std)),
                w_ffn_in: Arc::new(gaussian(&mut rng, f, d, proj_std)),
                b_ffn_in: gaussian(&mut rng, 1, f, 0.1),
                w_ffn_out: Arc::new(gaussian(&mut rng, d, f, 1.0 / (f as f64).sqrt())),
                b_ffn_out: gaussian(&mut rng, 1, d, 0.1),
            })
            .collect();
        Ok(Self {
            config,
            weights: BackboneWeights {
                token_embedding,
                position_embedding,
                layers,
            },
        })
    }

    /// Backbone from explicit weights (hand-built fixtures, checkpoints).
    pub fn from_weights(config: BackboneConfig, weights: BackboneWeights) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width;
        let check = |name: &'static str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(Error::dim(name, format!("{shape:?}"), format!("{:?}", m.shape())))
            } else if !m.is_finite() {
                Err(Error::Config(format!("{name} has non-finite entries")))
            } else {
                Ok(())
            }
        };
        check("token_embedding", &weights.token_embedding, (config.vocab, d))?;
        check("position_embedding", &weights.position_embedding, (config.max_tokens, d))?;
        if weights.layers.len() != config.layers {
            return Err(Error::dim("layers", config.layers, weights.layers.len()));
        }
        for lw in &weights.layers {
            for m in [&lw.w_query, &lw.w_key, &lw.w_value, &lw.w_output] {
                check("attention projection", m, (d, d))?;
            }
            check("w_ffn_in", &lw.w_ffn_in, (f, d))?;
            check("b_ffn_in", &lw.b_ffn_in, (1, f))?;
            check("w_ffn_out", &lw.w_ffn_out, (d, f))?;
            check("b_ffn_out", &lw.b_ffn_out, (1, d))?;
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BackboneWeights {
        &self.weights
    }

    /// The frozen set registers nothing on any parameter store.
    pub fn trainable_param_count(&self) -> usize {
        0
    }

    pub fn frozen_scalar_count(&self) -> usize {
        let w = &self.weights;
        w.token_embedding.len()
            + w.position_embedding.len()
            + w.layers
                .iter()
                .map(|l| {
                    l.w_query.len()
                        + l.w_key.len()
                        + l.w_value.len()
                        + l.w_output.len()
                        + l.w_ffn_in.len()
                        + l.b_ffn_in.len()
                        + l.w_ffn_out.len()
                        + l.b_ffn_out.len()
                })
                .sum::<usize>()
    }

    /// SHA-256 over the bit patterns of every frozen weight, truncated to 64 bits.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        let mut feed = |m: &Matrix| {
            for v in m.as_slice() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        };
        feed(&self.weights.token_embedding);
        feed(&self.weights.position_embedding);
        for l in &self.weights.layers {
            feed(&l.w_query);
            feed(&l.w_key);
            feed(&l.w_value);
            feed(&l.w_output);
            feed(&l.w_ffn_in);
            feed(&l.b_ffn_in);
            feed(&l.w_ffn_out);
            feed(&l.b_ffn_out);
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_tokens {
            return Err(Error::Input(format!(
                "{} tokens exceed max_tokens {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab {
                return Err(Error::Input(format!(
                    "token id {tok} out of vocabulary of size {}",
                    self.config.vocab
                )));
            }
            let t = self.weights.token_embedding.row(tok as usize);
            let p = self.weights.position_embedding.row(pos);
            data.extend(t.iter().zip(p).map(|(a, b)| a + b));
        }
        Ok(Matrix::from_raw(tokens.len(), d, data))
    }

    fn project(
        &self,
        tape: &mut Tape,
        hook: &mut dyn SublayerHook,
        layer: usize,
        sublayer: Sublayer,
        input: Var,
    ) -> Result<Var> {
        let frozen = tape.linear_const(input, self.weights.layers[layer].projection(sublayer))?;
        match hook.delta(tape, layer, sublayer, input)? {
            Some(delta) => {
                if tape.shape(delta) != tape.shape(frozen) {
                    return Err(Error::dim(
                        "adapter delta",
                        format!("{:?}", tape.shape(frozen)),
                        format!("{:?}", tape.shape(delta)),
                    ));
                }
                tape.add(frozen, delta)
            }
            None => Ok(frozen),
        }
    }

    /// Runs the encoder, asking `hook` for an update at every attention projection.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        hook: &mut dyn SublayerHook,
    ) -> Result<BackboneOutput> {
        let heads = self.config.heads;
        let head_dim = self.config.d_model / heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

        let mut x = tape.constant(self.embed(tokens)?);
        let mut per_layer = Vec::with_capacity(self.config.layers);
        for (l, lw) in self.weights.layers.iter().enumerate() {
            let normed = tape.layer_norm_rows(x, LAYER_NORM_EPS);
            per_layer.push(tape.value(normed).clone());

            let q = self.project(tape, hook, l, Sublayer::Query, normed)?;
            let k = self.project(tape, hook, l, Sublayer::Key, normed)?;
            let v = self.project(tape, hook, l, Sublayer::Value, normed)?;
            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
                let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
                let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let weights = tape.softmax_rows(scores);
                head_outputs.push(tape.matmul(weights, vh)?);
            }
            let attn = if heads == 1 {
                head_outputs[0]
            } else {
                tape.concat_cols(&head_outputs)?
            };
            let out = self.project(tape, hook, l, Sublayer::Output, attn)?;
            x = tape.add(x, out)?;

            let normed = tape.layer_norm_rows(x, LAYER_NORM_EPS);
            let hidden = tape.linear_const(normed, &lw.w_ffn_in)?;
            let b_in = tape.constant(lw.b_ffn_in.clone());
            let hidden = tape.add_row(hidden, b_in)?;
            let hidden = tape.tanh(hidden);
            let ffn = tape.linear_const(hidden, &lw.w_ffn_out)?;
            let b_out = tape.constant(lw.b_ffn_out.clone());
            let ffn = tape.add_row(ffn, b_out)?;
            x = tape.add(x, ffn)?;
        }
        let final_norm = tape.layer_norm_rows(x, LAYER_NORM_EPS);
        let pooled = tape.mean_rows(final_norm);
        Ok(BackboneOutput {
            hidden: HiddenStates { per_layer },
            pooled,
        })
    }
}

/// Trainable linear classification head on the pooled representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `C × d`
    pub weight: ParamId,
    /// `1 × C`
    pub bias: ParamId,
}

impl ClassifierHead {
    /// Registers a head with small seeded weights and zero bias.
    pub fn register(store: &mut ParamStore, rng: &mut Rng, d: usize, classes: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let weight = store.register("head.weight", gaussian(rng, classes, d, std));
        let bias = store.register("head.bias", Matrix::zeros(1, classes));
        Self { weight, bias }
    }

    pub fn param_count(d: usize, classes: usize) -> usize {
        d * classes + classes
    }

    /// `1 × C` logits.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul_nt(pooled, w)?;
        tape.add_row(z, b)
    }
}

/// Backbone forward followed by the classification head.
pub fn forward_with_adapters(
    tape: &mut Tape,
    backbone: &FrozenBackbone,
    store: &ParamStore,
    head: &ClassifierHead,
    tokens: &[u32],
    hook: &mut dyn SublayerHook,
) -> Result<(BackboneOutput, Var)> {
    let out = backbone.forward(tape, tokens, hook)?;
    let logits = head.logits(tape, store, out.pooled)?;
    Ok((out, logits))
}
