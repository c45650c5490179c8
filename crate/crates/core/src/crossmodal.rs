//! Audio-frame projection and token-level text→audio cross-attention.
//!
//! Audio frames are projected into a shared context space by a two-layer
//! perceptron `P_a`. Each adapted site then attends from its low-rank text
//! features (queries) to the projected frames (keys and values) and maps the
//! attended summary back to the rank-`r` latent space. CALIBER-G replaces the
//! attention by one mean-pooled frame pushed through the same projector and a
//! per-site linear map.

use std::io::Write;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, Rng, Tape, Var};

/// Frame-level audio embeddings of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFrames {
    frames: Matrix,
    mask: Vec<bool>,
}

impl AudioFrames {
    /// `frames` is `T_a × d_a`; `mask[s]` marks frame `s` as valid.
    pub fn new(frames: Matrix, mask: Vec<bool>) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Input("audio needs at least one frame of nonzero width".into()));
        }
        if mask.len() != frames.rows() {
            return Err(Error::dim("audio mask", frames.rows(), mask.len()));
        }
        if !frames.is_finite() {
            return Err(Error::Input("audio frames contain non-finite values".into()));
        }
        Ok(Self { frames, mask })
    }

    pub fn unmasked(frames: Matrix) -> Result<Self> {
        let n = frames.rows();
        Self::new(frames, vec![true; n])
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn width(&self) -> usize {
        self.frames.cols()
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn all_masked(&self) -> bool {
        self.valid_count() == 0
    }

    /// Mean of the unmasked frames, `1 × d_a`.
    pub fn pooled(&self) -> Result<Matrix> {
        let n = self.valid_count();
        if n == 0 {
            return Err(Error::Context("every audio frame is masked".into()));
        }
        let mut acc = vec![0.0; self.width()];
        for (s, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            for (a, x) in acc.iter_mut().zip(self.frames.row(s)) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Ok(Matrix::row_vector(acc))
    }

    /// Same frames with rows (and mask) reordered: row `i` of the result is
    /// row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            frames: self.frames.select_rows(order),
            mask: order.iter().map(|&i| self.mask[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossModalConfig {
    /// Shared context width `c`.
    pub context_width: usize,
    /// Attention width `d_c`.
    pub attention_width: usize,
    pub heads: usize,
    /// Hidden width of the tanh layer in `P_a`.
    pub projector_hidden: usize,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self {
            context_width: 16,
            attention_width: 16,
            heads: 2,
            projector_hidden: 32,
        }
    }
}

impl CrossModalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_width == 0 || self.projector_hidden == 0 {
            return Err(Error::Config("context and projector widths must be positive".into()));
        }
        if self.heads == 0 || self.attention_width == 0 || !self.attention_width.is_multiple_of(self.heads) {
            return Err(Error::Config(
                "attention_width must be positive and divisible by heads".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_raw(rows, cols, (0..rows * cols).map(|_| rng.normal() * std).collect())
}

/// The audio projector `P_a`: `d_a → hidden (tanh) → c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AudioProjector {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input_width: usize,
}

impl AudioProjector {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        input_width: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        let w1 = store.register(
            "audio_proj.w1",
            gaussian(rng, hidden, input_width, 1.0 / (input_width as f64).sqrt()),
        );
        let b1 = store.register("audio_proj.b1", Matrix::zeros(1, hidden));
        let w2 = store.register(
            "audio_proj.w2",
            gaussian(rng, out, hidden, 1.0 / (hidden as f64).sqrt()),
        );
        let b2 = store.register("audio_proj.b2", Matrix::zeros(1, out));
        Self {
            w1,
            b1,
            w2,
            b2,
            input_width,
        }
    }

    pub fn param_count(input_width: usize, hidden: usize, out: usize) -> usize {
        input_width * hidden + hidden + hidden * out + out
    }

    /// Applies `P_a` row-wise to an `n × d_a` node.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let width = tape.shape(input).1;
        if width != self.input_width {
            return Err(Error::dim("audio projector input", self.input_width, width));
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul_nt(input, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul_nt(h, w2)?;
        tape.add_row(o, b2)
    }
}

/// Projects every frame: `U(x)`, shape `T_a × c`. Masked frames are projected
/// too; they are excluded downstream by the attention mask.
pub fn project_audio(
    tape: &mut Tape,
    store: &ParamStore,
    projector: &AudioProjector,
    frames: &AudioFrames,
) -> Result<Var> {
    let input = tape.constant(frames.frames().clone());
    projector.apply(tape, store, input)
}

/// Per-site cross-attention projections. With shared key/value, `key` and
/// `value` hold the same ids at every site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d_c × r`
    pub query: ParamId,
    /// `d_c × c`
    pub key: ParamId,
    /// `d_c × c`
    pub value: ParamId,
    /// `r × d_c`
    pub output: ParamId,
}

impl AttentionParams {
    pub fn register_key_value(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        cfg: &CrossModalConfig,
    ) -> (ParamId, ParamId) {
        let std = 1.0 / (cfg.context_width as f64).sqrt();
        let key = store.register(
            format!("{prefix}.w_key"),
            gaussian(rng, cfg.attention_width, cfg.context_width, std),
        );
        let value = store.register(
            format!("{prefix}.w_value"),
            gaussian(rng, cfg.attention_width, cfg.context_width, std),
        );
        (key, value)
    }

    pub fn register_query_output(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        cfg: &CrossModalConfig,
        rank: usize,
    ) -> (ParamId, ParamId) {
        let query = store.register(
            format!("{prefix}.w_query"),
            gaussian(rng, cfg.attention_width, rank, 1.0 / (rank as f64).sqrt()),
        );
        let output = store.register(
            format!("{prefix}.w_out"),
            gaussian(rng, rank, cfg.attention_width, 1.0 / (cfg.attention_width as f64).sqrt()),
        );
        (query, output)
    }
}

/// Output of [`cross_attention_context`].
#[derive(Debug)]
pub struct AttendedContext {
    /// `ũ`, one row per token, `T_x × r`.
    pub context: Var,
    /// Attention weights averaged over heads, `T_x × T_a`.
    pub weights: Matrix,
}

/// Token-conditioned audio context:
/// `q = W_Q z`, `K = U W_Kᵀ`, `V = U W_Vᵀ`,
/// `ũ = W_O concat_h[softmax(q_h K_hᵀ / √d_c) V_h]`, masked frames at `−∞`.
pub fn cross_attention_context(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    heads: usize,
    z: Var,
    projected: Var,
    valid: &Rc<[bool]>,
) -> Result<AttendedContext> {
    let wq = tape.param(store, params.query);
    let wk = tape.param(store, params.key);
    let wv = tape.param(store, params.value);
    let wo = tape.param(store, params.output);
    let d_c = tape.shape(wq).0;
    if heads == 0 || !d_c.is_multiple_of(heads) {
        return Err(Error::Config("attention width must be divisible by heads".into()));
    }
    let head_dim = d_c / heads;
    let inv_sqrt = 1.0 / (d_c as f64).sqrt();

    let q = tape.matmul_nt(z, wq)?;
    let k = tape.matmul_nt(projected, wk)?;
    let v = tape.matmul_nt(projected, wv)?;
    let (t_x, t_a) = (tape.shape(q).0, tape.shape(k).0);
    let mut weights = Matrix::zeros(t_x, t_a);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * head_dim, head_dim)?,
                tape.slice_cols(k, h * head_dim, head_dim)?,
                tape.slice_cols(v, h * head_dim, head_dim)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt);
        let attn = tape.masked_softmax_rows(scores, valid)?;
        weights.add_assign(tape.value(attn));
        outs.push(tape.matmul(attn, vh)?);
    }
    weights.scale_in_place(1.0 / heads as f64);
    let mixed = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let context = tape.matmul_nt(mixed, wo)?;
    Ok(AttendedContext { context, weights })
}

/// Per-site linear map from the pooled context to the latent space (CALIBER-G).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalMap {
    /// `r × c`
    pub weight: ParamId,
    /// `1 × r`
    pub bias: ParamId,
}

impl GlobalMap {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        context_width: usize,
        rank: usize,
    ) -> Self {
        let weight = store.register(
            format!("{prefix}.w_global"),
            gaussian(rng, rank, context_width, 1.0 / (context_width as f64).sqrt()),
        );
        let bias = store.register(format!("{prefix}.b_global"), Matrix::zeros(1, rank));
        Self { weight, bias }
    }

    pub fn param_count(context_width: usize, rank: usize) -> usize {
        rank * context_width + rank
    }
}

/// Pooled audio embedding pushed through `P_a` once, `1 × c`. Shared by all
/// sites of a sample.
pub fn pooled_audio_embedding(
    tape: &mut Tape,
    store: &ParamStore,
    projector: &AudioProjector,
    frames: &AudioFrames,
) -> Result<Var> {
    let pooled = tape.constant(frames.pooled()?);
    projector.apply(tape, store, pooled)
}

/// Global context for one site, `1 × r`: mean-pool unmasked frames, apply
/// `P_a`, then the site's linear map. No token dependence.
pub fn global_audio_context(
    tape: &mut Tape,
    store: &ParamStore,
    projector: &AudioProjector,
    map: &GlobalMap,
    frames: &AudioFrames,
) -> Result<Var> {
    let embedded = pooled_audio_embedding(tape, store, projector, frames)?;
    apply_global_map(tape, store, map, embedded)
}

pub(crate) fn apply_global_map(
    tape: &mut Tape,
    store: &ParamStore,
    map: &GlobalMap,
    embedded: Var,
) -> Result<Var> {
    let w = tape.param(store, map.weight);
    let b = tape.param(store, map.bias);
    let y = tape.matmul_nt(embedded, w)?;
    tape.add_row(y, b)
}

/// Cross-attention weights of one sample: per adapted site, a `T_x × T_a`
/// matrix whose rows sum to one over unmasked frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub per_site: Vec<Matrix>,
}

impl AttentionRecord {
    /// CSV with header `layer,token_index,frame_index,weight`; `layer` is the
    /// adapted-site index.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["layer", "token_index", "frame_index", "weight"])
            .map_err(csv_err)?;
        for (layer, m) in self.per_site.iter().enumerate() {
            for t in 0..m.rows() {
                for s in 0..m.cols() {
                    w.write_record([
                        layer.to_string(),
                        t.to_string(),
                        s.to_string(),
                        format!("{:.17e}", m.get(t, s)),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Attention mass on frames `[start, start + len)`, averaged over sites and tokens.
    pub fn mean_mass_in(&self, start: usize, len: usize) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for m in &self.per_site {
            for t in 0..m.rows() {
                total += m.row(t)[start..start + len].iter().sum::<f64>();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}
