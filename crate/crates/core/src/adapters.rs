//! The adapter family: LoRA, BLoB, C-LoRA, CALIBER-G, CALIBER-X and CALIBER-X
//! with shared keys/values.
//!
//! Every variant computes `Δh_t = (α / r) · B E_t A x_t` at each adapted
//! sublayer. LoRA fixes `E = I`. BLoB also fixes `E = I` but samples `A` from
//! an input-independent mean-field posterior. The contextual variants sample
//! `vec(E_t)` from a Gaussian whose moments come from the inference head
//! applied to `η_t = [z_t; ũ_t]`, where `z_t = A x_t` and `ũ_t` is:
//!
//! | variant            | `ũ_t`                                           |
//! |--------------------|--------------------------------------------------|
//! | `clora`            | `z_t`                                            |
//! | `caliber-g`        | per-site linear map of the pooled, projected audio |
//! | `caliber-x`        | per-site token-level cross-attention over frames |
//! | `caliber-x-shared` | as `caliber-x`, keys/values shared by all sites  |

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ClassifierHead, FrozenBackbone, Sublayer, SublayerHook};
use crate::crossmodal::{
    apply_global_map, cross_attention_context, pooled_audio_embedding, project_audio,
    AttentionParams, AttentionRecord, AudioFrames, AudioProjector, CrossModalConfig, GlobalMap,
};
use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Matrix, ParamId, ParamStore, Rng, Tape, Var};
use crate::variational::{
    kl_token_mean, posterior_moments, reparameterize, sigma_from_raw, InferenceHead, MomentVars,
    NoiseSource, PriorConfig, GLOBAL_TOKEN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Lora,
    Blob,
    Clora,
    CaliberG,
    CaliberX,
    CaliberXShared,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lora,
        Variant::Blob,
        Variant::Clora,
        Variant::CaliberG,
        Variant::CaliberX,
        Variant::CaliberXShared,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::Blob => "blob",
            Variant::Clora => "clora",
            Variant::CaliberG => "caliber-g",
            Variant::CaliberX => "caliber-x",
            Variant::CaliberXShared => "caliber-x-shared",
        }
    }

    /// Samples `E` from an inference head.
    pub fn is_contextual(self) -> bool {
        matches!(
            self,
            Variant::Clora | Variant::CaliberG | Variant::CaliberX | Variant::CaliberXShared
        )
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, Variant::CaliberG | Variant::CaliberX | Variant::CaliberXShared)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::CaliberX | Variant::CaliberXShared)
    }

    pub fn is_stochastic(self) -> bool {
        self != Variant::Lora
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.as_str().to_string()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected one of lora, blob, clora, caliber-g, caliber-x, caliber-x-shared)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub variant: Variant,
    pub rank: usize,
    pub alpha: f64,
    /// Sublayers adapted in every backbone layer.
    pub sublayers: Vec<Sublayer>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CaliberX,
            rank: 8,
            alpha: 32.0,
            sublayers: vec![Sublayer::Query, Sublayer::Value],
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("adapter alpha must be finite".into()));
        }
        if self.sublayers.is_empty() {
            return Err(Error::Config("at least one sublayer must be adapted".into()));
        }
        let mut seen = self.sublayers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.sublayers.len() {
            return Err(Error::Config("adapted sublayers must be distinct".into()));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Everything needed to build a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub crossmodal: CrossModalConfig,
    pub adapter: AdapterConfig,
    pub prior: PriorConfig,
    pub classes: usize,
    pub audio_width: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.crossmodal.validate()?;
        self.adapter.validate()?;
        self.prior.validate()?;
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.adapter.variant.uses_audio() && self.audio_width == 0 {
            return Err(Error::Config("audio width must be positive".into()));
        }
        Ok(())
    }

    pub fn site_count(&self) -> usize {
        self.backbone.layers * self.adapter.sublayers.len()
    }

    /// Closed-form trainable-parameter count.
    pub fn formula_param_count(&self) -> usize {
        let r = self.adapter.rank;
        let d = self.backbone.d_model;
        let k = self.backbone.input_width();
        let c = self.crossmodal.context_width;
        let d_c = self.crossmodal.attention_width;
        let sites = self.site_count();
        let variant = self.adapter.variant;

        let mut per_site = r * (d + k);
        match variant {
            Variant::Lora => {}
            Variant::Blob => per_site += r * k,
            Variant::Clora => per_site += InferenceHead::param_count(r),
            Variant::CaliberG => {
                per_site += InferenceHead::param_count(r) + GlobalMap::param_count(c, r)
            }
            Variant::CaliberX => per_site += InferenceHead::param_count(r) + 2 * d_c * r + 2 * d_c * c,
            Variant::CaliberXShared => per_site += InferenceHead::param_count(r) + 2 * d_c * r,
        }
        let mut total = sites * per_site + ClassifierHead::param_count(d, self.classes);
        if variant.uses_audio() {
            total += AudioProjector::param_count(
                self.audio_width,
                self.crossmodal.projector_hidden,
                c,
            );
        }
        if variant == Variant::CaliberXShared {
            total += 2 * d_c * c;
        }
        total
    }
}

/// `A` (`r × k`) and `B` (`d × r`) of one adapted sublayer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowRankPair {
    pub a: ParamId,
    pub b: ParamId,
}

/// Parameters of one adapted (layer, sublayer) site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Site {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub pair: LowRankPair,
    /// BLoB raw scale `ρ` of `σ_A = ε softplus(ρ) + δ`, `r × k`.
    pub blob_rho: Option<ParamId>,
    pub head: Option<InferenceHead>,
    pub global: Option<GlobalMap>,
    pub attention: Option<AttentionParams>,
}

impl Site {
    pub fn prefix(&self) -> String {
        site_prefix(self.layer, self.sublayer)
    }
}

fn site_prefix(layer: usize, sublayer: Sublayer) -> String {
    format!("l{layer}.{sublayer}")
}

/// `z = A x` for a single token.
pub fn local_feature(x: &[f64], a: &Matrix) -> Result<Vec<f64>> {
    if x.len() != a.cols() {
        return Err(Error::dim("local_feature", a.cols(), x.len()));
    }
    a.matvec(x)
}

/// `Δh = (α / r) · B E A x` for a single token.
pub fn adapter_delta(x: &[f64], a: &Matrix, b: &Matrix, e: &Matrix, alpha: f64) -> Result<Vec<f64>> {
    let r = a.rows();
    if b.cols() != r || e.shape() != (r, r) {
        return Err(Error::dim(
            "adapter_delta",
            format!("B: (d, {r}), E: ({r}, {r})"),
            format!("B: {:?}, E: {:?}", b.shape(), e.shape()),
        ));
    }
    let z = local_feature(x, a)?;
    let ez = e.matvec(&z)?;
    let mut out = b.matvec(&ez)?;
    let scale = alpha / r as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// How the latent `E` is chosen during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LatentMode {
    /// Reparameterised draw `μ + σ ⊙ ξ` with `ξ` from the noise source.
    #[default]
    Sample,
    /// `E = I` at every site (and `A = μ_A` for BLoB), bypassing the posterior.
    Identity,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub latent: LatentMode,
    pub record_attention: bool,
}

/// Result of one forward pass through the adapted model.
#[derive(Debug)]
pub struct ModelOutput {
    /// `1 × C`
    pub logits: Var,
    /// Token-averaged KL per site (contextual variants only).
    pub kl: Vec<Option<Var>>,
    pub moments: Vec<Option<MomentVars>>,
    pub attention: Option<AttentionRecord>,
    /// Set when every audio frame was masked and `ũ = 0` was substituted.
    pub audio_fallback: bool,
}

enum AudioContext {
    None,
    Fallback,
    Pooled(Var),
    Frames { projected: Var, valid: Rc<[bool]> },
}

/// Backbone, adapters, cross-modal modules and classification head. The
/// backbone is shared and frozen; everything in `store` is trainable.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    backbone: Arc<FrozenBackbone>,
    store: ParamStore,
    sites: Vec<Site>,
    site_index: HashMap<(usize, Sublayer), usize>,
    projector: Option<AudioProjector>,
    head: ClassifierHead,
}

impl Model {
    /// Builds a model around `backbone`, initialising trainable parameters
    /// from `seed`: `A ~ N(0, 1/k)`, `B = 0`, inference-head output layer zero.
    pub fn new(spec: ModelSpec, backbone: Arc<FrozenBackbone>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if backbone.config() != &spec.backbone {
            return Err(Error::Config("backbone does not match the model spec".into()));
        }
        let mut rng = Rng::new(derive_seed(seed, "adapters"));
        let mut store = ParamStore::new();
        let variant = spec.adapter.variant;
        let r = spec.adapter.rank;
        let d = spec.backbone.d_model;
        let k = spec.backbone.input_width();
        let cm = &spec.crossmodal;

        let projector = variant.uses_audio().then(|| {
            AudioProjector::register(
                &mut store,
                &mut rng,
                spec.audio_width,
                cm.projector_hidden,
                cm.context_width,
            )
        });
        let shared_kv = (variant == Variant::CaliberXShared)
            .then(|| AttentionParams::register_key_value(&mut store, &mut rng, "shared", cm));

        let mut sites = Vec::with_capacity(spec.site_count());
        let mut site_index = HashMap::new();
        for layer in 0..spec.backbone.layers {
            for &sublayer in &spec.adapter.sublayers {
                let prefix = site_prefix(layer, sublayer);
                let a_std = 1.0 / (k as f64).sqrt();
                let a = Matrix::from_raw(r, k, (0..r * k).map(|_| rng.normal() * a_std).collect());
                let pair = LowRankPair {
                    a: store.register(format!("{prefix}.A"), a),
                    b: store.register(format!("{prefix}.B"), Matrix::zeros(d, r)),
                };
                let blob_rho = (variant == Variant::Blob)
                    .then(|| store.register(format!("{prefix}.rho_A"), Matrix::zeros(r, k)));
                let head = variant
                    .is_contextual()
                    .then(|| InferenceHead::register(&mut store, &mut rng, &prefix, r));
                let global = (variant == Variant::CaliberG).then(|| {
                    GlobalMap::register(&mut store, &mut rng, &prefix, cm.context_width, r)
                });
                let attention = variant.has_attention().then(|| {
                    let (key, value) = match shared_kv {
                        Some(kv) => kv,
                        None => AttentionParams::register_key_value(&mut store, &mut rng, &prefix, cm),
                    };
                    let (query, output) =
                        AttentionParams::register_query_output(&mut store, &mut rng, &prefix, cm, r);
                    AttentionParams { query, key, value, output }
                });
                site_index.insert((layer, sublayer), sites.len());
                sites.push(Site { layer, sublayer, pair, blob_rho, head, global, attention });
            }
        }
        let head = ClassifierHead::register(&mut store, &mut rng, d, spec.classes);
        Ok(Self { spec, backbone, store, sites, site_index, projector, head })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.adapter.variant
    }

    pub fn backbone(&self) -> &Arc<FrozenBackbone> {
        &self.backbone
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn projector(&self) -> Option<&AudioProjector> {
        self.projector.as_ref()
    }

    pub fn classifier(&self) -> &ClassifierHead {
        &self.head
    }

    /// Trainable scalars counted by walking the parameter registry.
    pub fn trainable_param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Copies every parameter of `other` whose name and shape match one here.
    /// Returns the number of parameters copied.
    pub fn copy_matching_params(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for (_, name, value) in other.store.iter() {
            if let Some(id) = self.store.find(name) {
                if self.store.get(id).shape() == value.shape() {
                    *self.store.get_mut(id) = value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    fn prepare_audio(&self, tape: &mut Tape, frames: Option<&AudioFrames>) -> Result<AudioContext> {
        let variant = self.variant();
        if !variant.uses_audio() {
            return Ok(AudioContext::None);
        }
        let frames = frames.ok_or_else(|| {
            Error::Input(format!("variant {variant} requires audio frames"))
        })?;
        let projector = self.projector.as_ref().expect("audio variants register a projector");
        if frames.width() != projector.input_width {
            return Err(Error::dim("audio frame width", projector.input_width, frames.width()));
        }
        if frames.all_masked() {
            return Ok(AudioContext::Fallback);
        }
        if variant.has_attention() {
            let projected = project_audio(tape, &self.store, projector, frames)?;
            Ok(AudioContext::Frames { projected, valid: Rc::from(frames.mask()) })
        } else {
            Ok(AudioContext::Pooled(pooled_audio_embedding(tape, &self.store, projector, frames)?))
        }
    }

    /// Full forward pass for one sample.
    pub fn forward(
        &self,
        tape: &mut Tape,
        sample: &MultimodalSample,
        noise: &mut dyn NoiseSource,
        record_attention: bool,
    ) -> Result<ModelOutput> {
        let opts = ForwardOptions { record_attention, ..Default::default() };
        self.forward_with(tape, &sample.tokens, Some(&sample.frames), noise, opts)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        frames: Option<&AudioFrames>,
        noise: &mut dyn NoiseSource,
        opts: ForwardOptions,
    ) -> Result<ModelOutput> {
        let audio = self.prepare_audio(tape, frames)?;
        let audio_fallback = matches!(audio, AudioContext::Fallback);
        let n = self.sites.len();
        let mut hook = AdapterHook {
            model: self,
            noise,
            audio,
            opts,
            kl: vec![None; n],
            moments: vec![None; n],
            attention: vec![None; n],
        };
        let out = self.backbone.forward(tape, tokens, &mut hook)?;
        let logits = self.head.logits(tape, &self.store, out.pooled)?;
        let attention = (opts.record_attention && self.variant().has_attention() && !audio_fallback)
            .then(|| AttentionRecord {
                per_site: hook.attention.into_iter().map(|m| m.expect("every site attends")).collect(),
            });
        Ok(ModelOutput {
            logits,
            kl: hook.kl,
            moments: hook.moments,
            attention,
            audio_fallback,
        })
    }

    /// Closed-form KL of the input-independent BLoB posterior `q(A)` of
    /// every site, summed over elements. `None` for other variants.
    pub fn global_kl(&self, tape: &mut Tape) -> Result<Option<Vec<Var>>> {
        if self.variant() != Variant::Blob {
            return Ok(None);
        }
        let prior = self.spec.prior;
        let mut out = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            let mu = tape.param(&self.store, site.pair.a);
            let rho = tape.param(&self.store, site.blob_rho.expect("blob sites carry rho"));
            let sigma = sigma_from_raw(tape, rho, &prior);
            let rows = tape.shape(mu).0 as f64;
            // kl_token_mean averages over rows; undo that to sum over all of A.
            let kl = kl_token_mean(tape, MomentVars { mu, sigma }, prior.beta)?;
            out.push(tape.scale(kl, rows));
        }
        Ok(Some(out))
    }
}

struct AdapterHook<'a> {
    model: &'a Model,
    noise: &'a mut dyn NoiseSource,
    audio: AudioContext,
    opts: ForwardOptions,
    kl: Vec<Option<Var>>,
    moments: Vec<Option<MomentVars>>,
    attention: Vec<Option<Matrix>>,
}

impl AdapterHook<'_> {
    fn factor_a(&mut self, tape: &mut Tape, index: usize, site: &Site) -> Result<Var> {
        let store = &self.model.store;
        let mu = tape.param(store, site.pair.a);
        let Some(rho) = site.blob_rho else {
            return Ok(mu);
        };
        if self.opts.latent == LatentMode::Identity {
            return Ok(mu);
        }
        let (r, k) = tape.shape(mu);
        let mut xi = vec![0.0; r * k];
        self.noise.fill(index, GLOBAL_TOKEN, &mut xi);
        let rho = tape.param(store, rho);
        let sigma = sigma_from_raw(tape, rho, &self.model.spec.prior);
        reparameterize(tape, MomentVars { mu, sigma }, Matrix::from_raw(r, k, xi))
    }

    fn context(&mut self, tape: &mut Tape, index: usize, site: &Site, z: Var) -> Result<Var> {
        let store = &self.model.store;
        let (t_len, r) = tape.shape(z);
        match &self.audio {
            AudioContext::None => Ok(z),
            AudioContext::Fallback => Ok(tape.constant(Matrix::zeros(t_len, r))),
            AudioContext::Pooled(embedded) => {
                let map = site.global.as_ref().expect("caliber-g sites carry a global map");
                let u = apply_global_map(tape, store, map, *embedded)?;
                tape.broadcast_rows(u, t_len)
            }
            AudioContext::Frames { projected, valid } => {
                let params = site.attention.as_ref().expect("caliber-x sites carry attention");
                let heads = self.model.spec.crossmodal.heads;
                let attended =
                    cross_attention_context(tape, store, params, heads, z, *projected, valid)?;
                if self.opts.record_attention {
                    self.attention[index] = Some(attended.weights);
                }
                Ok(attended.context)
            }
        }
    }
}

impl SublayerHook for AdapterHook<'_> {
    fn delta(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        sublayer: Sublayer,
        input: Var,
    ) -> Result<Option<Var>> {
        let Some(&index) = self.model.site_index.get(&(layer, sublayer)) else {
            return Ok(None);
        };
        let site = self.model.sites[index];
        let spec = &self.model.spec;
        let a = self.factor_a(tape, index, &site)?;
        let z = tape.matmul_nt(input, a)?;
        let (t_len, r) = tape.shape(z);

        let mixed = match site.head {
            Some(head) if self.opts.latent == LatentMode::Sample => {
                let u = self.context(tape, index, &site, z)?;
                let eta = tape.concat_cols(&[z, u])?;
                let moments = posterior_moments(tape, &self.model.store, &head, eta, &spec.prior)?;
                let mut xi = vec![0.0; t_len * r * r];
                for (t, chunk) in xi.chunks_mut(r * r).enumerate() {
                    self.noise.fill(index, t, chunk);
                }
                let e = reparameterize(tape, moments, Matrix::from_raw(t_len, r * r, xi))?;
                self.kl[index] = Some(kl_token_mean(tape, moments, spec.prior.beta)?);
                self.moments[index] = Some(moments);
                tape.row_matvec(e, z)?
            }
            _ => z,
        };
        let b = tape.param(&self.model.store, site.pair.b);
        let delta = tape.matmul_nt(mixed, b)?;
        Ok(Some(tape.scale(delta, spec.adapter.scaling())))
    }
}
