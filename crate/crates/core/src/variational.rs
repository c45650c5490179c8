//! Context-conditioned Gaussian posterior over the latent `vec(E)`,
//! reparameterised sampling, the closed-form KL to the factorised prior, and
//! ELBO assembly.
//!
//! For a diagonal Gaussian `q = N(μ, diag σ²)` against `p = N(0, β² I)`:
//!
//! ```text
//! KL(q ‖ p) = Σ_i [ ln(β / σ_i) + (σ_i² + μ_i²) / (2β²) − 1/2 ]
//! ```

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::adapters::Model;
use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::numerics::{keyed_seed, softplus, Matrix, ParamId, ParamStore, Rng, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Prior standard deviation `β`.
    pub beta: f64,
    /// KL weight `γ`.
    pub gamma: f64,
    /// Softplus scale `ε`.
    pub epsilon: f64,
    /// Variance floor `δ`.
    pub delta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            gamma: 0.008,
            epsilon: 0.05,
            delta: 1e-6,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.epsilon > 0.0 && self.delta > 0.0) {
            return Err(Error::Config("beta, epsilon and delta must be positive".into()));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// `σ = ε · softplus(raw) + δ`
    pub fn sigma_from_raw(&self, raw: f64) -> Result<f64> {
        Ok(self.epsilon * softplus(raw)? + self.delta)
    }
}

/// `η = [z; u]`
pub fn context_summary(z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if z.len() != u.len() {
        return Err(Error::dim("context_summary", z.len(), u.len()));
    }
    let mut out = Vec::with_capacity(2 * z.len());
    out.extend_from_slice(z);
    out.extend_from_slice(u);
    Ok(out)
}

/// Amortised inference head `H_φ : ℝ^{2r} → ℝ^{2r²}`, a tanh perceptron with
/// hidden width `4r`. The first `r²` outputs are the posterior mean, the rest
/// the raw log-variance part. The output layer starts at zero, so at
/// initialisation `μ = 0` and `σ = ε ln 2 + δ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub rank: usize,
}

impl InferenceHead {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, prefix: &str, rank: usize) -> Self {
        let (input, hidden, out) = Self::widths(rank);
        let std = 1.0 / (input as f64).sqrt();
        let w1 = Matrix::from_raw(
            hidden,
            input,
            (0..hidden * input).map(|_| rng.normal() * std).collect(),
        );
        Self {
            w1: store.register(format!("{prefix}.head.w1"), w1),
            b1: store.register(format!("{prefix}.head.b1"), Matrix::zeros(1, hidden)),
            w2: store.register(format!("{prefix}.head.w2"), Matrix::zeros(out, hidden)),
            b2: store.register(format!("{prefix}.head.b2"), Matrix::zeros(1, out)),
            rank,
        }
    }

    /// (input, hidden, output) widths for rank `r`: `(2r, 4r, 2r²)`.
    pub fn widths(rank: usize) -> (usize, usize, usize) {
        (2 * rank, 4 * rank, 2 * rank * rank)
    }

    pub fn param_count(rank: usize) -> usize {
        let (i, h, o) = Self::widths(rank);
        i * h + h + h * o + o
    }

    /// Raw head output for every row of `eta` (`T × 2r` → `T × 2r²`).
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, eta: Var) -> Result<Var> {
        let width = tape.shape(eta).1;
        if width != 2 * self.rank {
            return Err(Error::dim("inference head input", 2 * self.rank, width));
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul_nt(eta, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul_nt(h, w2)?;
        tape.add_row(o, b2)
    }
}

/// Posterior moments on the tape, each `T × r²`.
#[derive(Clone, Copy, Debug)]
pub struct MomentVars {
    pub mu: Var,
    pub sigma: Var,
}

/// `σ = ε · softplus(raw) + δ` elementwise on the tape.
pub fn sigma_from_raw(tape: &mut Tape, raw: Var, prior: &PriorConfig) -> Var {
    let sp = tape.softplus(raw);
    let scaled = tape.scale(sp, prior.epsilon);
    tape.add_scalar(scaled, prior.delta)
}

pub fn posterior_moments(
    tape: &mut Tape,
    store: &ParamStore,
    head: &InferenceHead,
    eta: Var,
    prior: &PriorConfig,
) -> Result<MomentVars> {
    let r2 = head.rank * head.rank;
    let raw = head.apply(tape, store, eta)?;
    let mu = tape.slice_cols(raw, 0, r2)?;
    let log_v = tape.slice_cols(raw, r2, r2)?;
    let sigma = sigma_from_raw(tape, log_v, prior);
    Ok(MomentVars { mu, sigma })
}

/// Moments of one diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PosteriorMoments {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::dim("PosteriorMoments", mu.len(), sigma.len()));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite posterior moment".into()));
        }
        Ok(Self { mu, sigma })
    }
}

/// Posterior moments for a single contextual summary `η` (length `2r`).
pub fn posterior_params(
    eta: &[f64],
    head: &InferenceHead,
    store: &ParamStore,
    prior: &PriorConfig,
) -> Result<PosteriorMoments> {
    let mut tape = Tape::new();
    let eta = tape.constant(Matrix::row_vector(eta.to_vec()));
    let m = posterior_moments(&mut tape, store, head, eta, prior)?;
    let (mu, sigma) = (tape.value(m.mu), tape.value(m.sigma));
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::Numeric("inference head produced non-finite output".into()));
    }
    PosteriorMoments::new(mu.as_slice().to_vec(), sigma.as_slice().to_vec())
}

/// `vec(E) = μ + σ ⊙ ξ`, reshaped row-major into an `r × r` matrix.
pub fn sample_latent(moments: &PosteriorMoments, xi: &[f64]) -> Result<Matrix> {
    let n = moments.mu.len();
    if xi.len() != n {
        return Err(Error::dim("sample_latent noise", n, xi.len()));
    }
    let r = (n as f64).sqrt().round() as usize;
    if r * r != n {
        return Err(Error::Input(format!("latent length {n} is not a perfect square")));
    }
    let data = moments
        .mu
        .iter()
        .zip(&moments.sigma)
        .zip(xi)
        .map(|((m, s), x)| m + s * x)
        .collect();
    Matrix::from_vec(r, r, data)
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, β²))` summed over elements.
pub fn kl_to_prior(moments: &PosteriorMoments, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("prior scale {beta} must be positive")));
    }
    let two_b2 = 2.0 * beta * beta;
    moments
        .mu
        .iter()
        .zip(&moments.sigma)
        .try_fold(0.0, |acc, (&m, &s)| {
            if !(s > 0.0) {
                return Err(Error::Domain(format!("posterior scale {s} must be positive")));
            }
            Ok(acc + (beta / s).ln() + (s * s + m * m) / two_b2 - 0.5)
        })
}

/// Reparameterised draw on the tape; `xi` is a constant of the same shape.
pub fn reparameterize(tape: &mut Tape, moments: MomentVars, xi: Matrix) -> Result<Var> {
    let xi = tape.constant(xi);
    let noise = tape.mul(moments.sigma, xi)?;
    tape.add(moments.mu, noise)
}

/// Closed-form KL of every row summed over elements, then averaged over rows
/// (token positions). `1 × 1`.
pub fn kl_token_mean(tape: &mut Tape, moments: MomentVars, beta: f64) -> Result<Var> {
    let (rows, cols) = tape.shape(moments.mu);
    let log_sigma = tape.log(moments.sigma)?;
    let sigma_sq = tape.mul(moments.sigma, moments.sigma)?;
    let mu_sq = tape.mul(moments.mu, moments.mu)?;
    let second = tape.add(sigma_sq, mu_sq)?;
    let second = tape.scale(second, 1.0 / (2.0 * beta * beta));
    let per_elem = tape.sub(second, log_sigma)?;
    let total = tape.sum(per_elem);
    let total = tape.add_scalar(total, (rows * cols) as f64 * (beta.ln() - 0.5));
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Reparameterised draw of a BLoB factor `A = μ_A + σ_A ⊙ ξ` (all `r × k`).
pub fn blob_posterior_sample(mu: &Matrix, sigma: &Matrix, xi: &Matrix) -> Result<Matrix> {
    if mu.shape() != sigma.shape() || mu.shape() != xi.shape() {
        return Err(Error::dim(
            "blob_posterior_sample",
            format!("{:?}", mu.shape()),
            format!("{:?} / {:?}", sigma.shape(), xi.shape()),
        ));
    }
    Ok(mu.zip_map(&sigma.zip_map(xi, |s, x| s * x), |m, n| m + n))
}

/// Source of the standard-normal variates `ξ` consumed by stochastic adapters.
///
/// Variates are requested per (site, token); BLoB factor draws use
/// [`GLOBAL_TOKEN`] as the token key.
pub trait NoiseSource {
    fn fill(&mut self, site: usize, token: usize, out: &mut [f64]);

    /// True when every draw is zero (posterior-mean evaluation).
    fn is_zero(&self) -> bool {
        false
    }
}

/// Token key for draws that are not tied to a token position.
pub const GLOBAL_TOKEN: usize = usize::MAX;

/// Counter-keyed noise: the variates for (site, token) come from an [`Rng`]
/// seeded by `keyed_seed(seed, [step, sample, site, token])`. Identical keys
/// reproduce identical draws regardless of evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyedNoise {
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
}

impl KeyedNoise {
    pub fn new(seed: u64, step: u64, sample: u64) -> Self {
        Self { seed, step, sample }
    }
}

impl NoiseSource for KeyedNoise {
    fn fill(&mut self, site: usize, token: usize, out: &mut [f64]) {
        let key = keyed_seed(self.seed, &[self.step, self.sample, site as u64, token as u64]);
        let mut rng = Rng::new(key);
        out.iter_mut().for_each(|v| *v = rng.normal());
    }
}

/// `ξ = 0` everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill(&mut self, _: usize, _: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// Wraps a source and counts the variates drawn per (site, token) request.
pub struct CountingNoise<N> {
    pub inner: N,
    pub requests: Vec<(usize, usize, usize)>,
    total: Cell<usize>,
}

impl<N: NoiseSource> CountingNoise<N> {
    pub fn new(inner: N) -> Self {
        Self {
            inner,
            requests: Vec::new(),
            total: Cell::new(0),
        }
    }

    pub fn total(&self) -> usize {
        self.total.get()
    }
}

impl<N: NoiseSource> NoiseSource for CountingNoise<N> {
    fn fill(&mut self, site: usize, token: usize, out: &mut [f64]) {
        self.requests.push((site, token, out.len()));
        self.total.set(self.total.get() + out.len());
        self.inner.fill(site, token, out);
    }

    fn is_zero(&self) -> bool {
        self.inner.is_zero()
    }
}

/// Batch objective terms. `total = log_likelihood − γ · Σ kl_per_layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub log_likelihood: f64,
    /// Per adapted site, summed over samples, each sample's KL averaged over its tokens.
    pub kl_per_layer: Vec<f64>,
    pub total: f64,
}

/// Options for assembling the objective of one batch.
#[derive(Clone, Copy, Debug)]
pub struct ElboOptions {
    /// Fraction of the dataset this batch represents. Scales the KL of
    /// input-independent (BLoB) posteriors so that one pass over the data
    /// counts it once.
    pub kl_share: f64,
    /// Noise seed and optimiser step keying the per-sample draws.
    pub noise_seed: u64,
    pub step: u64,
}

impl ElboOptions {
    pub fn new(noise_seed: u64, step: u64) -> Self {
        Self {
            kl_share: 1.0,
            noise_seed,
            step,
        }
    }
}

/// One sample's objective recorded on a fresh tape.
pub struct SampleObjective {
    pub tape: Tape,
    pub objective: Var,
    pub log_likelihood: f64,
    pub kl_per_site: Vec<f64>,
}

/// Records `log p(y | x, E) − γ Σ_ℓ KL̄_ℓ` for one sample with one draw per
/// (site, token). `sample_key` keys the noise stream.
pub fn sample_objective(
    model: &Model,
    sample: &MultimodalSample,
    sample_key: u64,
    prior: &PriorConfig,
    opts: &ElboOptions,
    include_kl: bool,
) -> Result<SampleObjective> {
    let mut tape = Tape::new();
    let mut noise = KeyedNoise::new(opts.noise_seed, opts.step, sample_key);
    let out = model.forward(&mut tape, sample, &mut noise, false)?;
    let log_probs = tape.log_softmax_rows(out.logits);
    let ll = tape.entry(log_probs, 0, sample.label as usize)?;
    let log_likelihood = tape.scalar(ll);
    let mut kl_per_site = vec![0.0; model.site_count()];
    let mut objective = ll;
    if include_kl {
        for (site, kl) in out.kl.iter().enumerate() {
            if let Some(kl) = kl {
                kl_per_site[site] = tape.scalar(*kl);
                let weighted = tape.scale(*kl, -prior.gamma);
                objective = tape.add(objective, weighted)?;
            }
        }
    }
    if !tape.scalar(objective).is_finite() {
        return Err(Error::Numeric("non-finite sample objective".into()));
    }
    Ok(SampleObjective {
        tape,
        objective,
        log_likelihood,
        kl_per_site,
    })
}

/// ELBO of a batch with sample keys `0..batch.len()` (see [`elbo_keyed`]).
pub fn elbo(
    batch: &[MultimodalSample],
    model: &Model,
    prior: &PriorConfig,
    opts: &ElboOptions,
) -> Result<ElboBreakdown> {
    let keys: Vec<u64> = (0..batch.len() as u64).collect();
    elbo_keyed(batch, &keys, model, prior, opts)
}

/// Batch ELBO: Σ_i [log p(y_i | x_i, E_i) − γ Σ_ℓ (1/T_i) Σ_t KL_{i,ℓ,t}],
/// plus `γ · kl_share · KL(q(A) ‖ p(A))` per site for input-independent posteriors.
pub fn elbo_keyed(
    batch: &[MultimodalSample],
    keys: &[u64],
    model: &Model,
    prior: &PriorConfig,
    opts: &ElboOptions,
) -> Result<ElboBreakdown> {
    if batch.is_empty() {
        return Err(Error::Input("ELBO of an empty batch".into()));
    }
    let mut log_likelihood = 0.0;
    let mut kl_per_layer = vec![0.0; model.site_count()];
    for (sample, &key) in batch.iter().zip(keys) {
        let obj = sample_objective(model, sample, key, prior, opts, true)?;
        log_likelihood += obj.log_likelihood;
        for (acc, kl) in kl_per_layer.iter_mut().zip(&obj.kl_per_site) {
            *acc += kl;
        }
    }
    let mut tape = Tape::new();
    if let Some(kls) = model.global_kl(&mut tape)? {
        for (acc, kl) in kl_per_layer.iter_mut().zip(kls) {
            *acc += opts.kl_share * tape.scalar(kl);
        }
    }
    let total = log_likelihood - prior.gamma * kl_per_layer.iter().sum::<f64>();
    Ok(ElboBreakdown {
        log_likelihood,
        kl_per_layer,
        total,
    })
}
