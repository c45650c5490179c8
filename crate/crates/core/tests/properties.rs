use std::rc::Rc;
use std::sync::Arc;

use caliber::adapters::{AdapterConfig, Model, ModelSpec, Variant};
use caliber::backbone::{forward_with_adapters, BackboneConfig, FrozenBackbone, NoAdapters, Sublayer};
use caliber::crossmodal::{
    cross_attention_context, global_audio_context, project_audio, AudioFrames, CrossModalConfig,
};
use caliber::data::{generate, MultimodalSample, SynthConfig};
use caliber::eval::{entropy, predict_mc};
use caliber::numerics::{Matrix, Rng, Tape};
use caliber::training::{TrainConfig, Trainer};
use caliber::variational::{
    kl_to_prior, kl_token_mean, sample_latent, KeyedNoise, MomentVars, PosteriorMoments, PriorConfig,
    ZeroNoise,
};

fn backbone_config() -> BackboneConfig {
    BackboneConfig { layers: 2, d_model: 8, heads: 2, ffn_width: 16, max_tokens: 10, vocab: 64, seed: 21 }
}

fn spec(variant: Variant, layers: usize) -> ModelSpec {
    ModelSpec {
        backbone: BackboneConfig { layers, ..backbone_config() },
        crossmodal: CrossModalConfig { context_width: 6, attention_width: 4, heads: 2, projector_hidden: 5 },
        adapter: AdapterConfig { variant, rank: 3, ..Default::default() },
        prior: PriorConfig::default(),
        classes: 2,
        audio_width: 24,
    }
}

fn model(variant: Variant, seed: u64) -> Model {
    let spec = spec(variant, 2);
    let backbone = Arc::new(FrozenBackbone::build(spec.backbone.clone()).unwrap());
    Model::new(spec, backbone, seed).unwrap()
}

/// Every parameter redrawn at scale 0.5 so all paths carry signal.
fn randomized(mut m: Model, seed: u64) -> Model {
    let mut rng = Rng::new(seed);
    let values: Vec<Matrix> = m
        .store()
        .values()
        .iter()
        .map(|v| Matrix::from_vec(v.rows(), v.cols(), (0..v.len()).map(|_| 0.5 * rng.normal()).collect()).unwrap())
        .collect();
    m.store_mut().set_values(&values);
    m
}

fn samples(n: usize, seed: u64) -> Vec<MultimodalSample> {
    generate(&SynthConfig { n_samples: n, seed, task_seed: seed, ..Default::default() }).unwrap().samples
}

fn logits(m: &Model, tokens: &[u32], frames: &AudioFrames) -> Vec<f64> {
    let mut tape = Tape::new();
    let out = m
        .forward_with(&mut tape, tokens, Some(frames), &mut KeyedNoise::new(3, 0, 0), Default::default())
        .unwrap();
    tape.value(out.logits).as_slice().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_frames(rng: &mut Rng, t_a: usize, width: usize) -> Matrix {
    Matrix::from_vec(t_a, width, rng.normals(t_a * width)).unwrap()
}

#[test]
fn attention_is_invariant_to_frame_order() {
    let m = randomized(model(Variant::CaliberX, 1), 2);
    let site = m.sites()[0];
    let params = site.attention.unwrap();
    let mut rng = Rng::new(4);
    let mask = vec![true, false, true, true, false, true];
    let frames = AudioFrames::new(random_frames(&mut rng, 6, 24), mask).unwrap();
    let order = [3, 5, 0, 1, 4, 2];
    let permuted = frames.permuted(&order);
    let z = Matrix::from_vec(4, 3, rng.normals(12)).unwrap();

    let run = |f: &AudioFrames| {
        let mut tape = Tape::new();
        let u = project_audio(&mut tape, m.store(), m.projector().unwrap(), f).unwrap();
        let zv = tape.constant(z.clone());
        let valid: Rc<[bool]> = Rc::from(f.mask());
        let ctx = cross_attention_context(&mut tape, m.store(), &params, 2, zv, u, &valid).unwrap();
        (tape.value(ctx.context).clone(), ctx.weights)
    };
    let (ctx_a, w_a) = run(&frames);
    let (ctx_b, w_b) = run(&permuted);
    assert!(max_diff(ctx_a.as_slice(), ctx_b.as_slice()) <= 1e-12);
    for t in 0..4 {
        let row = w_a.row(t);
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(row[1], 0.0);
        assert_eq!(row[4], 0.0);
        for (i, &src) in order.iter().enumerate() {
            assert!((w_b.get(t, i) - row[src]).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_frame_attention_ignores_the_query() {
    let m = randomized(model(Variant::CaliberX, 5), 6);
    let params = m.sites()[1].attention.unwrap();
    let mut rng = Rng::new(8);
    let frames = AudioFrames::unmasked(random_frames(&mut rng, 1, 24)).unwrap();
    let mut tape = Tape::new();
    let u = project_audio(&mut tape, m.store(), m.projector().unwrap(), &frames).unwrap();
    let z = tape.constant(Matrix::from_vec(3, 3, rng.normals(9)).unwrap());
    let ctx = cross_attention_context(&mut tape, m.store(), &params, 2, z, u, &Rc::from(vec![true])).unwrap();
    assert!(ctx.weights.as_slice().iter().all(|&w| w == 1.0));
    let c = tape.value(ctx.context);
    for t in 1..3 {
        assert!(max_diff(c.row(0), c.row(t)) <= 1e-12);
    }
}

#[test]
fn identical_frames_give_uniform_attention_and_single_frame_context() {
    let m = randomized(model(Variant::CaliberX, 9), 10);
    let params = m.sites()[0].attention.unwrap();
    let mut rng = Rng::new(12);
    let one = rng.normals(24);
    let repeated = AudioFrames::unmasked(Matrix::from_vec(5, 24, one.repeat(5)).unwrap()).unwrap();
    let single = AudioFrames::unmasked(Matrix::row_vector(one)).unwrap();
    let z = Matrix::from_vec(2, 3, rng.normals(6)).unwrap();
    let run = |f: &AudioFrames| {
        let mut tape = Tape::new();
        let u = project_audio(&mut tape, m.store(), m.projector().unwrap(), f).unwrap();
        let zv = tape.constant(z.clone());
        let valid: Rc<[bool]> = Rc::from(f.mask());
        let ctx = cross_attention_context(&mut tape, m.store(), &params, 2, zv, u, &valid).unwrap();
        (tape.value(ctx.context).clone(), ctx.weights)
    };
    let (a, weights) = run(&repeated);
    let (b, _) = run(&single);
    assert!(max_diff(a.as_slice(), b.as_slice()) <= 1e-12);
    assert!(weights.as_slice().iter().all(|w| (w - 0.2).abs() <= 1e-12));
}

#[test]
fn global_context_is_order_free_and_pools_identical_frames() {
    let m = randomized(model(Variant::CaliberG, 13), 14);
    let map = m.sites()[0].global.unwrap();
    let proj = m.projector().unwrap();
    let mut rng = Rng::new(15);
    let frames = AudioFrames::new(random_frames(&mut rng, 5, 24), vec![true, true, false, true, true]).unwrap();
    let run = |f: &AudioFrames| {
        let mut tape = Tape::new();
        let g = global_audio_context(&mut tape, m.store(), proj, &map, f).unwrap();
        assert_eq!(tape.shape(g), (1, 3));
        tape.value(g).as_slice().to_vec()
    };
    assert!(max_diff(&run(&frames), &run(&frames.permuted(&[4, 2, 0, 3, 1]))) <= 1e-12);

    let one = rng.normals(24);
    let repeated = AudioFrames::unmasked(Matrix::from_vec(3, 24, one.repeat(3)).unwrap()).unwrap();
    let single = AudioFrames::unmasked(Matrix::row_vector(one)).unwrap();
    assert!(max_diff(&run(&repeated), &run(&single)) <= 1e-12);
}

#[test]
fn every_variant_equals_the_frozen_forward_at_initialisation() {
    let data = samples(6, 3);
    for variant in Variant::ALL {
        let m = model(variant, 30);
        for s in &data {
            let mut tape = Tape::new();
            let (_, frozen) =
                forward_with_adapters(&mut tape, m.backbone(), m.store(), m.classifier(), &s.tokens, &mut NoAdapters)
                    .unwrap();
            let want = tape.value(frozen).as_slice().to_vec();
            assert!(max_diff(&logits(&m, &s.tokens, &s.frames), &want) <= 1e-12, "{variant}");
        }
    }
}

#[test]
fn shared_key_value_saves_exactly_the_repeated_projections() {
    let cm = spec(Variant::CaliberX, 2).crossmodal;
    for layers in [1, 2, 3] {
        let count = |variant| {
            let s = spec(variant, layers);
            let backbone = Arc::new(FrozenBackbone::build(s.backbone.clone()).unwrap());
            let sites = s.site_count();
            (Model::new(s, backbone, 0).unwrap().trainable_param_count(), sites)
        };
        let (full, sites) = count(Variant::CaliberX);
        let (shared, _) = count(Variant::CaliberXShared);
        let kv = 2 * cm.attention_width * cm.context_width;
        assert_eq!(full - shared, (sites - 1) * kv);
    }
}

#[test]
fn shared_and_per_site_attention_agree_with_one_adapted_site() {
    let mut s = spec(Variant::CaliberX, 1);
    s.adapter.sublayers = vec![Sublayer::Value];
    let backbone = Arc::new(FrozenBackbone::build(s.backbone.clone()).unwrap());
    let full = randomized(Model::new(s.clone(), backbone.clone(), 1).unwrap(), 2);
    s.adapter.variant = Variant::CaliberXShared;
    let mut shared = Model::new(s, backbone, 7).unwrap();
    shared.copy_matching_params(&full);
    let store = full.store();
    for (from, to) in [("l0.value.w_key", "shared.w_key"), ("l0.value.w_value", "shared.w_value")] {
        let value = store.get(store.find(from).unwrap()).clone();
        let id = shared.store().find(to).unwrap();
        *shared.store_mut().get_mut(id) = value;
    }
    for smp in samples(5, 8) {
        assert_eq!(logits(&full, &smp.tokens, &smp.frames), logits(&shared, &smp.tokens, &smp.frames));
    }
}

#[test]
fn posterior_scale_depends_on_the_audio_after_one_step() {
    let data = generate(&SynthConfig { n_samples: 64, seed: 2, task_seed: 2, ..Default::default() }).unwrap();
    let mut cfg = TrainConfig { epochs: 1, seed: 4, batch_size: 16, ..Default::default() };
    cfg.adapter.variant = Variant::CaliberX;
    let mut trainer = Trainer::new(cfg, &data).unwrap();
    trainer.step(&data).unwrap();
    let m = trainer.model();
    let text = &data.samples[0].tokens;
    let sigma = |frames: &AudioFrames| {
        let mut tape = Tape::new();
        let out = m.forward_with(&mut tape, text, Some(frames), &mut ZeroNoise, Default::default()).unwrap();
        out.moments.iter().flat_map(|mv| tape.value(mv.unwrap().sigma).as_slice().to_vec()).collect::<Vec<f64>>()
    };
    let a = sigma(&data.samples[0].frames);
    let b = sigma(&data.samples[1].frames);
    assert!(a.iter().all(|&s| s >= PriorConfig::default().delta));
    assert!(max_diff(&a, &b) > 0.0);
}

#[test]
fn gradients_reach_every_cross_modal_parameter() {
    let data = generate(&SynthConfig { n_samples: 4, seed: 6, task_seed: 6, ..Default::default() }).unwrap();
    for variant in [Variant::CaliberX, Variant::CaliberXShared, Variant::CaliberG] {
        let mut cfg = TrainConfig { seed: 1, ..Default::default() };
        cfg.adapter.variant = variant;
        let mut trainer = Trainer::new(cfg, &data).unwrap();
        let values = randomized(trainer.model().clone(), 11).store().values();
        trainer.model_mut().store_mut().set_values(&values);
        let (_, grads) = trainer.batch_gradient(&data, &[0, 1, 2, 3], 0).unwrap();
        for ((_, name, _), g) in trainer.model().store().iter().zip(&grads) {
            let watched = ["audio_proj", "w_query", "w_key", "w_value", "w_out", "w_global"];
            if watched.iter().any(|w| name.contains(w)) {
                assert!(g.as_slice().iter().any(|&v| v != 0.0), "{variant}: {name} has no gradient");
            }
        }
    }
}

#[test]
fn kl_is_nonnegative_and_zero_only_at_the_prior() {
    let beta = 0.2;
    let mut rng = Rng::new(31);
    for _ in 0..200 {
        let mu: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let sigma: Vec<f64> = (0..5).map(|_| 0.01 + rng.uniform()).collect();
        assert!(kl_to_prior(&PosteriorMoments::new(mu, sigma).unwrap(), beta).unwrap() > 0.0);
    }
    let at_prior = PosteriorMoments::new(vec![0.0; 5], vec![beta; 5]).unwrap();
    assert!(kl_to_prior(&at_prior, beta).unwrap().abs() <= 1e-12);
}

#[test]
fn token_averaged_kl_ignores_sequence_length() {
    let mut rng = Rng::new(32);
    let mu = Matrix::from_vec(3, 4, rng.normals(12)).unwrap();
    let sigma = Matrix::from_vec(3, 4, (0..12).map(|_| 0.05 + rng.uniform()).collect()).unwrap();
    let doubled = |m: &Matrix| m.select_rows(&[0, 0, 1, 1, 2, 2]);
    let kl = |mu: Matrix, sigma: Matrix| {
        let mut tape = Tape::new();
        let moments = MomentVars { mu: tape.constant(mu), sigma: tape.constant(sigma) };
        let v = kl_token_mean(&mut tape, moments, 0.2).unwrap();
        tape.scalar(v)
    };
    let once = kl(mu.clone(), sigma.clone());
    let twice = kl(doubled(&mu), doubled(&sigma));
    assert!((once - twice).abs() <= 1e-12 * once.abs().max(1.0));
}

#[test]
fn latent_draws_have_the_posterior_mean() {
    let moments = PosteriorMoments::new(vec![0.3, -1.2, 0.0, 2.0], vec![0.5, 0.1, 1.0, 0.02]).unwrap();
    let n = 20_000;
    let mut rng = Rng::new(33);
    let mut sum = [0.0; 4];
    for _ in 0..n {
        let e = sample_latent(&moments, &rng.normals(4)).unwrap();
        assert_eq!(e.shape(), (2, 2));
        for (s, v) in sum.iter_mut().zip(e.as_slice()) {
            *s += v;
        }
    }
    for ((s, mu), sigma) in sum.iter().zip(&moments.mu).zip(&moments.sigma) {
        let se = sigma / (n as f64).sqrt();
        assert!((s / n as f64 - mu).abs() <= 4.0 * se);
    }
}

#[test]
fn predictive_distribution_is_a_simplex_and_obeys_jensen() {
    let m = randomized(model(Variant::CaliberX, 40), 41);
    for s in samples(10, 42) {
        let r = predict_mc(&m, &s, 10, 7).unwrap();
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(r.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(r.entropy >= 0.0 && r.entropy <= 2f64.ln() + 1e-12);
        let mean_entropy = r.draws.iter().map(|d| entropy(d)).sum::<f64>() / r.draws.len() as f64;
        assert!(r.entropy >= mean_entropy - 1e-12);
    }
}

#[test]
fn disjoint_monte_carlo_averages_agree() {
    // A large prior scale makes the draws differ noticeably.
    let mut s = spec(Variant::CaliberX, 1);
    s.prior.epsilon = 2.0;
    let backbone = Arc::new(FrozenBackbone::build(s.backbone.clone()).unwrap());
    let m = randomized(Model::new(s, backbone, 0).unwrap(), 43);
    let sample = &samples(1, 44)[0];
    let n = 10_000;
    let stats = |seed: u64| {
        let r = predict_mc(&m, sample, n, seed).unwrap();
        let xs: Vec<f64> = r.draws.iter().map(|d| d[1]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (mean, var)
    };
    let (m1, v1) = stats(100);
    let (m2, v2) = stats(200);
    assert!(v1 > 0.0);
    let pooled_se = ((v1 + v2) / n as f64).sqrt();
    assert!((m1 - m2).abs() <= 3.0 * pooled_se, "{m1} vs {m2} (se {pooled_se})");
}
