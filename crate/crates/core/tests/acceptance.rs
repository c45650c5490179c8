//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion before asserting.
//!
//! Criteria 4, 5, 6 and 10 share one experiment (five seeds, three variants)
//! that runs once per test binary.

use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use caliber::adapters::{ForwardOptions, LatentMode, Model, ModelSpec, Variant};
use caliber::backbone::{BackboneConfig, FrozenBackbone};
use caliber::crossmodal::CrossModalConfig;
use caliber::data::{generate, Dataset, SynthConfig};
use caliber::eval::{
    attention_record, ece_from_confidences, evaluate, forward_probs, predict_mc, MetricsReport,
};
use caliber::numerics::{finite_diff_gradient, relative_error, Matrix, Rng, Tape};
use caliber::training::{Objective, TrainConfig, Trainer};
use caliber::variational::{
    kl_to_prior, CountingNoise, KeyedNoise, NoiseSource, PosteriorMoments,
};

/// Tests run one at a time so each time budget measures only its own work.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion:>2} [{verdict}] {name}: {detail}");
}

// ---------------------------------------------------------------- criterion 1

fn small_config(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 2,
        backbone: BackboneConfig {
            layers: 2,
            d_model: 16,
            heads: 1,
            ffn_width: 32,
            max_tokens: 8,
            vocab: 16,
            seed: 3,
        },
        crossmodal: CrossModalConfig { heads: 1, ..Default::default() },
        ..Default::default()
    };
    cfg.adapter.variant = variant;
    cfg.adapter.rank = 2;
    cfg
}

fn small_data(n: usize) -> Dataset {
    generate(&SynthConfig {
        n_samples: n,
        min_tokens: 3,
        max_tokens: 3,
        min_frames: 4,
        max_frames: 4,
        audio_width: 6,
        vocab: 16,
        window_len: 2,
        seed: 11,
        task_seed: 11,
        ..Default::default()
    })
    .unwrap()
}

/// Every parameter redrawn from `N(0, 0.3²)`, so no gradient vanishes by
/// construction (`B = 0` and the zero head output would hide most paths).
fn random_like(values: &[Matrix], seed: u64) -> Vec<Matrix> {
    let mut rng = Rng::new(seed);
    values
        .iter()
        .map(|m| Matrix::from_vec(m.rows(), m.cols(), (0..m.len()).map(|_| 0.3 * rng.normal()).collect()).unwrap())
        .collect()
}

fn randomize(trainer: &mut Trainer, seed: u64) {
    let values = random_like(&trainer.model().store().values(), seed);
    trainer.model_mut().store_mut().set_values(&values);
}

/// Fourth-order difference `(4 D(h/2) − D(h)) / 3` built from two central
/// differences. Its round-off floor is far below that of `D(1e-5)`.
fn richardson_gradient(trainer: &mut Trainer, data: &Dataset, batch: &[usize], params: &[Matrix]) -> Vec<Matrix> {
    let mut at = |h: f64| {
        finite_diff_gradient(
            |p: &[Matrix]| {
                trainer.model_mut().store_mut().set_values(p);
                trainer.batch_gradient(data, batch, 0).map(|(loss, _)| loss)
            },
            params,
            h,
        )
        .unwrap()
    };
    let coarse = at(1e-3);
    let fine = at(5e-4);
    coarse.iter().zip(&fine).map(|(c, f)| f.zip_map(c, |f, c| (4.0 * f - c) / 3.0)).collect()
}

#[test]
fn criterion_01_gradient_correctness() {
    let _serial = serial();
    let start = Instant::now();
    let data = small_data(2);
    let batch = [0, 1];
    let (mut worst, mut worst_richardson) = (0.0f64, 0.0f64);
    let mut checked = 0usize;
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let mut trainer = Trainer::new(small_config(variant), &data).unwrap();
        randomize(&mut trainer, 1100 + i as u64);
        let params = trainer.model().store().values();
        let (_, analytic) = trainer.batch_gradient(&data, &batch, 0).unwrap();
        let numeric = finite_diff_gradient(
            |p: &[Matrix]| {
                trainer.model_mut().store_mut().set_values(p);
                trainer.batch_gradient(&data, &batch, 0).map(|(loss, _)| loss)
            },
            &params,
            1e-5,
        )
        .unwrap();
        let extrapolated = richardson_gradient(&mut trainer, &data, &batch, &params);
        for ((a, n), x) in analytic.iter().zip(&numeric).zip(&extrapolated) {
            for ((&ga, &gn), &gx) in a.as_slice().iter().zip(n.as_slice()).zip(x.as_slice()) {
                worst = worst.max(relative_error(gn, ga, 1e-8));
                worst_richardson = worst_richardson.max(relative_error(gx, ga, 1e-8));
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-5 && worst_richardson <= 1e-5 && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{checked} adjoints over 6 variants; worst relative error {worst:.2e} (central, h=1e-5), \
             {worst_richardson:.2e} (extrapolated); {elapsed:.1?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_kl_oracle() {
    let _serial = serial();
    let beta = 0.2;
    let draws = 1_000_000;
    let mut rng = Rng::new(2024);
    let mut worst_z = 0.0f64;
    for _ in 0..20 {
        let mu = rng.normal() * 0.5;
        let sigma = 0.02 + 0.5 * rng.uniform();
        let closed = kl_to_prior(&PosteriorMoments::new(vec![mu], vec![sigma]).unwrap(), beta).unwrap();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let x = mu + sigma * rng.normal();
            let log_q = -(sigma.ln()) - 0.5 * ((x - mu) / sigma).powi(2);
            let log_p = -(beta.ln()) - 0.5 * (x / beta).powi(2);
            let term = log_q - log_p;
            sum += term;
            sum_sq += term * term;
        }
        let n = draws as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
        let se = (var / n).sqrt();
        worst_z = worst_z.max((mean - closed).abs() / se);
    }
    let pass = worst_z <= 3.0;
    report(2, "KL oracle", pass, &format!("20 cases, worst |closed − MC| = {worst_z:.2} standard errors"));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

/// Fills zeros without being the crate's own zero source.
struct HandZeros;

impl NoiseSource for HandZeros {
    fn fill(&mut self, _: usize, _: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[test]
fn criterion_03_collapse_identities() {
    let _serial = serial();
    let data = small_data(8);

    // (a) γ = 0 ELBO training equals maximum-likelihood training bit for bit.
    let mut identical_a = true;
    for variant in Variant::ALL {
        let mut elbo_cfg = small_config(variant);
        elbo_cfg.prior.gamma = 0.0;
        let mut ml_cfg = elbo_cfg.clone();
        ml_cfg.objective = Objective::MaximumLikelihood;
        let mut elbo = Trainer::new(elbo_cfg, &data).unwrap();
        let mut ml = Trainer::new(ml_cfg, &data).unwrap();
        for _ in 0..8 {
            let a = elbo.step(&data).unwrap();
            let b = ml.step(&data).unwrap();
            identical_a &= a.to_bits() == b.to_bits();
        }
        let pa = elbo.model().store().values();
        let pb = ml.model().store().values();
        identical_a &= pa
            .iter()
            .zip(&pb)
            .all(|(x, y)| x.as_slice().iter().zip(y.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    // (b) E = I reproduces plain LoRA with the same A, B and head.
    let mut worst_b = 0.0f64;
    let spec_for = |variant| {
        let cfg = small_config(variant);
        ModelSpec {
            backbone: cfg.backbone,
            crossmodal: cfg.crossmodal,
            adapter: cfg.adapter,
            prior: cfg.prior,
            classes: 2,
            audio_width: 6,
        }
    };
    let backbone = Arc::new(FrozenBackbone::build(small_config(Variant::Lora).backbone).unwrap());
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let mut model = Model::new(spec_for(variant), backbone.clone(), 40 + i as u64).unwrap();
        let values = random_like(&model.store().values(), 70 + i as u64);
        model.store_mut().set_values(&values);
        let mut lora = Model::new(spec_for(Variant::Lora), backbone.clone(), 0).unwrap();
        lora.copy_matching_params(&model);
        for sample in &data.samples {
            let opts = ForwardOptions { latent: LatentMode::Identity, ..Default::default() };
            let mut t1 = Tape::new();
            let out = model
                .forward_with(&mut t1, &sample.tokens, Some(&sample.frames), &mut KeyedNoise::new(1, 2, 3), opts)
                .unwrap();
            let mut t2 = Tape::new();
            let base = lora.forward(&mut t2, sample, &mut KeyedNoise::new(1, 2, 3), false).unwrap();
            for (x, y) in t1.value(out.logits).as_slice().iter().zip(t2.value(base.logits).as_slice()) {
                worst_b = worst_b.max((x - y).abs());
            }
        }
    }

    // (c) the ξ = 0 prediction is the posterior-mean forward pass.
    let mut identical_c = true;
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let mut model = Model::new(spec_for(variant), backbone.clone(), 90 + i as u64).unwrap();
        let values = random_like(&model.store().values(), 120 + i as u64);
        model.store_mut().set_values(&values);
        for sample in &data.samples {
            let predicted = predict_mc(&model, sample, 0, 5).unwrap();
            let mean_path = forward_probs(&model, sample, &mut HandZeros).unwrap();
            identical_c &= predicted.probs == mean_path;
        }
    }

    let pass = identical_a && worst_b <= 1e-12 && identical_c;
    report(
        3,
        "collapse identities",
        pass,
        &format!(
            "(a) γ=0 vs ML bit-identical: {identical_a}; (b) max |E=I − LoRA| = {worst_b:.1e}; (c) ξ=0 equals mean path: {identical_c}"
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------ criteria 4, 5, 6, 10

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const NOISE_LEVELS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
const EPOCHS: usize = 10;
const N_TRAIN: usize = 3000;

fn experiment_data(seed: u64, noise_sigma: f64) -> SynthConfig {
    SynthConfig {
        n_samples: 4000,
        classes: 2,
        text_ambiguity: 0.8,
        signal_strength: 1.0,
        noise_sigma,
        seed,
        task_seed: seed,
        ..Default::default()
    }
}

struct SeedResult {
    auc_lora: f64,
    auc_global: f64,
    auc_cross: f64,
    entropy_by_noise: Vec<f64>,
    entropy_split: Option<(f64, f64)>,
    window_mass: f64,
    uniform_mass: f64,
}

struct Experiment {
    seeds: Vec<SeedResult>,
    elapsed: Duration,
}

fn train_variant(variant: Variant, seed: u64, train: &Dataset) -> Model {
    let mut cfg = TrainConfig { epochs: EPOCHS, seed, ..Default::default() };
    cfg.adapter.variant = variant;
    let mut trainer = Trainer::new(cfg, train).unwrap();
    trainer.train(train).unwrap();
    trainer.into_model()
}

fn run_experiment() -> Experiment {
    let start = Instant::now();
    let mut seeds = Vec::new();
    for seed in SEEDS {
        let (train, test) = generate(&experiment_data(seed, 0.25)).unwrap().split(N_TRAIN);
        let eval_seed = 1000 + seed;
        let lora = train_variant(Variant::Lora, seed, &train);
        let auc_lora = evaluate(&lora, &test, 10, eval_seed).unwrap().auc;
        let global = train_variant(Variant::CaliberG, seed, &train);
        let auc_global = evaluate(&global, &test, 10, eval_seed).unwrap().auc;
        let cross = train_variant(Variant::CaliberX, seed, &train);
        let eval = evaluate(&cross, &test, 10, eval_seed).unwrap();

        let entropy_by_noise = NOISE_LEVELS
            .iter()
            .map(|&sigma| {
                let (_, shifted) = generate(&experiment_data(seed, sigma)).unwrap().split(N_TRAIN);
                evaluate(&cross, &shifted, 10, eval_seed).unwrap().mean_entropy
            })
            .collect();

        let (mut window_mass, mut uniform_mass) = (0.0, 0.0);
        for sample in &test.samples {
            let record = attention_record(&cross, sample).unwrap();
            window_mass += record.mean_mass_in(sample.window.start, sample.window.len);
            uniform_mass += sample.window.len as f64 / sample.frames.frame_count() as f64;
        }
        let n = test.len() as f64;
        seeds.push(SeedResult {
            auc_lora,
            auc_global,
            auc_cross: eval.auc,
            entropy_by_noise,
            entropy_split: eval.entropy.as_ref().map(|e| (e.mean_correct, e.mean_incorrect)),
            window_mass: window_mass / n,
            uniform_mass: uniform_mass / n,
        });
    }
    Experiment { seeds, elapsed: start.elapsed() }
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(run_experiment)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_04_cross_modal_benefit() {
    let _serial = serial();
    let exp = experiment();
    let lora = mean(exp.seeds.iter().map(|s| s.auc_lora));
    let global = mean(exp.seeds.iter().map(|s| s.auc_global));
    let cross = mean(exp.seeds.iter().map(|s| s.auc_cross));
    let pass = cross - lora >= 0.10 && cross >= global - 0.02 && exp.elapsed < Duration::from_secs(600);
    report(
        4,
        "cross-modal benefit",
        pass,
        &format!(
            "mean AUC caliber-x {cross:.4}, caliber-g {global:.4}, lora {lora:.4}; experiment took {:.1?}",
            exp.elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_uncertainty_monotonicity() {
    let _serial = serial();
    let exp = experiment();
    let passing = exp
        .seeds
        .iter()
        .filter(|s| s.entropy_by_noise.windows(2).all(|w| w[1] > w[0]))
        .count();
    let pass = passing >= 4;
    let traces: Vec<String> = exp
        .seeds
        .iter()
        .map(|s| format!("[{}]", s.entropy_by_noise.iter().map(|h| format!("{h:.3}")).collect::<Vec<_>>().join(" ")))
        .collect();
    report(
        5,
        "uncertainty monotonicity",
        pass,
        &format!("{passing}/5 seeds strictly increasing over σ = 0, 0.5, 1, 2: {}", traces.join(" ")),
    );
    assert!(pass);
}

#[test]
fn criterion_06_entropy_separation() {
    let _serial = serial();
    let exp = experiment();
    let passing = exp
        .seeds
        .iter()
        .filter(|s| matches!(s.entropy_split, Some((correct, incorrect)) if incorrect > correct))
        .count();
    let pass = passing >= 4;
    let pairs: Vec<String> = exp
        .seeds
        .iter()
        .map(|s| match s.entropy_split {
            Some((c, i)) => format!("{c:.3}<{i:.3}"),
            None => "no errors".into(),
        })
        .collect();
    report(
        6,
        "entropy separation",
        pass,
        &format!("{passing}/5 seeds with misclassified entropy above correct: {}", pairs.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_calibration_sanity() {
    let _serial = serial();
    let n = 10_000;
    let mut rng = Rng::new(77);
    let confidences: Vec<f64> = (0..n).map(|_| 0.5 + 0.5 * rng.uniform()).collect();
    let correct: Vec<bool> = confidences.iter().map(|&c| rng.uniform() < c).collect();
    let (calibrated, _) = ece_from_confidences(&confidences, &correct, 10).unwrap();

    let sure = vec![1.0; n];
    let half: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let (half_right, _) = ece_from_confidences(&sure, &half, 10).unwrap();

    let pass = calibrated < 0.02 && half_right == 0.5;
    report(
        7,
        "calibration metric sanity",
        pass,
        &format!("calibrated oracle ECE {calibrated:.4}; all-confident half-right ECE {half_right}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_08_complexity_invariant() {
    let _serial = serial();
    let data = small_data(4);
    let mut draws_ok = true;
    let mut counts_ok = true;
    let mut lines = Vec::new();
    for variant in Variant::ALL {
        for rank in [1, 2, 4] {
            let mut cfg = small_config(variant);
            cfg.adapter.rank = rank;
            let trainer = Trainer::new(cfg, &data).unwrap();
            let model = trainer.model();
            let registry = model.store().scalar_count();
            let formula = model.spec().formula_param_count();
            counts_ok &= registry == formula && model.trainable_param_count() == formula;
            if rank == 2 {
                lines.push(format!("{variant}={registry}"));
            }
            if !matches!(variant, Variant::Clora | Variant::CaliberG | Variant::CaliberX | Variant::CaliberXShared) {
                continue;
            }
            for sample in &data.samples {
                let mut noise = CountingNoise::new(KeyedNoise::new(1, 0, sample.id));
                let mut tape = Tape::new();
                model.forward(&mut tape, sample, &mut noise, false).unwrap();
                let t_x = sample.tokens.len();
                let mut keys: Vec<(usize, usize)> = noise.requests.iter().map(|&(s, t, _)| (s, t)).collect();
                keys.sort_unstable();
                keys.dedup();
                draws_ok &= noise.requests.iter().all(|&(_, _, n)| n == rank * rank)
                    && keys.len() == noise.requests.len()
                    && noise.requests.len() == model.site_count() * t_x
                    && noise.total() == model.site_count() * t_x * rank * rank;
            }
        }
    }
    let pass = draws_ok && counts_ok;
    report(
        8,
        "complexity invariant",
        pass,
        &format!(
            "r² variates per (token, site): {draws_ok}; registry = formula for r ∈ {{1,2,4}}: {counts_ok} (r=2: {})",
            lines.join(" ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

fn reproducible_run() -> (Vec<f64>, String) {
    let data = generate(&SynthConfig { n_samples: 240, seed: 9, task_seed: 9, ..Default::default() }).unwrap();
    let (train, test) = data.split(160);
    let cfg = TrainConfig { epochs: 2, seed: 9, ..Default::default() };
    let mut trainer = Trainer::new(cfg, &train).unwrap();
    let report = trainer.train(&train).unwrap();
    let eval = evaluate(trainer.model(), &test, 10, 9).unwrap();
    let metrics = MetricsReport::new("caliber-x", 9, &eval, 0).to_json();
    (report.epoch_losses, metrics)
}

#[test]
fn criterion_09_reproducibility() {
    let _serial = serial();
    let (loss_a, json_a) = reproducible_run();
    let (loss_b, json_b) = reproducible_run();
    let same_losses = loss_a.len() == loss_b.len() && loss_a.iter().zip(&loss_b).all(|(a, b)| a.to_bits() == b.to_bits());
    let pass = same_losses && json_a == json_b;
    report(
        9,
        "reproducibility",
        pass,
        &format!("loss traces bit-identical: {same_losses}; metric JSON identical: {}", json_a == json_b),
    );
    assert!(pass);
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_attention_locality() {
    let _serial = serial();
    let exp = experiment();
    let ratios: Vec<f64> = exp.seeds.iter().map(|s| s.window_mass / s.uniform_mass).collect();
    let passing = ratios.iter().filter(|&&r| r >= 1.5).count();
    let pass = passing >= 4;
    report(
        10,
        "attention locality",
        pass,
        &format!(
            "{passing}/5 seeds at ≥ 1.5× uniform; window mass over uniform baseline: {}",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ")
        ),
    );
    assert!(pass);
}
