use std::fs;

use caliber::data::{generate, load, save, Dataset, SynthConfig, BLOB_FILE, MANIFEST_FILE};
use caliber::Error;

/// Mean of the label-carrying window frames of every sample.
fn window_features(data: &Dataset) -> Vec<Vec<f64>> {
    data.samples
        .iter()
        .map(|s| {
            let mut acc = vec![0.0; data.audio_width];
            for f in s.window.start..s.window.start + s.window.len {
                for (a, x) in acc.iter_mut().zip(s.frames.frames().row(f)) {
                    *a += x / s.window.len as f64;
                }
            }
            acc
        })
        .collect()
}

/// Logistic-regression probe on standardised features, trained by full-batch
/// gradient descent on the first `n_train` samples; returns held-out accuracy.
fn probe_accuracy(x: &[Vec<f64>], y: &[u32], n_train: usize) -> f64 {
    let dim = x[0].len();
    let (train, test) = (&x[..n_train], &x[n_train..]);
    let mean: Vec<f64> = (0..dim).map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n_train as f64).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| (train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n_train as f64).sqrt().max(1e-12))
        .collect();
    let standardise = |r: &Vec<f64>| -> Vec<f64> { r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect() };
    let train: Vec<Vec<f64>> = train.iter().map(standardise).collect();
    let test: Vec<Vec<f64>> = test.iter().map(standardise).collect();
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    for _ in 0..400 {
        let (mut gw, mut gb) = (vec![0.0; dim], 0.0);
        for (r, &label) in train.iter().zip(y) {
            let z = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - label as f64;
            gb += err;
            for (g, a) in gw.iter_mut().zip(r) {
                *g += err * a;
            }
        }
        b -= 0.5 * gb / n_train as f64;
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= 0.5 * g / n_train as f64;
        }
    }
    let correct = test
        .iter()
        .zip(&y[n_train..])
        .filter(|(r, &label)| {
            let z = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (label == 1)
        })
        .count();
    correct as f64 / test.len() as f64
}

fn audio_only(noise_sigma: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n_samples: 2000,
        signal_strength: 1.0,
        text_ambiguity: 1.0,
        noise_sigma,
        seed,
        task_seed: seed,
        ..Default::default()
    }
}

#[test]
fn audio_window_determines_the_label_without_noise() {
    let data = generate(&audio_only(0.0, 1)).unwrap();
    let acc = probe_accuracy(&window_features(&data), &data.labels(), 1500);
    assert!(acc > 0.95, "probe accuracy {acc}");
}

#[test]
fn audio_noise_degrades_the_probe() {
    let levels = [0.0, 0.5, 1.0, 2.0];
    let mut mean_acc = vec![0.0; levels.len()];
    for seed in 0..5 {
        for (acc, &sigma) in mean_acc.iter_mut().zip(&levels) {
            let data = generate(&audio_only(sigma, seed)).unwrap();
            *acc += probe_accuracy(&window_features(&data), &data.labels(), 1500) / 5.0;
        }
    }
    assert!(mean_acc.windows(2).all(|w| w[1] <= w[0]), "{mean_acc:?}");
}

#[test]
fn unambiguous_text_alone_determines_the_label() {
    let cfg = SynthConfig { n_samples: 500, signal_strength: 0.0, text_ambiguity: 0.0, seed: 3, ..Default::default() };
    let data = generate(&cfg).unwrap();
    let c = data.classes as u32;
    for s in &data.samples {
        assert!(s.tokens.iter().all(|t| t % c == s.label));
    }
    // With s = 0 the window frames are drawn exactly like every other frame.
    let quiet = generate(&SynthConfig { noise_sigma: 0.0, ..cfg }).unwrap();
    assert!(quiet.samples.iter().all(|s| s.frames.frames().as_slice().iter().all(|&v| v == 0.0)));
}

#[test]
fn classes_are_balanced() {
    let data = generate(&SynthConfig { n_samples: 4000, seed: 8, ..Default::default() }).unwrap();
    let ones = data.labels().iter().filter(|&&l| l == 1).count() as f64 / 4000.0;
    assert!((ones - 0.5).abs() <= 0.03);
    for s in &data.samples {
        assert!(s.tokens.iter().all(|&t| (t as usize) < data.vocab));
        assert!((4..=10).contains(&s.tokens.len()));
        assert!((8..=16).contains(&s.frames.frame_count()));
    }
}

#[test]
fn save_then_load_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthConfig { n_samples: 30, seed: 4, ..Default::default() }).unwrap();
    save(&data, dir.path()).unwrap();
    assert_eq!(load(dir.path()).unwrap(), data);
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthConfig { n_samples: 0, ..Default::default() }).unwrap();
    save(&data, dir.path()).unwrap();
    let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert_eq!(load(dir.path()).unwrap(), data);
}

#[test]
fn truncated_blob_reports_its_offset() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthConfig { n_samples: 10, seed: 5, ..Default::default() }).unwrap();
    save(&data, dir.path()).unwrap();
    let blob = dir.path().join(BLOB_FILE);
    let bytes = fs::read(&blob).unwrap();
    let cut = bytes.len() - 100;
    fs::write(&blob, &bytes[..cut]).unwrap();
    match load(dir.path()) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, cut as u64);
            assert!(message.contains("truncated"));
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn malformed_manifest_reports_its_offset() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthConfig { n_samples: 3, seed: 6, ..Default::default() }).unwrap();
    save(&data, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let header_len = text.lines().take(2).map(|l| l.len() + 1).sum::<usize>();
    let broken = format!("{}0 x 1 0 8 0 3\n", &text[..header_len]);
    fs::write(&path, broken).unwrap();
    match load(dir.path()) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, header_len as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
}
