//! Synthetic multimodal classification data and its on-disk format.
//!
//! Each sample has a label `y`, a token sequence and a matrix of audio frames.
//! Tokens come from the label's token block (`id mod C == y`) with probability
//! `1 − text_ambiguity` and uniformly from the vocabulary otherwise. A
//! contiguous window of frames carries `s · (ρ u + λ κ v_y) + σ ξ`, where
//! `ρ u + κ v_y` is the class mean (see [`SynthConfig::class_means`]) and the
//! clarity `λ` is drawn once per sample; every other frame is `σ ξ`. The standard normals `ξ` are drawn whatever
//! `σ` is, so regenerating with another noise level keeps labels, tokens,
//! windows and the underlying draws fixed.
//!
//! # File format
//!
//! A dataset is a directory with two files.
//!
//! `manifest.txt` is UTF-8 text:
//!
//! ```text
//! caliber-dataset 1
//! samples <n> audio_width <d_a> vocab <V> classes <C>
//! <id> <T_x> <T_a> <label> <offset> <window_start> <window_len>
//! ...
//! ```
//!
//! `data.bin` starts with the 8 magic bytes `CALDATA1`. The record of a
//! sample begins at its manifest `offset` and holds, little-endian and without
//! padding: `T_x` token ids as `u32`, `T_a × d_a` frame values as `f64` in
//! row-major order, then `T_a` mask bytes (`1` valid, `0` masked).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crossmodal::AudioFrames;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, keyed_seed, Matrix, Rng};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "data.bin";
const MANIFEST_MAGIC: &str = "caliber-dataset 1";
const BLOB_MAGIC: &[u8; 8] = b"CALDATA1";

/// Frames `[start, start + len)` carry the label signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SignalWindow {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub frames: AudioFrames,
    pub label: u32,
    pub window: SignalWindow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub audio_width: usize,
    pub vocab: usize,
    pub classes: usize,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// First `n_train` samples and the rest.
    pub fn split(&self, n_train: usize) -> (Dataset, Dataset) {
        let n = n_train.min(self.len());
        let part = |samples: &[MultimodalSample]| Dataset {
            samples: samples.to_vec(),
            ..self.header()
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }

    fn header(&self) -> Dataset {
        Dataset {
            audio_width: self.audio_width,
            vocab: self.vocab,
            classes: self.classes,
            samples: Vec::new(),
        }
    }

    pub fn max_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0)
    }

    pub fn sample_by_id(&self, id: u64) -> Option<&MultimodalSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub audio_width: usize,
    pub vocab: usize,
    pub classes: usize,
    /// `s ∈ [0, 1]`
    pub signal_strength: f64,
    pub noise_sigma: f64,
    /// `∈ [0, 1]`
    pub text_ambiguity: f64,
    /// Frames in the label-carrying window (capped at `T_a`).
    pub window_len: usize,
    /// Scale `ρ` of the shared window marker.
    pub marker_scale: f64,
    /// Scale `κ` of the class-specific part of the class means.
    pub class_separation: f64,
    /// Each sample's class-specific window signal is multiplied by a clarity
    /// `λ ~ U(min_clarity, 1)`; `1` turns the variation off.
    pub min_clarity: f64,
    /// Seeds the per-sample draws.
    pub seed: u64,
    /// Seeds the class means, so train and test sets drawn with different
    /// `seed` share one task.
    pub task_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            min_tokens: 4,
            max_tokens: 10,
            min_frames: 8,
            max_frames: 16,
            audio_width: 24,
            vocab: 64,
            classes: 2,
            signal_strength: 1.0,
            noise_sigma: 0.25,
            text_ambiguity: 0.8,
            window_len: 3,
            marker_scale: 2.0,
            class_separation: 1.0,
            min_clarity: 0.0,
            seed: 0,
            task_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range must satisfy 1 <= min_tokens <= max_tokens");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min_frames <= max_frames");
        }
        if self.audio_width == 0 {
            return bad("audio_width must be positive");
        }
        if self.classes < 2 || self.vocab < self.classes {
            return bad("need at least two classes and vocab >= classes");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.text_ambiguity) {
            return bad("text_ambiguity must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and nonnegative");
        }
        if self.window_len == 0 {
            return bad("window_len must be positive");
        }
        if !(self.marker_scale >= 0.0) || !self.marker_scale.is_finite() {
            return bad("marker_scale must be finite and nonnegative");
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return bad("class_separation must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.min_clarity) {
            return bad("min_clarity must lie in [0, 1]");
        }
        Ok(())
    }

    /// Class means `m_y = ρ u + κ v_y`, one row per class, with `u` and every
    /// `v_y` standard normal. The shared `ρ u` marks where the window is; only
    /// `κ v_y` tells the classes apart.
    pub fn class_means(&self) -> Matrix {
        let (shared, offsets) = self.class_parts();
        let data = (0..self.classes)
            .flat_map(|y| shared.iter().zip(offsets.row(y)).map(|(u, v)| u + v).collect::<Vec<_>>())
            .collect();
        Matrix::from_vec(self.classes, self.audio_width, data).expect("finite class means")
    }

    /// The shared marker `ρ u` and the rows `κ v_y`.
    fn class_parts(&self) -> (Vec<f64>, Matrix) {
        let mut rng = Rng::new(derive_seed(self.task_seed, "synth-class-means"));
        let shared: Vec<f64> = rng.normals(self.audio_width).into_iter().map(|x| self.marker_scale * x).collect();
        let data = (0..self.classes * self.audio_width)
            .map(|_| self.class_separation * rng.normal())
            .collect();
        let offsets = Matrix::from_vec(self.classes, self.audio_width, data).expect("finite class means");
        (shared, offsets)
    }
}

/// Draws a dataset; deterministic in the config.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (marker, offsets) = config.class_parts();
    let base = derive_seed(config.seed, "synth-samples");
    let c = config.classes;
    let block: Vec<Vec<u32>> = (0..c)
        .map(|y| (0..config.vocab as u32).filter(|t| *t as usize % c == y).collect())
        .collect();
    let samples = (0..config.n_samples)
        .map(|i| {
            let mut rng = Rng::new(keyed_seed(base, &[i as u64]));
            let label = rng.below(c) as u32;
            let t_x = rng.range_inclusive(config.min_tokens, config.max_tokens);
            let tokens = (0..t_x)
                .map(|_| {
                    let ambiguous = rng.uniform() < config.text_ambiguity;
                    if ambiguous {
                        rng.below(config.vocab) as u32
                    } else {
                        let own = &block[label as usize];
                        own[rng.below(own.len())]
                    }
                })
                .collect();
            let t_a = rng.range_inclusive(config.min_frames, config.max_frames);
            let len = config.window_len.min(t_a);
            let start = rng.below(t_a - len + 1);
            let clarity = config.min_clarity + (1.0 - config.min_clarity) * rng.uniform();
            let offset = offsets.row(label as usize);
            let mut data = Vec::with_capacity(t_a * config.audio_width);
            for s in 0..t_a {
                let in_window = (start..start + len).contains(&s);
                for (&u, &v) in marker.iter().zip(offset) {
                    let noise = config.noise_sigma * rng.normal();
                    let signal = if in_window { config.signal_strength * (u + clarity * v) } else { 0.0 };
                    data.push(signal + noise);
                }
            }
            let frames = AudioFrames::unmasked(Matrix::from_vec(t_a, config.audio_width, data)?)?;
            Ok(MultimodalSample {
                id: i as u64,
                tokens,
                frames,
                label,
                window: SignalWindow { start, len },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        audio_width: config.audio_width,
        vocab: config.vocab,
        classes: config.classes,
        samples,
    })
}

fn record_len(t_x: usize, t_a: usize, d_a: usize) -> usize {
    4 * t_x + 8 * t_a * d_a + t_a
}

/// Writes `manifest.txt` and `data.bin` into `dir`, creating it if needed.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!(
        "samples {} audio_width {} vocab {} classes {}\n",
        dataset.len(),
        dataset.audio_width,
        dataset.vocab,
        dataset.classes
    ));
    let mut blob = BLOB_MAGIC.to_vec();
    for s in &dataset.samples {
        if s.frames.width() != dataset.audio_width {
            return Err(Error::dim("sample frame width", dataset.audio_width, s.frames.width()));
        }
        manifest.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            s.id,
            s.tokens.len(),
            s.frames.frame_count(),
            s.label,
            blob.len(),
            s.window.start,
            s.window.len
        ));
        for t in &s.tokens {
            blob.extend_from_slice(&t.to_le_bytes());
        }
        for v in s.frames.frames().as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        blob.extend(s.frames.mask().iter().map(|&m| m as u8));
    }
    fs::File::create(dir.join(MANIFEST_FILE))?.write_all(manifest.as_bytes())?;
    fs::File::create(dir.join(BLOB_FILE))?.write_all(&blob)?;
    Ok(())
}

fn parse_fields<const N: usize>(line: &str, offset: u64) -> Result<[u64; N]> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != N {
        return Err(Error::format(
            offset,
            format!("expected {N} fields in manifest line, found {}", fields.len()),
        ));
    }
    let mut out = [0u64; N];
    for (o, f) in out.iter_mut().zip(&fields) {
        *o = f
            .parse()
            .map_err(|_| Error::format(offset, format!("'{f}' is not an unsigned integer")))?;
    }
    Ok(out)
}

fn parse_header(line: &str, offset: u64) -> Result<[usize; 4]> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let keys = ["samples", "audio_width", "vocab", "classes"];
    if fields.len() != 8 || fields.iter().step_by(2).zip(keys).any(|(f, k)| *f != k) {
        return Err(Error::format(offset, format!("malformed manifest header '{line}'")));
    }
    let mut out = [0usize; 4];
    for (o, f) in out.iter_mut().zip(fields.iter().skip(1).step_by(2)) {
        *o = f
            .parse()
            .map_err(|_| Error::format(offset, format!("'{f}' is not an unsigned integer")))?;
    }
    Ok(out)
}

/// Reads a dataset written by [`save`]. Malformed or truncated input yields
/// [`Error::Format`] with the byte offset (into the manifest for text
/// problems, into `data.bin` for binary ones).
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest = String::from_utf8(manifest)
        .map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "manifest is not UTF-8"))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() < BLOB_MAGIC.len() || &blob[..BLOB_MAGIC.len()] != BLOB_MAGIC {
        return Err(Error::format(0, "data.bin does not start with the CALDATA1 magic"));
    }

    let mut lines = Vec::new();
    let mut pos = 0u64;
    for line in manifest.split_inclusive('\n') {
        lines.push((pos, line.trim_end_matches(['\n', '\r'])));
        pos += line.len() as u64;
    }
    let mut iter = lines.into_iter().filter(|(_, l)| !l.trim().is_empty());
    match iter.next() {
        Some((_, l)) if l.trim() == MANIFEST_MAGIC => {}
        Some((o, _)) => return Err(Error::format(o, "missing 'caliber-dataset 1' header")),
        None => return Err(Error::format(0, "empty manifest")),
    }
    let (header_offset, header) = iter
        .next()
        .ok_or_else(|| Error::format(pos, "manifest ends before the sample-count line"))?;
    let [n, audio_width, vocab, classes] = parse_header(header, header_offset)?;

    let mut samples = Vec::with_capacity(n);
    for (offset, line) in iter {
        let [id, t_x, t_a, label, start, w_start, w_len] = parse_fields::<7>(line, offset)?;
        let (t_x, t_a, start) = (t_x as usize, t_a as usize, start as usize);
        if t_a == 0 || label as usize >= classes {
            return Err(Error::format(offset, "sample needs T_a >= 1 and label < classes"));
        }
        let end = start + record_len(t_x, t_a, audio_width);
        if start < BLOB_MAGIC.len() || end > blob.len() {
            return Err(Error::format(
                blob.len() as u64,
                format!("data.bin truncated: sample {id} needs bytes {start}..{end}"),
            ));
        }
        let mut cursor = start;
        let mut take = |len: usize| {
            let s = &blob[cursor..cursor + len];
            cursor += len;
            s
        };
        let tokens: Vec<u32> = take(4 * t_x)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let values: Vec<f64> = take(8 * t_a * audio_width)
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mask = take(t_a)
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(b),
            })
            .collect::<std::result::Result<Vec<bool>, u8>>()
            .map_err(|b| Error::format((end - t_a) as u64, format!("invalid mask byte {b}")))?;
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::format(start as u64, format!("token id {t} out of vocabulary")));
        }
        let frames = Matrix::from_vec(t_a, audio_width, values)
            .and_then(|m| AudioFrames::new(m, mask))
            .map_err(|e| Error::format(start as u64, e.to_string()))?;
        samples.push(MultimodalSample {
            id,
            tokens,
            frames,
            label: label as u32,
            window: SignalWindow {
                start: w_start as usize,
                len: w_len as usize,
            },
        });
    }
    if samples.len() != n {
        return Err(Error::format(
            pos,
            format!("manifest declares {n} samples but lists {}", samples.len()),
        ));
    }
    Ok(Dataset {
        audio_width,
        vocab,
        classes,
        samples,
    })
}
