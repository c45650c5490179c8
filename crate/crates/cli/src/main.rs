//! `caliber`: generate synthetic data, train adapters, evaluate them and
//! export attention maps.
//!
//! Exit codes: 0 success, 2 usage, 3 data or format error, 4 numeric or
//! training failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use caliber::adapters::{Model, Variant};
use caliber::data::{self, Dataset, SynthConfig};
use caliber::eval::{attention_record, evaluate, MetricsReport, DEFAULT_MC_SAMPLES};
use caliber::numerics::derive_seed;
use caliber::training::{Checkpoint, TrainConfig, Trainer};
use caliber::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "caliber", version, about = "Context-conditioned Bayesian LoRA on synthetic multimodal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Generator config (flat `key = value` lines); defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's sample seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write a checkpoint plus `<out>.loss.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo evaluation; writes the JSON report plus
    /// `<report>.reliability.csv` and `<report>.entropy.csv`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
        mc_samples: usize,
        /// Seed for the predictive draws; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write the posterior-mean attention weights of one sample as CSV.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every (variant, seed) pair; one CSV row each.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Training data.
        #[arg(long)]
        data: PathBuf,
        /// Held-out data; without it the last quarter of `--data` is held out.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
        mc_samples: usize,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::Dimension { .. } => 3,
        Error::Domain(_)
        | Error::Context(_)
        | Error::Numeric(_)
        | Error::Training { .. }
        | Error::Metric(_) => 4,
    }
}

fn read_text(path: &Path) -> caliber::Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn load_data(path: &Path) -> caliber::Result<Dataset> {
    if !path.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset directory {} not found", path.display()),
        )));
    }
    data::load(path)
}

fn train_config(path: Option<&Path>) -> caliber::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::parse(&read_text(p)?),
        None => Ok(TrainConfig::default()),
    }
}

/// `model.ckpt` → `model.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, "mc-eval")
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_csv_file(path: &Path, write: impl FnOnce(&mut fs::File) -> caliber::Result<()>) -> caliber::Result<()> {
    let mut file = fs::File::create(path)?;
    write(&mut file)
}

fn check_compatible(model: &Model, data: &Dataset) -> caliber::Result<()> {
    let spec = model.spec();
    if data.classes != spec.classes || (spec.adapter.variant.uses_audio() && data.audio_width != spec.audio_width) {
        return Err(Error::Input(format!(
            "dataset ({} classes, audio width {}) does not match the checkpoint ({} classes, audio width {})",
            data.classes, data.audio_width, spec.classes, spec.audio_width
        )));
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> caliber::Result<Model> {
    let ckpt = Checkpoint::load(ckpt)?;
    Ok(Trainer::from_checkpoint(&ckpt)?.into_model())
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> caliber::Result<()> {
    let mut cfg = match config {
        Some(p) => SynthConfig::parse(&read_text(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dataset = data::generate(&cfg)?;
    data::save(&dataset, out)?;
    eprintln!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

fn train(
    data: &Path,
    variant: Option<Variant>,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: &Path,
) -> caliber::Result<()> {
    let dataset = load_data(data)?;
    let mut cfg = train_config(config)?;
    if let Some(v) = variant {
        cfg.adapter.variant = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let mut trainer = Trainer::new(cfg, &dataset)?;
    let report = trainer.train(&dataset)?;
    trainer.checkpoint().save(out)?;
    write_csv_file(&sibling(out, "loss.csv"), |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["epoch", "loss"]).map_err(csv_error)?;
        for (i, loss) in report.epoch_losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{loss:?}")]).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    })?;
    eprintln!(
        "trained {} for {} steps; final epoch loss {:.4}",
        trainer.model().variant(),
        report.steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("{other:?}")),
    }
}

fn eval(ckpt: &Path, data: &Path, mc_samples: usize, seed: Option<u64>, report: &Path) -> caliber::Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let seed = seed.unwrap_or(checkpoint.config.seed);
    let model = Trainer::from_checkpoint(&checkpoint)?.into_model();
    let dataset = load_data(data)?;
    check_compatible(&model, &dataset)?;
    let evaluation = evaluate(&model, &dataset, mc_samples, eval_seed(seed))?;
    let metrics = MetricsReport::new(model.variant().as_str(), seed, &evaluation, unix_time());
    fs::write(report, metrics.to_json())?;
    write_csv_file(&sibling(report, "reliability.csv"), |f| evaluation.bins.write_csv(f))?;
    match &evaluation.entropy {
        Some(split) => write_csv_file(&sibling(report, "entropy.csv"), |f| split.write_csv(f))?,
        None => eprintln!("every sample is classified the same way (all right or all wrong); no entropy split written"),
    }
    eprintln!("auc {:.4} ece {:.4} nll {:.4}", evaluation.auc, evaluation.ece, evaluation.nll);
    Ok(())
}

fn export_attention(ckpt: &Path, data: &Path, sample: u64, out: &Path) -> caliber::Result<()> {
    let model = load_model(ckpt)?;
    if !model.variant().has_attention() {
        return Err(Error::Input(format!(
            "variant {} has no cross-modal attention; export-attention needs caliber-x or caliber-x-shared",
            model.variant()
        )));
    }
    let dataset = load_data(data)?;
    check_compatible(&model, &dataset)?;
    let sample = dataset
        .sample_by_id(sample)
        .ok_or_else(|| Error::Input(format!("no sample with id {sample} in {}", data.display())))?;
    let record = attention_record(&model, sample)?;
    write_csv_file(out, |f| record.write_csv(f))
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    variants: &[Variant],
    seeds: &[u64],
    data: &Path,
    eval_data: Option<&Path>,
    config: Option<&Path>,
    epochs: Option<usize>,
    mc_samples: usize,
    out: &Path,
) -> caliber::Result<()> {
    let dataset = load_data(data)?;
    let (train_set, test_set) = match eval_data {
        Some(p) => (dataset, load_data(p)?),
        None => {
            let n_train = dataset.len() - dataset.len() / 4;
            dataset.split(n_train)
        }
    };
    if test_set.is_empty() {
        return Err(Error::Input("no held-out samples to evaluate on".into()));
    }
    let base = train_config(config)?;
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.adapter.variant = variant;
            cfg.seed = seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let mut trainer = Trainer::new(cfg, &train_set)?;
            let report = trainer.train(&train_set)?;
            check_compatible(trainer.model(), &test_set)?;
            let evaluation = evaluate(trainer.model(), &test_set, mc_samples, eval_seed(seed))?;
            let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
            rows.push(vec![
                variant.as_str().to_string(),
                seed.to_string(),
                format!("{:?}", evaluation.auc),
                format!("{:?}", evaluation.ece),
                format!("{:?}", evaluation.nll),
                format!("{:?}", evaluation.mean_entropy),
                opt(evaluation.entropy.as_ref().map(|e| e.mean_correct)),
                opt(evaluation.entropy.as_ref().map(|e| e.mean_incorrect)),
                format!("{:?}", report.epoch_losses.last().copied().unwrap_or(f64::NAN)),
            ]);
            eprintln!("{variant} seed {seed}: auc {:.4}", evaluation.auc);
        }
    }
    write_csv_file(out, |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record([
            "variant",
            "seed",
            "auc",
            "ece",
            "nll",
            "mean_entropy",
            "mean_entropy_correct",
            "mean_entropy_incorrect",
            "final_loss",
        ])
        .map_err(csv_error)?;
        for row in &rows {
            w.write_record(row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    })
}

fn run(cli: Cli) -> caliber::Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Train { data, variant, config, seed, epochs, out } => {
            train(&data, variant, config.as_deref(), seed, epochs, &out)
        }
        Command::Eval { ckpt, data, mc_samples, seed, report } => eval(&ckpt, &data, mc_samples, seed, &report),
        Command::ExportAttention { ckpt, data, sample, out } => export_attention(&ckpt, &data, sample, &out),
        Command::Sweep { variants, seeds, data, eval_data, config, epochs, mc_samples, out } => sweep(
            &variants,
            &seeds,
            &data,
            eval_data.as_deref(),
            config.as_deref(),
            epochs,
            mc_samples,
            &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
