//! train and generate.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use overpaint_core::dataset::{self, PairStatus, Split};
use overpaint_core::midi_io::{read_midi_file, write_midi_file, MidiScore};
use overpaint_core::tokenizer::{detokenize_with_report, TokenCorpus, Vocabulary};
use overpaint_nn::model::ModelError;
use overpaint_nn::optim::OptimError;
use overpaint_nn::sample::{generate, Decoding, SampleError};
use overpaint_nn::train::{self, write_log_csv, SpecialIds, TrainError};
use overpaint_nn::{Checkpoint, Model, ModelConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::failure::{CliResult, Classify, ExitClass, Failure};
use crate::run_manifest::RunRecorder;
use crate::tokens::encode_score;

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub tokens: PathBuf,
    /// Model preset: model1 or model2.
    #[arg(long, default_value = "model1")]
    pub config: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Overrides the preset's dropout rate.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Stop once an epoch's mean train loss falls below this.
    #[arg(long)]
    pub target_loss: Option<f64>,
    /// Per-epoch CSV log; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn train_failure(e: TrainError) -> Failure {
    let class = match &e {
        TrainError::NonFinite { .. } | TrainError::Optim(OptimError::NonFiniteGradient(_)) => ExitClass::Numeric,
        TrainError::Model(ModelError::Autodiff(_)) => ExitClass::Numeric,
        TrainError::Config(_) | TrainError::Model(ModelError::Config(_)) => ExitClass::Config,
        _ => ExitClass::Input,
    };
    Failure::new(class, anyhow::Error::new(e).context("training"))
}

pub fn run_train(args: &TrainArgs) -> CliResult<()> {
    let mut run = RunRecorder::start("train", args, Some(args.seed));
    run.input(&args.tokens);
    let vocab = Vocabulary::new();
    let corpus = TokenCorpus::load(&args.tokens).input_err(format!("reading {}", args.tokens.display()))?;
    corpus.check_vocab(&vocab).or_exit(ExitClass::Config, "token corpus")?;

    let mut model_cfg = ModelConfig::preset(&args.config, vocab.len())
        .ok_or_else(|| Failure::config(format!("unknown model config '{}' (expected model1 or model2)", args.config)))?;
    if let Some(p) = args.dropout {
        model_cfg.dropout = p;
    }
    model_cfg.validate().or_exit(ExitClass::Config, "model config")?;

    let pick = |splits: &[Split]| -> Vec<Vec<u32>> {
        corpus.records.iter().filter(|r| splits.contains(&r.split)).map(|r| r.ids.clone()).collect()
    };
    let train_set = pick(&[Split::Train, Split::Unassigned]);
    let mut val_set = pick(&[Split::Val]);
    if val_set.is_empty() {
        warn!("no validation sequences; validating on the training set");
        val_set = train_set.clone();
    }
    if let Some(long) = train_set.iter().chain(&val_set).map(Vec::len).max().filter(|&l| l > model_cfg.max_len) {
        return Err(Failure::config(format!("sequence of {long} tokens exceeds max_len {}", model_cfg.max_len)));
    }
    info!("{} train / {} val sequences, {} parameters", train_set.len(), val_set.len(), model_cfg.parameter_count());

    let cfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch_size,
        max_epochs: args.epochs,
        seed: args.seed,
        stop_at_train_loss: args.target_loss,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(train_failure)?;
    let model = Model::<f32>::new(model_cfg, args.seed).or_exit(ExitClass::Config, "building model")?;
    let special = SpecialIds { pad: vocab.pad(), sep: vocab.sep() };
    let outcome = train::train(model, &train_set, &val_set, &cfg, special, &vocab.hash(), |e| {
        info!("epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}  ({:.1}s)", e.epoch, e.lr, e.train_loss, e.val_loss, e.seconds);
    })
    .map_err(train_failure)?;

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).input_err(format!("creating {}", dir.display()))?;
    }
    outcome.best.save(&args.out).input_err(format!("writing {}", args.out.display()))?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let name = args.out.file_name().map_or("model".into(), |n| n.to_string_lossy());
        args.out.with_file_name(format!("{name}.log.csv"))
    });
    let file = fs::File::create(&log_path).input_err(format!("writing {}", log_path.display()))?;
    write_log_csv(file, &outcome.log).input_err("writing training log")?;

    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "{} epochs ({:?}); final train loss {:.4}; best val loss {:.4} at epoch {}",
        last.epoch, outcome.stop_reason, last.train_loss, outcome.best.val_loss, outcome.best.epoch
    );
    run.finish(&args.out, &[&args.out])?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Original to overpaint (single-file mode).
    #[arg(long, conflicts_with = "manifest")]
    pub primer: Option<PathBuf>,
    /// Generate for every accepted pair of `--split` in this manifest.
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
    /// At most this many pairs in manifest mode.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output MIDI in single-file mode.
    #[arg(long, required_unless_present = "manifest")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Nucleus mass.
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Argmax decoding instead of nucleus sampling.
    #[arg(long)]
    pub greedy: bool,
    /// Cap on generated tokens; defaults to the room left in the context.
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn sample_failure(e: SampleError) -> Failure {
    let class = match &e {
        SampleError::BadP(_) | SampleError::BadTemperature(_) => ExitClass::Config,
        SampleError::BadLogits | SampleError::Model(ModelError::Autodiff(_)) => ExitClass::Numeric,
        _ => ExitClass::Input,
    };
    Failure::new(class, anyhow::Error::new(e).context("generating"))
}

/// Loads a checkpoint and refuses it if its vocabulary differs from ours.
pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> CliResult<Model<f32>> {
    let ckpt = Checkpoint::load(path).input_err(format!("reading {}", path.display()))?;
    if ckpt.vocab_hash != vocab.hash() {
        return Err(Failure::config(format!(
            "checkpoint {} was trained with vocabulary {}, current vocabulary is {}",
            path.display(),
            ckpt.vocab_hash,
            vocab.hash()
        )));
    }
    ckpt.to_model().or_exit(ExitClass::Config, format!("loading {}", path.display()))
}

/// Generates a Variation for one Original.
pub fn overpaint(
    model: &Model<f32>,
    original: &MidiScore,
    vocab: &Vocabulary,
    decoding: Decoding,
    max_new: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> CliResult<(MidiScore, usize)> {
    let orig = encode_score(original, vocab).input_err("tokenizing primer")?;
    let mut primer = Vec::with_capacity(orig.len() + 2);
    primer.push(vocab.bos());
    primer.extend_from_slice(&orig.ids);
    primer.push(vocab.sep());
    let room = model.config.max_len.saturating_sub(primer.len());
    let new = generate(model, &primer, decoding, max_new.unwrap_or(room), vocab.eos(), rng).map_err(sample_failure)?;
    let (score, report) = detokenize_with_report(&new, vocab);
    if !report.is_clean() {
        warn!("repaired generated sequence: {} token(s) dropped", report.dropped);
    }
    Ok((score, new.len()))
}

pub fn run_generate(args: &GenerateArgs) -> CliResult<usize> {
    let mut run = RunRecorder::start("generate", args, Some(args.seed));
    run.input(&args.checkpoint);
    let decoding = if args.greedy {
        Decoding::Greedy
    } else {
        if !(args.p > 0.0 && args.p <= 1.0) || !(args.temperature > 0.0) {
            return Err(Failure::config(format!("need 0 < p <= 1 and temperature > 0 (got {}, {})", args.p, args.temperature)));
        }
        Decoding::Nucleus { p: args.p, temperature: args.temperature }
    };
    let vocab = Vocabulary::new();
    let model = load_checkpoint(&args.checkpoint, &vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    if let Some(primer) = &args.primer {
        let out = args.out.as_ref().ok_or_else(|| Failure::input("--out is required with --primer"))?;
        run.input(primer);
        let original = read_midi_file(primer).input_err(format!("reading {}", primer.display()))?;
        let (score, tokens) = overpaint(&model, &original, &vocab, decoding, args.max_new, &mut rng)?;
        write_midi_file(out, &score).input_err(format!("writing {}", out.display()))?;
        println!("{tokens} tokens, {} notes -> {}", score.notes.len(), out.display());
        run.finish(out, &[out])?;
        return Ok(1);
    }

    let (Some(manifest), Some(out_dir)) = (&args.manifest, &args.out_dir) else {
        return Err(Failure::input("either --primer or --manifest with --out-dir is required"));
    };
    run.input(manifest);
    run.input(&dataset::midi_dir_for(manifest));
    let pairs = dataset::load_manifest(manifest).input_err(format!("reading {}", manifest.display()))?;
    let wanted = |s: Split| args.split == "all" || s.as_str() == args.split;
    let chosen: Vec<_> = pairs
        .iter()
        .filter(|p| p.status == PairStatus::Accepted && wanted(p.split))
        .take(args.limit.unwrap_or(usize::MAX))
        .collect();
    fs::create_dir_all(out_dir).input_err(format!("creating {}", out_dir.display()))?;
    for pair in &chosen {
        let (score, tokens) = overpaint(&model, &pair.original, &vocab, decoding, args.max_new, &mut rng)?;
        let path = out_dir.join(format!("{}.mid", pair.pair_id));
        write_midi_file(&path, &score).input_err(format!("writing {}", path.display()))?;
        info!("{}: {tokens} tokens, {} notes", pair.pair_id, score.notes.len());
    }
    println!("{} variations -> {}", chosen.len(), out_dir.display());
    run.finish(out_dir, &[out_dir])?;
    Ok(chosen.len())
}
