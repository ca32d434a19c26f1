//! tokenize: manifest pairs to a token corpus.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use log::warn;
use overpaint_core::dataset::{self, PairStatus};
use overpaint_core::midi_io::{quantize, MidiScore};
use overpaint_core::tokenizer::{
    assemble_pair, tokenize, TokenCorpus, TokenRecord, TokenSequence, TokenizeError, Vocabulary, GRID,
};
use serde::Serialize;

use crate::failure::{CliResult, Classify};
use crate::run_manifest::RunRecorder;

#[derive(Debug, Args, Serialize)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary JSON; defaults to `<out>.vocab.json`.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub max_len: usize,
}

pub fn vocab_path(args: &TokenizeArgs) -> PathBuf {
    args.vocab.clone().unwrap_or_else(|| {
        let name = args.out.file_name().map_or("tokens".into(), |n| n.to_string_lossy());
        args.out.with_file_name(format!("{name}.vocab.json"))
    })
}

/// Snaps a score to the token grid and encodes it.
pub fn encode_score(score: &MidiScore, vocab: &Vocabulary) -> Result<TokenSequence, TokenizeError> {
    tokenize(&quantize(score, GRID as u32), vocab)
}

pub fn run(args: &TokenizeArgs) -> CliResult<usize> {
    let mut run = RunRecorder::start("tokenize", args, None);
    run.input(&args.manifest);
    run.input(&dataset::midi_dir_for(&args.manifest));
    let pairs = dataset::load_manifest(&args.manifest).input_err(format!("reading {}", args.manifest.display()))?;
    let vocab = Vocabulary::new();
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for pair in pairs.iter().filter(|p| p.status == PairStatus::Accepted) {
        let assembled = encode_score(&pair.original, &vocab).and_then(|orig| {
            let var = encode_score(&pair.variation, &vocab)?;
            assemble_pair(&orig, &var, args.max_len, &vocab)
        });
        match assembled {
            Ok(seq) => records.push(TokenRecord { pair_id: pair.pair_id.clone(), split: pair.split, ids: seq.ids }),
            Err(e) => {
                warn!("{}: {e}; skipped", pair.pair_id);
                skipped += 1;
            }
        }
    }
    let corpus = TokenCorpus { vocab_hash: vocab.hash(), records };
    corpus.save(&args.out).input_err(format!("writing {}", args.out.display()))?;
    let vocab_file = vocab_path(args);
    fs::write(&vocab_file, vocab.to_json()).input_err(format!("writing {}", vocab_file.display()))?;
    let longest = corpus.records.iter().map(|r| r.ids.len()).max().unwrap_or(0);
    println!("{} sequences (longest {longest}), {skipped} skipped", corpus.records.len());
    run.finish(&args.out, &[&args.out, &vocab_file])?;
    Ok(corpus.records.len())
}
