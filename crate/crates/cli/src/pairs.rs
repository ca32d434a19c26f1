//! extract-pairs, apply-review and augment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use overpaint_core::alignment::{self, ExtractConfig};
use overpaint_core::dataset::{self, PairRecord, PairStatus, Split, SplitRatios};
use overpaint_core::leadsheet::parse_leadsheet;
use overpaint_core::midi_io::read_midi_file;
use serde::Serialize;

use crate::failure::{CliResult, Classify, Failure};
use crate::run_manifest::RunRecorder;

const MIDI_EXTENSIONS: [&str; 2] = ["mid", "midi"];
const SHEET_EXTENSIONS: [&str; 2] = ["txt", "lead"];

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub performances: PathBuf,
    #[arg(long)]
    pub leadsheets: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Chroma frame hop in seconds.
    #[arg(long, default_value_t = alignment::DEFAULT_HOP_SECONDS)]
    pub hop: f64,
    #[arg(long, default_value_t = alignment::DEFAULT_SELF_LOOP)]
    pub self_loop: f64,
    #[arg(long, default_value_t = alignment::DEFAULT_MIN_CONFIDENCE)]
    pub min_confidence: f64,
    /// Bars per Original window.
    #[arg(long, default_value_t = 4)]
    pub window: u32,
    /// Exit 2 when any input file could not be read.
    #[arg(long)]
    pub strict: bool,
}

/// Lowercase alphanumeric runs joined by `_`.
pub fn normalize_stem(stem: &str) -> String {
    let mut out = String::new();
    for c in stem.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.is_empty() && !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

fn list_by_song(dir: &Path, extensions: &[&str]) -> CliResult<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).input_err(format!("reading directory {}", dir.display()))?;
    let mut out = BTreeMap::new();
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let song = normalize_stem(stem);
        if let Some(previous) = out.insert(song.clone(), path.clone()) {
            warn!("{} and {} both map to song '{song}'; using the latter", previous.display(), path.display());
        }
    }
    Ok(out)
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExtractSummary {
    pub songs: usize,
    pub accepted: usize,
    pub needs_review: usize,
    pub dropped: usize,
    pub unreadable: usize,
}

pub fn review_path(manifest: &Path) -> PathBuf {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("pairs");
    manifest.with_file_name(format!("{stem}.review.jsonl"))
}

pub fn extract(args: &ExtractArgs) -> CliResult<ExtractSummary> {
    let mut run = RunRecorder::start("extract-pairs", args, None);
    let config = ExtractConfig {
        window: args.window,
        hop_seconds: args.hop,
        self_loop: args.self_loop,
        min_confidence: args.min_confidence,
    };
    if !(config.hop_seconds > 0.0) || !(0.0..1.0).contains(&config.self_loop) || config.window == 0 {
        return Err(Failure::config(format!(
            "need hop > 0, 0 <= self-loop < 1 and window > 0 (got {}, {}, {})",
            config.hop_seconds, config.self_loop, config.window
        )));
    }
    let performances = list_by_song(&args.performances, &MIDI_EXTENSIONS)?;
    let sheets = list_by_song(&args.leadsheets, &SHEET_EXTENSIONS)?;
    run.input(&args.performances);
    run.input(&args.leadsheets);

    let mut summary = ExtractSummary::default();
    if performances.is_empty() && sheets.is_empty() {
        println!("no input: no performance or lead-sheet files found");
    }
    for song in performances.keys().filter(|s| !sheets.contains_key(*s)) {
        warn!("performance for '{song}' has no lead sheet; skipped");
    }
    for song in sheets.keys().filter(|s| !performances.contains_key(*s)) {
        warn!("lead sheet for '{song}' has no performance; skipped");
    }

    let mut pairs: Vec<PairRecord> = Vec::new();
    let mut unreadable: Vec<String> = Vec::new();
    for (song, perf_path) in &performances {
        let Some(sheet_path) = sheets.get(song) else { continue };
        let performance = match read_midi_file(perf_path) {
            Ok(score) => score,
            Err(e) => {
                warn!("skipping {}: {e}", perf_path.display());
                unreadable.push(perf_path.display().to_string());
                continue;
            }
        };
        let sheet = match fs::read_to_string(sheet_path).map_err(anyhow::Error::from).and_then(|t| Ok(parse_leadsheet(&t)?)) {
            Ok(sheet) => sheet,
            Err(e) => {
                warn!("skipping {}: {e}", sheet_path.display());
                unreadable.push(sheet_path.display().to_string());
                continue;
            }
        };
        summary.songs += 1;
        match alignment::extract_pairs(song, &performance, &sheet, &config) {
            Ok(outcome) => {
                summary.dropped += outcome.dropped.len();
                pairs.extend(outcome.pairs);
            }
            Err(e) => warn!("'{song}': alignment failed: {e}"),
        }
    }
    summary.accepted = pairs.iter().filter(|p| p.status == PairStatus::Accepted).count();
    summary.needs_review = pairs.iter().filter(|p| p.status == PairStatus::NeedsReview).count();
    summary.unreadable = unreadable.len();

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).input_err(format!("creating {}", dir.display()))?;
    }
    dataset::save_manifest(&args.out, &pairs).input_err(format!("writing {}", args.out.display()))?;
    let review = review_path(&args.out);
    dataset::write_review(&review, &dataset::review_entries(&pairs)).input_err(format!("writing {}", review.display()))?;

    println!(
        "songs {}: accepted {}, needs_review {}, dropped {}",
        summary.songs, summary.accepted, summary.needs_review, summary.dropped
    );
    if !unreadable.is_empty() {
        println!("unreadable files skipped: {}", unreadable.join(", "));
    }
    run.finish(&args.out, &[&args.out, &review])?;
    if args.strict && !unreadable.is_empty() {
        return Err(Failure::input(format!("{} unreadable input file(s)", unreadable.len())));
    }
    Ok(summary)
}

#[derive(Debug, Args, Serialize)]
pub struct ApplyReviewArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub review: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn apply_review(args: &ApplyReviewArgs) -> CliResult<usize> {
    let mut run = RunRecorder::start("apply-review", args, None);
    run.input(&args.manifest);
    run.input(&dataset::midi_dir_for(&args.manifest));
    run.input(&args.review);
    let mut pairs = dataset::load_manifest(&args.manifest).input_err(format!("reading {}", args.manifest.display()))?;
    let entries = dataset::read_review(&args.review).input_err(format!("reading {}", args.review.display()))?;
    let changed = dataset::apply_review(&mut pairs, &entries).input_err("applying review")?;
    dataset::save_manifest(&args.out, &pairs).input_err(format!("writing {}", args.out.display()))?;
    println!("{changed} pair status(es) changed");
    run.finish(&args.out, &[&args.out])?;
    Ok(changed)
}

#[derive(Debug, Args, Serialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for the song-level split of pairs that have none yet.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep pairs still marked needs_review.
    #[arg(long)]
    pub include_review: bool,
}

pub fn augment(args: &AugmentArgs) -> CliResult<usize> {
    let mut run = RunRecorder::start("augment", args, Some(args.seed));
    run.input(&args.manifest);
    run.input(&dataset::midi_dir_for(&args.manifest));
    let pairs = dataset::load_manifest(&args.manifest).input_err(format!("reading {}", args.manifest.display()))?;
    let total = pairs.len();
    let mut kept: Vec<PairRecord> = pairs
        .into_iter()
        .filter(|p| p.status == PairStatus::Accepted || (args.include_review && p.status == PairStatus::NeedsReview))
        .collect();
    if kept.len() < total {
        info!("{} of {total} pairs left out by review status", total - kept.len());
    }
    if kept.iter().any(|p| p.split == Split::Unassigned) {
        kept = dataset::split_by_song(kept, SplitRatios::default(), args.seed).input_err("assigning splits")?;
    }
    let augmented = dataset::augment(&kept).input_err("augmenting")?;
    dataset::save_manifest(&args.out, &augmented).input_err(format!("writing {}", args.out.display()))?;
    println!("{} pairs -> {} pairs", kept.len(), augmented.len());
    run.finish(&args.out, &[&args.out, &dataset::midi_dir_for(&args.out)])?;
    Ok(augmented.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_normalize() {
        assert_eq!(normalize_stem("All The Things-You_Are"), "all_the_things_you_are");
        assert_eq!(normalize_stem("  Blue  Bossa (take 2) "), "blue_bossa_take_2");
        assert_eq!(normalize_stem("__x__"), "x");
    }
}
