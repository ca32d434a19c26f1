//! evaluate and report.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::warn;
use overpaint_core::dataset::{self, PairStatus};
use overpaint_core::leadsheet::Key;
use overpaint_core::metrics::{render_table, report_with_threads, write_report_csv, FeatureReport};
use overpaint_core::midi_io::{read_midi_file, MidiScore};
use serde::Serialize;

use crate::failure::{CliResult, Classify, ExitClass, Failure};
use crate::run_manifest::RunRecorder;

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Directory of MIDI files, scored without a key.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Column label; defaults to the directory name.
    #[arg(long)]
    pub label: Option<String>,
    /// Exit 2 when any file could not be read.
    #[arg(long)]
    pub strict: bool,
}

fn dir_label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Every `.mid`/`.midi` file under `dir` in path order, plus the unreadable ones.
fn read_corpus(dir: &Path) -> CliResult<(Vec<(MidiScore, Option<Key>)>, Vec<PathBuf>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .input_err(format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    paths.sort();
    let mut items = Vec::new();
    let mut bad = Vec::new();
    for path in paths {
        match read_midi_file(&path) {
            Ok(score) => items.push((score, None)),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                bad.push(path);
            }
        }
    }
    Ok((items, bad))
}

fn write_csv(path: &Path, reports: &[FeatureReport]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).input_err(format!("creating {}", dir.display()))?;
    }
    let file = fs::File::create(path).input_err(format!("writing {}", path.display()))?;
    write_report_csv(file, reports).input_err(format!("writing {}", path.display()))
}

pub fn run_evaluate(args: &EvaluateArgs, threads: usize) -> CliResult<FeatureReport> {
    let mut run = RunRecorder::start("evaluate", args, None);
    run.input(&args.corpus);
    let (items, bad) = read_corpus(&args.corpus)?;
    let label = args.label.clone().unwrap_or_else(|| dir_label(&args.corpus));
    let report = report_with_threads(&label, &items, threads).input_err(format!("scoring {}", args.corpus.display()))?;
    write_csv(&args.report, std::slice::from_ref(&report))?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    run.finish(&args.report, &[&args.report])?;
    if args.strict && !bad.is_empty() {
        return Err(Failure::input(format!("{} unreadable MIDI file(s)", bad.len())));
    }
    Ok(report)
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Pair manifest; contributes an Originals and a Variations column.
    #[arg(long, required_unless_present = "corpus")]
    pub manifest: Vec<PathBuf>,
    /// Corpus name for the matching `--manifest`, in order.
    #[arg(long)]
    pub label: Vec<String>,
    /// Extra `LABEL=DIR` column of MIDI files scored without a key.
    #[arg(long)]
    pub corpus: Vec<String>,
    #[arg(long)]
    pub table: PathBuf,
}

pub fn run_report(args: &ReportArgs, threads: usize) -> CliResult<Vec<FeatureReport>> {
    let mut run = RunRecorder::start("report", args, None);
    if args.label.len() > args.manifest.len() {
        return Err(Failure::config("more --label values than --manifest values"));
    }
    let mut reports = Vec::new();
    for (i, path) in args.manifest.iter().enumerate() {
        run.input(path);
        run.input(&dataset::midi_dir_for(path));
        let name = args.label.get(i).cloned().unwrap_or_else(|| {
            path.file_stem().map_or_else(|| format!("corpus{i}"), |s| s.to_string_lossy().into_owned())
        });
        let pairs = dataset::load_manifest(path).input_err(format!("reading {}", path.display()))?;
        let accepted: Vec<_> = pairs.iter().filter(|p| p.status == PairStatus::Accepted).collect();
        let originals: Vec<_> = accepted.iter().map(|p| (p.original.clone(), p.key)).collect();
        let variations: Vec<_> = accepted.iter().map(|p| (p.variation.clone(), p.key)).collect();
        for (suffix, items) in [("Originals", originals), ("Variations", variations)] {
            let label = format!("{name} {suffix}");
            reports.push(report_with_threads(&label, &items, threads).input_err(format!("scoring {label}"))?);
        }
    }
    for spec in &args.corpus {
        let (label, dir) = spec
            .split_once('=')
            .ok_or_else(|| Failure::new(ExitClass::Config, anyhow::anyhow!("--corpus expects LABEL=DIR, got '{spec}'")))?;
        let dir = PathBuf::from(dir);
        run.input(&dir);
        let (items, _) = read_corpus(&dir)?;
        reports.push(report_with_threads(label, &items, threads).input_err(format!("scoring {label}"))?);
    }
    write_csv(&args.table, &reports)?;
    print!("{}", render_table(&reports));
    run.finish(&args.table, &[&args.table])?;
    Ok(reports)
}
