//! The Original/Variation pair corpus: transposition augmentation,
//! song-level splitting and the on-disk manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::leadsheet::Key;
use crate::midi_io::{parse_midi, write_midi, MidiError, MidiScore};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Semitone shifts applied by [`augment`]: -5 through +6.
pub const TRANSPOSITIONS: std::ops::RangeInclusive<i32> = -5..=6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("pair {0} is already transposed; augment expects untransposed input")]
    AlreadyTransposed(String),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("song-level split needs at least 3 songs, got {0}")]
    TooFewSongs(usize),
    #[error("manifest line {line}: unsupported schema version {found} (expected {MANIFEST_SCHEMA_VERSION})")]
    SchemaVersion { line: usize, found: u32 },
    #[error("manifest line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("pair {pair_id}: missing MIDI file {path}")]
    MissingMidi { pair_id: String, path: PathBuf },
    #[error("pair {pair_id}: {source}")]
    Midi { pair_id: String, source: MidiError },
    #[error("unknown pair id {0} in review file")]
    UnknownPair(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Accepted,
    NeedsReview,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: String,
    pub song_id: String,
    pub window_start_bar: u32,
    pub original: MidiScore,
    pub variation: MidiScore,
    /// Semitones in -5..=6.
    pub transposition: i32,
    pub confidence: f64,
    pub status: PairStatus,
    pub split: Split,
    /// Lead-sheet key of the Original, transposed along with the pair.
    pub key: Option<Key>,
}

pub fn augmented_pair_id(base: &str, semitones: i32) -> String {
    format!("{base}_t{semitones:+03}")
}

/// Twelve transposed copies (-5..=+6 semitones) of every pair. Pitches pushed
/// outside 0–127 are folded back by octaves, so counts are always exact.
pub fn augment(pairs: &[PairRecord]) -> Result<Vec<PairRecord>, DatasetError> {
    let mut out = Vec::with_capacity(pairs.len() * TRANSPOSITIONS.count());
    for pair in pairs {
        if pair.transposition != 0 {
            return Err(DatasetError::AlreadyTransposed(pair.pair_id.clone()));
        }
        for t in TRANSPOSITIONS {
            let mut copy = pair.clone();
            copy.pair_id = augmented_pair_id(&pair.pair_id, t);
            copy.transposition = t;
            copy.original.transpose_folding(t);
            copy.variation.transpose_folding(t);
            copy.key = pair.key.map(|k| k.transposed(t));
            out.push(copy);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<(), DatasetError> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(*r > 0.0)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadRatios((self.train, self.val, self.test)));
        }
        Ok(())
    }
}

/// Assigns each song to a split. Depends only on the set of song ids and the
/// seed, never on input order.
pub fn song_splits<'a>(
    song_ids: impl IntoIterator<Item = &'a str>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<BTreeMap<String, Split>, DatasetError> {
    ratios.validate()?;
    let songs: BTreeSet<&str> = song_ids.into_iter().collect();
    let n = songs.len();
    if n < 3 {
        return Err(DatasetError::TooFewSongs(n));
    }
    let mut songs: Vec<&str> = songs.into_iter().collect();
    songs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    // Largest-remainder apportionment, then make sure no split is empty.
    let targets = [ratios.train, ratios.val, ratios.test].map(|r| r * n as f64);
    let mut counts = targets.map(|t| t.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (targets[a] - targets[a].floor(), targets[b] - targets[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let largest = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
        counts[largest] -= 1;
        counts[empty] += 1;
    }

    let labels = [Split::Train, Split::Val, Split::Test];
    let mut out = BTreeMap::new();
    let mut songs = songs.into_iter();
    for (label, count) in labels.into_iter().zip(counts) {
        for song in songs.by_ref().take(count) {
            out.insert(song.to_string(), label);
        }
    }
    Ok(out)
}

pub fn split_by_song(
    mut pairs: Vec<PairRecord>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<PairRecord>, DatasetError> {
    let assignment = song_splits(pairs.iter().map(|p| p.song_id.as_str()), ratios, seed)?;
    for pair in &mut pairs {
        pair.split = assignment[&pair.song_id];
    }
    Ok(pairs)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    schema_version: u32,
    pair_id: String,
    song_id: String,
    window_start_bar: u32,
    transposition: i32,
    confidence: f64,
    status: PairStatus,
    split: Split,
    key: Option<Key>,
    original: String,
    variation: String,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

/// Directory holding a manifest's MIDI payloads: `<stem>_midi` next to it.
pub fn midi_dir_for(manifest: &Path) -> PathBuf {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    manifest.with_file_name(format!("{stem}_midi"))
}

fn file_safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_+.".contains(c) { c } else { '_' }).collect()
}

/// Writes the JSONL manifest and one `.mid` file per score.
pub fn save_manifest(path: &Path, pairs: &[PairRecord]) -> Result<(), DatasetError> {
    let midi_dir = midi_dir_for(path);
    fs::create_dir_all(&midi_dir)?;
    let dir_name = midi_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for pair in pairs {
        let base = file_safe(&pair.pair_id);
        let (orig_name, var_name) = (format!("{base}.orig.mid"), format!("{base}.var.mid"));
        fs::write(midi_dir.join(&orig_name), write_midi(&pair.original))?;
        fs::write(midi_dir.join(&var_name), write_midi(&pair.variation))?;
        let line = ManifestLine {
            schema_version: MANIFEST_SCHEMA_VERSION,
            pair_id: pair.pair_id.clone(),
            song_id: pair.song_id.clone(),
            window_start_bar: pair.window_start_bar,
            transposition: pair.transposition,
            confidence: pair.confidence,
            status: pair.status,
            split: pair.split,
            key: pair.key,
            original: format!("{dir_name}/{orig_name}"),
            variation: format!("{dir_name}/{var_name}"),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| DatasetError::Json { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest written by [`save_manifest`]. Fails as a whole (no
/// partial result) on any schema, JSON or MIDI problem.
pub fn load_manifest(path: &Path) -> Result<Vec<PairRecord>, DatasetError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = Vec::new();
    for (idx, text) in reader.lines().enumerate() {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let line = idx + 1;
        let probe: VersionProbe =
            serde_json::from_str(&text).map_err(|source| DatasetError::Json { line, source })?;
        if probe.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion { line, found: probe.schema_version });
        }
        let record: ManifestLine =
            serde_json::from_str(&text).map_err(|source| DatasetError::Json { line, source })?;
        lines.push(record);
    }

    let read_score = |pair_id: &str, rel: &str| -> Result<MidiScore, DatasetError> {
        let file = base.join(rel);
        let bytes = fs::read(&file)
            .map_err(|_| DatasetError::MissingMidi { pair_id: pair_id.to_string(), path: file.clone() })?;
        parse_midi(&bytes).map_err(|source| DatasetError::Midi { pair_id: pair_id.to_string(), source })
    };
    lines
        .into_iter()
        .map(|l| {
            Ok(PairRecord {
                original: read_score(&l.pair_id, &l.original)?,
                variation: read_score(&l.pair_id, &l.variation)?,
                pair_id: l.pair_id,
                song_id: l.song_id,
                window_start_bar: l.window_start_bar,
                transposition: l.transposition,
                confidence: l.confidence,
                status: l.status,
                split: l.split,
                key: l.key,
            })
        })
        .collect()
}

/// CSV summary: pair_id, song_id, transposition, confidence, split.
pub fn export_csv<W: Write>(writer: W, pairs: &[PairRecord]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["pair_id", "song_id", "transposition", "confidence", "split"])?;
    for p in pairs {
        w.write_record([
            p.pair_id.as_str(),
            p.song_id.as_str(),
            &p.transposition.to_string(),
            &p.confidence.to_string(),
            p.split.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the human review manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub pair_id: String,
    pub song_id: String,
    pub window_start_bar: u32,
    pub confidence: f64,
    pub status: PairStatus,
}

pub fn review_entries(pairs: &[PairRecord]) -> Vec<ReviewEntry> {
    pairs
        .iter()
        .map(|p| ReviewEntry {
            pair_id: p.pair_id.clone(),
            song_id: p.song_id.clone(),
            window_start_bar: p.window_start_bar,
            confidence: p.confidence,
            status: p.status,
        })
        .collect()
}

pub fn write_review(path: &Path, entries: &[ReviewEntry]) -> Result<(), DatasetError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(|source| DatasetError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_review(path: &Path) -> Result<Vec<ReviewEntry>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, text) in reader.lines().enumerate() {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&text).map_err(|source| DatasetError::Json { line: idx + 1, source })?);
    }
    Ok(out)
}

/// Copies reviewed statuses onto the matching pairs; returns how many changed.
pub fn apply_review(pairs: &mut [PairRecord], entries: &[ReviewEntry]) -> Result<usize, DatasetError> {
    let index: BTreeMap<&str, usize> = pairs.iter().enumerate().map(|(i, p)| (p.pair_id.as_str(), i)).collect();
    let mut updates = Vec::with_capacity(entries.len());
    for e in entries {
        let &i = index.get(e.pair_id.as_str()).ok_or_else(|| DatasetError::UnknownPair(e.pair_id.clone()))?;
        updates.push((i, e.status));
    }
    let mut changed = 0;
    for (i, status) in updates {
        if pairs[i].status != status {
            pairs[i].status = status;
            changed += 1;
        }
    }
    Ok(changed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leadsheet::Mode;
    use crate::midi_io::{Beat, NoteEvent};

    pub(crate) fn pair(song: &str, idx: u32) -> PairRecord {
        let n = |p: u8, t: i64| NoteEvent::new(p, Beat::from_integer(t), Beat::new(1, 2), 80).unwrap();
        PairRecord {
            pair_id: format!("{song}_b{idx:03}"),
            song_id: song.to_string(),
            window_start_bar: idx,
            original: MidiScore::new(vec![n(60, 0), n(64, 1), n(127, 2)]),
            variation: MidiScore::new(vec![n(62, 0), n(1, 3)]),
            transposition: 0,
            confidence: 0.75,
            status: PairStatus::Accepted,
            split: Split::Unassigned,
            key: Some(Key::new(0, Mode::Major)),
        }
    }

    #[test]
    fn augment_multiplies_by_twelve() {
        let pairs: Vec<_> = (0..5).map(|i| pair("s", i)).collect();
        let out = augment(&pairs).unwrap();
        assert_eq!(out.len(), 60);
        let ts: Vec<i32> = out.iter().filter(|p| p.pair_id.starts_with("s_b000")).map(|p| p.transposition).collect();
        assert_eq!(ts, (-5..=6).collect::<Vec<_>>());
    }

    #[test]
    fn zero_shift_copy_is_identical() {
        let p = pair("s", 0);
        let out = augment(std::slice::from_ref(&p)).unwrap();
        let zero = out.iter().find(|q| q.transposition == 0).unwrap();
        assert_eq!(zero.original, p.original);
        assert_eq!(zero.variation, p.variation);
        assert_eq!(zero.pair_id, "s_b000_t+00");
    }

    #[test]
    fn augment_folds_and_moves_key() {
        let out = augment(&[pair("s", 0)]).unwrap();
        let up = out.iter().find(|q| q.transposition == 6).unwrap();
        assert!(up.original.notes.iter().all(|n| n.pitch <= 127));
        assert!(up.original.notes.iter().any(|n| n.pitch == 121));
        assert_eq!(up.key, Some(Key::new(6, Mode::Major)));
        let down = out.iter().find(|q| q.transposition == -5).unwrap();
        assert!(down.variation.notes.iter().any(|n| n.pitch == 8));
    }

    #[test]
    fn augment_rejects_transposed_input() {
        let mut p = pair("s", 0);
        p.transposition = 2;
        assert!(matches!(augment(&[p]), Err(DatasetError::AlreadyTransposed(_))));
    }

    #[test]
    fn ten_songs_split_eight_one_one() {
        for seed in 0..20 {
            let ids: Vec<String> = (0..10).map(|i| format!("song{i}")).collect();
            let splits = song_splits(ids.iter().map(String::as_str), SplitRatios::default(), seed).unwrap();
            let count = |s| splits.values().filter(|&&v| v == s).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
        }
    }

    #[test]
    fn three_songs_fill_every_split() {
        let splits = song_splits(["a", "b", "c"], SplitRatios::default(), 3).unwrap();
        let values: BTreeSet<_> = splits.values().copied().collect();
        assert_eq!(values.len(), 3);
        assert!(matches!(song_splits(["a", "b"], SplitRatios::default(), 0), Err(DatasetError::TooFewSongs(2))));
    }

    #[test]
    fn bad_ratios_rejected() {
        let r = SplitRatios { train: 0.8, val: 0.1, test: 0.2 };
        assert!(matches!(song_splits(["a", "b", "c"], r, 0), Err(DatasetError::BadRatios(_))));
        let r = SplitRatios { train: 1.0, val: 0.0, test: 0.0 };
        assert!(song_splits(["a", "b", "c"], r, 0).is_err());
    }

    #[test]
    fn split_ignores_input_order() {
        let pairs: Vec<_> = (0..12).map(|i| pair(&format!("song{}", i % 6), i)).collect();
        let a = split_by_song(pairs.clone(), SplitRatios::default(), 9).unwrap();
        let mut shuffled = pairs;
        shuffled.reverse();
        shuffled.rotate_left(5);
        let b = split_by_song(shuffled, SplitRatios::default(), 9).unwrap();
        let by_id = |v: &[PairRecord]| -> BTreeMap<String, Split> {
            v.iter().map(|p| (p.pair_id.clone(), p.split)).collect()
        };
        assert_eq!(by_id(&a), by_id(&b));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = augment(&[pair("a", 0), pair("b", 4)]).unwrap();
        save_manifest(&path, &pairs).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), pairs);
    }

    #[test]
    fn manifest_missing_midi_names_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        save_manifest(&path, &[pair("a", 0), pair("b", 4)]).unwrap();
        fs::remove_file(midi_dir_for(&path).join("b_b004.var.mid")).unwrap();
        match load_manifest(&path) {
            Err(DatasetError::MissingMidi { pair_id, .. }) => assert_eq!(pair_id, "b_b004"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_unknown_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        save_manifest(&path, &[pair("a", 0), pair("b", 4)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let last = text.lines().last().unwrap().replace("\"schema_version\":1", "\"schema_version\":99");
        let edited = format!("{text}{last}\n");
        fs::write(&path, edited).unwrap();
        assert!(matches!(load_manifest(&path), Err(DatasetError::SchemaVersion { line: 3, found: 99 })));
    }

    #[test]
    fn review_edits_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut pairs = vec![pair("a", 0), pair("a", 4)];
        pairs[1].status = PairStatus::NeedsReview;
        let path = dir.path().join("review.jsonl");
        write_review(&path, &review_entries(&pairs)).unwrap();
        let mut entries = read_review(&path).unwrap();
        assert_eq!(entries, review_entries(&pairs));
        entries[1].status = PairStatus::Accepted;
        entries[0].status = PairStatus::Rejected;
        assert_eq!(apply_review(&mut pairs, &entries).unwrap(), 2);
        assert_eq!(pairs[0].status, PairStatus::Rejected);
        entries[0].pair_id = "nope".into();
        assert!(matches!(apply_review(&mut pairs, &entries), Err(DatasetError::UnknownPair(_))));
    }

    #[test]
    fn csv_export_columns() {
        let mut buf = Vec::new();
        export_csv(&mut buf, &[pair("a", 0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "pair_id,song_id,transposition,confidence,split\na_b000,a,0,0.75,unassigned\n");
    }
}
