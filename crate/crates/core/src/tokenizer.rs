//! REMI+-style event tokens for single-instrument scores.
//!
//! A bar is `Bar [TimeSig] [Tempo]` followed by `Position` groups, each
//! holding one or more `Pitch Velocity Duration` triples in ascending pitch.

use std::io::{Read, Write};
use std::path::Path;

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Split;
use crate::midi_io::{Beat, MidiScore, NoteEvent, Tempo, TempoChange, TimeSignature};

/// Grid steps per quarter note.
pub const GRID: i64 = 12;
pub const MAX_DURATION_STEPS: u32 = 96;
pub const VELOCITY_BINS: u32 = 32;
pub const TEMPO_BINS: u32 = 32;
pub const TEMPO_MIN_BPM: f64 = 30.0;
pub const TEMPO_MAX_BPM: f64 = 300.0;
pub const MAX_NUMERATOR: u8 = 12;
pub const VOCAB_VERSION: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 1024;

const TOKEN_FILE_MAGIC: &[u8; 4] = b"OVTK";
const TOKEN_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("note {index} (pitch {pitch}) at beat {onset} is not on the 1/{GRID} beat grid")]
    Unquantized { index: usize, pitch: u8, onset: Beat },
    #[error("note {index} (pitch {pitch}) has duration {duration} off the 1/{GRID} beat grid")]
    UnquantizedDuration { index: usize, pitch: u8, duration: Beat },
    #[error("time signature {0}/{1} is outside the vocabulary")]
    UnsupportedTimeSignature(u8, u8),
    #[error("original of {len} tokens leaves no room within max_len {max_len}")]
    Untrainable { len: usize, max_len: usize },
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
    #[error("token file: {0}")]
    TokenFile(String),
    #[error("vocabulary hash mismatch: data has {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Sep,
    Bar,
    TimeSig(u8, u8),
    Tempo(u8),
    Position(u16),
    Pitch(u8),
    Velocity(u8),
    /// Grid steps, 1..=96.
    Duration(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Pad,
    Bos,
    Eos,
    Sep,
    Bar,
    TimeSig,
    Tempo,
    Position,
    Pitch,
    Velocity,
    Duration,
}

impl Family {
    pub const ALL: [Family; 11] = [
        Family::Pad,
        Family::Bos,
        Family::Eos,
        Family::Sep,
        Family::Bar,
        Family::TimeSig,
        Family::Tempo,
        Family::Position,
        Family::Pitch,
        Family::Velocity,
        Family::Duration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Pad => "PAD",
            Family::Bos => "BOS",
            Family::Eos => "EOS",
            Family::Sep => "SEP",
            Family::Bar => "Bar",
            Family::TimeSig => "TimeSig",
            Family::Tempo => "Tempo",
            Family::Position => "Position",
            Family::Pitch => "Pitch",
            Family::Velocity => "Velocity",
            Family::Duration => "Duration",
        }
    }
}

impl Token {
    pub fn family(&self) -> Family {
        match self {
            Token::Pad => Family::Pad,
            Token::Bos => Family::Bos,
            Token::Eos => Family::Eos,
            Token::Sep => Family::Sep,
            Token::Bar => Family::Bar,
            Token::TimeSig(..) => Family::TimeSig,
            Token::Tempo(_) => Family::Tempo,
            Token::Position(_) => Family::Position,
            Token::Pitch(_) => Family::Pitch,
            Token::Velocity(_) => Family::Velocity,
            Token::Duration(_) => Family::Duration,
        }
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Token::TimeSig(n, d) => write!(f, "TimeSig_{n}/{d}"),
            Token::Tempo(b) => write!(f, "Tempo_{b}"),
            Token::Position(p) => write!(f, "Position_{p}"),
            Token::Pitch(p) => write!(f, "Pitch_{p}"),
            Token::Velocity(v) => write!(f, "Velocity_{v}"),
            Token::Duration(d) => write!(f, "Duration_{d}"),
            other => f.write_str(other.family().name()),
        }
    }
}

/// Grid steps in one bar of `numerator/denominator`.
pub fn bar_steps(numerator: u8, denominator: u8) -> u32 {
    numerator as u32 * 4 * GRID as u32 / denominator as u32
}

pub fn velocity_bin(velocity: u8) -> u8 {
    (velocity as u32 * VELOCITY_BINS / 128) as u8
}

pub fn velocity_center(bin: u8) -> u8 {
    let width = 128 / VELOCITY_BINS;
    (bin as u32 * width + width / 2) as u8
}

pub fn tempo_bin(bpm: f64) -> u8 {
    let ratio = (TEMPO_MAX_BPM / TEMPO_MIN_BPM).log10();
    let x = (bpm / TEMPO_MIN_BPM).log10() / ratio * TEMPO_BINS as f64;
    if !x.is_finite() || x < 0.0 {
        return 0;
    }
    (x.floor() as u32).min(TEMPO_BINS - 1) as u8
}

pub fn tempo_bin_edges() -> Vec<f64> {
    let ratio = TEMPO_MAX_BPM / TEMPO_MIN_BPM;
    (0..=TEMPO_BINS).map(|k| TEMPO_MIN_BPM * ratio.powf(k as f64 / TEMPO_BINS as f64)).collect()
}

/// Geometric center of a tempo bin, in BPM.
pub fn tempo_center(bin: u8) -> f64 {
    let ratio = TEMPO_MAX_BPM / TEMPO_MIN_BPM;
    TEMPO_MIN_BPM * ratio.powf((bin as f64 + 0.5) / TEMPO_BINS as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyRange {
    pub family: Family,
    pub start: u32,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    grid: u32,
    families: Vec<FamilyRange>,
    time_signatures: Vec<(u8, u8)>,
    tempo_bin_edges: Vec<f64>,
    velocity_bin_edges: Vec<u32>,
    max_duration_steps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    ranges: Vec<FamilyRange>,
    time_signatures: Vec<(u8, u8)>,
    max_positions: u32,
    size: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut time_signatures = Vec::new();
        for n in 1..=MAX_NUMERATOR {
            for d in TimeSignature::SUPPORTED_DENOMINATORS {
                time_signatures.push((n, d));
            }
        }
        let max_positions = time_signatures.iter().map(|&(n, d)| bar_steps(n, d)).max().unwrap_or(0);
        let lens = [
            1,
            1,
            1,
            1,
            1,
            time_signatures.len() as u32,
            TEMPO_BINS,
            max_positions,
            128,
            VELOCITY_BINS,
            MAX_DURATION_STEPS,
        ];
        let mut ranges = Vec::with_capacity(lens.len());
        let mut start = 0;
        for (family, len) in Family::ALL.into_iter().zip(lens) {
            ranges.push(FamilyRange { family, start, len });
            start += len;
        }
        Vocabulary { ranges, time_signatures, max_positions, size: start }
    }

    pub fn len(&self) -> usize {
        self.size as usize
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn ranges(&self) -> &[FamilyRange] {
        &self.ranges
    }

    pub fn range(&self, family: Family) -> std::ops::Range<u32> {
        let r = self.ranges[family as usize];
        r.start..r.start + r.len
    }

    pub fn supports_time_signature(&self, numerator: u8, denominator: u8) -> bool {
        self.time_signatures.contains(&(numerator, denominator))
    }

    /// Id of a token, or None when its payload is outside the vocabulary.
    pub fn encode(&self, token: Token) -> Option<u32> {
        let base = self.ranges[token.family() as usize].start;
        let offset = match token {
            Token::Pad | Token::Bos | Token::Eos | Token::Sep | Token::Bar => 0,
            Token::TimeSig(n, d) => self.time_signatures.iter().position(|&ts| ts == (n, d))? as u32,
            Token::Tempo(b) => b as u32,
            Token::Position(p) => p as u32,
            Token::Pitch(p) => p as u32,
            Token::Velocity(v) => v as u32,
            Token::Duration(d) => (d as u32).checked_sub(1)?,
        };
        (offset < self.ranges[token.family() as usize].len).then_some(base + offset)
    }

    pub fn decode(&self, id: u32) -> Option<Token> {
        if id >= self.size {
            return None;
        }
        let idx = self.ranges.partition_point(|r| r.start <= id) - 1;
        let range = self.ranges[idx];
        let off = id - range.start;
        Some(match range.family {
            Family::Pad => Token::Pad,
            Family::Bos => Token::Bos,
            Family::Eos => Token::Eos,
            Family::Sep => Token::Sep,
            Family::Bar => Token::Bar,
            Family::TimeSig => {
                let (n, d) = self.time_signatures[off as usize];
                Token::TimeSig(n, d)
            }
            Family::Tempo => Token::Tempo(off as u8),
            Family::Position => Token::Position(off as u16),
            Family::Pitch => Token::Pitch(off as u8),
            Family::Velocity => Token::Velocity(off as u8),
            Family::Duration => Token::Duration(off as u8 + 1),
        })
    }

    pub fn id(&self, token: Token) -> u32 {
        self.encode(token).unwrap_or_else(|| panic!("{token} is outside the vocabulary"))
    }

    pub fn pad(&self) -> u32 {
        self.id(Token::Pad)
    }
    pub fn bos(&self) -> u32 {
        self.id(Token::Bos)
    }
    pub fn eos(&self) -> u32 {
        self.id(Token::Eos)
    }
    pub fn sep(&self) -> u32 {
        self.id(Token::Sep)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_VERSION,
            grid: GRID as u32,
            families: self.ranges.clone(),
            time_signatures: self.time_signatures.clone(),
            tempo_bin_edges: tempo_bin_edges(),
            velocity_bin_edges: (0..=VELOCITY_BINS).map(|b| b * 128 / VELOCITY_BINS).collect(),
            max_duration_steps: MAX_DURATION_STEPS,
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    /// Parses a vocabulary file; only the layout this build produces is accepted.
    pub fn from_json(text: &str) -> Result<Self, TokenizeError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| TokenizeError::VocabFormat(e.to_string()))?;
        if file.version != VOCAB_VERSION {
            return Err(TokenizeError::VocabFormat(format!("unsupported version {}", file.version)));
        }
        let vocab = Vocabulary::new();
        if file.grid != GRID as u32
            || file.families != vocab.ranges
            || file.time_signatures != vocab.time_signatures
            || file.max_duration_steps != MAX_DURATION_STEPS
        {
            return Err(TokenizeError::VocabFormat("layout differs from this build".into()));
        }
        Ok(vocab)
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.decode(id).map_or_else(|| format!("<{id}>"), |t| t.to_string()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn grid_steps(beat: Beat) -> Option<i64> {
    let scaled = beat * Beat::from_integer(GRID);
    scaled.is_integer().then(|| scaled.to_integer())
}

pub fn tokenize(score: &MidiScore, vocab: &Vocabulary) -> Result<TokenSequence, TokenizeError> {
    for (index, note) in score.notes.iter().enumerate() {
        if grid_steps(note.onset).is_none() {
            return Err(TokenizeError::Unquantized { index, pitch: note.pitch, onset: note.onset });
        }
        if grid_steps(note.duration).is_none() {
            return Err(TokenizeError::UnquantizedDuration {
                index,
                pitch: note.pitch,
                duration: note.duration,
            });
        }
    }
    let mut notes: Vec<&NoteEvent> = score.notes.iter().collect();
    notes.sort_by(|a, b| (a.onset, a.pitch).cmp(&(b.onset, b.pitch)));

    let bars = notes.last().map_or(1, |n| score.bar_at(n.onset).0 + 1);
    let mut ids = Vec::with_capacity(3 * notes.len() + 3 * bars as usize + 2);
    let mut last_sig = None;
    let mut last_tempo = None;
    let mut next = 0;
    let mut bar_start = Beat::zero();
    for bar in 0..bars {
        let sig = score.time_signature_at_bar(bar);
        let bar_end = bar_start + sig.bar_beats();
        ids.push(vocab.id(Token::Bar));
        if last_sig != Some((sig.numerator, sig.denominator)) {
            let id = vocab
                .encode(Token::TimeSig(sig.numerator, sig.denominator))
                .ok_or(TokenizeError::UnsupportedTimeSignature(sig.numerator, sig.denominator))?;
            ids.push(id);
            last_sig = Some((sig.numerator, sig.denominator));
        }
        let tempo = tempo_bin(score.tempo_at(bar_start).bpm());
        if last_tempo != Some(tempo) {
            ids.push(vocab.id(Token::Tempo(tempo)));
            last_tempo = Some(tempo);
        }
        let mut last_pos = None;
        while next < notes.len() && notes[next].onset < bar_end {
            let note = notes[next];
            let pos = grid_steps(note.onset - bar_start).expect("checked above") as u16;
            if last_pos != Some(pos) {
                ids.push(vocab.id(Token::Position(pos)));
                last_pos = Some(pos);
            }
            let steps = grid_steps(note.duration).expect("checked above").clamp(1, MAX_DURATION_STEPS as i64);
            ids.push(vocab.id(Token::Pitch(note.pitch)));
            ids.push(vocab.id(Token::Velocity(velocity_bin(note.velocity))));
            ids.push(vocab.id(Token::Duration(steps as u8)));
            next += 1;
        }
        bar_start = bar_end;
    }
    Ok(TokenSequence { ids })
}

/// What `detokenize_with_report` had to discard or invent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RepairReport {
    /// Tokens dropped because they broke the grammar.
    pub dropped: usize,
    pub implicit_bar: bool,
}

impl RepairReport {
    pub fn is_clean(&self) -> bool {
        self.dropped == 0 && !self.implicit_bar
    }
}

pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> MidiScore {
    detokenize_with_report(ids, vocab).0
}

/// Decodes any id sequence. Repair rules: stop at EOS; skip PAD/BOS/SEP;
/// insert a Bar before content that precedes the first Bar; drop
/// unknown ids, out-of-bar positions, meter/tempo tokens after a bar's
/// first Position, and incomplete note triples.
pub fn detokenize_with_report(ids: &[u32], vocab: &Vocabulary) -> (MidiScore, RepairReport) {
    let mut report = RepairReport::default();
    let mut notes = Vec::new();
    let mut sigs: Vec<TimeSignature> = Vec::new();
    let mut tempi: Vec<TempoChange> = Vec::new();

    let mut bar: Option<u32> = None;
    let mut bar_start = Beat::zero();
    let mut sig = (4u8, 4u8);
    let mut bar_has_position = false;
    let mut position: Option<u16> = None;
    let mut pitch: Option<u8> = None;
    let mut velocity: Option<u8> = None;

    let open_bar = |bar: &mut Option<u32>, bar_start: &mut Beat, sig: (u8, u8)| {
        match bar {
            None => *bar = Some(0),
            Some(b) => {
                *bar_start += TimeSignature::new(0, sig.0, sig.1).bar_beats();
                *b += 1;
            }
        }
    };

    for &id in ids {
        let Some(token) = vocab.decode(id) else {
            report.dropped += 1;
            continue;
        };
        match token {
            Token::Eos => break,
            Token::Pad | Token::Bos | Token::Sep => continue,
            _ => {}
        }
        if bar.is_none() && token != Token::Bar {
            report.implicit_bar = true;
            open_bar(&mut bar, &mut bar_start, sig);
        }
        // Anything but Velocity/Duration abandons a half-built note.
        if !matches!(token, Token::Velocity(_) | Token::Duration(_)) && pitch.is_some() {
            report.dropped += 1 + velocity.is_some() as usize;
            pitch = None;
            velocity = None;
        }
        match token {
            Token::Bar => {
                open_bar(&mut bar, &mut bar_start, sig);
                bar_has_position = false;
                position = None;
            }
            Token::TimeSig(n, d) if !bar_has_position => {
                if sig != (n, d) || sigs.is_empty() {
                    sigs.push(TimeSignature::new(bar.unwrap_or(0), n, d));
                }
                sig = (n, d);
            }
            Token::Tempo(b) if !bar_has_position => {
                tempi.push(TempoChange { beat: bar_start, tempo: Tempo::from_bpm(tempo_center(b)) });
            }
            Token::Position(p) if (p as u32) < bar_steps(sig.0, sig.1) => {
                position = Some(p);
                bar_has_position = true;
            }
            Token::Pitch(p) if position.is_some() => pitch = Some(p),
            Token::Velocity(v) if pitch.is_some() && velocity.is_none() => velocity = Some(v),
            Token::Duration(d) if pitch.is_some() && velocity.is_some() => {
                let onset = bar_start + Beat::new(position.unwrap_or(0) as i64, GRID);
                notes.push(NoteEvent {
                    pitch: pitch.take().unwrap_or(0),
                    onset,
                    duration: Beat::new(d as i64, GRID),
                    velocity: velocity_center(velocity.take().unwrap_or(0)),
                });
            }
            _ => {
                report.dropped += 1;
                if matches!(token, Token::Velocity(_) | Token::Duration(_)) && pitch.is_some() {
                    report.dropped += 1 + velocity.is_some() as usize;
                    pitch = None;
                    velocity = None;
                }
                if let Token::Position(_) = token {
                    position = None;
                }
            }
        }
    }
    if pitch.is_some() {
        report.dropped += 1 + velocity.is_some() as usize;
    }
    let resolution = crate::midi_io::DEFAULT_RESOLUTION;
    (MidiScore::with_context(notes, tempi, sigs, resolution), report)
}

/// `BOS original SEP variation EOS`, cutting the variation tail to fit.
pub fn assemble_pair(
    original: &TokenSequence,
    variation: &TokenSequence,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<TokenSequence, TokenizeError> {
    if original.len() + 3 > max_len {
        return Err(TokenizeError::Untrainable { len: original.len(), max_len });
    }
    let room = max_len - 3 - original.len();
    let take = variation.len().min(room);
    let mut ids = Vec::with_capacity(original.len() + take + 3);
    ids.push(vocab.bos());
    ids.extend_from_slice(&original.ids);
    ids.push(vocab.sep());
    ids.extend_from_slice(&variation.ids[..take]);
    ids.push(vocab.eos());
    Ok(TokenSequence { ids })
}

/// Index of the first SEP, if any.
pub fn sep_index(ids: &[u32], vocab: &Vocabulary) -> Option<usize> {
    let sep = vocab.sep();
    ids.iter().position(|&id| id == sep)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub pair_id: String,
    pub split: Split,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    pub vocab_hash: String,
    pub records: Vec<TokenRecord>,
}

fn split_code(split: Split) -> u8 {
    match split {
        Split::Unassigned => 0,
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

fn split_from_code(code: u8) -> Result<Split, TokenizeError> {
    Ok(match code {
        0 => Split::Unassigned,
        1 => Split::Train,
        2 => Split::Val,
        3 => Split::Test,
        other => return Err(TokenizeError::TokenFile(format!("bad split code {other}"))),
    })
}

fn hex_to_bytes(hex: &str) -> Result<[u8; 32], TokenizeError> {
    let bad = || TokenizeError::TokenFile(format!("vocabulary hash {hex:?} is not 64 hex digits"));
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl TokenCorpus {
    pub fn write_to(&self, mut w: impl Write) -> Result<(), TokenizeError> {
        w.write_all(TOKEN_FILE_MAGIC)?;
        w.write_all(&TOKEN_FILE_VERSION.to_le_bytes())?;
        w.write_all(&hex_to_bytes(&self.vocab_hash)?)?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for rec in &self.records {
            w.write_all(&[split_code(rec.split)])?;
            let name = rec.pair_id.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(rec.ids.len() as u32).to_le_bytes())?;
            for id in &rec.ids {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TokenizeError> {
        let truncated = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => TokenizeError::TokenFile("truncated".into()),
            _ => TokenizeError::Io(e),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != TOKEN_FILE_MAGIC {
            return Err(TokenizeError::TokenFile("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(truncated)?;
        let version = u32::from_le_bytes(u32buf);
        if version != TOKEN_FILE_VERSION {
            return Err(TokenizeError::TokenFile(format!("unsupported version {version}")));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(truncated)?;
        let vocab_hash = hash.iter().map(|b| format!("{b:02x}")).collect();
        r.read_exact(&mut u32buf).map_err(truncated)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut code = [0u8; 1];
            r.read_exact(&mut code).map_err(truncated)?;
            let mut u16buf = [0u8; 2];
            r.read_exact(&mut u16buf).map_err(truncated)?;
            let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let pair_id = String::from_utf8(name)
                .map_err(|_| TokenizeError::TokenFile("pair id is not UTF-8".into()))?;
            r.read_exact(&mut u32buf).map_err(truncated)?;
            let len = u32::from_le_bytes(u32buf) as usize;
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw).map_err(truncated)?;
            let ids = raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            records.push(TokenRecord { pair_id, split: split_from_code(code[0])?, ids });
        }
        Ok(TokenCorpus { vocab_hash, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizeError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizeError> {
        TokenCorpus::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Fails unless the corpus was written against `vocab`.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), TokenizeError> {
        let expected = vocab.hash();
        if self.vocab_hash != expected {
            return Err(TokenizeError::VocabMismatch { expected, found: self.vocab_hash.clone() });
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TokenRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}
