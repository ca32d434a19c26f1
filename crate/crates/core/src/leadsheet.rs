//! Lead sheets: chord symbols on a bar grid, an optional melody and key.
//!
//! Lead sheets are read from a small plaintext format, one file per song:
//!
//! ```text
//! title: Blue Monk
//! key: Bb major
//! time: 4/4
//! | Bb6 . Eb7 . | Bb6 . . . |
//! | F7 . . . | Bb6 . . . |
//! melody:
//! 0.0 58 1
//! 0.1.5 60 1/2
//! ```
//!
//! Each `|`-delimited cell is one bar; its whitespace-separated tokens sit on
//! consecutive beats of the meter and `.` holds the previous chord. Melody
//! lines are `bar.beat pitch duration [velocity]` with the beat offset and
//! duration in quarter notes (decimals or fractions).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi_io::{Beat, MidiScore, NoteEvent, TimeSignature};

pub const CHORD_VELOCITY: u8 = 80;
pub const MELODY_VELOCITY: u8 = 90;
/// Lowest pitch of the block-chord realization (C3).
pub const CHORD_BASE_PITCH: u8 = 48;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot parse chord {text:?} at position {position}: {message}")]
pub struct ChordParseError {
    pub text: String,
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("lead sheet line {line}: {message}")]
pub struct LeadSheetError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quality {
    Maj,
    Min,
    Dom7,
    Maj7,
    Min7,
    Min7b5,
    Dim,
    Dim7,
    Aug,
    Sus4,
    Sus2,
    Maj6,
    Min6,
}

impl Quality {
    pub const ALL: [Quality; 13] = [
        Quality::Maj,
        Quality::Min,
        Quality::Dom7,
        Quality::Maj7,
        Quality::Min7,
        Quality::Min7b5,
        Quality::Dim,
        Quality::Dim7,
        Quality::Aug,
        Quality::Sus4,
        Quality::Sus2,
        Quality::Maj6,
        Quality::Min6,
    ];

    /// Chord tones as semitones above the root.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            Quality::Maj => &[0, 4, 7],
            Quality::Min => &[0, 3, 7],
            Quality::Dom7 => &[0, 4, 7, 10],
            Quality::Maj7 => &[0, 4, 7, 11],
            Quality::Min7 => &[0, 3, 7, 10],
            Quality::Min7b5 => &[0, 3, 6, 10],
            Quality::Dim => &[0, 3, 6],
            Quality::Dim7 => &[0, 3, 6, 9],
            Quality::Aug => &[0, 4, 8],
            Quality::Sus4 => &[0, 5, 7],
            Quality::Sus2 => &[0, 2, 7],
            Quality::Maj6 => &[0, 4, 7, 9],
            Quality::Min6 => &[0, 3, 7, 9],
        }
    }

    /// Canonical suffix used when formatting.
    pub fn suffix(self) -> &'static str {
        match self {
            Quality::Maj => "",
            Quality::Min => "m",
            Quality::Dom7 => "7",
            Quality::Maj7 => "maj7",
            Quality::Min7 => "m7",
            Quality::Min7b5 => "m7b5",
            Quality::Dim => "dim",
            Quality::Dim7 => "dim7",
            Quality::Aug => "aug",
            Quality::Sus4 => "sus4",
            Quality::Sus2 => "sus2",
            Quality::Maj6 => "6",
            Quality::Min6 => "m6",
        }
    }
}

// Accepted spellings; matched longest-first.
const QUALITY_SPELLINGS: &[(&str, Quality)] = &[
    ("maj7", Quality::Maj7),
    ("ma7", Quality::Maj7),
    ("M7", Quality::Maj7),
    ("Δ7", Quality::Maj7),
    ("Δ", Quality::Maj7),
    ("maj", Quality::Maj),
    ("M", Quality::Maj),
    ("min7b5", Quality::Min7b5),
    ("m7b5", Quality::Min7b5),
    ("-7b5", Quality::Min7b5),
    ("ø7", Quality::Min7b5),
    ("ø", Quality::Min7b5),
    ("min7", Quality::Min7),
    ("mi7", Quality::Min7),
    ("m7", Quality::Min7),
    ("-7", Quality::Min7),
    ("min6", Quality::Min6),
    ("m6", Quality::Min6),
    ("-6", Quality::Min6),
    ("min", Quality::Min),
    ("mi", Quality::Min),
    ("m", Quality::Min),
    ("-", Quality::Min),
    ("dim7", Quality::Dim7),
    ("o7", Quality::Dim7),
    ("°7", Quality::Dim7),
    ("dim", Quality::Dim),
    ("o", Quality::Dim),
    ("°", Quality::Dim),
    ("aug", Quality::Aug),
    ("+", Quality::Aug),
    ("sus4", Quality::Sus4),
    ("sus2", Quality::Sus2),
    ("sus", Quality::Sus4),
    ("7", Quality::Dom7),
    ("6", Quality::Maj6),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Extension {
    Flat9,
    Nine,
    Sharp11,
    Flat13,
    Thirteen,
}

impl Extension {
    pub fn interval(self) -> u8 {
        match self {
            Extension::Flat9 => 1,
            Extension::Nine => 2,
            Extension::Sharp11 => 6,
            Extension::Flat13 => 8,
            Extension::Thirteen => 9,
        }
    }

    pub fn spelling(self) -> &'static str {
        match self {
            Extension::Flat9 => "b9",
            Extension::Nine => "9",
            Extension::Sharp11 => "#11",
            Extension::Flat13 => "b13",
            Extension::Thirteen => "13",
        }
    }
}

const EXTENSION_SPELLINGS: &[(&str, Extension)] = &[
    ("#11", Extension::Sharp11),
    ("b13", Extension::Flat13),
    ("13", Extension::Thirteen),
    ("b9", Extension::Flat9),
    ("9", Extension::Nine),
];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChordSymbol {
    pub root: u8,
    pub quality: Quality,
    pub extensions: BTreeSet<Extension>,
    pub bass: Option<u8>,
}

impl ChordSymbol {
    pub fn new(root: u8, quality: Quality) -> Self {
        ChordSymbol { root: root % 12, quality, extensions: BTreeSet::new(), bass: None }
    }

    pub fn with_extension(mut self, ext: Extension) -> Self {
        self.extensions.insert(ext);
        self
    }

    pub fn with_bass(mut self, bass: u8) -> Self {
        self.bass = Some(bass % 12);
        self
    }

    /// Sorted pitch classes sounding in this chord, bass included.
    pub fn pitch_classes(&self) -> Vec<u8> {
        let mut pcs: BTreeSet<u8> =
            self.quality.intervals().iter().map(|i| (self.root + i) % 12).collect();
        pcs.extend(self.extensions.iter().map(|e| (self.root + e.interval()) % 12));
        pcs.extend(self.bass);
        pcs.into_iter().collect()
    }

    pub fn transposed(&self, semitones: i32) -> Self {
        let shift = |pc: u8| (pc as i32 + semitones).rem_euclid(12) as u8;
        ChordSymbol {
            root: shift(self.root),
            quality: self.quality,
            extensions: self.extensions.clone(),
            bass: self.bass.map(shift),
        }
    }

    /// Block voicing: root from C3 upward, remaining tones stacked above it,
    /// a foreign slash bass placed in the C3 octave.
    pub fn voicing(&self) -> Vec<u8> {
        let root_pitch = CHORD_BASE_PITCH + self.root;
        let mut pitches: BTreeSet<u8> = self.quality.intervals().iter().map(|i| root_pitch + i).collect();
        pitches.extend(self.extensions.iter().map(|e| root_pitch + e.interval()));
        if let Some(bass) = self.bass {
            if !self.pitch_classes_without_bass().contains(&bass) {
                pitches.insert(CHORD_BASE_PITCH + bass);
            }
        }
        pitches.into_iter().collect()
    }

    fn pitch_classes_without_bass(&self) -> Vec<u8> {
        ChordSymbol { bass: None, ..self.clone() }.pitch_classes()
    }
}

const PC_NAMES: [&str; 12] = ["C", "Db", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"];

pub fn pitch_class_name(pc: u8) -> &'static str {
    PC_NAMES[(pc % 12) as usize]
}

impl fmt::Display for ChordSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", pitch_class_name(self.root), self.quality.suffix())?;
        if !self.extensions.is_empty() {
            let exts: Vec<_> = self.extensions.iter().map(|e| e.spelling()).collect();
            write!(f, "({})", exts.join(","))?;
        }
        if let Some(bass) = self.bass {
            write!(f, "/{}", pitch_class_name(bass))?;
        }
        Ok(())
    }
}

impl FromStr for ChordSymbol {
    type Err = ChordParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_chord(s)
    }
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn eat(&mut self, prefix: &str) -> bool {
        if self.rest().starts_with(prefix) {
            self.pos += prefix.len();
            true
        } else {
            false
        }
    }

    fn error(&self, message: &str) -> ChordParseError {
        ChordParseError {
            text: self.text.to_string(),
            position: self.text[..self.pos].chars().count(),
            message: message.to_string(),
        }
    }

    fn note_name(&mut self) -> Result<u8, ChordParseError> {
        let base = match self.rest().chars().next() {
            Some('C') => 0,
            Some('D') => 2,
            Some('E') => 4,
            Some('F') => 5,
            Some('G') => 7,
            Some('A') => 9,
            Some('B') => 11,
            _ => return Err(self.error("expected note letter A-G")),
        };
        self.pos += 1;
        let offset = if self.eat("#") || self.eat("♯") {
            1
        } else if self.eat("b") || self.eat("♭") {
            11
        } else {
            0
        };
        Ok((base + offset) % 12)
    }
}

/// Parses `Root[#|b] Quality? Extensions* (/Bass)?`.
///
/// Extensions may be bare (`C7b9#11`) or parenthesized and comma separated
/// (`C7(b9,#11)`). A bare `9` or `13` directly after the root is read as a
/// dominant seventh carrying that extension.
pub fn parse_chord(text: &str) -> Result<ChordSymbol, ChordParseError> {
    let mut cur = Cursor { text: text.trim(), pos: 0 };
    let root = cur.note_name()?;

    let mut quality = None;
    let mut best = 0;
    for (spelling, q) in QUALITY_SPELLINGS {
        if spelling.len() > best && cur.rest().starts_with(spelling) {
            best = spelling.len();
            quality = Some(*q);
        }
    }
    let mut extensions = BTreeSet::new();
    match quality {
        Some(_) => cur.pos += best,
        None => {
            for (spelling, ext) in [("13", Extension::Thirteen), ("9", Extension::Nine)] {
                if cur.eat(spelling) {
                    quality = Some(Quality::Dom7);
                    extensions.insert(ext);
                    break;
                }
            }
        }
    }
    let quality = quality.unwrap_or(Quality::Maj);

    let mut in_parens = false;
    loop {
        if cur.rest().is_empty() || cur.rest().starts_with('/') {
            break;
        }
        if !in_parens && cur.eat("(") {
            in_parens = true;
            continue;
        }
        if in_parens {
            if cur.eat(")") {
                in_parens = false;
                continue;
            }
            if cur.eat(",") || cur.eat(" ") {
                continue;
            }
        }
        let found = EXTENSION_SPELLINGS.iter().find(|(s, _)| cur.rest().starts_with(s));
        match found {
            Some((s, ext)) => {
                cur.pos += s.len();
                extensions.insert(*ext);
            }
            None => return Err(cur.error("unexpected character")),
        }
    }
    if in_parens {
        return Err(cur.error("unclosed parenthesis"));
    }

    let bass = if cur.eat("/") {
        let pc = cur.note_name()?;
        if !cur.rest().is_empty() {
            return Err(cur.error("trailing characters after bass note"));
        }
        Some(pc)
    } else {
        None
    };

    Ok(ChordSymbol { root, quality, extensions, bass })
}

/// Twelve non-negative pitch-class weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChromaVector {
    pub weights: [f64; 12],
}

impl ChromaVector {
    pub fn new(weights: [f64; 12]) -> Self {
        debug_assert!(weights.iter().all(|w| *w >= 0.0));
        ChromaVector { weights }
    }

    pub fn zero() -> Self {
        ChromaVector::default()
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// True for the all-zero (silent) vector.
    pub fn is_silent(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0)
    }

    /// Unit-norm copy; the zero vector stays zero.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return *self;
        }
        let mut weights = self.weights;
        weights.iter_mut().for_each(|w| *w /= n);
        ChromaVector { weights }
    }

    pub fn dot(&self, other: &ChromaVector) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| a * b).sum()
    }

    /// Cosine similarity; 0 when either side is silent.
    pub fn cosine(&self, other: &ChromaVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }

    /// Moves the weight of pitch class `c` to `c + shift`.
    pub fn rotated(&self, shift: i32) -> Self {
        let mut weights = [0.0; 12];
        for (c, w) in self.weights.iter().enumerate() {
            weights[(c as i32 + shift).rem_euclid(12) as usize] = *w;
        }
        ChromaVector { weights }
    }
}

/// Unit-norm binary template over the chord's pitch classes.
pub fn chord_template(chord: &ChordSymbol) -> ChromaVector {
    let mut weights = [0.0; 12];
    for pc in chord.pitch_classes() {
        weights[pc as usize] = 1.0;
    }
    ChromaVector::new(weights).normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Key {
    pub tonic: u8,
    pub mode: Mode,
}

impl Key {
    pub fn new(tonic: u8, mode: Mode) -> Self {
        Key { tonic: tonic % 12, mode }
    }

    pub fn transposed(&self, semitones: i32) -> Self {
        Key::new((self.tonic as i32 + semitones).rem_euclid(12) as u8, self.mode)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", pitch_class_name(self.tonic), mode)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChordEvent {
    pub bar: u32,
    /// Offset from the bar start in quarter-note beats.
    pub beat: Beat,
    pub chord: ChordSymbol,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeadSheet {
    pub title: String,
    pub key: Option<Key>,
    pub time_signature: (u8, u8),
    pub bars: u32,
    /// Sorted by strictly increasing `(bar, beat)`.
    pub chords: Vec<ChordEvent>,
    /// Absolute onsets in quarter-note beats.
    pub melody: Option<Vec<NoteEvent>>,
}

impl LeadSheet {
    pub fn bar_beats(&self) -> Beat {
        TimeSignature::new(0, self.time_signature.0, self.time_signature.1).bar_beats()
    }

    pub fn total_beats(&self) -> Beat {
        self.bar_beats() * Beat::from_integer(self.bars as i64)
    }

    pub fn absolute_beat(&self, bar: u32, beat: Beat) -> Beat {
        self.bar_beats() * Beat::from_integer(bar as i64) + beat
    }

    /// Chord sounding at an absolute position, if any chord has started.
    pub fn chord_at(&self, beat: Beat) -> Option<&ChordEvent> {
        self.chords
            .iter()
            .take_while(|c| self.absolute_beat(c.bar, c.beat) <= beat)
            .last()
    }

    /// Renders back to the text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("title: {}\n", self.title);
        if let Some(key) = self.key {
            out += &format!("key: {key}\n");
        }
        out += &format!("time: {}/{}\n", self.time_signature.0, self.time_signature.1);
        let beat_len = Beat::new(4, self.time_signature.1 as i64);
        for bar in 0..self.bars {
            let mut cells = vec![".".to_string(); self.time_signature.0 as usize];
            for c in self.chords.iter().filter(|c| c.bar == bar) {
                let idx = (c.beat / beat_len).to_integer() as usize;
                cells[idx] = c.chord.to_string();
            }
            out += &format!("| {} |\n", cells.join(" "));
        }
        if let Some(melody) = &self.melody {
            out += "melody:\n";
            let bar_len = self.bar_beats();
            for n in melody {
                let bar = (n.onset / bar_len).floor();
                let offset = n.onset - bar * bar_len;
                out += &format!(
                    "{}.{} {} {} {}\n",
                    bar.to_integer(),
                    fmt_beat(offset),
                    n.pitch,
                    fmt_beat(n.duration),
                    n.velocity
                );
            }
        }
        out
    }
}

fn fmt_beat(b: Beat) -> String {
    if b.is_integer() {
        b.to_integer().to_string()
    } else {
        format!("{}/{}", b.numer(), b.denom())
    }
}

/// Parses `3`, `1.5`, or `3/2` into an exact beat value.
pub fn parse_beat(text: &str) -> Option<Beat> {
    if let Some((n, d)) = text.split_once('/') {
        let (n, d): (i64, i64) = (n.parse().ok()?, d.parse().ok()?);
        return (d > 0).then(|| Beat::new(n, d));
    }
    if let Some((whole, frac)) = text.split_once('.') {
        if frac.is_empty() || !frac.chars().all(|c| c.is_ascii_digit()) || frac.len() > 9 {
            return None;
        }
        let w: i64 = if whole.is_empty() { 0 } else { whole.parse().ok()? };
        let scale = 10i64.pow(frac.len() as u32);
        return Some(Beat::new(w * scale + frac.parse::<i64>().ok()?, scale));
    }
    text.parse::<i64>().ok().map(Beat::from_integer)
}

fn parse_key(text: &str) -> Option<Key> {
    let mut parts = text.split_whitespace();
    let tonic = parts.next()?;
    let mut cur = Cursor { text: tonic, pos: 0 };
    let pc = cur.note_name().ok()?;
    if !cur.rest().is_empty() {
        return None;
    }
    let mode = match parts.next().map(|m| m.to_ascii_lowercase()).as_deref() {
        None | Some("major") | Some("maj") => Mode::Major,
        Some("minor") | Some("min") => Mode::Minor,
        _ => return None,
    };
    Some(Key::new(pc, mode))
}

pub fn parse_leadsheet(text: &str) -> Result<LeadSheet, LeadSheetError> {
    let mut title = String::new();
    let mut key = None;
    let mut time_signature = (4u8, 4u8);
    let mut bars = 0u32;
    let mut chords: Vec<ChordEvent> = Vec::new();
    let mut melody: Option<Vec<NoteEvent>> = None;

    let err = |line: usize, message: String| LeadSheetError { line, message };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        // '#' doubles as a sharp sign, so only whole-line comments exist.
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if let Some(melody_notes) = melody.as_mut() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(err(line_no, format!("melody line needs `bar.beat pitch duration [velocity]`: {line:?}")));
            }
            let (bar_text, beat_text) = fields[0]
                .split_once('.')
                .ok_or_else(|| err(line_no, format!("bad position {:?}", fields[0])))?;
            let bar: u32 = bar_text.parse().map_err(|_| err(line_no, format!("bad bar {bar_text:?}")))?;
            let beat = parse_beat(beat_text).ok_or_else(|| err(line_no, format!("bad beat {beat_text:?}")))?;
            let pitch: u8 = fields[1].parse().map_err(|_| err(line_no, format!("bad pitch {:?}", fields[1])))?;
            let duration = parse_beat(fields[2]).ok_or_else(|| err(line_no, format!("bad duration {:?}", fields[2])))?;
            let velocity: u8 = match fields.get(3) {
                Some(v) => v.parse().map_err(|_| err(line_no, format!("bad velocity {v:?}")))?,
                None => MELODY_VELOCITY,
            };
            let onset = TimeSignature::new(0, time_signature.0, time_signature.1).bar_beats()
                * Beat::from_integer(bar as i64)
                + beat;
            let note = NoteEvent::new(pitch, onset, duration, velocity).map_err(|e| err(line_no, e.to_string()))?;
            melody_notes.push(note);
            continue;
        }
        if line.starts_with('|') {
            let beat_len = Beat::new(4, time_signature.1 as i64);
            for cell in line.split('|').map(str::trim).filter(|c| !c.is_empty()) {
                let tokens: Vec<&str> = cell.split_whitespace().collect();
                if tokens.len() > time_signature.0 as usize {
                    return Err(err(
                        line_no,
                        format!("bar {bars} has {} beats, meter allows {}", tokens.len(), time_signature.0),
                    ));
                }
                for (i, token) in tokens.iter().enumerate() {
                    if *token == "." {
                        continue;
                    }
                    let chord = parse_chord(token).map_err(|e| err(line_no, e.to_string()))?;
                    chords.push(ChordEvent { bar: bars, beat: beat_len * Beat::from_integer(i as i64), chord });
                }
                bars += 1;
            }
            continue;
        }
        if line.eq_ignore_ascii_case("melody:") {
            melody = Some(Vec::new());
            continue;
        }
        let (field, value) = line
            .split_once(':')
            .ok_or_else(|| err(line_no, format!("unrecognized line {line:?}")))?;
        let value = value.trim();
        match field.trim().to_ascii_lowercase().as_str() {
            "title" => title = value.to_string(),
            "key" => key = Some(parse_key(value).ok_or_else(|| err(line_no, format!("bad key {value:?}")))?),
            "time" => {
                let parsed = value
                    .split_once('/')
                    .and_then(|(n, d)| Some((n.trim().parse::<u8>().ok()?, d.trim().parse::<u8>().ok()?)))
                    .filter(|(n, d)| TimeSignature::is_supported(*n, *d));
                time_signature = parsed.ok_or_else(|| err(line_no, format!("bad time signature {value:?}")))?;
                if bars > 0 {
                    return Err(err(line_no, "time signature must precede the bars".into()));
                }
            }
            other => return Err(err(line_no, format!("unknown header field {other:?}"))),
        }
    }

    if chords.is_empty() {
        return Err(err(0, "lead sheet has no chords".into()));
    }
    if let Some(m) = melody.as_mut() {
        crate::midi_io::sort_notes(m);
    }
    Ok(LeadSheet { title, key, time_signature, bars, chords, melody })
}

/// One Original excerpt cut from a lead sheet.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalSegment {
    pub start_bar: u32,
    /// Melody plus block chords, re-based to the window start.
    pub score: MidiScore,
    /// Chords sounding in the window, bars re-based; a chord carried in from
    /// before the window appears at bar 0 beat 0.
    pub chords: Vec<ChordEvent>,
    /// False when the sheet has no melody and the segment is chords only.
    pub has_melody: bool,
}

/// Windows of `window` bars every `hop` bars; only full windows are kept.
pub fn original_segments(sheet: &LeadSheet, window: u32, hop: u32) -> Vec<OriginalSegment> {
    let (window, hop) = (window.max(1), hop.max(1));
    let bar_len = sheet.bar_beats();
    let mut out = Vec::new();
    let mut start = 0u32;
    while start + window <= sheet.bars {
        let from = bar_len * Beat::from_integer(start as i64);
        let to = bar_len * Beat::from_integer((start + window) as i64);

        let mut chords: Vec<ChordEvent> = Vec::new();
        if let Some(carry) = sheet.chord_at(from) {
            chords.push(ChordEvent { bar: 0, beat: Beat::zero(), chord: carry.chord.clone() });
        }
        for c in sheet.chords.iter().filter(|c| c.bar >= start && c.bar < start + window) {
            let event = ChordEvent { bar: c.bar - start, beat: c.beat, chord: c.chord.clone() };
            match chords.last_mut() {
                Some(last) if last.bar == event.bar && last.beat == event.beat => *last = event,
                _ => chords.push(event),
            }
        }

        let mut notes = Vec::new();
        for bar in 0..window {
            let bar_start = bar_len * Beat::from_integer(bar as i64);
            let bar_end = bar_start + bar_len;
            // Chord spans within this bar, re-articulated at the barline.
            let mut spans: Vec<(Beat, &ChordSymbol)> = Vec::new();
            if let Some(c) = chords.iter().take_while(|c| c.bar <= bar && (c.bar < bar || c.beat.is_zero())).last() {
                spans.push((bar_start, &c.chord));
            }
            for c in chords.iter().filter(|c| c.bar == bar && !c.beat.is_zero()) {
                spans.push((bar_start + c.beat, &c.chord));
            }
            for (i, (onset, chord)) in spans.iter().enumerate() {
                let end = spans.get(i + 1).map_or(bar_end, |next| next.0);
                for pitch in chord.voicing() {
                    notes.push(NoteEvent { pitch, onset: *onset, duration: end - *onset, velocity: CHORD_VELOCITY });
                }
            }
        }
        if let Some(melody) = &sheet.melody {
            notes.extend(
                melody
                    .iter()
                    .filter(|n| n.onset >= from && n.onset < to)
                    .map(|n| NoteEvent { onset: n.onset - from, ..*n }),
            );
        }
        let score = MidiScore::with_context(
            notes,
            Vec::new(),
            vec![TimeSignature::new(0, sheet.time_signature.0, sheet.time_signature.1)],
            crate::midi_io::DEFAULT_RESOLUTION,
        );
        out.push(OriginalSegment { start_bar: start, score, chords, has_melody: sheet.melody.is_some() });
        start += hop;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chord(text: &str) -> ChordSymbol {
        parse_chord(text).unwrap()
    }

    #[test]
    fn parses_grammar_examples() {
        let c = chord("Cmaj7");
        assert_eq!((c.root, c.quality, c.bass), (0, Quality::Maj7, None));
        let c = chord("F#m7b5");
        assert_eq!((c.root, c.quality), (6, Quality::Min7b5));
        let c = chord("Bb7/D");
        assert_eq!((c.root, c.quality, c.bass), (10, Quality::Dom7, Some(2)));
    }

    #[test]
    fn parses_extensions_and_aliases() {
        let c = chord("C7(b9,#11)");
        assert_eq!(c.extensions, [Extension::Flat9, Extension::Sharp11].into_iter().collect());
        assert_eq!(chord("C7b9#11"), c);
        assert_eq!(chord("G9"), ChordSymbol::new(7, Quality::Dom7).with_extension(Extension::Nine));
        assert_eq!(chord("D-7").quality, Quality::Min7);
        assert_eq!(chord("Ebø").quality, Quality::Min7b5);
        assert_eq!(chord("Ao7").quality, Quality::Dim7);
        assert_eq!(chord("E").quality, Quality::Maj);
        assert_eq!(chord("Cm6").quality, Quality::Min6);
        assert_eq!(chord("C6").quality, Quality::Maj6);
    }

    #[test]
    fn reports_first_bad_character() {
        let e = parse_chord("Cmaj7x").unwrap_err();
        assert_eq!(e.position, 5);
        assert_eq!(parse_chord("H7").unwrap_err().position, 0);
        assert_eq!(parse_chord("C7/").unwrap_err().position, 3);
        assert!(parse_chord("C7(b9").is_err());
    }

    #[test]
    fn format_then_parse_is_identity() {
        for root in 0..12 {
            for q in Quality::ALL {
                let c = ChordSymbol::new(root, q);
                assert_eq!(chord(&c.to_string()), c, "{c}");
                let c = c.with_extension(Extension::Thirteen).with_bass((root + 7) % 12);
                assert_eq!(chord(&c.to_string()), c, "{c}");
            }
        }
    }

    #[test]
    fn c_major_template() {
        let t = chord_template(&chord("C"));
        let w = 1.0 / 3f64.sqrt();
        for pc in 0..12 {
            let expected = if [0, 4, 7].contains(&pc) { w } else { 0.0 };
            assert!((t.weights[pc] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn a_minor7_pitch_classes() {
        assert_eq!(chord("Am7").pitch_classes(), vec![0, 4, 7, 9]);
    }

    #[test]
    fn dominant_ninth_template() {
        let c = ChordSymbol::new(0, Quality::Dom7).with_extension(Extension::Nine);
        let t = chord_template(&c);
        assert_eq!(c.pitch_classes(), vec![0, 2, 4, 7, 10]);
        assert!((t.norm() - 1.0).abs() < 1e-12);
        for pc in [0, 2, 4, 7, 10] {
            assert!((t.weights[pc] - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn templates_rotate_with_transposition() {
        for q in Quality::ALL {
            let c = ChordSymbol::new(2, q).with_extension(Extension::Flat9).with_bass(9);
            let base = chord_template(&c);
            for t in 0..12 {
                assert_eq!(chord_template(&c.transposed(t)), base.rotated(t));
            }
        }
    }

    const SHEET: &str = "title: Test Tune
key: Eb major
time: 4/4
| Cmaj7 . A7 . | Dm7 . . . |
| G7 . . . |
| Cmaj7 |
melody:
0.0 72 1
0.1.5 74 1/2 100
3.3 60 1
";

    #[test]
    fn parses_leadsheet_text() {
        let s = parse_leadsheet(SHEET).unwrap();
        assert_eq!(s.title, "Test Tune");
        assert_eq!(s.key, Some(Key::new(3, Mode::Major)));
        assert_eq!(s.bars, 4);
        assert_eq!(s.chords.len(), 5);
        assert_eq!(s.chords[1].beat, Beat::from_integer(2));
        let melody = s.melody.as_ref().unwrap();
        assert_eq!(melody[1].onset, Beat::new(3, 2));
        assert_eq!(melody[1].velocity, 100);
        assert_eq!(melody[2].onset, Beat::from_integer(15));
        assert_eq!(parse_leadsheet(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn leadsheet_errors_name_the_line() {
        let e = parse_leadsheet("title: x\n| C Xyz |\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(parse_leadsheet("title: x\n").is_err());
        assert_eq!(parse_leadsheet("time: 4/4\n| C . . . . |").unwrap_err().line, 2);
    }

    fn sheet_with_bars(bars: u32) -> LeadSheet {
        let mut text = String::from("time: 4/4\n");
        for i in 0..bars {
            text += if i % 2 == 0 { "| C . . . |\n" } else { "| F7 . . . |\n" };
        }
        parse_leadsheet(&text).unwrap()
    }

    #[test]
    fn segment_tiling() {
        let starts = |bars, hop| -> Vec<u32> {
            original_segments(&sheet_with_bars(bars), 4, hop).iter().map(|s| s.start_bar).collect()
        };
        assert_eq!(starts(12, 4), vec![0, 4, 8]);
        assert_eq!(starts(4, 4), vec![0]);
        assert_eq!(starts(3, 4), Vec::<u32>::new());
        // Brute force: every start on the hop lattice with start + 4 <= 8.
        let expected: Vec<u32> = (0..8).step_by(2).filter(|s| s + 4 <= 8).collect();
        assert_eq!(starts(8, 2), expected);
        assert_eq!(expected, vec![0, 2, 4]);
    }

    #[test]
    fn segment_realizes_melody_and_block_chords() {
        let s = parse_leadsheet(SHEET).unwrap();
        let segs = original_segments(&s, 4, 4);
        assert_eq!(segs.len(), 1);
        let seg = &segs[0];
        assert!(seg.has_melody);
        // Bar 0: Cmaj7 for 2 beats then A7 for 2 beats.
        let at_zero: Vec<u8> = seg.score.notes.iter().filter(|n| n.onset.is_zero()).map(|n| n.pitch).collect();
        assert_eq!(at_zero, vec![48, 52, 55, 59, 72]);
        let a7: Vec<_> = seg.score.notes.iter().filter(|n| n.onset == Beat::from_integer(2)).collect();
        assert_eq!(a7.len(), 4);
        assert!(a7.iter().all(|n| n.duration == Beat::from_integer(2)));
        // The last bar holds Cmaj7 as whole-bar notes.
        let last: Vec<_> = seg.score.notes.iter().filter(|n| n.onset == Beat::from_integer(12)).collect();
        assert!(last.iter().all(|n| n.duration == Beat::from_integer(4)));
        assert!(seg.score.notes.iter().all(|n| n.velocity == CHORD_VELOCITY || n.pitch >= 60));
    }

    #[test]
    fn segment_carries_chord_into_window() {
        let s = parse_leadsheet("| C . . . | . . . . | F . . . | . . . . |").unwrap();
        let segs = original_segments(&s, 2, 1);
        assert_eq!(segs[1].chords.len(), 2);
        assert_eq!(segs[1].chords[0].chord, chord("C"));
        assert_eq!(segs[1].chords[1].bar, 1);
        assert!(!segs[1].has_melody);
        // Held chord is re-articulated at each barline.
        assert_eq!(segs[1].score.notes.len(), 6);
    }
}
