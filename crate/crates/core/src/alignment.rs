//! Chord-to-performance alignment and Original/Variation pair extraction.
//!
//! A performance is cut into fixed-hop chroma frames computed from its note
//! events. The lead sheet's chord sequence becomes a left-to-right chain of
//! chord slots, and a Viterbi pass finds the monotone slot assignment that
//! maximizes `alpha * cosine(frame, template) + log transition` summed over
//! frames. Each Original window's beat span is then mapped through the
//! aligned slots to performance time and sliced out as its Variation.

use num_traits::Zero;
use thiserror::Error;

use crate::dataset::{PairRecord, PairStatus, Split};
use crate::leadsheet::{chord_template, original_segments, ChordSymbol, ChromaVector, LeadSheet};
use crate::midi_io::{beat_f64, beat_from_f64, slice, Beat, MidiScore};

pub const DEFAULT_HOP_SECONDS: f64 = 0.1;
pub const DEFAULT_SELF_LOOP: f64 = 0.9;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;
/// Weight of the cosine emission relative to the log transition terms.
pub const EMISSION_SCALE: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("alignment infeasible: {frames} frames for {slots} chord slots")]
    Infeasible { frames: usize, slots: usize },
    #[error("no chord slots to align")]
    NoChords,
    #[error("self-loop probability must lie strictly between 0 and 1, got {0}")]
    BadSelfLoop(f64),
    #[error("frame hop must be positive, got {0}")]
    BadHop(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    /// Unit-norm chroma, or the zero vector for silent frames.
    pub frames: Vec<ChromaVector>,
    /// Seconds per frame.
    pub hop: f64,
    /// Performance time of the start of frame 0, in seconds.
    pub origin: f64,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Same frames at half the hop, each frame repeated twice.
    pub fn doubled(&self) -> FrameSequence {
        FrameSequence {
            frames: self.frames.iter().flat_map(|f| [*f, *f]).collect(),
            hop: self.hop / 2.0,
            origin: self.origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    /// Slot index per frame: starts at 0, steps by 0 or 1.
    pub state_of_frame: Vec<usize>,
    /// Total log-domain path score.
    pub score: f64,
    /// Mean cosine between each non-silent frame and its slot's template.
    pub confidence: f64,
    /// True when the path ends in the last slot.
    pub complete: bool,
}

impl AlignmentPath {
    /// Half-open frame range assigned to `slot`.
    pub fn frame_span(&self, slot: usize) -> (usize, usize) {
        let start = self.state_of_frame.partition_point(|&s| s < slot);
        let end = self.state_of_frame.partition_point(|&s| s <= slot);
        (start, end)
    }
}

/// Symbolic chroma of a performance at a fixed frame hop.
///
/// Frame `k` covers `[origin + k*hop, origin + (k+1)*hop)`, where `origin` is
/// the first note onset. Each sounding note adds `velocity/127` times the
/// fraction of the frame it covers to its pitch class.
pub fn chroma_frames(performance: &MidiScore, hop: f64) -> FrameSequence {
    if performance.notes.is_empty() || hop <= 0.0 {
        return FrameSequence { frames: Vec::new(), hop, origin: 0.0 };
    }
    let spans: Vec<(f64, f64, usize, f64)> = performance
        .notes
        .iter()
        .map(|n| {
            (
                performance.beats_to_seconds(beat_f64(n.onset)),
                performance.beats_to_seconds(beat_f64(n.end())),
                (n.pitch % 12) as usize,
                n.velocity as f64 / 127.0,
            )
        })
        .collect();
    let origin = spans.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let end = spans.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    // Tolerate float noise so an exact multiple of the hop does not spill
    // into one extra frame.
    let count = (((end - origin) / hop) - 1e-9).ceil().max(1.0) as usize;

    let mut raw = vec![[0.0f64; 12]; count];
    for (start, stop, pc, weight) in spans {
        let (a, b) = ((start - origin) / hop, (stop - origin) / hop);
        let first = (a + 1e-9).floor().max(0.0) as usize;
        let last = ((b - 1e-9).ceil() as usize).min(count);
        for (k, frame) in raw.iter_mut().enumerate().take(last).skip(first) {
            let overlap = (b.min(k as f64 + 1.0) - a.max(k as f64)).clamp(0.0, 1.0);
            frame[pc] += weight * overlap;
        }
    }
    let frames = raw.into_iter().map(|w| ChromaVector::new(w).normalized()).collect();
    FrameSequence { frames, hop, origin }
}

/// `alpha * cosine(frame_k, template_j)`, with 0 for silent frames.
pub fn emission_matrix(frames: &FrameSequence, templates: &[ChromaVector], alpha: f64) -> Vec<Vec<f64>> {
    frames
        .frames
        .iter()
        .map(|f| {
            templates
                .iter()
                .map(|t| if f.is_silent() { 0.0 } else { alpha * f.cosine(t) })
                .collect()
        })
        .collect()
}

/// Path scores are accumulated in fixed point (units of 2^-40) so that
/// equal-scoring paths compare equal regardless of summation order.
pub const SCORE_UNITS_PER_ONE: f64 = (1u64 << 40) as f64;

pub fn to_score_units(x: f64) -> i128 {
    (x * SCORE_UNITS_PER_ONE).round() as i128
}

pub fn from_score_units(units: i128) -> f64 {
    units as f64 / SCORE_UNITS_PER_ONE
}

/// Score of an explicit state path: emissions plus log transitions.
pub fn path_score(emissions: &[Vec<f64>], path: &[usize], self_loop: f64) -> f64 {
    let (stay, advance) = (to_score_units(self_loop.ln()), to_score_units((1.0 - self_loop).ln()));
    let mut total = to_score_units(emissions[0][path[0]]);
    for k in 1..path.len() {
        total += if path[k] == path[k - 1] { stay } else { advance };
        total += to_score_units(emissions[k][path[k]]);
    }
    from_score_units(total)
}

pub fn viterbi_align(
    frames: &FrameSequence,
    chords: &[ChromaVector],
    self_loop: f64,
) -> Result<AlignmentPath, AlignError> {
    let emissions = emission_matrix(frames, chords, EMISSION_SCALE);
    let mut path = viterbi_decode(&emissions, chords.len(), self_loop)?;
    let mut total = 0.0;
    let mut voiced = 0usize;
    for (frame, &state) in frames.frames.iter().zip(&path.state_of_frame) {
        if !frame.is_silent() {
            total += frame.cosine(&chords[state]);
            voiced += 1;
        }
    }
    path.confidence = if voiced == 0 { 0.0 } else { total / voiced as f64 };
    Ok(path)
}

/// Viterbi over a precomputed emission matrix `[frame][slot]`.
///
/// The path is forced to start in slot 0 and end in the last slot. Among
/// equal-scoring paths the lexicographically smallest state sequence wins,
/// i.e. every chord is held for as long as possible.
pub fn viterbi_decode(
    emissions: &[Vec<f64>],
    slots: usize,
    self_loop: f64,
) -> Result<AlignmentPath, AlignError> {
    if slots == 0 {
        return Err(AlignError::NoChords);
    }
    if !(self_loop > 0.0 && self_loop < 1.0) {
        return Err(AlignError::BadSelfLoop(self_loop));
    }
    let n = emissions.len();
    if n < slots {
        return Err(AlignError::Infeasible { frames: n, slots });
    }
    let (log_stay, log_advance) = (to_score_units(self_loop.ln()), to_score_units((1.0 - self_loop).ln()));

    // None marks unreachable cells.
    let mut prev: Vec<Option<i128>> = vec![None; slots];
    prev[0] = Some(to_score_units(emissions[0][0]));
    // back[k][j]: true when frame k entered slot j from slot j-1.
    let mut back = vec![vec![false; slots]; n];
    let mut cur: Vec<Option<i128>> = vec![None; slots];
    for k in 1..n {
        for j in 0..slots {
            let stay = prev[j].map(|s| s + log_stay);
            let advance = if j > 0 { prev[j - 1].map(|s| s + log_advance) } else { None };
            let take_advance = match (stay, advance) {
                (_, None) => false,
                (None, Some(_)) => true,
                (Some(s), Some(a)) if a == s => advance_prefix_is_smaller(&back, k - 1, j),
                (Some(s), Some(a)) => a > s,
            };
            back[k][j] = take_advance;
            cur[j] = if take_advance { advance } else { stay }.map(|s| s + to_score_units(emissions[k][j]));
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut state_of_frame = vec![0usize; n];
    let mut state = slots - 1;
    for k in (0..n).rev() {
        state_of_frame[k] = state;
        if k > 0 && back[k][state] {
            state -= 1;
        }
    }
    let score = prev[slots - 1].map_or(f64::NEG_INFINITY, from_score_units);
    Ok(AlignmentPath { state_of_frame, score, confidence: 0.0, complete: true })
}

/// Compares the stored best prefixes ending at `(frame, slot - 1)` and
/// `(frame, slot)`; true when the former is lexicographically smaller.
fn advance_prefix_is_smaller(back: &[Vec<bool>], frame: usize, slot: usize) -> bool {
    let (mut a, mut b) = (slot - 1, slot);
    let (mut first_a, mut first_b) = (a, b);
    let mut k = frame;
    loop {
        if a == b {
            break;
        }
        first_a = a;
        first_b = b;
        if k == 0 {
            break;
        }
        if back[k][a] {
            a -= 1;
        }
        if back[k][b] {
            b -= 1;
        }
        k -= 1;
    }
    first_a < first_b
}

/// A run of identical consecutive chords on the lead sheet, in sheet beats.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordSlot {
    pub chord: ChordSymbol,
    pub start: Beat,
    pub end: Beat,
}

/// The sheet's chord chain with repeated chords merged into one slot; the
/// first slot is stretched back to beat 0.
pub fn chord_slots(sheet: &LeadSheet) -> Vec<ChordSlot> {
    let mut slots: Vec<ChordSlot> = Vec::new();
    for event in &sheet.chords {
        let at = sheet.absolute_beat(event.bar, event.beat);
        match slots.last_mut() {
            Some(last) if last.chord == event.chord => {}
            Some(last) => {
                last.end = at;
                slots.push(ChordSlot { chord: event.chord.clone(), start: at, end: at });
            }
            None => slots.push(ChordSlot { chord: event.chord.clone(), start: Beat::zero(), end: at }),
        }
    }
    if let Some(last) = slots.last_mut() {
        last.end = sheet.total_beats().max(last.start);
    }
    slots
}

/// Fractional frame position of a sheet beat under an alignment.
fn frame_position(slots: &[ChordSlot], path: &AlignmentPath, beat: Beat) -> f64 {
    let idx = slots.iter().position(|s| beat < s.end).unwrap_or(slots.len() - 1);
    let slot = &slots[idx];
    let (f0, f1) = path.frame_span(idx);
    let length = slot.end - slot.start;
    let frac = if length.is_zero() { 0.0 } else { beat_f64((beat - slot.start) / length).clamp(0.0, 1.0) };
    f0 as f64 + frac * (f1 - f0) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub window: u32,
    pub hop_seconds: f64,
    pub self_loop: f64,
    pub min_confidence: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            window: 4,
            hop_seconds: DEFAULT_HOP_SECONDS,
            self_loop: DEFAULT_SELF_LOOP,
            min_confidence: DEFAULT_MIN_CONFIDENCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedWindow {
    pub start_bar: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExtractOutcome {
    pub pairs: Vec<PairRecord>,
    pub dropped: Vec<DroppedWindow>,
    pub path: Option<AlignmentPath>,
}

pub fn base_pair_id(song_id: &str, start_bar: u32) -> String {
    format!("{song_id}_b{start_bar:03}")
}

/// Aligns a performance against its lead sheet and cuts one Variation per
/// non-overlapping `window`-bar Original. Pairs whose window confidence is
/// below `min_confidence` are kept with status `needs_review`.
pub fn extract_pairs(
    song_id: &str,
    performance: &MidiScore,
    sheet: &LeadSheet,
    config: &ExtractConfig,
) -> Result<ExtractOutcome, AlignError> {
    if config.hop_seconds <= 0.0 {
        return Err(AlignError::BadHop(config.hop_seconds));
    }
    let slots = chord_slots(sheet);
    if slots.is_empty() {
        return Err(AlignError::NoChords);
    }
    let templates: Vec<ChromaVector> = slots.iter().map(|s| chord_template(&s.chord)).collect();
    let frames = chroma_frames(performance, config.hop_seconds);
    let path = viterbi_align(&frames, &templates, config.self_loop)?;

    let mut outcome = ExtractOutcome::default();
    let bar_len = sheet.bar_beats();
    for segment in original_segments(sheet, config.window, config.window) {
        let from = bar_len * Beat::from_integer(segment.start_bar as i64);
        let to = bar_len * Beat::from_integer((segment.start_bar + config.window) as i64);
        let (p0, p1) = (frame_position(&slots, &path, from), frame_position(&slots, &path, to));

        let (k0, k1) = (p0.round() as usize, (p1.round() as usize).min(frames.len()));
        let mut total = 0.0;
        let mut voiced = 0usize;
        for k in k0..k1 {
            let frame = &frames.frames[k];
            if !frame.is_silent() {
                total += frame.cosine(&templates[path.state_of_frame[k]]);
                voiced += 1;
            }
        }
        let confidence = if voiced == 0 { 0.0 } else { total / voiced as f64 };

        let to_beats = |pos: f64| {
            let seconds = frames.origin + pos * frames.hop;
            beat_from_f64(performance.seconds_to_beats(seconds), performance.resolution as i64)
        };
        let (start, end) = (to_beats(p0), to_beats(p1));
        let variation = slice(performance, start, end);
        if variation.notes.is_empty() {
            let reason = format!("empty variation slice for beats {start}..{end}");
            log::info!("{song_id}: dropping window at bar {}: {reason}", segment.start_bar);
            outcome.dropped.push(DroppedWindow { start_bar: segment.start_bar, reason });
            continue;
        }
        let status = if confidence >= config.min_confidence { PairStatus::Accepted } else { PairStatus::NeedsReview };
        outcome.pairs.push(PairRecord {
            pair_id: base_pair_id(song_id, segment.start_bar),
            song_id: song_id.to_string(),
            window_start_bar: segment.start_bar,
            original: segment.score,
            variation,
            transposition: 0,
            confidence,
            status,
            split: Split::Unassigned,
            key: sheet.key,
        });
    }
    outcome.path = Some(path);
    Ok(outcome)
}
