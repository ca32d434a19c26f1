//! Score model and Standard MIDI File reading/writing.
//!
//! Every musical payload in the toolkit is a [`MidiScore`]: a flat, sorted
//! list of [`NoteEvent`]s timed in quarter-note beats (exact rationals), plus
//! the tempo map and time-signature list needed to convert between beats,
//! bars and seconds. Channels and tracks are merged on load since the corpus
//! is solo piano.

use std::collections::{BTreeMap, HashMap, VecDeque};

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

/// Time in quarter-note beats.
pub type Beat = Ratio<i64>;

pub const DEFAULT_BPM: f64 = 120.0;
pub const MIN_BPM: f64 = 20.0;
pub const MAX_BPM: f64 = 320.0;
pub const DEFAULT_RESOLUTION: u16 = 480;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("malformed MIDI file: {0}")]
    Malformed(String),
    #[error("unsupported SMF format 2 (sequential tracks)")]
    UnsupportedFormat,
    #[error("unsupported timing: SMPTE timecode division")]
    UnsupportedTiming,
    #[error("invalid note: {0}")]
    InvalidNote(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One sounding note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: Beat,
    pub duration: Beat,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: Beat, duration: Beat, velocity: u8) -> Result<Self, MidiError> {
        let note = NoteEvent { pitch, onset, duration, velocity };
        note.validate()?;
        Ok(note)
    }

    pub fn validate(&self) -> Result<(), MidiError> {
        if self.pitch > 127 {
            return Err(MidiError::InvalidNote(format!("pitch {} out of range", self.pitch)));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(MidiError::InvalidNote(format!("velocity {} out of range", self.velocity)));
        }
        if self.duration <= Beat::zero() {
            return Err(MidiError::InvalidNote(format!("non-positive duration {}", self.duration)));
        }
        if self.onset < Beat::zero() {
            return Err(MidiError::InvalidNote(format!("negative onset {}", self.onset)));
        }
        Ok(())
    }

    pub fn end(&self) -> Beat {
        self.onset + self.duration
    }
}

/// Tempo stored as microseconds per quarter note, the unit SMF uses, so that
/// tempi survive a write/read cycle exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tempo {
    micros_per_quarter: u32,
}

impl Tempo {
    /// Clamps to the supported 20–320 BPM range.
    pub fn from_bpm(bpm: f64) -> Self {
        let bpm = if bpm.is_finite() { bpm.clamp(MIN_BPM, MAX_BPM) } else { DEFAULT_BPM };
        Tempo { micros_per_quarter: (60_000_000.0 / bpm).round() as u32 }
    }

    pub fn from_micros_per_quarter(micros: u32) -> Self {
        let min = (60_000_000.0 / MAX_BPM).ceil() as u32;
        let max = (60_000_000.0 / MIN_BPM).floor() as u32;
        Tempo { micros_per_quarter: micros.clamp(min, max) }
    }

    pub fn micros_per_quarter(&self) -> u32 {
        self.micros_per_quarter
    }

    pub fn bpm(&self) -> f64 {
        60_000_000.0 / self.micros_per_quarter as f64
    }

    pub fn seconds_per_beat(&self) -> f64 {
        self.micros_per_quarter as f64 / 1_000_000.0
    }
}

impl Default for Tempo {
    fn default() -> Self {
        Tempo::from_bpm(DEFAULT_BPM)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TempoChange {
    pub beat: Beat,
    pub tempo: Tempo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeSignature {
    pub bar: u32,
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub const SUPPORTED_DENOMINATORS: [u8; 5] = [1, 2, 4, 8, 16];

    pub fn new(bar: u32, numerator: u8, denominator: u8) -> Self {
        TimeSignature { bar, numerator, denominator }
    }

    pub fn is_supported(numerator: u8, denominator: u8) -> bool {
        (1..=12).contains(&numerator) && Self::SUPPORTED_DENOMINATORS.contains(&denominator)
    }

    /// Bar length in quarter-note beats.
    pub fn bar_beats(&self) -> Beat {
        Beat::new(4 * self.numerator as i64, self.denominator as i64)
    }
}

/// A timed collection of notes with tempo and meter context.
///
/// Invariants maintained by every constructor and operation in this module:
/// notes sorted by `(onset, pitch)`, tempo map and time signatures sorted with
/// unique positions, and a tempo at beat 0 and a time signature at bar 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiScore {
    pub notes: Vec<NoteEvent>,
    pub tempo_map: Vec<TempoChange>,
    pub time_signatures: Vec<TimeSignature>,
    pub resolution: u16,
}

impl Default for MidiScore {
    fn default() -> Self {
        MidiScore::new(Vec::new())
    }
}

impl MidiScore {
    /// A score at 120 BPM, 4/4 and the default resolution.
    pub fn new(notes: Vec<NoteEvent>) -> Self {
        let mut score = MidiScore {
            notes,
            tempo_map: Vec::new(),
            time_signatures: Vec::new(),
            resolution: DEFAULT_RESOLUTION,
        };
        score.normalize();
        score
    }

    pub fn with_context(
        notes: Vec<NoteEvent>,
        tempo_map: Vec<TempoChange>,
        time_signatures: Vec<TimeSignature>,
        resolution: u16,
    ) -> Self {
        let mut score = MidiScore { notes, tempo_map, time_signatures, resolution: resolution.max(1) };
        score.normalize();
        score
    }

    /// Restores the ordering/default invariants after direct field edits.
    pub fn normalize(&mut self) {
        sort_notes(&mut self.notes);

        // Stable sort then keep the last entry per position.
        self.tempo_map.sort_by(|a, b| a.beat.cmp(&b.beat));
        let mut tempi: Vec<TempoChange> = Vec::with_capacity(self.tempo_map.len());
        for change in self.tempo_map.drain(..) {
            match tempi.last_mut() {
                Some(last) if last.beat == change.beat => *last = change,
                _ => tempi.push(change),
            }
        }
        if tempi.first().map_or(true, |t| t.beat != Beat::zero()) {
            tempi.insert(0, TempoChange { beat: Beat::zero(), tempo: Tempo::default() });
        }
        self.tempo_map = tempi;

        self.time_signatures.sort_by_key(|t| t.bar);
        let mut sigs: Vec<TimeSignature> = Vec::with_capacity(self.time_signatures.len());
        for sig in self.time_signatures.drain(..) {
            match sigs.last_mut() {
                Some(last) if last.bar == sig.bar => *last = sig,
                _ => sigs.push(sig),
            }
        }
        if sigs.first().map_or(true, |t| t.bar != 0) {
            sigs.insert(0, TimeSignature::new(0, 4, 4));
        }
        self.time_signatures = sigs;
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Latest note end, or 0 for an empty score.
    pub fn end_beat(&self) -> Beat {
        self.notes.iter().map(NoteEvent::end).max().unwrap_or_else(Beat::zero)
    }

    pub fn time_signature_at_bar(&self, bar: u32) -> TimeSignature {
        let idx = self.time_signatures.partition_point(|t| t.bar <= bar);
        self.time_signatures[idx.saturating_sub(1)]
    }

    pub fn bar_length(&self, bar: u32) -> Beat {
        self.time_signature_at_bar(bar).bar_beats()
    }

    pub fn bar_start(&self, bar: u32) -> Beat {
        let mut start = Beat::zero();
        for (i, sig) in self.time_signatures.iter().enumerate() {
            if sig.bar >= bar {
                break;
            }
            let until = self.time_signatures.get(i + 1).map_or(bar, |next| next.bar.min(bar));
            start += sig.bar_beats() * Beat::from_integer((until - sig.bar) as i64);
        }
        start
    }

    /// Bar index containing `beat` and that bar's start.
    pub fn bar_at(&self, beat: Beat) -> (u32, Beat) {
        let mut start = Beat::zero();
        for (i, sig) in self.time_signatures.iter().enumerate() {
            let len = sig.bar_beats();
            let span_end = self.time_signatures.get(i + 1).map(|next| {
                start + len * Beat::from_integer((next.bar - sig.bar) as i64)
            });
            match span_end {
                Some(end) if beat >= end => start = end,
                _ => {
                    let bars = ((beat - start) / len).floor().to_integer().max(0);
                    return (sig.bar + bars as u32, start + len * Beat::from_integer(bars));
                }
            }
        }
        unreachable!("time signature list is never empty")
    }

    pub fn tempo_at(&self, beat: Beat) -> Tempo {
        let idx = self.tempo_map.partition_point(|t| t.beat <= beat);
        self.tempo_map[idx.saturating_sub(1)].tempo
    }

    pub fn beats_to_seconds(&self, beat: f64) -> f64 {
        let mut seconds = 0.0;
        for (i, change) in self.tempo_map.iter().enumerate() {
            let from = beat_f64(change.beat);
            if beat <= from {
                break;
            }
            let to = self.tempo_map.get(i + 1).map_or(beat, |next| beat_f64(next.beat).min(beat));
            seconds += (to - from) * change.tempo.seconds_per_beat();
        }
        seconds
    }

    pub fn seconds_to_beats(&self, seconds: f64) -> f64 {
        let mut elapsed = 0.0;
        for (i, change) in self.tempo_map.iter().enumerate() {
            let from = beat_f64(change.beat);
            let spb = change.tempo.seconds_per_beat();
            if let Some(next) = self.tempo_map.get(i + 1) {
                let span = (beat_f64(next.beat) - from) * spb;
                if seconds < elapsed + span {
                    return from + (seconds - elapsed) / spb;
                }
                elapsed += span;
            } else {
                return from + (seconds - elapsed) / spb;
            }
        }
        unreachable!("tempo map is never empty")
    }

    /// Shifts every pitch by `semitones`; pitches leaving 0–127 are folded
    /// back by whole octaves. Returns the number of folded notes.
    pub fn transpose_folding(&mut self, semitones: i32) -> usize {
        let mut folded = 0;
        for note in &mut self.notes {
            let mut p = note.pitch as i32 + semitones;
            if !(0..=127).contains(&p) {
                folded += 1;
                while p < 0 {
                    p += 12;
                }
                while p > 127 {
                    p -= 12;
                }
            }
            note.pitch = p as u8;
        }
        sort_notes(&mut self.notes);
        folded
    }
}

pub fn beat_f64(beat: Beat) -> f64 {
    beat.to_f64().unwrap_or(0.0)
}

/// Nearest multiple of `1/denominator` to a real beat position.
pub fn beat_from_f64(value: f64, denominator: i64) -> Beat {
    Beat::new((value * denominator as f64).round() as i64, denominator)
}

pub fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by(|a, b| {
        (a.onset, a.pitch, a.duration, a.velocity).cmp(&(b.onset, b.pitch, b.duration, b.velocity))
    });
}

/// Non-fatal findings while reading a file.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseWarning {
    /// A note-on never released; clipped to the end of the file.
    DanglingNote { pitch: u8, channel: u8, onset_tick: u64 },
}

/// Reads an SMF (format 0 or 1) into a merged single-stream score.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiScore, MidiError> {
    let (score, warnings) = parse_midi_with_warnings(bytes)?;
    for w in &warnings {
        log::warn!("{w:?}");
    }
    Ok(score)
}

pub fn parse_midi_with_warnings(bytes: &[u8]) -> Result<(MidiScore, Vec<ParseWarning>), MidiError> {
    let smf = Smf::parse(bytes).map_err(|e| MidiError::Malformed(e.to_string()))?;
    if smf.header.format == Format::Sequential {
        return Err(MidiError::UnsupportedFormat);
    }
    let resolution = match smf.header.timing {
        Timing::Metrical(tpq) => tpq.as_int(),
        Timing::Timecode(..) => return Err(MidiError::UnsupportedTiming),
    };
    if resolution == 0 {
        return Err(MidiError::Malformed("zero ticks per quarter".into()));
    }

    // Absolute-tick events from every track; the stable sort keeps each
    // track's own event order at equal ticks.
    let mut events: Vec<(u64, TrackEventKind)> = Vec::new();
    let mut end_tick = 0u64;
    for track in &smf.tracks {
        let mut tick = 0u64;
        for event in track {
            tick += event.delta.as_int() as u64;
            events.push((tick, event.kind));
        }
        end_tick = end_tick.max(tick);
    }
    events.sort_by_key(|(tick, _)| *tick);

    let to_beat = |tick: u64| Beat::new(tick as i64, resolution as i64);
    let mut pending: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut notes = Vec::new();
    let mut tempo_map = Vec::new();
    let mut raw_sigs: Vec<(u64, u8, u8)> = Vec::new();

    let close = |notes: &mut Vec<NoteEvent>, pitch: u8, on: u64, vel: u8, off: u64| {
        let ticks = off.saturating_sub(on).max(1);
        notes.push(NoteEvent {
            pitch,
            onset: to_beat(on),
            duration: to_beat(ticks),
            velocity: vel,
        });
    };

    for (tick, kind) in events {
        match kind {
            TrackEventKind::Midi { channel, message } => {
                let channel = channel.as_int();
                match message {
                    MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                        pending.entry((channel, key.as_int())).or_default().push_back((tick, vel.as_int()));
                    }
                    MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                        let pitch = key.as_int();
                        if let Some((on, vel)) =
                            pending.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front)
                        {
                            close(&mut notes, pitch, on, vel, tick);
                        }
                    }
                    _ => {}
                }
            }
            TrackEventKind::Meta(MetaMessage::Tempo(micros)) => {
                tempo_map.push(TempoChange {
                    beat: to_beat(tick),
                    tempo: Tempo::from_micros_per_quarter(micros.as_int()),
                });
            }
            TrackEventKind::Meta(MetaMessage::TimeSignature(num, den_pow, _, _)) => {
                let den = 1u32.checked_shl(den_pow as u32).unwrap_or(0);
                if TimeSignature::is_supported(num, den.min(255) as u8) {
                    raw_sigs.push((tick, num, den as u8));
                } else {
                    log::warn!("ignoring unsupported time signature {num}/{den}");
                }
            }
            _ => {}
        }
    }

    let mut warnings = Vec::new();
    let mut dangling: Vec<_> = pending.into_iter().collect();
    dangling.sort_by_key(|(key, _)| *key);
    for ((channel, pitch), queue) in dangling {
        for (on, vel) in queue {
            warnings.push(ParseWarning::DanglingNote { pitch, channel, onset_tick: on });
            close(&mut notes, pitch, on, vel, end_tick);
        }
    }

    // Convert time-signature ticks to bar indices by walking the meter.
    let mut time_signatures = Vec::new();
    let (mut bar, mut at_tick, mut ticks_per_bar) = (0u32, 0u64, resolution as u64 * 4);
    for (tick, num, den) in raw_sigs {
        if ticks_per_bar > 0 {
            bar += ((tick - at_tick) / ticks_per_bar) as u32;
        }
        at_tick = tick;
        ticks_per_bar = resolution as u64 * 4 * num as u64 / den as u64;
        time_signatures.push(TimeSignature::new(bar, num, den));
    }

    let score = MidiScore::with_context(notes, tempo_map, time_signatures, resolution);
    Ok((score, warnings))
}

/// Serializes a score as a format-0 SMF at the score's resolution.
///
/// Same-pitch notes that overlap in time are spread over distinct channels so
/// that reading the file back pairs every note-off with its own note-on.
pub fn write_midi(score: &MidiScore) -> Vec<u8> {
    let resolution = score.resolution.max(1);
    let to_tick = |beat: Beat| -> u64 {
        (beat * Beat::from_integer(resolution as i64)).round().to_integer().max(0) as u64
    };

    // (tick, priority, event): meta first, then note-offs, then note-ons.
    let mut events: Vec<(u64, u8, TrackEventKind<'static>)> = Vec::new();
    for sig in &score.time_signatures {
        let den_pow = sig.denominator.trailing_zeros() as u8;
        events.push((
            to_tick(score.bar_start(sig.bar)),
            0,
            TrackEventKind::Meta(MetaMessage::TimeSignature(sig.numerator, den_pow, 24, 8)),
        ));
    }
    for change in &score.tempo_map {
        events.push((
            to_tick(change.beat),
            0,
            TrackEventKind::Meta(MetaMessage::Tempo(u24::new(change.tempo.micros_per_quarter()))),
        ));
    }

    const CHANNELS: [u8; 15] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 14, 15];
    // Per (channel, pitch): tick at which the last note on it ends.
    let mut busy_until: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    for note in &score.notes {
        let on = to_tick(note.onset);
        let off = to_tick(note.end()).max(on + 1);
        let channel = CHANNELS
            .iter()
            .copied()
            .find(|ch| busy_until.get(&(*ch, note.pitch)).map_or(true, |&end| end <= on))
            .unwrap_or(0);
        busy_until.insert((channel, note.pitch), off);
        let (ch, key) = (u4::new(channel), u7::new(note.pitch));
        events.push((
            on,
            2,
            TrackEventKind::Midi {
                channel: ch,
                message: MidiMessage::NoteOn { key, vel: u7::new(note.velocity) },
            },
        ));
        events.push((
            off,
            1,
            TrackEventKind::Midi {
                channel: ch,
                message: MidiMessage::NoteOff { key, vel: u7::new(64) },
            },
        ));
    }
    events.sort_by_key(|(tick, priority, _)| (*tick, *priority));

    let mut track: Vec<TrackEvent> = Vec::with_capacity(events.len() + 1);
    let mut last = 0u64;
    for (tick, _, kind) in events {
        track.push(TrackEvent { delta: u28::new((tick - last) as u32), kind });
        last = tick;
    }
    track.push(TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) });

    let smf = Smf {
        header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(resolution))),
        tracks: vec![track],
    };
    let mut out = Vec::new();
    smf.write_std(&mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn read_midi_file(path: &std::path::Path) -> Result<MidiScore, MidiError> {
    parse_midi(&std::fs::read(path)?)
}

pub fn write_midi_file(path: &std::path::Path, score: &MidiScore) -> Result<(), MidiError> {
    std::fs::write(path, write_midi(score))?;
    Ok(())
}

fn snap(beat: Beat, grid: i64) -> Beat {
    Beat::new((beat * Beat::from_integer(grid)).round().to_integer(), grid)
}

/// Snaps onsets and durations to the nearest `1/grid` beat; durations never
/// drop below one grid step.
pub fn quantize(score: &MidiScore, grid: u32) -> MidiScore {
    let grid = grid.max(1) as i64;
    let step = Beat::new(1, grid);
    let mut out = score.clone();
    for note in &mut out.notes {
        note.onset = snap(note.onset, grid).max(Beat::zero());
        note.duration = snap(note.duration, grid).max(step);
    }
    for change in &mut out.tempo_map {
        change.beat = snap(change.beat, grid);
    }
    out.normalize();
    out
}

/// Notes with `start <= onset < end`, re-based so `start` becomes beat 0.
/// Sustained notes are never split; membership is decided by onset alone.
pub fn slice(score: &MidiScore, start: Beat, end: Beat) -> MidiScore {
    let notes = score
        .notes
        .iter()
        .filter(|n| n.onset >= start && n.onset < end)
        .map(|n| NoteEvent { onset: n.onset - start, ..*n })
        .collect();

    let mut tempo_map = vec![TempoChange { beat: Beat::zero(), tempo: score.tempo_at(start) }];
    tempo_map.extend(
        score
            .tempo_map
            .iter()
            .filter(|t| t.beat > start && t.beat < end)
            .map(|t| TempoChange { beat: t.beat - start, tempo: t.tempo }),
    );

    let (first_bar, _) = score.bar_at(start);
    let mut time_signatures = vec![TimeSignature { bar: 0, ..score.time_signature_at_bar(first_bar) }];
    time_signatures.extend(
        score
            .time_signatures
            .iter()
            .filter(|t| t.bar > first_bar && score.bar_start(t.bar) < end)
            .map(|t| TimeSignature { bar: t.bar - first_bar, ..*t }),
    );

    MidiScore::with_context(notes, tempo_map, time_signatures, score.resolution)
}
