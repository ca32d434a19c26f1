//! Symbolic feature metrics (PCE, PR, polyphony, NoP, PS) and corpus
//! level mean ± std reports.

use std::collections::BTreeMap;
use std::io::Write;

use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

use crate::leadsheet::{Key, Mode};
use crate::midi_io::{Beat, MidiScore};
use crate::tokenizer::GRID;

pub const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
pub const NATURAL_MINOR_SCALE: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("score has no notes")]
    EmptyScore,
    #[error("corpus {0:?} has no scorable items")]
    EmptyCorpus(String),
    #[error("report CSV: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    NoteCount,
    Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Pce,
    Pr,
    Poly,
    Nop,
    Ps,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Pce, Metric::Pr, Metric::Poly, Metric::Nop, Metric::Ps];

    pub fn abbrev(self) -> &'static str {
        match self {
            Metric::Pce => "PCE",
            Metric::Pr => "PR",
            Metric::Poly => "P",
            Metric::Nop => "NoP",
            Metric::Ps => "PS",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Pce => "Pitch Class Entropy",
            Metric::Pr => "Pitch Range",
            Metric::Poly => "Polyphony",
            Metric::Nop => "Number of Pitches",
            Metric::Ps => "Pitch in Scale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub pce: f64,
    pub pr: u32,
    pub poly: f64,
    pub nop: u32,
    pub ps: f64,
}

impl FeatureVector {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Pce => self.pce,
            Metric::Pr => self.pr as f64,
            Metric::Poly => self.poly,
            Metric::Nop => self.nop as f64,
            Metric::Ps => self.ps,
        }
    }
}

fn non_empty(score: &MidiScore) -> Result<(), MetricError> {
    if score.notes.is_empty() {
        Err(MetricError::EmptyScore)
    } else {
        Ok(())
    }
}

pub fn pitch_class_entropy(score: &MidiScore) -> Result<f64, MetricError> {
    pitch_class_entropy_weighted(score, Weighting::NoteCount)
}

/// Entropy in bits of the pitch-class histogram.
///
/// Evaluated as Σ (m·w/W)·log2(W/w) over the distinct bin weights w (with
/// multiplicity m), so the result depends only on the multiset of weights.
pub fn pitch_class_entropy_weighted(score: &MidiScore, weighting: Weighting) -> Result<f64, MetricError> {
    non_empty(score)?;
    let mut hist = [Beat::zero(); 12];
    for note in &score.notes {
        hist[(note.pitch % 12) as usize] += match weighting {
            Weighting::NoteCount => Beat::from_integer(1),
            Weighting::Duration => note.duration,
        };
    }
    let total: Beat = hist.iter().copied().sum();
    if total.is_zero() {
        return Ok(0.0);
    }
    let mut groups: BTreeMap<Beat, i64> = BTreeMap::new();
    for w in hist.into_iter().filter(|w| !w.is_zero()) {
        *groups.entry(w).or_default() += 1;
    }
    let mut h = 0.0;
    for (w, m) in groups {
        let share = (w * Beat::from_integer(m) / total).to_f64().unwrap_or(0.0);
        let inv = (total / w).to_f64().unwrap_or(1.0);
        h += share * inv.log2();
    }
    Ok(h)
}

pub fn pitch_range(score: &MidiScore) -> Result<u32, MetricError> {
    non_empty(score)?;
    let max = score.notes.iter().map(|n| n.pitch).max().unwrap_or(0);
    let min = score.notes.iter().map(|n| n.pitch).min().unwrap_or(0);
    Ok((max - min) as u32)
}

/// Grid steps `[start, end)` on which a note sounds; every note covers at
/// least one step.
pub fn note_steps(onset: Beat, duration: Beat) -> (i64, i64) {
    let g = Beat::from_integer(GRID);
    let start = (onset * g).round().to_integer();
    let end = ((onset + duration) * g).round().to_integer().max(start + 1);
    (start, end)
}

/// Mean number of sounding notes over the 1/12-beat steps where at least
/// one note sounds.
pub fn polyphony(score: &MidiScore) -> Result<f64, MetricError> {
    non_empty(score)?;
    let mut spans: Vec<(i64, i64)> = score.notes.iter().map(|n| note_steps(n.onset, n.duration)).collect();
    let sounding: i64 = spans.iter().map(|(s, e)| e - s).sum();
    spans.sort_unstable();
    let mut occupied = 0;
    let mut cur: Option<(i64, i64)> = None;
    for (s, e) in spans {
        cur = match cur {
            Some((cs, ce)) if s <= ce => Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                occupied += ce - cs;
                Some((s, e))
            }
            None => Some((s, e)),
        };
    }
    if let Some((cs, ce)) = cur {
        occupied += ce - cs;
    }
    Ok(sounding as f64 / occupied as f64)
}

pub fn n_pitches(score: &MidiScore) -> Result<u32, MetricError> {
    non_empty(score)?;
    let mut seen = [false; 128];
    for note in &score.notes {
        seen[note.pitch as usize & 127] = true;
    }
    Ok(seen.iter().filter(|&&s| s).count() as u32)
}

pub fn scale_mask(key: Key) -> [bool; 12] {
    let steps = match key.mode {
        Mode::Major => MAJOR_SCALE,
        Mode::Minor => NATURAL_MINOR_SCALE,
    };
    let mut mask = [false; 12];
    for s in steps {
        mask[((key.tonic + s) % 12) as usize] = true;
    }
    mask
}

pub fn all_keys() -> impl Iterator<Item = Key> {
    (0..12u8).flat_map(|t| [Key::new(t, Mode::Major), Key::new(t, Mode::Minor)])
}

fn in_scale_count(pcs: &[usize; 12], key: Key) -> usize {
    let mask = scale_mask(key);
    (0..12).filter(|&pc| mask[pc]).map(|pc| pcs[pc]).sum()
}

/// Fraction of notes inside the key's diatonic set; without a key, the
/// best fraction over all 24 major and natural-minor keys.
pub fn pitch_in_scale(score: &MidiScore, key: Option<Key>) -> Result<f64, MetricError> {
    non_empty(score)?;
    let mut pcs = [0usize; 12];
    for note in &score.notes {
        pcs[(note.pitch % 12) as usize] += 1;
    }
    let hits = match key {
        Some(k) => in_scale_count(&pcs, k),
        None => all_keys().map(|k| in_scale_count(&pcs, k)).max().unwrap_or(0),
    };
    Ok(hits as f64 / score.notes.len() as f64)
}

pub fn features(score: &MidiScore, key: Option<Key>) -> Result<FeatureVector, MetricError> {
    Ok(FeatureVector {
        pce: pitch_class_entropy(score)?,
        pr: pitch_range(score)?,
        poly: polyphony(score)?,
        nop: n_pitches(score)?,
        ps: pitch_in_scale(score, key)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation.
pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { mean: f64::NAN, std: f64::NAN, count: 0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt(), count: values.len() }
}

pub fn format_cell(summary: &Summary) -> String {
    format!("{:.2} ± {:.2}", summary.mean, summary.std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureReport {
    pub label: String,
    pub summaries: [Summary; 5],
    /// Empty scores left out of the statistics.
    pub skipped: usize,
}

impl FeatureReport {
    pub fn get(&self, metric: Metric) -> &Summary {
        &self.summaries[metric as usize]
    }
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Scores every item on up to `threads` workers and reduces in input order.
pub fn score_corpus(items: &[(MidiScore, Option<Key>)], threads: usize) -> Vec<Option<FeatureVector>> {
    let workers = threads.max(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(|(s, k)| features(s, *k).ok()).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|(s, k)| features(s, *k).ok()).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("metric worker panicked")).collect()
    })
}

pub fn report(label: &str, items: &[(MidiScore, Option<Key>)]) -> Result<FeatureReport, MetricError> {
    report_with_threads(label, items, default_threads())
}

pub fn report_with_threads(
    label: &str,
    items: &[(MidiScore, Option<Key>)],
    threads: usize,
) -> Result<FeatureReport, MetricError> {
    let scored = score_corpus(items, threads);
    let skipped = scored.iter().filter(|f| f.is_none()).count();
    let vectors: Vec<FeatureVector> = scored.into_iter().flatten().collect();
    if vectors.is_empty() {
        return Err(MetricError::EmptyCorpus(label.to_string()));
    }
    let summaries = Metric::ALL.map(|m| summarize(&vectors.iter().map(|v| v.get(m)).collect::<Vec<_>>()));
    Ok(FeatureReport { label: label.to_string(), summaries, skipped })
}

/// Aligned text table: one row per metric, one column per corpus.
pub fn render_table(reports: &[FeatureReport]) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Feature".to_string()];
    header.extend(reports.iter().map(|r| r.label.clone()));
    rows.push(header);
    for metric in Metric::ALL {
        let mut row = vec![format!("{} ({})", metric.title(), metric.abbrev())];
        row.extend(reports.iter().map(|r| format_cell(r.get(metric))));
        rows.push(row);
    }
    let mut count = vec!["Scored (skipped)".to_string()];
    count.extend(reports.iter().map(|r| format!("{} ({})", r.get(Metric::Pce).count, r.skipped)));
    rows.push(count);

    let cols = rows[0].len();
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                let pad = w - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

/// CSV with metrics as rows and corpora as columns; cells hold "mean,std".
pub fn write_report_csv(w: impl Write, reports: &[FeatureReport]) -> Result<(), MetricError> {
    let err = |e: csv::Error| MetricError::Csv(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|r| r.label.clone()));
    out.write_record(&header).map_err(err)?;
    for metric in Metric::ALL {
        let mut row = vec![metric.abbrev().to_string()];
        row.extend(reports.iter().map(|r| {
            let s = r.get(metric);
            format!("{:.6},{:.6}", s.mean, s.std)
        }));
        out.write_record(&row).map_err(err)?;
    }
    out.flush().map_err(|e| MetricError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi_io::NoteEvent;

    fn notes(spec: &[(u8, i64, i64, i64)]) -> MidiScore {
        MidiScore::new(
            spec.iter()
                .map(|&(p, on, dur, den)| NoteEvent::new(p, Beat::new(on, den), Beat::new(dur, den), 80).unwrap())
                .collect(),
        )
    }

    fn seq(pitches: &[u8]) -> MidiScore {
        let spec: Vec<_> = pitches.iter().enumerate().map(|(i, &p)| (p, i as i64, 1, 1)).collect();
        notes(&spec)
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(pitch_class_entropy(&seq(&[60, 60, 72])).unwrap(), 0.0);
        assert_eq!(pitch_class_entropy(&seq(&[60, 60, 64, 67])).unwrap(), 1.5);
        let chromatic: Vec<u8> = (60..72).chain(72..84).collect();
        assert_eq!(pitch_class_entropy(&seq(&chromatic)).unwrap(), 12f64.log2());
        assert_eq!(pitch_class_entropy(&MidiScore::default()), Err(MetricError::EmptyScore));
    }

    #[test]
    fn duration_weighting() {
        let s = notes(&[(60, 0, 3, 1), (62, 3, 1, 1)]);
        let h = pitch_class_entropy_weighted(&s, Weighting::Duration).unwrap();
        let expected = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn range_and_pitch_count() {
        assert_eq!(pitch_range(&seq(&[60, 72, 67])).unwrap(), 12);
        assert_eq!(pitch_range(&seq(&[60])).unwrap(), 0);
        assert_eq!(n_pitches(&seq(&[60, 60, 67])).unwrap(), 2);
        let run: Vec<u8> = (60..73).collect();
        assert_eq!(n_pitches(&seq(&run)).unwrap(), 13);
    }

    #[test]
    fn polyphony_examples() {
        assert_eq!(polyphony(&notes(&[(60, 0, 1, 1), (64, 0, 1, 1)])).unwrap(), 2.0);
        assert_eq!(polyphony(&notes(&[(60, 0, 2, 2), (64, 1, 2, 2)])).unwrap(), 4.0 / 3.0);
        assert_eq!(polyphony(&seq(&[60, 62, 64, 65])).unwrap(), 1.0);
        // Gaps do not count as steps.
        assert_eq!(polyphony(&notes(&[(60, 0, 1, 1), (62, 5, 1, 1)])).unwrap(), 1.0);
    }

    #[test]
    fn scale_fractions() {
        let c = Key::new(0, Mode::Major);
        assert_eq!(pitch_in_scale(&seq(&[60, 62, 64, 65, 67, 69, 71]), Some(c)).unwrap(), 1.0);
        assert_eq!(pitch_in_scale(&seq(&[60, 64, 67, 66]), Some(c)).unwrap(), 0.75);
        assert_eq!(pitch_in_scale(&seq(&[60, 64, 67]), None).unwrap(), 1.0);
        let a_minor = Key::new(9, Mode::Minor);
        assert_eq!(scale_mask(a_minor), scale_mask(c));
    }

    #[test]
    fn report_statistics() {
        let corpus = vec![(seq(&[60, 70]), None), (seq(&[60, 80]), None), (MidiScore::default(), None)];
        let r = report("X", &corpus).unwrap();
        assert_eq!(r.get(Metric::Pr).mean, 15.0);
        assert_eq!(r.get(Metric::Pr).std, 5.0);
        assert_eq!(r.get(Metric::Pr).count, 2);
        assert_eq!(r.skipped, 1);
        assert_eq!(format_cell(r.get(Metric::Pr)), "15.00 ± 5.00");
        let same = vec![(seq(&[60, 64, 67]), None); 4];
        let r = report("Y", &same).unwrap();
        assert!(r.summaries.iter().all(|s| s.std == 0.0));
        assert!(matches!(report("Z", &[]), Err(MetricError::EmptyCorpus(_))));
    }

    #[test]
    fn table_and_csv_shape() {
        let corpus = vec![(seq(&[60, 70]), None)];
        let reports: Vec<_> = ["A", "B", "C", "D"].iter().map(|l| report(l, &corpus).unwrap()).collect();
        let table = render_table(&reports);
        assert_eq!(table.lines().count(), 8);
        assert!(table.lines().next().unwrap().trim_end().ends_with(" D"));
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &reports).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,A,B,C,D\n"));
        assert!(text.contains("PR,\"10.000000,0.000000\""));
    }
}
