//! Brute-force reference implementations and random generators shared by
//! the property suites.
#![allow(dead_code)]

use overpaint_core::alignment::FrameSequence;
use overpaint_core::leadsheet::{ChromaVector, Key, Mode};
use overpaint_core::midi_io::{Beat, MidiScore, NoteEvent, TimeSignature};
use overpaint_core::tokenizer::velocity_center;
use rand::Rng;

/// Grid-quantized score with velocities at bin centers and pitches in 5..=121,
/// so every transposition in -5..=6 stays in range.
pub fn random_score<R: Rng>(rng: &mut R, max_notes: usize) -> MidiScore {
    let n = rng.gen_range(1..=max_notes);
    let bars = rng.gen_range(1..=4i64);
    let mut notes = Vec::with_capacity(n);
    for _ in 0..n {
        let onset = Beat::new(rng.gen_range(0..bars * 48), 12);
        let duration = Beat::new(rng.gen_range(1..=96), 12);
        let velocity = velocity_center(rng.gen_range(0..32));
        notes.push(NoteEvent::new(rng.gen_range(5..=121), onset, duration, velocity).unwrap());
    }
    notes.sort_by_key(|n| (n.onset, n.pitch));
    notes.dedup_by_key(|n| (n.onset, n.pitch));
    let sigs = if rng.gen_bool(0.3) {
        vec![TimeSignature::new(0, 3, 4), TimeSignature::new(2, 4, 4)]
    } else {
        vec![TimeSignature::new(0, 4, 4)]
    };
    MidiScore::with_context(notes, vec![], sigs, 480)
}

pub fn random_key<R: Rng>(rng: &mut R) -> Key {
    Key::new(rng.gen_range(0..12), if rng.gen_bool(0.5) { Mode::Major } else { Mode::Minor })
}

pub fn ref_pce(score: &MidiScore) -> f64 {
    let mut counts = [0u32; 12];
    for n in &score.notes {
        counts[(n.pitch % 12) as usize] += 1;
    }
    let total = score.notes.len() as f64;
    -counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total).map(|h| h * h.log2()).sum::<f64>()
}

pub fn ref_pr(score: &MidiScore) -> u32 {
    let pitches: Vec<u32> = score.notes.iter().map(|n| n.pitch as u32).collect();
    pitches.iter().max().unwrap() - pitches.iter().min().unwrap()
}

/// Visits every 1/12-beat step and counts the notes sounding on it.
pub fn ref_polyphony(score: &MidiScore) -> f64 {
    let step = Beat::new(1, 12);
    let end = score.notes.iter().map(|n| n.onset + n.duration).max().unwrap();
    let (mut occupied, mut sounding) = (0u64, 0u64);
    let mut t = Beat::from_integer(0);
    while t < end {
        let c = score.notes.iter().filter(|n| n.onset <= t && t < n.onset + n.duration).count() as u64;
        if c > 0 {
            occupied += 1;
            sounding += c;
        }
        t += step;
    }
    sounding as f64 / occupied as f64
}

pub fn ref_nop(score: &MidiScore) -> u32 {
    let mut pitches: Vec<u8> = score.notes.iter().map(|n| n.pitch).collect();
    pitches.sort_unstable();
    pitches.dedup();
    pitches.len() as u32
}

fn diatonic(key: Key) -> Vec<u8> {
    let steps: [u8; 7] = match key.mode {
        Mode::Major => [0, 2, 4, 5, 7, 9, 11],
        Mode::Minor => [0, 2, 3, 5, 7, 8, 10],
    };
    steps.iter().map(|s| (key.tonic + s) % 12).collect()
}

pub fn ref_ps(score: &MidiScore, key: Option<Key>) -> f64 {
    let frac = |k: Key| {
        let set = diatonic(k);
        score.notes.iter().filter(|n| set.contains(&(n.pitch % 12))).count() as f64 / score.notes.len() as f64
    };
    match key {
        Some(k) => frac(k),
        None => (0..24).map(|i| frac(Key::new(i / 2, if i % 2 == 0 { Mode::Major } else { Mode::Minor }))).fold(0.0, f64::max),
    }
}

/// Random frames and chord templates; a small palette of repeated and silent
/// frames makes score ties common.
pub fn random_alignment_instance<R: Rng>(rng: &mut R) -> (FrameSequence, Vec<ChromaVector>) {
    let chords = rng.gen_range(1..=4);
    let frames = rng.gen_range(chords..=12);
    let vector = |rng: &mut R| {
        let mut w = [0.0; 12];
        for _ in 0..rng.gen_range(1..=4) {
            w[rng.gen_range(0..12)] = 1.0;
        }
        ChromaVector::new(w).normalized()
    };
    let templates: Vec<ChromaVector> = (0..chords).map(|_| vector(rng)).collect();
    let palette: Vec<ChromaVector> = (0..3).map(|_| vector(rng)).collect();
    let seq = (0..frames)
        .map(|_| match rng.gen_range(0..4) {
            0 => ChromaVector::zero(),
            1 => templates[rng.gen_range(0..chords)],
            2 => palette[rng.gen_range(0..palette.len())],
            _ => {
                let mut w = [0.0; 12];
                w.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
                ChromaVector::new(w).normalized()
            }
        })
        .collect();
    (FrameSequence { frames: seq, hop: 0.1, origin: 0.0 }, templates)
}

fn cosine(a: &ChromaVector, b: &ChromaVector) -> f64 {
    let dot: f64 = (0..12).map(|i| a.weights[i] * b.weights[i]).sum();
    let na = (0..12).map(|i| a.weights[i].powi(2)).sum::<f64>().sqrt();
    let nb = (0..12).map(|i| b.weights[i].powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Every monotone path from the first to the last chord, scored directly.
/// Scores within `1e-9` count as tied and the lexicographically smallest
/// state sequence (longest stays) wins.
pub fn exhaustive_best_path(frames: &FrameSequence, templates: &[ChromaVector], self_loop: f64, scale: f64) -> Vec<usize> {
    let n = frames.frames.len();
    let s = templates.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut path = vec![0usize; n];
    fn walk(
        k: usize,
        path: &mut Vec<usize>,
        s: usize,
        eval: &dyn Fn(&[usize]) -> f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let n = path.len();
        if k == n {
            if path[n - 1] != s - 1 {
                return;
            }
            let score = eval(path);
            let better = match best {
                None => true,
                Some((b, p)) => score > *b + 1e-9 || ((score - *b).abs() <= 1e-9 && path < p),
            };
            if better {
                *best = Some((score, path.clone()));
            }
            return;
        }
        let prev = path[k - 1];
        for next in [prev, prev + 1] {
            if next < s && s - 1 - next <= n - 1 - k {
                path[k] = next;
                walk(k + 1, path, s, eval, best);
            }
        }
    }
    let eval = |p: &[usize]| {
        let mut total = scale * cosine(&frames.frames[0], &templates[p[0]]);
        for k in 1..p.len() {
            total += if p[k] == p[k - 1] { self_loop.ln() } else { (1.0 - self_loop).ln() };
            total += scale * cosine(&frames.frames[k], &templates[p[k]]);
        }
        total
    };
    if n == 1 {
        return vec![0];
    }
    walk(1, &mut path, s, &eval, &mut best);
    best.expect("at least one complete path").1
}
