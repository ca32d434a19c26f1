#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use overpaint_core::leadsheet::parse_chord;
use overpaint_core::midi_io::{write_midi_file, Beat, MidiScore, NoteEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURE_SONGS: [(&str, &str, [&str; 8]); 3] = [
    ("Blue Fixture", "C major", ["Cmaj7", "A7", "Dm7", "G7", "Em7", "A7", "Dm7", "G7"]),
    ("Autumn Test", "F major", ["Fmaj7", "D7", "Gm7", "C7", "Am7", "D7", "Gm7", "C7"]),
    ("Night Sketch", "Bb major", ["Bbmaj7", "G7", "Cm7", "F7", "Dm7", "G7", "Cm7", "F7"]),
];

fn chord_tones(symbol: &str) -> Vec<u8> {
    parse_chord(symbol).unwrap().pitch_classes()
}

fn note(pitch: u8, onset: Beat, duration: Beat, velocity: u8) -> NoteEvent {
    NoteEvent::new(pitch, onset, duration, velocity).unwrap()
}

/// Lead sheet with one chord per bar and a quarter-note chord-tone melody.
pub fn leadsheet_text(title: &str, key: &str, chords: &[&str]) -> String {
    let mut out = format!("title: {title}\nkey: {key}\ntime: 4/4\n");
    for c in chords {
        out += &format!("| {c} . . . |\n");
    }
    out += "melody:\n";
    for (bar, c) in chords.iter().enumerate() {
        let tones = chord_tones(c);
        for beat in 0..4 {
            let pitch = 72 + tones[beat % tones.len()];
            out += &format!("{bar}.{beat} {pitch} 1\n");
        }
    }
    out
}

/// Jazz-ish rendition: comping chords in the left hand, eighth-note chord-tone
/// lines in the right, with small timing and velocity jitter.
pub fn performance(chords: &[&str], seed: u64) -> MidiScore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut notes = Vec::new();
    let jitter = |rng: &mut ChaCha8Rng, at: Beat| (at + Beat::new(rng.gen_range(-8..=8), 480)).max(Beat::from_integer(0));
    for (bar, c) in chords.iter().enumerate() {
        let tones = chord_tones(c);
        let start = Beat::from_integer(4 * bar as i64);
        for half in 0..2 {
            let at = jitter(&mut rng, start + Beat::from_integer(2 * half));
            for &pc in &tones {
                notes.push(note(48 + pc, at, Beat::new(3, 2), rng.gen_range(55..75)));
            }
        }
        for eighth in 0..8 {
            let pc = tones[rng.gen_range(0..tones.len())];
            let at = jitter(&mut rng, start + Beat::new(eighth, 2));
            notes.push(note(72 + pc, at, Beat::new(1, 2), rng.gen_range(70..105)));
        }
    }
    MidiScore::new(notes)
}

/// Three songs of eight bars; each yields two four-bar windows.
pub fn write_fixture(root: &Path) -> (PathBuf, PathBuf) {
    let perf = root.join("performances");
    let sheets = root.join("leadsheets");
    std::fs::create_dir_all(&perf).unwrap();
    std::fs::create_dir_all(&sheets).unwrap();
    for (i, (title, key, chords)) in FIXTURE_SONGS.iter().enumerate() {
        std::fs::write(sheets.join(format!("{title}.txt")), leadsheet_text(title, key, chords)).unwrap();
        write_midi_file(&perf.join(format!("{title}.mid")), &performance(chords, 100 + i as u64)).unwrap();
    }
    (perf, sheets)
}

pub fn overpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_overpaint"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn overpaint")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = overpaint(args);
    assert!(
        out.status.success(),
        "overpaint {:?} exited {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}
