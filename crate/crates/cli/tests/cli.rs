mod common;

use std::fs;

use common::*;
use overpaint_core::dataset::{load_manifest, save_manifest, PairRecord, PairStatus, Split};
use overpaint_core::midi_io::{Beat, MidiScore, NoteEvent};
use overpaint_core::tokenizer::{TokenCorpus, TokenRecord, Vocabulary};

fn tiny_pair(song: usize, idx: u32) -> PairRecord {
    let n = |p: u8, t: i64| NoteEvent::new(p, Beat::from_integer(t), Beat::new(1, 2), 80).unwrap();
    PairRecord {
        pair_id: format!("s{song}_b{idx:03}"),
        song_id: format!("s{song}"),
        window_start_bar: idx,
        original: MidiScore::new(vec![n(60, 0), n(64, 1), n(67, 2)]),
        variation: MidiScore::new(vec![n(60, 0), n(62, 1), n(64, 1), n(67, 3)]),
        transposition: 0,
        confidence: 0.9,
        status: PairStatus::Accepted,
        split: Split::Unassigned,
        key: None,
    }
}

#[test]
fn extract_pairs_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (perf, sheets) = write_fixture(dir.path());
    let out = dir.path().join("pairs.jsonl");
    let stdout = run_ok(&["extract-pairs", "--performances", s(&perf), "--leadsheets", s(&sheets), "--out", s(&out)]);
    assert!(stdout.contains("accepted 6, needs_review 0, dropped 0"), "{stdout}");
    let pairs = load_manifest(&out).unwrap();
    assert_eq!(pairs.len(), 6);
    assert!(pairs.iter().all(|p| p.key.is_some() && !p.variation.notes.is_empty()));
    assert!(dir.path().join("pairs.review.jsonl").exists());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("pairs.jsonl.run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "extract-pairs");
    assert_eq!(run["input_hashes"].as_object().unwrap().len(), 2);
}

#[test]
fn empty_directories_are_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let out = dir.path().join("pairs.jsonl");
    let stdout = run_ok(&["extract-pairs", "--performances", s(&a), "--leadsheets", s(&b), "--out", s(&out)]);
    assert!(stdout.contains("no input"), "{stdout}");
    assert!(load_manifest(&out).unwrap().is_empty());
}

#[test]
fn corrupted_midi_is_skipped_unless_strict() {
    let dir = tempfile::tempdir().unwrap();
    let (perf, sheets) = write_fixture(dir.path());
    fs::write(perf.join("Broken Song.mid"), b"MThd garbage").unwrap();
    fs::write(sheets.join("Broken Song.txt"), leadsheet_text("Broken Song", "C major", &["C"; 8])).unwrap();
    let out = dir.path().join("pairs.jsonl");
    let args = ["extract-pairs", "--performances", s(&perf), "--leadsheets", s(&sheets), "--out", s(&out)];
    let stdout = run_ok(&args);
    assert!(stdout.contains("Broken Song.mid"), "{stdout}");
    assert!(stdout.contains("accepted 6"), "{stdout}");
    let strict = overpaint(&[&args[..], &["--strict"]].concat());
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn missing_counterparts_only_warn() {
    let dir = tempfile::tempdir().unwrap();
    let (perf, sheets) = write_fixture(dir.path());
    fs::remove_file(sheets.join("Night Sketch.txt")).unwrap();
    let out = dir.path().join("pairs.jsonl");
    let result = overpaint(&["extract-pairs", "--performances", s(&perf), "--leadsheets", s(&sheets), "--out", s(&out)]);
    assert!(result.status.success());
    assert!(String::from_utf8_lossy(&result.stderr).contains("night_sketch"));
    assert_eq!(load_manifest(&out).unwrap().len(), 4);
}

#[test]
fn augment_multiplies_by_twelve_and_keeps_songs_together() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ten.jsonl");
    let pairs: Vec<PairRecord> = (0..10).map(|i| tiny_pair(i % 4, i as u32)).collect();
    save_manifest(&input, &pairs).unwrap();
    let out = dir.path().join("aug.jsonl");
    let stdout = run_ok(&["augment", "--manifest", s(&input), "--out", s(&out), "--seed", "5"]);
    assert!(stdout.contains("10 pairs -> 120 pairs"), "{stdout}");
    let aug = load_manifest(&out).unwrap();
    assert_eq!(aug.len(), 120);
    for p in &aug {
        assert!(aug.iter().filter(|q| q.song_id == p.song_id).all(|q| q.split == p.split));
    }
    let again = overpaint(&["augment", "--manifest", s(&out), "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn review_edits_flow_back_into_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pairs.jsonl");
    let mut pairs: Vec<PairRecord> = (0..3).map(|i| tiny_pair(i, 0)).collect();
    pairs[1].status = PairStatus::NeedsReview;
    save_manifest(&input, &pairs).unwrap();
    let review = dir.path().join("review.jsonl");
    fs::write(&review, "{\"pair_id\":\"s1_b000\",\"song_id\":\"s1\",\"window_start_bar\":0,\"confidence\":0.4,\"status\":\"accepted\"}\n").unwrap();
    let out = dir.path().join("reviewed.jsonl");
    let stdout = run_ok(&["apply-review", "--manifest", s(&input), "--review", s(&review), "--out", s(&out)]);
    assert!(stdout.starts_with("1 "), "{stdout}");
    assert!(load_manifest(&out).unwrap().iter().all(|p| p.status == PairStatus::Accepted));
}

#[test]
fn vocabulary_mismatch_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = dir.path().join("tokens.bin");
    let corpus = TokenCorpus {
        vocab_hash: "0".repeat(64),
        records: vec![TokenRecord { pair_id: "a".into(), split: Split::Train, ids: vec![1, 4, 3, 2] }],
    };
    corpus.save(&tokens).unwrap();
    let out = overpaint(&["train", "--tokens", s(&tokens), "--out", s(&dir.path().join("m.ovpt")), "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(3));

    let good = TokenCorpus { vocab_hash: Vocabulary::new().hash(), records: corpus.records };
    good.save(&tokens).unwrap();
    let out = overpaint(&["train", "--tokens", s(&tokens), "--config", "model9", "--out", s(&dir.path().join("m.ovpt"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = overpaint(&["train", "--tokens", s(&dir.path().join("missing.bin")), "--out", s(&dir.path().join("m.ovpt"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pairs.jsonl");
    let pairs: Vec<PairRecord> = (0..3).map(|i| tiny_pair(i, 0)).collect();
    save_manifest(&input, &pairs).unwrap();
    let tokens = dir.path().join("tokens.bin");
    run_ok(&["tokenize", "--manifest", s(&input), "--out", s(&tokens)]);
    let ckpt = dir.path().join("m.ovpt");
    run_ok(&["train", "--tokens", s(&tokens), "--out", s(&ckpt), "--epochs", "1"]);
    let primer = dir.path().join("pairs_midi/s0_b000.orig.mid");
    let (a, b) = (dir.path().join("a.mid"), dir.path().join("b.mid"));
    for out in [&a, &b] {
        run_ok(&["generate", "--checkpoint", s(&ckpt), "--primer", s(&primer), "--seed", "7", "--max-new", "40", "--out", s(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let bad_p = overpaint(&["generate", "--checkpoint", s(&ckpt), "--primer", s(&primer), "--p", "1.5", "--out", s(&a)]);
    assert_eq!(bad_p.status.code(), Some(3));
}

#[test]
fn evaluate_and_report_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pairs.jsonl");
    let pairs: Vec<PairRecord> = (0..3).map(|i| tiny_pair(i, 0)).collect();
    save_manifest(&input, &pairs).unwrap();
    let csv = dir.path().join("eval.csv");
    let stdout = run_ok(&["evaluate", "--corpus", s(&dir.path().join("pairs_midi")), "--report", s(&csv), "--label", "All"]);
    assert!(stdout.contains("Pitch Class Entropy (PCE)"), "{stdout}");
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("metric,All\n"));

    let table = dir.path().join("table.csv");
    run_ok(&["report", "--manifest", s(&input), "--label", "Toy", "--table", s(&table)]);
    let text = fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("metric,Toy Originals,Toy Variations\n"), "{text}");
    assert!(text.contains("NoP,\"3.000000,0.000000\",\"4.000000,0.000000\""), "{text}");
}
