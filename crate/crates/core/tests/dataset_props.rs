use std::collections::BTreeMap;

use overpaint_core::dataset::{
    augment, load_manifest, save_manifest, split_by_song, PairRecord, PairStatus, Split, SplitRatios, TRANSPOSITIONS,
};
use overpaint_core::leadsheet::{Key, Mode};
use overpaint_core::midi_io::{Beat, MidiScore, NoteEvent};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair(song: usize, window: u32, rng: &mut impl Rng) -> PairRecord {
    let notes = |rng: &mut dyn rand::RngCore, v: u8| {
        let count = rng.gen_range(1..6);
        MidiScore::new(
            (0..count)
                .map(|i| NoteEvent::new(rng.gen_range(0..128), Beat::from_integer(i), Beat::new(1, 2), v).unwrap())
                .collect(),
        )
    };
    PairRecord {
        pair_id: format!("song{song}_b{window:03}"),
        song_id: format!("song{song}"),
        window_start_bar: window,
        original: notes(rng, 80),
        variation: notes(rng, 90),
        transposition: 0,
        confidence: rng.gen_range(0.5..1.0),
        status: PairStatus::Accepted,
        split: Split::Unassigned,
        key: Some(Key::new(rng.gen_range(0..12), Mode::Major)),
    }
}

fn corpus(seed: u64) -> Vec<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let songs = rng.gen_range(3..30);
    let mut out = Vec::new();
    for s in 0..songs {
        for w in 0..rng.gen_range(1..5) {
            out.push(pair(s, 4 * w, &mut rng));
        }
    }
    out
}

#[test]
fn split_hygiene_over_fifty_corpora() {
    for seed in 0..50 {
        let split = split_by_song(corpus(seed), SplitRatios::default(), seed).unwrap();
        let augmented = augment(&split).unwrap();
        let mut song_split: BTreeMap<&str, Split> = BTreeMap::new();
        for p in &augmented {
            assert_ne!(p.split, Split::Unassigned);
            let first = *song_split.entry(p.song_id.as_str()).or_insert(p.split);
            assert_eq!(first, p.split, "song {} in two splits", p.song_id);
        }
        let mut per_base: BTreeMap<(&str, u32), Vec<i32>> = BTreeMap::new();
        for p in &augmented {
            per_base.entry((p.song_id.as_str(), p.window_start_bar)).or_default().push(p.transposition);
        }
        for ts in per_base.values() {
            assert_eq!(ts, &TRANSPOSITIONS.collect::<Vec<_>>());
        }
        for label in [Split::Train, Split::Val, Split::Test] {
            assert!(song_split.values().any(|&s| s == label));
        }
    }
}

#[test]
fn augmentation_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<PairRecord> = (0..10).map(|i| pair(i % 4, i as u32, &mut rng)).collect();
    let out = augment(&pairs).unwrap();
    assert_eq!(out.len(), 120);
    assert!(augment(&out).is_err());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let pairs = augment(&split_by_song(corpus(3), SplitRatios::default(), 3).unwrap()).unwrap();
    save_manifest(&path, &pairs).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.len(), pairs.len());
    for (a, b) in back.iter().zip(&pairs) {
        assert_eq!(a.pair_id, b.pair_id);
        assert_eq!(a.split, b.split);
        assert_eq!(a.key, b.key);
        assert_eq!(a.original.notes, b.original.notes);
        assert_eq!(a.variation.notes, b.variation.notes);
    }
}

proptest! {
    #[test]
    fn split_ignores_input_order(seed in 0u64..1000, rotate in 0usize..50) {
        let pairs = corpus(seed);
        let mut rotated = pairs.clone();
        let k = rotate % rotated.len();
        rotated.rotate_left(k);
        let a: BTreeMap<String, Split> = split_by_song(pairs, SplitRatios::default(), 9).unwrap().into_iter().map(|p| (p.pair_id, p.split)).collect();
        let b: BTreeMap<String, Split> = split_by_song(rotated, SplitRatios::default(), 9).unwrap().into_iter().map(|p| (p.pair_id, p.split)).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augment_preserves_pitch_classes_and_keys(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = pair(0, 0, &mut rng);
        for copy in augment(std::slice::from_ref(&base)).unwrap() {
            let t = copy.transposition;
            prop_assert_eq!(copy.key, base.key.map(|k| k.transposed(t)));
            let mut want: Vec<u8> = base.original.notes.iter().map(|n| ((n.pitch as i32 + t).rem_euclid(12)) as u8).collect();
            let mut got: Vec<u8> = copy.original.notes.iter().map(|n| n.pitch % 12).collect();
            want.sort_unstable();
            got.sort_unstable();
            prop_assert_eq!(got, want);
            prop_assert_eq!(copy.original.notes.len(), base.original.notes.len());
        }
    }
}
