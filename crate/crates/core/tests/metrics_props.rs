mod oracles;

use oracles::*;
use overpaint_core::leadsheet::{Key, Mode};
use overpaint_core::metrics::{
    features, n_pitches, pitch_class_entropy, pitch_in_scale, pitch_range, polyphony, report, summarize, Metric,
};
use overpaint_core::midi_io::{Beat, MidiScore, NoteEvent};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn n(pitch: u8, onset: Beat, duration: Beat) -> NoteEvent {
    NoteEvent::new(pitch, onset, duration, 80).unwrap()
}

fn b(num: i64, den: i64) -> Beat {
    Beat::new(num, den)
}

#[test]
fn matches_brute_force_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let score = random_score(&mut rng, 40);
        let key = random_key(&mut rng);
        assert!((pitch_class_entropy(&score).unwrap() - ref_pce(&score)).abs() <= 1e-9);
        assert_eq!(pitch_range(&score).unwrap(), ref_pr(&score));
        assert!((polyphony(&score).unwrap() - ref_polyphony(&score)).abs() <= 1e-9);
        assert_eq!(n_pitches(&score).unwrap(), ref_nop(&score));
        assert!((pitch_in_scale(&score, Some(key)).unwrap() - ref_ps(&score, Some(key))).abs() <= 1e-9);
        assert!((pitch_in_scale(&score, None).unwrap() - ref_ps(&score, None)).abs() <= 1e-9);
    }
}

#[test]
fn closed_forms() {
    let uniform = MidiScore::new((0..12).map(|i| n(60 + i, b(i as i64, 1), b(1, 1))).collect());
    assert_eq!(pitch_class_entropy(&uniform).unwrap(), 12f64.log2());
    assert_eq!(polyphony(&uniform).unwrap(), 1.0);

    let c_major: Vec<NoteEvent> = [60, 62, 64, 65, 67, 69, 71, 72].iter().enumerate().map(|(i, &p)| n(p, b(i as i64, 2), b(1, 2))).collect();
    let c_major = MidiScore::new(c_major);
    assert_eq!(pitch_in_scale(&c_major, Some(Key::new(0, Mode::Major))).unwrap(), 1.0);
    assert_eq!(pitch_in_scale(&c_major, Some(Key::new(9, Mode::Minor))).unwrap(), 1.0);
    assert_eq!(pitch_in_scale(&c_major, None).unwrap(), 1.0);
}

#[test]
fn documented_examples() {
    let cceg = MidiScore::new(vec![n(60, b(0, 1), b(1, 1)), n(72, b(1, 1), b(1, 1)), n(64, b(2, 1), b(1, 1)), n(67, b(3, 1), b(1, 1))]);
    assert!((pitch_class_entropy(&cceg).unwrap() - 1.5).abs() < 1e-12);

    let overlap = MidiScore::new(vec![n(60, b(0, 1), b(1, 1)), n(64, b(1, 2), b(1, 1))]);
    assert!((polyphony(&overlap).unwrap() - 4.0 / 3.0).abs() < 1e-12);

    let range = MidiScore::new(vec![n(60, b(0, 1), b(1, 1)), n(72, b(1, 1), b(1, 1)), n(67, b(2, 1), b(1, 1))]);
    assert_eq!(pitch_range(&range).unwrap(), 12);

    let with_f_sharp = MidiScore::new([60, 64, 67, 66].iter().enumerate().map(|(i, &p)| n(p, b(i as i64, 1), b(1, 1))).collect());
    assert_eq!(pitch_in_scale(&with_f_sharp, Some(Key::new(0, Mode::Major))).unwrap(), 0.75);

    let line: Vec<NoteEvent> = [60, 62, 64, 62, 67].iter().enumerate().map(|(i, &p)| n(p, b(i as i64, 1), b(1, 1))).collect();
    let mut doubled = line.clone();
    doubled.extend(line.iter().map(|x| n(x.pitch + 12, x.onset, x.duration)));
    assert_eq!(n_pitches(&MidiScore::new(doubled)).unwrap(), 2 * n_pitches(&MidiScore::new(line)).unwrap());

    assert!(features(&MidiScore::default(), None).is_err());
}

#[test]
fn report_statistics_and_skips() {
    let one = MidiScore::new(vec![n(60, b(0, 1), b(1, 1))]);
    let two = MidiScore::new(vec![n(60, b(0, 1), b(1, 1)), n(70, b(0, 1), b(1, 1))]);
    let items = vec![(one, None), (MidiScore::default(), None), (two, None)];
    let r = report("x", &items).unwrap();
    assert_eq!(r.skipped, 1);
    let pr = r.get(Metric::Pr);
    assert_eq!((pr.mean, pr.std, pr.count), (5.0, 5.0, 2));
    let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
    assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
}

#[test]
fn transposition_invariance_over_all_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let score = random_score(&mut rng, 30);
        let key = random_key(&mut rng);
        let base = features(&score, Some(key)).unwrap();
        for t in -5..=6 {
            let mut moved = score.clone();
            assert_eq!(moved.transpose_folding(t), 0);
            let f = features(&moved, Some(key.transposed(t))).unwrap();
            assert_eq!(f.pce.to_bits(), base.pce.to_bits());
            assert_eq!(f.pr, base.pr);
            assert_eq!(f.poly.to_bits(), base.poly.to_bits());
            assert_eq!(f.nop, base.nop);
            assert_eq!(f.ps.to_bits(), base.ps.to_bits());
        }
    }
}

proptest! {
    #[test]
    fn bounds_hold(seed in any::<u64>()) {
        let score = random_score(&mut ChaCha8Rng::seed_from_u64(seed), 50);
        let f = features(&score, None).unwrap();
        prop_assert!(f.pce >= 0.0 && f.pce <= 12f64.log2() + 1e-12);
        prop_assert!(f.poly >= 1.0);
        prop_assert!(f.nop >= 1 && f.nop <= 128);
        prop_assert!((0.0..=1.0).contains(&f.ps));
        prop_assert!(f.ps >= pitch_in_scale(&score, Some(random_key(&mut ChaCha8Rng::seed_from_u64(seed ^ 1)))).unwrap());
    }
}
