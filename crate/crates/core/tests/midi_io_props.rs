mod oracles;

use oracles::random_score;
use overpaint_core::midi_io::{parse_midi, quantize, write_midi, Beat, MidiScore, NoteEvent};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn write_then_parse_is_identity(seed in any::<u64>()) {
        let score = random_score(&mut ChaCha8Rng::seed_from_u64(seed), 60);
        let back = parse_midi(&write_midi(&score)).unwrap();
        prop_assert_eq!(back, score);
    }

    #[test]
    fn quantize_is_idempotent(ticks in prop::collection::vec((0i64..5000, 1i64..2000, 0u8..128), 1..40)) {
        let notes = ticks.iter().map(|&(on, dur, p)| NoteEvent::new(p, Beat::new(on, 480), Beat::new(dur, 480), 64).unwrap()).collect();
        let once = quantize(&MidiScore::new(notes), 12);
        prop_assert_eq!(quantize(&once, 12), once.clone());
        for n in &once.notes {
            prop_assert!((n.onset * Beat::from_integer(12)).is_integer());
            prop_assert!(n.duration >= Beat::new(1, 12));
        }
    }
}

#[test]
fn garbage_is_an_error_not_a_panic() {
    assert!(parse_midi(b"").is_err());
    assert!(parse_midi(b"MThd\x00\x00\x00\x06garbage").is_err());
}
