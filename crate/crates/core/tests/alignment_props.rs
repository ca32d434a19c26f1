mod oracles;

use oracles::*;
use overpaint_core::alignment::{viterbi_align, EMISSION_SCALE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn viterbi_equals_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let (frames, templates) = random_alignment_instance(&mut rng);
        let got = viterbi_align(&frames, &templates, 0.9).unwrap();
        let want = exhaustive_best_path(&frames, &templates, 0.9, EMISSION_SCALE);
        assert_eq!(got.state_of_frame, want, "case {case}");
        assert!(got.complete);
    }
}

proptest! {
    #[test]
    fn paths_are_monotone_and_complete(seed in any::<u64>(), self_loop in 0.05f64..0.95) {
        let (frames, templates) = random_alignment_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let path = viterbi_align(&frames, &templates, self_loop).unwrap();
        let states = &path.state_of_frame;
        prop_assert_eq!(states[0], 0);
        prop_assert_eq!(*states.last().unwrap(), templates.len() - 1);
        prop_assert!(states.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&path.confidence));
    }

    #[test]
    fn self_loop_does_not_change_the_forced_path(seed in any::<u64>(), a in 0.05f64..0.95, b in 0.05f64..0.95) {
        let (frames, templates) = random_alignment_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let pa = viterbi_align(&frames, &templates, a).unwrap();
        let pb = viterbi_align(&frames, &templates, b).unwrap();
        prop_assert_eq!(pa.state_of_frame, pb.state_of_frame);
    }
}
