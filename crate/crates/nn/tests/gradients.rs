use overpaint_nn::autodiff::{Graph, Tensor};
use overpaint_nn::gradcheck::{check_op, OpKind};
use proptest::prelude::*;

#[test]
fn every_op_passes_finite_differences() {
    for kind in OpKind::ALL {
        let worst = (0..20).map(|seed| check_op(kind, seed).unwrap()).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{kind:?}: max relative error {worst:e}");
    }
}

#[test]
fn relu_away_from_kink_is_exact() {
    for seed in 0..20 {
        let err = check_op(OpKind::Relu, seed).unwrap();
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..9, seed in any::<u64>()) {
        let mut state = seed;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 20.0
            })
            .collect();
        let mut g = Graph::<f64>::default();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x).unwrap();
        let ls = g.log_softmax(x).unwrap();
        let (s, ls) = (g.value(s).data().to_vec(), g.value(ls).data().to_vec());
        for r in 0..rows {
            let total: f64 = s[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        for (a, b) in s.iter().zip(&ls) {
            prop_assert!((a.ln() - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ignored_targets_are_invisible(v in 2usize..6, noise in -50.0f64..50.0) {
        let loss = |fill: f64| {
            let mut g = Graph::<f64>::default();
            let mut data: Vec<f64> = (0..2 * v).map(|i| (i as f64 * 0.37).sin()).collect();
            for x in &mut data[v..] {
                *x += fill;
            }
            let x = g.constant(Tensor::new(vec![2, v], data).unwrap());
            let l = g.cross_entropy(x, &[Some(v - 1), None]).unwrap();
            g.value(l).item()
        };
        prop_assert_eq!(loss(0.0), loss(noise));
    }
}
