use pcc_autograd::{Tape, Tensor};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(m, c)| {
        (
            Just(m),
            Just(c),
            prop::collection::vec(-100.0f64..100.0, m * c),
        )
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((m, c, data) in matrix()) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[m, c], data).unwrap());
        let y = x.softmax(1).unwrap().value();
        for r in 0..m {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_max_ignores_row_order((m, c, data) in matrix(), rot in 0usize..6) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[m, c], data.clone()).unwrap());
        let order: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
        let a = x.reduce_max(0).unwrap().value();
        let b = x.gather(&order, 0).unwrap().reduce_max(0).unwrap().value();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ops_are_deterministic((m, c, data) in matrix()) {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[m, c], data.clone()).unwrap());
            let w = tape.constant(Tensor::from_fn(&[c, 3], |i| (i as f64).sin()).unwrap());
            let y = x.matmul(w).unwrap().gelu().softmax(1).unwrap().sum();
            let g = tape.backward(y).unwrap();
            (y.item().to_bits(), g.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
