//! Property tests over the tape's algebraic invariants.

use diffcore::{Tape, Tensor};
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    /// Softmax rows always land on the simplex, whatever the logits.
    #[test]
    fn softmax_rows_are_simplex(data in finite_vec(12)) {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3, 4], data);
        let s = tape.softmax(x);
        for row in tape.value(s).chunks(4) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    /// sum(broadcast(x, [k, n])) == k * sum(x).
    #[test]
    fn broadcast_preserves_totals(data in finite_vec(5), k in 1usize..6) {
        let mut tape = Tape::new();
        let x = tape.constant(vec![5], data.clone());
        let b = tape.broadcast(x, &[k, 5]);
        let total = tape.sum(b);
        let direct: f64 = data.iter().sum::<f64>() * k as f64;
        prop_assert!((tape.item(total) - direct).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    /// Backward distributes over sums: grad of sum(a*x) is a (constant a).
    #[test]
    fn linear_gradient_is_the_coefficient(data in finite_vec(6), a in -5.0f64..5.0) {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(&data));
        let ax = tape.scale(x, a);
        let s = tape.sum(ax);
        tape.backward(s);
        for g in tape.grad(x).unwrap() {
            prop_assert!((g - a).abs() < 1e-12);
        }
    }
}
