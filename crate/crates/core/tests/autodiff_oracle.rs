//! Every tape primitive checked against central finite differences.

use awi_core::autodiff::{Elementwise, Tape};
use awi_core::gradcheck::{finite_diff_gradient, max_relative_error};
use awi_core::{NodeId, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces the output of `build` with a fixed random weighting and compares
/// the tape gradient with respect to every input against finite differences.
fn check<F>(inputs: Vec<Tensor>, build: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let forward = |tape: &mut Tape, xs: &[Tensor]| -> (NodeId, Vec<NodeId>) {
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(tape, &ids);
        let (r, c) = tape.value(out).shape();
        let w = tape.leaf(random(r, c, 99));
        let weighted = tape.mul(out, w).unwrap();
        (tape.sum(weighted), ids)
    };
    let mut tape = Tape::new();
    let (loss, ids) = forward(&mut tape, &inputs);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = ids.iter().map(|id| tape.grad(*id)).collect();

    let mut params = inputs.clone();
    let numeric = finite_diff_gradient(&mut params, STEP, |p: &Vec<Tensor>| {
        let mut t = Tape::new();
        let (l, _) = forward(&mut t, p);
        Ok(t.value(l).data()[0])
    })
    .unwrap();
    max_relative_error(&analytic, &numeric, FLOOR).0
}

#[test]
fn matmul_three_by_four_times_four_by_two() {
    let err = check(vec![random(3, 4, 1), random(4, 2, 2)], |t, x| {
        t.matmul(x[0], x[1]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_transposed() {
    let err = check(vec![random(2, 5, 3), random(3, 5, 4)], |t, x| {
        t.matmul_t(x[0], x[1]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_ops() {
    for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
        let err = check(vec![random(2, 3, 5), random(2, 3, 6)], |t, x| {
            t.elementwise(kind, x).unwrap()
        });
        assert!(err < 1e-6, "{kind:?}: {err}");
    }
    for kind in [Elementwise::Tanh, Elementwise::Sigmoid] {
        let err = check(vec![random(3, 3, 7)], |t, x| {
            t.elementwise(kind, x).unwrap()
        });
        assert!(err < 1e-6, "{kind:?}: {err}");
    }
}

#[test]
fn broadcast_scale_and_reductions() {
    let err = check(vec![random(4, 3, 8), random(1, 3, 9)], |t, x| {
        t.add_row(x[0], x[1]).unwrap()
    });
    assert!(err < 1e-6, "add_row: {err}");
    let err = check(vec![random(2, 2, 10)], |t, x| t.scale(x[0], -2.5));
    assert!(err < 1e-6, "scale: {err}");
    let err = check(vec![random(3, 2, 11)], |t, x| t.sum(x[0]));
    assert!(err < 1e-6, "sum: {err}");
    let err = check(vec![random(1, 6, 12)], |t, x| t.pick(x[0], 4).unwrap());
    assert!(err < 1e-6, "pick: {err}");
}

#[test]
fn softmax_family() {
    let err = check(vec![random(1, 7, 13)], |t, x| t.softmax(x[0]).unwrap());
    assert!(err < 1e-6, "softmax: {err}");
    let err = check(vec![random(1, 7, 14)], |t, x| t.log_softmax(x[0]).unwrap());
    assert!(err < 1e-6, "log_softmax: {err}");
}

#[test]
fn structural_ops() {
    let err = check(vec![random(1, 2, 15), random(1, 3, 16)], |t, x| {
        t.concat(x[0], x[1]).unwrap()
    });
    assert!(err < 1e-6, "concat: {err}");
    let err = check(vec![random(1, 8, 17)], |t, x| {
        t.slice_cols(x[0], 2, 4).unwrap()
    });
    assert!(err < 1e-6, "slice_cols: {err}");
    let err = check(
        vec![random(1, 3, 18), random(1, 3, 19), random(1, 3, 20)],
        |t, x| t.stack_rows(x).unwrap(),
    );
    assert!(err < 1e-6, "stack_rows: {err}");
    let err = check(vec![random(5, 3, 21)], |t, x| {
        let a = t.lookup(x[0], 1).unwrap();
        let b = t.lookup(x[0], 3).unwrap();
        let c = t.lookup(x[0], 1).unwrap();
        let ab = t.add(a, b).unwrap();
        t.mul(ab, c).unwrap()
    });
    assert!(err < 1e-6, "lookup: {err}");
}

#[test]
fn two_layer_composition() {
    // tanh(x·W1ᵀ + b1) → softmax(h·W2ᵀ) ⊙ sigmoid(h·W3ᵀ), concatenated with x.
    let inputs = vec![
        random(1, 4, 30),
        random(5, 4, 31),
        random(1, 5, 32),
        random(3, 5, 33),
        random(3, 5, 34),
    ];
    let err = check(inputs, |t, x| {
        let a = t.matmul_t(x[0], x[1]).unwrap();
        let a = t.add(a, x[2]).unwrap();
        let h = t.tanh(a);
        let p = t.matmul_t(h, x[3]).unwrap();
        let p = t.softmax(p).unwrap();
        let g = t.matmul_t(h, x[4]).unwrap();
        let g = t.sigmoid(g);
        let y = t.mul(p, g).unwrap();
        t.concat(y, x[0]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn unused_lookup_rows_get_no_gradient() {
    let mut tape = Tape::new();
    let table = tape.leaf(random(6, 2, 40));
    let a = tape.lookup(table, 2).unwrap();
    let b = tape.lookup(table, 2).unwrap();
    let s = tape.add(a, b).unwrap();
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();
    let g = tape.grad(table);
    for r in 0..6 {
        let expected = if r == 2 { 2.0 } else { 0.0 };
        assert_eq!(g.row_slice(r), &[expected, expected]);
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-500.0f64..500.0, 1..40)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&xs));
        let p = tape.softmax(x).unwrap();
        let p = tape.value(p);
        prop_assert!(p.data().iter().all(|v| *v >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(xs in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&xs));
        let p = tape.softmax(x).unwrap();
        let lp = tape.log_softmax(x).unwrap();
        for (a, b) in tape.value(p).data().iter().zip(tape.value(lp).data()) {
            prop_assert!((a.ln() - b).abs() <= 1e-9);
        }
    }
}
