//! Gradient oracles: every tape primitive is checked against central finite
//! differences through a scalar loss, plus the algebraic invariants the
//! engine guarantees (softmax rows sum to one, backward is linear in the
//! upstream adjoint, replay is bit-identical).

use counterstyle_core::tape::{softmax_rows, Tape, Var};
use counterstyle_core::tensor::Tensor;
use proptest::prelude::*;

const FD_EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

/// Builds a scalar loss from tensors, used both for the tape gradient and
/// for finite differences. The weights make the loss sensitive to every
/// output coordinate with distinct coefficients.
fn loss_through<F>(inputs: &[Tensor], build: F) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let (rows, cols) = tape.value(out).shape();
    let weights: Vec<f64> = (0..rows * cols)
        .map(|i| 0.3 + 0.05 * (i as f64) * (if i % 2 == 0 { 1.0 } else { -1.0 }))
        .collect();
    // flatten to a column then weight, so any output shape reduces to scalar
    let flat_picks: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    let col = tape.pick(out, &flat_picks);
    let loss = tape.weighted_sum(col, &weights);
    let val = tape.value(loss).item();
    let grads = tape.backward(loss);
    let gs = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| grads.get_or_zeros(vars[i], t.rows(), t.cols()))
        .collect();
    (val, gs)
}

fn central_diff<F>(inputs: &[Tensor], which: usize, flat: usize, build: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[flat] += FD_EPS;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[flat] -= FD_EPS;
    let (lp, _) = loss_through(&plus, build);
    let (lm, _) = loss_through(&minus, build);
    (lp - lm) / (2.0 * FD_EPS)
}

fn assert_fd_matches<F>(inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let (_, grads) = loss_through(inputs, &build);
    for (which, input) in inputs.iter().enumerate() {
        for flat in 0..input.len() {
            let fd = central_diff(inputs, which, flat, &build);
            let an = grads[which].data()[flat];
            let denom = fd.abs().max(an.abs()).max(1e-4);
            let rel = (fd - an).abs() / denom;
            assert!(
                rel < REL_TOL,
                "input {which} coord {flat}: analytic {an} vs fd {fd} (rel {rel:.2e})"
            );
        }
    }
}

fn tensor_strategy(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fd_matmul_all_transpose_cases(
        a in tensor_strategy(3, 4, -2.0, 2.0),
        b in tensor_strategy(4, 2, -2.0, 2.0),
    ) {
        assert_fd_matches(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], false, v[1], false));
        let at = a.transposed();
        assert_fd_matches(&[at, b.clone()], |t, v| t.matmul(v[0], true, v[1], false));
        let bt = b.transposed();
        assert_fd_matches(&[a.clone(), bt.clone()], |t, v| t.matmul(v[0], false, v[1], true));
        assert_fd_matches(&[a.transposed(), bt], |t, v| t.matmul(v[0], true, v[1], true));
    }

    #[test]
    fn fd_elementwise_and_bias(
        a in tensor_strategy(3, 5, -2.0, 2.0),
        b in tensor_strategy(3, 5, -2.0, 2.0),
        bias in tensor_strategy(1, 5, -1.0, 1.0),
    ) {
        assert_fd_matches(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        assert_fd_matches(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        assert_fd_matches(&[a.clone(), b], |t, v| t.sub(v[0], v[1]));
        assert_fd_matches(&[a.clone(), bias], |t, v| t.add_row(v[0], v[1]));
        assert_fd_matches(&[a.clone()], |t, v| t.scale(v[0], -1.7));
        assert_fd_matches(&[a], |t, v| t.mean(v[0]));
    }

    #[test]
    fn fd_scalar_nonlinearities(a in tensor_strategy(2, 6, -3.0, 3.0)) {
        assert_fd_matches(&[a.clone()], |t, v| t.exp(v[0]));
        assert_fd_matches(&[a.clone()], |t, v| t.sigmoid(v[0]));
        assert_fd_matches(&[a.clone()], |t, v| t.softplus(v[0]));
        assert_fd_matches(&[a], |t, v| t.gelu(v[0]));
    }

    #[test]
    fn fd_log(a in tensor_strategy(2, 4, 0.1, 4.0)) {
        assert_fd_matches(&[a], |t, v| t.log(v[0]));
    }

    #[test]
    fn fd_softmax_and_log_softmax(a in tensor_strategy(3, 5, -3.0, 3.0)) {
        assert_fd_matches(&[a.clone()], |t, v| t.softmax(v[0]));
        assert_fd_matches(&[a], |t, v| t.log_softmax(v[0]));
    }

    #[test]
    fn fd_layer_norm(
        a in tensor_strategy(3, 6, -2.0, 2.0),
        gain in tensor_strategy(1, 6, 0.5, 1.5),
        bias in tensor_strategy(1, 6, -0.5, 0.5),
    ) {
        assert_fd_matches(&[a, gain, bias], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn fd_gather_pick_segment(a in tensor_strategy(5, 3, -2.0, 2.0)) {
        assert_fd_matches(&[a.clone()], |t, v| t.gather_rows(v[0], &[4, 0, 2, 2, 1]));
        assert_fd_matches(&[a.clone()], |t, v| t.pick(v[0], &[(0, 2), (3, 1), (3, 1), (4, 0)]));
        let col = Tensor::from_vec(6, 1, a.data()[..6].to_vec()).unwrap();
        assert_fd_matches(&[col], |t, v| t.segment_sum(v[0], &[0, 2, 2, 6]));
    }

    #[test]
    fn fd_causal_attention(
        q in tensor_strategy(6, 4, -1.5, 1.5),
        k in tensor_strategy(6, 4, -1.5, 1.5),
        v in tensor_strategy(6, 4, -1.5, 1.5),
    ) {
        // two sequences padded to length 3 (lens 3 and 2), two heads of dim 2
        assert_fd_matches(&[q, k, v], |t, vars| {
            t.causal_attention(vars[0], vars[1], vars[2], &[3, 2], 3, 2)
        });
    }

    #[test]
    fn softmax_rows_always_sum_to_one(a in tensor_strategy(4, 7, -30.0, 30.0)) {
        let s = softmax_rows(&a);
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn backward_is_linear_in_upstream_weights() {
    // d(w1*L1 + w2*L2)/dx == w1*dL1/dx + w2*dL2/dx, checked by building the
    // combined loss on one tape and the parts separately
    let x = Tensor::from_vec(2, 3, vec![0.3, -1.2, 0.7, 1.1, -0.4, 0.25]).unwrap();
    let run = |w1: f64, w2: f64| -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let e = tape.exp(xv);
        let s = tape.sigmoid(xv);
        let l1 = tape.mean(e);
        let l2 = tape.mean(s);
        let l1w = tape.scale(l1, w1);
        let l2w = tape.scale(l2, w2);
        let total = tape.add(l1w, l2w);
        tape.backward(total).get_or_zeros(xv, 2, 3)
    };
    let g_combined = run(2.5, -1.5);
    let g1 = run(1.0, 0.0);
    let g2 = run(0.0, 1.0);
    for i in 0..6 {
        let lin = 2.5 * g1.data()[i] - 1.5 * g2.data()[i];
        assert!(
            (g_combined.data()[i] - lin).abs() < 1e-10,
            "coord {i}: {} vs {}",
            g_combined.data()[i],
            lin
        );
    }
}

#[test]
fn replay_is_bit_identical() {
    let x = Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect()).unwrap();
    let run = || -> (f64, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let sm = tape.log_softmax(xv);
        let picked = tape.pick(sm, &[(0, 1), (1, 3), (2, 0)]);
        let loss = tape.mean(picked);
        let v = tape.value(loss).item();
        let g = tape.backward(loss).get_or_zeros(xv, 3, 4);
        (v, g)
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert!(v1.to_bits() == v2.to_bits());
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert!(a.to_bits() == b.to_bits());
    }
}
