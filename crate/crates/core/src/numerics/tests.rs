use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv).unwrap();
    g.sum(p)
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let c = g.matmul(i2, b).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let w = random(&mut rng, &[3, 2]);

    let (bc, wc) = (b.clone(), w.clone());
    let err_a = grad_check(
        move |g, x| {
            let bv = g.constant(bc.clone());
            let y = g.matmul(x, bv)?;
            Ok(weighted_sum(g, y, &wc))
        },
        &a,
        1e-5,
    )
    .unwrap();
    let (ac, wc) = (a.clone(), w.clone());
    let err_b = grad_check(
        move |g, x| {
            let av = g.constant(ac.clone());
            let y = g.matmul(av, x)?;
            Ok(weighted_sum(g, y, &wc))
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(err_a < 1e-6, "d a rel err {err_a}");
    assert!(err_b < 1e-6, "d b rel err {err_b}");
}

#[test]
fn elementwise_values_and_tanh_derivative() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let t = g.tanh(z).unwrap();
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(t).data(), &[0.0]);
    assert_eq!(g.value(s).data(), &[0.5]);

    let x = 0.3f64;
    let mut g = Graph::new();
    let v = g.param(ParamId(0), &Tensor::scalar(x));
    let y = g.tanh(v).unwrap();
    let grads = g.backward(y).unwrap();
    let analytic = grads.param(ParamId(0), &[1]).data()[0];
    let expected = 1.0 - x.tanh().powi(2);
    assert!(relative_error(analytic, expected) < 1e-12);
    let err = grad_check(|g, x| g.tanh(x), &Tensor::scalar(x), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn every_unary_and_binary_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random(&mut rng, &[2, 3]);
    let other = random(&mut rng, &[2, 3]);
    for op in [Unary::Tanh, Unary::Sigmoid, Unary::Exp] {
        let err = grad_check(
            |g, x| {
                let y = g.unary(op, x)?;
                Ok(g.sum(y))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{op:?}: {err}");
    }
    let positive = Tensor::new(vec![2, 3], p.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let err = grad_check(
        |g, x| {
            let y = g.log(x)?;
            Ok(g.sum(y))
        },
        &positive,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "log: {err}");
    for op in [Binary::Add, Binary::Sub, Binary::Mul] {
        let oc = other.clone();
        let err = grad_check(
            move |g, x| {
                let o = g.constant(oc.clone());
                let y = g.binary(op, x, o)?;
                let y2 = g.binary(op, y, x)?;
                Ok(g.sum(y2))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{op:?}: {err}");
    }
}

#[test]
fn log_and_exp_domain_violations_are_errors() {
    let mut g = Graph::new();
    let neg = g.constant(Tensor::scalar(-1.0));
    assert!(matches!(g.log(neg), Err(Error::NonFinite { op: "log" })));
    let zero = g.constant(Tensor::scalar(0.0));
    assert!(matches!(g.log(zero), Err(Error::NonFinite { .. })));
    let big = g.constant(Tensor::scalar(1000.0));
    assert!(matches!(g.exp(big), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn elementwise_requires_equal_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    let bias = g.constant(Tensor::zeros(&[2]));
    assert!(g.add_row_bias(a, bias).is_err());
}

/// exp/sum without max subtraction, with compensated summation.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for e in &exps {
        let y = e - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    exps.iter().map(|e| e / sum).collect()
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.softmax(x, 0).unwrap();
    for (a, b) in g.value(y).data().iter().zip(softmax_oracle(&[1.0, 2.0, 3.0])) {
        assert!((a - b).abs() < 1e-12);
    }

    let shifted = g.constant(Tensor::vector(vec![1.0 + 37.5, 2.0 + 37.5, 3.0 + 37.5]));
    let y2 = g.softmax(shifted, 0).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(y2).data()) {
        assert!((a - b).abs() < 1e-15);
    }

    let bad = g.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(g.softmax(bad, 0).is_err());
}

#[test]
fn softmax_along_either_axis_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[3, 4]);
    for axis in [0, 1] {
        let wc = w.clone();
        let err = grad_check(
            move |g, x| {
                let y = g.softmax(x, axis)?;
                Ok(weighted_sum(g, y, &wc))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "axis {axis}: {err}");
    }
    let wc = w.clone();
    let err = grad_check(
        move |g, x| {
            let y = g.log_softmax(x)?;
            Ok(weighted_sum(g, y, &wc))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "log_softmax: {err}");
}

#[test]
fn embedding_lookup_examples() {
    let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    let mut g = Graph::new();
    let t = g.param(ParamId(0), &table);
    let empty = g.embedding(t, &[]).unwrap();
    assert_eq!(g.shape(empty), &[0, 2]);
    let one = g.embedding(t, &[1]).unwrap();
    assert_eq!(g.value(one).data(), &[3.0, 4.0]);
    match g.embedding(t, &[3]) {
        Err(Error::IndexOutOfRange { id: 3, limit: 3 }) => {}
        other => panic!("{other:?}"),
    }

    // repeated id: the row's gradient is the sum of both output gradients
    let rep = g.embedding(t, &[2, 2]).unwrap();
    let w = g.constant(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 3.0]]).unwrap());
    let p = g.mul(rep, w).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    let gt = grads.param(ParamId(0), &[3, 2]);
    assert_eq!(gt.row(2), &[2.5, 2.0]);
    assert_eq!(gt.row(0), &[0.0, 0.0]);

    let err = grad_check(
        |g, x| {
            let e = g.embedding(x, &[2, 2, 0])?;
            let sq = g.mul(e, e)?;
            Ok(g.sum(sq))
        },
        &table,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let w = g.param(ParamId(0), &Tensor::vector(vec![1.0, 2.0]));
    let detached = g.param(ParamId(1), &Tensor::vector(vec![5.0]));
    let _unused = g.tanh(detached).unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(ParamId(0), &[2]).data(), &[2.0, 4.0]);
    assert_eq!(grads.param(ParamId(1), &[1]).data(), &[0.0]);
    assert_eq!(grads.param(ParamId(9), &[3]).data(), &[0.0; 3]);

    assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss(_))));
}

#[test]
fn fused_sequence_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // LSTM cell with both gate and previous-cell inputs in one parameter.
    let (b, h) = (2, 3);
    let packed = random(&mut rng, &[b, 5 * h]);
    let w = random(&mut rng, &[b, 2 * h]);
    let err = grad_check(
        |g, x| {
            let gates = g.slice_cols(x, 0, 4 * h)?;
            let c = g.slice_cols(x, 4 * h, 5 * h)?;
            let y = g.lstm_cell(gates, c)?;
            Ok(weighted_sum(g, y, &w))
        },
        &packed,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "lstm_cell: {err}");

    // Time slicing, stacking, prepending and row selection.
    let seq = random(&mut rng, &[2, 3, 4]);
    let w3 = random(&mut rng, &[2, 4, 4]);
    let err = grad_check(
        |g, x| {
            let s0 = g.time_slice(x, 0)?;
            let s2 = g.time_slice(x, 2)?;
            let sel = g.select_rows(&[true, false], s0, s2)?;
            let t = g.tanh(sel)?;
            let stacked = g.stack_time(&[s2, t, s0])?;
            let row = g.time_slice(x, 1)?;
            let row = g.reshape(row, &[1, 8])?;
            let first = g.slice_cols(row, 2, 6)?;
            let pre = g.prepend_row(stacked, first)?;
            Ok(weighted_sum(g, pre, &w3))
        },
        &seq,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "sequence ops: {err}");

    // Concat, bias broadcast, cross entropy with a masked row.
    let logits = random(&mut rng, &[3, 5]);
    let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.5]);
    let err = grad_check(
        |g, x| {
            let bv = g.constant(bias.clone());
            let left = g.slice_cols(x, 0, 2)?;
            let right = g.slice_cols(x, 2, 5)?;
            let joined = g.concat_cols(&[right, left])?;
            let y = g.add_row_bias(joined, bv)?;
            let nll = g.cross_entropy(y, &[4, 0, 2], &[true, false, true])?;
            Ok(g.sum(nll))
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "cross entropy: {err}");
}

#[test]
fn attention_head_passes_grad_check_on_every_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (b, n, a, d) = (2, 4, 3, 5);
    let keys = random(&mut rng, &[b, n, a]);
    let query = random(&mut rng, &[b, a]);
    let score = random(&mut rng, &[a]);
    let values = random(&mut rng, &[b, n, d]);
    let w = random(&mut rng, &[b, d]);
    let mask = [true, true, false, true, true, true, true, false];

    type Slot = usize;
    for which in 0..4 as Slot {
        let point = [&keys, &query, &score, &values][which].clone();
        let err = grad_check(
            |g, x| {
                let mut inputs = [keys.clone(), query.clone(), score.clone(), values.clone()]
                    .into_iter()
                    .map(|t| g.constant(t))
                    .collect::<Vec<_>>();
                inputs[which] = x;
                let ctx = g.attention_head(inputs[0], inputs[1], inputs[2], inputs[3], &mask)?;
                Ok(weighted_sum(g, ctx, &w))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input {which}: {err}");
    }

    let mut g = Graph::new();
    let k = g.constant(keys.clone());
    let q = g.constant(query.clone());
    let s = g.constant(score.clone());
    let v = g.constant(values.clone());
    let all_off = [false, false, false, false, true, true, true, true];
    assert!(matches!(
        g.attention_head(k, q, s, v, &all_off),
        Err(Error::AllMasked { sample: 0 })
    ));
}

#[test]
fn replaying_a_graph_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random(&mut rng, &[4, 6]);
        let b = random(&mut rng, &[6, 4]);
        let mut g = Graph::new();
        let av = g.param(ParamId(0), &a);
        let bv = g.param(ParamId(1), &b);
        let c = g.matmul(av, bv).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let t = g.tanh(s).unwrap();
        let loss = g.sum(t);
        let grads = g.backward(loss).unwrap();
        (
            g.value(loss).data().to_vec(),
            grads.param(ParamId(0), &[4, 6]).into_data(),
            grads.param(ParamId(1), &[6, 4]).into_data(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_sums_to_one(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(xs));
        let y = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[derive(Clone, Debug)]
enum Step {
    Tanh,
    Sigmoid,
    SquareViaMul,
    MatMul(u64),
    SoftmaxRows,
    ExpScaled,
    LogSigmoid,
    AddSelf,
    Lstm,
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Tanh),
        Just(Step::Sigmoid),
        Just(Step::SquareViaMul),
        any::<u64>().prop_map(Step::MatMul),
        Just(Step::SoftmaxRows),
        Just(Step::ExpScaled),
        Just(Step::LogSigmoid),
        Just(Step::AddSelf),
        Just(Step::Lstm),
    ]
}

fn apply(g: &mut Graph, x: Var, s: &Step) -> crate::Result<Var> {
    Ok(match s {
        Step::Tanh => g.tanh(x)?,
        Step::Sigmoid => g.sigmoid(x)?,
        Step::SquareViaMul => {
            let y = g.mul(x, x)?;
            g.scale(y, 0.5)
        }
        Step::MatMul(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let w = g.constant(random(&mut rng, &[4, 4]));
            g.matmul(x, w)?
        }
        Step::SoftmaxRows => g.softmax(x, 1)?,
        Step::ExpScaled => {
            let y = g.scale(x, 0.3);
            g.exp(y)?
        }
        Step::LogSigmoid => {
            let y = g.sigmoid(x)?;
            g.log(y)?
        }
        Step::AddSelf => g.add(x, x)?,
        Step::Lstm => {
            let gates = g.concat_cols(&[x, x, x, x])?;
            let c = g.tanh(x)?;
            let hc = g.lstm_cell(gates, c)?;
            let h = g.slice_cols(hc, 0, 4)?;
            let c = g.slice_cols(hc, 4, 8)?;
            g.add(h, c)?
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_compositions_match_finite_differences(
        steps in prop::collection::vec(step_strategy(), 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[3, 4]);
        let err = grad_check(
            |g, x| {
                let mut cur = x;
                for s in &steps {
                    cur = apply(g, cur, s)?;
                }
                Ok(weighted_sum(g, cur, &w))
            },
            &point,
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-4, "rel err {} for {:?}", err, steps);
    }
}

