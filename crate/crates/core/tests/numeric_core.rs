mod support;

use hitkit::tensor::gradcheck::{check_inputs, check_params};
use hitkit::tensor::{Adam, Graph, ParamStore, Tensor};
use hitkit::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_orthogonal() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let b = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let z = g.matmul(i, b).unwrap();
    assert_eq!(g.value(z).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(mat(&[&[1.0, 0.0]]));
    let c = g.constant(mat(&[&[0.0], &[5.0]]));
    let z = g.matmul(a, c).unwrap();
    assert_eq!(g.value(z).shape(), &[1, 1]);
    assert_eq!(g.value(z).data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let z = g.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.at(i, k) * b.at(k, j);
            }
            assert!((g.value(z).at(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![7.3]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0]);

    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    for (a, b) in g.value(y).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in g.value(y).data().iter().zip([0.0900, 0.2447, 0.6652]) {
        assert!((a - b).abs() < 1e-4);
    }
    assert!(matches!(g.softmax(x, 1), Err(Error::Axis { .. })));
}

proptest! {
    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 1..5),
        shift in -50.0f64..50.0,
    ) {
        let t = Tensor::from_rows(&rows).unwrap();
        let shifted = Tensor::from_rows(
            &rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect::<Vec<_>>(),
        ).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(t), g.constant(shifted));
        let (ya, yb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
        for r in 0..rows.len() {
            let s: f64 = g.value(ya).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(g.value(ya).row(r).iter().all(|&p| p >= 0.0));
        }
        prop_assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-6);
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let t = g.tanh(z);
    assert_eq!(g.value(t).data(), &[0.0; 6]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = rand_tensor(&[2, 3], &mut rng);
    let x = g.constant(xt.clone());
    let ones = g.constant(Tensor::ones(&[2, 3]));
    let y = g.mul(x, ones).unwrap();
    assert_eq!(g.value(y), &xt);

    let bad = g.constant(Tensor::ones(&[3, 2]));
    assert!(matches!(g.add(x, bad), Err(Error::Shape { .. })));
    assert!(g.mul(x, bad).is_err());
}

#[test]
fn tanh_gradient_is_one_minus_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = rand_tensor(&[5], &mut rng);
    let mut g = Graph::new();
    let x = g.input(xt.clone());
    let y = g.tanh(x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    for (gv, xv) in grads.leaf(x).unwrap().data().iter().zip(xt.data()) {
        assert!((gv - (1.0 - xv.tanh().powi(2))).abs() < 1e-10);
    }
}

#[test]
fn outer_product_examples() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::vector(vec![1.0, 0.0]));
    let v = g.constant(Tensor::vector(vec![0.0, 1.0]));
    let z = g.outer_product(u, v).unwrap();
    assert_eq!(g.value(z).data(), &[0.0, 1.0, 0.0, 0.0]);

    let zero = g.constant(Tensor::zeros(&[2]));
    let z = g.outer_product(zero, v).unwrap();
    assert_eq!(g.value(z).data(), &[0.0; 4]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (ut, vt) = (rand_tensor(&[4], &mut rng), rand_tensor(&[4], &mut rng));
    let (u, v) = (g.constant(ut.clone()), g.constant(vt.clone()));
    let z = g.outer_product(u, v).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((g.value(z).at(i, j) - ut.data()[i] * vt.data()[j]).abs() < 1e-12);
        }
    }
    let w = g.constant(Tensor::zeros(&[3]));
    assert!(g.outer_product(u, w).is_err());
    let m = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.outer_product(m, m).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones(&[4]));
    let beta = g.constant(Tensor::zeros(&[4]));
    let c = g.constant(Tensor::filled(&[1, 4], 3.0));
    let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() <= 1e-2));

    // zero mean, unit (population) variance
    let row = [1.0, -1.0, 1.0, -1.0];
    let s = g.constant(Tensor::new(vec![1, 4], row.to_vec()).unwrap());
    let y = g.layer_norm(s, gamma, beta, 1e-5).unwrap();
    for (a, b) in g.value(y).data().iter().zip(row) {
        assert!((a - b).abs() < 1e-4);
    }
    let bad = g.constant(Tensor::ones(&[3]));
    assert!(g.layer_norm(s, bad, beta, 1e-5).is_err());
}

#[test]
fn embedding_lookup_examples() {
    let table = mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    let mut store = ParamStore::new();
    let id = store.add("emb", table.clone()).unwrap();

    let mut g = Graph::differentiable(&store);
    let t = g.param(id);
    let e = g.gather(t, &[0]).unwrap();
    assert_eq!(g.value(e).data(), &[1.0, 2.0]);

    let err = g.gather(t, &[3]).unwrap_err();
    assert!(matches!(err, Error::IdOutOfRange { id: 3, rows: 3 }));
    let msg = err.to_string();
    assert!(msg.contains('3'));

    // repeated id accumulates twice the single-use gradient
    let twice = g.gather(t, &[1, 1]).unwrap();
    let s = g.sum(twice);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param(id).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let big = rand_tensor(&[7, 3], &mut rng);
    let ids: Vec<usize> = (0..10).map(|_| rng.gen_range(0..7)).collect();
    let mut g = Graph::new();
    let b = g.constant(big.clone());
    let out = g.gather(b, &ids).unwrap();
    for (k, &id) in ids.iter().enumerate() {
        assert_eq!(g.value(out).row(k), big.row(id));
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = g.constant(mat(&[&[40.0, 0.0, 0.0]]));
    let l = g.cross_entropy(logits, &[0], None).unwrap();
    assert!(g.value(l).data()[0] <= 1e-6);

    let uniform = g.constant(Tensor::zeros(&[2, 5]));
    let l = g.cross_entropy(uniform, &[1, 4], None).unwrap();
    assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lt = rand_tensor(&[2, 3], &mut rng);
    let x = g.constant(lt.clone());
    let l = g.cross_entropy(x, &[2, 0], None).unwrap();
    let nll = |r: usize, t: usize| {
        let z: f64 = lt.row(r).iter().map(|v| v.exp()).sum();
        -(lt.at(r, t).exp() / z).ln()
    };
    let expect = (nll(0, 2) + nll(1, 0)) / 2.0;
    assert!((g.value(l).data()[0] - expect).abs() < 1e-10);

    // ignored rows do not count
    let l = g.cross_entropy(x, &[-1, 0], Some(-1)).unwrap();
    assert!((g.value(l).data()[0] - nll(1, 0)).abs() < 1e-10);
    assert!(matches!(
        g.cross_entropy(x, &[-1, -1], Some(-1)),
        Err(Error::EmptyLoss)
    ));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.3, -2.0, 5.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.leaf(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.3, -2.0]));
    let z = g.scale(x, 0.0);
    let s = g.sum(z);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.leaf(x).unwrap().data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.3, -2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

/// Every differentiable primitive against central differences.
#[test]
fn finite_difference_checks_for_every_op() {
    for (name, inputs, f) in support::op_gradcheck_cases() {
        let report = check_inputs(&inputs, 1e-5, f).unwrap();
        assert!(report.max_rel_error < 1e-3, "{name}: {} at {}", report.max_rel_error, report.worst);
    }
}

#[test]
fn parameter_gradients_flow_through_param_leaves() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[3, 2], &mut rng)).unwrap();
    let x = rand_tensor(&[4, 3], &mut rng);
    let report = check_params(&mut store, 1e-5, |g| {
        let xv = g.constant(x.clone());
        let wv = g.param(w);
        let z = g.matmul(xv, wv)?;
        let t = g.tanh(z);
        g.cross_entropy(t, &[0, 1, 1, 0], None)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn adam_zero_grad_leaves_params_unchanged() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.5, -0.25])).unwrap();
    store.get_mut(id).grad = Some(vec![0.0, 0.0]);
    Adam::default().step(&mut store).unwrap();
    assert_eq!(store.value(id).data(), &[0.5, -0.25]);
    assert_eq!(store.get(id).step_count, 1);
    assert!(store.get(id).grad.is_none());
}

#[test]
fn adam_first_step_closed_form() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0])).unwrap();
    store.get_mut(id).grad = Some(vec![1.0]);
    let adam = Adam::default();
    adam.step(&mut store).unwrap();
    // m̂ = 1, v̂ = 1 after bias correction
    let delta = store.value(id).data()[0] - 1.0;
    assert!((delta - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
    assert!((delta + 0.000999).abs() < 1e-6);
}

#[test]
fn adam_two_steps_match_scalar_reference() {
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
    let g = 0.37;
    let (mut theta, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
    }

    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![2.0])).unwrap();
    let adam = Adam {
        lr,
        beta1: b1,
        beta2: b2,
        eps,
    };
    for _ in 0..2 {
        store.get_mut(id).grad = Some(vec![g]);
        adam.step(&mut store).unwrap();
    }
    assert!((store.value(id).data()[0] - theta).abs() < 1e-12);
    assert_eq!(store.get(id).step_count, 2);
}

#[test]
fn adam_missing_grad_names_parameter() {
    let mut store = ParamStore::new();
    store.add("encoder.w", Tensor::vector(vec![1.0])).unwrap();
    let err = Adam::default().step(&mut store).unwrap_err();
    assert!(err.to_string().contains("encoder.w"));
}

#[test]
fn dropout_modes_and_rate() {
    let store = ParamStore::new();
    let x = Tensor::ones(&[1000, 1000]);

    let mut g = Graph::inference(&store);
    let v = g.constant(x.clone());
    let y = g.dropout(v, 0.2).unwrap();
    assert_eq!(g.value(y), &x);

    let mut g = Graph::training(&store, 11);
    let v = g.constant(x.clone());
    let y = g.dropout(v, 0.0).unwrap();
    assert_eq!(g.value(y), &x);

    let y = g.dropout(v, 0.2).unwrap();
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / 1e6;
    assert!((frac - 0.2).abs() < 0.002, "zero fraction {frac}");
    assert!(g
        .value(y)
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));

    assert!(matches!(g.dropout(v, 1.0), Err(Error::DropoutRate(_))));
}

#[test]
fn optimizer_trajectories_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[4, 3], &mut rng)).unwrap();
        let x = rand_tensor(&[5, 4], &mut rng);
        let adam = Adam::default();
        for step in 0..20 {
            let grads = {
                let mut g = Graph::training(&store, step);
                let xv = g.constant(x.clone());
                let wv = g.param(w);
                let z = g.matmul(xv, wv).unwrap();
                let z = g.dropout(z, 0.2).unwrap();
                let l = g.cross_entropy(z, &[0, 1, 2, 0, 1], None).unwrap();
                g.backward(l).unwrap()
            };
            store.accumulate(&grads);
            adam.step(&mut store).unwrap();
        }
        store.value(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
