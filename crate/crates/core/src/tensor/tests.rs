use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Projects an arbitrary tensor to a scalar with fixed random weights so that
/// every output entry gets a distinct upstream gradient.
fn project(g: &mut Graph<'_>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(x), &mut rng));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut store = ParamStore::new();
    let i2 = store.insert("i", Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()).unwrap();
    let m = store.insert("m", Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap()).unwrap();
    let ones = store.insert("ones", Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap()).unwrap();
    let mut g = Graph::new(&store);
    let (vi, vm, vo) = (g.param(i2), g.param(m), g.param(ones));
    let im = g.matmul(vi, vm).unwrap();
    assert_eq!(g.value(im).data(), &[1.0, 2.0, 3.0, 4.0]);
    let mv = g.matmul(vm, vo).unwrap();
    assert_eq!(g.shape(mv), &[2, 1]);
    assert_eq!(g.value(mv).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Tensor::zeros(&[2, 3])).unwrap();
    let b = store.insert("b", Tensor::zeros(&[2, 3])).unwrap();
    let mut g = Graph::new(&store);
    let (va, vb) = (g.param(a), g.param(b));
    match g.matmul(va, vb) {
        Err(Error::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradcheck_fp64() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.insert("a", random(&[3, 4], &mut rng)).unwrap();
    let b = store.insert("b", random(&[4, 2], &mut rng)).unwrap();
    let report = gradcheck::check(&store, &[], 1e-5, |g| {
        let (va, vb) = (g.param(a), g.param(b));
        let c = g.matmul(va, vb)?;
        project(g, c, 9)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn batched_and_transposed_matmul_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.insert("a", random(&[2, 3, 4], &mut rng)).unwrap();
    let b = store.insert("b", random(&[2, 5, 4], &mut rng)).unwrap();
    let w = store.insert("w", random(&[4, 3], &mut rng)).unwrap();
    let lhs = store.insert("lhs", random(&[3, 5], &mut rng)).unwrap();
    let report = gradcheck::check(&store, &[], 1e-5, |g| {
        let (va, vb, vw, vl) = (g.param(a), g.param(b), g.param(w), g.param(lhs));
        let abt = g.matmul_ext(va, vb, true)?; // [2,3,5]
        let lb = g.matmul(vl, vb)?; // broadcast lhs over batch: [2,3,4]
        let aw = g.matmul(va, vw)?; // broadcast rhs: [2,3,3]
        let s1 = project(g, abt, 1)?;
        let s2 = project(g, lb, 2)?;
        let s3 = project(g, aw, 3)?;
        let t = g.add(s1, s2)?;
        g.add(t, s3)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn softmax_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.0, 0.0], &[0.5, 0.5]),
        (&[1000.0, 1000.0], &[0.5, 0.5]),
        (&[0.0, 3f64.ln()], &[0.25, 0.75]),
    ];
    for (input, expected) in cases {
        let x = g.constant(Tensor::new(vec![2], input.to_vec()).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{input:?} -> {:?}", g.value(y).data());
        }
    }
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn softmax_gradcheck_on_inner_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.insert("x", random(&[2, 3, 4], &mut rng)).unwrap();
    for axis in 0..3 {
        let report = gradcheck::check(&store, &[], 1e-5, |g| {
            let v = g.param(x);
            let y = g.softmax(v, axis)?;
            project(g, y, 4)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "axis {axis}: {report:?}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::new();
    let gain = store.insert("g", Tensor::from_fn(&[2], |_| 1.0)).unwrap();
    let bias = store.insert("b", Tensor::zeros(&[2])).unwrap();
    let mut g = Graph::new(&store);
    let (vg, vb) = (g.param(gain), g.param(bias));
    let c = g.constant(Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap());
    let y = g.layer_norm(c, vg, vb, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, vg, vb, 1e-6).unwrap();
    assert!((g.value(y).data()[0] + 1.0).abs() < 1e-6);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = store.insert("x", random(&[3, 5], &mut rng)).unwrap();
    let gain = store.insert("g", random(&[5], &mut rng)).unwrap();
    let bias = store.insert("b", random(&[5], &mut rng)).unwrap();
    let report = gradcheck::check(&store, &[], 1e-5, |g| {
        let (vx, vg, vb) = (g.param(x), g.param(gain), g.param(bias));
        let y = g.layer_norm(vx, vg, vb, 1e-6)?;
        project(g, y, 5)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn elementwise_kit_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.insert("x", random(&[4, 3], &mut rng)).unwrap();
    let y = store.insert("y", random(&[4, 3], &mut rng)).unwrap();
    let bias = store.insert("bias", random(&[3], &mut rng)).unwrap();
    let table = store.insert("table", random(&[5, 3], &mut rng)).unwrap();
    let report = gradcheck::check(&store, &[], 1e-5, |g| {
        let (vx, vy, vb, vt) = (g.param(x), g.param(y), g.param(bias), g.param(table));
        let r = g.relu(vx);
        let s = g.add(r, vy)?;
        let m = g.mul(s, vx)?;
        let a = g.add_row(m, vb)?;
        let sc = g.scale(a, 0.7);
        let rs = g.reshape(sc, &[2, 6])?;
        let e = g.embed(vt, &[1, 3, 1, 0])?;
        let p1 = project(g, rs, 6)?;
        let p2 = project(g, e, 7)?;
        g.add(p1, p2)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn attention_head_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let q = store.insert("q", random(&[2, 3, 4], &mut rng)).unwrap();
    let k = store.insert("k", random(&[2, 5, 4], &mut rng)).unwrap();
    let v = store.insert("v", random(&[2, 5, 4], &mut rng)).unwrap();
    let allowed: Vec<bool> = (0..2 * 3 * 5).map(|i| i % 4 != 3).collect();
    let report = gradcheck::check(&store, &[], 1e-5, |g| {
        let (vq, vk, vv) = (g.param(q), g.param(k), g.param(v));
        let s = g.head_scores(vq, vk, 2)?;
        let s = g.mask_logits(s, &allowed)?;
        let w = g.softmax(s, 3)?;
        let c = g.head_context(w, vv)?;
        project(g, c, 8)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn dropout_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = ParamStore::new();
    let t = random(&[4, 4], &mut rng);

    let mut train = Graph::training(&store, 1);
    let x = train.constant(t.clone());
    let y = train.dropout(x, 0.0).unwrap();
    assert_eq!(train.value(y), &t);
    assert!(train.dropout(x, 1.0).is_err());

    let mut eval = Graph::new(&store);
    let x = eval.constant(t.clone());
    let y = eval.dropout(x, 0.5).unwrap();
    assert_eq!(eval.value(y), &t);

    // survivors are scaled by 1/(1-rate), same seed gives the same mask
    let run = |seed| {
        let mut g = Graph::training(&store, seed);
        let x = g.constant(t.clone());
        let y = g.dropout(x, 0.5).unwrap();
        g.value(y).clone()
    };
    let a = run(3);
    assert_eq!(a, run(3));
    for (o, i) in a.data().iter().zip(t.data()) {
        assert!(*o == 0.0 || (o - 2.0 * i).abs() < 1e-15);
    }
}

#[test]
fn embed_lookup_and_out_of_vocabulary() {
    let mut store = ParamStore::new();
    let eye = store
        .insert("eye", Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }))
        .unwrap();
    let mut g = Graph::new(&store);
    let t = g.param(eye);
    let row = g.embed(t, &[1]).unwrap();
    assert_eq!(g.value(row).data(), &[0.0, 1.0, 0.0]);
    match g.embed(t, &[0, 7]) {
        Err(Error::IdOutOfRange { id, vocab }) => assert_eq!((id, vocab), (7, 3)),
        other => panic!("expected id error, got {other:?}"),
    }
}

#[test]
fn cross_entropy_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let forcing = g.constant(Tensor::from_rows(&[&[0.0, 1e4, 0.0], &[1e4, 0.0, 0.0]]).unwrap());
    let l = g.cross_entropy(forcing, &[1, 0], 2, 0.0).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);

    let uniform = g.constant(Tensor::zeros(&[3, 4]));
    let l = g.cross_entropy(uniform, &[0, 1, 3], 2, 0.0).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let logits = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.37).sin());
    let mut padded = logits.data().to_vec();
    padded.extend_from_slice(&[0.3, -2.0, 1.0, 0.5, 9.0, 1.0, 1.0, 1.0]);
    let a = g.constant(logits);
    let b = g.constant(Tensor::new(vec![4, 4], padded).unwrap());
    let la = g.cross_entropy(a, &[1, 3], 2, 0.1).unwrap();
    let lb = g.cross_entropy(b, &[1, 3, 2, 2], 2, 0.1).unwrap();
    assert_eq!(g.value(la).item(), g.value(lb).item());

    assert!(matches!(g.cross_entropy(a, &[2, 2], 2, 0.0), Err(Error::Empty(_))));
    assert!(g.cross_entropy(a, &[1], 2, 0.0).is_err());
}

#[test]
fn cross_entropy_gradcheck_with_smoothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let x = store.insert("logits", random(&[4, 6], &mut rng)).unwrap();
    let report = gradcheck::check(&store, &[], 1e-5, |g| {
        let v = g.param(x);
        g.cross_entropy(v, &[5, 0, 2, 3], 2, 0.1)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn backward_contracts() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::scalar(2.0)).unwrap();
    let y = store.insert("y", Tensor::scalar(3.0)).unwrap();
    let unused = store.insert("unused", Tensor::from_fn(&[2, 2], |i| i as f64)).unwrap();
    let mut grads = GradStore::zeros_like(&store);
    let mut g = Graph::new(&store);
    let (vx, vy) = (g.param(x), g.param(y));
    let p = g.mul(vx, vy).unwrap();
    g.backward(p, &mut grads).unwrap();
    assert_eq!(grads.get(x), &[3.0]);
    assert_eq!(grads.get(y), &[2.0]);
    assert_eq!(grads.get(unused), &[0.0; 4]);

    // a second pass over the same record doubles every gradient exactly
    g.backward(p, &mut grads).unwrap();
    assert_eq!(grads.get(x), &[6.0]);
    assert_eq!(grads.get(y), &[4.0]);

    let m = g.param(unused);
    assert!(g.backward(m, &mut grads).is_err());

    grads.zero();
    assert_eq!(grads.get(x), &[0.0]);
}

#[test]
fn double_backward_doubles_on_random_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let a = store.insert("a", random(&[3, 4], &mut rng)).unwrap();
    let b = store.insert("b", random(&[4, 4], &mut rng)).unwrap();
    let mut once = GradStore::zeros_like(&store);
    let mut twice = GradStore::zeros_like(&store);
    let mut g = Graph::new(&store);
    let (va, vb) = (g.param(a), g.param(b));
    let c = g.matmul(va, vb).unwrap();
    let s = g.softmax(c, 1).unwrap();
    let l = project(&mut g, s, 1).unwrap();
    g.backward(l, &mut once).unwrap();
    g.backward(l, &mut twice).unwrap();
    g.backward(l, &mut twice).unwrap();
    for ((_, o), (_, t)) in once.iter().zip(twice.iter()) {
        for (x, y) in o.iter().zip(t) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

#[test]
fn forward_is_deterministic_given_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let a = store.insert("a", random(&[5, 5], &mut rng)).unwrap();
    let run = || {
        let mut g = Graph::training(&store, 42);
        let v = g.param(a);
        let d = g.dropout(v, 0.3).unwrap();
        let s = g.softmax(d, 1).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn tensor_construction_checks_length() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![3, 4], values).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
