use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use xmodal_tensor::rng::SplitMix64;
use xmodal_tensor::{gradient_check, Graph, Init, ParamStore, Tape, Tensor, TensorError};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn random(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity_and_annihilator() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::identity(2));
    let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let z = t.constant(Tensor::zeros(&[2, 3]));
    let any = t.constant(Tensor::matrix(3, 2, vec![5.0, -1.0, 2.0, 7.0, 0.5, 3.0]).unwrap());
    let p = t.matmul(z, any).unwrap();
    assert_eq!(t.value(p), &[0.0; 4]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SplitMix64::seed_from_u64(11);
    let (a, b) = (random(&mut rng, 12), random(&mut rng, 8));
    let mut t = Tape::new();
    let va = t.constant(Tensor::matrix(3, 4, a.clone()).unwrap());
    let vb = t.constant(Tensor::matrix(4, 2, b.clone()).unwrap());
    let p = t.matmul(va, vb).unwrap();
    let oracle = naive_matmul(&a, &b, 3, 4, 2);
    for (x, y) in t.value(p).iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn elementwise_definitions() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z).unwrap();
    assert_eq!(t.scalar(s), 0.5);
    let v = t.constant(Tensor::vector(vec![-1.0, 2.0]));
    let r = t.relu(v).unwrap();
    assert_eq!(t.value(r), &[0.0, 2.0]);

    // tanh against a Taylor-series exponential.
    let exp_series = |x: f64| {
        let (mut term, mut sum) = (1.0f64, 1.0f64);
        for n in 1..40 {
            term *= x / n as f64;
            sum += term;
        }
        sum
    };
    let e = exp_series(0.5);
    let oracle = (e - 1.0 / e) / (e + 1.0 / e);
    let h = t.constant(Tensor::scalar(0.5));
    let th = t.tanh(h).unwrap();
    assert!((t.scalar(th) - oracle).abs() < 1e-12);
    assert!((t.scalar(th) - 0.462117).abs() < 1e-6);
}

#[test]
fn log_rejects_non_positive() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(t.log(v), Err(TensorError::Domain { .. })));
    let w = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(t.add(v, w), Err(TensorError::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let s = t.softmax(a, 0, None).unwrap();
    assert_eq!(t.value(s), &[0.5, 0.5]);

    let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.softmax(b, 0, None).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    let oracle: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp() / z).collect();
    for ((x, y), lit) in t.value(s).iter().zip(&oracle).zip([0.09003, 0.24473, 0.66524]) {
        assert!((x - y).abs() < 1e-12);
        assert!((x - lit).abs() < 1e-5);
    }

    let c = t.constant(Tensor::vector(vec![5.0, 9.0]));
    let s = t.softmax(c, 0, Some(&[true, false])).unwrap();
    assert_eq!(t.value(s), &[1.0, 0.0]);
    assert!(matches!(
        t.softmax(c, 0, Some(&[false, false])),
        Err(TensorError::Degenerate(_))
    ));
}

#[test]
fn softmax_along_columns() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 3.0]]).unwrap());
    let s = t.softmax(a, 0, None).unwrap();
    let v = t.value(s);
    assert_eq!(v[0], 0.5);
    assert_eq!(v[2], 0.5);
    assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let ones = t.constant(Tensor::full(&[2], 1.0));
    let zeros = t.constant(Tensor::zeros(&[2]));
    let c = t.constant(Tensor::vector(vec![4.0, 4.0]));
    let y = t.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert_eq!(t.value(y), &[0.0, 0.0]);

    let x = t.constant(Tensor::vector(vec![1.0, 3.0]));
    let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
    // (x - 2) / sqrt(1 + 1e-5)
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((t.value(y)[0] + expect).abs() < 1e-15);
    assert!((t.value(y)[1] - expect).abs() < 1e-15);
    assert!(expect < 1.0 && expect > 0.99999);

    let bias = t.constant(Tensor::vector(vec![0.3, -0.7]));
    let y = t.layer_norm(x, zeros, bias, 1e-5).unwrap();
    assert_eq!(t.value(y), &[0.3, -0.7]);
}

#[test]
fn embedding_gather_and_scatter() {
    let mut store = ParamStore::new();
    store.insert("table", Tensor::identity(3)).unwrap();
    let mut g = Graph::new(&store);
    let table = g.param("table").unwrap();
    let rows = g.embedding(table, &[2, 0]).unwrap();
    assert_eq!(g.value(rows), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    assert!(matches!(
        g.embedding(table, &[3]),
        Err(TensorError::Index { index: 3, size: 3 })
    ));
    let rep = g.embedding(table, &[1, 1]).unwrap();
    let loss = g.sum(rep).unwrap();
    let mut tape = g.into_tape();
    tape.backward(loss, &mut store).unwrap();
    let grad = store.get("table").unwrap().grad().unwrap();
    assert_eq!(grad, &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    store.init("table", &[5, 3], Init::Xavier, 4).unwrap();
    let err = gradient_check(&mut store, 1e-5, |g| {
        let t = g.param("table")?;
        let e = g.embedding(t, &[4, 1, 4])?;
        let s = g.tanh(e)?;
        g.sum(s)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let mut g = Graph::new(&store);
    let t = g.param("table").unwrap();
    let e = g.embedding(t, &[0, 3]).unwrap();
    let loss = g.sum(e).unwrap();
    let mut tape = g.into_tape();
    tape.backward(loss, &mut store).unwrap();
    let grad = store.get("table").unwrap().grad().unwrap();
    for r in 0..5 {
        let want = if r == 0 || r == 3 { 1.0 } else { 0.0 };
        assert!(grad[r * 3..r * 3 + 3].iter().all(|&x| x == want));
    }
}

#[test]
fn product_rule_and_accumulation() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(3.0)).unwrap();
    store.insert("y", Tensor::scalar(4.0)).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new(&store);
        let x = g.param("x").unwrap();
        let y = g.param("y").unwrap();
        let l = g.mul(x, y).unwrap();
        let mut tape = g.into_tape();
        tape.backward(l, &mut store).unwrap();
        assert!(tape.is_empty());
    }
    assert_eq!(store.get("x").unwrap().grad().unwrap(), &[8.0]);
    assert_eq!(store.get("y").unwrap().grad().unwrap(), &[6.0]);
    store.zero_grads();
    assert!(store.get("x").unwrap().grad().is_none());
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut store = ParamStore::new();
    store.insert("v", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
    let mut g = Graph::new(&store);
    let v = g.param("v").unwrap();
    let s = g.softmax(v, 0, None).unwrap();
    let l = g.sum(s).unwrap();
    let mut tape = g.into_tape();
    tape.backward(l, &mut store).unwrap();
    assert!(store.get("v").unwrap().grad().unwrap().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::new();
    store.insert("v", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new(&store);
    let v = g.param("v").unwrap();
    let mut tape = g.into_tape();
    assert!(matches!(tape.backward(v, &mut store), Err(TensorError::Usage(_))));
}

#[test]
fn two_layer_composite_matches_finite_differences() {
    let mut store = ParamStore::new();
    store.init("w1", &[4, 5], Init::Xavier, 1).unwrap();
    store.init("b1", &[5], Init::Constant(0.1), 1).unwrap();
    store.init("w2", &[5, 3], Init::Xavier, 1).unwrap();
    store.insert("x", Tensor::matrix(2, 4, vec![0.5, -0.2, 0.1, 0.9, -0.4, 0.3, 0.8, -0.6]).unwrap())
        .unwrap();
    let err = gradient_check(&mut store, 1e-5, |g| {
        let x = g.param("x")?;
        let w1 = g.param("w1")?;
        let b1 = g.param("b1")?;
        let w2 = g.param("w2")?;
        let h = g.matmul(x, w1)?;
        let b = g.broadcast_rows(b1, 2)?;
        let h = g.add(h, b)?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, w2)?;
        let ls = g.log_softmax(o, 1)?;
        let p = g.pick(ls, &[1, 5])?;
        let m = g.mean(p)?;
        g.scale(m, -1.0)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_op_passes_gradient_check() {
    let mut store = ParamStore::new();
    store.init("a", &[3, 4], Init::Xavier, 9).unwrap();
    store.init("b", &[3, 4], Init::Xavier, 10).unwrap();
    store.init("g", &[4], Init::Constant(1.3), 0).unwrap();
    store.init("h", &[4], Init::Constant(-0.2), 0).unwrap();
    // Keep exp/log inputs positive and relu inputs away from the kink.
    store.get_mut("a").unwrap().data_mut().iter_mut().for_each(|v| *v += 1.5);
    let err = gradient_check(&mut store, 1e-5, |g| -> Result<_, TensorError> {
        let a = g.param("a")?;
        let b = g.param("b")?;
        let gain = g.param("g")?;
        let bias = g.param("h")?;
        let mut terms = Vec::new();
        let bt = g.transpose(b)?;
        let mm = g.matmul(a, bt)?;
        terms.push(g.sum(mm)?);
        let s = g.sub(a, b)?;
        let m = g.mul(s, b)?;
        let sig = g.sigmoid(m)?;
        terms.push(g.sum(sig)?);
        let l = g.log(a)?;
        let e = g.exp(b)?;
        let r = g.relu(l)?;
        let t = g.tanh(e)?;
        let ad = g.add(r, t)?;
        terms.push(g.mean(ad)?);
        let sm = g.softmax(b, 1, Some(&[true, false, true, true, false, true, true, true, true, true, true, false]))?;
        let w = g.constant_from(&[3, 4], (0..12).map(|i| i as f64 * 0.1).collect())?;
        let smw = g.mul(sm, w)?;
        terms.push(g.sum(smw)?);
        let smc = g.softmax(b, 0, None)?;
        let smcw = g.mul(smc, w)?;
        terms.push(g.sum(smcw)?);
        let ln = g.layer_norm(b, gain, bias, 1e-5)?;
        let lnw = g.mul(ln, w)?;
        terms.push(g.sum(lnw)?);
        let c = g.concat(&[a, b], 1)?;
        let sl = g.slice(c, 1, 2, 4)?;
        let rs = g.reshape(sl, &[4, 3])?;
        let rs2 = g.scale(rs, 0.7)?;
        let rs3 = g.add_scalar(rs2, 0.1)?;
        let sq = g.mul(rs3, rs3)?;
        terms.push(g.sum(sq)?);
        let row = g.slice(a, 0, 1, 1)?;
        let br = g.broadcast_rows(row, 3)?;
        let bm = g.mul(br, b)?;
        terms.push(g.sum(bm)?);
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(total)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #[test]
    fn softmax_normalizes_and_is_shift_invariant(
        values in prop::collection::vec(-20.0f64..20.0, 2..8),
        mask_bits in prop::collection::vec(any::<bool>(), 8),
        shift in -50.0f64..50.0,
    ) {
        let n = values.len();
        let mut mask: Vec<bool> = mask_bits[..n].to_vec();
        mask[0] = true;
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(values.clone()));
        let s = t.softmax(a, 0, Some(&mask)).unwrap();
        let sum: f64 = t.value(s).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        for (p, m) in t.value(s).iter().zip(&mask) {
            prop_assert!(*p >= 0.0);
            if !m { prop_assert_eq!(*p, 0.0); }
        }
        let shifted = t.constant(Tensor::vector(values.iter().map(|v| v + shift).collect()));
        let s2 = t.softmax(shifted, 0, Some(&mask)).unwrap();
        for (x, y) in t.value(s).iter().zip(t.value(s2)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let (a, b) = (random(&mut rng, m * k), random(&mut rng, k * n));
        let mut t = Tape::new();
        let va = t.constant(Tensor::matrix(m, k, a.clone()).unwrap());
        let vb = t.constant(Tensor::matrix(k, n, b.clone()).unwrap());
        let p = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(p).iter().zip(naive_matmul(&a, &b, m, k, n)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn double_backward_doubles_gradients(seed in any::<u64>()) {
        let mut store = ParamStore::new();
        store.init("w", &[3, 2], Init::Xavier, seed).unwrap();
        let run = |store: &mut ParamStore| {
            let mut g = Graph::new(store);
            let w = g.param("w").unwrap();
            let t = g.tanh(w).unwrap();
            let s = g.softmax(t, 1, None).unwrap();
            let p = g.pick(s, &[0, 3]).unwrap();
            let l = g.sum(p).unwrap();
            let mut tape = g.into_tape();
            tape.backward(l, store).unwrap();
        };
        run(&mut store);
        let once = store.get("w").unwrap().grad().unwrap().to_vec();
        run(&mut store);
        let twice = store.get("w").unwrap().grad().unwrap();
        for (a, b) in once.iter().zip(twice) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }
}

#[test]
fn gradient_check_trivial_cases() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(2.0)).unwrap();
    let err = gradient_check(&mut store, 1e-3, |g| {
        let x = g.param("x")?;
        g.mul(x, x)
    })
    .unwrap();
    assert!(err < 1e-6);
    let err = gradient_check(&mut store, 1e-3, |g| -> Result<_, TensorError> {
        let _ = g.param("x")?;
        Ok(g.constant(Tensor::scalar(5.0)))
    })
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn dropout_only_in_training_mode() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::full(&[64], 1.0)).unwrap();
    let mut g = Graph::new(&store);
    let x = g.param("x").unwrap();
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
    let mut a = Graph::training(&store, 5);
    let xa = a.param("x").unwrap();
    let ya = a.dropout(xa, 0.5).unwrap();
    let mut b = Graph::training(&store, 5);
    let xb = b.param("x").unwrap();
    let yb = b.dropout(xb, 0.5).unwrap();
    assert_eq!(a.value(ya), b.value(yb));
    assert!(a.value(ya).iter().any(|&v| v == 0.0));
    assert!(a.value(ya).iter().all(|&v| v == 0.0 || v == 2.0));
}
