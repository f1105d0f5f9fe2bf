use coseq_core::nn::ops::{cross_entropy, softmax};
use coseq_core::nn::{adam_step, grad_check, grad_check_store, Linear, OptimConfig, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;

/// Gradient check of `sum(target ⊙ f(a, b))` over two random parameters.
fn check_binary(
    seed: u64,
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(&mut Tape, Var, Var) -> Var,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn(a_shape, 1.0, &mut rng));
    let b = store.add("b", Tensor::randn(b_shape, 1.0, &mut rng));
    let w = Tensor::randn(out_shape, 1.0, &mut rng);
    grad_check_store(&mut store, H, |s| {
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(s, a), tape.param(s, b));
        let y = f(&mut tape, av, bv);
        let wv = tape.input(w.clone());
        let prod = tape.mul(y, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap().accumulate(&tape, s);
        tape.value(loss).data()[0] as f64
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn matmul_and_bias_gradients(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5) {
        let err = check_binary(seed, &[n, k], &[k, m], &[n, m], |t, a, b| t.matmul(a, b).unwrap());
        prop_assert!(err < TOL, "matmul {err}");
        let err = check_binary(seed, &[n, m], &[m], &[n, m], |t, a, b| t.add_row(a, b).unwrap());
        prop_assert!(err < TOL, "add_row {err}");
        let err = check_binary(seed, &[n, k], &[m, k], &[n, m], |t, a, b| t.matmul_nt(a, b).unwrap());
        prop_assert!(err < TOL, "matmul_nt {err}");
    }

    #[test]
    fn elementwise_gradients(seed in any::<u64>(), n in 1usize..4, m in 1usize..5) {
        let s = [n, m];
        for (name, err) in [
            ("add", check_binary(seed, &s, &s, &s, |t, a, b| t.add(a, b).unwrap())),
            ("sub", check_binary(seed, &s, &s, &s, |t, a, b| t.sub(a, b).unwrap())),
            ("mul", check_binary(seed, &s, &s, &s, |t, a, b| t.mul(a, b).unwrap())),
            ("tanh", check_binary(seed, &s, &s, &s, |t, a, b| { let x = t.mul(a, b).unwrap(); t.tanh(x) })),
            ("silu", check_binary(seed, &s, &s, &s, |t, a, b| { let x = t.add(a, b).unwrap(); t.silu(x) })),
            ("scale", check_binary(seed, &s, &s, &s, |t, a, b| { let x = t.scale(a, -1.7); let y = t.add_scalar(b, 0.3); t.mul(x, y).unwrap() })),
        ] {
            prop_assert!(err < TOL, "{name} {err}");
        }
    }

    #[test]
    fn structural_gradients(seed in any::<u64>(), n in 1usize..4, m in 2usize..5) {
        let err = check_binary(seed, &[n, m], &[n, m + 1], &[n, 2 * m + 1], |t, a, b| t.concat(&[a, b]).unwrap());
        prop_assert!(err < TOL, "concat {err}");
        let err = check_binary(seed, &[n, m], &[n, m], &[n, m - 1], |t, a, b| {
            let x = t.mul(a, b).unwrap();
            t.slice_cols(x, 1, m - 1).unwrap()
        });
        prop_assert!(err < TOL, "slice {err}");
        let err = check_binary(seed, &[n, m], &[n, m], &[m, n], |t, a, b| {
            let x = t.mul(a, b).unwrap();
            t.transpose(x).unwrap()
        });
        prop_assert!(err < TOL, "transpose {err}");
        let err = check_binary(seed, &[n, m], &[n, m], &[n, m], |t, a, b| {
            let x = t.add(a, b).unwrap();
            t.normalize_rows(x).unwrap()
        });
        prop_assert!(err < TOL, "normalize_rows {err}");
    }

    #[test]
    fn pooling_gradients(seed in any::<u64>(), m in 1usize..4) {
        let bags = vec![vec![0, 2, 2], vec![], vec![1]];
        let err = check_binary(seed, &[4, m], &[3, m], &[3, m], |t, a, b| {
            let e = t.embed_mean(a, bags.clone()).unwrap();
            t.mul(e, b).unwrap()
        });
        prop_assert!(err < TOL, "embed_mean {err}");
        let err = check_binary(seed, &[5, m], &[2, m], &[2, m], |t, a, b| {
            let s = t.segment_sum(a, vec![2, 3]).unwrap();
            t.mul(s, b).unwrap()
        });
        prop_assert!(err < TOL, "segment_sum {err}");
        let err = check_binary(seed, &[6, m], &[2, m], &[2, 3], |t, a, b| t.group_dot(a, b, 3).unwrap());
        prop_assert!(err < TOL, "group_dot {err}");
    }

    #[test]
    fn fused_softmax_cross_entropy_gradient(seed in any::<u64>(), n in 1usize..4, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(&[n, k], 2.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
        let err = grad_check(
            |x| {
                let mut tape = Tape::new();
                let v = tape.input(x.clone());
                let loss = tape.softmax_cross_entropy(v, &labels).unwrap();
                let g = tape.backward(loss).unwrap();
                (tape.value(loss).data()[0] as f64, g.wrt(v).unwrap().clone())
            },
            &logits,
            H,
        );
        prop_assert!(err < TOL, "softmax ce {err}");
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-1e4f32..1e4, 1..12)) {
        let p = softmax(&v).unwrap();
        prop_assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        let total: f64 = p.iter().map(|&x| x as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linear_layer_loss_gradient(seed in any::<u64>(), n in 1usize..5, d_in in 1usize..6, d_out in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", d_in, d_out, true, 1.0, &mut rng);
        store.get_mut(l.bias.unwrap()).value = Tensor::randn(&[d_out], 0.5, &mut rng);
        let x = Tensor::randn(&[n, d_in], 1.0, &mut rng);
        let target = Tensor::randn(&[n, d_out], 1.0, &mut rng);
        let err = grad_check_store(&mut store, H, |s| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let y = l.forward(&mut tape, s, xv).unwrap();
            let loss = tape.mse(y, target.clone()).unwrap();
            tape.backward(loss).unwrap().accumulate(&tape, s);
            tape.value(loss).data()[0] as f64
        });
        prop_assert!(err < TOL, "linear {err}");
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    for (a, b) in p.iter().zip(&e) {
        assert!((*a as f64 - b / z).abs() < 1e-7);
    }
    assert_eq!(softmax(&[5.0]).unwrap(), vec![1.0]);
    assert!(softmax(&[]).is_err());
}

#[test]
fn cross_entropy_of_uniform_is_log_k() {
    let ce = cross_entropy(&[0.25; 4], &[0.0, 0.0, 1.0, 0.0]).unwrap();
    assert!((ce as f64 - 4f64.ln()).abs() < 1e-6);
    assert!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap().abs() < 1e-6);
    assert!(cross_entropy(&[0.5, 0.5], &[1.0, 1.0]).is_err());
}

fn train_tiny(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let l = Linear::new(&mut store, "l", 3, 2, true, 1.0, &mut rng);
    let x = Tensor::randn(&[8, 3], 1.0, &mut rng);
    let y = Tensor::randn(&[8, 2], 1.0, &mut rng);
    let cfg = OptimConfig::default();
    let mut losses = Vec::new();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = l.forward(&mut tape, &store, xv).unwrap();
        let loss = tape.mse(out, y.clone()).unwrap();
        tape.backward(loss).unwrap().accumulate(&tape, &mut store);
        losses.push(tape.value(loss).data()[0]);
        adam_step(&mut store, &cfg).unwrap();
    }
    losses.extend(store.flatten_values());
    losses
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let a = train_tiny(11);
    let b = train_tiny(11);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_ne!(a, train_tiny(12));
}
