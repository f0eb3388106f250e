//! Independent oracles for the tape: plain-loop forward passes and central
//! finite differences.

use gradcore::{
    clip_grad_norm, optimizer_step, Checkpoint, Eval, Gradients, Graph, LayerSpec, Mlp, OptimizerConfig,
    ParamStore, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor so entries that are numerically zero compare on absolute error.
const FD_FLOOR: f64 = 1e-5;

fn random_net(seed: u64, hidden: &[usize], input: usize, output: usize) -> (Mlp, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = Mlp::new(LayerSpec::new(input, hidden, output).unwrap(), "net.");
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut rng).unwrap();
    // Non-zero biases so their gradients are exercised away from the init point.
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".b")).map(String::from).collect();
    for name in names {
        let n = store.get(&name).unwrap().numel();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        store.set(&name, Tensor::vector(&b).unwrap()).unwrap();
    }
    (mlp, store)
}

fn random_input(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Forward pass written with explicit loops over rows, units and inputs.
fn plain_forward(mlp: &Mlp, store: &ParamStore, x: &Tensor) -> Vec<Vec<f64>> {
    let rows = x.shape()[0];
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut h: Vec<f64> = x.row(r).to_vec();
        let layers = mlp.spec.num_layers();
        for l in 0..layers {
            let w = store.get(&mlp.weight_name(l)).unwrap();
            let b = store.get(&mlp.bias_name(l)).unwrap();
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0; fan_out];
            for j in 0..fan_out {
                let mut acc = b.data()[j];
                for i in 0..fan_in {
                    acc += h[i] * w.data()[i * fan_out + j];
                }
                next[j] = if l + 1 < layers { acc.tanh() } else { acc };
            }
            h = next;
        }
        out.push(h);
    }
    out
}

fn mse_loss(tape: &mut Tape, mlp: &Mlp, store: &ParamStore, x: &Tensor) -> Var {
    let xv = tape.constant(x.clone()).unwrap();
    let y = mlp.forward(tape, store, &xv).unwrap();
    let sq = tape.square(y).unwrap();
    tape.mean(sq).unwrap()
}

fn loss_value(mlp: &Mlp, store: &ParamStore, x: &Tensor) -> f64 {
    let y = mlp.forward(&mut Eval, store, x).unwrap();
    y.sum_squares() / y.numel() as f64
}

fn assert_matches_finite_differences(mlp: &Mlp, store: &ParamStore, x: &Tensor) {
    let mut tape = Tape::new();
    let loss = mse_loss(&mut tape, mlp, store, x);
    let grads = tape.backward(loss, store).unwrap();
    for (name, param) in store.iter() {
        let g = grads.get(name).unwrap();
        for i in 0..param.numel() {
            let mut plus = store.clone();
            let mut minus = store.clone();
            let mut d = param.data().to_vec();
            d[i] += FD_STEP;
            plus.set(name, Tensor::new(param.shape().to_vec(), d.clone()).unwrap()).unwrap();
            d[i] -= 2.0 * FD_STEP;
            minus.set(name, Tensor::new(param.shape().to_vec(), d).unwrap()).unwrap();
            let fd = (loss_value(mlp, &plus, x) - loss_value(mlp, &minus, x)) / (2.0 * FD_STEP);
            let an = g.data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(FD_FLOOR);
            assert!(rel < FD_REL_TOL, "{name}[{i}]: analytic {an}, fd {fd}, rel {rel}");
        }
    }
}

#[test]
fn forward_matches_plain_loops() {
    for (seed, hidden) in [(1, vec![7]), (2, vec![16, 8]), (3, vec![32, 32])] {
        let (mlp, store) = random_net(seed, &hidden, 5, 3);
        let x = random_input(seed, 9, 5);
        let fast = mlp.forward(&mut Eval, &store, &x).unwrap();
        let slow = plain_forward(&mlp, &store, &x);
        for (r, row) in slow.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((fast.row(r)[j] - v).abs() < 1e-12);
            }
        }
        // The tape records the same values.
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = mlp.forward(&mut tape, &store, &xv).unwrap();
        assert_eq!(tape.value_of(y).unwrap(), &fast);
    }
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    let (mlp, store) = random_net(11, &[6], 3, 2);
    assert_matches_finite_differences(&mlp, &store, &random_input(11, 4, 3));
}

#[test]
fn three_layer_width_32_gradients_match_finite_differences() {
    let (mlp, store) = random_net(12, &[32, 32], 4, 2);
    assert_matches_finite_differences(&mlp, &store, &random_input(12, 6, 4));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let (mlp, store) = random_net(21, &[8, 8], 3, 2);
    let x1 = random_input(1, 5, 3);
    let x2 = random_input(2, 5, 3);
    let (a, b) = (0.7, -1.3);

    let mut tape = Tape::new();
    let l1 = mse_loss(&mut tape, &mlp, &store, &x1);
    let l2 = mse_loss(&mut tape, &mlp, &store, &x2);
    let s1 = tape.scale(l1, a).unwrap();
    let s2 = tape.scale(l2, b).unwrap();
    let combo = tape.add(s1, s2).unwrap();
    let g = tape.backward(combo, &store).unwrap();

    let mut t1 = Tape::new();
    let l1 = mse_loss(&mut t1, &mlp, &store, &x1);
    let g1 = t1.backward(l1, &store).unwrap();
    let mut t2 = Tape::new();
    let l2 = mse_loss(&mut t2, &mlp, &store, &x2);
    let g2 = t2.backward(l2, &store).unwrap();

    for (name, gc) in g.iter() {
        let (v1, v2) = (g1.get(name).unwrap(), g2.get(name).unwrap());
        for i in 0..gc.numel() {
            let expect = a * v1.data()[i] + b * v2.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-10, "{name}[{i}]");
        }
    }
}

#[test]
fn training_is_bit_deterministic() {
    let run = || {
        let (mlp, mut store) = random_net(5, &[16], 3, 2);
        let x = random_input(5, 8, 3);
        let mut trace = Vec::new();
        for _ in 0..20 {
            let mut tape = Tape::new();
            let loss = mse_loss(&mut tape, &mlp, &store, &x);
            trace.push(tape.item(loss).unwrap().to_bits());
            let g = tape.backward(loss, &store).unwrap();
            optimizer_step(&mut store, &g, &OptimizerConfig::with_lr(1e-2)).unwrap();
        }
        (trace, Checkpoint::from_store("t", mlp.spec.clone(), &store).encode())
    };
    assert_eq!(run(), run());
}

#[test]
fn adamw_descends_a_regression_loss() {
    let (mlp, mut store) = random_net(8, &[16], 3, 2);
    let x = random_input(8, 16, 3);
    let first = loss_value(&mlp, &store, &x);
    for _ in 0..200 {
        let mut tape = Tape::new();
        let loss = mse_loss(&mut tape, &mlp, &store, &x);
        let g = tape.backward(loss, &store).unwrap();
        optimizer_step(&mut store, &g, &OptimizerConfig::with_lr(1e-2)).unwrap();
    }
    assert!(loss_value(&mlp, &store, &x) < 0.1 * first);
    assert_eq!(store.step(), 200);
}

fn gradients_strategy() -> impl Strategy<Value = Gradients> {
    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..6), 1..4).prop_map(|tensors| {
        let mut g = Gradients::new();
        for (i, t) in tensors.iter().enumerate() {
            g.insert(format!("p{i}"), Tensor::vector(t).unwrap());
        }
        g
    })
}

proptest! {
    #[test]
    fn clip_is_idempotent(g in gradients_strategy(), max_norm in 1e-3f64..1e3) {
        let once = clip_grad_norm(&g, max_norm).unwrap();
        let twice = clip_grad_norm(&once, max_norm).unwrap();
        prop_assert!(once.global_norm() <= max_norm + 1e-12 * max_norm.max(1.0));
        for (name, t) in once.iter() {
            let t2 = twice.get(name).unwrap();
            for (a, b) in t.data().iter().zip(t2.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact(
        widths in prop::collection::vec(1usize..5, 2..4),
        seed in any::<u64>(),
    ) {
        let spec = LayerSpec { widths };
        let mlp = Mlp::new(spec.clone(), "m.");
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bytes = Checkpoint::from_store("field", spec, &store).encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back.to_store().iter().count(), store.len());
    }
}
