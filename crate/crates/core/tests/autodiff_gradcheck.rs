//! Finite-difference oracle for every tape operator: central differences
//! with step 1e-4 against the analytic backward pass, 20 seeds each.

mod common;

use common::{gradcheck, project, random_tensor, rng};
use fedrecon_core::autodiff::{adam_step, AdamState, ParamSet};
use fedrecon_core::{Tape, Tensor};
use rand::Rng;

const SEEDS: u64 = 20;

/// Values bounded away from zero so no central difference straddles a kink.
fn away_from_zero(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv2d_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let n = r.random_range(1..3);
        let cin = r.random_range(1..3);
        let cout = r.random_range(1..3);
        let k = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..3);
        let pad = if k == 3 { r.random_range(0..2) } else { 0 };
        let side = r.random_range(3..6);
        let x = random_tensor(&mut r, &[n, cin, side, side], 1.0);
        let w = random_tensor(&mut r, &[cout, cin, k, k], 1.0);
        let b = random_tensor(&mut r, &[cout], 1.0);
        gradcheck(&[x, w, b], 64, seed, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, seed)
        });
    }
}

#[test]
fn upsample_and_pooling_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let c = r.random_range(1..3);
        let x = random_tensor(&mut r, &[1, c, 4, 4], 1.0);
        gradcheck(&[x.clone()], 64, seed, |t, v| {
            let y = t.upsample_nearest2(v[0])?;
            project(t, y, seed)
        });
        gradcheck(&[x], 64, seed, |t, v| {
            let y = t.maxpool2(v[0])?;
            project(t, y, seed)
        });
    }
}

#[test]
fn activations_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(200 + seed);
        let len = r.random_range(2..40);
        let x = away_from_zero(&mut r, &[len]);
        gradcheck(&[x.clone()], 64, seed, |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, seed)
        });
        gradcheck(&[x.clone()], 64, seed, |t, v| {
            let y = t.leaky_relu(v[0], 0.2)?;
            project(t, y, seed)
        });
        let x3 = random_tensor(&mut r, &[len], 3.0);
        gradcheck(&[x3], 64, seed, |t, v| {
            let y = t.sigmoid(v[0])?;
            project(t, y, seed)
        });
    }
}

#[test]
fn linear_concat_and_pooling_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(300 + seed);
        let (n, fin, fout) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let x = random_tensor(&mut r, &[n, fin], 1.0);
        let w = random_tensor(&mut r, &[fout, fin], 1.0);
        let b = random_tensor(&mut r, &[fout], 1.0);
        gradcheck(&[x, w, b], 64, seed, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        });

        let a = random_tensor(&mut r, &[2, 1, 3, 3], 1.0);
        let bb = random_tensor(&mut r, &[2, 2, 3, 3], 1.0);
        gradcheck(&[a, bb], 64, seed, |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, seed)
        });

        let g = random_tensor(&mut r, &[2, 3, 2, 4], 1.0);
        gradcheck(&[g], 64, seed, |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, seed)
        });
    }
}

#[test]
fn losses_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(400 + seed);
        let len = r.random_range(2..64);
        let pred = away_from_zero(&mut r, &[len]);
        let reference = Tensor::zeros(&[len]);
        gradcheck(&[pred, reference], 64, seed, |t, v| t.l1_loss(v[0], v[1]));

        let p: Vec<f64> = (0..len).map(|_| r.random_range(0.05..0.95)).collect();
        let p = Tensor::from_vec(p);
        for target in [0.0, 1.0] {
            gradcheck(&[p.clone()], 64, seed, |t, v| {
                let b = t.bce_terms(v[0], target)?;
                t.mean(b)
            });
        }
    }
}

#[test]
fn elementwise_helpers_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng(500 + seed);
        let len = r.random_range(1..30);
        let a = random_tensor(&mut r, &[len], 2.0);
        let b = random_tensor(&mut r, &[len], 2.0);
        gradcheck(&[a, b], 64, seed, |t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[1])?;
            let k = t.scale(m, -0.7)?;
            let mean = t.mean(k)?;
            let sum = t.sum(m)?;
            t.add(mean, sum)
        });
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    for seed in 0..SEEDS {
        let mut r = rng(600 + seed);
        let x = random_tensor(&mut r, &[1, 2, 4, 4], 1.0);
        let w = random_tensor(&mut r, &[3, 2, 3, 3], 1.0);
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));

        let grads = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.variable(w.clone());
            let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
            let act = t.leaky_relu(y, 0.1).unwrap();
            let l1 = t.sum(act).unwrap();
            let sq = t.mul(y, y).unwrap();
            let l2 = t.mean(sq).unwrap();
            let s1 = t.scale(l1, ca).unwrap();
            let s2 = t.scale(l2, cb).unwrap();
            let loss = t.add(s1, s2).unwrap();
            t.backward(loss).unwrap().get(wv).unwrap().to_vec()
        };
        let g1 = grads(1.0, 0.0);
        let g2 = grads(0.0, 1.0);
        let combined = grads(a, b);
        for ((c, x1), x2) in combined.iter().zip(&g1).zip(&g2) {
            assert!((c - (a * x1 + b * x2)).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng(77);
        let x = random_tensor(&mut r, &[2, 3, 8, 8], 1.0);
        let w = random_tensor(&mut r, &[4, 3, 3, 3], 1.0);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.variable(w);
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        let p = t.maxpool2(y).unwrap();
        let s = t.sum(p).unwrap();
        let out = t.value(s).item();
        (out, t.backward(s).unwrap().get(wv).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn scalar_params(value: f64, grad: f64) -> ParamSet {
    let mut p = ParamSet::new();
    let mut t = Tensor::scalar(value);
    t.accumulate_grad(&[grad]).unwrap();
    p.insert("w", t).unwrap();
    p
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = scalar_params(0.75, 0.0);
    let mut s = AdamState::new(&p);
    adam_step(&mut p, &mut s, 1e-3).unwrap();
    assert_eq!(p.get("w").unwrap().item(), 0.75);
    assert_eq!(s.step(), 1);
}

#[test]
fn adam_first_step_is_bias_corrected() {
    // m̂ = g, v̂ = g² after one step, so Δ = −lr·g/(|g| + ε).
    let lr = 1e-4;
    let mut p = scalar_params(1.0, 1.0);
    let mut s = AdamState::new(&p);
    adam_step(&mut p, &mut s, lr).unwrap();
    let expected = 1.0 - lr * (1.0 / (1.0 + 1e-8));
    assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    assert_eq!(p.get("w").unwrap().grad().unwrap(), &[0.0]);
}

#[test]
fn adam_reports_the_parameter_without_gradient() {
    let mut p = ParamSet::new();
    p.insert("layer.bias", Tensor::zeros(&[3])).unwrap();
    let mut s = AdamState::new(&p);
    let err = adam_step(&mut p, &mut s, 1e-3).unwrap_err();
    assert!(err.to_string().contains("layer.bias"), "{err}");
}

#[test]
fn adam_is_bit_deterministic() {
    let run = || {
        let mut p = scalar_params(0.3, 0.0);
        let mut s = AdamState::new(&p);
        for g in [0.5, -1.25] {
            p.get_mut("w").unwrap().accumulate_grad(&[g]).unwrap();
            adam_step(&mut p, &mut s, 1e-3).unwrap();
        }
        p.get("w").unwrap().item().to_bits()
    };
    assert_eq!(run(), run());
}
