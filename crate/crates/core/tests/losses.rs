mod common;

use common::{randn, randn32, uniform, H, SEEDS, TOL};
use moe_restore::gradcheck::finite_diff_check;
use moe_restore::losses::{balance_loss, balance_value, charbonnier, fft_loss, total_loss, LossWeights};
use moe_restore::{Graph, Tensor};
use proptest::prelude::*;

fn charb_value(p: &Tensor<f32>, t: &Tensor<f32>, eps: f64) -> f32 {
    let mut g = Graph::inference();
    let (pv, tv) = (g.constant(p.clone()), g.constant(t.clone()));
    let l = charbonnier(&mut g, pv, tv, eps).unwrap();
    g.value(l).item()
}

fn fft_value(p: &Tensor<f64>, t: &Tensor<f64>) -> f64 {
    let mut g = Graph::inference();
    let (pv, tv) = (g.constant(p.clone()), g.constant(t.clone()));
    let l = fft_loss(&mut g, pv, tv).unwrap();
    g.value(l).item()
}

#[test]
fn charbonnier_identity_is_eps_exactly() {
    for seed in SEEDS {
        let p = randn32(&[2, 3, 8, 8], seed);
        assert_eq!(charb_value(&p, &p, 1e-3), 1e-3f32);
    }
}

#[test]
fn charbonnier_reduces_to_abs() {
    let p = Tensor::new(&[1], vec![3.0f32]).unwrap();
    let t = Tensor::new(&[1], vec![0.0f32]).unwrap();
    assert_eq!(charb_value(&p, &t, 0.0), 3.0);
}

#[test]
fn charbonnier_gradient_at_zero_residual() {
    let t = randn(&[1, 1, 4, 4], 1);
    let err = finite_diff_check(
        |g, p| {
            let tv = g.constant(t.clone());
            charbonnier(g, p, tv, 1e-3)
        },
        &t,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
    let mut g = Graph::new();
    let p = g.input(t.clone(), true);
    let tv = g.constant(t.clone());
    let l = charbonnier(&mut g, p, tv, 1e-3).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(p).unwrap().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn charbonnier_gradients() {
    for seed in SEEDS {
        let t = randn(&[1, 3, 4, 4], seed + 50);
        let err = finite_diff_check(
            |g, p| {
                let tv = g.constant(t.clone());
                charbonnier(g, p, tv, 1e-3)
            },
            &randn(&[1, 3, 4, 4], seed),
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }
}

#[test]
fn charbonnier_rejects_shape_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let b = g.constant(Tensor::zeros(&[1, 3, 4, 2]));
    assert!(charbonnier(&mut g, a, b, 1e-3).is_err());
}

#[test]
fn balance_examples() {
    assert_eq!(balance_value(&[3.0; 4], &[5.0; 4], 1e-8, false).unwrap(), 0.0);
    // mu_W = 1, sigma_W = 1
    assert_eq!(balance_value(&[0.0, 2.0], &[4.0, 4.0], 0.0, false).unwrap(), 1.0);
    // squared variant of the same point: sigma^2 / mu^2 = 1
    assert_eq!(balance_value(&[0.0, 2.0], &[4.0, 4.0], 0.0, true).unwrap(), 1.0);
    assert_eq!(balance_value(&[0.0, 4.0], &[4.0, 4.0], 0.0, true).unwrap(), 1.0);
    assert_eq!(balance_value(&[0.0, 4.0], &[4.0, 4.0], 0.0, false).unwrap(), 0.5);
}

#[test]
fn balance_decreases_toward_uniform() {
    let s = [7.0, 7.0];
    let mut prev = f64::INFINITY;
    for i in 0..=8 {
        let a = 0.2 + 0.1 * i as f64;
        let v = balance_value(&[a, 2.0 - a], &s, 1e-8, false).unwrap();
        assert!(v < prev, "{a}: {v} !< {prev}");
        prev = v;
    }
    assert_eq!(prev, 0.0);
}

#[test]
fn balance_graph_matches_value_and_gradients() {
    for seed in SEEDS {
        for squared in [false, true] {
            let score = uniform(&[2, 4, 4, 4], 0.05, 1.0, seed);
            let s_totals = [10.0, 12.0, 5.0, 5.0];
            let mut g = Graph::inference();
            let sv = g.constant(score.clone());
            let l = balance_loss(&mut g, sv, &s_totals, 1e-8, squared).unwrap();
            let w: Vec<f64> = (0..4)
                .map(|e| (0..2).map(|b| score.data()[(b * 4 + e) * 16..(b * 4 + e + 1) * 16].iter().sum::<f64>()).sum())
                .collect();
            let want = balance_value(&w, &s_totals, 1e-8, squared).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-12);

            let err = finite_diff_check(|g, sv| balance_loss(g, sv, &s_totals, 1e-8, squared), &score, H).unwrap();
            assert!(err < TOL, "{err}");
        }
    }
}

#[test]
fn balance_rejects_mismatch() {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::full(&[1, 3, 2, 2], 0.3));
    assert!(balance_loss(&mut g, s, &[1.0, 2.0], 1e-8, false).is_err());
}

#[test]
fn fft_loss_identity_and_dc_shift() {
    let p = randn(&[1, 2, 4, 4], 1);
    assert_eq!(fft_value(&p, &p), 0.0);

    let c = 0.37;
    let mut q = p.clone();
    q.data_mut().iter_mut().for_each(|v| *v += c);
    let got = fft_value(&q, &p);

    // brute-force DFT of both images
    let dft = |t: &Tensor<f64>| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for plane in t.data().chunks(16) {
            for u in 0..4 {
                for v in 0..4 {
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..4 {
                        for x in 0..4 {
                            let a = -2.0 * std::f64::consts::PI * ((u * y) as f64 / 4.0 + (v * x) as f64 / 4.0);
                            re += plane[y * 4 + x] * a.cos();
                            im += plane[y * 4 + x] * a.sin();
                        }
                    }
                    out.push((re, im));
                }
            }
        }
        out
    };
    let (fq, fp) = (dft(&q), dft(&p));
    let oracle: f64 =
        fq.iter().zip(&fp).map(|(a, b)| (a.0 - b.0).abs() + (a.1 - b.1).abs()).sum::<f64>() / (2.0 * fq.len() as f64);
    assert!((got - oracle).abs() < 1e-9);
    assert!((got - c / 2.0).abs() < 1e-9);
}

#[test]
fn fft_loss_gradients() {
    for seed in SEEDS {
        let t = randn(&[1, 1, 4, 4], seed + 7);
        let err = finite_diff_check(
            |g, p| {
                let tv = g.constant(t.clone());
                fft_loss(g, p, tv)
            },
            &randn(&[1, 1, 4, 4], seed),
            // piecewise linear, so a wide step has no truncation error and keeps
            // rounding noise far below the 1e-8 floor where a gradient is exactly zero
            1e-3,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }
}

#[test]
fn fft_loss_rejects_odd_sizes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[1, 1, 6, 4]));
    assert!(fft_loss(&mut g, a, a).is_err());
}

#[test]
fn default_weights() {
    let w = LossWeights::default();
    assert_eq!((w.lambda1, w.lambda2, w.charb_eps, w.balance_eps), (0.01, 0.1, 1e-3, 1e-8));
    assert!(!w.cv_squared);
    assert!(LossWeights { lambda1: -1.0, ..w }.validate().is_err());
}

#[test]
fn total_composition() {
    let p = randn32(&[1, 3, 8, 8], 1);
    let t = randn32(&[1, 3, 8, 8], 2);
    let uniform_score = Tensor::full(&[1, 4, 8, 8], 0.25f32);
    let s_uniform = [32.0; 4];

    // identity prediction with uniform routing
    let mut g = Graph::new();
    let (pv, sv) = (g.constant(p.clone()), g.constant(uniform_score.clone()));
    let b = balance_loss(&mut g, sv, &s_uniform, 1e-8, false).unwrap();
    let (_, r) = total_loss(&mut g, pv, pv, Some(b), &LossWeights::default()).unwrap();
    assert_eq!(r.total, 1e-3f32 as f64);
    assert_eq!((r.balance, r.fft), (0.0, 0.0));

    // zero weights leave only the reconstruction term
    let mut g = Graph::new();
    let (pv, tv, sv) = (g.constant(p.clone()), g.constant(t.clone()), g.constant(randn32(&[1, 4, 8, 8], 3)));
    let b = balance_loss(&mut g, sv, &[40.0, 20.0, 4.0, 0.0], 1e-8, false).unwrap();
    let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, ..Default::default() };
    let (_, r) = total_loss(&mut g, pv, tv, Some(b), &zero).unwrap();
    assert_eq!(r.total, r.charbonnier);

    for seed in SEEDS {
        let mut g = Graph::new();
        let score = uniform(&[1, 4, 8, 8], 0.01, 1.0, seed).cast::<f32>();
        let (pv, tv, sv) = (g.constant(randn32(&[1, 3, 8, 8], seed)), g.constant(t.clone()), g.constant(score));
        let b = balance_loss(&mut g, sv, &[40.0, 20.0, 4.0, 0.0], 1e-8, false).unwrap();
        let w = LossWeights::default();
        let (_, r) = total_loss(&mut g, pv, tv, Some(b), &w).unwrap();
        let sum = r.charbonnier + w.lambda1 * r.balance + w.lambda2 * r.fft;
        assert!((r.total - sum).abs() < 1e-6, "{} vs {sum}", r.total);
    }
}

proptest! {
    #[test]
    fn charbonnier_at_least_eps(seed in 0u64..500, shift in -2.0f32..2.0) {
        let p = randn32(&[1, 1, 4, 4], seed);
        let mut t = p.clone();
        t.data_mut()[0] += shift;
        let v = charb_value(&p, &t, 1e-3);
        prop_assert!(v >= 1e-3);
        if shift.abs() > 1e-2 {
            prop_assert!(v > 1e-3);
        }
    }

    #[test]
    fn balance_nonnegative(w in prop::collection::vec(0.0f64..100.0, 1..8), seed in 0u64..100) {
        let s: Vec<f64> = w.iter().map(|v| (v * (seed as f64 + 1.0)).floor()).collect();
        prop_assert!(balance_value(&w, &s, 1e-8, false).unwrap() >= 0.0);
    }

    #[test]
    fn fft_loss_separates_distinct_images(seed in 0u64..200) {
        let p = randn(&[1, 1, 8, 8], seed);
        let t = randn(&[1, 1, 8, 8], seed + 1000);
        prop_assert!(fft_value(&p, &t) > 1e-5);
    }
}
