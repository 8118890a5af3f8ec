//! Update and forget gates against step-by-step compositions.

use hcgnet::context::ExecOptions;
use hcgnet::gates::{ForgetGateConfig, ForgetGateParams, UpdateGateConfig, UpdateGateParams};
use hcgnet::kernels::norm::{BnMode, BnState};
use hcgnet::tensor::{seeded_rng, Shape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

/// Attention pooling by direct double loops: softmax of the 1x1 projection, then a weighted sum.
fn pool(x: &Tensor<f64>, ws: &Tensor<f64>, n: usize) -> Vec<f64> {
    let s = x.shape();
    let mut logits = vec![0.0; s.h * s.w];
    for y in 0..s.h {
        for xx in 0..s.w {
            logits[y * s.w + xx] = (0..s.c).map(|c| ws.at(0, c, 0, 0) * x.at(n, c, y, xx)).sum();
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = e.iter().sum();
    (0..s.c)
        .map(|c| {
            let mut acc = 0.0;
            for y in 0..s.h {
                for xx in 0..s.w {
                    acc += x.at(n, c, y, xx) * e[y * s.w + xx] / total;
                }
            }
            acc
        })
        .collect()
}

fn affine(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let ws = w.shape();
    (0..ws.n)
        .map(|o| b.data()[o] + (0..ws.c).map(|i| w.at(o, i, 0, 0) * x[i]).sum::<f64>())
        .collect()
}

fn bn_inference(bn: &BnState<f64>, k: usize, x: f64) -> f64 {
    bn.gamma[k] * (x - bn.running_mean[k]) / (bn.running_var[k] + bn.eps).sqrt() + bn.beta[k]
}

struct Oracle {
    v: Vec<f64>,
    u33: Vec<f64>,
    u55: Vec<f64>,
}

/// The update gate for image `n`, with inference-mode normalization.
fn update_oracle(p: &UpdateGateParams<f64>, x33: &Tensor<f64>, x55: &Tensor<f64>, n: usize) -> Oracle {
    let c = x33.shape().c;
    let z33 = pool(x33, &p.ws33, n);
    let z55 = pool(x55, &p.ws55, n);
    let cat: Vec<f64> = z33.iter().chain(&z55).copied().collect();
    let hidden = p.w.shape().n;
    let h: Vec<f64> = (0..hidden)
        .map(|k| {
            let pre: f64 = (0..2 * c).map(|j| p.w.at(k, j, 0, 0) * cat[j]).sum();
            (bn_inference(&p.bn, k, pre) + p.b.data()[k]).tanh()
        })
        .collect();
    let a = affine(&p.w33, &p.b33, &h);
    let b = affine(&p.w55, &p.b55, &h);
    let mut out = Oracle {
        v: Vec::new(),
        u33: Vec::new(),
        u55: Vec::new(),
    };
    for ch in 0..c {
        let u33 = 1.0 / (1.0 + (b[ch] - a[ch]).exp());
        let u55 = 1.0 / (1.0 + (a[ch] - b[ch]).exp());
        out.v.push(u33 * z33[ch] + u55 * z55[ch]);
        out.u33.push(u33);
        out.u55.push(u55);
    }
    out
}

fn forget_oracle(p: &ForgetGateParams<f64>, xp: &Tensor<f64>, n: usize) -> Vec<f64> {
    let z = pool(xp, &p.wsf, n);
    let pre = affine(&p.w1, &p.b1, &z);
    let h: Vec<f64> = pre.iter().enumerate().map(|(k, &v)| bn_inference(&p.bn, k, v).tanh()).collect();
    affine(&p.w2, &p.b2, &h).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

fn inputs(n: usize, c: usize, hw: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = seeded_rng(seed);
    (
        Tensor::randn(shape(n, c, hw, hw), 1.0, &mut rng),
        Tensor::randn(shape(n, c, hw, hw), 1.0, &mut rng),
    )
}

fn update_params(c: usize, r: usize, seed: u64) -> UpdateGateParams<f64> {
    let cfg = UpdateGateConfig { channels: c, reduction: r };
    UpdateGateParams::random(&cfg, 1.0, BnMode::Inference, &mut seeded_rng(seed))
}

#[test]
fn attention_pool_matches_brute_force() {
    for seed in 0..20 {
        let p = update_params(6, 2, seed);
        let (a, b) = inputs(2, 6, 5, seed + 100);
        let out = p.evaluate(&a, &b).unwrap();
        for n in 0..2 {
            for (c, want) in pool(&a, &p.ws33, n).into_iter().enumerate() {
                assert!((out.z33.at(n, c, 0, 0) - want).abs() <= 1e-12);
            }
            for (c, want) in pool(&b, &p.ws55, n).into_iter().enumerate() {
                assert!((out.z55.at(n, c, 0, 0) - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn flat_attention_is_the_spatial_mean() {
    let mut p = update_params(3, 2, 1);
    p.ws33 = Tensor::zeros(p.ws33.shape());
    let (a, b) = inputs(1, 3, 4, 2);
    let z = p.evaluate(&a, &b).unwrap().z33;
    for c in 0..3 {
        let mean = a.plane(0, c).iter().sum::<f64>() / 16.0;
        assert!((z.at(0, c, 0, 0) - mean).abs() <= 1e-14);
    }
}

#[test]
fn dominant_position_selects_its_features() {
    let mut p = update_params(3, 2, 1);
    let mut ws = Tensor::zeros(p.ws33.shape());
    *ws.at_mut(0, 0, 0, 0) = 1.0;
    p.ws33 = ws;
    let (mut a, b) = inputs(1, 3, 4, 3);
    for v in a.data_mut()[..16].iter_mut() {
        *v = 0.0;
    }
    *a.at_mut(0, 0, 2, 1) = 50.0;
    let z = p.evaluate(&a, &b).unwrap().z33;
    for c in 0..3 {
        assert!((z.at(0, c, 0, 0) - a.at(0, c, 2, 1)).abs() <= 1e-18 * 16.0 * 50.0 + 1e-12);
    }
}

#[test]
fn update_gate_matches_composition() {
    for seed in 0..20 {
        let c = 2 + (seed as usize % 6);
        let p = update_params(c, 1 + seed as usize % 3, seed);
        let (a, b) = inputs(3, c, 4, seed + 7);
        let out = p.evaluate(&a, &b).unwrap();
        for n in 0..3 {
            let o = update_oracle(&p, &a, &b, n);
            for ch in 0..c {
                assert!((out.v.at(n, ch, 0, 0) - o.v[ch]).abs() <= 1e-12);
                assert!((out.u33.at(n, ch, 0, 0) - o.u33[ch]).abs() <= 1e-12);
                assert!((out.u55.at(n, ch, 0, 0) - o.u55[ch]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn symmetric_branches_split_evenly() {
    let mut p = update_params(5, 2, 4);
    p.w55 = p.w33.clone();
    p.b55 = p.b33.clone();
    let (a, b) = inputs(2, 5, 3, 5);
    let out = p.evaluate(&a, &b).unwrap();
    for i in 0..out.v.len() {
        assert_eq!(out.u33.data()[i], 0.5);
        assert_eq!(out.u55.data()[i], 0.5);
        let mean = (out.z33.data()[i] + out.z55.data()[i]) / 2.0;
        assert!((out.v.data()[i] - mean).abs() <= 1e-15);
    }
}

#[test]
fn large_bias_gap_selects_the_three_branch() {
    let mut p = update_params(4, 2, 6);
    p.b33 = p.b55.map(|v| v + 50.0);
    p.w33 = p.w55.clone();
    let (a, b) = inputs(2, 4, 3, 7);
    let out = p.evaluate(&a, &b).unwrap();
    assert!(out.v.max_abs_diff(&out.z33) <= 1e-12);
}

#[test]
fn branch_mismatch_is_an_error() {
    let p = update_params(4, 2, 6);
    let (a, _) = inputs(2, 4, 3, 7);
    let b = Tensor::zeros(shape(2, 4, 2, 3));
    assert!(p.evaluate(&a, &b).is_err());
}

#[test]
fn forget_gate_matches_composition() {
    for seed in 0..20 {
        let c = 1 + seed as usize % 7;
        let cfg = ForgetGateConfig { channels: c, reduction: 2 };
        let p = ForgetGateParams::random(&cfg, 1.0, BnMode::Inference, &mut seeded_rng(seed));
        let (x, _) = inputs(2, c, 5, seed + 50);
        let f = p.evaluate(&x).unwrap();
        for n in 0..2 {
            for (ch, want) in forget_oracle(&p, &x, n).into_iter().enumerate() {
                assert!((f.at(n, ch, 0, 0) - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn saturated_forget_gate_keeps_everything() {
    let cfg = ForgetGateConfig { channels: 4, reduction: 2 };
    let mut p = ForgetGateParams::random(&cfg, 1.0, BnMode::Inference, &mut seeded_rng(3));
    p.b2 = p.b2.map(|_| 50.0);
    p.w2 = Tensor::zeros(p.w2.shape());
    let (x, _) = inputs(2, 4, 3, 4);
    assert!(p.evaluate(&x).unwrap().data().iter().all(|&f| (1.0 - f) < 1e-20));
}

/// Random configurations in both normalization modes.
#[test]
fn one_thousand_evaluations_stay_normalized() {
    let mut rng = seeded_rng(2024);
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let c = rng.random_range(1..=8);
        let n = rng.random_range(1..=3);
        let hw = rng.random_range(1..=5);
        let r = rng.random_range(1..=4);
        let scale = rng.random_range(0.5..1.5);
        let mode = if i % 2 == 0 { BnMode::Train } else { BnMode::Inference };
        let cfg = UpdateGateConfig { channels: c, reduction: r };
        let p: UpdateGateParams<f64> = UpdateGateParams::random(&cfg, scale, mode, &mut rng);
        let a = Tensor::randn(shape(n, c, hw, hw), scale, &mut rng);
        let b = Tensor::randn(shape(n, c, hw, hw), scale, &mut rng);
        let out = p.evaluate_with(&a, &b, ExecOptions::inference()).unwrap();
        for (x, y) in out.u33.data().iter().zip(out.u55.data()) {
            worst = worst.max((x + y - 1.0).abs());
            assert!(*x > 0.0 && *x < 1.0 && *y > 0.0 && *y < 1.0);
        }
        let fcfg = ForgetGateConfig { channels: c, reduction: r };
        let fp = ForgetGateParams::random(&fcfg, scale, mode, &mut rng);
        let f = fp.evaluate(&a).unwrap();
        assert!(f.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert!(worst <= 1e-12, "{worst}");
}

fn permute_channels(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for (c, &src) in perm.iter().enumerate() {
            for y in 0..s.h {
                for x in 0..s.w {
                    *out.at_mut(n, c, y, x) = t.at(n, src, y, x);
                }
            }
        }
    }
    out
}

/// Reorders the output rows of an FC weight stored as `(out, in, 1, 1)`.
fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let mut out = Tensor::zeros(s);
    for (o, &src) in perm.iter().enumerate() {
        for i in 0..s.c {
            *out.at_mut(o, i, 0, 0) = t.at(src, i, 0, 0);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn channel_permutation_is_equivariant(seed in any::<u64>(), c in 2usize..7, rot in 1usize..6) {
        let p = update_params(c, 2, seed);
        let (a, b) = inputs(2, c, 3, seed ^ 1);
        let perm: Vec<usize> = (0..c).map(|i| (i * (rot % c).max(1) + 1) % c).collect();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assume!(sorted == (0..c).collect::<Vec<_>>());
        let both: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|&i| i + c)).collect();

        let mut q = p.clone();
        q.ws33 = permute_channels(&p.ws33, &perm);
        q.ws55 = permute_channels(&p.ws55, &perm);
        q.w = permute_channels(&p.w, &both);
        q.w33 = permute_rows(&p.w33, &perm);
        q.w55 = permute_rows(&p.w55, &perm);
        q.b33 = permute_channels(&p.b33, &perm);
        q.b55 = permute_channels(&p.b55, &perm);

        let base = p.evaluate(&a, &b).unwrap();
        let moved = q.evaluate(&permute_channels(&a, &perm), &permute_channels(&b, &perm)).unwrap();
        prop_assert!(moved.v.max_abs_diff(&permute_channels(&base.v, &perm)) <= 1e-12);
    }

    #[test]
    fn swapping_branches_swaps_weights(seed in any::<u64>(), c in 1usize..7) {
        let p = update_params(c, 2, seed);
        let (a, b) = inputs(2, c, 3, seed ^ 2);
        let halves: Vec<usize> = (c..2 * c).chain(0..c).collect();
        let mut q = p.clone();
        q.ws33 = p.ws55.clone();
        q.ws55 = p.ws33.clone();
        q.w = permute_channels(&p.w, &halves);
        q.w33 = p.w55.clone();
        q.w55 = p.w33.clone();
        q.b33 = p.b55.clone();
        q.b55 = p.b33.clone();
        let base = p.evaluate(&a, &b).unwrap();
        let swapped = q.evaluate(&b, &a).unwrap();
        prop_assert!(swapped.u33.max_abs_diff(&base.u55) <= 1e-12);
        prop_assert!(swapped.u55.max_abs_diff(&base.u33) <= 1e-12);
        prop_assert!(swapped.v.max_abs_diff(&base.v) <= 1e-12);
    }
}
