use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statelens::autodiff::Tape;
use statelens::error::TensorError;
use statelens::nn::ParamStore;
use statelens::objectives::{
    byol_loss, byol_loss_symmetric, ema_update, nt_xent_loss, prototype_renormalize, sinkhorn, sinkhorn_traced,
    swapped_prediction_loss, swav_loss, Method, SwavConfig,
};
use statelens::tensor::Tensor;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| v / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ℓ(i,j) = −log(exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ))`, averaged over all 2N anchors.
fn nt_xent_oracle(emb: &[f64], rows: usize, dim: usize, tau: f64) -> f64 {
    let z: Vec<Vec<f64>> = emb.chunks(dim).map(normalized).collect();
    let n = rows / 2;
    let mut loss = 0.0;
    for i in 0..rows {
        let j = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += (dot(&z[i], &z[k]) / tau).exp();
            }
        }
        loss -= ((dot(&z[i], &z[j]) / tau).exp() / denom).ln();
    }
    loss / rows as f64
}

fn nt_xent_value(emb: &[f64], rows: usize, dim: usize, tau: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![rows, dim], emb.to_vec()).unwrap());
    let l = nt_xent_loss(&mut tape, x, tau).unwrap();
    tape.data(l)[0]
}

#[test]
fn nt_xent_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for batch in 0..50 {
        let n = 1 + batch % 8;
        let dim = 2 + batch % 6;
        let tau = [0.1, 0.2, 0.5, 1.0][batch % 4];
        let emb = random(&mut rng, 2 * n * dim);
        let got = nt_xent_value(&emb, 2 * n, dim, tau);
        let want = nt_xent_oracle(&emb, 2 * n, dim, tau);
        assert!((got - want).abs() < 1e-6, "batch {batch}: {got} vs {want}");
    }
}

#[test]
fn nt_xent_in_f32_tracks_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let emb = random(&mut rng, 16 * 8);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![16, 8], emb.clone()).unwrap().cast());
    let l = nt_xent_loss(&mut tape, x, 0.2).unwrap();
    let want = nt_xent_oracle(&emb, 16, 8, 0.2);
    assert!((tape.data(l)[0] as f64 - want).abs() < 1e-4);
}

#[test]
fn nt_xent_single_pair_is_zero() {
    // With N = 1 the positive is the only term in the denominator.
    assert!(nt_xent_value(&[1.0, 2.0, -0.5, 3.0], 2, 2, 0.2).abs() < 1e-12);
}

#[test]
fn nt_xent_rejects_odd_rows_and_bad_temperature() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(nt_xent_loss(&mut tape, x, 0.2), Err(TensorError::Contract(_))));
    let y = tape.constant(Tensor::full(&[2, 2], 1.0));
    assert!(nt_xent_loss(&mut tape, y, 0.0).is_err());
}

#[test]
fn byol_is_two_minus_two_mean_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for batch in 0..50 {
        let (rows, dim) = (1 + batch % 9, 2 + batch % 5);
        let p = random(&mut rng, rows * dim);
        let z = random(&mut rng, rows * dim);
        let mean_cos = p
            .chunks(dim)
            .zip(z.chunks(dim))
            .map(|(a, b)| dot(&normalized(a), &normalized(b)))
            .sum::<f64>()
            / rows as f64;
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(Tensor::new(vec![rows, dim], p).unwrap().with_grad());
        let zv = tape.constant(Tensor::new(vec![rows, dim], z).unwrap());
        let l = byol_loss(&mut tape, pv, zv).unwrap();
        assert!((tape.data(l)[0] - (2.0 - 2.0 * mean_cos)).abs() < 1e-6);
    }
}

#[test]
fn byol_extremes_and_symmetry() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap());
    let same = tape.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 0.5]).unwrap());
    let opposite = tape.constant(Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.0, -2.0]).unwrap());
    let l0 = byol_loss(&mut tape, a, same).unwrap();
    let l4 = byol_loss(&mut tape, a, opposite).unwrap();
    assert!(tape.data(l0)[0].abs() < 1e-12);
    assert!((tape.data(l4)[0] - 4.0).abs() < 1e-12);
    let sym = byol_loss_symmetric(&mut tape, a, same, opposite, same).unwrap();
    // L(a, same) + L(same, opposite) = 0 + 4.
    assert!((tape.data(sym)[0] - 4.0).abs() < 1e-12);
}

#[test]
fn byol_target_must_be_detached() {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(Tensor::full(&[2, 3], 1.0).with_grad());
    let z = tape.leaf(Tensor::full(&[2, 3], 0.5).with_grad());
    assert!(matches!(byol_loss(&mut tape, p, z), Err(TensorError::Contract(_))));
    let zd = tape.detach(z);
    let l = byol_loss(&mut tape, p, zd).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(p).is_some());
    assert!(tape.grad(zd).is_none());
}

#[test]
fn ema_follows_recurrence() {
    let mut online = ParamStore::<f32>::new();
    let mut target = ParamStore::<f32>::new();
    online.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    target.add("w", Tensor::new(vec![3], vec![0.0, 0.0, 4.0]).unwrap(), false);
    ema_update(&mut target, &online, 0.9).unwrap();
    let got = target.get(target.find("w").unwrap()).data().to_vec();
    // Evaluated in f64, rounded once.
    let want = [(0.1f64 * 1.0) as f32, (0.1f64 * -2.0) as f32, (0.9 * 4.0 + 0.1 * 0.5f64) as f32];
    assert_eq!(got, want);
    assert!(ema_update(&mut target, &online, 1.5).is_err());
    let mut stranger = ParamStore::<f32>::new();
    stranger.add("v", Tensor::zeros(&[3]), false);
    assert!(ema_update(&mut stranger, &online, 0.5).is_err());
}

/// Direct evaluation of `−½·mean_i Σ_k [q₂ log p₁ + q₁ log p₂]`.
fn swav_oracle(s1: &[f64], s2: &[f64], q1: &[f64], q2: &[f64], k: usize, t: f64) -> f64 {
    let b = s1.len() / k;
    let mut total = 0.0;
    for i in 0..b {
        for (s, q) in [(s1, q2), (s2, q1)] {
            let row = &s[i * k..(i + 1) * k];
            let z: f64 = row.iter().map(|v| (v / t).exp()).sum();
            for c in 0..k {
                total += q[i * k + c] * ((row[c] / t).exp() / z).ln();
            }
        }
    }
    -total / (2.0 * b as f64)
}

#[test]
fn swav_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let cfg = SwavConfig::default();
    for batch in 0..30 {
        let (b, p, k) = (2 + batch % 7, 3 + batch % 4, 2 + batch % 6);
        let x1 = random(&mut rng, b * p);
        let x2 = random(&mut rng, b * p);
        let mut c = random(&mut rng, p * k);
        for j in 0..k {
            let n = (0..p).map(|i| c[i * k + j].powi(2)).sum::<f64>().sqrt();
            (0..p).for_each(|i| c[i * k + j] /= n);
        }
        let c_ref = &c;
        let scores = |x: &[f64]| -> Vec<f64> {
            x.chunks(p)
                .flat_map(|row| {
                    let z = normalized(row);
                    (0..k).map(|j| (0..p).map(|i| z[i] * c_ref[i * k + j]).sum::<f64>()).collect::<Vec<_>>()
                })
                .collect()
        };
        let (s1, s2) = (scores(&x1), scores(&x2));
        let mut tape = Tape::<f64>::new();
        let v1 = tape.constant(Tensor::new(vec![b, p], x1).unwrap());
        let v2 = tape.constant(Tensor::new(vec![b, p], x2).unwrap());
        let vc = tape.constant(Tensor::new(vec![p, k], c.clone()).unwrap());
        let (l, q1, q2) = swav_loss(&mut tape, v1, v2, vc, &cfg).unwrap();
        let want_q1 = sinkhorn(&s1, b, k, cfg.sinkhorn_epsilon, cfg.sinkhorn_iterations);
        for (a, w) in q1.iter().zip(&want_q1) {
            assert!((a - w).abs() < 1e-9);
        }
        let want = swav_oracle(&s1, &s2, &q1, &q2, k, cfg.temperature);
        assert!((tape.data(l)[0] - want).abs() < 1e-5, "batch {batch}");
    }
}

#[test]
fn swapped_prediction_treats_assignments_as_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (b, k) = (4, 3);
    let s1 = random(&mut rng, b * k);
    let s2 = random(&mut rng, b * k);
    let q1 = sinkhorn(&s1, b, k, 0.05, 3);
    let q2 = sinkhorn(&s2, b, k, 0.05, 3);
    let mut tape = Tape::<f64>::new();
    let v1 = tape.leaf(Tensor::new(vec![b, k], s1.clone()).unwrap().with_grad());
    let v2 = tape.leaf(Tensor::new(vec![b, k], s2).unwrap().with_grad());
    let l = swapped_prediction_loss(&mut tape, v1, v2, &q1, &q2, 0.1).unwrap();
    tape.backward(l).unwrap();
    // d/ds₁ = (softmax(s₁/T) − q₂) / (2B·T), rows sum to zero.
    let g = tape.grad(v1).unwrap();
    for i in 0..b {
        let row = &s1[i * k..(i + 1) * k];
        let z: f64 = row.iter().map(|v| (v / 0.1).exp()).sum();
        for c in 0..k {
            let want = ((row[c] / 0.1).exp() / z - q2[i * k + c]) / (2.0 * b as f64 * 0.1);
            assert!((g[i * k + c] - want).abs() < 1e-9);
        }
    }
}

/// Column-sum deviation measured independently of the traced helper.
fn column_deviation(q: &[f64], b: usize, k: usize) -> f64 {
    let target = b as f64 / k as f64;
    (0..k).map(|j| ((0..b).map(|i| q[i * k + j]).sum::<f64>() - target).abs()).fold(0.0, f64::max)
}

fn cosine_scores(rng: &mut ChaCha8Rng, b: usize, k: usize, dim: usize) -> Vec<f64> {
    let z: Vec<Vec<f64>> = (0..b).map(|_| normalized(&random(rng, dim))).collect();
    let c: Vec<Vec<f64>> = (0..k).map(|_| normalized(&random(rng, dim))).collect();
    z.iter().flat_map(|zi| c.iter().map(|cj| dot(zi, cj)).collect::<Vec<_>>()).collect()
}

#[test]
fn sinkhorn_marginals_converge_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for trial in 0..100 {
        let b = [8, 64][trial % 2];
        let k = [4, 32][(trial / 2) % 2];
        let target = b as f64 / k as f64;
        let scores = cosine_scores(&mut rng, b, k, 32);
        let mut prev = f64::INFINITY;
        for iters in 1..=50 {
            let q = sinkhorn(&scores, b, k, 0.1, iters);
            for row in q.chunks(k) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let dev = column_deviation(&q, b, k);
            assert!(dev <= prev + 1e-12 * target, "B={b} K={k} iteration {iters}: {dev} after {prev}");
            prev = dev;
        }
        assert!(prev < 1e-3 * target, "B={b} K={k}: final deviation {prev}");
        let (_, trace) = sinkhorn_traced(&scores, b, k, 0.1, 50);
        assert!((trace[49] - prev).abs() < 1e-15);
    }
}

#[test]
fn sinkhorn_zero_iterations_still_row_normalises() {
    let q = sinkhorn(&[0.1, 0.5, -0.2, 0.3, 0.0, 0.9], 2, 3, 0.05, 0);
    for row in q.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn prototypes_renormalise_to_unit_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut t = Tensor::new(vec![3, 4], vec![3.0, 0.0, 1.0, 0.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let replaced = prototype_renormalize(&mut t, &mut rng);
    assert_eq!(replaced, 2);
    for j in 0..4 {
        let n: f32 = (0..3).map(|i| t.data()[i * 4 + j].powi(2)).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert!((t.data()[0] - 0.6).abs() < 1e-7 && (t.data()[4] - 0.8).abs() < 1e-7);
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.tag().parse::<Method>().unwrap(), m);
    }
    let err = "dino".parse::<Method>().unwrap_err();
    assert!(err.to_string().contains("unknown method"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_rows_are_distributions(b in 1usize..10, k in 2usize..8, eps in 0.02f64..1.0, iters in 0usize..6, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..b * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = sinkhorn(&s, b, k, eps, iters);
        for row in q.chunks(k) {
            prop_assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn byol_bounded(rows in 1usize..6, dim in 2usize..6, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![rows, dim], random(&mut rng, rows * dim)).unwrap());
        let z = tape.constant(Tensor::new(vec![rows, dim], random(&mut rng, rows * dim)).unwrap());
        let l = byol_loss(&mut tape, p, z).unwrap();
        let v = tape.data(l)[0];
        prop_assert!((-1e-12..=4.0 + 1e-12).contains(&v));
    }

    #[test]
    fn nt_xent_nonnegative_and_scale_invariant(n in 1usize..6, dim in 2usize..6, scale in 0.1f64..10.0, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = random(&mut rng, 2 * n * dim);
        let a = nt_xent_value(&emb, 2 * n, dim, 0.2);
        let scaled: Vec<f64> = emb.iter().map(|v| v * scale).collect();
        let b = nt_xent_value(&scaled, 2 * n, dim, 0.2);
        prop_assert!(a >= -1e-12);
        prop_assert!((a - b).abs() < 1e-9);
    }
}
