//! Built-in correctness checks: gradients, loss oracles and solver
//! invariants, each compared against an independent direct computation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::gradcheck::{check_op, OpCase};
use crate::objectives::{byol_loss, nt_xent_loss, sinkhorn_traced, swapped_prediction_loss};
use crate::probe::{fit_ols, improvement, r_squared, Damping, Features};
use crate::tensor::{Scalar, Tensor};

/// Deliberate faults, used to prove the harness catches them.
#[derive(Clone, Copy, Debug, Default)]
pub struct Faults {
    /// Negate the library NT-Xent value before comparing with the oracle.
    pub nt_xent_sign: bool,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        CheckResult { name: name.into(), passed, detail }
    }
}

pub fn run(faults: Faults) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for case in OpCase::ALL {
        out.push(gradient_check::<f32>(case, 1e-3));
        out.push(gradient_check::<f64>(case, 1e-5));
    }
    out.push(nt_xent_oracle(faults));
    out.push(byol_oracle());
    out.push(swav_oracle());
    out.push(sinkhorn_invariants());
    out.push(ols_oracle());
    out.push(r2_noiseless());
    out.push(r2_permuted());
    out.push(improvement_arithmetic());
    out
}

fn gradient_check<T: Scalar>(case: OpCase, tol: f64) -> CheckResult {
    let name = format!("gradcheck {} {}", case.name(), T::NAME);
    match check_op::<T>(case, 11) {
        Ok(r) => {
            let worst = r.max_rel_error();
            let ok = r.checks.len() >= 20 && worst < tol;
            CheckResult::new(name, ok, format!("{} coords, max rel err {worst:.2e}", r.checks.len()))
        }
        Err(e) => CheckResult::new(name, false, e.to_string()),
    }
}

fn uniform_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Double loop over anchors and candidates, no matrix algebra.
pub fn nt_xent_reference(emb: &[f64], rows: usize, dim: usize, temperature: f64) -> f64 {
    let z: Vec<Vec<f64>> = emb.chunks(dim).map(unit).collect();
    let n = rows / 2;
    let mut total = 0.0;
    for a in 0..rows {
        let pos = (a + n) % rows;
        let sim = |b: usize| z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum::<f64>() / temperature;
        let mut denom = 0.0;
        for b in 0..rows {
            if b != a {
                denom += sim(b).exp();
            }
        }
        total += -(sim(pos).exp() / denom).ln();
    }
    total / rows as f64
}

fn nt_xent_oracle(faults: Faults) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let n = 1 + trial % 8;
        let (rows, dim) = (2 * n, 3 + trial % 5);
        let tau = rng.gen_range(0.1..1.0);
        let emb = uniform_rows(&mut rng, rows, dim);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, dim], emb.clone()).expect("shape"));
        let mut got = match nt_xent_loss(&mut tape, x, tau) {
            Ok(l) => tape.data(l)[0],
            Err(e) => return CheckResult::new("nt_xent oracle", false, e.to_string()),
        };
        if faults.nt_xent_sign {
            got = -got;
        }
        worst = worst.max((got - nt_xent_reference(&emb, rows, dim, tau)).abs());
    }
    CheckResult::new("nt_xent oracle", worst < 1e-6, format!("50 batches, max abs err {worst:.2e}"))
}

fn byol_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let (rows, dim) = (1 + trial % 6, 2 + trial % 7);
        let p = uniform_rows(&mut rng, rows, dim);
        let z = uniform_rows(&mut rng, rows, dim);
        let cos_mean = p
            .chunks(dim)
            .zip(z.chunks(dim))
            .map(|(a, b)| unit(a).iter().zip(unit(b)).map(|(x, y)| x * y).sum::<f64>())
            .sum::<f64>()
            / rows as f64;
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(Tensor::new(vec![rows, dim], p).expect("shape"));
        let zv = tape.constant(Tensor::new(vec![rows, dim], z).expect("shape"));
        match byol_loss(&mut tape, pv, zv) {
            Ok(l) => worst = worst.max((tape.data(l)[0] - (2.0 - 2.0 * cos_mean)).abs()),
            Err(e) => return CheckResult::new("byol oracle", false, e.to_string()),
        }
    }
    CheckResult::new("byol oracle", worst < 1e-6, format!("50 batches, max abs err {worst:.2e}"))
}

/// Swapped cross-entropy evaluated entry by entry.
pub fn swapped_reference(s1: &[f64], s2: &[f64], q1: &[f64], q2: &[f64], b: usize, k: usize, t: f64) -> f64 {
    let ce = |s: &[f64], q: &[f64]| {
        let mut acc = 0.0;
        for i in 0..b {
            let row = &s[i * k..(i + 1) * k];
            let lse = row.iter().map(|v| (v / t).exp()).sum::<f64>().ln();
            for j in 0..k {
                acc += q[i * k + j] * (row[j] / t - lse);
            }
        }
        acc
    };
    -(ce(s1, q2) + ce(s2, q1)) / (2.0 * b as f64)
}

fn swav_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let (b, k) = (2 + trial % 7, 2 + trial % 5);
        let s1 = uniform_rows(&mut rng, b, k).iter().map(|v| v / 2.0).collect::<Vec<_>>();
        let s2 = uniform_rows(&mut rng, b, k).iter().map(|v| v / 2.0).collect::<Vec<_>>();
        let q1 = sinkhorn_traced(&s1, b, k, 0.05, 3).0;
        let q2 = sinkhorn_traced(&s2, b, k, 0.05, 3).0;
        let mut tape = Tape::<f64>::new();
        let v1 = tape.constant(Tensor::new(vec![b, k], s1.clone()).expect("shape"));
        let v2 = tape.constant(Tensor::new(vec![b, k], s2.clone()).expect("shape"));
        match swapped_prediction_loss(&mut tape, v1, v2, &q1, &q2, 0.1) {
            Ok(l) => worst = worst.max((tape.data(l)[0] - swapped_reference(&s1, &s2, &q1, &q2, b, k, 0.1)).abs()),
            Err(e) => return CheckResult::new("swav oracle", false, e.to_string()),
        }
    }
    CheckResult::new("swav oracle", worst < 1e-5, format!("50 batches, max abs err {worst:.2e}"))
}

/// Scores are cosines between random unit embeddings and unit prototypes,
/// the inputs Sinkhorn sees in training.
pub fn cosine_scores(rng: &mut ChaCha8Rng, b: usize, k: usize, dim: usize) -> Vec<f64> {
    let z: Vec<Vec<f64>> = (0..b).map(|_| unit(&uniform_rows(rng, 1, dim))).collect();
    let c: Vec<Vec<f64>> = (0..k).map(|_| unit(&uniform_rows(rng, 1, dim))).collect();
    z.iter().flat_map(|zi| c.iter().map(move |cj| zi.iter().zip(cj).map(|(x, y)| x * y).sum::<f64>())).collect()
}

/// Column deviation may only grow by float round-off once converged.
pub const SINKHORN_ROUNDOFF: f64 = 1e-12;

fn sinkhorn_invariants() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut failures = Vec::new();
    for trial in 0..100 {
        let b = [8, 64][trial % 2];
        let k = [4, 32][(trial / 2) % 2];
        let target = b as f64 / k as f64;
        let scores = cosine_scores(&mut rng, b, k, 32);
        let (q, trace) = sinkhorn_traced(&scores, b, k, 0.1, 50);
        let row_err = q.chunks(k).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        let monotone = trace.windows(2).all(|w| w[1] <= w[0] + SINKHORN_ROUNDOFF * target);
        let last = *trace.last().expect("50 iterations");
        if row_err >= 1e-6 || !monotone || last >= 1e-3 * target {
            failures.push(format!("B={b} K={k}: row err {row_err:.1e}, monotone {monotone}, final dev {last:.1e}"));
        }
    }
    let detail = if failures.is_empty() { "100 matrices".to_string() } else { failures.join("; ") };
    CheckResult::new("sinkhorn invariants", failures.is_empty(), detail)
}

fn design(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Features {
    Features::new(n, d, uniform_rows(rng, n, d)).expect("shape")
}

fn ols_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (n, d) = (200, 5);
    let z = design(&mut rng, n, d);
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { z.data[i * d + j - 1] });
    let pinv = match x.clone().pseudo_inverse(1e-12) {
        Ok(p) => p,
        Err(e) => return CheckResult::new("ols pseudo-inverse oracle", false, e.to_string()),
    };
    let beta = pinv * nalgebra::DVector::from_column_slice(&v);
    match fit_ols(&z, &v, Damping::default()) {
        Ok(p) => {
            let err = p.coefficients.iter().zip(beta.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            CheckResult::new("ols pseudo-inverse oracle", err < 1e-6, format!("max coef err {err:.2e}"))
        }
        Err(e) => CheckResult::new("ols pseudo-inverse oracle", false, e.to_string()),
    }
}

fn r2_noiseless() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let (n, d) = (200, 5);
    let z = design(&mut rng, n, d);
    let w: Vec<f64> = (0..=d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..n).map(|i| w[0] + z.row(i).iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>()).collect();
    match fit_ols(&z, &v, Damping::default()) {
        Ok(p) => {
            let r2 = r_squared(&p, &z, &v);
            CheckResult::new("r2 noiseless", (r2 - 1.0).abs() < 1e-9, format!("R² = {r2:.12}"))
        }
        Err(e) => CheckResult::new("r2 noiseless", false, e.to_string()),
    }
}

fn r2_permuted() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let (d, n) = (5, 200);
    let z = design(&mut rng, n, d);
    let mut v: Vec<f64> = (0..n).map(|i| z.row(i).iter().sum::<f64>()).collect();
    v.shuffle(&mut rng);
    match fit_ols(&z, &v, Damping::default()) {
        Ok(p) => {
            let r2 = r_squared(&p, &z, &v);
            CheckResult::new("r2 permuted labels", r2 < 0.1, format!("R² = {r2:.4} (n = {n}, d = {d})"))
        }
        Err(e) => CheckResult::new("r2 permuted labels", false, e.to_string()),
    }
}

fn improvement_arithmetic() -> CheckResult {
    let a = improvement(0.68, 0.81);
    let b = improvement(0.59, 0.89);
    let ok = (a - 19.0).abs() <= 1.0 && (b - 51.0).abs() <= 1.0;
    CheckResult::new("improvement arithmetic", ok, format!("{a:.2}% and {b:.2}%"))
}
