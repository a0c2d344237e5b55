//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 3 5`.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statelens::autodiff::Tape;
use statelens::dataset::{load_frames, load_manifest, Manifest, ManifestEntry, StateVector};
use statelens::encoder::{Encoder, EncoderConfig};
use statelens::frame::Frame;
use statelens::games::{
    generate_dataset, render, sample_corridor, sample_frame, Environment, GameState, GenerateSpec, Split, REGION_BOUNDS,
};
use statelens::gradcheck::{check_op, OpCase};
use statelens::nn::ParamStore;
use statelens::objectives::{
    byol_loss, nt_xent_loss, sinkhorn, swav_loss, ByolConfig, Method, ProjectionHeadConfig, SwavConfig,
};
use statelens::probe::{fit_ols, improvement, probe_all, probe_features, r_squared, Damping, Features, ProbeOptions};
use statelens::tensor::Tensor;
use statelens::trainer::{TrainConfig, Trainer};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", gradients),
        (2, "loss oracles", loss_oracles),
        (3, "sinkhorn invariants", sinkhorn_invariants),
        (4, "probe oracles", probe_oracles),
        (5, "improvement arithmetic", improvement_arithmetic),
        (6, "ssl beats random-init baseline", end_to_end),
        (7, "determinism and persistence", determinism),
        (8, "byol target contracts", byol_contracts),
        (9, "dataset schema parity", schema_parity),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS — {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {n} ({name}): FAIL — {detail} [{secs:.1}s]");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ------------------------------------------------------------------- helpers

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn constant(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> statelens::autodiff::Var {
    tape.constant(Tensor::new(shape.to_vec(), data).expect("shape"))
}

// ------------------------------------------------------------------ criteria

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    let mut min_coords = usize::MAX;
    for case in OpCase::ALL {
        for (tol, is_f64) in [(1e-3, false), (1e-5, true)] {
            let r = if is_f64 { check_op::<f64>(case, 5) } else { check_op::<f32>(case, 5) }.map_err(|e| e.to_string())?;
            let err = r.max_rel_error();
            min_coords = min_coords.min(r.checks.len());
            ensure!(r.checks.len() >= 20, "{}: only {} coordinates", case.name(), r.checks.len());
            ensure!(err < tol, "{} ({}): max rel err {err:.2e} ≥ {tol:.0e}", case.name(), if is_f64 { "f64" } else { "f32" });
            if is_f64 {
                worst.1 = worst.1.max(err);
            } else {
                worst.0 = worst.0.max(err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "{} ops, ≥{min_coords} coords each, worst rel err f32 {:.1e} / f64 {:.1e}",
        OpCase::ALL.len(),
        worst.0,
        worst.1
    ))
}

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut nt_worst = 0.0f64;
    for trial in 0..50 {
        let n = 1 + trial % 8;
        let (rows, dim, tau) = (2 * n, 2 + trial % 7, rng.gen_range(0.05..1.0));
        let emb = uniform(&mut rng, rows * dim);
        let z: Vec<Vec<f64>> = emb.chunks(dim).map(unit).collect();
        let mut want = 0.0;
        for i in 0..rows {
            let j = (i + n) % rows;
            let denom: f64 = (0..rows).filter(|&k| k != i).map(|k| (dot(&z[i], &z[k]) / tau).exp()).sum();
            want -= ((dot(&z[i], &z[j]) / tau).exp() / denom).ln();
        }
        want /= rows as f64;
        let mut tape = Tape::<f64>::new();
        let x = constant(&mut tape, &[rows, dim], emb);
        let l = nt_xent_loss(&mut tape, x, tau).map_err(|e| e.to_string())?;
        nt_worst = nt_worst.max((tape.data(l)[0] - want).abs());
    }
    ensure!(nt_worst < 1e-6, "NT-Xent max abs err {nt_worst:.2e}");

    let mut byol_worst = 0.0f64;
    for trial in 0..50 {
        let (rows, dim) = (1 + trial % 8, 2 + trial % 6);
        let (p, t) = (uniform(&mut rng, rows * dim), uniform(&mut rng, rows * dim));
        let mean_cos = p.chunks(dim).zip(t.chunks(dim)).map(|(a, b)| dot(&unit(a), &unit(b))).sum::<f64>() / rows as f64;
        let mut tape = Tape::<f64>::new();
        let (pv, tv) = (constant(&mut tape, &[rows, dim], p), constant(&mut tape, &[rows, dim], t));
        let l = byol_loss(&mut tape, pv, tv).map_err(|e| e.to_string())?;
        byol_worst = byol_worst.max((tape.data(l)[0] - (2.0 - 2.0 * mean_cos)).abs());
    }
    ensure!(byol_worst < 1e-6, "BYOL max abs err {byol_worst:.2e}");

    let cfg = SwavConfig::default();
    let mut swav_worst = 0.0f64;
    for trial in 0..30 {
        let (b, p, k) = (2 + trial % 7, 3 + trial % 5, 2 + trial % 6);
        let (x1, x2) = (uniform(&mut rng, b * p), uniform(&mut rng, b * p));
        let c: Vec<Vec<f64>> = (0..k).map(|_| unit(&uniform(&mut rng, p))).collect();
        let scores = |x: &[f64], c: &[Vec<f64>]| -> Vec<f64> {
            x.chunks(p).flat_map(|row| c.iter().map(|cj| dot(&unit(row), cj)).collect::<Vec<_>>()).collect()
        };
        let (s1, s2) = (scores(&x1, &c), scores(&x2, &c));
        let q1 = sinkhorn(&s1, b, k, cfg.sinkhorn_epsilon, cfg.sinkhorn_iterations);
        let q2 = sinkhorn(&s2, b, k, cfg.sinkhorn_epsilon, cfg.sinkhorn_iterations);
        let t = cfg.temperature;
        let mut want = 0.0;
        for i in 0..b {
            for (s, q) in [(&s1, &q2), (&s2, &q1)] {
                let z: f64 = (0..k).map(|j| (s[i * k + j] / t).exp()).sum();
                for j in 0..k {
                    want -= q[i * k + j] * ((s[i * k + j] / t).exp() / z).ln();
                }
            }
        }
        want /= 2.0 * b as f64;
        // Prototype matrix is [p, K], column j = prototype j.
        let cm: Vec<f64> = (0..p).flat_map(|r| c.iter().map(move |cj| cj[r]).collect::<Vec<_>>()).collect();
        let mut tape = Tape::<f64>::new();
        let (v1, v2) = (constant(&mut tape, &[b, p], x1), constant(&mut tape, &[b, p], x2));
        let vc = constant(&mut tape, &[p, k], cm);
        let (l, _, _) = swav_loss(&mut tape, v1, v2, vc, &cfg).map_err(|e| e.to_string())?;
        swav_worst = swav_worst.max((tape.data(l)[0] - want).abs());
    }
    ensure!(swav_worst < 1e-5, "SwAV max abs err {swav_worst:.2e}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("max abs err NT-Xent {nt_worst:.1e}, BYOL {byol_worst:.1e}, SwAV {swav_worst:.1e}"))
}

/// Largest `|column sum − B/K|`, computed directly.
fn column_deviation(q: &[f64], b: usize, k: usize) -> f64 {
    (0..k).map(|j| ((0..b).map(|i| q[i * k + j]).sum::<f64>() - b as f64 / k as f64).abs()).fold(0.0, f64::max)
}

fn sinkhorn_invariants() -> Outcome {
    // Cosine scores between unit embeddings and unit prototypes; ε = 0.1.
    // Monotonicity is judged up to float round-off of 1e-12·B/K.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_final = 0.0f64;
    for trial in 0..100 {
        let (b, k) = ([8, 64][trial % 2], [4, 32][(trial / 2) % 2]);
        let target = b as f64 / k as f64;
        let z: Vec<Vec<f64>> = (0..b).map(|_| unit(&uniform(&mut rng, 32))).collect();
        let c: Vec<Vec<f64>> = (0..k).map(|_| unit(&uniform(&mut rng, 32))).collect();
        let scores: Vec<f64> = z.iter().flat_map(|zi| c.iter().map(|cj| dot(zi, cj)).collect::<Vec<_>>()).collect();
        let mut prev = f64::INFINITY;
        for iters in 1..=50 {
            let q = sinkhorn(&scores, b, k, 0.1, iters);
            let row_err = q.chunks(k).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
            ensure!(row_err < 1e-6, "B={b} K={k} iteration {iters}: row sum error {row_err:.1e}");
            let dev = column_deviation(&q, b, k);
            ensure!(dev <= prev + 1e-12 * target, "B={b} K={k}: deviation rose to {dev:.3e} from {prev:.3e} at iteration {iters}");
            prev = dev;
        }
        ensure!(prev < 1e-3 * target, "B={b} K={k}: final deviation {prev:.2e} ≥ 1e-3·B/K");
        worst_final = worst_final.max(prev / target);
    }
    Ok(format!("100 matrices, worst final deviation {worst_final:.1e}·B/K"))
}

fn probe_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (200, 5);
    let z = Features::new(n, d, uniform(&mut rng, n * d)).map_err(|e| e.to_string())?;
    let v: Vec<f64> = uniform(&mut rng, n);
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { z.row(i)[j - 1] });
    let beta = x.pseudo_inverse(1e-12).map_err(|e| e.to_string())? * DVector::from_column_slice(&v);
    let probe = fit_ols(&z, &v, Damping::default()).map_err(|e| e.to_string())?;
    let coef_err = probe.coefficients.iter().zip(beta.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(coef_err < 1e-6, "OLS vs pseudo-inverse: {coef_err:.2e}");

    let w = uniform(&mut rng, d + 1);
    let clean: Vec<f64> = (0..n).map(|i| w[0] + dot(z.row(i), &w[1..])).collect();
    let p = fit_ols(&z, &clean, Damping::default()).map_err(|e| e.to_string())?;
    let r2 = r_squared(&p, &z, &clean);
    ensure!((r2 - 1.0).abs() < 1e-9, "noiseless R² = {r2}");

    let mut shuffled = clean.clone();
    shuffled.shuffle(&mut rng);
    let p = fit_ols(&z, &shuffled, Damping::default()).map_err(|e| e.to_string())?;
    let r2_perm = r_squared(&p, &z, &shuffled);
    ensure!(r2_perm < 0.1, "permuted-label R² = {r2_perm}");
    Ok(format!("coef err {coef_err:.1e}, noiseless R² − 1 = {:.1e}, permuted R² {r2_perm:.3}", r2 - 1.0))
}

fn improvement_arithmetic() -> Outcome {
    let a = improvement(0.68, 0.81);
    let b = improvement(0.59, 0.89);
    ensure!((a - 19.0).abs() <= 1.0, "improvement(0.68, 0.81) = {a}");
    ensure!((b - 51.0).abs() <= 1.0, "improvement(0.59, 0.89) = {b}");
    Ok(format!("{a:.1}% and {b:.1}%"))
}

fn end_to_end() -> Outcome {
    const BUDGET_SECS: f64 = 30.0 * 60.0;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let env = Environment::Pitch { players: 4 };
    let mut manifests = Vec::new();
    for (split, count) in [(Split::Train, 2000), (Split::Eval, 500)] {
        let spec = GenerateSpec { env, count, split, seed: 7, height: 64, width: 64 };
        let path = generate_dataset(&spec, &dir.path().join(split.name())).map_err(|e| e.to_string())?;
        manifests.push(load_manifest(&path).map_err(|e| e.to_string())?);
    }
    let (train, eval) = (&manifests[0], &manifests[1]);
    let frames = load_frames(train, (64, 64)).map_err(|e| e.to_string())?;
    let opts = ProbeOptions::default();
    let base_cfg = TrainConfig { seed: 7, epochs: 10, batch_size: 64, ..TrainConfig::default() };
    ensure!(base_cfg.encoder.embedding_dim == 64, "embedding dim {}", base_cfg.encoder.embedding_dim);

    let baseline = Encoder::build(base_cfg.encoder.clone(), base_cfg.seed).map_err(|e| e.to_string())?;
    let base_avg = probe_all(&baseline, eval, "baseline", &opts).map_err(|e| e.to_string())?.summary().avg;
    let mut parts = vec![format!("baseline {base_avg:.4}")];
    let mut shortfalls = Vec::new();
    for method in Method::ALL {
        let start = Instant::now();
        let mut trainer = Trainer::new(TrainConfig { method, ..base_cfg.clone() }).map_err(|e| e.to_string())?;
        trainer.train(&frames).map_err(|e| format!("{method}: {e}"))?;
        let avg = probe_all(&trainer.encoder(), eval, method.tag(), &opts).map_err(|e| e.to_string())?.summary().avg;
        let secs = start.elapsed().as_secs_f64();
        parts.push(format!("{method} {avg:.4} ({:+.4}, {secs:.0}s)", avg - base_avg));
        if avg < base_avg + 0.05 {
            shortfalls.push(format!("{method} {avg:.4} < {:.4}", base_avg + 0.05));
        }
        if secs > BUDGET_SECS {
            shortfalls.push(format!("{method} took {secs:.0}s"));
        }
    }
    let detail = parts.join(", ");
    ensure!(shortfalls.is_empty(), "{detail}; {}", shortfalls.join("; "));
    Ok(detail)
}

fn tiny(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 2,
        batch_size: 8,
        seed,
        encoder: EncoderConfig {
            input_height: 16,
            input_width: 16,
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            embedding_dim: 8,
        },
        projector: ProjectionHeadConfig { hidden_dim: 16, output_dim: 8 },
        byol: ByolConfig { ema_tau: 0.9, predictor_hidden_dim: 16 },
        swav: SwavConfig { num_prototypes: 6, prototype_freeze_steps: 2, ..SwavConfig::default() },
        ..TrainConfig::default()
    }
}

fn small_frames(n: usize) -> Vec<Frame> {
    let spec = GenerateSpec { env: Environment::default(), count: n, split: Split::Train, seed: 17, height: 16, width: 16 };
    (0..n)
        .map(|i| {
            let (s, nu) = sample_frame(&spec, i);
            render(&s, &nu, 16, 16)
        })
        .collect()
}

fn run_and_save(cfg: &TrainConfig, frames: &[Frame], path: &Path) -> Result<(String, Vec<u8>), String> {
    let mut t = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    t.train(frames).map_err(|e| e.to_string())?;
    t.save_checkpoint(path).map_err(|e| e.to_string())?;
    Ok((t.log().to_csv(), std::fs::read(path).map_err(|e| e.to_string())?))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let frames = small_frames(32);
    for method in Method::ALL {
        let cfg = tiny(method, 13);
        let a = run_and_save(&cfg, &frames, &dir.path().join("a.sslg"))?;
        let b = run_and_save(&cfg, &frames, &dir.path().join("b.sslg"))?;
        ensure!(a.0 == b.0, "{method}: train logs differ");
        ensure!(a.1 == b.1, "{method}: checkpoints differ");

        // Round trip: restore and save again, byte for byte.
        let restored = Trainer::restore(cfg.clone(), &dir.path().join("a.sslg")).map_err(|e| e.to_string())?;
        restored.save_checkpoint(&dir.path().join("c.sslg")).map_err(|e| e.to_string())?;
        ensure!(std::fs::read(dir.path().join("c.sslg")).map_err(|e| e.to_string())? == a.1, "{method}: round trip changed bytes");

        // Splice: one epoch, checkpoint, restore, one more epoch.
        let mut first = Trainer::new(TrainConfig { epochs: 1, ..cfg.clone() }).map_err(|e| e.to_string())?;
        first.train(&frames).map_err(|e| e.to_string())?;
        first.save_checkpoint(&dir.path().join("half.sslg")).map_err(|e| e.to_string())?;
        let mut second = Trainer::restore(cfg.clone(), &dir.path().join("half.sslg")).map_err(|e| e.to_string())?;
        second.run_epoch(&frames).map_err(|e| e.to_string())?;
        second.save_checkpoint(&dir.path().join("spliced.sslg")).map_err(|e| e.to_string())?;
        ensure!(
            std::fs::read(dir.path().join("spliced.sslg")).map_err(|e| e.to_string())? == a.1,
            "{method}: 1 + restore + 1 epochs differs from 2 epochs"
        );
    }
    Ok("bitwise-equal logs and checkpoints, round trip and splice for simclr, byol, swav".into())
}

fn values(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    store.named().map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

fn byol_contracts() -> Outcome {
    let frames = small_frames(16);
    let cfg = tiny(Method::Byol, 8);
    let tau = cfg.byol.ema_tau;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let target = |t: &Trainer| t.model().target().expect("byol has a target").clone();
    let mut expected: Vec<(String, Vec<f32>)> =
        target(&t).named().map(|(n, x)| (n.to_string(), x.data().to_vec())).collect();
    for step in 0..100 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 5 + i) % frames.len()).collect();
        let before = values(&target(&t));
        let pending = t.compute_gradients(&frames, &idx).map_err(|e| e.to_string())?;
        ensure!(values(&target(&t)) == before, "backward changed the target at step {step}");
        t.apply_update(pending).map_err(|e| e.to_string())?;
        let online = &t.model().online;
        for (name, vals) in expected.iter_mut() {
            let o = online.get(online.find(name).ok_or(format!("no online `{name}`"))?).data();
            for (v, &ov) in vals.iter_mut().zip(o) {
                *v = (tau * *v as f64 + (1.0 - tau) * ov as f64) as f32;
            }
        }
        let got: Vec<(String, Vec<f32>)> = target(&t).named().map(|(n, x)| (n.to_string(), x.data().to_vec())).collect();
        let same = got.iter().zip(&expected).all(|(a, b)| a.0 == b.0 && a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
        ensure!(same, "target differs from the EMA recurrence after step {step}");
    }
    Ok(format!("100 steps, {} target tensors bitwise equal to the recurrence", expected.len()))
}

fn schema_parity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = GenerateSpec { env: Environment::Pitch { players: 22 }, count: 10, split: Split::Eval, seed: 1, height: 32, width: 32 };
    let m = load_manifest(&generate_dataset(&spec, dir.path()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!(m.k() == 94, "pitch schema has {} variables", m.k());
    ensure!(m.entries.iter().all(|e| e.state.len() == 94 && e.state.valid.iter().all(|&v| v)), "pitch entry is not 94 valid values");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut absent = 0;
    for _ in 0..2000 {
        let s = sample_corridor(&mut rng);
        let v = GameState::Corridor(s.clone()).to_state_vector();
        ensure!(v.len() == 12, "corridor state has {} values", v.len());
        for (r, e) in s.nearest.iter().enumerate() {
            let (lo, hi) = REGION_BOUNDS[r];
            let present = e.is_some_and(|e| e.right() > lo && e.left() < hi);
            ensure!(v.valid[4 * r..4 * r + 4].iter().all(|&x| x == present), "region {r} mask disagrees with its box");
            absent += (!present) as usize;
        }
    }
    ensure!(absent > 0, "no absent regions sampled");

    // Masked targets are NaN; a fit that touched one would be NaN.
    let (n, d) = (150, 4);
    let f = Features::new(n, d, uniform(&mut rng, n * d)).map_err(|e| e.to_string())?;
    let mut man = Manifest::new(vec!["sparse".into()], "/nonexistent");
    let mut kept = Vec::new();
    for i in 0..n {
        let ok = i % 3 != 0;
        if ok {
            kept.push(i);
        }
        let value = dot(f.row(i), &[1.0, -2.0, 0.5, 0.0]) + 0.1 * rng.gen_range(-1.0..1.0);
        man.entries.push(ManifestEntry { image_path: format!("{i}.png").into(), state: StateVector::new(vec![value], vec![ok]) });
    }
    ensure!(man.entries.iter().any(|e| e.state.values[0].is_nan()), "sentinel is not NaN");
    let report = probe_features(&f, &man, "poison", &ProbeOptions::default()).map_err(|e| e.to_string())?;
    let r2 = report.variables[0].r2;
    ensure!(r2.is_finite(), "masked NaN leaked into the fit");
    let sub = f.select_rows(&kept);
    let v: Vec<f64> = kept.iter().map(|&i| man.entries[i].state.values[0]).collect();
    let direct = r_squared(&fit_ols(&sub, &v, Damping::default()).map_err(|e| e.to_string())?, &sub, &v);
    ensure!(direct.to_bits() == r2.to_bits(), "probe R² {r2} differs from the valid-subset fit {direct}");
    Ok(format!("pitch k=94, corridor k=12 with {absent} masked regions, NaN-poisoned fit R² {r2:.4}"))
}
