use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statelens::dataset::{Manifest, ManifestEntry, StateVector};
use statelens::error::ProbeError;
use statelens::probe::{
    fit_ols, group_average, improvement, probe_features, r_squared, summarize, Damping, Features, ProbeOptions,
    ProbeReport, ReportJson, VariableStatus,
};

fn design(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Features {
    Features::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0) * 3.0 + 0.5).collect()).unwrap()
}

/// Least squares through the SVD pseudo-inverse of `[1 | Z]`.
fn pinv_oracle(z: &Features, v: &[f64]) -> Vec<f64> {
    let x = DMatrix::from_fn(z.rows, z.cols + 1, |i, j| if j == 0 { 1.0 } else { z.row(i)[j - 1] });
    let beta = x.pseudo_inverse(1e-14).unwrap() * DVector::from_column_slice(v);
    beta.iter().copied().collect()
}

#[test]
fn ols_matches_pseudo_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for _ in 0..10 {
        let z = design(&mut rng, 200, 5);
        let v: Vec<f64> = (0..200).map(|i| z.row(i)[0] * 0.7 - z.row(i)[3] + rng.gen_range(-1.0..1.0)).collect();
        let probe = fit_ols(&z, &v, Damping::default()).unwrap();
        let oracle = pinv_oracle(&z, &v);
        for (a, b) in probe.coefficients.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let exact = fit_ols(&z, &v, Damping::Absolute(0.0)).unwrap();
        for (a, b) in exact.coefficients.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn noiseless_linear_data_gives_unit_r2() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let z = design(&mut rng, 200, 5);
    let v: Vec<f64> = (0..200).map(|i| 1.5 + z.row(i).iter().enumerate().map(|(j, x)| (j as f64 - 2.0) * x).sum::<f64>()).collect();
    let probe = fit_ols(&z, &v, Damping::default()).unwrap();
    assert!((r_squared(&probe, &z, &v) - 1.0).abs() < 1e-9);
}

#[test]
fn permuted_labels_give_low_r2() {
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    for d in [3, 5, 8] {
        let n = 20 * d;
        let z = design(&mut rng, n, d);
        let mut v: Vec<f64> = (0..n).map(|i| z.row(i).iter().sum()).collect();
        v.shuffle(&mut rng);
        let probe = fit_ols(&z, &v, Damping::default()).unwrap();
        let r2 = r_squared(&probe, &z, &v);
        assert!(r2 < 0.1, "d={d}: R² {r2}");
    }
}

#[test]
fn constant_columns_and_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut z = design(&mut rng, 50, 3);
    for i in 0..50 {
        z.data[i * 3 + 1] = 4.0;
    }
    let v: Vec<f64> = (0..50).map(|i| 2.0 * z.row(i)[0] - z.row(i)[2]).collect();
    let probe = fit_ols(&z, &v, Damping::default()).unwrap();
    assert_eq!(probe.coefficients[2], 0.0);
    assert!((r_squared(&probe, &z, &v) - 1.0).abs() < 1e-9);
    let flat = vec![3.0; 50];
    let p = fit_ols(&z, &flat, Damping::default()).unwrap();
    assert!(r_squared(&p, &z, &flat).is_nan());
    assert!(matches!(fit_ols(&z, &v[..10], Damping::default()), Err(ProbeError::Mismatch(_))));
}

#[test]
fn improvement_reproduces_published_averages() {
    assert_eq!(improvement(0.68, 0.81).round(), 19.0);
    assert_eq!(improvement(0.59, 0.89).round(), 51.0);
    assert!((improvement(0.5, 0.75) - 50.0).abs() < 1e-12);
    assert!(improvement(0.0, 0.5).is_nan());
    assert!(improvement(-0.1, 0.5).is_nan());
}

#[test]
fn summary_skips_undefined_values() {
    let s = summarize(&[0.2, f64::NAN, 0.8, 0.5]);
    assert_eq!((s.min, s.max), (0.2, 0.8));
    assert!((s.avg - 0.5).abs() < 1e-12);
}

/// Manifest with two targets: `a` fully valid, `b` valid on even rows only.
fn poisoned(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Manifest, Features) {
    let z = design(rng, n, d);
    let mut m = Manifest::new(vec!["a".into(), "b".into()], "/nonexistent");
    for i in 0..n {
        let a = z.row(i).iter().sum::<f64>() + rng.gen_range(-0.5..0.5);
        let b = z.row(i)[0] - z.row(i)[1];
        // Masked slots hold NaN, so any row that leaks into a fit poisons it.
        let state = StateVector::new(vec![a, b], vec![true, i % 2 == 0]);
        m.entries.push(ManifestEntry { image_path: format!("{i}.png").into(), state });
    }
    (m, z)
}

#[test]
fn masked_rows_are_excluded_from_fits() {
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let (m, f) = poisoned(&mut rng, 120, 4);
    let report = probe_features(&f, &m, "x", &ProbeOptions::default()).unwrap();
    assert_eq!(report.variables[0].n_valid, 120);
    assert_eq!(report.variables[1].n_valid, 60);
    let r2b = report.variables[1].r2;
    assert!((r2b - 1.0).abs() < 1e-9, "masked NaN leaked into the fit: {r2b}");

    // The same fit on the explicit subset agrees exactly.
    let idx: Vec<usize> = (0..120).step_by(2).collect();
    let sub = f.select_rows(&idx);
    let v: Vec<f64> = idx.iter().map(|&i| m.entries[i].state.values[1]).collect();
    let p = fit_ols(&sub, &v, Damping::default()).unwrap();
    assert_eq!(r_squared(&p, &sub, &v), r2b);

    // Poisoning the features of masked rows changes nothing for `b`.
    let mut g = f.clone();
    for i in (1..120).step_by(2) {
        for j in 0..4 {
            g.data[i * 4 + j] = f64::NAN;
        }
    }
    let mut only_b = m.clone();
    for e in &mut only_b.entries {
        e.state = StateVector::new(vec![0.0, e.state.values[1]], vec![false, e.state.valid[1]]);
    }
    let r = probe_features(&g, &only_b, "x", &ProbeOptions::default()).unwrap();
    assert_eq!(r.variables[1].r2, r2b);
    assert_eq!(r.variables[0].status, VariableStatus::TooFewRows);
    assert!(r.variables[0].r2.is_nan());
}

#[test]
fn too_few_rows_is_nan_not_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(305);
    let (mut m, f) = poisoned(&mut rng, 12, 8);
    for e in m.entries.iter_mut().skip(3) {
        e.state = StateVector::new(vec![e.state.values[0], 0.0], vec![true, false]);
    }
    let r = probe_features(&f, &m, "x", &ProbeOptions::default()).unwrap();
    assert!(r.variables[1].r2.is_nan());
    assert_eq!(r.variables[1].status, VariableStatus::TooFewRows);
}

#[test]
fn split_half_scores_out_of_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(306);
    let (m, f) = poisoned(&mut rng, 200, 6);
    let ins = probe_features(&f, &m, "x", &ProbeOptions::default()).unwrap();
    let oos = probe_features(&f, &m, "x", &ProbeOptions { split_half: true, ..Default::default() }).unwrap();
    assert!(oos.variables[0].r2 <= ins.variables[0].r2 + 1e-9);
    assert!(oos.variables[0].r2 > 0.5);
}

fn report_with(r2: &[f64], label: &str) -> ProbeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(307);
    let (m, f) = poisoned(&mut rng, 60, 2);
    let mut r = probe_features(&f, &m, label, &ProbeOptions::default()).unwrap();
    r.variables.truncate(1);
    let template = r.variables[0].clone();
    r.variables = r2
        .iter()
        .enumerate()
        .map(|(i, &v)| statelens::probe::VariableResult { name: format!("v{i}"), r2: v, ..template.clone() })
        .collect();
    r
}

#[test]
fn comparisons_recompute_from_json() {
    let base = report_with(&[0.2, 0.4, f64::NAN, 0.5], "baseline");
    let mut method = report_with(&[0.3, 0.5, 0.7, 0.4], "byol");
    let groups = vec![("first".to_string(), vec![0, 1]), ("last".to_string(), vec![2, 3])];
    method.groups = group_average(&method, &groups).unwrap();
    let mut b2 = base.clone();
    b2.groups = group_average(&b2, &groups).unwrap();
    method.compare_to(&b2);

    let text = serde_json::to_string(&method.to_json()).unwrap();
    let j: ReportJson = serde_json::from_str(&text).unwrap();
    let base_j: ReportJson = serde_json::from_str(&serde_json::to_string(&b2.to_json()).unwrap()).unwrap();
    let c = j.comparison.as_ref().unwrap();

    let avg = |r: &ReportJson| r.r2.avg.unwrap();
    let expect = 100.0 * (avg(&j) - avg(&base_j)) / avg(&base_j);
    assert!((c.avg_improvement_pct.unwrap() - expect).abs() < 1e-9);
    for (i, pct) in c.per_variable_improvement_pct.iter().enumerate() {
        match (base_j.variables[i].r2, j.variables[i].r2) {
            (Some(b), Some(m)) => assert!((pct.unwrap() - 100.0 * (m - b) / b).abs() < 1e-9),
            _ => assert!(pct.is_none()),
        }
    }
    // Group "last" on the baseline only has variable 3 defined.
    let last = c.group_improvement_pct.iter().find(|g| g.name == "last").unwrap();
    assert!((last.pct.unwrap() - 100.0 * (0.55 - 0.5) / 0.5).abs() < 1e-9);
    assert!(text.contains("null"), "NaN must serialise as null");
}

#[test]
fn group_validation() {
    let r = report_with(&[0.1, 0.2], "x");
    assert!(matches!(group_average(&r, &[("g".into(), vec![])]), Err(ProbeError::EmptyGroup(_))));
    assert!(matches!(group_average(&r, &[("g".into(), vec![5])]), Err(ProbeError::GroupIndex { .. })));
    assert!(matches!(group_average(&r, &[("g".into(), vec![1, 1])]), Err(ProbeError::DuplicateIndex { .. })));
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let base = report_with(&[0.2, 0.4], "baseline");
    let mut m = report_with(&[0.3, f64::NAN], "simclr");
    m.compare_to(&base);
    m.write_outputs(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("probe_per_variable.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("variable_name,n_valid,r2"));
    assert!(csv.lines().nth(2).unwrap().ends_with(",NaN"));
    let svg = std::fs::read_to_string(dir.path().join("improvement.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("50.0%"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("probe_summary.json")).unwrap()).unwrap();
    assert_eq!(json["label"], "simclr");
    assert!(m.table_row().contains("0.30"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// In-sample R² lies in [0, 1] and is invariant to invertible affine
    /// transforms of each feature.
    #[test]
    fn r2_bounds_and_affine_invariance(seed in 0u64..10_000, scale in 0.1f64..20.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = design(&mut rng, 60, 4);
        let v: Vec<f64> = (0..60).map(|i| z.row(i)[1] + rng.gen_range(-2.0..2.0)).collect();
        let p = fit_ols(&z, &v, Damping::Absolute(0.0)).unwrap();
        let r2 = r_squared(&p, &z, &v);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&r2));
        let t = Features::new(60, 4, z.data.iter().map(|x| x * scale + shift).collect()).unwrap();
        let q = fit_ols(&t, &v, Damping::Absolute(0.0)).unwrap();
        prop_assert!((r_squared(&q, &t, &v) - r2).abs() < 1e-9);
    }

    /// Adding a feature never lowers in-sample R².
    #[test]
    fn r2_monotone_in_features(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = design(&mut rng, 50, 4);
        let v: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fewer = Features::new(50, 3, (0..50).flat_map(|i| z.row(i)[..3].to_vec()).collect()).unwrap();
        let a = r_squared(&fit_ols(&fewer, &v, Damping::Absolute(0.0)).unwrap(), &fewer, &v);
        let b = r_squared(&fit_ols(&z, &v, Damping::Absolute(0.0)).unwrap(), &z, &v);
        prop_assert!(b >= a - 1e-9);
    }
}
