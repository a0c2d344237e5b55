use std::path::{Path, PathBuf};

use statelens::dataset::{
    import_csv, iterate_batches, load_frame, load_manifest, write_manifest, Manifest, ManifestEntry, StateVector,
};
use statelens::error::DatasetError;
use statelens::frame::Frame;

/// A manifest of `n` tiny gradient images with `k` variables under `dir`.
fn fixture(dir: &Path, n: usize, k: usize, valid: impl Fn(usize, usize) -> bool) -> Manifest {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut m = Manifest::new((0..k).map(|j| format!("v{j}")).collect(), dir);
    for i in 0..n {
        let data: Vec<f32> = (0..8 * 8 * 3).map(|p| ((p * 7 + i * 13) % 256) as f32 / 255.0).collect();
        let rel = PathBuf::from(format!("images/{i:06}.png"));
        Frame::new(8, 8, data).unwrap().save_png(&dir.join(&rel)).unwrap();
        let values = (0..k).map(|j| i as f64 + j as f64 / 10.0).collect();
        let mask = (0..k).map(|j| valid(i, j)).collect();
        m.entries.push(ManifestEntry { image_path: rel, state: StateVector::new(values, mask) });
    }
    m
}

#[test]
fn write_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path(), 6, 3, |i, j| (i + j) % 3 != 0);
    let path = dir.path().join("manifest.json");
    write_manifest(&m, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.variable_names, m.variable_names);
    assert_eq!(back.len(), m.len());
    for (a, b) in back.entries.iter().zip(&m.entries) {
        assert_eq!(a.image_path, b.image_path);
        assert!(a.state.same_as(&b.state));
    }
    // Loading never touches the file.
    let before = std::fs::read(&path).unwrap();
    load_manifest(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn short_entry_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = fixture(dir.path(), 3, 94, |_, _| true);
    m.entries[2].state = StateVector::all_valid(vec![0.0; 93]);
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, m.to_json()).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(err, DatasetError::Length { entry: 2, expected: 94, found: 93, .. }), "{err}");
}

#[test]
fn missing_image_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path(), 3, 2, |_, _| true);
    let path = dir.path().join("manifest.json");
    write_manifest(&m, &path).unwrap();
    std::fs::remove_file(dir.path().join("images/000001.png")).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(err.to_string().contains("000001.png"), "{err}");
}

#[test]
fn missing_manifest_and_bad_version() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_manifest(&dir.path().join("nope.json")), Err(DatasetError::Io { .. })));
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, r#"{"schema_version":"9","variable_names":[],"entries":[]}"#).unwrap();
    assert!(matches!(load_manifest(&path), Err(DatasetError::SchemaVersion(v)) if v == "9"));
}

#[test]
fn filter_valid_keeps_masked_entries_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path(), 10, 2, |i, j| j == 0 || i % 2 == 0);
    assert_eq!(m.filter_valid(0).unwrap().len(), 10);
    let even = m.filter_valid(1).unwrap();
    let kept: Vec<_> = even.entries.iter().map(|e| e.image_path.clone()).collect();
    let want: Vec<_> = (0..10).step_by(2).map(|i| PathBuf::from(format!("images/{i:06}.png"))).collect();
    assert_eq!(kept, want);
    assert!(matches!(m.filter_valid(2), Err(DatasetError::VariableIndex { index: 2, k: 2 })));
}

#[test]
fn sparse_variable_subset_matches_mask_count() {
    // No images needed for filtering; 30% of entries carry the variable.
    let mut m = Manifest::new(vec!["speed".into()], "/nonexistent");
    let mut expected = 0;
    for i in 0..1000 {
        let ok = (i * 7919) % 10 < 3;
        expected += ok as usize;
        m.entries.push(ManifestEntry { image_path: format!("{i}.png").into(), state: StateVector::new(vec![i as f64], vec![ok]) });
    }
    assert_eq!(m.valid_count(0), expected);
    assert_eq!(m.filter_valid(0).unwrap().len(), expected);
    assert_eq!(expected, 300);
}

#[test]
fn batches_drop_the_partial_tail_and_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path(), 100, 1, |_, _| true);
    let collect = |seed| -> Vec<Vec<usize>> {
        iterate_batches(&m, 32, seed, (8, 8)).unwrap().map(|b| b.unwrap().indices).collect()
    };
    let a = collect(4);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|b| b.len() == 32));
    assert_eq!(a, collect(4));
    assert_ne!(a, collect(5));
    let mut seen: Vec<usize> = a.concat();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 96);
    assert!(iterate_batches(&m, 0, 0, (8, 8)).is_err());
}

#[test]
fn batch_states_line_up_with_indices() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path(), 10, 2, |_, _| true);
    for batch in iterate_batches(&m, 3, 1, (8, 8)).unwrap() {
        let batch = batch.unwrap();
        for (i, s) in batch.indices.iter().zip(&batch.states) {
            assert!(s.same_as(&m.entries[*i].state));
        }
    }
}

#[test]
fn same_size_load_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path(), 1, 1, |_, _| true);
    let f = load_frame(&m, 0, (8, 8)).unwrap();
    let raw = image::open(m.image_path(0)).unwrap().to_rgb8();
    let want: Vec<f32> = raw.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    assert_eq!(f.data(), &want[..]);
}

#[test]
fn undecodable_image_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path(), 4, 1, |_, _| true);
    std::fs::write(dir.path().join("images/000002.png"), b"not a png").unwrap();
    let err = iterate_batches(&m, 4, 0, (8, 8)).unwrap().next().unwrap().unwrap_err();
    assert!(matches!(&err, DatasetError::Decode { path, .. } if path.ends_with("images/000002.png")), "{err}");
}

#[test]
fn csv_import_resolves_paths_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2, 1, |_, _| true);
    let csv = dir.path().join("states.csv");
    std::fs::write(&csv, "image,speed,steer\nimages/000000.png,1.5,\nimages/000001.png,,-0.25\n").unwrap();
    let m = import_csv(&csv).unwrap();
    assert_eq!(m.variable_names, vec!["speed", "steer"]);
    assert_eq!(m.entries[0].state.valid, vec![true, false]);
    assert_eq!(m.entries[1].state.get(1), Some(-0.25));
    assert!(m.entries[1].state.values[0].is_nan());
    assert!(m.image_path(1).is_file());
    assert!(load_frame(&m, 1, (4, 4)).is_ok());
}

#[test]
fn csv_import_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "file,a\nx.png,1\n").unwrap();
    assert!(matches!(import_csv(&csv), Err(DatasetError::Parse { .. })));
    std::fs::write(&csv, "image,a\nx.png,fast\n").unwrap();
    let err = import_csv(&csv).unwrap_err();
    assert!(err.to_string().contains("fast"), "{err}");
    std::fs::write(&csv, "image,a,b\nx.png,1\n").unwrap();
    assert!(matches!(import_csv(&csv), Err(DatasetError::Length { .. }) | Err(DatasetError::Parse { .. })));
}
