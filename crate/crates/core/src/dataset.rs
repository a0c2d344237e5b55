//! Frame/state datasets: the JSON manifest, validity masks, batching and a
//! CSV import adapter.
//!
//! A manifest is one JSON document next to its image directory:
//!
//! ```json
//! {
//!   "schema_version": "1",
//!   "variable_names": ["ball_x", "ball_y"],
//!   "entries": [
//!     {"image_path": "images/000000.png", "state": [0.1, null], "valid": [true, false]}
//!   ]
//! }
//! ```
//!
//! Image paths are relative to the manifest's directory. Invalid values are
//! `null` on disk and NaN in memory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::frame::Frame;

pub const SCHEMA_VERSION: &str = "1";

/// `k` values with a validity mask; invalid slots hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl StateVector {
    pub fn new(values: Vec<f64>, valid: Vec<bool>) -> Self {
        assert_eq!(values.len(), valid.len(), "state/mask length mismatch");
        let values = values.into_iter().zip(&valid).map(|(v, &ok)| if ok { v } else { f64::NAN }).collect();
        StateVector { values, valid }
    }

    pub fn all_valid(values: Vec<f64>) -> Self {
        let valid = vec![true; values.len()];
        StateVector { values, valid }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, j: usize) -> Option<f64> {
        self.valid[j].then_some(self.values[j])
    }

    /// Bitwise equality that treats the NaN sentinels as equal.
    pub fn same_as(&self, other: &StateVector) -> bool {
        self.valid == other.valid
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest directory.
    pub image_path: PathBuf,
    pub state: StateVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub variable_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory image paths resolve against.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    schema_version: String,
    variable_names: Vec<String>,
    entries: Vec<RawEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    image_path: String,
    state: Vec<Option<f64>>,
    valid: Vec<bool>,
}

impl Manifest {
    pub fn new(variable_names: Vec<String>, root: impl Into<PathBuf>) -> Self {
        Manifest { variable_names, entries: Vec::new(), root: root.into() }
    }

    pub fn k(&self) -> usize {
        self.variable_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].image_path)
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variable_names.iter().position(|n| n == name)
    }

    /// Number of entries with `valid[j]`.
    pub fn valid_count(&self, j: usize) -> usize {
        self.entries.iter().filter(|e| e.state.valid[j]).count()
    }

    /// Indices of the entries whose variable `j` is valid, in order.
    pub fn valid_indices(&self, j: usize) -> Result<Vec<usize>, DatasetError> {
        if j >= self.k() {
            return Err(DatasetError::VariableIndex { index: j, k: self.k() });
        }
        Ok(self.entries.iter().enumerate().filter(|(_, e)| e.state.valid[j]).map(|(i, _)| i).collect())
    }

    /// Entries with variable `j` valid, original order preserved.
    pub fn filter_valid(&self, j: usize) -> Result<Manifest, DatasetError> {
        let keep = self.valid_indices(j)?;
        Ok(Manifest {
            variable_names: self.variable_names.clone(),
            entries: keep.into_iter().map(|i| self.entries[i].clone()).collect(),
            root: self.root.clone(),
        })
    }

    /// Structural checks that do not touch the file system.
    pub fn validate_structure(&self) -> Result<(), DatasetError> {
        let k = self.k();
        for (i, e) in self.entries.iter().enumerate() {
            if e.state.values.len() != k {
                return Err(DatasetError::Length { entry: i, field: "state", expected: k, found: e.state.values.len() });
            }
            if e.state.valid.len() != k {
                return Err(DatasetError::Length { entry: i, field: "valid", expected: k, found: e.state.valid.len() });
            }
            if let Some(j) = (0..k).find(|&j| e.state.valid[j] && !e.state.values[j].is_finite()) {
                return Err(DatasetError::InvalidValue { entry: i, index: j });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let raw = RawManifest {
            schema_version: SCHEMA_VERSION.into(),
            variable_names: self.variable_names.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| RawEntry {
                    image_path: e.image_path.to_string_lossy().replace('\\', "/"),
                    state: e.state.values.iter().zip(&e.state.valid).map(|(&v, &ok)| ok.then_some(v)).collect(),
                    valid: e.state.valid.clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&raw).expect("manifest serialises");
        s.push('\n');
        s
    }

    /// Parses and validates a manifest document; `root` anchors image paths.
    pub fn from_json(text: &str, source: &Path, root: PathBuf) -> Result<Self, DatasetError> {
        let raw: RawManifest = serde_json::from_str(text)
            .map_err(|e| DatasetError::Parse { path: source.to_path_buf(), message: e.to_string() })?;
        if raw.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion(raw.schema_version));
        }
        let k = raw.variable_names.len();
        let mut entries = Vec::with_capacity(raw.entries.len());
        for (i, e) in raw.entries.into_iter().enumerate() {
            if e.state.len() != k {
                return Err(DatasetError::Length { entry: i, field: "state", expected: k, found: e.state.len() });
            }
            if e.valid.len() != k {
                return Err(DatasetError::Length { entry: i, field: "valid", expected: k, found: e.valid.len() });
            }
            let mut values = Vec::with_capacity(k);
            for (j, (v, &ok)) in e.state.iter().zip(&e.valid).enumerate() {
                match (v, ok) {
                    (Some(x), true) if x.is_finite() => values.push(*x),
                    (_, true) => return Err(DatasetError::InvalidValue { entry: i, index: j }),
                    (_, false) => values.push(f64::NAN),
                }
            }
            entries.push(ManifestEntry { image_path: PathBuf::from(e.image_path), state: StateVector { values, valid: e.valid } });
        }
        Ok(Manifest { variable_names: raw.variable_names, entries, root })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads, validates and checks that every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m = Manifest::from_json(&text, path, parent_dir(path))?;
    for i in 0..m.len() {
        let p = m.image_path(i);
        if !p.is_file() {
            return Err(DatasetError::MissingImage(p));
        }
    }
    Ok(m)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    manifest.validate_structure()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, manifest.to_json()).map_err(io_err(path))
}

/// Decodes entry `i` and resizes it bilinearly to `(height, width)`.
pub fn load_frame(manifest: &Manifest, i: usize, size: (usize, usize)) -> Result<Frame, DatasetError> {
    Ok(Frame::load_png(&manifest.image_path(i))?.resize(size.0, size.1))
}

pub fn load_frames(manifest: &Manifest, size: (usize, usize)) -> Result<Vec<Frame>, DatasetError> {
    (0..manifest.len()).map(|i| load_frame(manifest, i, size)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub frames: Vec<Frame>,
    pub states: Vec<StateVector>,
}

/// Seeded-order full batches, decoded lazily.
pub struct BatchIter<'a> {
    manifest: &'a Manifest,
    order: Vec<usize>,
    batch_size: usize,
    size: (usize, usize),
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let indices = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        let frames = match indices.iter().map(|&i| load_frame(self.manifest, i, self.size)).collect() {
            Ok(f) => f,
            Err(e) => return Some(Err(e)),
        };
        let states = indices.iter().map(|&i| self.manifest.entries[i].state.clone()).collect();
        Some(Ok(Batch { indices, frames, states }))
    }
}

/// Iterates `len / batch_size` batches in a seeded permutation order; the
/// last partial batch is dropped.
pub fn iterate_batches(
    manifest: &Manifest,
    batch_size: usize,
    seed: u64,
    size: (usize, usize),
) -> Result<BatchIter<'_>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::Invalid("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchIter { manifest, order, batch_size, size, pos: 0 })
}

/// Imports a CSV with header `image,<var_1>,…,<var_k>`; empty cells are
/// invalid. Image paths resolve against the CSV's directory.
pub fn import_csv(path: &Path) -> Result<Manifest, DatasetError> {
    let parse_err = |message: String| DatasetError::Parse { path: path.to_path_buf(), message };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if header.get(0).map(str::trim) != Some("image") {
        return Err(parse_err("first column must be `image`".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if names.is_empty() {
        return Err(parse_err("no state variables in header".into()));
    }
    let mut manifest = Manifest::new(names, parent_dir(path));
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let k = manifest.k();
        if record.len() != k + 1 {
            return Err(DatasetError::Length { entry: i, field: "state", expected: k, found: record.len().saturating_sub(1) });
        }
        let mut values = Vec::with_capacity(k);
        let mut valid = Vec::with_capacity(k);
        for (j, cell) in record.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                values.push(f64::NAN);
                valid.push(false);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(format!("row {}, column `{}`: `{cell}` is not a number", i + 2, manifest.variable_names[j])))?;
                if !v.is_finite() {
                    return Err(DatasetError::InvalidValue { entry: i, index: j });
                }
                values.push(v);
                valid.push(true);
            }
        }
        manifest.entries.push(ManifestEntry { image_path: PathBuf::from(record[0].trim()), state: StateVector { values, valid } });
    }
    Ok(manifest)
}
