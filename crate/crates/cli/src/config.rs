//! Experiment configuration: a JSON file plus `--set key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use statelens::games::Environment;
use statelens::probe::{Damping, ProbeOptions};
use statelens::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Generated environment; ignored when both manifests are given.
    pub env: Environment,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            env: Environment::default(),
            train_manifest: None,
            eval_manifest: None,
            train_count: 2000,
            eval_count: 500,
            seed: 7,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub eval_manifest: Option<PathBuf>,
    pub damping: Damping,
    pub split_half: bool,
    /// Named groups of variable indices, added to the environment's own.
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl ProbeSection {
    pub fn options(&self) -> ProbeOptions {
        ProbeOptions { damping: self.damping, split_half: self.split_half }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub out_dir: PathBuf,
    pub baseline_report: Option<PathBuf>,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { out_dir: PathBuf::from("runs"), baseline_report: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub probe: ProbeSection,
    pub report: ReportSection,
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies overrides in order,
    /// then deserialises and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.env.validate()?;
        if self.dataset.train_count == 0 || self.dataset.eval_count == 0 {
            bail!("dataset counts must be positive");
        }
        let paths = [
            ("dataset.train_manifest", &self.dataset.train_manifest),
            ("dataset.eval_manifest", &self.dataset.eval_manifest),
            ("probe.eval_manifest", &self.probe.eval_manifest),
            ("report.baseline_report", &self.report.baseline_report),
        ];
        for (key, p) in paths {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("{key}: {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }
}

/// `a.b.c=value`; the value is parsed as JSON when possible, else taken as a
/// string. Missing intermediate objects are created.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').with_context(|| format!("override `{spec}` is not key=value"))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => bail!("override `{key}`: `{}` is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("loop returns on the last key")
}

/// `name=0,1,2` → (name, indices).
pub fn parse_group(spec: &str) -> Result<(String, Vec<usize>)> {
    let (name, list) = spec.split_once('=').with_context(|| format!("group `{spec}` is not name=i,j,…"))?;
    if name.is_empty() {
        bail!("group `{spec}` has no name");
    }
    let idx = list
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("group `{name}`: `{s}` is not an index")))
        .collect::<Result<Vec<_>>>()?;
    Ok((name.to_string(), idx))
}
