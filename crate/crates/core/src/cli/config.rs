use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::manifest::{load_manifest, manifest_splits};
use crate::data::{split, stream, synth_shapes, Dataset, Rotation, ShapeClass};
use crate::model::{ModelConfig, TrainConfig};
use crate::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    /// Manifest file (`path,label[,split]` lines) when `source = "manifest"`.
    pub manifest: Option<PathBuf>,
    /// Points per sample; defaults to the model's input size and must equal it.
    pub n_points: Option<usize>,
    pub per_class: usize,
    pub classes: Vec<ShapeClass>,
    pub rotation: Rotation,
    /// Train and test fractions.
    pub split: [f64; 2],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: Source::Synthetic,
            manifest: None,
            n_points: None,
            per_class: 400,
            classes: ShapeClass::ALL.to_vec(),
            rotation: Rotation::Full,
            split: [0.75, 0.25],
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

const SECTIONS: [&str; 4] = ["model", "train", "data", "output"];

/// Splits `--section.key value` and `--section.key=value` pairs out of `args`.
pub fn extract_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        let dotted = key
            .split_once('.')
            .is_some_and(|(s, k)| SECTIONS.contains(&s) && !k.is_empty());
        if !dotted {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("override --{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, raw: &str) -> anyhow::Result<()> {
    // values that are not valid JSON are taken as strings
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("override {path}: {} is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// `base`, then the file at `path`, then the dotted overrides.
pub fn resolve(
    base: &RunConfig,
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> anyhow::Result<RunConfig> {
    let mut v = serde_json::to_value(base)?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        let file: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
        if !file.is_object() {
            bail!(Error::Config(format!("{} must hold a JSON object", p.display())));
        }
        merge(&mut v, file);
    }
    for (k, raw) in overrides {
        set_path(&mut v, k, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.model.validate()?;
    Ok(cfg)
}

/// Baseline for `gradcheck`: a model small enough for exhaustive differencing.
pub fn gradcheck_base() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        n_input: 32,
        d0: 8,
        k: 8,
        stages: 2,
        heads: 2,
        layers: 1,
        num_classes: 3,
        ..ModelConfig::default()
    };
    cfg
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Builds the dataset of `cfg.data` and splits it.
pub fn load_data(cfg: &RunConfig) -> anyhow::Result<Splits> {
    let d = &cfg.data;
    let n = d.n_points.unwrap_or(cfg.model.n_input);
    if n != cfg.model.n_input {
        bail!(Error::Config(format!(
            "data.n_points={n} differs from model.n_input={}",
            cfg.model.n_input
        )));
    }
    let (ds, tags) = match d.source {
        Source::Synthetic => {
            if d.classes.is_empty() {
                bail!(Error::Config("data.classes is empty".into()));
            }
            (synth_shapes(&d.classes, d.per_class, n, d.rotation, d.seed)?, None)
        }
        Source::Manifest => {
            let path = d
                .manifest
                .as_deref()
                .ok_or_else(|| Error::Config("data.source=manifest needs data.manifest".into()))?;
            let ds = load_manifest(path, n, d.seed)
                .with_context(|| format!("loading manifest {}", path.display()))?;
            (ds, Some(manifest_splits(path)?))
        }
    };
    if ds.num_classes() != cfg.model.num_classes && cfg.model.task == crate::model::Task::Classify {
        bail!(Error::Config(format!(
            "dataset has {} classes, model.num_classes={}",
            ds.num_classes(),
            cfg.model.num_classes
        )));
    }
    match tags {
        Some(tags) if tags.iter().any(Option::is_some) => {
            if tags.iter().any(Option::is_none) {
                bail!(Error::Config("manifest split column must be all set or all empty".into()));
            }
            let pick = |want: &str| -> Vec<usize> {
                (0..tags.len()).filter(|&i| tags[i].as_deref() == Some(want)).collect()
            };
            let (tr, te) = (pick("train"), pick("test"));
            if tr.len() + te.len() != tags.len() {
                bail!(Error::Config("manifest split values must be `train` or `test`".into()));
            }
            Ok(Splits {
                train: ds.subset(&tr, "train"),
                test: ds.subset(&te, "test"),
                warnings: Vec::new(),
            })
        }
        _ => {
            let s = split(&ds, d.split, &mut stream(d.seed, "split", 0))?;
            Ok(Splits {
                train: s.train,
                test: s.test,
                warnings: s.warnings,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides_are_extracted() {
        let args = ["train", "--model.k", "16", "--out", "x", "--train.lr=0.5"].map(String::from).to_vec();
        let (rest, ov) = extract_overrides(args).unwrap();
        assert_eq!(rest, ["train", "--out", "x"]);
        assert_eq!(ov, [("model.k".into(), "16".into()), ("train.lr".into(), "0.5".into())]);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = resolve(&RunConfig::default(), None, &[("model.k".into(), "16".into())]).unwrap();
        assert_eq!(cfg.model.k, 16);
        let cfg = resolve(&RunConfig::default(), None, &[("model.fusion".into(), "all_tokens".into())]).unwrap();
        assert_eq!(cfg.model.fusion, crate::model::Fusion::AllTokens);
        assert!(resolve(&RunConfig::default(), None, &[("model.kk".into(), "1".into())]).is_err());
    }
}
