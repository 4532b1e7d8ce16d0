//! Run configuration files: a model (preset, preset plus overrides, or a full
//! description), a training recipe, one data source and an output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use vitae::data::{gen_synthetic, load_idx, Dataset, SyntheticSpec};
use vitae::train::TrainConfig;
use vitae::ModelConfig;

/// A parsed and resolved configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Exactly one of the two sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticData),
    Idx(IdxData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    /// Defaults to the model's input height.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<usize>,
    pub train_per_class: usize,
    #[serde(default)]
    pub val_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `seed + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxData {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_labels: Option<PathBuf>,
}

impl SyntheticData {
    pub fn spec(&self, model: &ModelConfig, per_class: usize, seed: u64) -> SyntheticSpec {
        let base = SyntheticSpec::new(self.canvas.unwrap_or(model.input_size.0), per_class, seed);
        SyntheticSpec {
            scale_range: self.scale_range.unwrap_or(base.scale_range),
            noise_std: self.noise_std.unwrap_or(base.noise_std),
            ..base
        }
    }
}

impl DataSource {
    /// Training set and optional validation set. Relative IDX paths resolve
    /// against `base`.
    pub fn load(&self, model: &ModelConfig, base: &Path) -> Result<(Dataset, Option<Dataset>)> {
        match self {
            DataSource::Synthetic(s) => {
                let train = gen_synthetic(&s.spec(model, s.train_per_class, s.seed))?;
                let val = if s.val_per_class > 0 {
                    let seed = s.val_seed.unwrap_or(s.seed.wrapping_add(1));
                    Some(gen_synthetic(&s.spec(model, s.val_per_class, seed))?)
                } else {
                    None
                };
                Ok((train, val))
            }
            DataSource::Idx(d) => {
                let at = |p: &Path| base.join(p);
                let train = load_idx(at(&d.train_images), at(&d.train_labels))?;
                let val = match (&d.val_images, &d.val_labels) {
                    (Some(i), Some(l)) => Some(load_idx(at(i), at(l))?),
                    (None, None) => None,
                    _ => bail!("data.idx: val_images and val_labels must be given together"),
                };
                Ok((train, val))
            }
        }
    }
}

/// Recursively merges `over` into `base`; objects merge key by key, every
/// other value (arrays included) is replaced.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// Resolves the `model` entry: a preset name, `{"preset": name, ...overrides}`
/// or a full description.
pub fn resolve_model(value: Value) -> Result<Value> {
    match value {
        Value::String(name) => Ok(preset_value(&name)?),
        Value::Object(mut obj) => match obj.remove("preset") {
            Some(Value::String(name)) => {
                let mut base = preset_value(&name)?;
                merge(&mut base, Value::Object(obj));
                Ok(base)
            }
            Some(_) => bail!("model.preset: expected a preset name"),
            None => Ok(Value::Object(obj)),
        },
        _ => bail!("model: expected a preset name or an object"),
    }
}

fn preset_value(name: &str) -> Result<Value> {
    Ok(serde_json::to_value(ModelConfig::preset(name)?)?)
}

/// Deserializes a JSON value, naming the offending field on failure.
pub fn parse_value<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = match (what.is_empty(), path == ".") {
            (_, true) => what.to_string(),
            (true, false) => path,
            (false, false) => format!("{what}.{path}"),
        };
        anyhow::anyhow!("{field}: {}", e.into_inner())
    })
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut root: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        if let Value::Object(obj) = &mut root {
            if let Some(model) = obj.remove("model") {
                obj.insert("model".into(), resolve_model(model)?);
            }
        }
        let cfg: CliConfig = parse_value(root, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            if s.train_per_class == 0 {
                bail!("data.synthetic.train_per_class must be at least 1");
            }
            s.spec(&self.model, s.train_per_class, s.seed).validate()?;
        }
        Ok(())
    }
}

/// Model entry given on its own, e.g. as `--config` for the inspection
/// commands: either a full run configuration or just a model.
pub fn load_model(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
    let model = match value {
        Value::Object(mut obj) if obj.contains_key("model") => obj.remove("model").unwrap_or(Value::Null),
        other => other,
    };
    let cfg: ModelConfig = parse_value(resolve_model(model)?, "model")?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vitae::model::Fusion;
    use vitae::train::AblationMatrix;

    const RUN: &str = r#"{
        "model": {"preset": "vitae-micro", "num_classes": 5, "ncs": [{"embed_dim": 8, "heads": 4}]},
        "train": {"epochs": 3},
        "data": {"synthetic": {"train_per_class": 4}}
    }"#;

    #[test]
    fn overrides_win_field_wise() {
        let cfg = CliConfig::from_json(RUN).unwrap();
        let preset = ModelConfig::vitae_micro();
        assert_eq!(cfg.model.num_classes, 5);
        assert_eq!(cfg.model.rcs, preset.rcs);
        assert_eq!(cfg.model.ncs[0].heads, 4);
        assert_eq!(cfg.model.ncs[0].fusion, Fusion::Pre);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn parse_emit_parse_is_stable() {
        let once = CliConfig::from_json(RUN).unwrap();
        let twice = CliConfig::from_json(&once.to_json()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.to_json(), twice.to_json());
    }

    #[test]
    fn errors_name_the_field() {
        let err = CliConfig::from_json(&RUN.replace("\"epochs\"", "\"epoch\"")).unwrap_err();
        assert!(err.to_string().starts_with("train"), "{err}");
        let err = CliConfig::from_json(&RUN.replace("\"heads\": 4", "\"heads\": \"four\"")).unwrap_err();
        assert!(err.to_string().contains("model.ncs[0].heads"), "{err}");
        assert!(CliConfig::from_json(&RUN.replace("vitae-micro", "vitae-xl")).is_err());
        let no_data = r#"{"model": "vitae-micro"}"#;
        assert!(CliConfig::from_json(no_data).is_err());
    }

    #[test]
    fn dilation_schedule_matrix_builds() {
        let m: AblationMatrix = parse_value(
            serde_json::from_str(
                r#"{"variants": [
                    {"id": "s12x3", "dilation_sets": [[1,2],[1,2],[1,2]]},
                    {"id": "s123x3", "dilation_sets": [[1,2,3],[1,2,3],[1,2,3]]},
                    {"id": "s1234x3", "dilation_sets": [[1,2,3,4],[1,2,3,4],[1,2,3,4]]},
                    {"id": "s1234down", "dilation_sets": [[1,2,3,4],[1,2,3],[1,2]]}
                ]}"#,
            )
            .unwrap(),
            "matrix",
        )
        .unwrap();
        let base = ModelConfig::vitae_micro_64();
        for v in &m.variants {
            let cfg = v.apply(&base).unwrap();
            vitae::build_model::<f32>(&cfg).unwrap();
        }
    }
}
