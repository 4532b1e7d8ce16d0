//! Structural ablations: a matrix of variants, each a set of axis overrides
//! applied to one base model, trained identically and reported in one CSV.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::{train, TrainConfig};
use crate::analysis::count_params;
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::model::{build_model, Fusion, ModelConfig, ParallelBranch};
use crate::tensor::{ActivationKind, DType};

pub const ABLATION_HEADER: [&str; 13] = [
    "id",
    "dilation_sets",
    "pcm",
    "fusion",
    "pcm_bn",
    "pcm_extra_bn",
    "pcm_activation",
    "prm_activation",
    "parallel_branch",
    "params",
    "epochs",
    "final_train_loss",
    "val_top1",
];

/// One row of the matrix. Unset axes keep the base model's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub id: String,
    /// One dilation set per reduction cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation_sets: Option<Vec<Vec<usize>>>,
    /// Convolutional branch in every cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcm: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<Fusion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcm_bn: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcm_extra_bn: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcm_activation: Option<ActivationKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prm_activation: Option<ActivationKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel_branch: Option<ParallelBranch>,
}

impl Variant {
    pub fn new(id: &str) -> Self {
        Variant {
            id: id.to_string(),
            ..Variant::default()
        }
    }

    /// The base model with this variant's overrides applied and validated.
    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        if let Some(sets) = &self.dilation_sets {
            if sets.len() != cfg.rcs.len() {
                return Err(config_err!(
                    "variant {:?}: {} dilation sets for {} reduction cells",
                    self.id,
                    sets.len(),
                    cfg.rcs.len()
                ));
            }
            for (rc, set) in cfg.rcs.iter_mut().zip(sets) {
                rc.dilation_set = set.clone();
            }
        }
        for rc in &mut cfg.rcs {
            set(&mut rc.pcm_enabled, self.pcm);
            set(&mut rc.fusion, self.fusion);
            set(&mut rc.pcm_bn, self.pcm_bn);
            set(&mut rc.pcm_extra_bn, self.pcm_extra_bn);
            set(&mut rc.pcm_activation, self.pcm_activation);
            set(&mut rc.prm_activation, self.prm_activation);
            set(&mut rc.parallel_branch, self.parallel_branch);
        }
        for nc in &mut cfg.ncs {
            set(&mut nc.pcm_enabled, self.pcm);
            set(&mut nc.fusion, self.fusion);
            set(&mut nc.pcm_bn, self.pcm_bn);
            set(&mut nc.pcm_extra_bn, self.pcm_extra_bn);
            set(&mut nc.pcm_activation, self.pcm_activation);
        }
        cfg.validate()
            .map_err(|e| config_err!("variant {:?}: {e}", self.id))?;
        Ok(cfg)
    }
}

fn set<V: Copy>(slot: &mut V, value: Option<V>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub variants: Vec<Variant>,
}

impl AblationMatrix {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err!("ablation matrix: {e}"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(config_err!("ablation matrix has no variants"));
        }
        let mut seen = HashSet::new();
        for v in &self.variants {
            if v.id.is_empty() {
                return Err(config_err!("variant ids must not be empty"));
            }
            if !seen.insert(v.id.as_str()) {
                return Err(config_err!("duplicate variant id {:?}", v.id));
            }
        }
        Ok(())
    }

    /// Table-style matrix for a three-RC model: the four dilation schedules
    /// (`[1,2]×3`, `[1,2,3]×3`, `[1,2,3,4]×3` and the decreasing
    /// `[1,2,3,4]↓`), PCM off, post fusion, BN switched off and doubled, the
    /// activation swap and PCM replaced by PRM.
    pub fn standard() -> Self {
        let sched = |id: &str, sets: &[&[usize]]| Variant {
            dilation_sets: Some(sets.iter().map(|s| s.to_vec()).collect()),
            ..Variant::new(id)
        };
        AblationMatrix {
            variants: vec![
                sched("s12x3", &[&[1, 2], &[1, 2], &[1, 2]]),
                sched("s123x3", &[&[1, 2, 3], &[1, 2, 3], &[1, 2, 3]]),
                sched("s1234x3", &[&[1, 2, 3, 4], &[1, 2, 3, 4], &[1, 2, 3, 4]]),
                sched("s1234down", &[&[1, 2, 3, 4], &[1, 2, 3], &[1, 2]]),
                Variant { pcm: Some(false), ..Variant::new("no_pcm") },
                Variant { fusion: Some(Fusion::Post), ..Variant::new("post_fusion") },
                Variant { pcm_bn: Some(false), ..Variant::new("no_bn") },
                Variant { pcm_extra_bn: Some(true), ..Variant::new("extra_bn") },
                Variant {
                    pcm_activation: Some(ActivationKind::Gelu),
                    prm_activation: Some(ActivationKind::Silu),
                    ..Variant::new("swap_act")
                },
                Variant {
                    parallel_branch: Some(ParallelBranch::Prm),
                    ..Variant::new("pcm_as_prm")
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub config: ModelConfig,
    pub params: u64,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub val_top1: Option<f64>,
}

impl AblationRow {
    fn record(&self) -> Vec<String> {
        let rc0 = &self.config.rcs[0];
        let sets = self
            .config
            .rcs
            .iter()
            .map(|r| {
                let s: Vec<String> = r.dilation_set.iter().map(|d| d.to_string()).collect();
                s.join(" ")
            })
            .collect::<Vec<_>>()
            .join("|");
        vec![
            self.variant.id.clone(),
            sets,
            rc0.pcm_enabled.to_string(),
            enum_name(&rc0.fusion),
            rc0.pcm_bn.to_string(),
            rc0.pcm_extra_bn.to_string(),
            enum_name(&rc0.pcm_activation),
            enum_name(&rc0.prm_activation),
            enum_name(&rc0.parallel_branch),
            self.params.to_string(),
            self.epochs.to_string(),
            self.final_train_loss.to_string(),
            self.val_top1.map(|v| v.to_string()).unwrap_or_default(),
        ]
    }
}

/// Lower-case serde name of a unit enum variant.
fn enum_name<V: Serialize>(v: &V) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

/// Builds every variant first, so a bad row fails before any training, then
/// trains each with the same recipe and data. With an output directory, each
/// variant writes its own metrics under `<dir>/<id>/` and `ablation.csv` is
/// rewritten after every variant.
pub fn run_ablation(
    base: &ModelConfig,
    matrix: &AblationMatrix,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    output_dir: Option<&Path>,
    mut on_variant: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    matrix.validate()?;
    let configs = matrix
        .variants
        .iter()
        .map(|v| v.apply(base))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(configs.len());
    for (variant, config) in matrix.variants.iter().zip(configs) {
        let dir = output_dir.map(|d| d.join(&variant.id));
        let (final_loss, top1, params) = match cfg.dtype {
            DType::Float32 => summarize(train::<f32>(&config, cfg, train_ds, val_ds, dir.as_deref())?),
            DType::Float64 => summarize(train::<f64>(&config, cfg, train_ds, val_ds, dir.as_deref())?),
        };
        let row = AblationRow {
            variant: variant.clone(),
            config,
            params,
            epochs: cfg.epochs,
            final_train_loss: final_loss,
            val_top1: top1,
        };
        on_variant(&row);
        rows.push(row);
        if let Some(d) = output_dir {
            write_ablation_csv(&d.join("ablation.csv"), &rows)?;
        }
    }
    Ok(rows)
}

fn summarize<T: crate::tensor::Float>(run: super::trainer::TrainRun<T>) -> (f64, Option<f64>, u64) {
    let last = run.metrics.last().expect("at least one epoch");
    (last.train_loss, last.val_top1, count_params(&run.params).total_params())
}

/// Parameter count of every variant without training.
pub fn variant_params(base: &ModelConfig, matrix: &AblationMatrix) -> Result<Vec<(String, u64)>> {
    matrix.validate()?;
    matrix
        .variants
        .iter()
        .map(|v| {
            let (p, _) = build_model::<f32>(&v.apply(base)?)?;
            Ok((v.id.clone(), count_params(&p).total_params()))
        })
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(ABLATION_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_matrix_builds_on_micro_64() {
        let base = ModelConfig::vitae_micro_64();
        let m = AblationMatrix::standard();
        let counts = variant_params(&base, &m).unwrap();
        assert_eq!(counts.len(), m.variants.len());
        let get = |id: &str| counts.iter().find(|(i, _)| i == id).unwrap().1;
        assert!(get("no_pcm") < get("s12x3"));
        assert!(get("s12x3") < get("s1234x3"));
    }

    #[test]
    fn matrix_validation() {
        let dup = AblationMatrix {
            variants: vec![Variant::new("a"), Variant::new("a")],
        };
        assert!(matches!(dup.validate(), Err(Error::Config(_))));
        assert!(AblationMatrix::from_json(r#"{"variants":[{"id":"a","depth":3}]}"#).is_err());
        let m = AblationMatrix::from_json(r#"{"variants":[{"id":"a","fusion":"post","pcm":false}]}"#).unwrap();
        assert_eq!(m.variants[0].fusion, Some(Fusion::Post));
        let wrong = Variant {
            dilation_sets: Some(vec![vec![1]]),
            ..Variant::new("x")
        };
        assert!(wrong.apply(&ModelConfig::vitae_micro_64()).is_err());
    }
}
