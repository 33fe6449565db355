//! Run configuration: a flat JSON object with namespaced keys.
//!
//! ```json
//! { "model.dim": 64, "loss.lambda_cdl": 0.01, "sampler.kind": "dcs", "seed": 0 }
//! ```
//!
//! Every key is optional; missing keys take their defaults and unknown keys
//! are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::DiversityConfig;
use crate::model::ModelConfig;
use crate::optim::OptimSpec;
use crate::sampling::{FeatureSource, SamplerKind, SamplerSpec};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Architecture knobs; image size, vocabulary and class count come from the
/// dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSpec {
            dim: d.dim,
            depth: d.depth,
            heads: d.heads,
            patch_size: d.patch_size,
            mlp_ratio: d.mlp_ratio,
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self, ds: &Dataset) -> Result<ModelConfig> {
        let c = ModelConfig {
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            patch_size: self.patch_size,
            mlp_ratio: self.mlp_ratio,
            n_classes: ds.n_classes(),
            n_channels: ds.n_channels(),
            height: ds.height,
            width: ds.width,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub loss: DiversityConfig,
    pub sampler: SamplerSpec,
    pub optim: OptimSpec,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Flat {
    #[serde(rename = "model.dim")]
    model_dim: usize,
    #[serde(rename = "model.depth")]
    model_depth: usize,
    #[serde(rename = "model.heads")]
    model_heads: usize,
    #[serde(rename = "model.patch_size")]
    model_patch_size: usize,
    #[serde(rename = "model.mlp_ratio")]
    model_mlp_ratio: usize,
    #[serde(rename = "loss.lambda_cdl")]
    loss_lambda_cdl: f64,
    #[serde(rename = "loss.t_cdl")]
    loss_t_cdl: f64,
    #[serde(rename = "loss.lambda_s")]
    loss_lambda_s: f64,
    #[serde(rename = "loss.lambda_d")]
    loss_lambda_d: f64,
    #[serde(rename = "sampler.kind")]
    sampler_kind: SamplerKind,
    #[serde(rename = "sampler.t_dcs")]
    sampler_t_dcs: f64,
    #[serde(rename = "sampler.feature_source")]
    sampler_feature_source: FeatureSource,
    #[serde(rename = "optim.peak_lr")]
    optim_peak_lr: f64,
    #[serde(rename = "optim.final_lr")]
    optim_final_lr: f64,
    #[serde(rename = "optim.warmup_epochs")]
    optim_warmup_epochs: usize,
    #[serde(rename = "optim.epochs")]
    optim_epochs: usize,
    #[serde(rename = "optim.weight_decay")]
    optim_weight_decay: f64,
    #[serde(rename = "optim.batch_size")]
    optim_batch_size: usize,
    #[serde(rename = "optim.grad_clip")]
    optim_grad_clip: Option<f64>,
    seed: u64,
}

impl Default for Flat {
    fn default() -> Self {
        Flat::from(&RunConfig::default())
    }
}

impl From<&RunConfig> for Flat {
    fn from(c: &RunConfig) -> Self {
        Flat {
            model_dim: c.model.dim,
            model_depth: c.model.depth,
            model_heads: c.model.heads,
            model_patch_size: c.model.patch_size,
            model_mlp_ratio: c.model.mlp_ratio,
            loss_lambda_cdl: c.loss.lambda_cdl,
            loss_t_cdl: c.loss.t_cdl,
            loss_lambda_s: c.loss.lambda_s,
            loss_lambda_d: c.loss.lambda_d,
            sampler_kind: c.sampler.kind,
            sampler_t_dcs: c.sampler.t_dcs,
            sampler_feature_source: c.sampler.feature_source,
            optim_peak_lr: c.optim.peak_lr,
            optim_final_lr: c.optim.final_lr,
            optim_warmup_epochs: c.optim.warmup_epochs,
            optim_epochs: c.optim.epochs,
            optim_weight_decay: c.optim.weight_decay,
            optim_batch_size: c.optim.batch_size,
            optim_grad_clip: c.optim.grad_clip,
            seed: c.seed,
        }
    }
}

impl From<Flat> for RunConfig {
    fn from(f: Flat) -> Self {
        RunConfig {
            model: ModelSpec {
                dim: f.model_dim,
                depth: f.model_depth,
                heads: f.model_heads,
                patch_size: f.model_patch_size,
                mlp_ratio: f.model_mlp_ratio,
            },
            loss: DiversityConfig {
                lambda_cdl: f.loss_lambda_cdl,
                t_cdl: f.loss_t_cdl,
                lambda_s: f.loss_lambda_s,
                lambda_d: f.loss_lambda_d,
            },
            sampler: SamplerSpec {
                kind: f.sampler_kind,
                t_dcs: f.sampler_t_dcs,
                feature_source: f.sampler_feature_source,
            },
            optim: OptimSpec {
                peak_lr: f.optim_peak_lr,
                final_lr: f.optim_final_lr,
                warmup_epochs: f.optim_warmup_epochs,
                epochs: f.optim_epochs,
                weight_decay: f.optim_weight_decay,
                batch_size: f.optim_batch_size,
                grad_clip: f.optim_grad_clip,
                ..OptimSpec::default()
            },
            seed: f.seed,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sampler.validate()?;
        self.optim.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let flat: Flat = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let c = RunConfig::from(flat);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every key with its effective value.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Flat::from(self)).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"model.width": 3}"#).unwrap_err();
        assert!(matches!(e, Error::Config(m) if m.contains("model.width")));
    }

    #[test]
    fn resolved_json_round_trips() {
        let c = RunConfig::from_json(r#"{"sampler.kind": "hcs", "loss.lambda_d": 0.5, "seed": 7, "optim.grad_clip": 1.0}"#).unwrap();
        assert_eq!(c.sampler.kind, SamplerKind::Hcs);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"loss.t_cdl": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"optim.warmup_epochs": 40}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampler.kind": "random"}"#).is_err());
    }
}
