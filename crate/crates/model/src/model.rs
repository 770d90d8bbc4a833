//! The three classifier variants sharing one head design.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::{ops, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::gcvit::{self, Backbone, BackboneConfig};
use crate::head::{ClassifierHead, HeadConfig};
use crate::params::ParamBuilder;
use sdf_core::morphometry::{NormStats, MORPH_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vision,
    Morphology,
    Ensemble,
}

impl Variant {
    pub fn uses_images(self) -> bool {
        !matches!(self, Variant::Morphology)
    }

    pub fn uses_features(self) -> bool {
        !matches!(self, Variant::Vision)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Vision => "vision",
            Variant::Morphology => "morphology",
            Variant::Ensemble => "ensemble",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_backbone")]
    pub backbone_id: String,
    #[serde(default = "default_morph_dim")]
    pub morph_dim: usize,
    #[serde(default)]
    pub head: HeadConfig,
}

fn default_backbone() -> String {
    "gcvit-micro".into()
}

fn default_morph_dim() -> usize {
    MORPH_DIM
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            backbone_id: default_backbone(),
            morph_dim: default_morph_dim(),
            head: HeadConfig::default(),
        }
    }

    pub fn head_input_dim(&self) -> Result<usize> {
        let d = if self.variant.uses_images() {
            BackboneConfig::lookup(&self.backbone_id)?.embed_dim()
        } else {
            0
        };
        let m = if self.variant.uses_features() {
            self.morph_dim
        } else {
            0
        };
        Ok(d + m)
    }
}

pub struct SdfModel {
    pub config: ModelConfig,
    pub varmap: VarMap,
    backbone: Option<Backbone>,
    head: ClassifierHead,
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<SdfModel> {
    build_model_with_dtype(cfg, seed, DType::F32)
}

/// Same as [`build_model`] but with a caller-chosen float width; f64 keeps
/// finite-difference gradient checks out of round-off trouble.
pub fn build_model_with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<SdfModel> {
    cfg.head.validate()?;
    let varmap = VarMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&varmap, &mut rng, dtype);
    let backbone = if cfg.variant.uses_images() {
        let bb_cfg = BackboneConfig::lookup(&cfg.backbone_id)?;
        Some(Backbone::new(&mut pb, "backbone", &bb_cfg)?)
    } else {
        None
    };
    let head = ClassifierHead::new(&mut pb, "head", cfg.head_input_dim()?, &cfg.head)?;
    Ok(SdfModel {
        config: cfg.clone(),
        varmap,
        backbone,
        head,
    })
}

impl SdfModel {
    pub fn backbone_config(&self) -> Option<&BackboneConfig> {
        self.backbone.as_ref().map(|b| b.config())
    }

    /// Side length the image pathway expects, if there is one.
    pub fn input_size(&self) -> Option<usize> {
        self.backbone_config().map(|c| c.input_size)
    }

    /// Forward to a (B,) logit vector. `images` is (B, S, S); `features` is
    /// (B, morph_dim), already normalized. Dropout runs only when an RNG is
    /// supplied.
    pub fn forward(
        &self,
        images: Option<&Tensor>,
        features: Option<&Tensor>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let mut parts: Vec<Tensor> = Vec::new();
        if let Some(backbone) = &self.backbone {
            let images = images.ok_or_else(|| {
                ModelError::DimensionMismatch(format!(
                    "{} variant requires images",
                    self.config.variant
                ))
            })?;
            parts.push(backbone.forward(images)?);
        }
        if self.config.variant.uses_features() {
            let features = features.ok_or_else(|| {
                ModelError::DimensionMismatch(format!(
                    "{} variant requires morphology features",
                    self.config.variant
                ))
            })?;
            let (_, m) = features.dims2()?;
            if m != self.config.morph_dim {
                return Err(ModelError::DimensionMismatch(format!(
                    "expected {} features, got {m}",
                    self.config.morph_dim
                )));
            }
            parts.push(features.to_dtype(self.dtype())?);
        }
        let x = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Tensor::cat(&parts, 1)?
        };
        self.head.forward(&x, rng)
    }

    /// Evaluation-mode probabilities in (0,1).
    pub fn predict_proba(
        &self,
        images: Option<&Tensor>,
        features: Option<&Tensor>,
    ) -> Result<Tensor> {
        Ok(ops::sigmoid(&self.forward(images, features, None)?)?)
    }

    pub fn dtype(&self) -> DType {
        self.varmap
            .all_vars()
            .first()
            .map(|v| v.dtype())
            .unwrap_or(DType::F32)
    }

    /// Ordered parameter groups for layer-wise learning-rate decay: group 0 is
    /// the head (plus any non-backbone parameters), then backbone stages from
    /// output-most to input-most.
    pub fn parameter_groups(&self) -> Vec<Vec<Var>> {
        let n_stages = self
            .backbone_config()
            .map(|c| c.depths.len())
            .unwrap_or(0);
        let mut groups: Vec<Vec<Var>> = vec![Vec::new(); n_stages + 1];
        let data = self.varmap.data().lock().unwrap();
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        for name in names {
            let var = data[name].clone();
            let k = if name.starts_with("head.") {
                0
            } else {
                gcvit::group_of(name, "backbone", n_stages)
                    .expect("backbone parameter without a group")
            };
            groups[k].push(var);
        }
        groups
    }

    pub fn save_checkpoint(&self, dir: &Path, norm_stats: Option<&NormStats>) -> Result<()> {
        fs::create_dir_all(dir)
            .map_err(|e| ModelError::Checkpoint(format!("create {}: {e}", dir.display())))?;
        self.varmap.save(dir.join("model.bin"))?;
        let cfg = serde_json::to_string_pretty(&self.config)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("config.json"), cfg)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if let Some(stats) = norm_stats {
            stats.save(&dir.join("norm_stats.json"))?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(SdfModel, Option<NormStats>)> {
        let cfg_text = fs::read_to_string(dir.join("config.json"))
            .map_err(|e| ModelError::Checkpoint(format!("read config.json: {e}")))?;
        let cfg: ModelConfig =
            serde_json::from_str(&cfg_text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = build_model(&cfg, 0)?;
        model.varmap.load(dir.join("model.bin"))?;
        let stats_path = dir.join("norm_stats.json");
        let stats = if stats_path.exists() {
            Some(NormStats::load(&stats_path)?)
        } else {
            None
        };
        Ok((model, stats))
    }
}
