//! Shared classification head: dense(in -> w0) + leaky ReLU + dropout(d0)
//! + dense(w0 -> w1) + leaky ReLU + dropout(d1) + dense(w1 -> 1).

use candle_core::Tensor;
use candle_nn::{ops, Linear, Module};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::{dropout, Init, ParamBuilder};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub widths: Vec<usize>,
    pub dropout: Vec<f64>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            widths: vec![1024, 256],
            dropout: vec![0.6, 0.3],
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.dropout.len() {
            return Err(ModelError::InvalidConfig(format!(
                "head widths ({}) and dropout ({}) must have equal length",
                self.widths.len(),
                self.dropout.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(ModelError::InvalidConfig("head widths must be positive".into()));
        }
        if self.dropout.iter().any(|&d| !(0.0..1.0).contains(&d)) {
            return Err(ModelError::InvalidConfig("dropout rates must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Exact trainable parameter count for an input of width `in_dim`.
    pub fn parameter_count(&self, in_dim: usize) -> usize {
        let mut total = 0;
        let mut prev = in_dim;
        for &w in &self.widths {
            total += prev * w + w;
            prev = w;
        }
        total + prev + 1
    }
}

pub struct ClassifierHead {
    hidden: Vec<Linear>,
    output: Linear,
    dropout: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(
        pb: &mut ParamBuilder,
        prefix: &str,
        in_dim: usize,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut hidden = Vec::new();
        let mut prev = in_dim;
        for (i, &width) in cfg.widths.iter().enumerate() {
            let w = pb.param(
                &format!("{prefix}.fc{i}.weight"),
                &[width, prev],
                Init::KaimingUniform { fan_in: prev },
            )?;
            let b = pb.param(
                &format!("{prefix}.fc{i}.bias"),
                &[width],
                Init::KaimingUniform { fan_in: prev },
            )?;
            hidden.push(Linear::new(w, Some(b)));
            prev = width;
        }
        let w = pb.param(
            &format!("{prefix}.out.weight"),
            &[1, prev],
            Init::KaimingUniform { fan_in: prev },
        )?;
        let b = pb.param(
            &format!("{prefix}.out.bias"),
            &[1],
            Init::KaimingUniform { fan_in: prev },
        )?;
        Ok(ClassifierHead {
            hidden,
            output: Linear::new(w, Some(b)),
            dropout: cfg.dropout.clone(),
        })
    }

    /// Map (B, in_dim) to a (B,) logit vector. Dropout is active only when an
    /// RNG is supplied.
    pub fn forward(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut x = x.clone();
        for (layer, &p) in self.hidden.iter().zip(&self.dropout) {
            x = ops::leaky_relu(&layer.forward(&x)?, LEAKY_SLOPE)?;
            x = dropout(&x, p, rng.as_deref_mut())?;
        }
        Ok(self.output.forward(&x)?.squeeze(1)?)
    }
}
