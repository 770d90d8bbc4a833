//! Deterministic parameter creation.
//!
//! The CPU backend has no seedable tensor RNG, so every weight is drawn from
//! a caller-owned ChaCha stream and registered in a [`VarMap`] under a stable
//! name. Checkpoint save/load then works by name through the map.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
    KaimingUniform { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

pub struct ParamBuilder<'a> {
    pub varmap: &'a VarMap,
    pub rng: &'a mut ChaCha8Rng,
    pub device: Device,
    pub dtype: DType,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(varmap: &'a VarMap, rng: &'a mut ChaCha8Rng, dtype: DType) -> Self {
        ParamBuilder {
            varmap,
            rng,
            device: Device::Cpu,
            dtype,
        }
    }

    /// Create (or fetch, if already registered) a named parameter tensor.
    /// The returned tensor shares storage with the tracked [`Var`], so
    /// gradients reach the map.
    pub fn param(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.varmap.data().lock().unwrap().get(name) {
            return Ok(var.as_tensor().clone());
        }
        let count: usize = dims.iter().product();
        let data: Vec<f64> = match init {
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..count).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal { std } => (0..count)
                .map(|_| {
                    let u1: f64 = self.rng.gen_range(1e-12..1.0);
                    let u2: f64 = self.rng.gen_range(0.0..1.0);
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
        };
        let tensor = Tensor::from_vec(data, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let shared = var.as_tensor().clone();
        self.varmap
            .data()
            .lock()
            .unwrap()
            .insert(name.to_string(), var);
        Ok(shared)
    }
}

/// Elementwise dropout with a caller-owned RNG; `None` disables it.
pub fn dropout(
    x: &Tensor,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let Some(rng) = rng else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    assert!(p < 1.0, "dropout probability must be < 1");
    let count = x.elem_count();
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..count)
        .map(|_| if rng.gen_bool(p) { 0.0 } else { scale as f32 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}
