//! Small hierarchical vision transformer with global-context attention.
//!
//! Images are split into non-overlapping patches, linearly embedded, and
//! passed through a stack of stages. Each block attends over the local tokens
//! plus one globally pooled context token; between stages a 2x2 patch-merging
//! step halves the grid and doubles the channel width. The final embedding is
//! the mean-pooled, layer-normed token set.

use candle_core::{Tensor, D};
use candle_nn::{ops, LayerNorm, Linear, Module};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::{Init, ParamBuilder};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub id: String,
    /// Side length of the square input image in pixels.
    pub input_size: usize,
    pub patch_size: usize,
    /// Channel width of the first stage; doubles after each merge.
    pub dim: usize,
    /// Number of attention blocks per stage.
    pub depths: Vec<usize>,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    /// Known configurations, smallest first.
    pub fn registry() -> Vec<BackboneConfig> {
        vec![
            BackboneConfig {
                id: "gcvit-micro".into(),
                input_size: 64,
                patch_size: 8,
                dim: 32,
                depths: vec![1, 1],
                heads: 2,
                mlp_ratio: 4,
            },
            BackboneConfig {
                id: "gcvit-tiny".into(),
                input_size: 96,
                patch_size: 8,
                dim: 48,
                depths: vec![2, 2],
                heads: 4,
                mlp_ratio: 4,
            },
            BackboneConfig {
                id: "gcvit-base224".into(),
                input_size: 224,
                patch_size: 16,
                dim: 64,
                depths: vec![2, 2, 4],
                heads: 4,
                mlp_ratio: 4,
            },
        ]
    }

    pub fn lookup(id: &str) -> Result<BackboneConfig> {
        Self::registry()
            .into_iter()
            .find(|c| c.id == id)
            .ok_or_else(|| ModelError::UnknownBackbone(id.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(ModelError::InvalidConfig("backbone needs at least one stage".into()));
        }
        if self.input_size % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        let mut grid = self.input_size / self.patch_size;
        for _ in 1..self.depths.len() {
            if grid % 2 != 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "token grid {grid} not divisible by 2 at a merge step"
                )));
            }
            grid /= 2;
        }
        let dim_per_head = self.dim / self.heads;
        if dim_per_head == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Width of the pooled output embedding.
    pub fn embed_dim(&self) -> usize {
        self.dim << (self.depths.len() - 1)
    }
}

fn linear(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = pb.param(
        &format!("{name}.weight"),
        &[out_dim, in_dim],
        Init::KaimingUniform { fan_in: in_dim },
    )?;
    let b = pb.param(
        &format!("{name}.bias"),
        &[out_dim],
        Init::KaimingUniform { fan_in: in_dim },
    )?;
    Ok(Linear::new(w, Some(b)))
}

fn layer_norm(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<LayerNorm> {
    let w = pb.param(&format!("{name}.weight"), &[dim], Init::Ones)?;
    let b = pb.param(&format!("{name}.bias"), &[dim], Init::Zeros)?;
    Ok(LayerNorm::new(w, b, LN_EPS))
}

struct Attention {
    norm: LayerNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
}

impl Attention {
    fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            norm: layer_norm(pb, &format!("{name}.norm"), dim)?,
            qkv: linear(pb, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: linear(pb, &format!("{name}.proj"), dim, dim)?,
            heads,
            scale: ((dim / heads) as f64).powf(-0.5),
        })
    }

    /// Self-attention over the tokens plus one mean-pooled context token that
    /// contributes keys and values only.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let h = self.heads;
        let dh = d / h;
        let normed = self.norm.forward(x)?;
        let global = normed.mean_keepdim(1)?; // (B, 1, D)
        let with_ctx = Tensor::cat(&[&normed, &global], 1)?; // (B, N+1, D)

        let qkv = self.qkv.forward(&with_ctx)?; // (B, N+1, 3D)
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(2, i * d, d)?)
        };
        let to_heads = |t: &Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = to_heads(&split(0)?.narrow(1, 0, n)?, n)?; // queries: local tokens only
        let k = to_heads(&split(1)?, n + 1)?;
        let v = to_heads(&split(2)?, n + 1)?;

        let attn = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * self.scale)?;
        let attn = ops::softmax_last_dim(&attn)?;
        let out = attn.matmul(&v)?; // (B, H, N, dh)
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        Ok(self.proj.forward(&out)?)
    }
}

struct Mlp {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(pb: &mut ParamBuilder, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Mlp {
            norm: layer_norm(pb, &format!("{name}.norm"), dim)?,
            fc1: linear(pb, &format!("{name}.fc1"), dim, dim * ratio)?,
            fc2: linear(pb, &format!("{name}.fc2"), dim * ratio, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.fc1.forward(&self.norm.forward(x)?)?.gelu_erf()?;
        Ok(self.fc2.forward(&y)?)
    }
}

struct Block {
    attn: Attention,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(x)?)?;
        Ok((&x + self.mlp.forward(&x)?)?)
    }
}

struct Merge {
    reduce: Linear,
}

impl Merge {
    /// (B, gh*gw, D) -> (B, gh/2 * gw/2, 2D) by concatenating 2x2 neighbors
    /// and projecting 4D -> 2D.
    fn forward(&self, x: &Tensor, grid: usize) -> Result<Tensor> {
        let (b, _, d) = x.dims3()?;
        let g2 = grid / 2;
        let x = x
            .reshape((b, g2, 2, g2, 2, d))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, g2 * g2, 4 * d))?;
        Ok(self.reduce.forward(&x)?)
    }
}

pub struct Backbone {
    cfg: BackboneConfig,
    patch_embed: Linear,
    pos_embed: Tensor,
    stages: Vec<Vec<Block>>,
    merges: Vec<Merge>,
    final_norm: LayerNorm,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.input_size / cfg.patch_size;
        let patch_dim = cfg.patch_size * cfg.patch_size;
        let patch_embed = linear(pb, &format!("{prefix}.patch_embed"), patch_dim, cfg.dim)?;
        let pos_embed = pb.param(
            &format!("{prefix}.pos_embed"),
            &[grid * grid, cfg.dim],
            Init::Normal { std: 0.02 },
        )?;
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        let mut dim = cfg.dim;
        for (s, &depth) in cfg.depths.iter().enumerate() {
            if s > 0 {
                // merge concatenates 2x2 neighbors of the previous width dim/2
                let reduce = linear(pb, &format!("{prefix}.down{}.reduce", s - 1), 4 * (dim / 2), dim)?;
                merges.push(Merge { reduce });
            }
            let mut blocks = Vec::new();
            for bidx in 0..depth {
                let name = format!("{prefix}.stage{s}.block{bidx}");
                blocks.push(Block {
                    attn: Attention::new(pb, &format!("{name}.attn"), dim, cfg.heads)?,
                    mlp: Mlp::new(pb, &format!("{name}.mlp"), dim, cfg.mlp_ratio)?,
                });
            }
            stages.push(blocks);
            dim *= 2;
        }
        dim /= 2;
        let final_norm = layer_norm(pb, &format!("{prefix}.norm"), dim)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            stages,
            merges,
            final_norm,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// (B, S, S) grayscale batch -> (B, embed_dim) pooled embedding.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (b, h, w) = images.dims3()?;
        let s = self.cfg.input_size;
        if h != s || w != s {
            return Err(ModelError::DimensionMismatch(format!(
                "expected {s}x{s} input, got {h}x{w}"
            )));
        }
        let p = self.cfg.patch_size;
        let grid = s / p;
        // (B, S, S) -> (B, grid*grid, p*p)
        let patches = images
            .reshape((b, grid, p, grid, p))?
            .permute((0, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((b, grid * grid, p * p))?
            .to_dtype(self.pos_embed.dtype())?;
        let mut x = self
            .patch_embed
            .forward(&patches)?
            .broadcast_add(&self.pos_embed)?;
        let mut g = grid;
        for (s_idx, blocks) in self.stages.iter().enumerate() {
            if s_idx > 0 {
                x = self.merges[s_idx - 1].forward(&x, g)?;
                g /= 2;
            }
            for block in blocks {
                x = block.forward(&x)?;
            }
        }
        let x = self.final_norm.forward(&x)?;
        Ok(x.mean(D::Minus2)?)
    }
}

/// Parameter group index for a named backbone parameter, per the layer-wise
/// decay convention: group 1 = output-most stage plus the final norm, rising
/// toward group L = input-most stage plus the patch/position embeddings.
pub fn group_of(name: &str, prefix: &str, n_stages: usize) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?.strip_prefix('.')?;
    if rest.starts_with("norm.") {
        return Some(1);
    }
    if rest.starts_with("patch_embed") || rest.starts_with("pos_embed") {
        return Some(n_stages);
    }
    if let Some(tail) = rest.strip_prefix("stage") {
        let idx: usize = tail.split('.').next()?.parse().ok()?;
        return Some(n_stages - idx);
    }
    if let Some(tail) = rest.strip_prefix("down") {
        // down{s} feeds stage s+1
        let idx: usize = tail.split('.').next()?.parse().ok()?;
        return Some(n_stages - (idx + 1));
    }
    None
}
