//! Sparse emotion transformer: attention restricted to `s x s` spatial
//! blocks that keep the full temporal extent, run at several rates and
//! fused with learnable scalar weights.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data_model::Dims;
use crate::error::{MednError, Result};
use crate::nn::{Init, LayerNorm, Linear, PatchEmbed, TransformerBlock};
use crate::params::{Bound, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SevitConfig {
    pub rates: Vec<usize>,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for SevitConfig {
    fn default() -> Self {
        Self {
            rates: vec![1, 2, 4, 8],
            patch: 9,
            embed_dim: 128,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl SevitConfig {
    /// Token grid `(H/P, W/P)` for the given input dims.
    pub fn grid(&self, dims: &Dims) -> Result<(usize, usize)> {
        let p = self.patch;
        if p == 0 || !dims.h.is_multiple_of(p) || !dims.w.is_multiple_of(p) {
            return Err(MednError::InvalidConfig(format!(
                "patch {p} does not tile {}x{}",
                dims.h, dims.w
            )));
        }
        Ok((dims.h / p, dims.w / p))
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let (hp, wp) = self.grid(dims)?;
        if self.rates.is_empty() {
            return Err(MednError::InvalidConfig(
                "at least one sparsity rate is required".into(),
            ));
        }
        for &s in &self.rates {
            check_rate(hp, wp, s)?;
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(MednError::InvalidConfig(format!(
                "embed_dim {} does not split into {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

fn check_rate(height: usize, width: usize, rate: usize) -> Result<()> {
    if rate == 0 || !height.is_multiple_of(rate) || !width.is_multiple_of(rate) {
        return Err(MednError::IndivisibleGrid {
            height,
            width,
            rate,
        });
    }
    Ok(())
}

/// Splits `[T, Hp, Wp, C]` tokens into `s²` blocks of `[T, Hp/s, Wp/s, C]`,
/// row-major over the block grid.
pub fn partition(tokens: &Tensor, s: usize) -> Result<Vec<Tensor>> {
    let sh = tokens.shape();
    if sh.len() != 4 {
        return Err(MednError::ShapeMismatch(format!(
            "token grid must be [T, H, W, C], got {sh:?}"
        )));
    }
    let (t, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    check_rate(h, w, s)?;
    let (hb, wb) = (h / s, w / s);
    let blocks = tokens
        .reshape(&[t, s, hb, s, wb, c])?
        .permute(&[1, 3, 0, 2, 4, 5]);
    let n = t * hb * wb * c;
    Ok(blocks
        .data()
        .chunks(n)
        .map(|d| Tensor::from_vec(&[t, hb, wb, c], d.to_vec()).unwrap())
        .collect())
}

/// Inverse of [`partition`]: tiles the blocks back into one grid.
pub fn merge(blocks: &[Tensor], s: usize) -> Result<Tensor> {
    if blocks.len() != s * s || blocks.is_empty() {
        return Err(MednError::ShapeMismatch(format!(
            "{} blocks for rate {s}",
            blocks.len()
        )));
    }
    let sh = blocks[0].shape().to_vec();
    if blocks.iter().any(|b| b.shape() != sh.as_slice()) || sh.len() != 4 {
        return Err(MednError::ShapeMismatch("blocks differ in shape".into()));
    }
    let (t, hb, wb, c) = (sh[0], sh[1], sh[2], sh[3]);
    let data: Vec<f64> = blocks
        .iter()
        .flat_map(|b| b.data().iter().copied())
        .collect();
    Tensor::from_vec(&[s, s, t, hb, wb, c], data)?
        .permute(&[2, 0, 3, 1, 4, 5])
        .reshape(&[t, hb * s, wb * s, c])
}

/// Differentiable partition of `[B, T, Hp, Wp, C]` into `[B·s², T·hb·wb, C]`.
fn partition_var<'g>(x: Var<'g>, s: usize) -> Var<'g> {
    let sh = x.shape();
    let (b, t, h, w, c) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let (hb, wb) = (h / s, w / s);
    if s == 1 {
        return x.reshape(&[b, t * h * w, c]);
    }
    x.reshape(&[b, t, s, hb, s, wb, c])
        .permute(&[0, 2, 4, 1, 3, 5, 6])
        .reshape(&[b * s * s, t * hb * wb, c])
}

fn merge_var<'g>(x: Var<'g>, shape: &[usize], s: usize) -> Var<'g> {
    let (b, t, h, w, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let (hb, wb) = (h / s, w / s);
    if s == 1 {
        return x.reshape(shape);
    }
    x.reshape(&[b, s, s, t, hb, wb, c])
        .permute(&[0, 3, 1, 4, 2, 5, 6])
        .reshape(shape)
}

/// One transformer block applied independently inside every block of the
/// rate-`s` partition; `tokens` is `[B, T, Hp, Wp, C]` and keeps its shape.
pub fn sevit_block<'g>(
    block: &TransformerBlock,
    p: &Bound<'g>,
    tokens: Var<'g>,
    s: usize,
) -> Result<Var<'g>> {
    let shape = tokens.shape();
    if shape.len() != 5 {
        return Err(MednError::ShapeMismatch(format!(
            "tokens must be [B, T, H, W, C], got {shape:?}"
        )));
    }
    check_rate(shape[2], shape[3], s)?;
    let out = block.forward(p, partition_var(tokens, s));
    Ok(merge_var(out, &shape, s))
}

/// One sparsity-rate branch: patch embedding, positions, `depth` sparse
/// blocks, pooling and projection to the feature width.
#[derive(Debug)]
pub struct SevitBranch {
    pub rate: usize,
    pub embed: PatchEmbed,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl SevitBranch {
    pub fn new(
        init: &mut Init<'_>,
        cfg: &SevitConfig,
        dims: &Dims,
        rate: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        let (hp, wp) = cfg.grid(dims)?;
        check_rate(hp, wp, rate)?;
        let c = cfg.embed_dim;
        let steps = dims.t - 1;
        Ok(Self {
            rate,
            embed: PatchEmbed::new(init, "embed", 2, cfg.patch, c),
            pos: init.normal("pos", &[steps, hp, wp, c], 0.02),
            blocks: (0..cfg.depth)
                .map(|i| {
                    TransformerBlock::new(init, &format!("block{i}"), c, cfg.heads, cfg.mlp_ratio)
                })
                .collect(),
            norm: LayerNorm::new(init, "norm", c),
            proj: Linear::new(init, "proj", c, feature_dim, true),
        })
    }

    /// `[B, T-1, 2, H, W]` flow to the pooled branch feature `[B, D]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, flow: Var<'g>) -> Var<'g> {
        let mut x = self.embed.forward(p, flow).add_bcast(p[self.pos]);
        for block in &self.blocks {
            x = sevit_block(block, p, x, self.rate).expect("rate validated at construction");
        }
        let s = x.shape();
        let pooled = self
            .norm
            .forward(p, x)
            .reshape(&[s[0], s[1] * s[2] * s[3], s[4]])
            .mean_axis(1);
        self.proj.forward(p, pooled)
    }
}

/// All rate branches plus their fusion weights.
#[derive(Debug)]
pub struct Sevit {
    pub branches: Vec<SevitBranch>,
    pub gamma: ParamId,
}

impl Sevit {
    pub fn new(
        init: &mut Init<'_>,
        cfg: &SevitConfig,
        dims: &Dims,
        feature_dim: usize,
    ) -> Result<Self> {
        cfg.validate(dims)?;
        let k = cfg.rates.len();
        let branches = cfg
            .rates
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                init.scoped(&format!("rate{i}"), |init| {
                    SevitBranch::new(init, cfg, dims, s, feature_dim)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gamma = init.constant("gamma", &[k], 1.0 / k as f64);
        Ok(Self { branches, gamma })
    }

    /// Returns the fused emotion feature and the per-rate features.
    pub fn forward<'g>(&self, p: &Bound<'g>, flow: Var<'g>) -> (Var<'g>, Vec<Var<'g>>) {
        let feats: Vec<Var<'g>> = self.branches.iter().map(|b| b.forward(p, flow)).collect();
        (multiscale_fuse(&feats, p[self.gamma]), feats)
    }
}

/// `Σ_k gamma[k] · feats[k]`.
pub fn multiscale_fuse<'g>(feats: &[Var<'g>], gamma: Var<'g>) -> Var<'g> {
    assert_eq!(gamma.shape(), vec![feats.len()], "one weight per branch");
    feats
        .iter()
        .enumerate()
        .map(|(k, f)| f.mul_scalar(gamma.narrow(0, k, 1)))
        .reduce(|a, b| a.add(b))
        .expect("at least one branch")
}
