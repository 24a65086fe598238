//! Motion branch: a pluggable backbone over the flow sequence, a projection
//! to the shared feature width, and a multi-label AU head.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Conv3dSpec, Var};
use crate::data_model::Dims;
use crate::error::{MednError, Result};
use crate::nn::{Conv3d, Init, LayerNorm, Linear, PatchEmbed, TransformerBlock};
use crate::params::{Bound, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallConv3d,
    SmallVit,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub kind: BackboneKind,
    /// Output channels of the three convolution blocks.
    pub channels: Vec<usize>,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::SmallConv3d,
            channels: vec![16, 32, 64],
            patch: 9,
            embed_dim: 64,
            depth: 1,
            heads: 4,
        }
    }
}

/// A feature extractor over `[B, T-1, 2, H, W]` flow returning `[B, out_dim]`.
pub trait MotionBackbone: Send + Sync + fmt::Debug {
    fn out_dim(&self) -> usize;
    fn forward<'g>(&self, p: &Bound<'g>, flow: Var<'g>) -> Var<'g>;
}

/// Builds a caller-supplied backbone, registering its parameters through `Init`.
pub type BackboneFactory =
    Arc<dyn Fn(&mut Init<'_>, &Dims) -> Box<dyn MotionBackbone> + Send + Sync>;

/// Convolution blocks with a `1 x 3 x 3` kernel: frames are processed
/// independently and pooled over time, so the features ignore frame order.
#[derive(Debug)]
pub struct SmallConv3d {
    convs: Vec<Conv3d>,
    out_dim: usize,
}

impl SmallConv3d {
    pub fn new(init: &mut Init<'_>, channels: &[usize]) -> Self {
        let mut convs = Vec::new();
        let mut in_ch = 2;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv3d::new(
                init,
                &format!("conv{i}"),
                in_ch,
                c,
                [1, 3, 3],
                Conv3dSpec {
                    stride: [1, stride, stride],
                    padding: [0, 1, 1],
                },
            ));
            in_ch = c;
        }
        Self {
            convs,
            out_dim: in_ch,
        }
    }
}

impl MotionBackbone for SmallConv3d {
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn forward<'g>(&self, p: &Bound<'g>, flow: Var<'g>) -> Var<'g> {
        let mut x = flow.permute(&[0, 2, 1, 3, 4]);
        for conv in &self.convs {
            x = conv.forward(p, x).relu();
        }
        let s = x.shape();
        x.reshape(&[s[0], s[1], s[2] * s[3] * s[4]]).mean_axis(2)
    }
}

/// Global-attention transformer with spatial-only positions; like the
/// convolutional stack it is invariant to frame order.
#[derive(Debug)]
pub struct SmallVit {
    embed: PatchEmbed,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    dim: usize,
}

impl SmallVit {
    pub fn new(init: &mut Init<'_>, cfg: &MotionConfig, dims: &Dims) -> Result<Self> {
        let p = cfg.patch;
        if p == 0 || !dims.h.is_multiple_of(p) || !dims.w.is_multiple_of(p) {
            return Err(MednError::InvalidConfig(format!(
                "motion patch {p} does not tile {}x{}",
                dims.h, dims.w
            )));
        }
        if cfg.heads == 0 || !cfg.embed_dim.is_multiple_of(cfg.heads) {
            return Err(MednError::InvalidConfig(
                "motion embed_dim must split into heads".into(),
            ));
        }
        let c = cfg.embed_dim;
        Ok(Self {
            embed: PatchEmbed::new(init, "embed", 2, p, c),
            pos: init.normal("pos", &[dims.h / p, dims.w / p, c], 0.02),
            blocks: (0..cfg.depth)
                .map(|i| TransformerBlock::new(init, &format!("block{i}"), c, cfg.heads, 4))
                .collect(),
            norm: LayerNorm::new(init, "norm", c),
            dim: c,
        })
    }
}

impl MotionBackbone for SmallVit {
    fn out_dim(&self) -> usize {
        self.dim
    }

    fn forward<'g>(&self, p: &Bound<'g>, flow: Var<'g>) -> Var<'g> {
        let tokens = self.embed.forward(p, flow).add_bcast(p[self.pos]);
        let s = tokens.shape();
        let mut x = tokens.reshape(&[s[0], s[1] * s[2] * s[3], s[4]]);
        for block in &self.blocks {
            x = block.forward(p, x);
        }
        self.norm.forward(p, x).mean_axis(1)
    }
}

#[derive(Debug)]
pub struct MotionBranch {
    pub backbone: Box<dyn MotionBackbone>,
    pub proj: Linear,
    pub au_head: Linear,
}

impl MotionBranch {
    pub fn new(
        init: &mut Init<'_>,
        cfg: &MotionConfig,
        dims: &Dims,
        feature_dim: usize,
        num_aus: usize,
        external: Option<&BackboneFactory>,
    ) -> Result<Self> {
        let backbone: Box<dyn MotionBackbone> = match cfg.kind {
            BackboneKind::SmallConv3d => {
                if cfg.channels.is_empty() || cfg.channels.contains(&0) {
                    return Err(MednError::InvalidConfig(
                        "motion channels must be non-empty and positive".into(),
                    ));
                }
                Box::new(init.scoped("backbone", |i| SmallConv3d::new(i, &cfg.channels)))
            }
            BackboneKind::SmallVit => {
                Box::new(init.scoped("backbone", |i| SmallVit::new(i, cfg, dims))?)
            }
            BackboneKind::External => {
                let factory = external.ok_or_else(|| {
                    MednError::InvalidConfig(
                        "external motion backbone requested but none supplied".into(),
                    )
                })?;
                init.scoped("backbone", |i| factory(i, dims))
            }
        };
        let proj = Linear::new(init, "proj", backbone.out_dim(), feature_dim, true);
        let au_head = Linear::new(init, "au_head", feature_dim, num_aus, true);
        Ok(Self {
            backbone,
            proj,
            au_head,
        })
    }

    /// Returns the motion feature `[B, D]` and AU logits `[B, N_AU]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, flow: Var<'g>) -> (Var<'g>, Var<'g>) {
        let f = self.proj.forward(p, self.backbone.forward(p, flow));
        let logits = self.au_head.forward(p, f);
        (f, logits)
    }
}

/// Batch mean of the per-sample sum of AU binary cross-entropies.
pub fn au_loss<'g>(logits: Var<'g>, targets: &[f64]) -> Var<'g> {
    logits.bce_with_logits(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::autograd::{bce_term, Graph, PROB_EPS};
    use crate::params::{ParamGroup, ParamStore};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> Dims {
        Dims {
            t: 4,
            c: 2,
            h: 8,
            w: 8,
        }
    }

    fn build(kind: BackboneKind, d: usize, n_au: usize) -> (ParamStore, MotionBranch) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Motion);
        let cfg = MotionConfig {
            kind,
            channels: vec![4, 8, 8],
            patch: 4,
            embed_dim: 8,
            heads: 2,
            ..MotionConfig::default()
        };
        let branch = init
            .scoped("motion", |i| {
                MotionBranch::new(i, &cfg, &dims(), d, n_au, None)
            })
            .unwrap();
        (store, branch)
    }

    fn random_flow(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [b, 3, 2, 8, 8];
        let n = shape.iter().product();
        Tensor::from_vec(
            &shape,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_zero_input() {
        for kind in [BackboneKind::SmallConv3d, BackboneKind::SmallVit] {
            let (store, branch) = build(kind, 16, 6);
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let (f, logits) = branch.forward(&p, g.constant(random_flow(4, 1)));
            assert_eq!(f.shape(), vec![4, 16]);
            assert_eq!(logits.shape(), vec![4, 6]);
            if kind == BackboneKind::SmallConv3d {
                let (_, logits) = branch.forward(&p, g.constant(Tensor::zeros(&[2, 3, 2, 8, 8])));
                assert!(logits
                    .value()
                    .data()
                    .iter()
                    .all(|&z| crate::autograd::sigmoid(z) == 0.5));
            }
        }
    }

    #[test]
    fn forward_replays_bitwise() {
        let run = || {
            let (store, branch) = build(BackboneKind::SmallConv3d, 8, 3);
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let (f, l) = branch.forward(&p, g.constant(random_flow(2, 5)));
            ((*f.value()).clone(), (*l.value()).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frame_order_does_not_change_features() {
        for kind in [BackboneKind::SmallConv3d, BackboneKind::SmallVit] {
            let (store, branch) = build(kind, 8, 3);
            let x = random_flow(1, 9);
            let plane = 2 * 64;
            let mut rev = Vec::new();
            for t in (0..3).rev() {
                rev.extend_from_slice(&x.data()[t * plane..(t + 1) * plane]);
            }
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let (a, _) = branch.forward(&p, g.constant(x.clone()));
            let (b, _) = branch.forward(&p, g.constant(Tensor::from_vec(x.shape(), rev).unwrap()));
            assert!(a.value().max_abs_diff(&b.value()) < 1e-12);
        }
    }

    #[test]
    fn au_loss_closed_forms() {
        let g = Graph::new();
        let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let half = au_loss(g.constant(Tensor::zeros(&[1, 6])), &targets);
        assert!((half.value().item() - 6.0 * 2f64.ln()).abs() < 1e-12);
        let perfect: Vec<f64> = targets
            .iter()
            .map(|&y| if y > 0.5 { 40.0 } else { -40.0 })
            .collect();
        let l = au_loss(
            g.constant(Tensor::from_vec(&[1, 6], perfect).unwrap()),
            &targets,
        );
        assert!((l.value().item() - 6.0 * -(1.0 - PROB_EPS).ln()).abs() < 1e-12);
        assert!(bce_term(0.3, 1.0) > bce_term(0.6, 1.0));
    }

    #[test]
    fn au_loss_gradient_is_p_minus_y_over_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, n) = (3, 4);
        let z = Tensor::from_vec(
            &[b, n],
            (0..b * n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let y: Vec<f64> = (0..b * n).map(|i| (i % 2) as f64).collect();
        let g = Graph::new();
        let zv = g.variable(z.clone());
        let grads = g.backward(au_loss(zv, &y));
        let gz = grads.get(zv).unwrap();
        for ((&zi, &gi), &yi) in z.data().iter().zip(gz.data()).zip(&y) {
            let p = 1.0 / (1.0 + (-zi).exp());
            assert!((gi - (p - yi) / b as f64).abs() < 1e-12);
        }
        assert!(max_rel_error(&z, |v| au_loss(v, &y), 1e-6) < 1e-5);
    }

    proptest::proptest! {
        #[test]
        fn au_loss_falls_as_one_probability_nears_its_target(
            logits in proptest::collection::vec(-4.0f64..4.0, 5),
            k in 0usize..5,
            y in 0u8..2,
            step in 0.01f64..2.0,
        ) {
            let targets: Vec<f64> = (0..5).map(|i| if i == k { f64::from(y) } else { (i % 2) as f64 }).collect();
            let loss = |z: &[f64]| {
                let g = Graph::new();
                au_loss(g.constant(Tensor::from_vec(&[1, 5], z.to_vec()).unwrap()), &targets).value().item()
            };
            let mut moved = logits.clone();
            moved[k] += if y == 1 { step } else { -step };
            let (before, after) = (loss(&logits), loss(&moved));
            proptest::prop_assert!(before >= 0.0 && after >= 0.0);
            proptest::prop_assert!(after < before);
        }
    }
}
