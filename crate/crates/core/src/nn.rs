//! Layers shared by the branches: linear maps, layer norm, multi-head
//! self-attention, pre-norm transformer blocks and 3-D convolutions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Conv3dSpec, Var};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Creates parameters under a name prefix, drawing initial values from a
/// seeded generator so that model construction is reproducible.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Self {
            store,
            rng,
            group,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut child = Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            group: self.group,
            prefix,
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value, self.group)
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..numel(shape))
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.tensor(name, Tensor::from_vec(shape, data).unwrap())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).unwrap();
        let data = (0..numel(shape)).map(|_| dist.sample(self.rng)).collect();
        self.tensor(name, Tensor::from_vec(shape, data).unwrap())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.tensor(name, Tensor::full(shape, value))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        init.scoped(name, |init| Linear {
            weight: init.kaiming("weight", &[in_dim, out_dim], in_dim),
            bias: bias.then(|| init.constant("bias", &[out_dim], 0.0)),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(p[self.weight]);
        match self.bias {
            Some(b) => y.add_bcast(p[b]),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        init.scoped(name, |init| LayerNorm {
            gamma: init.constant("gamma", &[dim], 1.0),
            beta: init.constant("beta", &[dim], 0.0),
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm()
            .mul_bcast(p[self.gamma])
            .add_bcast(p[self.beta])
    }
}

/// Multi-head self-attention over `[G, L, C]`: every one of the `G`
/// sequences attends only within itself.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "{dim} channels do not split into {heads} heads"
        );
        init.scoped(name, |init| SelfAttention {
            qkv: Linear::new(init, "qkv", dim, 3 * dim, true),
            proj: Linear::new(init, "proj", dim, dim, true),
            heads,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        let (g, l, c) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = c / h;
        let qkv = self
            .qkv
            .forward(p, x)
            .reshape(&[g, l, 3, h, dh])
            .permute(&[2, 0, 3, 1, 4])
            .reshape(&[3, g * h, l, dh]);
        let pick = |i: usize| qkv.narrow(0, i, 1).reshape(&[g * h, l, dh]);
        let (q, k, v) = (pick(0), pick(1), pick(2));
        let attn = q.bmm(k, true).scale(1.0 / (dh as f64).sqrt()).softmax();
        let out = attn
            .bmm(v, false)
            .reshape(&[g, h, l, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[g, l, c]);
        self.proj.forward(p, out)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = dim * mlp_ratio.max(1);
        init.scoped(name, |init| TransformerBlock {
            norm1: LayerNorm::new(init, "norm1", dim),
            attn: SelfAttention::new(init, "attn", dim, heads),
            norm2: LayerNorm::new(init, "norm2", dim),
            fc1: Linear::new(init, "fc1", dim, hidden, true),
            fc2: Linear::new(init, "fc2", hidden, dim, true),
        })
    }

    /// `x` is `[G, L, C]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let h = x.add(self.attn.forward(p, self.norm1.forward(p, x)));
        let m = self
            .fc2
            .forward(p, self.fc1.forward(p, self.norm2.forward(p, h)).gelu());
        h.add(m)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
    ) -> Self {
        let fan_in = in_ch * kernel.iter().product::<usize>();
        init.scoped(name, |init| Conv3d {
            weight: init.kaiming(
                "weight",
                &[out_ch, in_ch, kernel[0], kernel[1], kernel[2]],
                fan_in,
            ),
            bias: init.constant("bias", &[out_ch], 0.0),
            spec,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv3d(p[self.weight], p[self.bias], self.spec)
    }
}

/// Cuts `[B, T, 2, H, W]` flow into `P x P` patches and embeds each one:
/// output `[B, T, H/P, W/P, C]`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub linear: Linear,
    pub patch: usize,
    pub in_ch: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, name: &str, in_ch: usize, patch: usize, dim: usize) -> Self {
        PatchEmbed {
            linear: Linear::new(init, name, in_ch * patch * patch, dim, true),
            patch,
            in_ch,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let k = self.patch;
        let (hp, wp) = (h / k, w / k);
        let patches = x
            .reshape(&[b * t, c, hp, k, wp, k])
            .permute(&[0, 2, 4, 1, 3, 5])
            .reshape(&[b, t, hp, wp, c * k * k]);
        self.linear.forward(p, patches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;

    #[test]
    fn init_is_reproducible_and_named() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut init = Init::new(&mut store, &mut rng, ParamGroup::Rest);
            init.scoped("enc", |i| TransformerBlock::new(i, "block0", 8, 2, 2));
            store
        };
        let a = build();
        assert_eq!(a, build());
        assert!(a.by_name("enc.block0.attn.qkv.weight").is_some());
        assert_eq!(
            a.by_name("enc.block0.fc1.weight").unwrap().shape(),
            &[8, 16]
        );
    }

    #[test]
    fn attention_rows_are_stochastic_and_shape_preserved() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Rest);
        let block = TransformerBlock::new(&mut init, "b", 8, 2, 2);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = g.constant(Tensor::full(&[3, 5, 8], 0.25));
        let y = block.forward(&p, x);
        assert_eq!(y.shape(), vec![3, 5, 8]);
        assert!(y.value().all_finite());
    }
}
