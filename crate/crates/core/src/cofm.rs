//! Collaborative fusion: token attention over the (motion, emotion) pair,
//! per-branch cross-attention enhancement, and sigmoid-gated convex fusion.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{MednError, Result};
use crate::nn::{Init, Linear};
use crate::params::Bound;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CofmConfig {
    pub heads: usize,
    /// Gate hidden width is `D / gate_hidden_ratio`.
    pub gate_hidden_ratio: usize,
    /// Adds the orthogonal feature back onto the enhanced one.
    pub residual: bool,
}

impl Default for CofmConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            gate_hidden_ratio: 4,
            residual: true,
        }
    }
}

/// Shared Q/K/V maps for the two-token collaboration step.
#[derive(Clone, Debug)]
pub struct Collaborate {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Collaborate {
    pub fn new(init: &mut Init<'_>, dim: usize) -> Self {
        init.scoped("collab", |init| Collaborate {
            q: Linear::new(init, "q", dim, dim, true),
            k: Linear::new(init, "k", dim, dim, true),
            v: Linear::new(init, "v", dim, dim, true),
        })
    }

    /// Returns `(col_motion, col_emotion, attention [B, 2, 2])`.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        motion: Var<'g>,
        emotion: Var<'g>,
    ) -> (Var<'g>, Var<'g>, Var<'g>) {
        let s = motion.shape();
        let (b, d) = (s[0], s[1]);
        let g = motion.graph();
        let mix = g.concat(
            &[motion.reshape(&[b, 1, d]), emotion.reshape(&[b, 1, d])],
            1,
        );
        let q = self.q.forward(p, mix);
        let k = self.k.forward(p, mix);
        let v = self.v.forward(p, mix);
        let attn = q.bmm(k, true).scale(1.0 / (d as f64).sqrt()).softmax();
        let col = attn.bmm(v, false);
        (
            col.narrow(1, 0, 1).reshape(&[b, d]),
            col.narrow(1, 1, 1).reshape(&[b, d]),
            attn,
        )
    }
}

/// Multi-head cross-attention with queries from the orthogonal feature and
/// a single key/value token from the collaborative feature.
#[derive(Clone, Debug)]
pub struct Enhance {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub residual: bool,
}

impl Enhance {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, residual: bool) -> Self {
        init.scoped(name, |init| Enhance {
            q: Linear::new(init, "q", dim, dim, true),
            k: Linear::new(init, "k", dim, dim, true),
            v: Linear::new(init, "v", dim, dim, true),
            out: Linear::new(init, "out", dim, dim, true),
            heads,
            residual,
        })
    }

    /// Returns the enhanced feature and the attention weights `[B·h, 1, 1]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, orig: Var<'g>, col: Var<'g>) -> (Var<'g>, Var<'g>) {
        let s = orig.shape();
        let (b, d) = (s[0], s[1]);
        let h = self.heads;
        let dh = d / h;
        let split = |x: Var<'g>| x.reshape(&[b * h, 1, dh]);
        let q = split(self.q.forward(p, orig));
        let k = split(self.k.forward(p, col));
        let v = split(self.v.forward(p, col));
        let attn = q.bmm(k, true).scale(1.0 / (dh as f64).sqrt()).softmax();
        let mixed = self.out.forward(p, attn.bmm(v, false).reshape(&[b, d]));
        let out = if self.residual {
            mixed.add(orig)
        } else {
            mixed
        };
        (out, attn)
    }
}

/// `sigmoid(W1 · GELU(W2 · x))`, one scalar per sample.
#[derive(Clone, Debug)]
pub struct Gate {
    pub hidden: Linear,
    pub out: Linear,
}

impl Gate {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        init.scoped(name, |init| Gate {
            hidden: Linear::new(init, "hidden", dim, hidden, true),
            out: Linear::new(init, "out", hidden, 1, true),
        })
    }

    /// `[B, D]` to `[B]` in `(0, 1)`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let b = x.shape()[0];
        self.out
            .forward(p, self.hidden.forward(p, x).gelu())
            .sigmoid()
            .reshape(&[b])
    }
}

#[derive(Clone, Copy)]
pub struct FusionOutput<'g> {
    pub col_motion: Var<'g>,
    pub col_emotion: Var<'g>,
    pub collab_attention: Var<'g>,
    pub prime_motion: Var<'g>,
    pub prime_emotion: Var<'g>,
    pub gate_motion: Var<'g>,
    pub gate_emotion: Var<'g>,
    pub w_motion: Var<'g>,
    pub w_emotion: Var<'g>,
    pub fusion: Var<'g>,
}

/// Normalizes the raw gates to `w_m = g_m / (g_m + g_e)`, `w_e = 1 - w_m`,
/// and mixes the features. Returns `(w_m, w_e, fusion)`.
pub fn gate_and_fuse<'g>(
    prime_motion: Var<'g>,
    prime_emotion: Var<'g>,
    gate_motion: Var<'g>,
    gate_emotion: Var<'g>,
) -> (Var<'g>, Var<'g>, Var<'g>) {
    let w_m = gate_motion.mul(gate_motion.add(gate_emotion).recip());
    let w_e = w_m.scale(-1.0).add_scalar(1.0);
    let fusion = prime_motion.mul_rows(w_m).add(prime_emotion.mul_rows(w_e));
    (w_m, w_e, fusion)
}

#[derive(Clone, Debug)]
pub struct Cofm {
    pub collab: Collaborate,
    pub enhance_motion: Enhance,
    pub enhance_emotion: Enhance,
    pub gate_motion: Gate,
    pub gate_emotion: Gate,
}

impl Cofm {
    pub fn new(init: &mut Init<'_>, cfg: &CofmConfig, dim: usize) -> Result<Self> {
        if cfg.heads == 0 || !dim.is_multiple_of(cfg.heads) {
            return Err(MednError::InvalidConfig(format!(
                "feature dim {dim} does not split into {} heads",
                cfg.heads
            )));
        }
        if cfg.gate_hidden_ratio == 0 || dim < cfg.gate_hidden_ratio {
            return Err(MednError::InvalidConfig(
                "gate hidden width would be zero".into(),
            ));
        }
        let hidden = dim / cfg.gate_hidden_ratio;
        Ok(Self {
            collab: Collaborate::new(init, dim),
            enhance_motion: Enhance::new(init, "enhance_motion", dim, cfg.heads, cfg.residual),
            enhance_emotion: Enhance::new(init, "enhance_emotion", dim, cfg.heads, cfg.residual),
            gate_motion: Gate::new(init, "gate_motion", dim, hidden),
            gate_emotion: Gate::new(init, "gate_emotion", dim, hidden),
        })
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        motion_perp: Var<'g>,
        emotion_perp: Var<'g>,
    ) -> FusionOutput<'g> {
        let (col_m, col_e, attn) = self.collab.forward(p, motion_perp, emotion_perp);
        let (prime_m, _) = self.enhance_motion.forward(p, motion_perp, col_m);
        let (prime_e, _) = self.enhance_emotion.forward(p, emotion_perp, col_e);
        let g_m = self.gate_motion.forward(p, prime_m);
        let g_e = self.gate_emotion.forward(p, prime_e);
        let (w_m, w_e, fusion) = gate_and_fuse(prime_m, prime_e, g_m, g_e);
        FusionOutput {
            col_motion: col_m,
            col_emotion: col_e,
            collab_attention: attn,
            prime_motion: prime_m,
            prime_emotion: prime_e,
            gate_motion: g_m,
            gate_emotion: g_e,
            w_motion: w_m,
            w_emotion: w_e,
            fusion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::{ParamGroup, ParamStore};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(dim: usize, seed: u64) -> (ParamStore, Cofm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Rest);
        let cofm = init
            .scoped("cofm", |i| Cofm::new(i, &CofmConfig::default(), dim))
            .unwrap();
        (store, cofm)
    }

    fn set_identity(store: &mut ParamStore, name: &str, dim: usize) {
        let w = store.by_name_mut(&format!("{name}.weight")).unwrap();
        *w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        *store.by_name_mut(&format!("{name}.bias")).unwrap() = Tensor::zeros(&[dim]);
    }

    #[test]
    fn shapes_and_row_stochastic_attention() {
        let (store, cofm) = build(8, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let out = cofm.forward(
            &p,
            g.constant(rand_tensor(&[4, 8], &mut rng)),
            g.constant(rand_tensor(&[4, 8], &mut rng)),
        );
        assert_eq!(out.col_motion.shape(), vec![4, 8]);
        assert_eq!(out.fusion.shape(), vec![4, 8]);
        for row in out.collab_attention.value().data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_projections_on_equal_inputs() {
        let d = 4;
        let (mut store, cofm) = build(d, 2);
        for n in ["q", "k", "v"] {
            set_identity(&mut store, &format!("cofm.collab.{n}"), d);
        }
        let x = Tensor::from_vec(&[1, d], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let (cm, ce, attn) = cofm
            .collab
            .forward(&p, g.constant(x.clone()), g.constant(x.clone()));
        assert!(attn.value().data().iter().all(|&a| (a - 0.5).abs() < 1e-15));
        assert!(cm.value().max_abs_diff(&x) < 1e-12);
        assert!(ce.value().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn enhance_single_token_and_residual_identity() {
        let d = 8;
        let (mut store, cofm) = build(d, 3);
        let w = store.by_name_mut("cofm.enhance_motion.out.weight").unwrap();
        *w = Tensor::zeros(w.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let orig = rand_tensor(&[3, d], &mut rng);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let (out, attn) = cofm.enhance_motion.forward(
            &p,
            g.constant(orig.clone()),
            g.constant(rand_tensor(&[3, d], &mut rng)),
        );
        assert!(attn.value().data().iter().all(|&a| a == 1.0));
        assert_eq!(*out.value(), orig);
    }

    #[test]
    fn gate_arithmetic() {
        let g = Graph::new();
        let pm = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let pe = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap());
        let (w_m, w_e, f) = gate_and_fuse(
            pm,
            pe,
            g.constant(Tensor::full(&[1], 0.9)),
            g.constant(Tensor::full(&[1], 0.1)),
        );
        assert!((w_m.value().item() - 0.9).abs() < 1e-12);
        assert!((w_e.value().item() - 0.1).abs() < 1e-12);
        assert!(
            (f.value().data()[0] - 0.9).abs() < 1e-12 && (f.value().data()[1] - 0.1).abs() < 1e-12
        );
        let (w_m, _, f) = gate_and_fuse(
            pm,
            pe,
            g.constant(Tensor::full(&[1], 0.3)),
            g.constant(Tensor::full(&[1], 0.3)),
        );
        assert_eq!(w_m.value().item(), 0.5);
        assert_eq!(f.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn swapping_branches_swaps_weights() {
        let d = 8;
        let (store, cofm) = build(d, 5);
        let mut swapped = store.clone();
        for (name, _, _) in store.iter() {
            let other = if name.contains("_motion") {
                name.replace("_motion", "_emotion")
            } else if name.contains("_emotion") {
                name.replace("_emotion", "_motion")
            } else {
                continue;
            };
            *swapped.by_name_mut(&other).unwrap() = store.by_name(name).unwrap().clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, e) = (
            rand_tensor(&[2, d], &mut rng),
            rand_tensor(&[2, d], &mut rng),
        );
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let q = swapped.bind_frozen(&g);
        let a = cofm.forward(&p, g.constant(m.clone()), g.constant(e.clone()));
        let b = cofm.forward(&q, g.constant(e), g.constant(m));
        assert!(a.w_motion.value().max_abs_diff(&b.w_emotion.value()) < 1e-12);
        assert!(a.fusion.value().max_abs_diff(&b.fusion.value()) < 1e-12);
    }

    #[test]
    fn gradient_reaches_both_inputs() {
        let d = 8;
        let (store, cofm) = build(d, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let m = g.variable(rand_tensor(&[2, d], &mut rng));
        let e = g.variable(rand_tensor(&[2, d], &mut rng));
        let loss = cofm.forward(&p, m, e).fusion.square().sum_all();
        let grads = g.backward(loss);
        let norm = |t: Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        assert!(norm(grads.get_or_zeros(m)) > 0.0);
        assert!(norm(grads.get_or_zeros(e)) > 0.0);
    }
}
