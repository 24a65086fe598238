//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar with respect to every node that requires one. All arithmetic is
//! `f64` and serial unless the graph was created with [`Graph::parallel`],
//! which only splits batched matrix products across threads (each output
//! block is still produced by exactly one thread, so results do not change).

use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use crate::tensor::{gemm, inverse_axes, numel, permute_raw, MatRef, Tensor};

/// Probability clamp shared by the fused classification losses.
pub const PROB_EPS: f64 = 1e-7;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    MulRows(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize),
    LayerNorm {
        x: usize,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    SumLast(usize),
    MeanMid {
        x: usize,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        b: usize,
        spec: Conv3dSpec,
    },
    Focal {
        logits: usize,
        targets: Vec<usize>,
        gamma: f64,
        probs: Vec<f64>,
    },
    Bce {
        logits: usize,
        targets: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddBcast(a, b)
            | MulBcast(a, b)
            | MulRows(a, b)
            | MulScalar(a, b)
            | MatMul(a, b) => vec![*a, *b],
            Bmm { a, b, .. } => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Reshape(a)
            | Permute(a, _)
            | Softmax(a)
            | Gelu(a)
            | Relu(a)
            | Sigmoid(a)
            | Log(a)
            | Sqrt(a)
            | Recip(a)
            | SumLast(a)
            | SumAll(a)
            | MeanAll(a) => vec![*a],
            LayerNorm { x, .. } | MeanMid { x, .. } | Narrow { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
            Conv3d { x, w, b, .. } => vec![*x, *w, *b],
            Focal { logits, .. } | Bce { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Create one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    parallel: bool,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that splits batched matmuls across the rayon pool.
    pub fn parallel() -> Self {
        Self {
            nodes: RefCell::default(),
            parallel: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Leaf that receives a gradient.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        let rank = values[0].shape().len();
        assert!(axis < rank);
        let mut out_shape = values[0].shape().to_vec();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), rank, "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(values[0].shape()).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch");
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_vec(&out_shape, data).expect("concat size");
        self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward from a non-scalar"
        );
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads, self.parallel);
            // only leaf gradients are kept; interior ones are dropped as we go
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn accum(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>], parallel: bool) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(grads, nodes, *a, g.clone());
            accum(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accum(grads, nodes, *a, g.clone());
            accum(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let d = zip_map(gd, vb.data(), |x, y| x * y);
                accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
            }
            if nodes[*b].requires_grad {
                let d = zip_map(gd, va.data(), |x, y| x * y);
                accum(grads, nodes, *b, Tensor::from_vec(vb.shape(), d).unwrap());
            }
        }
        Op::AddBcast(a, b) => {
            accum(grads, nodes, *a, g.clone());
            if nodes[*b].requires_grad {
                let vb = val(*b);
                let n = vb.numel();
                let mut d = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (acc, v) in d.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                accum(grads, nodes, *b, Tensor::from_vec(vb.shape(), d).unwrap());
            }
        }
        Op::MulBcast(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let n = vb.numel();
            if nodes[*a].requires_grad {
                let mut d = Vec::with_capacity(gd.len());
                for chunk in gd.chunks(n) {
                    d.extend(chunk.iter().zip(vb.data()).map(|(x, y)| x * y));
                }
                accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
            }
            if nodes[*b].requires_grad {
                let mut d = vec![0.0; n];
                for (gc, ac) in gd.chunks(n).zip(va.data().chunks(n)) {
                    for ((acc, x), y) in d.iter_mut().zip(gc).zip(ac) {
                        *acc += x * y;
                    }
                }
                accum(grads, nodes, *b, Tensor::from_vec(vb.shape(), d).unwrap());
            }
        }
        Op::MulRows(a, s) => {
            let (va, vs) = (val(*a), val(*s));
            let rows = vs.numel();
            let width = va.numel() / rows;
            if nodes[*a].requires_grad {
                let mut d = Vec::with_capacity(gd.len());
                for (gc, &sv) in gd.chunks(width).zip(vs.data()) {
                    d.extend(gc.iter().map(|x| x * sv));
                }
                accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
            }
            if nodes[*s].requires_grad {
                let d: Vec<f64> = gd
                    .chunks(width)
                    .zip(va.data().chunks(width))
                    .map(|(gc, ac)| gc.iter().zip(ac).map(|(x, y)| x * y).sum())
                    .collect();
                accum(grads, nodes, *s, Tensor::from_vec(vs.shape(), d).unwrap());
            }
        }
        Op::MulScalar(a, s) => {
            let (va, vs) = (val(*a), val(*s));
            let sv = vs.item();
            if nodes[*a].requires_grad {
                accum(grads, nodes, *a, g.map(|x| x * sv));
            }
            if nodes[*s].requires_grad {
                let d: f64 = gd.iter().zip(va.data()).map(|(x, y)| x * y).sum();
                accum(grads, nodes, *s, Tensor::full(vs.shape(), d));
            }
        }
        Op::Scale(a, c) => accum(grads, nodes, *a, g.map(|x| x * c)),
        Op::AddScalar(a) => accum(grads, nodes, *a, g.clone()),
        Op::MatMul(a, w) => {
            let (va, vw) = (val(*a), val(*w));
            let k = vw.shape()[0];
            let n = vw.shape()[1];
            let m = va.numel() / k;
            if nodes[*a].requires_grad {
                let mut d = vec![0.0; m * k];
                gemm(
                    MatRef::row_major(gd, m, n),
                    MatRef::row_major(vw.data(), k, n).t(),
                    &mut d,
                    0.0,
                );
                accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
            }
            if nodes[*w].requires_grad {
                let mut d = vec![0.0; k * n];
                gemm(
                    MatRef::row_major(va.data(), m, k).t(),
                    MatRef::row_major(gd, m, n),
                    &mut d,
                    0.0,
                );
                accum(grads, nodes, *w, Tensor::from_vec(vw.shape(), d).unwrap());
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (va, vb) = (val(*a), val(*b));
            let (groups, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let n = if *trans_b {
                vb.shape()[1]
            } else {
                vb.shape()[2]
            };
            let b_mat = |gi: usize| {
                let slice = &vb.data()[gi * k * n..(gi + 1) * k * n];
                if *trans_b {
                    MatRef::row_major(slice, n, k).t()
                } else {
                    MatRef::row_major(slice, k, n)
                }
            };
            let g_mat = |gi: usize| MatRef::row_major(&gd[gi * m * n..(gi + 1) * m * n], m, n);
            let a_mat =
                |gi: usize| MatRef::row_major(&va.data()[gi * m * k..(gi + 1) * m * k], m, k);
            if nodes[*a].requires_grad {
                let mut d = vec![0.0; groups * m * k];
                let body =
                    |(gi, chunk): (usize, &mut [f64])| gemm(g_mat(gi), b_mat(gi).t(), chunk, 0.0);
                if parallel {
                    d.par_chunks_mut(m * k).enumerate().for_each(body);
                } else {
                    d.chunks_mut(m * k).enumerate().for_each(body);
                }
                accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
            }
            if nodes[*b].requires_grad {
                let mut d = vec![0.0; groups * k * n];
                let body = |(gi, chunk): (usize, &mut [f64])| {
                    if *trans_b {
                        // stored as [n, k]: dB^T = dC^T A
                        gemm(g_mat(gi).t(), a_mat(gi), chunk, 0.0)
                    } else {
                        gemm(a_mat(gi).t(), g_mat(gi), chunk, 0.0)
                    }
                };
                if parallel {
                    d.par_chunks_mut(k * n).enumerate().for_each(body);
                } else {
                    d.chunks_mut(k * n).enumerate().for_each(body);
                }
                accum(grads, nodes, *b, Tensor::from_vec(vb.shape(), d).unwrap());
            }
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accum(grads, nodes, *a, g.clone().reshaped(&shape));
        }
        Op::Permute(a, axes) => {
            let (shape, d) = permute_raw(g.shape(), gd, &inverse_axes(axes));
            accum(grads, nodes, *a, Tensor::from_vec(&shape, d).unwrap());
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let mut d = Vec::with_capacity(gd.len());
            for (gc, yc) in gd.chunks(n).zip(out.data().chunks(n)) {
                let dot: f64 = gc.iter().zip(yc).map(|(x, y)| x * y).sum();
                d.extend(gc.iter().zip(yc).map(|(x, y)| y * (x - dot)));
            }
            accum(grads, nodes, *a, Tensor::from_vec(out.shape(), d).unwrap());
        }
        Op::LayerNorm { x, rstd } => {
            let n = *out.shape().last().unwrap();
            let nf = n as f64;
            let mut d = Vec::with_capacity(gd.len());
            for ((gc, xh), &r) in gd.chunks(n).zip(out.data().chunks(n)).zip(rstd) {
                let mean_g: f64 = gc.iter().sum::<f64>() / nf;
                let mean_gx: f64 = gc.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / nf;
                d.extend(
                    gc.iter()
                        .zip(xh)
                        .map(|(gv, xv)| r * (gv - mean_g - xv * mean_gx)),
                );
            }
            accum(grads, nodes, *x, Tensor::from_vec(out.shape(), d).unwrap());
        }
        Op::Gelu(a) => {
            let va = val(*a);
            let d = zip_map(gd, va.data(), |gv, x| gv * gelu_grad(x));
            accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
        }
        Op::Relu(a) => {
            let va = val(*a);
            let d = zip_map(gd, va.data(), |gv, x| if x > 0.0 { gv } else { 0.0 });
            accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
        }
        Op::Sigmoid(a) => {
            let d = zip_map(gd, out.data(), |gv, y| gv * y * (1.0 - y));
            accum(grads, nodes, *a, Tensor::from_vec(out.shape(), d).unwrap());
        }
        Op::Log(a) => {
            let va = val(*a);
            let d = zip_map(gd, va.data(), |gv, x| gv / x);
            accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
        }
        Op::Sqrt(a) => {
            // Zero at the origin keeps norms of zero vectors differentiable.
            let d = zip_map(
                gd,
                out.data(),
                |gv, y| if y > 0.0 { gv * 0.5 / y } else { 0.0 },
            );
            accum(grads, nodes, *a, Tensor::from_vec(out.shape(), d).unwrap());
        }
        Op::Recip(a) => {
            let d = zip_map(gd, out.data(), |gv, y| -gv * y * y);
            accum(grads, nodes, *a, Tensor::from_vec(out.shape(), d).unwrap());
        }
        Op::SumLast(a) => {
            let va = val(*a);
            let n = *va.shape().last().unwrap();
            let mut d = Vec::with_capacity(va.numel());
            for &gv in gd {
                d.extend(std::iter::repeat_n(gv, n));
            }
            accum(grads, nodes, *a, Tensor::from_vec(va.shape(), d).unwrap());
        }
        Op::MeanMid {
            x,
            outer,
            mid,
            inner,
        } => {
            let vx = val(*x);
            let scale = 1.0 / *mid as f64;
            let mut d = Vec::with_capacity(vx.numel());
            for o in 0..*outer {
                let row = &gd[o * inner..(o + 1) * inner];
                for _ in 0..*mid {
                    d.extend(row.iter().map(|v| v * scale));
                }
            }
            accum(grads, nodes, *x, Tensor::from_vec(vx.shape(), d).unwrap());
        }
        Op::SumAll(a) => {
            let va = val(*a);
            accum(grads, nodes, *a, Tensor::full(va.shape(), g.item()));
        }
        Op::MeanAll(a) => {
            let va = val(*a);
            accum(
                grads,
                nodes,
                *a,
                Tensor::full(va.shape(), g.item() / va.numel() as f64),
            );
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let mut parts_d: Vec<Vec<f64>> = parts
                .iter()
                .map(|&p| Vec::with_capacity(val(p).numel()))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (pi, &p) in parts.iter().enumerate() {
                    let chunk = val(p).shape()[*axis] * inner;
                    parts_d[pi].extend_from_slice(&gd[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            for (&p, d) in parts.iter().zip(parts_d) {
                let shape = val(p).shape().to_vec();
                accum(grads, nodes, p, Tensor::from_vec(&shape, d).unwrap());
            }
        }
        Op::Narrow { x, axis, start } => {
            let vx = val(*x);
            let outer: usize = vx.shape()[..*axis].iter().product();
            let inner: usize = vx.shape()[axis + 1..].iter().product();
            let full = vx.shape()[*axis] * inner;
            let len = out.shape()[*axis] * inner;
            let mut d = vec![0.0; vx.numel()];
            for o in 0..outer {
                let dst = o * full + start * inner;
                d[dst..dst + len].copy_from_slice(&gd[o * len..(o + 1) * len]);
            }
            accum(grads, nodes, *x, Tensor::from_vec(vx.shape(), d).unwrap());
        }
        Op::Conv3d { x, w, b, spec } => {
            conv3d_backward(nodes, grads, g, *x, *w, *b, spec);
        }
        Op::Focal {
            logits,
            targets,
            gamma,
            probs,
        } => {
            let vl = val(*logits);
            let c = vl.shape()[1];
            let batch = targets.len();
            let upstream = g.item() / batch as f64;
            let mut d = vec![0.0; vl.numel()];
            for (i, &t) in targets.iter().enumerate() {
                let p = &probs[i * c..(i + 1) * c];
                let pt = p[t];
                if pt < PROB_EPS {
                    continue; // clamped: flat
                }
                let q = 1.0 - pt;
                let log_pt = pt.ln();
                let term1 = if q > 0.0 && *gamma != 0.0 {
                    gamma * q.powf(gamma - 1.0) * log_pt
                } else {
                    0.0
                };
                let dl_dpt = term1 - q.powf(*gamma) / pt;
                for j in 0..c {
                    let dpt_dz = pt * (if j == t { 1.0 } else { 0.0 } - p[j]);
                    d[i * c + j] = upstream * dl_dpt * dpt_dz;
                }
            }
            accum(
                grads,
                nodes,
                *logits,
                Tensor::from_vec(vl.shape(), d).unwrap(),
            );
        }
        Op::Bce { logits, targets } => {
            let vl = val(*logits);
            let batch = vl.shape()[0];
            let upstream = g.item() / batch as f64;
            let d: Vec<f64> = vl
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &y)| {
                    let p = sigmoid(z);
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                        0.0
                    } else {
                        upstream * (p - y)
                    }
                })
                .collect();
            accum(
                grads,
                nodes,
                *logits,
                Tensor::from_vec(vl.shape(), d).unwrap(),
            );
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

struct ConvGeom {
    cin: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    spec: Conv3dSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }
    fn cols(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [t, h, w] = self.dims;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.out;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.spec.padding;
        let cols = self.cols();
        let mut row = 0;
        for c in 0..self.cin {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        for ti in 0..ot {
                            let it = (ti * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for hi in 0..oh {
                                let ih = (hi * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for wi in 0..ow {
                                    let iw = (wi * sw + dw) as isize - pw as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let col = (ti * oh + hi) * ow + wi;
                                    let src =
                                        ((c * t + it as usize) * h + ih as usize) * w + iw as usize;
                                    debug_assert!(col < cols);
                                    f(row, col, src);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut buf = vec![0.0; self.rows() * cols];
        self.for_each_tap(|r, c, s| buf[r * cols + c] = x[s]);
        buf
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, spec: Conv3dSpec) -> ConvGeom {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 5, "conv3d input must be [B, C, T, H, W]");
    assert_eq!(ws.len(), 5, "conv3d weight must be [O, C, kt, kh, kw]");
    assert_eq!(xs[1], ws[1], "conv3d channel mismatch");
    let dims = [xs[2], xs[3], xs[4]];
    let kernel = [ws[2], ws[3], ws[4]];
    let out = [0, 1, 2].map(|i| conv_out_len(dims[i], kernel[i], spec.stride[i], spec.padding[i]));
    ConvGeom {
        cin: xs[1],
        dims,
        kernel,
        out,
        spec,
    }
}

fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, spec: Conv3dSpec) -> Tensor {
    let geom = conv_geom(x, w, spec);
    let batch = x.shape()[0];
    let cout = w.shape()[0];
    let (rows, cols) = (geom.rows(), geom.cols());
    let in_per = x.numel() / batch;
    let mut out = vec![0.0; batch * cout * cols];
    for (bi, dst) in out.chunks_mut(cout * cols).enumerate() {
        let col = geom.im2col(&x.data()[bi * in_per..(bi + 1) * in_per]);
        for (o, row) in dst.chunks_mut(cols).enumerate() {
            row.fill(b.data()[o]);
        }
        gemm(
            MatRef::row_major(w.data(), cout, rows),
            MatRef::row_major(&col, rows, cols),
            dst,
            1.0,
        );
    }
    let [ot, oh, ow] = geom.out;
    Tensor::from_vec(&[batch, cout, ot, oh, ow], out).unwrap()
}

fn conv3d_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    x: usize,
    w: usize,
    b: usize,
    spec: &Conv3dSpec,
) {
    let (vx, vw, vb) = (&nodes[x].value, &nodes[w].value, &nodes[b].value);
    let geom = conv_geom(vx, vw, *spec);
    let batch = vx.shape()[0];
    let cout = vw.shape()[0];
    let (rows, cols) = (geom.rows(), geom.cols());
    let in_per = vx.numel() / batch;
    let mut dw = vec![0.0; vw.numel()];
    let mut db = vec![0.0; cout];
    let mut dx = vec![0.0; vx.numel()];
    for bi in 0..batch {
        let gb = &g.data()[bi * cout * cols..(bi + 1) * cout * cols];
        for (o, row) in gb.chunks(cols).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        if nodes[w].requires_grad {
            let col = geom.im2col(&vx.data()[bi * in_per..(bi + 1) * in_per]);
            gemm(
                MatRef::row_major(gb, cout, cols),
                MatRef::row_major(&col, rows, cols).t(),
                &mut dw,
                1.0,
            );
        }
        if nodes[x].requires_grad {
            let mut dcol = vec![0.0; rows * cols];
            gemm(
                MatRef::row_major(vw.data(), cout, rows).t(),
                MatRef::row_major(gb, cout, cols),
                &mut dcol,
                0.0,
            );
            let dxb = &mut dx[bi * in_per..(bi + 1) * in_per];
            geom.for_each_tap(|r, c, s| dxb[s] += dcol[r * cols + c]);
        }
    }
    accum(grads, nodes, w, Tensor::from_vec(vw.shape(), dw).unwrap());
    accum(grads, nodes, b, Tensor::from_vec(vb.shape(), db).unwrap());
    accum(grads, nodes, x, Tensor::from_vec(vx.shape(), dx).unwrap());
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let v = self.value().map(f);
        self.graph.push(v, op)
    }

    fn binary_same(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let d = zip_map(a.data(), b.data(), f);
        self.graph.push(Tensor::from_vec(a.shape(), d).unwrap(), op)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary_same(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary_same(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary_same(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    fn check_suffix(a: &Tensor, b: &Tensor) {
        let (sa, sb) = (a.shape(), b.shape());
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "cannot broadcast {:?} against {:?}",
            sb,
            sa
        );
    }

    /// `self + other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn add_bcast(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        Self::check_suffix(&a, &b);
        let n = b.numel();
        let mut d = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks(n) {
            d.extend(chunk.iter().zip(b.data()).map(|(x, y)| x + y));
        }
        self.graph.push(
            Tensor::from_vec(a.shape(), d).unwrap(),
            Op::AddBcast(self.id, other.id),
        )
    }

    /// `self * other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn mul_bcast(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        Self::check_suffix(&a, &b);
        let n = b.numel();
        let mut d = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks(n) {
            d.extend(chunk.iter().zip(b.data()).map(|(x, y)| x * y));
        }
        self.graph.push(
            Tensor::from_vec(a.shape(), d).unwrap(),
            Op::MulBcast(self.id, other.id),
        )
    }

    /// Scales row `i` of `self` (leading axis) by `scales[i]`.
    pub fn mul_rows(self, scales: Var<'g>) -> Var<'g> {
        let (a, s) = (self.value(), scales.value());
        let rows = s.numel();
        assert!(
            a.shape().first() == Some(&rows),
            "mul_rows: {:?} rows vs {} scales",
            a.shape(),
            rows
        );
        let width = a.numel() / rows;
        let mut d = Vec::with_capacity(a.numel());
        for (chunk, &sv) in a.data().chunks(width).zip(s.data()) {
            d.extend(chunk.iter().map(|x| x * sv));
        }
        self.graph.push(
            Tensor::from_vec(a.shape(), d).unwrap(),
            Op::MulRows(self.id, scales.id),
        )
    }

    /// Multiplies by a single-element variable.
    pub fn mul_scalar(self, s: Var<'g>) -> Var<'g> {
        let sv = s.value().item();
        self.unary(Op::MulScalar(self.id, s.id), |x| x * sv)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// `[..., K] · [K, N] -> [..., N]`.
    pub fn matmul(self, w: Var<'g>) -> Var<'g> {
        let (a, wv) = (self.value(), w.value());
        assert_eq!(wv.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(
            *a.shape().last().unwrap(),
            k,
            "matmul: {:?} x {:?}",
            a.shape(),
            wv.shape()
        );
        let m = a.numel() / k;
        let mut d = vec![0.0; m * n];
        gemm(
            MatRef::row_major(a.data(), m, k),
            MatRef::row_major(wv.data(), k, n),
            &mut d,
            0.0,
        );
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.graph.push(
            Tensor::from_vec(&shape, d).unwrap(),
            Op::MatMul(self.id, w.id),
        )
    }

    /// Batched product of `[G, M, K]` with `[G, K, N]` (or `[G, N, K]` when
    /// `trans_b`).
    pub fn bmm(self, b: Var<'g>, trans_b: bool) -> Var<'g> {
        let (av, bv) = (self.value(), b.value());
        assert_eq!(av.shape().len(), 3);
        assert_eq!(bv.shape().len(), 3);
        let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], groups, "bmm group mismatch");
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        assert_eq!(bk, k, "bmm inner mismatch");
        let mut d = vec![0.0; groups * m * n];
        let (a_data, b_data) = (av.data(), bv.data());
        let body = |(gi, chunk): (usize, &mut [f64])| {
            let a_mat = MatRef::row_major(&a_data[gi * m * k..(gi + 1) * m * k], m, k);
            let slice = &b_data[gi * k * n..(gi + 1) * k * n];
            let b_mat = if trans_b {
                MatRef::row_major(slice, n, k).t()
            } else {
                MatRef::row_major(slice, k, n)
            };
            gemm(a_mat, b_mat, chunk, 0.0);
        };
        if self.graph.parallel {
            d.par_chunks_mut(m * n).enumerate().for_each(body);
        } else {
            d.chunks_mut(m * n).enumerate().for_each(body);
        }
        self.graph.push(
            Tensor::from_vec(&[groups, m, n], d).unwrap(),
            Op::Bmm {
                a: self.id,
                b: b.id,
                trans_b,
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        assert_eq!(
            numel(shape),
            v.numel(),
            "reshape {:?} -> {:?}",
            v.shape(),
            shape
        );
        let t = (*v).clone().reshaped(shape);
        self.graph.push(t, Op::Reshape(self.id))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let t = self.value().permute(axes);
        self.graph.push(t, Op::Permute(self.id, axes.to_vec()))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let v = self.value();
        let n = *v.shape().last().unwrap();
        let mut d = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = d.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                d.push(e);
            }
            for e in &mut d[start..] {
                *e /= sum;
            }
        }
        self.graph.push(
            Tensor::from_vec(v.shape(), d).unwrap(),
            Op::Softmax(self.id),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self) -> Var<'g> {
        let v = self.value();
        let n = *v.shape().last().unwrap();
        let nf = n as f64;
        let mut d = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(v.numel() / n);
        for row in v.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            d.extend(row.iter().map(|x| (x - mean) * r));
        }
        self.graph.push(
            Tensor::from_vec(v.shape(), d).unwrap(),
            Op::LayerNorm { x: self.id, rstd },
        )
    }

    pub fn gelu(self) -> Var<'g> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn log(self) -> Var<'g> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn recip(self) -> Var<'g> {
        self.unary(Op::Recip(self.id), |x| 1.0 / x)
    }

    /// Sums the last axis away.
    pub fn sum_last(self) -> Var<'g> {
        let v = self.value();
        let n = *v.shape().last().unwrap();
        let d: Vec<f64> = v.data().chunks(n).map(|r| r.iter().sum()).collect();
        let shape = &v.shape()[..v.shape().len() - 1];
        self.graph
            .push(Tensor::from_vec(shape, d).unwrap(), Op::SumLast(self.id))
    }

    /// Averages axis `axis` away.
    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let v = self.value();
        let s = v.shape();
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut d = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut d[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let src = &v.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            for a in dst.iter_mut() {
                *a /= mid as f64;
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        self.graph.push(
            Tensor::from_vec(&shape, d).unwrap(),
            Op::MeanMid {
                x: self.id,
                outer,
                mid,
                inner,
            },
        )
    }

    pub fn sum_all(self) -> Var<'g> {
        let s: f64 = self.value().data().iter().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'g> {
        let v = self.value();
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.graph.push(Tensor::scalar(s), Op::MeanAll(self.id))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        let s = v.shape();
        assert!(start + len <= s[axis], "narrow out of range");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis] * inner;
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            d.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.graph.push(
            Tensor::from_vec(&shape, d).unwrap(),
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        )
    }

    pub fn conv3d(self, w: Var<'g>, b: Var<'g>, spec: Conv3dSpec) -> Var<'g> {
        let out = conv3d_forward(&self.value(), &w.value(), &b.value(), spec);
        self.graph.push(
            out,
            Op::Conv3d {
                x: self.id,
                w: w.id,
                b: b.id,
                spec,
            },
        )
    }

    /// Batch-mean focal loss of `[B, C]` logits against class targets.
    pub fn focal_loss(self, targets: &[usize], gamma: f64) -> Var<'g> {
        let v = self.value();
        assert_eq!(v.shape().len(), 2);
        let c = v.shape()[1];
        assert_eq!(v.shape()[0], targets.len(), "focal: batch mismatch");
        let probs = self.graph.constant((*v).clone()).softmax().value();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "target class {t} out of range");
            let pt = probs.data()[i * c + t];
            total += focal_term(pt, gamma);
        }
        let loss = total / targets.len() as f64;
        self.graph.push(
            Tensor::scalar(loss),
            Op::Focal {
                logits: self.id,
                targets: targets.to_vec(),
                gamma,
                probs: probs.data().to_vec(),
            },
        )
    }

    /// Multi-label sigmoid cross-entropy: batch mean of the per-sample sum.
    pub fn bce_with_logits(self, targets: &[f64]) -> Var<'g> {
        let v = self.value();
        assert_eq!(v.numel(), targets.len(), "bce: target size mismatch");
        let batch = v.shape()[0];
        let total: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce_term(sigmoid(z), y))
            .sum();
        self.graph.push(
            Tensor::scalar(total / batch as f64),
            Op::Bce {
                logits: self.id,
                targets: targets.to_vec(),
            },
        )
    }

    /// A constant copy of this value; gradients stop here.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}

/// `-(1 - p)^gamma * ln(p)` with `p` clamped to `[PROB_EPS, 1]`.
pub fn focal_term(p: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0);
    -(1.0 - p).powf(gamma) * p.ln()
}

/// Binary cross-entropy of one probability against a 0/1 target, with
/// `p` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}


#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..numel(shape))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, d).unwrap()
    }

    #[test]
    fn elementwise_and_reductions_match_finite_differences() {
        let x = rand_tensor(&[3, 4], 1);
        let w = rand_tensor(&[3, 4], 2);
        let err = max_rel_error(
            &x,
            |v| {
                let c = v.graph().constant(w.clone());
                v.mul(c)
                    .gelu()
                    .add(v.sigmoid())
                    .sub(v.scale(0.3))
                    .sum_last()
                    .mean_all()
            },
            1e-6,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn softmax_layernorm_gradients() {
        let x = rand_tensor(&[2, 3, 5], 3);
        let w = rand_tensor(&[2, 3, 5], 4);
        let err = max_rel_error(
            &x,
            |v| {
                let c = v.graph().constant(w.clone());
                v.layer_norm().softmax().mul(c).sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn bmm_gradients_both_layouts() {
        let a = rand_tensor(&[2, 3, 4], 7);
        let b = rand_tensor(&[2, 4, 5], 8);
        let bt = rand_tensor(&[2, 5, 4], 9);
        let err = max_rel_error(
            &a,
            |v| v.bmm(v.graph().constant(b.clone()), false).sum_all(),
            1e-6,
        );
        assert!(err < 1e-6);
        let err = max_rel_error(
            &b,
            |v| {
                v.graph()
                    .constant(a.clone())
                    .bmm(v, false)
                    .square()
                    .sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-6);
        let err = max_rel_error(
            &bt,
            |v| {
                v.graph()
                    .constant(a.clone())
                    .bmm(v, true)
                    .square()
                    .sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-6);
        let w = rand_tensor(&[4, 3], 10);
        let err = max_rel_error(
            &w,
            |v| v.graph().constant(a.clone()).matmul(v).square().sum_all(),
            1e-6,
        );
        assert!(err < 1e-6);
    }

    #[test]
    fn shape_op_gradients() {
        let x = rand_tensor(&[2, 3, 4], 11);
        let w = rand_tensor(&[4, 2, 5], 12);
        let err = max_rel_error(
            &x,
            |v| {
                let p = v.permute(&[2, 0, 1]).reshape(&[4, 2, 3]);
                let n = v.narrow(2, 1, 2).reshape(&[4, 3]);
                let c = v.graph().concat(&[p, p.scale(2.0)], 2); // [4,2,6]
                let c = c.narrow(2, 1, 5).mul(v.graph().constant(w.clone()));
                c.mean_axis(1)
                    .square()
                    .sum_all()
                    .add(n.mean_axis(0).square().sum_all())
            },
            1e-6,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn broadcast_gradients() {
        let x = rand_tensor(&[3, 4], 13);
        let s = rand_tensor(&[3], 14);
        let b = rand_tensor(&[4], 15);
        let err = max_rel_error(
            &b,
            |v| {
                let g = v.graph();
                g.constant(x.clone())
                    .mul_bcast(v)
                    .add_bcast(v)
                    .square()
                    .sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-6);
        let err = max_rel_error(
            &s,
            |v| v.graph().constant(x.clone()).mul_rows(v).square().sum_all(),
            1e-6,
        );
        assert!(err < 1e-6);
        let one = Tensor::from_vec(&[1], vec![0.7]).unwrap();
        let err = max_rel_error(
            &one,
            |v| {
                v.graph()
                    .constant(x.clone())
                    .mul_scalar(v)
                    .square()
                    .sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-6);
    }

    #[test]
    fn unary_math_gradients() {
        let x = rand_tensor(&[5], 16).map(|v| v.abs() + 0.5);
        let err = max_rel_error(
            &x,
            |v| {
                v.sqrt()
                    .add(v.log())
                    .add(v.recip())
                    .add(v.relu())
                    .add_scalar(3.0)
                    .square()
                    .sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn conv3d_gradients() {
        let x = rand_tensor(&[2, 2, 3, 5, 5], 17);
        let w = rand_tensor(&[3, 2, 1, 3, 3], 18);
        let b = rand_tensor(&[3], 19);
        let spec = Conv3dSpec {
            stride: [1, 2, 2],
            padding: [0, 1, 1],
        };
        let err = max_rel_error(
            &x,
            |v| {
                let g = v.graph();
                v.conv3d(g.constant(w.clone()), g.constant(b.clone()), spec)
                    .square()
                    .sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-5, "dx err {err}");
        let err = max_rel_error(
            &w,
            |v| {
                let g = v.graph();
                g.constant(x.clone())
                    .conv3d(v, g.constant(b.clone()), spec)
                    .square()
                    .sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-5, "dw err {err}");
        let err = max_rel_error(
            &b,
            |v| {
                let g = v.graph();
                g.constant(x.clone())
                    .conv3d(g.constant(w.clone()), v, spec)
                    .square()
                    .sum_all()
            },
            1e-6,
        );
        assert!(err < 1e-5, "db err {err}");
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let x = rand_tensor(&[1, 2, 3, 4, 4], 20);
        let w = rand_tensor(&[2, 2, 3, 3, 3], 21);
        let b = rand_tensor(&[2], 22);
        let spec = Conv3dSpec {
            stride: [1, 1, 1],
            padding: [1, 1, 1],
        };
        let g = Graph::new();
        let y = g
            .constant(x.clone())
            .conv3d(g.constant(w.clone()), g.constant(b.clone()), spec)
            .value();
        assert_eq!(y.shape(), &[1, 2, 3, 4, 4]);
        let xi = |c: usize, t: isize, h: isize, ww: isize| -> f64 {
            if t < 0 || h < 0 || ww < 0 || t >= 3 || h >= 4 || ww >= 4 {
                0.0
            } else {
                x.data()[((c * 3 + t as usize) * 4 + h as usize) * 4 + ww as usize]
            }
        };
        for o in 0..2 {
            for t in 0..3 {
                for h in 0..4 {
                    for ww in 0..4 {
                        let mut s = b.data()[o];
                        for c in 0..2 {
                            for dt in 0..3 {
                                for dh in 0..3 {
                                    for dw in 0..3 {
                                        let wi = (((o * 2 + c) * 3 + dt) * 3 + dh) * 3 + dw;
                                        s += w.data()[wi]
                                            * xi(
                                                c,
                                                t as isize + dt as isize - 1,
                                                h as isize + dh as isize - 1,
                                                ww as isize + dw as isize - 1,
                                            );
                                    }
                                }
                            }
                        }
                        let got = y.data()[((o * 3 + t) * 4 + h) * 4 + ww];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn fused_losses_match_finite_differences() {
        let z = rand_tensor(&[4, 3], 23).map(|v| 2.0 * v);
        let targets = [0usize, 2, 1, 2];
        for gamma in [0.0, 0.5, 2.0] {
            let err = max_rel_error(&z, |v| v.focal_loss(&targets, gamma), 1e-6);
            assert!(err < 1e-5, "gamma {gamma}: {err}");
        }
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let err = max_rel_error(&z, |v| v.bce_with_logits(&y), 1e-6);
        assert!(err < 1e-5, "bce {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.variable(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = x.mul(x.detach()).sum_all();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn parallel_graph_is_bitwise_identical() {
        let a = rand_tensor(&[6, 5, 7], 24);
        let b = rand_tensor(&[6, 4, 7], 25);
        let run = |g: &Graph| {
            let av = g.variable(a.clone());
            let y = av.bmm(g.constant(b.clone()), true).square().sum_all();
            let grads = g.backward(y);
            (y.value().item(), grads.get_or_zeros(av))
        };
        let (ys, gs) = run(&Graph::new());
        let (yp, gp) = run(&Graph::parallel());
        assert_eq!(ys.to_bits(), yp.to_bits());
        assert_eq!(gs, gp);
    }
}
