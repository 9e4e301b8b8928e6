use std::collections::BTreeMap;

use super::kernels::{self, GroupNormCache, LinearAttentionCache};
use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: GroupNormCache,
    },
    Silu(Var),
    Add(Var, Var),
    Scale(Var, f32),
    AddChannel {
        x: Var,
        bias: Var,
    },
    Modulate {
        f: Var,
        scale: Var,
        shift: Var,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        cache: LinearAttentionCache,
    },
    SoftmaxAttention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
    },
    L1Loss {
        pred: Var,
        target: Tensor,
    },
    L2Loss {
        pred: Var,
        target: Tensor,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so gradients can be pulled back through it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Trainable leaf identified by `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(name.to_string()), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        assert_eq!(self.value(x).c() % groups, 0, "channels must divide into groups");
        let (out, cache) = kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, cache }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let out = Tensor::from_vec(xv.shape(), data).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| v * s).collect()).unwrap();
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Adds a per-(item, channel) bias `[N, C, 1, 1]` over all positions.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        assert_eq!(self.value(bias).shape(), [n, c, 1, 1], "channel bias shape");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            for v in chunk {
                *v += b[i];
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddChannel { x, bias }, ng)
    }

    /// `f·(1 + scale) + shift`, all operands of equal shape.
    pub fn modulate(&mut self, f: Var, scale: Var, shift: Var) -> Var {
        let (fv, sv, tv) = (self.value(f), self.value(scale), self.value(shift));
        assert_eq!(fv.shape(), sv.shape(), "modulate scale shape");
        assert_eq!(fv.shape(), tv.shape(), "modulate shift shape");
        let data = fv
            .data()
            .iter()
            .zip(sv.data())
            .zip(tv.data())
            .map(|((&f, &s), &t)| f * (1.0 + s) + t)
            .collect();
        let out = Tensor::from_vec(fv.shape(), data).unwrap();
        let ng = self.ng(f) || self.ng(scale) || self.ng(shift);
        self.push(out, Op::Modulate { f, scale, shift }, ng)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [n, _, h, w] = self.value(parts[0]).shape();
        let c: usize = parts.iter().map(|&p| self.value(p).c()).sum();
        for &p in parts {
            let s = self.value(p).shape();
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch");
        }
        let mut out = Tensor::zeros([n, c, h, w]);
        for i in 0..n {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).item(i);
                out.item_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Channels `start..start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        assert!(start + len <= c, "narrow out of range");
        let mut out = Tensor::zeros([n, len, h, w]);
        for i in 0..n {
            let src = &self.value(x).item(i)[start * h * w..(start + len) * h * w];
            out.item_mut(i).copy_from_slice(src);
        }
        let ng = self.ng(x);
        self.push(out, Op::Narrow { x, start, len }, ng)
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let out = kernels::avg_pool(self.value(x), factor);
        let ng = self.ng(x);
        self.push(out, Op::AvgPool(x, factor), ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let out = kernels::upsample_nearest(self.value(x), factor);
        let ng = self.ng(x);
        self.push(out, Op::Upsample(x, factor), ng)
    }

    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.c(), kv.c(), "q/k channel mismatch");
        assert_eq!(kv.shape(), vv.shape(), "k/v shape mismatch");
        let (out, cache) = kernels::linear_attention_forward_cached(qv, kv, vv);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::LinearAttention { q, k, v, cache }, ng)
    }

    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (out, probs) = kernels::softmax_attention_forward_cached(self.value(q), self.value(k), self.value(v));
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::SoftmaxAttention { q, k, v, probs }, ng)
    }

    /// Mean absolute error against a constant target; a `[1,1,1,1]` scalar.
    pub fn l1_loss(&mut self, pred: Var, target: Tensor) -> Var {
        assert_eq!(self.value(pred).shape(), target.shape(), "loss shape mismatch");
        let n = target.numel() as f64;
        let s: f64 = self.value(pred).data().iter().zip(target.data()).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum();
        let ng = self.ng(pred);
        self.push(Tensor::filled([1, 1, 1, 1], (s / n) as f32), Op::L1Loss { pred, target }, ng)
    }

    pub fn l2_loss(&mut self, pred: Var, target: Tensor) -> Var {
        assert_eq!(self.value(pred).shape(), target.shape(), "loss shape mismatch");
        let n = target.numel() as f64;
        let s: f64 = self.value(pred).data().iter().zip(target.data()).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum();
        let ng = self.ng(pred);
        self.push(Tensor::filled([1, 1, 1, 1], (s / n) as f32), Op::L2Loss { pred, target }, ng)
    }

    /// `Σ x ⊙ weights`, a smooth scalar probe used for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), weights.shape(), "weighted_sum shape");
        let s: f64 = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let ng = self.ng(x);
        self.push(Tensor::filled([1, 1, 1, 1], s as f32), Op::WeightedSum { x, weights }, ng)
    }

    /// Exact-precision value of a scalar reduction node (loss / probe).
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::L1Loss { pred, target } => {
                let n = target.numel() as f64;
                self.value(*pred).data().iter().zip(target.data()).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum::<f64>() / n
            }
            Op::L2Loss { pred, target } => {
                let n = target.numel() as f64;
                self.value(*pred).data().iter().zip(target.data()).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum::<f64>() / n
            }
            Op::WeightedSum { x, weights } => self.value(*x).data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum(),
            _ => node.value.data()[0] as f64,
        }
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, g: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.ng(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *stride,
                        *pad,
                        self.ng(*x),
                        self.ng(*w),
                        b.is_some_and(|b| self.ng(b)),
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw, &mut grads);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        let shape = self.value(*b).shape();
                        acc(*b, Tensor::from_vec(shape, db.into_data()).unwrap(), &mut grads);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, cache } => {
                    let (dx, dg, db) = kernels::group_norm_backward(self.value(*x), self.value(*gamma), &dy, *groups, cache);
                    acc(*x, dx, &mut grads);
                    let gs = self.value(*gamma).shape();
                    acc(*gamma, Tensor::from_vec(gs, dg.into_data()).unwrap(), &mut grads);
                    let bs = self.value(*beta).shape();
                    acc(*beta, Tensor::from_vec(bs, db.into_data()).unwrap(), &mut grads);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &d)| {
                            let s = 1.0 / (1.0 + (-v).exp());
                            d * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    acc(*x, Tensor::from_vec(xv.shape(), data).unwrap(), &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone(), &mut grads);
                    acc(*b, dy, &mut grads);
                }
                Op::Scale(x, s) => {
                    let data = dy.data().iter().map(|d| d * s).collect();
                    acc(*x, Tensor::from_vec(dy.shape(), data).unwrap(), &mut grads);
                }
                Op::AddChannel { x, bias } => {
                    let [n, c, h, w] = dy.shape();
                    let mut db = Tensor::zeros([n, c, 1, 1]);
                    for (i, chunk) in dy.data().chunks(h * w).enumerate() {
                        db.data_mut()[i] = chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                    acc(*bias, db, &mut grads);
                    acc(*x, dy, &mut grads);
                }
                Op::Modulate { f, scale, shift } => {
                    let (fv, sv) = (self.value(*f), self.value(*scale));
                    if self.ng(*f) {
                        let d = dy.data().iter().zip(sv.data()).map(|(&g, &s)| g * (1.0 + s)).collect();
                        acc(*f, Tensor::from_vec(dy.shape(), d).unwrap(), &mut grads);
                    }
                    if self.ng(*scale) {
                        let d = dy.data().iter().zip(fv.data()).map(|(&g, &x)| g * x).collect();
                        acc(*scale, Tensor::from_vec(dy.shape(), d).unwrap(), &mut grads);
                    }
                    acc(*shift, dy, &mut grads);
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = dy.shape();
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).c();
                        if self.ng(p) {
                            let mut g = Tensor::zeros([n, c, h, w]);
                            for i in 0..n {
                                g.item_mut(i).copy_from_slice(&dy.item(i)[off..off + c * h * w]);
                            }
                            acc(p, g, &mut grads);
                        }
                        off += c * h * w;
                    }
                }
                Op::Narrow { x, start, len } => {
                    let shape = self.value(*x).shape();
                    let [n, _, h, w] = shape;
                    let mut g = Tensor::zeros(shape);
                    for i in 0..n {
                        g.item_mut(i)[start * h * w..(start + len) * h * w].copy_from_slice(dy.item(i));
                    }
                    acc(*x, g, &mut grads);
                }
                Op::AvgPool(x, f) => {
                    let g = kernels::avg_pool_backward(&dy, *f, self.value(*x).shape());
                    acc(*x, g, &mut grads);
                }
                Op::Upsample(x, f) => {
                    let g = kernels::upsample_nearest_backward(&dy, *f, self.value(*x).shape());
                    acc(*x, g, &mut grads);
                }
                Op::LinearAttention { q, k, v, cache } => {
                    let (dq, dk, dv) = kernels::linear_attention_backward(self.value(*q), self.value(*k), self.value(*v), &dy, cache);
                    acc(*q, dq, &mut grads);
                    acc(*k, dk, &mut grads);
                    acc(*v, dv, &mut grads);
                }
                Op::SoftmaxAttention { q, k, v, probs } => {
                    let (dq, dk, dv) = kernels::softmax_attention_backward(self.value(*q), self.value(*k), self.value(*v), &dy, probs);
                    acc(*q, dq, &mut grads);
                    acc(*k, dk, &mut grads);
                    acc(*v, dv, &mut grads);
                }
                Op::L1Loss { pred, target } => {
                    let g0 = dy.data()[0] / target.numel() as f32;
                    let d = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            let diff = p - t;
                            if diff > 0.0 {
                                g0
                            } else if diff < 0.0 {
                                -g0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(*pred, Tensor::from_vec(target.shape(), d).unwrap(), &mut grads);
                }
                Op::L2Loss { pred, target } => {
                    let g0 = 2.0 * dy.data()[0] / target.numel() as f32;
                    let d = self.value(*pred).data().iter().zip(target.data()).map(|(&p, &t)| g0 * (p - t)).collect();
                    acc(*pred, Tensor::from_vec(target.shape(), d).unwrap(), &mut grads);
                }
                Op::WeightedSum { x, weights } => {
                    let g0 = dy.data()[0];
                    let d = weights.data().iter().map(|w| w * g0).collect();
                    acc(*x, Tensor::from_vec(weights.shape(), d).unwrap(), &mut grads);
                }
            }
        }
        Gradients { grads, names: self.param_names() }
    }

    fn param_names(&self) -> Vec<(usize, String)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((i, name.clone())),
                _ => None,
            })
            .collect()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: Vec<(usize, String)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every named parameter, summed over repeated uses.
    /// Parameters that did not influence the root get zeros.
    pub fn params(mut self, shapes: impl Fn(&str) -> [usize; 4]) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, name) in std::mem::take(&mut self.names) {
            let g = self.grads[idx].take().unwrap_or_else(|| Tensor::zeros(shapes(&name)));
            match out.get_mut(&name) {
                Some(e) => e.add_assign(&g),
                None => {
                    out.insert(name, g);
                }
            }
        }
        out
    }
}
