//! Eager tape-based reverse-mode differentiation over CHW tensors.
//!
//! Each builder method computes its value immediately (so shapes are always
//! concrete) and records what it needs for the backward sweep. Node ids are
//! construction-ordered, which makes reverse iteration a valid topological
//! order. `backward_from` seeds any node — the loss head lives outside the
//! tape (softmax/cross-entropy is closed-form), and attacks seed feature
//! nodes directly.

use super::kernels::*;
use super::params::{Grads, ParamSet};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Variance floor for channel normalization.
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Entry {
    Input,
    /// Constant zeros of the recorded shape; no gradient flows anywhere.
    Zeros,
    Relu {
        x: NodeId,
    },
    Conv {
        x: NodeId,
        w: usize,
        b: Option<usize>,
        cout: usize,
        cfg: ConvCfg,
    },
    DwConv {
        x: NodeId,
        w: usize,
        cfg: ConvCfg,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        k: usize,
        s: usize,
        p: usize,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: usize,
        b: usize,
    },
    /// Per-channel normalization over spatial positions (batch-free analogue
    /// of batch norm in training mode): y = (x − μ_c)/√(σ²_c + ε). `inv_std`
    /// caches the forward-pass 1/√(σ²_c + ε) for the backward sweep; `mean`
    /// and `var` hold the raw statistics for running-average readers.
    ChannelNorm {
        x: NodeId,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    /// Channel normalization against externally fixed statistics (batch norm
    /// in inference mode): an affine map per channel, so the backward pass
    /// sees constants where [`Entry::ChannelNorm`] sees data.
    ChannelNormFrozen {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    Sum {
        xs: Vec<NodeId>,
    },
    /// Σ wᵢ·xᵢ with externally supplied scalars (mixture weights). Backward
    /// also accumulates ∂L/∂wᵢ = ⟨dy, value(xᵢ)⟩ into scalar slots
    /// `slot0..slot0+n`, which the caller maps back to architecture logits.
    WeightedSum {
        xs: Vec<NodeId>,
        ws: Vec<f64>,
        slot0: usize,
    },
    ConcatC {
        xs: Vec<NodeId>,
    },
}

pub struct Tape {
    entries: Vec<Entry>,
    values: Vec<Tensor>,
    n_slots: usize,
}

/// Everything a backward sweep produces.
pub struct BackwardResult {
    pub params: Grads,
    /// Gradient w.r.t. each `input` node, keyed by node id.
    pub inputs: Vec<(NodeId, Tensor)>,
    /// Mixture-weight scalar gradients, indexed by slot.
    pub scalars: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
            values: Vec::new(),
            n_slots: 0,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    fn push(&mut self, e: Entry, v: Tensor) -> NodeId {
        self.entries.push(e);
        self.values.push(v);
        self.values.len() - 1
    }

    pub fn input(&mut self, x: Tensor) -> NodeId {
        self.push(Entry::Input, x)
    }

    pub fn zeros(&mut self, c: usize, h: usize, w: usize) -> NodeId {
        self.push(Entry::Zeros, Tensor::zeros(c, h, w))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x].map(|v| v.max(0.0));
        self.push(Entry::Relu { x }, v)
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        ps: &ParamSet,
        w: usize,
        b: Option<usize>,
        cout: usize,
        cfg: ConvCfg,
    ) -> NodeId {
        let v = conv2d(
            &self.values[x],
            &ps.tensors[w].data,
            b.map(|b| ps.tensors[b].data.as_slice()),
            cout,
            &cfg,
        );
        self.push(Entry::Conv { x, w, b, cout, cfg }, v)
    }

    pub fn dwconv(&mut self, x: NodeId, ps: &ParamSet, w: usize, cfg: ConvCfg) -> NodeId {
        let v = dwconv2d(&self.values[x], &ps.tensors[w].data, &cfg);
        self.push(Entry::DwConv { x, w, cfg }, v)
    }

    pub fn maxpool(&mut self, x: NodeId, k: usize, s: usize, p: usize) -> NodeId {
        let (v, argmax) = maxpool2d(&self.values[x], k, s, p);
        self.push(Entry::MaxPool { x, argmax }, v)
    }

    pub fn avgpool(&mut self, x: NodeId, k: usize, s: usize, p: usize) -> NodeId {
        let v = avgpool2d(&self.values[x], k, s, p);
        self.push(Entry::AvgPool { x, k, s, p }, v)
    }

    pub fn global_avgpool(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.values[x].shape();
        let mut v = Tensor::zeros(c, 1, 1);
        for ci in 0..c {
            let mut acc = 0.0;
            for i in 0..h * w {
                acc += self.values[x].data[ci * h * w + i];
            }
            v.data[ci] = acc / (h * w) as f64;
        }
        self.push(Entry::GlobalAvgPool { x }, v)
    }

    pub fn linear(&mut self, x: NodeId, ps: &ParamSet, w: usize, b: usize) -> NodeId {
        let out_dim = ps.tensors[b].data.len();
        let y = linear(
            &self.values[x].data,
            &ps.tensors[w].data,
            &ps.tensors[b].data,
            out_dim,
        );
        let v = Tensor::from_vec(out_dim, 1, 1, y);
        self.push(Entry::Linear { x, w, b }, v)
    }

    pub fn channel_norm(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.values[x].shape();
        let n = h * w;
        let mut v = Tensor::zeros(c, h, w);
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let xs = &self.values[x].data[ci * n..(ci + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ci] = is;
            for (o, &a) in v.data[ci * n..(ci + 1) * n].iter_mut().zip(xs) {
                *o = (a - mean) * is;
            }
        }
        self.push(Entry::ChannelNorm { x, inv_std }, v)
    }

    pub fn sum(&mut self, xs: Vec<NodeId>) -> NodeId {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut v = self.values[xs[0]].clone();
        for &x in &xs[1..] {
            v.add_scaled(&self.values[x], 1.0);
        }
        self.push(Entry::Sum { xs }, v)
    }

    pub fn weighted_sum(&mut self, xs: Vec<NodeId>, ws: Vec<f64>) -> (NodeId, usize) {
        assert_eq!(xs.len(), ws.len());
        assert!(!xs.is_empty(), "weighted sum of nothing");
        let slot0 = self.n_slots;
        self.n_slots += xs.len();
        let (c, h, w) = self.values[xs[0]].shape();
        let mut v = Tensor::zeros(c, h, w);
        for (&x, &wi) in xs.iter().zip(&ws) {
            assert_eq!(self.values[x].shape(), (c, h, w), "weighted sum shape");
            v.add_scaled(&self.values[x], wi);
        }
        let id = self.push(Entry::WeightedSum { xs, ws, slot0 }, v);
        (id, slot0)
    }

    pub fn concat_c(&mut self, xs: Vec<NodeId>) -> NodeId {
        assert!(!xs.is_empty(), "concat of nothing");
        let (_, h, w) = self.values[xs[0]].shape();
        let c_total: usize = xs.iter().map(|&x| self.values[x].c).sum();
        let mut v = Tensor::zeros(c_total, h, w);
        let mut off = 0;
        for &x in &xs {
            let t = &self.values[x];
            assert_eq!((t.h, t.w), (h, w), "concat spatial shape");
            v.data[off..off + t.data.len()].copy_from_slice(&t.data);
            off += t.data.len();
        }
        self.push(Entry::ConcatC { xs }, v)
    }

    /// Reverse sweep from `from`, seeded with `seed` (same shape as the
    /// node's value). Returns parameter, input, and mixture-scalar gradients.
    pub fn backward_from(&self, from: NodeId, seed: Tensor, ps: &ParamSet) -> BackwardResult {
        assert_eq!(
            seed.shape(),
            self.values[from].shape(),
            "backward seed shape"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[from] = Some(seed);
        let mut out = BackwardResult {
            params: ps.zero_grads(),
            inputs: Vec::new(),
            scalars: vec![0.0; self.n_slots],
        };

        for id in (0..=from).rev() {
            let dy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.entries[id] {
                Entry::Input => out.inputs.push((id, dy)),
                Entry::Zeros => {}
                Entry::Relu { x } => {
                    let xv = &self.values[*x];
                    let mut dx = dy;
                    for (g, &v) in dx.data.iter_mut().zip(&xv.data) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Entry::Conv { x, w, b, cout, cfg } => {
                    let (dx, dw, db) =
                        conv2d_bwd(&self.values[*x], &ps.tensors[*w].data, &dy, *cout, cfg);
                    add_param(&mut out.params, *w, &dw);
                    if let Some(b) = b {
                        add_param(&mut out.params, *b, &db);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Entry::DwConv { x, w, cfg } => {
                    let (dx, dw) = dwconv2d_bwd(&self.values[*x], &ps.tensors[*w].data, &dy, cfg);
                    add_param(&mut out.params, *w, &dw);
                    accumulate(&mut grads, *x, dx);
                }
                Entry::MaxPool { x, argmax } => {
                    let dx = maxpool2d_bwd(argmax, &dy, self.values[*x].shape());
                    accumulate(&mut grads, *x, dx);
                }
                Entry::AvgPool { x, k, s, p } => {
                    let dx = avgpool2d_bwd(self.values[*x].shape(), *k, *s, *p, &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Entry::GlobalAvgPool { x } => {
                    let (c, h, w) = self.values[*x].shape();
                    let mut dx = Tensor::zeros(c, h, w);
                    let inv = 1.0 / (h * w) as f64;
                    for ci in 0..c {
                        let g = dy.data[ci] * inv;
                        for i in 0..h * w {
                            dx.data[ci * h * w + i] += g;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Entry::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        linear_bwd(&self.values[*x].data, &ps.tensors[*w].data, &dy.data);
                    add_param(&mut out.params, *w, &dw);
                    add_param(&mut out.params, *b, &db);
                    let (c, h, wd) = self.values[*x].shape();
                    accumulate(&mut grads, *x, Tensor::from_vec(c, h, wd, dx));
                }
                Entry::ChannelNorm { x, inv_std } => {
                    // With y = (x − μ)/s: dx = (dy − mean(dy) − y·mean(dy⊙y))/s,
                    // channel by channel (the mean and y⊙y terms are the
                    // centering and variance paths of the normalizer).
                    let y = &self.values[id];
                    let (c, h, w) = y.shape();
                    let n = h * w;
                    let mut dx = Tensor::zeros(c, h, w);
                    for ci in 0..c {
                        let ys = &y.data[ci * n..(ci + 1) * n];
                        let gs = &dy.data[ci * n..(ci + 1) * n];
                        let g_mean = gs.iter().sum::<f64>() / n as f64;
                        let gy_mean =
                            gs.iter().zip(ys).map(|(g, yv)| g * yv).sum::<f64>() / n as f64;
                        let is = inv_std[ci];
                        for ((o, &g), &yv) in dx.data[ci * n..(ci + 1) * n]
                            .iter_mut()
                            .zip(gs)
                            .zip(ys)
                        {
                            *o = is * (g - g_mean - yv * gy_mean);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Entry::Sum { xs } => {
                    for &x in xs {
                        accumulate(&mut grads, x, dy.clone());
                    }
                }
                Entry::WeightedSum { xs, ws, slot0 } => {
                    for (i, (&x, &wi)) in xs.iter().zip(ws).enumerate() {
                        // Scalar grad: ⟨dy, branch value⟩.
                        let dot: f64 = dy
                            .data
                            .iter()
                            .zip(&self.values[x].data)
                            .map(|(a, b)| a * b)
                            .sum();
                        out.scalars[slot0 + i] += dot;
                        if wi != 0.0 {
                            let mut dx = dy.clone();
                            dx.scale(wi);
                            accumulate(&mut grads, x, dx);
                        }
                    }
                }
                Entry::ConcatC { xs } => {
                    let (_, h, w) = dy.shape();
                    let mut off = 0;
                    for &x in xs {
                        let c = self.values[x].c;
                        let mut dx = Tensor::zeros(c, h, w);
                        dx.data.copy_from_slice(&dy.data[off..off + c * h * w]);
                        off += c * h * w;
                        accumulate(&mut grads, x, dx);
                    }
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

fn add_param(params: &mut Grads, idx: usize, g: &[f64]) {
    let acc = &mut params.by_param[idx];
    assert_eq!(acc.len(), g.len(), "param grad shape");
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
