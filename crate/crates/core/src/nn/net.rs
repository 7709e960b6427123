//! Trainable networks: the relaxed supernet, discretized cell networks, and
//! the three hand-designed reference CNNs used as the comparison class.
//!
//! Parameters are created lazily on the first forward pass (see
//! [`ParamSet::ensure`]), so initialization order equals forward order and a
//! single code path defines every architecture. All cell variants share the
//! edge-op implementations below; the supernet additionally records one
//! mixture slot per (edge, op) so a backward sweep yields architecture-logit
//! gradients alongside weight gradients.

use super::kernels::ConvCfg;
use super::params::{Grads, ParamSet};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::search_space::{
    mixture_weights, ArchParams, CellTemplate, Genotype, NetworkTemplate, OpKind, ALL_OPS,
};
use crate::tensor::{argmax, cross_entropy, softmax, Tensor};
use serde::{Deserialize, Serialize};

/// Hand-designed reference architectures (≤200k parameters at desk scale).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefArch {
    /// Plain feed-forward conv stack; pools at the thirds of the stack.
    Chain { width: usize, depth: usize },
    /// Two-conv residual blocks; stride-2 blocks at the thirds.
    Residual { width: usize, blocks: usize },
    /// Densely connected blocks with 1×1 + pool transitions.
    Dense {
        growth: usize,
        layers_per_block: usize,
        blocks: usize,
    },
}

impl RefArch {
    pub fn name(&self) -> &'static str {
        match self {
            RefArch::Chain { .. } => "chain_cnn",
            RefArch::Residual { .. } => "residual_cnn",
            RefArch::Dense { .. } => "dense_cnn",
        }
    }
}

/// What a [`Network`] computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelArch {
    /// Relaxed supernet over a cell template; mixture logits live in
    /// [`Network::alpha`].
    Supernet {
        cell: CellTemplate,
        net: NetworkTemplate,
    },
    /// Discrete cell network built from a genotype.
    CellNet {
        cell: CellTemplate,
        net: NetworkTemplate,
        genotype: Genotype,
    },
    Reference {
        arch: RefArch,
        input_dims: (usize, usize, usize),
        num_classes: usize,
    },
}

impl ModelArch {
    pub fn input_dims(&self) -> (usize, usize, usize) {
        match self {
            ModelArch::Supernet { net, .. } | ModelArch::CellNet { net, .. } => net.input_dims,
            ModelArch::Reference { input_dims, .. } => *input_dims,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelArch::Supernet { net, .. } | ModelArch::CellNet { net, .. } => net.num_classes,
            ModelArch::Reference { num_classes, .. } => *num_classes,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ModelArch::Supernet { .. } => "supernet".to_string(),
            ModelArch::CellNet { genotype, .. } => format!("cellnet[{}]", genotype.to_text()),
            ModelArch::Reference { arch, .. } => arch.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelArch::Supernet { cell, net } => {
                cell.validate()?;
                net.validate()
            }
            ModelArch::CellNet { cell, net, genotype } => {
                cell.validate()?;
                net.validate()?;
                genotype.validate(cell)
            }
            ModelArch::Reference { num_classes, .. } => {
                if *num_classes < 2 {
                    return Err(Error::Config("num_classes must be ≥ 2".into()));
                }
                Ok(())
            }
        }
    }
}

/// Mixture-slot bookkeeping for one supernet edge in one cell.
#[derive(Debug, Clone)]
pub struct SlotInfo {
    pub reduce: bool,
    pub edge: usize,
    pub slot0: usize,
    pub weights: Vec<f64>,
}

/// One forward pass: the tape plus the interesting node ids.
pub struct Forward {
    pub tape: Tape,
    pub input: NodeId,
    /// Global-average-pooled features (the penultimate layer).
    pub penult: NodeId,
    pub logits_node: NodeId,
    pub alpha_slots: Vec<SlotInfo>,
}

impl Forward {
    pub fn logits(&self) -> Vec<f64> {
        self.tape.value(self.logits_node).data.clone()
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ModelArch,
    pub params: ParamSet,
    /// Architecture logits; present iff `arch` is a supernet.
    pub alpha: Option<ArchParams>,
}

impl Network {
    pub fn new(arch: ModelArch, seed: u64) -> Result<Network> {
        arch.validate()?;
        let alpha = match &arch {
            ModelArch::Supernet { cell, .. } => Some(ArchParams::zeros(cell)),
            _ => None,
        };
        let mut net = Network {
            arch,
            params: ParamSet::new(),
            alpha,
        };
        // Init pass: a zero input grows the ParamSet in forward order.
        let (h, w, c) = net.arch.input_dims();
        let mut rng = Rng::seed_from_u64(seed);
        {
            let zero = Tensor::zeros(c, h, w);
            net.forward_init(&zero, &mut rng)?;
        }
        net.params.freeze();
        Ok(net)
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.arch.input_dims()
    }

    pub fn param_count(&self) -> usize {
        self.params.flat_len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Forward> {
        self.check_input(x)?;
        let b = Builder {
            params: Access::Frozen(&self.params),
            tape: Tape::new(),
            alpha_slots: Vec::new(),
        };
        self.drive(b, x)
    }

    fn forward_init(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Forward> {
        self.check_input(x)?;
        // The arch description is cloned so the growing ParamSet can be
        // borrowed mutably while the builder walks it; this runs once.
        let arch = self.arch.clone();
        let alpha = self.alpha.clone();
        let b = Builder {
            params: Access::Growing(&mut self.params, rng),
            tape: Tape::new(),
            alpha_slots: Vec::new(),
        };
        drive_arch(b, &arch, alpha.as_ref(), x)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w, c) = self.arch.input_dims();
        if x.shape() != (c, h, w) {
            return Err(Error::Shape(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                (c, h, w)
            )));
        }
        Ok(())
    }

    fn drive(&self, b: Builder<'_>, x: &Tensor) -> Result<Forward> {
        drive_arch(b, &self.arch, self.alpha.as_ref(), x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits())
    }

    pub fn probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Cross-entropy loss against `label`.
    pub fn loss(&self, x: &Tensor, label: usize) -> Result<f64> {
        Ok(cross_entropy(&self.logits(x)?, label).0)
    }

    /// Loss and parameter gradients for one example.
    pub fn loss_grads(&self, x: &Tensor, label: usize) -> Result<(f64, Grads)> {
        let fwd = self.forward(x)?;
        let (loss, dlogits) = cross_entropy(&fwd.logits(), label);
        let m = dlogits.len();
        let res = fwd.tape.backward_from(
            fwd.logits_node,
            Tensor::from_vec(m, 1, 1, dlogits),
            &self.params,
        );
        Ok((loss, res.params))
    }

    /// Loss, parameter gradients, and (for supernets) architecture-logit
    /// gradients, folding mixture-scalar gradients through the softmax
    /// Jacobian and summing across cells that share the logits.
    pub fn loss_grads_full(&self, x: &Tensor, label: usize) -> Result<(f64, Grads, Option<ArchParams>)> {
        let fwd = self.forward(x)?;
        let (loss, dlogits) = cross_entropy(&fwd.logits(), label);
        let m = dlogits.len();
        let res = fwd.tape.backward_from(
            fwd.logits_node,
            Tensor::from_vec(m, 1, 1, dlogits),
            &self.params,
        );
        let arch_grads = self.alpha.as_ref().map(|alpha| {
            let mut g = ArchParams {
                normal: vec![vec![0.0; ALL_OPS.len()]; alpha.normal.len()],
                reduce: vec![vec![0.0; ALL_OPS.len()]; alpha.reduce.len()],
            };
            for slot in &fwd.alpha_slots {
                let s = &res.scalars[slot.slot0..slot.slot0 + ALL_OPS.len()];
                let w = &slot.weights;
                let inner: f64 = w.iter().zip(s).map(|(wi, si)| wi * si).sum();
                let dst = &mut g.cell_mut(slot.reduce)[slot.edge];
                for k in 0..ALL_OPS.len() {
                    dst[k] += w[k] * (s[k] - inner);
                }
            }
            g
        });
        Ok((loss, res.params, arch_grads))
    }

    /// Cross-entropy against a full target distribution (soft labels), with
    /// parameter gradients. Used when fitting a surrogate to teacher output.
    pub fn soft_loss_grads(&self, x: &Tensor, target: &[f64]) -> Result<(f64, Grads)> {
        let fwd = self.forward(x)?;
        let logits = fwd.logits();
        if target.len() != logits.len() {
            return Err(Error::Shape("soft target length".into()));
        }
        let p = softmax(&logits);
        let loss = -target
            .iter()
            .zip(&p)
            .map(|(t, pi)| t * pi.max(1e-300).ln())
            .sum::<f64>();
        let dlogits: Vec<f64> = p.iter().zip(target).map(|(pi, t)| pi - t).collect();
        let m = dlogits.len();
        let res = fwd.tape.backward_from(
            fwd.logits_node,
            Tensor::from_vec(m, 1, 1, dlogits),
            &self.params,
        );
        Ok((loss, res.params))
    }

    /// Loss of class `c` at `x` and its input gradient (white-box surface).
    pub fn class_loss_input_grad(&self, x: &Tensor, c: usize) -> Result<(f64, Tensor)> {
        let fwd = self.forward(x)?;
        let (loss, dlogits) = cross_entropy(&fwd.logits(), c);
        let m = dlogits.len();
        let res = fwd.tape.backward_from(
            fwd.logits_node,
            Tensor::from_vec(m, 1, 1, dlogits),
            &self.params,
        );
        let gx = res
            .inputs
            .into_iter()
            .find(|(id, _)| *id == fwd.input)
            .map(|(_, g)| g)
            .unwrap_or_else(|| {
                let (h, w, ci) = self.arch.input_dims();
                Tensor::zeros(ci, h, w)
            });
        Ok((loss, gx))
    }

    /// Penultimate (global-average-pooled) feature vector.
    pub fn penultimate(&self, x: &Tensor) -> Result<Vec<f64>> {
        let fwd = self.forward(x)?;
        Ok(fwd.tape.value(fwd.penult).data.clone())
    }

    /// Gradient of Σ_i sel_i·penult_i(x) w.r.t. the input (trigger shaping).
    pub fn penultimate_selection_input_grad(&self, x: &Tensor, sel: &[f64]) -> Result<(f64, Tensor)> {
        let fwd = self.forward(x)?;
        let pv = fwd.tape.value(fwd.penult);
        if sel.len() != pv.data.len() {
            return Err(Error::Shape("selection length".into()));
        }
        let value: f64 = pv.data.iter().zip(sel).map(|(a, b)| a * b).sum();
        let seed = Tensor::from_vec(pv.c, pv.h, pv.w, sel.to_vec());
        let res = fwd.tape.backward_from(fwd.penult, seed, &self.params);
        let gx = res
            .inputs
            .into_iter()
            .find(|(id, _)| *id == fwd.input)
            .map(|(_, g)| g)
            .unwrap_or_else(|| {
                let (h, w, ci) = self.arch.input_dims();
                Tensor::zeros(ci, h, w)
            });
        Ok((value, gx))
    }

    /// The classifier head's weight rows (num_classes × penult_dim), used to
    /// pick backdoor target neurons.
    pub fn classifier_weights(&self) -> (&[f64], usize) {
        let w = self
            .params
            .idx("fc.w")
            .expect("every architecture ends in fc");
        let t = &self.params.tensors[w];
        (&t.data, t.shape[1])
    }
}

/// Cell parameter source during a forward build.
enum CellParams<'a> {
    Mixed(&'a ArchParams),
    Discrete(&'a Genotype),
}

fn drive_arch(
    mut b: Builder<'_>,
    arch: &ModelArch,
    alpha: Option<&ArchParams>,
    x: &Tensor,
) -> Result<Forward> {
    let input = b.tape.input(x.clone());
    let (penult, logits_node) = match arch {
        ModelArch::Supernet { cell, net } => {
            let alpha = alpha.expect("supernet has alpha");
            b.cell_stack(input, cell, net, CellParams::Mixed(alpha))?
        }
        ModelArch::CellNet { cell, net, genotype } => {
            b.cell_stack(input, cell, net, CellParams::Discrete(genotype))?
        }
        ModelArch::Reference {
            arch, num_classes, ..
        } => b.reference(input, arch, *num_classes)?,
    };
    Ok(Forward {
        tape: b.tape,
        input,
        penult,
        logits_node,
        alpha_slots: b.alpha_slots,
    })
}

/// Parameter access during a build: frozen replay or growing init pass.
enum Access<'a> {
    Frozen(&'a ParamSet),
    Growing(&'a mut ParamSet, &'a mut Rng),
}

impl Access<'_> {
    fn ps(&self) -> &ParamSet {
        match self {
            Access::Frozen(p) => p,
            Access::Growing(p, _) => p,
        }
    }
}

/// Walks an architecture, registering parameters on the init pass and
/// replaying them afterwards.
struct Builder<'a> {
    params: Access<'a>,
    tape: Tape,
    alpha_slots: Vec<SlotInfo>,
}

impl<'a> Builder<'a> {
    fn ensure(&mut self, name: String, shape: &[usize], filter: usize, fan_in: usize) -> usize {
        match &mut self.params {
            Access::Growing(p, r) => p.ensure(&name, shape, filter, fan_in, r),
            Access::Frozen(p) => p
                .idx(&name)
                .unwrap_or_else(|| panic!("parameter {name} missing on replay")),
        }
    }

    fn conv_full(
        &mut self,
        name: &str,
        x: NodeId,
        cin: usize,
        cout: usize,
        cfg: ConvCfg,
        bias: bool,
    ) -> NodeId {
        let fan = cin * cfg.kh * cfg.kw;
        let w = self.ensure(format!("{name}.w"), &[cout, cin, cfg.kh, cfg.kw], fan, fan);
        let b = bias.then(|| self.ensure(format!("{name}.b"), &[cout], cout, 0));
        self.tape.conv(x, self.params.ps(), w, b, cout, cfg)
    }

    fn dwconv(&mut self, name: &str, x: NodeId, c: usize, cfg: ConvCfg) -> NodeId {
        let fan = cfg.kh * cfg.kw;
        let w = self.ensure(format!("{name}.w"), &[c, cfg.kh, cfg.kw], fan, fan);
        self.tape.dwconv(x, self.params.ps(), w, cfg)
    }

    fn linear(&mut self, name: &str, x: NodeId, in_dim: usize, out_dim: usize) -> NodeId {
        let w = self.ensure(format!("{name}.w"), &[out_dim, in_dim], in_dim, in_dim);
        let b = self.ensure(format!("{name}.b"), &[out_dim], out_dim, 0);
        self.tape.linear(x, self.params.ps(), w, b)
    }

    /// Channel normalization; a 1×1 feature map has nothing to normalize
    /// over, so it passes through untouched.
    fn norm(&mut self, x: NodeId) -> NodeId {
        let (_, h, w) = self.tape.value(x).shape();
        if h * w <= 1 {
            x
        } else {
            self.tape.channel_norm(x)
        }
    }

    /// One edge operation at channel count `c` and stride `s`, named for
    /// parameter identity. Returns the op's output node.
    fn edge_op(
        &mut self,
        name: &str,
        op: OpKind,
        x: NodeId,
        relu_x: NodeId,
        c: usize,
        s: usize,
    ) -> NodeId {
        match op {
            OpKind::SkipConnect => {
                if s == 1 {
                    x
                } else {
                    // Strided identity: 1×1 average pool ≡ subsampling.
                    self.tape.avgpool(x, 1, s, 0)
                }
            }
            OpKind::MaxPool3x3 => {
                let p = self.tape.maxpool(x, 3, s, 1);
                self.norm(p)
            }
            OpKind::AvgPool3x3 => {
                let p = self.tape.avgpool(x, 3, s, 1);
                self.norm(p)
            }
            OpKind::SepConv3x3 => self.sep(name, relu_x, c, 3, s, 1),
            OpKind::SepConv5x5 => self.sep(name, relu_x, c, 5, s, 1),
            OpKind::SepConv7x7 => self.sep(name, relu_x, c, 7, s, 1),
            OpKind::DilConv3x3 => self.sep(name, relu_x, c, 3, s, 2),
            OpKind::DilConv5x5 => self.sep(name, relu_x, c, 5, s, 2),
            OpKind::Conv1x7Then7x1 => {
                let cfg1 = ConvCfg {
                    kh: 1,
                    kw: 7,
                    sh: 1,
                    sw: s,
                    ph: 0,
                    pw: 3,
                    dh: 1,
                    dw: 1,
                };
                let cfg2 = ConvCfg {
                    kh: 7,
                    kw: 1,
                    sh: s,
                    sw: 1,
                    ph: 3,
                    pw: 0,
                    dh: 1,
                    dw: 1,
                };
                let a = self.conv_full(&format!("{name}.a"), relu_x, c, c, cfg1, false);
                let b = self.conv_full(&format!("{name}.b"), a, c, c, cfg2, false);
                self.norm(b)
            }
            OpKind::Zero => {
                let (ci, h, w) = self.tape.value(x).shape();
                self.tape.zeros(ci, h.div_ceil(s), w.div_ceil(s))
            }
        }
    }

    /// Separable/dilated conv: relu → depthwise k×k (stride s, dilation d) →
    /// pointwise 1×1 → channel norm.
    fn sep(&mut self, name: &str, relu_x: NodeId, c: usize, k: usize, s: usize, d: usize) -> NodeId {
        let dwcfg = ConvCfg::square_dilated(k, s, d);
        let dw = self.dwconv(&format!("{name}.dw"), relu_x, c, dwcfg);
        let pw = self.conv_full(&format!("{name}.pw"), dw, c, c, ConvCfg::square(1, 1), false);
        self.norm(pw)
    }

    /// The stacked cell network shared by supernet and discrete nets.
    /// Returns (penultimate GAP node, logits node).
    fn cell_stack(
        &mut self,
        input: NodeId,
        cell: &CellTemplate,
        net: &NetworkTemplate,
        arch: CellParams<'_>,
    ) -> Result<(NodeId, NodeId)> {
        let (_, _, c_in) = net.input_dims;
        let mut c_cur = net.stem_width;
        // The stem keeps an explicit bias (the smoothness probes measure the
        // first-layer bias gradient); cell preprocessing normalizes right
        // after its own relu, so the stem output needs no norm of its own.
        let stem = self.conv_full("stem", input, c_in, c_cur, ConvCfg::square(3, 1), true);

        // (node, channels) for the two running states.
        let mut s0 = (stem, c_cur);
        let mut s1 = (stem, c_cur);

        for k in 0..net.n_cells {
            let reduce = net.is_reduction(k);
            if reduce {
                c_cur *= 2;
            }
            let c = c_cur;
            // Preprocess both states to `c` channels at s1's resolution
            // (stride 2 when a state is one reduction behind).
            let (h1, _w1) = {
                let v = self.tape.value(s1.0);
                (v.h, v.w)
            };
            let h0 = self.tape.value(s0.0).h;
            let stride0 = if h0 > h1 { 2 } else { 1 };
            let r0 = self.tape.relu(s0.0);
            let p0c = self.conv_full(
                &format!("c{k}.p0"),
                r0,
                s0.1,
                c,
                ConvCfg::square(1, stride0),
                false,
            );
            let p0 = self.norm(p0c);
            let r1 = self.tape.relu(s1.0);
            let p1c =
                self.conv_full(&format!("c{k}.p1"), r1, s1.1, c, ConvCfg::square(1, 1), false);
            let p1 = self.norm(p1c);

            let out = self.one_cell(k, p0, p1, c, reduce, cell, &arch)?;
            s0 = s1;
            s1 = (out, c * cell.n_mid);
        }

        // The classifier reads the rectified features: cell ops end in a
        // zero-mean normalization, whose global average would otherwise
        // vanish identically.
        let rect = self.tape.relu(s1.0);
        let gap = self.tape.global_avgpool(rect);
        let logits = self.linear("fc", gap, s1.1, net.num_classes);
        Ok((gap, logits))
    }

    fn one_cell(
        &mut self,
        cell_idx: usize,
        p0: NodeId,
        p1: NodeId,
        c: usize,
        reduce: bool,
        cell: &CellTemplate,
        arch: &CellParams<'_>,
    ) -> Result<NodeId> {
        if cell.n_in != 2 {
            return Err(Error::Config(
                "the stacked network wires exactly two cell inputs".into(),
            ));
        }
        let mut nodes: Vec<NodeId> = vec![p0, p1];
        // Cache relu(src) per source node: conv-family ops share it.
        let mut relus: Vec<Option<NodeId>> = vec![None; 2 + cell.n_mid];

        match arch {
            CellParams::Mixed(alpha) => {
                let logits_all = alpha.cell(reduce);
                if logits_all.len() != cell.n_edges() {
                    return Err(Error::Config("alpha/template edge count".into()));
                }
                let mut e = 0;
                for j in 0..cell.n_mid {
                    let mut contribs = Vec::new();
                    for src in 0..2 + j {
                        let s = if reduce && src < 2 { 2 } else { 1 };
                        let x = nodes[src];
                        let rx = match relus[src] {
                            Some(r) => r,
                            None => {
                                let r = self.tape.relu(x);
                                relus[src] = Some(r);
                                r
                            }
                        };
                        let weights = mixture_weights(&logits_all[e]);
                        let mut branch = Vec::with_capacity(ALL_OPS.len());
                        for op in ALL_OPS {
                            let name = format!("c{cell_idx}.e{e}.{}", op.tag());
                            branch.push(self.edge_op(&name, op, x, rx, c, s));
                        }
                        let (mix, slot0) = self.tape.weighted_sum(branch, weights.clone());
                        self.alpha_slots.push(SlotInfo {
                            reduce,
                            edge: e,
                            slot0,
                            weights,
                        });
                        contribs.push(mix);
                        e += 1;
                    }
                    nodes.push(self.tape.sum(contribs));
                }
            }
            CellParams::Discrete(genotype) => {
                let choices = if reduce { &genotype.reduce } else { &genotype.normal };
                if choices.len() != cell.n_mid {
                    return Err(Error::Config("genotype/template node count".into()));
                }
                for (j, node_choices) in choices.iter().enumerate() {
                    let mut contribs = Vec::new();
                    for (i, &(op, src)) in node_choices.iter().enumerate() {
                        if src >= 2 + j {
                            return Err(Error::Config(format!(
                                "node {j} references non-predecessor {src}"
                            )));
                        }
                        let s = if reduce && src < 2 { 2 } else { 1 };
                        let x = nodes[src];
                        let rx = match relus[src] {
                            Some(r) => r,
                            None => {
                                let r = self.tape.relu(x);
                                relus[src] = Some(r);
                                r
                            }
                        };
                        let name = format!("c{cell_idx}.n{j}.{i}.{}", op.tag());
                        contribs.push(self.edge_op(&name, op, x, rx, c, s));
                    }
                    nodes.push(self.tape.sum(contribs));
                }
            }
        }
        Ok(self.tape.concat_c(nodes[2..].to_vec()))
    }

    /// Reference CNNs. Returns (penultimate GAP node, logits node).
    fn reference(
        &mut self,
        input: NodeId,
        arch: &RefArch,
        num_classes: usize,
    ) -> Result<(NodeId, NodeId)> {
        let (c_in, h0, _) = {
            let v = self.tape.value(input);
            (v.c, v.h, v.w)
        };
        match arch {
            RefArch::Chain { width, depth } => {
                let (wd, d) = (*width, *depth);
                if d < 1 {
                    return Err(Error::Config("chain depth ≥ 1".into()));
                }
                // Biased, un-normalized first layer (the smoothness probes
                // read its bias gradient); later layers are conv→norm→relu.
                let mut x = self.conv_full("stem", input, c_in, wd, ConvCfg::square(3, 1), true);
                x = self.tape.relu(x);
                let pool_at: Vec<usize> = [d / 3, 2 * d / 3]
                    .into_iter()
                    .filter(|&p| p > 0 && p < d)
                    .collect();
                let mut h = h0;
                for l in 1..d {
                    x = self.conv_full(&format!("l{l}"), x, wd, wd, ConvCfg::square(3, 1), false);
                    x = self.norm(x);
                    x = self.tape.relu(x);
                    if pool_at.contains(&l) && h >= 4 {
                        x = self.tape.maxpool(x, 2, 2, 0);
                        h /= 2;
                    }
                }
                let gap = self.tape.global_avgpool(x);
                let logits = self.linear("fc", gap, wd, num_classes);
                Ok((gap, logits))
            }
            RefArch::Residual { width, blocks } => {
                let (wd, nb) = (*width, *blocks);
                let mut x = self.conv_full("stem", input, c_in, wd, ConvCfg::square(3, 1), true);
                x = self.tape.relu(x);
                let down_at: Vec<usize> = [nb / 3, 2 * nb / 3]
                    .into_iter()
                    .filter(|&p| p > 0 && p < nb)
                    .collect();
                let mut h = h0;
                for bi in 0..nb {
                    let s = if down_at.contains(&bi) && h >= 4 { 2 } else { 1 };
                    let c1 = self.conv_full(
                        &format!("b{bi}.c1"),
                        x,
                        wd,
                        wd,
                        ConvCfg::square(3, s),
                        false,
                    );
                    let n1 = self.norm(c1);
                    let r1 = self.tape.relu(n1);
                    let c2 =
                        self.conv_full(&format!("b{bi}.c2"), r1, wd, wd, ConvCfg::square(3, 1), false);
                    let n2 = self.norm(c2);
                    let short = if s == 1 {
                        x
                    } else {
                        let sc = self.conv_full(
                            &format!("b{bi}.sc"),
                            x,
                            wd,
                            wd,
                            ConvCfg::square(1, 2),
                            false,
                        );
                        self.norm(sc)
                    };
                    let sum = self.tape.sum(vec![n2, short]);
                    x = self.tape.relu(sum);
                    if s == 2 {
                        h = h.div_ceil(2);
                    }
                }
                let gap = self.tape.global_avgpool(x);
                let logits = self.linear("fc", gap, wd, num_classes);
                Ok((gap, logits))
            }
            RefArch::Dense {
                growth,
                layers_per_block,
                blocks,
            } => {
                let (g, lpb, nb) = (*growth, *layers_per_block, *blocks);
                let mut c = 2 * g;
                let mut x = self.conv_full("stem", input, c_in, c, ConvCfg::square(3, 1), false);
                let mut h = h0;
                for bi in 0..nb {
                    for li in 0..lpb {
                        // Pre-activation dense layer: norm → relu → conv.
                        let nx = self.norm(x);
                        let rx = self.tape.relu(nx);
                        let y = self.conv_full(
                            &format!("b{bi}.l{li}"),
                            rx,
                            c,
                            g,
                            ConvCfg::square(3, 1),
                            false,
                        );
                        x = self.tape.concat_c(vec![x, y]);
                        c += g;
                    }
                    if bi + 1 < nb {
                        let nx = self.norm(x);
                        let rx = self.tape.relu(nx);
                        let c_half = (c / 2).max(g);
                        x = self.conv_full(
                            &format!("t{bi}"),
                            rx,
                            c,
                            c_half,
                            ConvCfg::square(1, 1),
                            false,
                        );
                        c = c_half;
                        if h >= 4 {
                            x = self.tape.avgpool(x, 2, 2, 0);
                            h /= 2;
                        }
                    }
                }
                let nx = self.norm(x);
                let rx = self.tape.relu(nx);
                let gap = self.tape.global_avgpool(rx);
                let logits = self.linear("fc", gap, c, num_classes);
                Ok((gap, logits))
            }
        }
    }
}
