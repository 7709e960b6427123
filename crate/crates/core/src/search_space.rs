//! Cell-based search space: the 10-operation vocabulary, cell/network
//! templates, relaxed (mixture) and discrete forward semantics, genotype
//! serialization, topology metrics, and rewiring transforms.
//!
//! A cell is a DAG over `n_in` input nodes and `n_mid` intermediate nodes.
//! Every intermediate node receives one candidate edge from each preceding
//! node; discretization keeps the best `m` of them. The single output node
//! concatenates all intermediate nodes along channels.

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;

/// The fixed operation vocabulary. Order matters: it is the canonical
/// enumeration index used for tie-breaking at discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    SkipConnect,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    SepConv5x5,
    SepConv7x7,
    DilConv3x3,
    DilConv5x5,
    Conv1x7Then7x1,
    Zero,
}

pub const ALL_OPS: [OpKind; 10] = [
    OpKind::SkipConnect,
    OpKind::MaxPool3x3,
    OpKind::AvgPool3x3,
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::SepConv7x7,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
    OpKind::Conv1x7Then7x1,
    OpKind::Zero,
];

impl OpKind {
    pub fn tag(self) -> &'static str {
        match self {
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::SepConv7x7 => "sep_conv_7x7",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::Conv1x7Then7x1 => "conv_1x7_7x1",
            OpKind::Zero => "zero",
        }
    }

    pub fn from_tag(tag: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|o| o.tag() == tag)
    }

    pub fn index(self) -> usize {
        ALL_OPS.iter().position(|&o| o == self).unwrap()
    }

    pub fn is_parameterized(self) -> bool {
        matches!(
            self,
            OpKind::SepConv3x3
                | OpKind::SepConv5x5
                | OpKind::SepConv7x7
                | OpKind::DilConv3x3
                | OpKind::DilConv5x5
                | OpKind::Conv1x7Then7x1
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Shape of one cell: node counts, edges kept per node after
/// discretization (`m`), and per-node channel count (`node_width`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTemplate {
    pub n_in: usize,
    pub n_mid: usize,
    pub n_out: usize,
    pub m: usize,
    pub node_width: usize,
}

impl Default for CellTemplate {
    fn default() -> Self {
        CellTemplate {
            n_in: 2,
            n_mid: 4,
            n_out: 1,
            m: 2,
            node_width: 8,
        }
    }
}

impl CellTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.n_in < 1 {
            return Err(Error::Config("n_in must be ≥ 1".into()));
        }
        if self.n_mid < 1 {
            return Err(Error::Config("n_mid must be ≥ 1".into()));
        }
        if self.n_out != 1 {
            return Err(Error::Config("n_out must be 1".into()));
        }
        if self.m < 1 || self.m > self.n_in + self.n_mid - 1 {
            return Err(Error::Config(format!(
                "m must be in [1, {}], got {}",
                self.n_in + self.n_mid - 1,
                self.m
            )));
        }
        if self.node_width < 1 {
            return Err(Error::Config("node_width must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Candidate edges in canonical order: intermediate nodes ascending, and
    /// for each, predecessor (absolute node index) ascending. Yields
    /// `(edge_index, mid_node, src)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n_in = self.n_in;
        (0..self.n_mid).flat_map(move |j| {
            (0..n_in + j).map(move |src| (0, j, src)) // edge index filled below
        })
        .enumerate()
        .map(|(e, (_, j, src))| (e, j, src))
    }

    pub fn n_edges(&self) -> usize {
        (0..self.n_mid).map(|j| self.n_in + j).sum()
    }

    /// How many edges discretization keeps for intermediate node `j`.
    pub fn kept_edges(&self, j: usize) -> usize {
        self.m.min(self.n_in + j)
    }
}

/// Architecture logits: one vector over [`ALL_OPS`] per candidate edge, one
/// set for the normal cell and one for the reduction cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub normal: Vec<Vec<f64>>,
    pub reduce: Vec<Vec<f64>>,
}

impl ArchParams {
    /// Zero logits — the uniform mixture.
    pub fn zeros(template: &CellTemplate) -> Self {
        let e = template.n_edges();
        ArchParams {
            normal: vec![vec![0.0; ALL_OPS.len()]; e],
            reduce: vec![vec![0.0; ALL_OPS.len()]; e],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.normal
            .iter()
            .chain(self.reduce.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn cell(&self, reduce: bool) -> &Vec<Vec<f64>> {
        if reduce {
            &self.reduce
        } else {
            &self.normal
        }
    }

    pub fn cell_mut(&mut self, reduce: bool) -> &mut Vec<Vec<f64>> {
        if reduce {
            &mut self.reduce
        } else {
            &mut self.normal
        }
    }

    /// Mean of the skip-connect logits across both cells (trace metric).
    pub fn skip_logit_mean(&self) -> f64 {
        let k = OpKind::SkipConnect.index();
        let vals: Vec<f64> = self
            .normal
            .iter()
            .chain(self.reduce.iter())
            .map(|v| v[k])
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// One discrete cell choice: per intermediate node, the retained
/// `(op, src)` pairs. `src` is an absolute node index (< n_in + node).
pub type NodeChoices = Vec<(OpKind, usize)>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<NodeChoices>,
    pub reduce: Vec<NodeChoices>,
}

impl Genotype {
    pub fn validate(&self, template: &CellTemplate) -> Result<()> {
        template.validate()?;
        for (name, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if cell.len() != template.n_mid {
                return Err(Error::Config(format!(
                    "{name} cell has {} nodes, template wants {}",
                    cell.len(),
                    template.n_mid
                )));
            }
            for (j, node) in cell.iter().enumerate() {
                let want = template.kept_edges(j);
                if node.len() != want {
                    return Err(Error::Config(format!(
                        "{name} node {j} has {} edges, template wants {want}",
                        node.len()
                    )));
                }
                let mut seen = std::collections::HashSet::new();
                for &(op, src) in node {
                    if op == OpKind::Zero {
                        return Err(Error::Config(format!(
                            "{name} node {j} contains the zero op"
                        )));
                    }
                    if src >= template.n_in + j {
                        return Err(Error::Config(format!(
                            "{name} node {j} edge from {src} is not a predecessor"
                        )));
                    }
                    if !seen.insert(src) {
                        return Err(Error::Config(format!(
                            "{name} node {j} has duplicate predecessor {src}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Text format: one record with both cells. Per intermediate node, its
    /// `(op, src)` pairs are grouped in brackets:
    /// `normal: [(skip_connect, 0), (sep_conv_3x3, 1)], [...] ; reduce: ...`
    pub fn to_text(&self) -> String {
        fn cell(nodes: &[NodeChoices]) -> String {
            nodes
                .iter()
                .map(|node| {
                    let pairs = node
                        .iter()
                        .map(|(op, src)| format!("({}, {})", op.tag(), src))
                        .collect::<Vec<_>>()
                        .join(", ");
                    format!("[{pairs}]")
                })
                .collect::<Vec<_>>()
                .join(", ")
        }
        format!("normal: {} ; reduce: {}", cell(&self.normal), cell(&self.reduce))
    }

    /// Parse the text format. Accepts per-node bracket groups (the emitted
    /// form) or a single flat bracket list, in which case pairs are chunked
    /// into nodes of `flat_m` (default 2). Unknown op tags are rejected.
    pub fn parse(text: &str) -> Result<Genotype> {
        Genotype::parse_with_m(text, 2)
    }

    pub fn parse_with_m(text: &str, flat_m: usize) -> Result<Genotype> {
        let text = text.trim();
        let (normal_part, reduce_part) = {
            let mut halves = text.splitn(2, ';');
            let a = halves
                .next()
                .ok_or_else(|| Error::GenotypeParse("missing normal record".into()))?;
            let b = halves
                .next()
                .ok_or_else(|| Error::GenotypeParse("missing ';' separator".into()))?;
            (a.trim(), b.trim())
        };
        let normal = parse_cell_record(normal_part, "normal", flat_m)?;
        let reduce = parse_cell_record(reduce_part, "reduce", flat_m)?;
        Ok(Genotype { normal, reduce })
    }

    pub fn skip_count_normal(&self) -> usize {
        self.normal
            .iter()
            .flatten()
            .filter(|(op, _)| *op == OpKind::SkipConnect)
            .count()
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn parse_cell_record(part: &str, label: &str, flat_m: usize) -> Result<Vec<NodeChoices>> {
    let rest = part
        .strip_prefix(label)
        .ok_or_else(|| Error::GenotypeParse(format!("expected `{label}:` prefix")))?
        .trim_start()
        .strip_prefix(':')
        .ok_or_else(|| Error::GenotypeParse(format!("expected `:` after `{label}`")))?
        .trim();

    // Tokenize bracket groups at depth 0 of '['..']'.
    let mut groups: Vec<Vec<(OpKind, usize)>> = Vec::new();
    let mut depth = 0usize;
    let mut start = None;
    for (i, ch) in rest.char_indices() {
        match ch {
            '[' => {
                if depth == 0 {
                    start = Some(i + 1);
                }
                depth += 1;
            }
            ']' => {
                if depth == 0 {
                    return Err(Error::GenotypeParse(format!("{label}: unbalanced ']'")));
                }
                depth -= 1;
                if depth == 0 {
                    let inner = &rest[start.unwrap()..i];
                    groups.push(parse_pairs(inner, label)?);
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::GenotypeParse(format!("{label}: unbalanced '['")));
    }
    if groups.is_empty() {
        return Err(Error::GenotypeParse(format!("{label}: no node groups")));
    }
    if groups.len() == 1 && groups[0].len() > flat_m {
        // Flat form: one bracket list covering every node; chunk by flat_m.
        let pairs = groups.pop().unwrap();
        if flat_m == 0 || pairs.len() % flat_m != 0 {
            return Err(Error::GenotypeParse(format!(
                "{label}: flat list of {} pairs not divisible into nodes of {flat_m}",
                pairs.len()
            )));
        }
        return Ok(pairs.chunks(flat_m).map(|c| c.to_vec()).collect());
    }
    Ok(groups)
}

fn parse_pairs(inner: &str, label: &str) -> Result<Vec<(OpKind, usize)>> {
    let mut pairs = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let open = rest
            .find('(')
            .ok_or_else(|| Error::GenotypeParse(format!("{label}: expected '('")))?;
        let close = rest[open..]
            .find(')')
            .map(|k| open + k)
            .ok_or_else(|| Error::GenotypeParse(format!("{label}: missing ')'")))?;
        let body = &rest[open + 1..close];
        let mut it = body.splitn(2, ',');
        let tag = it
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::GenotypeParse(format!("{label}: empty pair body")))?;
        let src_s = it
            .next()
            .map(str::trim)
            .ok_or_else(|| Error::GenotypeParse(format!("{label}: pair missing src")))?;
        let op = OpKind::from_tag(tag)
            .ok_or_else(|| Error::GenotypeParse(format!("unknown op tag `{tag}`")))?;
        let src: usize = src_s
            .parse()
            .map_err(|_| Error::GenotypeParse(format!("{label}: bad src `{src_s}`")))?;
        pairs.push((op, src));
        rest = rest[close + 1..].trim_start_matches([',', ' ']).trim();
    }
    if pairs.is_empty() {
        return Err(Error::GenotypeParse(format!("{label}: empty node group")));
    }
    Ok(pairs)
}

/// Stacked-network shape: how many cells, which are reduction cells, stem
/// channels, classes, and input dimensions (height, width, channels).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkTemplate {
    pub n_cells: usize,
    pub reduction_positions: Vec<usize>,
    pub stem_width: usize,
    pub num_classes: usize,
    pub input_dims: (usize, usize, usize),
}

impl NetworkTemplate {
    /// Reduction cells at the thirds of the stack (the standard placement).
    pub fn with_default_reductions(
        n_cells: usize,
        stem_width: usize,
        num_classes: usize,
        input_dims: (usize, usize, usize),
    ) -> Self {
        let mut reduction_positions = vec![n_cells / 3, 2 * n_cells / 3];
        reduction_positions.retain(|&p| p < n_cells);
        reduction_positions.dedup();
        NetworkTemplate {
            n_cells,
            reduction_positions,
            stem_width,
            num_classes,
            input_dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells < 1 {
            return Err(Error::Config("n_cells must be ≥ 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be ≥ 2".into()));
        }
        if self.stem_width < 1 {
            return Err(Error::Config("stem_width must be ≥ 1".into()));
        }
        for &p in &self.reduction_positions {
            if p >= self.n_cells {
                return Err(Error::Config(format!(
                    "reduction position {p} outside [0, {})",
                    self.n_cells
                )));
            }
        }
        let (h, w, c) = self.input_dims;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config("input_dims must be nonzero".into()));
        }
        Ok(())
    }

    pub fn is_reduction(&self, cell_idx: usize) -> bool {
        self.reduction_positions.contains(&cell_idx)
    }
}

/// Softmax mixture weights for one edge's logits.
pub fn mixture_weights(edge_logits: &[f64]) -> Vec<f64> {
    softmax(edge_logits)
}

/// Relaxed edge semantics: Σ_o softmax(logits)_o · o(x). The operation
/// implementations are supplied by the caller (`op_apply`), which lets the
/// trainable network, reference evaluators, and tests share one definition.
pub fn mixed_op_forward<F>(x: &Tensor, edge_logits: &[f64], mut op_apply: F) -> Result<Tensor>
where
    F: FnMut(OpKind, &Tensor) -> Tensor,
{
    if edge_logits.len() != ALL_OPS.len() {
        return Err(Error::Shape(format!(
            "edge logits: expected {} entries, got {}",
            ALL_OPS.len(),
            edge_logits.len()
        )));
    }
    if !edge_logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Shape("edge logits must be finite".into()));
    }
    let ws = mixture_weights(edge_logits);
    let mut out: Option<Tensor> = None;
    for (op, &w) in ALL_OPS.iter().zip(&ws) {
        let v = op_apply(*op, x);
        match &mut out {
            None => {
                let mut v = v;
                v.scale(w);
                out = Some(v);
            }
            Some(acc) => {
                if v.shape() != acc.shape() {
                    return Err(Error::Shape(format!(
                        "op {} produced {:?}, expected {:?}",
                        op,
                        v.shape(),
                        acc.shape()
                    )));
                }
                acc.add_scaled(&v, w);
            }
        }
    }
    Ok(out.unwrap())
}

/// Which parameters drive a cell evaluation: relaxed logits or a genotype.
pub enum CellArch<'a> {
    Mixed(&'a Vec<Vec<f64>>),
    Discrete(&'a Vec<NodeChoices>),
}

/// Reference (non-trainable) cell evaluation: node j = Σ over its incoming
/// edges of the edge operation applied to the source node; output node
/// concatenates all intermediate nodes along channels. `op_apply` receives
/// the canonical edge index (mixed) or `usize::MAX` (discrete edges are
/// identified by (node, src) and carry no mixture slot).
pub fn cell_forward<F>(
    inputs: &[Tensor],
    arch: CellArch<'_>,
    template: &CellTemplate,
    mut op_apply: F,
) -> Result<Tensor>
where
    F: FnMut(usize, OpKind, &Tensor) -> Tensor,
{
    template.validate()?;
    if inputs.len() != template.n_in {
        return Err(Error::Config(format!(
            "cell expects {} inputs, got {}",
            template.n_in,
            inputs.len()
        )));
    }
    let mut nodes: Vec<Tensor> = inputs.to_vec();
    match arch {
        CellArch::Mixed(logits) => {
            if logits.len() != template.n_edges() {
                return Err(Error::Config(format!(
                    "arch params have {} edges, template wants {}",
                    logits.len(),
                    template.n_edges()
                )));
            }
            let mut e = 0;
            for j in 0..template.n_mid {
                let mut acc: Option<Tensor> = None;
                for src in 0..template.n_in + j {
                    let contrib =
                        mixed_op_forward(&nodes[src], &logits[e], |op, x| op_apply(e, op, x))?;
                    match &mut acc {
                        None => acc = Some(contrib),
                        Some(a) => {
                            if contrib.shape() != a.shape() {
                                return Err(Error::Shape("node contribution shape".into()));
                            }
                            a.add_scaled(&contrib, 1.0);
                        }
                    }
                    e += 1;
                }
                nodes.push(acc.expect("n_in ≥ 1 guarantees at least one edge"));
            }
        }
        CellArch::Discrete(cells) => {
            if cells.len() != template.n_mid {
                return Err(Error::Config("genotype/template node count".into()));
            }
            for (j, choices) in cells.iter().enumerate() {
                let mut acc: Option<Tensor> = None;
                for &(op, src) in choices {
                    if src >= template.n_in + j {
                        return Err(Error::Config(format!(
                            "node {j} references non-predecessor {src}"
                        )));
                    }
                    let contrib = op_apply(usize::MAX, op, &nodes[src]);
                    match &mut acc {
                        None => acc = Some(contrib),
                        Some(a) => {
                            if contrib.shape() != a.shape() {
                                return Err(Error::Shape("node contribution shape".into()));
                            }
                            a.add_scaled(&contrib, 1.0);
                        }
                    }
                }
                nodes.push(acc.ok_or_else(|| Error::Config(format!("node {j} has no edges")))?);
            }
        }
    }
    // Output node: channel concat of the intermediate nodes.
    let mids = &nodes[template.n_in..];
    let (_, h, w) = mids[0].shape();
    let c_total: usize = mids.iter().map(|t| t.c).sum();
    let mut out = Tensor::zeros(c_total, h, w);
    let mut off = 0;
    for t in mids {
        if (t.h, t.w) != (h, w) {
            return Err(Error::Shape("intermediate node spatial shape".into()));
        }
        out.data[off..off + t.data.len()].copy_from_slice(&t.data);
        off += t.data.len();
    }
    Ok(out)
}

/// Discretize relaxed logits: per edge pick argmax over ops excluding zero
/// (ties → lowest op index); per node keep the `m` edges whose selected-op
/// logit is largest (ties → lowest source index).
pub fn discretize(params: &ArchParams, template: &CellTemplate) -> Result<Genotype> {
    template.validate()?;
    if !params.all_finite() {
        return Err(Error::Config("architecture logits must be finite".into()));
    }
    let pick = |cell: &Vec<Vec<f64>>| -> Result<Vec<NodeChoices>> {
        if cell.len() != template.n_edges() {
            return Err(Error::Config(format!(
                "arch params have {} edges, template wants {}",
                cell.len(),
                template.n_edges()
            )));
        }
        let mut out = Vec::with_capacity(template.n_mid);
        let mut e = 0;
        for j in 0..template.n_mid {
            // Candidate per edge: (best op excluding zero, its logit, src).
            let mut cands: Vec<(f64, usize, OpKind)> = Vec::new();
            for src in 0..template.n_in + j {
                let logits = &cell[e];
                let mut best: Option<(OpKind, f64)> = None;
                for (op, &l) in ALL_OPS.iter().zip(logits) {
                    if *op == OpKind::Zero {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((_, bl)) => l > bl,
                    };
                    if better {
                        best = Some((*op, l));
                    }
                }
                let (op, l) = best.unwrap();
                cands.push((l, src, op));
                e += 1;
            }
            // Keep the top kept_edges(j) by logit; stable on ties by src.
            let keep = template.kept_edges(j);
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| {
                cands[b].0.partial_cmp(&cands[a].0).unwrap().then(cands[a].1.cmp(&cands[b].1))
            });
            let mut chosen: Vec<usize> = order[..keep].to_vec();
            chosen.sort_unstable_by_key(|&i| cands[i].1);
            out.push(
                chosen
                    .into_iter()
                    .map(|i| (cands[i].2, cands[i].1))
                    .collect(),
            );
        }
        Ok(out)
    };
    let g = Genotype {
        normal: pick(&params.normal)?,
        reduce: pick(&params.reduce)?,
    };
    g.validate(template)?;
    Ok(g)
}

/// Structural measurements of a genotype's **normal** cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyMetrics {
    /// Connections on the longest input→output path.
    pub depth: usize,
    /// Count of intermediate nodes with ≥1 input-node predecessor; the cell
    /// width in channels is `width_factor × node_width`.
    pub width_factor: usize,
    /// skip_connect edges in the normal cell.
    pub skip_count: usize,
}

pub fn topology_metrics(genotype: &Genotype, template: &CellTemplate) -> TopologyMetrics {
    let cell = &genotype.normal;
    let n_in = template.n_in;

    // Longest path by DP over ascending node index; every node's sources
    // strictly precede it, and all intermediates feed the output node.
    let mut dist: Vec<usize> = vec![0; n_in + cell.len()];
    for (j, choices) in cell.iter().enumerate() {
        let node = n_in + j;
        dist[node] = choices.iter().map(|&(_, src)| dist[src] + 1).max().unwrap_or(0);
    }
    let depth = cell
        .iter()
        .enumerate()
        .map(|(j, _)| dist[n_in + j] + 1)
        .max()
        .unwrap_or(0);

    let width_factor = cell
        .iter()
        .filter(|choices| choices.iter().any(|&(_, src)| src < n_in))
        .count();

    TopologyMetrics {
        depth,
        width_factor,
        skip_count: genotype.skip_count_normal(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewireStrategy {
    /// Replace every skip_connect edge with sep_conv_3x3 (both cells).
    SubstituteSkips,
    /// Re-wire each intermediate node's predecessors to its nearest
    /// preceding nodes, maximizing chain length at the same edge count.
    Deepen,
}

pub fn rewire(genotype: &Genotype, strategy: RewireStrategy) -> Genotype {
    match strategy {
        RewireStrategy::SubstituteSkips => {
            let subst = |cell: &Vec<NodeChoices>| {
                cell.iter()
                    .map(|node| {
                        node.iter()
                            .map(|&(op, src)| {
                                if op == OpKind::SkipConnect {
                                    (OpKind::SepConv3x3, src)
                                } else {
                                    (op, src)
                                }
                            })
                            .collect()
                    })
                    .collect()
            };
            Genotype {
                normal: subst(&genotype.normal),
                reduce: subst(&genotype.reduce),
            }
        }
        RewireStrategy::Deepen => {
            // Node n_in+j keeps its ops but takes the nearest predecessors
            // (n_in+j−1, n_in+j−2, …); ops keep their original order.
            let deepen = |cell: &Vec<NodeChoices>, n_in: usize| {
                cell.iter()
                    .enumerate()
                    .map(|(j, node)| {
                        let abs = n_in + j;
                        node.iter()
                            .enumerate()
                            .map(|(k, &(op, _))| (op, abs - 1 - k))
                            .collect()
                    })
                    .collect()
            };
            // n_in is recoverable from the genotype only via a template; the
            // standard two-input convention is fixed here.
            Genotype {
                normal: deepen(&genotype.normal, 2),
                reduce: deepen(&genotype.reduce, 2),
            }
        }
    }
}

/// Uniform random valid genotype: per node, a uniform subset of predecessors
/// and a uniform non-zero op per chosen edge.
pub fn sample_genotype(template: &CellTemplate, rng: &mut crate::rng::Rng) -> Genotype {
    let non_zero: Vec<OpKind> = ALL_OPS
        .iter()
        .copied()
        .filter(|o| *o != OpKind::Zero)
        .collect();
    let cell = |rng: &mut crate::rng::Rng| -> Vec<NodeChoices> {
        (0..template.n_mid)
            .map(|j| {
                let avail = template.n_in + j;
                let keep = template.kept_edges(j);
                let mut srcs = rng.sample_indices(avail, keep);
                srcs.sort_unstable();
                srcs.into_iter()
                    .map(|src| (non_zero[rng.below(non_zero.len())], src))
                    .collect()
            })
            .collect()
    };
    Genotype {
        normal: cell(rng),
        reduce: cell(rng),
    }
}

/// The wide-shallow skip-heavy normal cell used as the built-in reference
/// architecture (depth 3, width 3·c, 3 skip connects), with a pool-heavy
/// reduction cell.
pub fn reference_darts_genotype() -> Genotype {
    use OpKind::*;
    Genotype {
        normal: vec![
            vec![(SkipConnect, 0), (SepConv3x3, 1)],
            vec![(SepConv3x3, 0), (SepConv3x3, 1)],
            vec![(SkipConnect, 0), (SepConv3x3, 1)],
            vec![(SkipConnect, 2), (DilConv3x3, 3)],
        ],
        reduce: vec![
            vec![(MaxPool3x3, 0), (MaxPool3x3, 1)],
            vec![(SkipConnect, 2), (MaxPool3x3, 0)],
            vec![(MaxPool3x3, 0), (SkipConnect, 2)],
            vec![(SkipConnect, 2), (AvgPool3x3, 0)],
        ],
    }
}
