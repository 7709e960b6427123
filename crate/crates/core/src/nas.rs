//! Differentiable architecture search: first-order bi-level optimization
//! over a supernet, skip-logit suppression, the search-variant pipeline,
//! and a random-search baseline.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Grads, Network};
use crate::rng::Rng;
use crate::search_space::{
    discretize, rewire, sample_genotype, ArchParams, CellTemplate, Genotype, NetworkTemplate,
    OpKind, RewireStrategy, ALL_OPS,
};
use crate::trainer::{evaluate_accuracy, train_model, TrainConfig};
use crate::ModelArch;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Logit assigned to operations outside `allowed_ops`; low enough that the
/// softmax weight vanishes and discretization never selects them.
const MASKED_LOGIT: f64 = -30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Inner (weight) learning rate.
    pub w_lr: f64,
    /// Outer (architecture-logit) learning rate.
    pub arch_lr: f64,
    /// Inner training steps per architecture update (≥ 1).
    pub n_step: usize,
    /// Coefficient in (0, 1] multiplied onto skip logits each iteration.
    pub skip_gamma: f64,
    pub seed: u64,
    /// Fraction of the data held out for the outer objective.
    pub val_split: f64,
    /// Restrict the per-edge vocabulary; `None` keeps every operation.
    pub allowed_ops: Option<Vec<OpKind>>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 8,
            batch_size: 16,
            w_lr: 0.025,
            arch_lr: 3e-4,
            n_step: 1,
            skip_gamma: 1.0,
            seed: 0,
            val_split: 0.5,
            allowed_ops: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if self.n_step == 0 {
            return Err(Error::Config("n_step must be ≥ 1".into()));
        }
        if !(self.skip_gamma > 0.0 && self.skip_gamma <= 1.0) {
            return Err(Error::Config(format!(
                "skip_gamma must lie in (0, 1], got {}",
                self.skip_gamma
            )));
        }
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return Err(Error::Config(format!(
                "val_split must lie in (0, 1), got {}",
                self.val_split
            )));
        }
        if !(self.w_lr.is_finite() && self.arch_lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite".into()));
        }
        if let Some(ops) = &self.allowed_ops {
            if !ops.iter().any(|o| *o != OpKind::Zero) {
                return Err(Error::Config(
                    "allowed_ops must include at least one non-zero operation".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub val_loss: f64,
    pub skip_logit_mean: f64,
    pub genotype: String,
}

/// Per-epoch search telemetry; one row per completed epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchTrace {
    pub rows: Vec<TraceRow>,
}

impl SearchTrace {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "val_loss", "skip_logit_mean", "genotype"])?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.val_loss),
                format!("{:?}", r.skip_logit_mean),
                r.genotype.clone(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Multiply every skip-connect logit by `skip_gamma`, leaving the other
/// logits untouched. Suppression acts on logits, so a negative skip logit
/// is *raised* toward zero — callers watch the trace for that regime.
pub fn suppress_skip_step(params: &ArchParams, skip_gamma: f64) -> ArchParams {
    assert!(
        skip_gamma > 0.0 && skip_gamma <= 1.0,
        "skip_gamma must lie in (0, 1]"
    );
    let k = OpKind::SkipConnect.index();
    let mut out = params.clone();
    for edge in out.normal.iter_mut().chain(out.reduce.iter_mut()) {
        edge[k] *= skip_gamma;
    }
    out
}

/// A bi-level objective exposing the two gradients the first-order update
/// needs: ∇_θ of the inner loss and ∇_α of the outer loss at a fixed θ.
pub trait BilevelProblem {
    fn grad_theta(&mut self, theta: &[f64]) -> Result<Vec<f64>>;
    fn grad_alpha_at(&mut self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `n_step` plain gradient-descent updates of θ on the inner loss, then the
/// outer α-gradient evaluated at the adapted θ (held fixed). Returns the
/// adapted θ and the α-gradient.
pub fn first_order_alpha_grad<P: BilevelProblem>(
    problem: &mut P,
    theta0: &[f64],
    n_step: usize,
    w_lr: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_step == 0 {
        return Err(Error::Config("n_step must be ≥ 1".into()));
    }
    let mut theta = theta0.to_vec();
    for _ in 0..n_step {
        let g = problem.grad_theta(&theta)?;
        if g.len() != theta.len() {
            return Err(Error::Shape("inner gradient length".into()));
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= w_lr * gi;
        }
    }
    let ga = problem.grad_alpha_at(&theta)?;
    Ok((theta, ga))
}

pub fn flatten_alpha(alpha: &ArchParams) -> Vec<f64> {
    alpha
        .normal
        .iter()
        .chain(alpha.reduce.iter())
        .flatten()
        .copied()
        .collect()
}

pub fn unflatten_alpha(flat: &[f64], like: &ArchParams) -> ArchParams {
    let mut out = like.clone();
    let mut it = flat.iter();
    for edge in out.normal.iter_mut().chain(out.reduce.iter_mut()) {
        for v in edge.iter_mut() {
            *v = *it.next().expect("flat alpha too short");
        }
    }
    assert!(it.next().is_none(), "flat alpha too long");
    out
}

/// The supernet as a bi-level problem: θ lives in the flat parameter
/// vector, the inner loss is the train-batch mean cross-entropy, and the
/// outer gradient is the val-batch mean architecture-logit gradient.
struct SupernetBilevel<'a> {
    scratch: Network,
    train: &'a Dataset,
    val: &'a Dataset,
    last_inner_loss: f64,
    last_val_loss: f64,
}

impl SupernetBilevel<'_> {
    fn mean_batch_grads(net: &Network, batch: &Dataset) -> Result<(f64, Grads)> {
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut acc: Option<Grads> = None;
        for (x, &y) in batch.images.iter().zip(&batch.labels) {
            let (l, g) = net.loss_grads(x, y)?;
            loss += l * inv;
            match acc.as_mut() {
                None => {
                    let mut g = g;
                    g.scale(inv);
                    acc = Some(g);
                }
                Some(a) => a.add_scaled(&g, inv),
            }
        }
        Ok((loss, acc.expect("non-empty batch")))
    }
}

impl BilevelProblem for SupernetBilevel<'_> {
    fn grad_theta(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        self.scratch.params.load_flat(theta);
        let (loss, g) = Self::mean_batch_grads(&self.scratch, self.train)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "inner loss became non-finite (skip logit mean {:.4})",
                self.scratch
                    .alpha
                    .as_ref()
                    .map(|a| a.skip_logit_mean())
                    .unwrap_or(f64::NAN)
            )));
        }
        self.last_inner_loss = loss;
        Ok(g.to_flat())
    }

    fn grad_alpha_at(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        self.scratch.params.load_flat(theta);
        let inv = 1.0 / self.val.len() as f64;
        let mut loss = 0.0;
        let mut acc: Option<Vec<f64>> = None;
        for (x, &y) in self.val.images.iter().zip(&self.val.labels) {
            let (l, _, ga) = self.scratch.loss_grads_full(x, y)?;
            loss += l * inv;
            let ga = ga.ok_or_else(|| Error::Config("model carries no architecture logits".into()))?;
            let flat = flatten_alpha(&ga);
            match acc.as_mut() {
                None => acc = Some(flat.iter().map(|v| v * inv).collect()),
                Some(a) => {
                    for (ai, gi) in a.iter_mut().zip(&flat) {
                        *ai += gi * inv;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(
                "validation loss became non-finite during the architecture step".into(),
            ));
        }
        self.last_val_loss = loss;
        Ok(acc.expect("non-empty val batch"))
    }
}

/// One architecture update: `n_step` inner θ steps on the train batch
/// applied to a scratch copy, then α ← α − arch_lr · ∇_α 𝓛_val at the
/// adapted θ (first-order: the adapted θ is held fixed). The supernet
/// itself is not mutated.
pub fn arch_gradient_step(
    supernet: &Network,
    train_batch: &Dataset,
    val_batch: &Dataset,
    cfg: &SearchConfig,
) -> Result<ArchParams> {
    cfg.validate()?;
    let alpha = supernet
        .alpha
        .as_ref()
        .ok_or_else(|| Error::Config("architecture step needs a supernet".into()))?;
    if train_batch.is_empty() || val_batch.is_empty() {
        return Err(Error::Data("architecture step needs non-empty batches".into()));
    }
    let theta0 = supernet.params.to_flat();
    let mut problem = SupernetBilevel {
        scratch: supernet.clone(),
        train: train_batch,
        val: val_batch,
        last_inner_loss: f64::NAN,
        last_val_loss: f64::NAN,
    };
    let (_, ga) = first_order_alpha_grad(&mut problem, &theta0, cfg.n_step, cfg.w_lr)?;
    let flat: Vec<f64> = flatten_alpha(alpha)
        .iter()
        .zip(&ga)
        .map(|(a, g)| a - cfg.arch_lr * g)
        .collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "architecture logits became non-finite (inner loss {:.6}, val loss {:.6}, |∇α| {:.6e})",
            problem.last_inner_loss,
            problem.last_val_loss,
            ga.iter().map(|v| v * v).sum::<f64>().sqrt()
        )));
    }
    Ok(unflatten_alpha(&flat, alpha))
}

fn apply_op_mask(alpha: &mut ArchParams, allowed: &[OpKind]) {
    for edge in alpha.normal.iter_mut().chain(alpha.reduce.iter_mut()) {
        for (op, logit) in ALL_OPS.iter().zip(edge.iter_mut()) {
            if !allowed.contains(op) {
                *logit = MASKED_LOGIT;
            }
        }
    }
}

/// Deterministic shuffled split into (train, val) index sets.
fn split_indices(n: usize, val_split: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_val = ((val_split * n as f64).round() as usize).clamp(1, n - 1);
    let mut val = idx[..n_val].to_vec();
    let mut trn = idx[n_val..].to_vec();
    val.sort_unstable();
    trn.sort_unstable();
    (trn, val)
}

fn mean_val_loss(net: &Network, val: &Dataset) -> Result<f64> {
    let mut sum = 0.0;
    for (x, &y) in val.images.iter().zip(&val.labels) {
        sum += net.loss(x, y)?;
    }
    Ok(sum / val.len() as f64)
}

/// Alternating first-order search. Each iteration updates α (with skip
/// suppression when `skip_gamma < 1`), then takes one plain SGD step on θ.
/// Divergence aborts with the last finite trace attached to the error.
pub fn darts_search(
    data: &Dataset,
    cell: &CellTemplate,
    net: &NetworkTemplate,
    cfg: &SearchConfig,
) -> Result<(Genotype, SearchTrace)> {
    cfg.validate()?;
    cell.validate()?;
    net.validate()?;
    if data.len() < 2 {
        return Err(Error::Data("search needs at least two examples".into()));
    }
    let (h, w, c) = net.input_dims;
    if data.dims != (h, w, c) {
        return Err(Error::Shape(format!(
            "dataset dims {:?} do not match the template {:?}",
            data.dims, net.input_dims
        )));
    }
    if data.num_classes > net.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, template only {}",
            data.num_classes, net.num_classes
        )));
    }

    let mut root = Rng::seed_from_u64(cfg.seed);
    let (trn_idx, val_idx) = split_indices(data.len(), cfg.val_split, &mut root.split(0x59c1));
    let trn = data.select(&trn_idx);
    let val = data.select(&val_idx);

    let mut supernet = Network::new(
        ModelArch::Supernet {
            cell: cell.clone(),
            net: net.clone(),
        },
        cfg.seed,
    )?;
    if let Some(ops) = &cfg.allowed_ops {
        let mut a = supernet.alpha.take().expect("supernet has alpha");
        apply_op_mask(&mut a, ops);
        supernet.alpha = Some(a);
    }

    let mut shuffle_rng = root.split(0x7a41);
    let mut val_rng = root.split(0x7a42);
    let mut trace = SearchTrace::default();
    let diverged = |msg: String, trace: &SearchTrace| -> Error {
        Error::Diverged {
            message: msg,
            trace_csv: trace.to_csv().unwrap_or_default(),
        }
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..trn.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut val_order: Vec<usize> = (0..val.len()).collect();
        val_rng.shuffle(&mut val_order);
        let mut val_cursor = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let train_batch = trn.select(chunk);
            let vb: Vec<usize> = (0..chunk.len().min(val.len()))
                .map(|k| val_order[(val_cursor + k) % val.len()])
                .collect();
            val_cursor = (val_cursor + vb.len()) % val.len().max(1);
            let val_batch = val.select(&vb);

            // Outer update.
            let mut a = arch_gradient_step(&supernet, &train_batch, &val_batch, cfg)
                .map_err(|e| diverged(e.to_string(), &trace))?;
            if cfg.skip_gamma < 1.0 {
                a = suppress_skip_step(&a, cfg.skip_gamma);
            }
            if let Some(ops) = &cfg.allowed_ops {
                apply_op_mask(&mut a, ops);
            }
            if !a.all_finite() {
                return Err(diverged("architecture logits left ℝ".into(), &trace));
            }
            supernet.alpha = Some(a);

            // Inner update on the real weights (plain SGD).
            let (loss, g) = SupernetBilevel::mean_batch_grads(&supernet, &train_batch)
                .map_err(|e| diverged(e.to_string(), &trace))?;
            if !loss.is_finite() {
                return Err(diverged(format!("train loss {loss} at epoch {epoch}"), &trace));
            }
            supernet.params.add_scaled_grads(&g, -cfg.w_lr);
            if !supernet.params.all_finite() {
                return Err(diverged(format!("weights left ℝ at epoch {epoch}"), &trace));
            }
        }

        let alpha = supernet.alpha.as_ref().expect("supernet has alpha");
        let genotype = discretize(alpha, cell)?;
        trace.rows.push(TraceRow {
            epoch,
            val_loss: mean_val_loss(&supernet, &val)?,
            skip_logit_mean: alpha.skip_logit_mean(),
            genotype: genotype.to_text(),
        });
    }

    let alpha = supernet.alpha.as_ref().expect("supernet has alpha");
    let genotype = discretize(alpha, cell)?;
    Ok((genotype, trace))
}

/// Uniform random baseline: sample `budget` valid genotypes, train each
/// briefly, keep the best validation accuracy. `budget = 1` returns the
/// single sample untrained.
pub fn random_search(
    data: &Dataset,
    cell: &CellTemplate,
    net: &NetworkTemplate,
    budget: usize,
    seed: u64,
) -> Result<Genotype> {
    if budget == 0 {
        return Err(Error::Config("budget must be ≥ 1".into()));
    }
    cell.validate()?;
    net.validate()?;
    let mut root = Rng::seed_from_u64(seed);
    let mut sample_rng = root.split(0x7a9d);
    let candidates: Vec<Genotype> = (0..budget)
        .map(|_| sample_genotype(cell, &mut sample_rng))
        .collect();
    if budget == 1 {
        return Ok(candidates.into_iter().next().unwrap());
    }
    if data.len() < 2 {
        return Err(Error::Data("random search needs at least two examples".into()));
    }
    let (trn_idx, val_idx) = split_indices(data.len(), 0.3, &mut root.split(0x5b11));
    let trn = data.select(&trn_idx);
    let val = data.select(&val_idx);

    let mut best: Option<(f64, Genotype)> = None;
    for (i, g) in candidates.into_iter().enumerate() {
        let candidate_seed = seed ^ ((i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15));
        let network = Network::new(
            ModelArch::CellNet {
                cell: cell.clone(),
                net: net.clone(),
                genotype: g.clone(),
            },
            candidate_seed,
        )?;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.05,
            seed: candidate_seed,
            ..Default::default()
        };
        let trained = train_model(network, &trn, &cfg)?;
        let acc = evaluate_accuracy(&trained.network, &val)?;
        let better = match &best {
            None => true,
            Some((b, _)) => acc > *b,
        };
        if better {
            best = Some((acc, g));
        }
    }
    Ok(best.expect("budget ≥ 1").1)
}

/// The four search flavors: plain, more inner steps, skip suppression with
/// post-hoc skip substitution, and both combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SearchVariant {
    #[serde(rename = "darts")]
    Darts,
    #[serde(rename = "darts-i")]
    DartsI,
    #[serde(rename = "darts-ii")]
    DartsII,
    #[serde(rename = "darts-iii")]
    DartsIII,
}

impl SearchVariant {
    pub const ALL: [SearchVariant; 4] = [
        SearchVariant::Darts,
        SearchVariant::DartsI,
        SearchVariant::DartsII,
        SearchVariant::DartsIII,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            SearchVariant::Darts => "darts",
            SearchVariant::DartsI => "darts-i",
            SearchVariant::DartsII => "darts-ii",
            SearchVariant::DartsIII => "darts-iii",
        }
    }

    fn wants_deep_steps(&self) -> bool {
        matches!(self, SearchVariant::DartsI | SearchVariant::DartsIII)
    }

    fn wants_skip_suppression(&self) -> bool {
        matches!(self, SearchVariant::DartsII | SearchVariant::DartsIII)
    }

    /// Derive the variant's config from a base config.
    pub fn configure(&self, base: &SearchConfig) -> SearchConfig {
        let mut cfg = base.clone();
        if self.wants_deep_steps() {
            cfg.n_step = cfg.n_step.max(5);
        }
        if self.wants_skip_suppression() && cfg.skip_gamma >= 1.0 {
            cfg.skip_gamma = 0.5;
        }
        cfg
    }

    /// Post-process the searched genotype (skip substitution for ii/iii).
    pub fn finalize(&self, genotype: Genotype) -> Genotype {
        if self.wants_skip_suppression() {
            rewire(&genotype, RewireStrategy::SubstituteSkips)
        } else {
            genotype
        }
    }
}

/// Run one variant end to end: configure, search, post-process.
pub fn search_variant(
    data: &Dataset,
    cell: &CellTemplate,
    net: &NetworkTemplate,
    base: &SearchConfig,
    variant: SearchVariant,
) -> Result<(Genotype, SearchTrace)> {
    let cfg = variant.configure(base);
    let (genotype, trace) = darts_search(data, cell, net, &cfg)?;
    Ok((variant.finalize(genotype), trace))
}
