//! Trainability and robustness probes: loss-surface contours, per-input
//! gradient variance, an input-gradient Lipschitz probe, a convergence-gap
//! probe on noisy quadratics, and cross-model vulnerability overlap.

use crate::attacks::{AttackRecord, AttackReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Loss contours
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourSpace {
    Parameter,
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: usize,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            resolution: 41,
            alpha_range: (-1.0, 1.0),
            beta_range: (-1.0, 1.0),
            seed: 0,
        }
    }
}

/// Γ(α,β) over a two-direction slice of the loss surface.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourGrid {
    pub space: ContourSpace,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `matrix[i][j]` = loss at (alphas[i], betas[j]); non-finite values are
    /// stored as +∞ and counted, never dropped.
    pub matrix: Vec<Vec<f64>>,
    pub baseline: f64,
    pub nonfinite_cells: usize,
    pub direction_seed: u64,
}

/// The JSON sidecar for a contour CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourMeta {
    pub space: ContourSpace,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub baseline: f64,
    pub nonfinite_cells: usize,
    pub direction_seed: u64,
}

/// Exact linspace: endpoints are reproduced exactly and, for symmetric
/// ranges with odd resolution, the middle step is exactly zero.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| ((n - 1 - i) as f64 * lo + i as f64 * hi) / m)
        .collect()
}

/// Inner product of two flat vectors.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Direction scaling for the slice.
pub enum DirectionNorm<'a> {
    /// Rescale each filter chunk of the direction to the matching filter's
    /// norm in `center`; `filters` lists (tensor_len, filter_size).
    FilterMatched { filters: &'a [(usize, usize)] },
    /// Whole-vector unit ℓ2.
    UnitL2,
}

fn make_directions(
    center: &[f64],
    normalize: &DirectionNorm<'_>,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = center.len();
    let mut rng = Rng::seed_from_u64(seed).split(0xd12);
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    rng.fill_normal(&mut d1, 1.0);
    rng.fill_normal(&mut d2, 1.0);

    match normalize {
        DirectionNorm::FilterMatched { filters } => {
            let total: usize = filters.iter().map(|f| f.0).sum();
            if total != n {
                return Err(Error::Shape(format!(
                    "filter layout covers {total} of {n} coordinates"
                )));
            }
            for d in [&mut d1, &mut d2] {
                let mut off = 0;
                for &(len, fsize) in filters.iter() {
                    let fs = fsize.max(1).min(len);
                    let mut i = off;
                    while i < off + len {
                        let j = (i + fs).min(off + len);
                        let cn = norm(&center[i..j]);
                        let dn = norm(&d[i..j]);
                        let s = if dn > 0.0 { cn / dn } else { 0.0 };
                        for v in d[i..j].iter_mut() {
                            *v *= s;
                        }
                        i = j;
                    }
                    off += len;
                }
            }
        }
        DirectionNorm::UnitL2 => {
            let n1 = norm(&d1);
            if n1 > 0.0 {
                for v in d1.iter_mut() {
                    *v /= n1;
                }
            }
        }
    }

    // Orthogonalize d2 against d1, preserving d2's scale.
    let d1n2 = dot(&d1, &d1);
    if d1n2 > 0.0 {
        let pre = norm(&d2);
        let proj = dot(&d1, &d2) / d1n2;
        for (v2, &v1) in d2.iter_mut().zip(&d1) {
            *v2 -= proj * v1;
        }
        let post = norm(&d2);
        if post > 0.0 && pre > 0.0 {
            let s = match normalize {
                DirectionNorm::FilterMatched { .. } => pre / post,
                DirectionNorm::UnitL2 => 1.0 / post,
            };
            for v in d2.iter_mut() {
                *v *= s;
            }
        }
    }
    Ok((d1, d2))
}

/// Evaluate a loss over a two-direction grid around `center`. The center
/// cell is evaluated at `center` itself, untouched by direction arithmetic.
pub fn contour_over_fn(
    eval: &mut dyn FnMut(&[f64]) -> f64,
    center: &[f64],
    normalize: DirectionNorm<'_>,
    space: ContourSpace,
    spec: &GridSpec,
) -> Result<ContourGrid> {
    if spec.resolution < 2 {
        return Err(Error::Config("contour resolution must be ≥ 2".into()));
    }
    let (d1, d2) = make_directions(center, &normalize, spec.seed)?;
    let n1 = norm(&d1);
    let n2 = norm(&d2);
    if n1 > 0.0 && n2 > 0.0 {
        let cosine = dot(&d1, &d2).abs() / (n1 * n2);
        if cosine >= 1e-6 {
            return Err(Error::Numeric(format!(
                "slice directions not orthogonal (cos {cosine:.2e})"
            )));
        }
    }
    let alphas = linspace(spec.alpha_range.0, spec.alpha_range.1, spec.resolution);
    let betas = linspace(spec.beta_range.0, spec.beta_range.1, spec.resolution);
    let baseline = eval(center);
    let mut point = vec![0.0; center.len()];
    let mut nonfinite = 0usize;
    let mut matrix = Vec::with_capacity(alphas.len());
    for &a in &alphas {
        let mut row = Vec::with_capacity(betas.len());
        for &b in &betas {
            let v = if a == 0.0 && b == 0.0 {
                baseline
            } else {
                for (p, ((&c, &v1), &v2)) in
                    point.iter_mut().zip(center.iter().zip(&d1).zip(&d2))
                {
                    *p = c + a * v1 + b * v2;
                }
                eval(&point)
            };
            if v.is_finite() {
                row.push(v);
            } else {
                nonfinite += 1;
                row.push(f64::INFINITY);
            }
        }
        matrix.push(row);
    }
    Ok(ContourGrid {
        space,
        alphas,
        betas,
        matrix,
        baseline,
        nonfinite_cells: nonfinite,
        direction_seed: spec.seed,
    })
}

/// Parameter-space contour of the mean cross-entropy over `sample`,
/// filter-normalized directions.
pub fn loss_contour_params(
    network: &Network,
    sample: &Dataset,
    spec: &GridSpec,
) -> Result<ContourGrid> {
    if sample.is_empty() {
        return Err(Error::Data("contour needs a non-empty sample".into()));
    }
    let center = network.params.to_flat();
    let filters: Vec<(usize, usize)> = network
        .params
        .tensors
        .iter()
        .map(|t| (t.data.len(), t.filter_size))
        .collect();
    let mut scratch = network.clone();
    let mut eval = |theta: &[f64]| -> f64 {
        scratch.params.load_flat(theta);
        let mut sum = 0.0;
        for (x, &y) in sample.images.iter().zip(&sample.labels) {
            match scratch.loss(x, y) {
                Ok(l) => sum += l,
                Err(_) => return f64::INFINITY,
            }
        }
        sum / sample.len() as f64
    };
    contour_over_fn(
        &mut eval,
        &center,
        DirectionNorm::FilterMatched { filters: &filters },
        ContourSpace::Parameter,
        spec,
    )
}

/// Input-space contour of one (input, label) pair, unit-ℓ2 orthogonal
/// directions.
pub fn loss_contour_input(
    network: &Network,
    x: &Tensor,
    y: usize,
    spec: &GridSpec,
) -> Result<ContourGrid> {
    let (c, h, w) = x.shape();
    let center = x.data.clone();
    let mut eval = |v: &[f64]| -> f64 {
        let probe = Tensor::from_vec(c, h, w, v.to_vec());
        network.loss(&probe, y).unwrap_or(f64::INFINITY)
    };
    contour_over_fn(
        &mut eval,
        &center,
        DirectionNorm::UnitL2,
        ContourSpace::Input,
        spec,
    )
}

impl ContourGrid {
    pub fn meta(&self) -> ContourMeta {
        ContourMeta {
            space: self.space,
            alphas: self.alphas.clone(),
            betas: self.betas.clone(),
            baseline: self.baseline,
            nonfinite_cells: self.nonfinite_cells,
            direction_seed: self.direction_seed,
        }
    }

    /// Write `stem.csv` (pure numeric matrix, `inf` for +∞) and
    /// `stem.meta.json` (axes and provenance).
    pub fn write_files(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv_path = stem.with_extension("csv");
        let meta_path = stem.with_extension("meta.json");
        if let Some(dir) = stem.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = String::new();
        for row in &self.matrix {
            let cells: Vec<String> = row
                .iter()
                .map(|v| {
                    if v.is_finite() {
                        format!("{v:?}")
                    } else {
                        "inf".to_string()
                    }
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(&csv_path, out)?;
        std::fs::write(&meta_path, serde_json::to_vec_pretty(&self.meta())?)?;
        Ok((csv_path, meta_path))
    }

    /// Read a grid back from `stem.csv` + `stem.meta.json`.
    pub fn read_files(stem: &Path) -> Result<ContourGrid> {
        let meta: ContourMeta =
            serde_json::from_slice(&std::fs::read(stem.with_extension("meta.json"))?)?;
        let text = std::fs::read_to_string(stem.with_extension("csv"))?;
        let mut matrix = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for cell in line.split(',') {
                let v: f64 = cell
                    .parse()
                    .map_err(|e| Error::Csv(format!("row {ln}: {e}")))?;
                row.push(v);
            }
            matrix.push(row);
        }
        if matrix.len() != meta.alphas.len()
            || matrix.iter().any(|r| r.len() != meta.betas.len())
        {
            return Err(Error::Csv("contour matrix does not match its axes".into()));
        }
        Ok(ContourGrid {
            space: meta.space,
            alphas: meta.alphas,
            betas: meta.betas,
            matrix,
            baseline: meta.baseline,
            nonfinite_cells: meta.nonfinite_cells,
            direction_seed: meta.direction_seed,
        })
    }
}

// ---------------------------------------------------------------------------
// Gradient variance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub model_id: String,
    pub phase: Phase,
    pub var_g: f64,
    pub sample_count: usize,
    pub grad_dim: usize,
}

/// Var(g) = mean over inputs of ‖g_i − ḡ‖²₂ for flat gradient vectors.
pub fn variance_of_gradients(grads: &[Vec<f64>]) -> Result<f64> {
    if grads.is_empty() {
        return Err(Error::Data("gradient variance needs ≥ 1 sample".into()));
    }
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::Shape("gradient vectors differ in length".into()));
    }
    let n = grads.len() as f64;
    let mut mean = vec![0.0; dim];
    for g in grads {
        for (m, &v) in mean.iter_mut().zip(g) {
            *m += v / n;
        }
    }
    let mut acc = 0.0;
    for g in grads {
        let mut d2 = 0.0;
        for (&v, &m) in g.iter().zip(&mean) {
            let d = v - m;
            d2 += d * d;
        }
        acc += d2;
    }
    Ok(acc / n)
}

/// Per-input (batch size 1) gradient variance of the full parameter vector.
pub fn gradient_variance(
    network: &Network,
    sample: &Dataset,
    phase: Phase,
    model_id: &str,
) -> Result<VarianceReport> {
    if sample.is_empty() {
        return Err(Error::Data("gradient variance needs ≥ 1 input".into()));
    }
    let mut grads = Vec::with_capacity(sample.len());
    for (x, &y) in sample.images.iter().zip(&sample.labels) {
        let (_, g) = network.loss_grads(x, y)?;
        grads.push(g.to_flat());
    }
    let dim = grads[0].len();
    Ok(VarianceReport {
        model_id: model_id.to_string(),
        phase,
        var_g: variance_of_gradients(&grads)?,
        sample_count: sample.len(),
        grad_dim: dim,
    })
}

// ---------------------------------------------------------------------------
// Input-Lipschitz probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// sup over pairs of ‖∇ₓ𝓛(x) − ∇ₓ𝓛(x′)‖ / ‖x − x′‖.
    pub input_grad_lipschitz: f64,
    /// Same quotient for the first-layer bias gradient.
    pub param_grad_lipschitz: f64,
    /// input / param estimate (NaN when the denominator is 0).
    pub ratio: f64,
    /// First-layer width used for the reference lines.
    pub n_width: usize,
    pub sqrt_n: f64,
    pub inv_sqrt_n: f64,
    /// True when the ratio exceeds the 1/√n line (reported, not asserted).
    pub exceeds_inv_sqrt_n: bool,
    pub pairs: usize,
}

fn lipschitz_over_pairs(
    grad: &mut dyn FnMut(&Tensor, usize) -> Result<(Tensor, Vec<f64>)>,
    pairs: &[(Tensor, Tensor, usize)],
    n_width: usize,
) -> Result<LipschitzReport> {
    if pairs.is_empty() {
        return Err(Error::Data("Lipschitz probe needs ≥ 1 pair".into()));
    }
    let mut input_sup = 0.0f64;
    let mut param_sup = 0.0f64;
    for (a, b, label) in pairs {
        let dx = a.l2_dist(b);
        if dx == 0.0 {
            continue;
        }
        let (ga, pa) = grad(a, *label)?;
        let (gb, pb) = grad(b, *label)?;
        input_sup = input_sup.max(ga.l2_dist(&gb) / dx);
        let pd: f64 = pa
            .iter()
            .zip(&pb)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt();
        param_sup = param_sup.max(pd / dx);
    }
    let ratio = if param_sup > 0.0 {
        input_sup / param_sup
    } else if input_sup == 0.0 {
        0.0
    } else {
        f64::NAN
    };
    let sqrt_n = (n_width as f64).sqrt();
    let inv_sqrt_n = 1.0 / sqrt_n;
    Ok(LipschitzReport {
        input_grad_lipschitz: input_sup,
        param_grad_lipschitz: param_sup,
        ratio,
        n_width,
        sqrt_n,
        inv_sqrt_n,
        exceeds_inv_sqrt_n: ratio.is_finite() && ratio > inv_sqrt_n,
        pairs: pairs.len(),
    })
}

/// Pairwise difference-quotient probe over explicit input pairs; the
/// gradient function returns (∇ₓ loss, ∇ bias-of-first-layer loss).
pub fn input_lipschitz_probe_pairs(
    grad: &mut dyn FnMut(&Tensor) -> Result<(Tensor, Vec<f64>)>,
    pairs: &[(Tensor, Tensor)],
    n_width: usize,
) -> Result<LipschitzReport> {
    let labeled: Vec<(Tensor, Tensor, usize)> = pairs
        .iter()
        .map(|(a, b)| (a.clone(), b.clone(), 0))
        .collect();
    lipschitz_over_pairs(&mut |x, _| grad(x), &labeled, n_width)
}

/// Normalize the first-layer filters in place: zero mean and unit ℓ2 per
/// filter row (rows that are exactly zero are left alone).
pub fn weight_normalize_first_layer(network: &mut Network) -> Result<()> {
    let idx = network
        .params
        .idx("stem.w")
        .ok_or_else(|| Error::Config("model has no first-layer weights".into()))?;
    let t = &mut network.params.tensors[idx];
    let fs = t.filter_size.max(1);
    for chunk in t.data.chunks_mut(fs) {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        for v in chunk.iter_mut() {
            *v -= mean;
        }
        let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in chunk.iter_mut() {
                *v /= n;
            }
        }
    }
    Ok(())
}

/// Probe a network over same-label consecutive pairs from `sample`. The
/// first layer should be weight-normalized beforehand (see
/// [`weight_normalize_first_layer`]); the report carries the comparison
/// against the 1/√n and √n reference lines without asserting either.
pub fn input_lipschitz_probe(network: &Network, sample: &Dataset) -> Result<LipschitzReport> {
    let bias_idx = network
        .params
        .idx("stem.b")
        .ok_or_else(|| Error::Config("model has no first-layer bias".into()))?;
    let w_idx = network
        .params
        .idx("stem.w")
        .ok_or_else(|| Error::Config("model has no first-layer weights".into()))?;
    let n_width = network.params.tensors[w_idx].shape[0];

    let mut pairs = Vec::new();
    for class in sample.by_class() {
        for w in class.windows(2) {
            pairs.push((
                sample.images[w[0]].clone(),
                sample.images[w[1]].clone(),
                sample.labels[w[0]],
            ));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(
            "need ≥ 2 same-label inputs for the Lipschitz probe".into(),
        ));
    }
    let mut grad = |x: &Tensor, y: usize| -> Result<(Tensor, Vec<f64>)> {
        let (_, gx) = network.class_loss_input_grad(x, y)?;
        let (_, g) = network.loss_grads(x, y)?;
        Ok((gx, g.by_param[bias_idx].clone()))
    };
    lipschitz_over_pairs(&mut grad, &pairs, n_width)
}

/// Max row ℓ1 norm of a row-normalized matrix against the √n and 1/√n
/// reference lines (the probe *reports*; the inequality itself can fail).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowL1Stats {
    pub max_row_l1: f64,
    pub n: usize,
    pub sqrt_n: f64,
    pub inv_sqrt_n: f64,
    pub exceeds_inv_sqrt_n: bool,
}

pub fn row_l1_stats(rows: &[Vec<f64>]) -> Result<RowL1Stats> {
    let n = rows.first().map(|r| r.len()).unwrap_or(0);
    if n == 0 {
        return Err(Error::Data("row stats need a non-empty matrix".into()));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("ragged matrix".into()));
    }
    let max_row_l1 = rows
        .iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let sqrt_n = (n as f64).sqrt();
    let inv_sqrt_n = 1.0 / sqrt_n;
    Ok(RowL1Stats {
        max_row_l1,
        n,
        sqrt_n,
        inv_sqrt_n,
        exceeds_inv_sqrt_n: max_row_l1 > inv_sqrt_n,
    })
}

// ---------------------------------------------------------------------------
// Convergence-gap probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceProbeConfig {
    /// Gradient-Lipschitz constant of the quadratic (its curvature).
    pub l_smooth: f64,
    /// Variance bound E‖noise‖² injected into each gradient.
    pub sigma2: f64,
    /// Step sizes α_1..α_T.
    pub alphas: Vec<f64>,
    pub dim: usize,
    /// Initial distance ‖θ₀ − θ*‖.
    pub r0: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceProbeResult {
    /// Monte-Carlo estimate of E[𝓛(θ_t̄) − 𝓛(θ*)].
    pub empirical_gap: f64,
    pub sem: f64,
    pub bound_rhs: f64,
    /// Selection weights 2α_t − Lα_t².
    pub weights: Vec<f64>,
    /// empirical + 2.3263·sem ≤ bound (one-sided 99%).
    pub within_bound_99: bool,
}

/// SGD on the quadratic 𝓛(θ) = (L/2)‖θ‖² with injected zero-mean gradient
/// noise; t̄ indexes the pre-step iterates θ₀..θ_{T−1}, drawn with
/// probability ∝ 2α_t − Lα_t².
pub fn convergence_gap_probe(cfg: &ConvergenceProbeConfig) -> Result<ConvergenceProbeResult> {
    if cfg.alphas.is_empty() {
        return Err(Error::Config("need at least one step size".into()));
    }
    if cfg.l_smooth <= 0.0 || cfg.dim == 0 || cfg.trials == 0 {
        return Err(Error::Config("L, dim, and trials must be positive".into()));
    }
    if cfg.sigma2 < 0.0 {
        return Err(Error::Config("sigma2 must be ≥ 0".into()));
    }
    let l = cfg.l_smooth;
    let weights: Vec<f64> = cfg.alphas.iter().map(|&a| 2.0 * a - l * a * a).collect();
    if let Some((t, &w)) = weights.iter().enumerate().find(|(_, &w)| w <= 0.0) {
        return Err(Error::Config(format!(
            "step {} violates 2α − Lα² > 0 (α = {}, weight = {w})",
            t + 1,
            cfg.alphas[t]
        )));
    }
    let wsum: f64 = weights.iter().sum();
    let a2sum: f64 = cfg.alphas.iter().map(|a| a * a).sum();
    let bound_rhs = (cfg.r0 * cfg.r0 + cfg.sigma2 * a2sum) / wsum;

    let f = |theta: &[f64]| 0.5 * l * theta.iter().map(|v| v * v).sum::<f64>();
    let noise_std = (cfg.sigma2 / cfg.dim as f64).sqrt();
    let mut rng = Rng::seed_from_u64(cfg.seed).split(0xc04f);
    let mut gaps = Vec::with_capacity(cfg.trials);
    let mut noise = vec![0.0; cfg.dim];
    for _ in 0..cfg.trials {
        let mut theta = vec![0.0; cfg.dim];
        theta[0] = cfg.r0;
        let t_bar = rng.weighted_index(&weights);
        let mut picked = f64::NAN;
        for (t, &alpha) in cfg.alphas.iter().enumerate() {
            if t == t_bar {
                picked = f(&theta);
            }
            rng.fill_normal(&mut noise, noise_std);
            for (th, &xi) in theta.iter_mut().zip(&noise) {
                *th -= alpha * (l * *th + xi);
            }
        }
        debug_assert!(picked.is_finite());
        gaps.push(picked);
    }
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n.max(2.0);
    let sem = (var / n).sqrt();
    Ok(ConvergenceProbeResult {
        empirical_gap: mean,
        sem,
        bound_rhs,
        weights,
        within_bound_99: mean + 2.3263 * sem <= bound_rhs,
    })
}

// ---------------------------------------------------------------------------
// Vulnerability overlap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapHistogram {
    /// `counts[k]` = number of inputs succeeded against exactly k models;
    /// index 0 holds the never-compromised inputs.
    pub counts: Vec<usize>,
    pub models: usize,
    pub inputs: usize,
}

/// Count, per shared input, against how many of the models its adversarial
/// example succeeded. All reports must cover the same evasion input ids.
pub fn vulnerability_overlap(reports: &[&AttackReport]) -> Result<OverlapHistogram> {
    if reports.is_empty() {
        return Err(Error::Data("overlap needs ≥ 1 report".into()));
    }
    let mut per_model: Vec<std::collections::BTreeMap<usize, bool>> = Vec::new();
    for rep in reports {
        let mut m = std::collections::BTreeMap::new();
        for rec in &rep.records {
            if let AttackRecord::Evasion { id, success, .. } = rec {
                if m.insert(*id, *success).is_some() {
                    return Err(Error::Data(format!(
                        "report {} repeats input id {id}",
                        rep.name
                    )));
                }
            }
        }
        if m.is_empty() {
            return Err(Error::Data(format!(
                "report {} carries no evasion records",
                rep.name
            )));
        }
        per_model.push(m);
    }
    let ids: Vec<usize> = per_model[0].keys().copied().collect();
    for (i, m) in per_model.iter().enumerate().skip(1) {
        if m.keys().copied().collect::<Vec<_>>() != ids {
            return Err(Error::Data(format!(
                "report {} indexes a different input set",
                reports[i].name
            )));
        }
    }
    let models = per_model.len();
    let mut counts = vec![0usize; models + 1];
    for id in &ids {
        let k = per_model.iter().filter(|m| m[id]).count();
        counts[k] += 1;
    }
    Ok(OverlapHistogram {
        counts,
        models,
        inputs: ids.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load, DataSource, DatasetSpec};
    use crate::nn::RefArch;
    use crate::ModelArch;
    use approx::assert_abs_diff_eq;

    fn tiny_bundle() -> crate::data::DataBundle {
        let mut spec = DatasetSpec::synthetic(91);
        if let DataSource::Synthetic {
            num_classes,
            train_per_class,
            test_per_class,
            height,
            width,
            ..
        } = &mut spec.source
        {
            *num_classes = 3;
            *train_per_class = 8;
            *test_per_class = 4;
            *height = 7;
            *width = 7;
        }
        load(&spec).unwrap()
    }

    fn tiny_net(seed: u64) -> Network {
        Network::new(
            ModelArch::Reference {
                arch: RefArch::Chain { width: 5, depth: 2 },
                input_dims: (7, 7, 3),
                num_classes: 3,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn quadratic_contour_matches_the_closed_form() {
        let center = vec![0.0; 24];
        let mut eval = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let spec = GridSpec {
            resolution: 9,
            seed: 5,
            ..Default::default()
        };
        let grid = contour_over_fn(
            &mut eval,
            &center,
            DirectionNorm::UnitL2,
            ContourSpace::Input,
            &spec,
        )
        .unwrap();
        // ‖αd₁ + βd₂‖² = α² + β² for orthonormal directions.
        for (i, &a) in grid.alphas.iter().enumerate() {
            for (j, &b) in grid.betas.iter().enumerate() {
                assert_abs_diff_eq!(grid.matrix[i][j], a * a + b * b, epsilon = 1e-9);
            }
        }
        assert_eq!(grid.baseline, 0.0);
        assert_eq!(grid.nonfinite_cells, 0);
    }

    #[test]
    fn contour_center_is_bit_exact_and_grid_has_default_shape() {
        let bundle = tiny_bundle();
        let net = tiny_net(3);
        let sample = bundle.train.subsample(6, 1);
        let spec = GridSpec {
            resolution: 7,
            seed: 2,
            ..Default::default()
        };
        let grid = loss_contour_params(&net, &sample, &spec).unwrap();
        let mid = 3; // resolution 7, symmetric range
        assert_eq!(grid.alphas[mid], 0.0);
        assert_eq!(grid.betas[mid], 0.0);
        assert_eq!(grid.matrix[mid][mid].to_bits(), grid.baseline.to_bits());
        // Independent baseline recomputation matches bit-exactly.
        let mut direct = 0.0;
        for (x, &y) in sample.images.iter().zip(&sample.labels) {
            direct += net.loss(x, y).unwrap();
        }
        direct /= sample.len() as f64;
        assert_eq!(direct.to_bits(), grid.baseline.to_bits());

        let dflt = GridSpec::default();
        assert_eq!(dflt.resolution, 41);
        assert_eq!(dflt.alpha_range, (-1.0, 1.0));
    }

    #[test]
    fn input_space_contour_runs_and_center_matches() {
        let bundle = tiny_bundle();
        let net = tiny_net(4);
        let x = &bundle.test.images[0];
        let y = bundle.test.labels[0];
        let spec = GridSpec {
            resolution: 5,
            seed: 9,
            ..Default::default()
        };
        let grid = loss_contour_input(&net, x, y, &spec).unwrap();
        assert_eq!(grid.matrix[2][2].to_bits(), net.loss(x, y).unwrap().to_bits());
        assert_eq!(grid.space, ContourSpace::Input);
    }

    #[test]
    fn contour_records_nonfinite_cells_and_round_trips_csv() {
        let center = vec![0.25; 6];
        // Loss blows up in one corner region.
        let mut eval = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            if s > 2.2 {
                f64::NAN
            } else {
                s
            }
        };
        let spec = GridSpec {
            resolution: 5,
            seed: 1,
            ..Default::default()
        };
        let grid = contour_over_fn(
            &mut eval,
            &center,
            DirectionNorm::UnitL2,
            ContourSpace::Input,
            &spec,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("contour");
        grid.write_files(&stem).unwrap();
        let back = ContourGrid::read_files(&stem).unwrap();
        assert_eq!(back, grid);
        // Any non-finite cells survived as +∞.
        let infs: usize = back
            .matrix
            .iter()
            .flatten()
            .filter(|v| v.is_infinite())
            .count();
        assert_eq!(infs, back.nonfinite_cells);
    }

    #[test]
    fn gradient_variance_identities() {
        // Single sample → 0.
        assert_eq!(variance_of_gradients(&[vec![1.0, -2.0, 3.0]]).unwrap(), 0.0);
        // g and −g → ‖g‖².
        let g = vec![1.0, 2.0, -1.0];
        let minus: Vec<f64> = g.iter().map(|v| -v).collect();
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(
            variance_of_gradients(&[g.clone(), minus]).unwrap(),
            norm2,
            epsilon = 1e-12
        );
        // Order invariance and duplication invariance.
        let mut rng = Rng::seed_from_u64(8);
        let sample: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..10).map(|_| rng.normal()).collect())
            .collect();
        let v1 = variance_of_gradients(&sample).unwrap();
        let mut rev = sample.clone();
        rev.reverse();
        let v2 = variance_of_gradients(&rev).unwrap();
        assert_abs_diff_eq!(v1, v2, epsilon = 1e-12);
        let doubled: Vec<Vec<f64>> = sample.iter().chain(sample.iter()).cloned().collect();
        let v3 = variance_of_gradients(&doubled).unwrap();
        assert_abs_diff_eq!(v1, v3, epsilon = 1e-12);
        assert!(variance_of_gradients(&[]).is_err());
    }

    #[test]
    fn network_gradient_variance_is_positive_and_reported() {
        let bundle = tiny_bundle();
        let net = tiny_net(6);
        let sample = bundle.train.subsample(8, 3);
        let rep = gradient_variance(&net, &sample, Phase::Init, "tiny").unwrap();
        assert!(rep.var_g >= 0.0);
        assert_eq!(rep.sample_count, 8);
        assert_eq!(rep.grad_dim, net.param_count());
        assert_eq!(rep.phase, Phase::Init);
    }

    #[test]
    fn linear_lipschitz_probe_is_exact() {
        // ℓ(x) = (w·x − y)². ∇ₓ = 2(w·x−y)w; over any pair along w the
        // quotient is exactly 2‖w‖².
        let w = vec![0.5, -1.5, 2.0, 0.25];
        let wn2: f64 = w.iter().map(|v| v * v).sum();
        let y = 0.3;
        let wc = w.clone();
        let mut grad = move |x: &Tensor| -> Result<(Tensor, Vec<f64>)> {
            let z: f64 = wc.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f64>() - y;
            let gx = Tensor::from_vec(1, 1, 4, wc.iter().map(|&wi| 2.0 * z * wi).collect());
            Ok((gx, vec![2.0 * z]))
        };
        let base = Tensor::from_vec(1, 1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        let mut shifted = base.clone();
        for (v, &wi) in shifted.data.iter_mut().zip(&w) {
            *v += 0.05 * wi;
        }
        let rep =
            input_lipschitz_probe_pairs(&mut grad, &[(base, shifted)], 4).unwrap();
        assert_abs_diff_eq!(rep.input_grad_lipschitz, 2.0 * wn2, epsilon = 1e-9);
        assert!(rep.param_grad_lipschitz > 0.0);
    }

    #[test]
    fn constant_model_probe_reports_zero() {
        let mut grad = |_x: &Tensor| -> Result<(Tensor, Vec<f64>)> {
            Ok((Tensor::zeros(1, 1, 3), vec![0.0, 0.0]))
        };
        let a = Tensor::from_vec(1, 1, 3, vec![0.0, 0.5, 1.0]);
        let b = Tensor::from_vec(1, 1, 3, vec![1.0, 0.5, 0.0]);
        let rep = input_lipschitz_probe_pairs(&mut grad, &[(a, b)], 3).unwrap();
        assert_eq!(rep.input_grad_lipschitz, 0.0);
        assert_eq!(rep.param_grad_lipschitz, 0.0);
        assert_eq!(rep.ratio, 0.0);
    }

    #[test]
    fn network_probe_runs_after_weight_normalization() {
        let bundle = tiny_bundle();
        let mut net = tiny_net(7);
        weight_normalize_first_layer(&mut net).unwrap();
        // Every stem filter now has zero mean and unit norm.
        let idx = net.params.idx("stem.w").unwrap();
        let t = &net.params.tensors[idx];
        for chunk in t.data.chunks(t.filter_size) {
            assert_abs_diff_eq!(chunk.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(
                chunk.iter().map(|v| v * v).sum::<f64>(),
                1.0,
                epsilon = 1e-12
            );
        }
        let rep = input_lipschitz_probe(&net, &bundle.train.subsample(12, 2)).unwrap();
        assert!(rep.input_grad_lipschitz.is_finite());
        assert!(rep.pairs > 0);
        assert_eq!(rep.n_width, 5);
    }

    #[test]
    fn row_l1_stats_flags_the_counterexample() {
        // A unit row of four 0.5 entries has ℓ1 norm 2 > 1/√4.
        let rows = vec![vec![0.5, 0.5, 0.5, 0.5]];
        let st = row_l1_stats(&rows).unwrap();
        assert_eq!(st.max_row_l1, 2.0);
        assert_eq!(st.sqrt_n, 2.0);
        assert!(st.exceeds_inv_sqrt_n);
        // A one-hot row stays under √n and exactly at... 1.0 ≤ √n.
        let st2 = row_l1_stats(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(st2.max_row_l1, 1.0);
    }

    #[test]
    fn convergence_probe_plugin_value_and_validation() {
        // T = 1, α = 1/L, σ = 0, r₀ = 1 → bound = L exactly (L = 4).
        let cfg = ConvergenceProbeConfig {
            l_smooth: 4.0,
            sigma2: 0.0,
            alphas: vec![0.25],
            dim: 3,
            r0: 1.0,
            trials: 10,
            seed: 0,
        };
        let res = convergence_gap_probe(&cfg).unwrap();
        assert_eq!(res.bound_rhs, 4.0);
        // The only pre-step iterate is θ₀: gap = (L/2)·r₀² = 2 ≤ 4.
        assert_eq!(res.empirical_gap, 2.0);
        assert!(res.within_bound_99);

        // α = 2/L zeroes the weight: configuration error.
        let bad = ConvergenceProbeConfig {
            alphas: vec![0.5],
            ..cfg
        };
        assert!(convergence_gap_probe(&bad).is_err());
    }

    #[test]
    fn deterministic_run_stays_under_bound_at_every_horizon() {
        for t_max in 1..=8 {
            let cfg = ConvergenceProbeConfig {
                l_smooth: 2.0,
                sigma2: 0.0,
                alphas: vec![0.5; t_max],
                dim: 4,
                r0: 1.5,
                trials: 400,
                seed: 7,
            };
            let res = convergence_gap_probe(&cfg).unwrap();
            assert!(
                res.empirical_gap <= res.bound_rhs,
                "horizon {t_max}: {} > {}",
                res.empirical_gap,
                res.bound_rhs
            );
        }
    }

    #[test]
    fn noisy_quadratic_respects_the_bound_with_margin() {
        let cfg = ConvergenceProbeConfig {
            l_smooth: 3.0,
            sigma2: 0.5,
            alphas: vec![0.15; 25],
            dim: 6,
            r0: 1.0,
            trials: 1500,
            seed: 11,
        };
        let res = convergence_gap_probe(&cfg).unwrap();
        assert!(
            res.within_bound_99,
            "gap {} + margin vs bound {}",
            res.empirical_gap, res.bound_rhs
        );
    }

    fn evasion_report(name: &str, successes: &[bool]) -> AttackReport {
        let records: Vec<AttackRecord> = successes
            .iter()
            .enumerate()
            .map(|(id, &success)| AttackRecord::Evasion {
                id,
                success,
                linf: 0.01,
            })
            .collect();
        AttackReport::new(name, &serde_json::json!({}), records).unwrap()
    }

    #[test]
    fn overlap_histogram_matches_brute_force_counting() {
        let mut rng = Rng::seed_from_u64(13);
        let models = 4;
        let inputs = 50;
        let masks: Vec<Vec<bool>> = (0..models)
            .map(|_| (0..inputs).map(|_| rng.below(2) == 1).collect())
            .collect();
        let reports: Vec<AttackReport> = masks
            .iter()
            .enumerate()
            .map(|(m, mask)| evasion_report(&format!("m{m}"), mask))
            .collect();
        let refs: Vec<&AttackReport> = reports.iter().collect();
        let hist = vulnerability_overlap(&refs).unwrap();
        // Naive per-input recount.
        let mut expect = vec![0usize; models + 1];
        for i in 0..inputs {
            let k = masks.iter().filter(|m| m[i]).count();
            expect[k] += 1;
        }
        assert_eq!(hist.counts, expect);
        assert_eq!(hist.counts.iter().sum::<usize>(), inputs);
        assert_eq!(hist.models, models);
    }

    #[test]
    fn overlap_edge_cases() {
        // One model: all mass at k=1 equals its success count.
        let rep = evasion_report("solo", &[true, false, true, true]);
        let hist = vulnerability_overlap(&[&rep]).unwrap();
        assert_eq!(hist.counts[1], 3);
        assert_eq!(hist.counts[0], 1);
        // Two models with disjoint successes: zero mass at k=2.
        let a = evasion_report("a", &[true, false, false]);
        let b = evasion_report("b", &[false, true, false]);
        let hist = vulnerability_overlap(&[&a, &b]).unwrap();
        assert_eq!(hist.counts[2], 0);
        assert_eq!(hist.counts[1], 2);
        assert_eq!(hist.counts[0], 1);
        // Mismatched input sets are rejected.
        let c = evasion_report("c", &[true, false]);
        assert!(vulnerability_overlap(&[&a, &c]).is_err());
    }
}
