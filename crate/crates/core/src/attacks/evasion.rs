//! Evasion attacks: projected gradient descent (white-box) and a
//! finite-sample natural-evolution-strategies estimator of the same loop
//! (black-box, score-based).
//!
//! Both attackers keep every iterate inside the ℓ∞ ball of radius `epsilon`
//! around the original input *and* inside the pixel range `[0, 1]`; outcomes
//! carry the realized ℓ∞ distance so reports can re-check the invariant.

use super::{Oracle, TargetMode, WhiteBox};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvasionConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub target_mode: TargetMode,
}

impl Default for EvasionConfig {
    fn default() -> Self {
        EvasionConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            max_iters: 7,
            restarts: 5,
            target_mode: TargetMode::Untargeted,
        }
    }
}

impl EvasionConfig {
    /// Push toward the runner-up class (short horizon).
    pub fn most_likely() -> Self {
        EvasionConfig {
            max_iters: 3,
            target_mode: TargetMode::MostLikely,
            ..Default::default()
        }
    }

    /// Push toward the least probable class (longer horizon).
    pub fn least_likely() -> Self {
        EvasionConfig {
            max_iters: 7,
            target_mode: TargetMode::LeastLikely,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("epsilon and alpha must be ≥ 0".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// The attack's concrete goal for one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Goal {
    Escape { label: usize },
    Reach { target: usize },
}

impl Goal {
    fn satisfied(&self, pred: usize) -> bool {
        match self {
            Goal::Escape { label } => pred != *label,
            Goal::Reach { target } => pred == *target,
        }
    }
}

fn resolve_goal<M: Oracle + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    mode: TargetMode,
) -> Result<Goal> {
    Ok(match mode {
        TargetMode::Untargeted => Goal::Escape { label },
        TargetMode::Fixed(t) => {
            if t == label {
                return Err(Error::Config("target class equals the true label".into()));
            }
            if t >= model.num_classes() {
                return Err(Error::Config(format!("target class {t} out of range")));
            }
            Goal::Reach { target: t }
        }
        TargetMode::MostLikely | TargetMode::LeastLikely => {
            let p = model.probs(x)?;
            let mut best: Option<(f64, usize)> = None;
            for (c, &pc) in p.iter().enumerate() {
                if c == label {
                    continue;
                }
                let better = match (&best, mode) {
                    (None, _) => true,
                    (Some((bp, _)), TargetMode::MostLikely) => pc > *bp,
                    (Some((bp, _)), TargetMode::LeastLikely) => pc < *bp,
                    _ => unreachable!(),
                };
                if better {
                    best = Some((pc, c));
                }
            }
            let (_, t) = best.ok_or_else(|| Error::Config("need ≥ 2 classes".into()))?;
            Goal::Reach { target: t }
        }
    })
}

#[derive(Debug, Clone)]
pub struct EvasionOutcome {
    pub adversarial: Tensor,
    pub success: bool,
    /// The resolved goal class for targeted modes.
    pub target: Option<usize>,
    /// Realized ℓ∞ distance from the original input.
    pub linf: f64,
    pub restarts_tried: usize,
}

/// Projected gradient descent in the ℓ∞ ball: random start inside the ball,
/// signed gradient steps, projection after every step. Restarts stop at the
/// first success; otherwise the highest-objective iterate is returned.
pub fn pgd_attack<M: WhiteBox + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    cfg: &EvasionConfig,
    rng: &mut Rng,
) -> Result<EvasionOutcome> {
    cfg.validate()?;
    if label >= model.num_classes() {
        return Err(Error::Config(format!("label {label} out of range")));
    }
    let goal = resolve_goal(model, x, label, cfg.target_mode)?;

    let mut best: Option<(f64, Tensor, bool)> = None;
    let mut restarts_tried = 0;
    for r in 0..cfg.restarts {
        restarts_tried = r + 1;
        let mut stream = rng.split(r as u64 + 1);
        let mut xa = x.clone();
        for v in xa.data.iter_mut() {
            *v = (*v + stream.uniform_in(-cfg.epsilon, cfg.epsilon)).clamp(0.0, 1.0);
        }
        for _ in 0..cfg.max_iters {
            let (ascend, class) = match goal {
                Goal::Escape { label } => (true, label),
                Goal::Reach { target } => (false, target),
            };
            let (_, g) = model.class_loss_input_grad(&xa, class)?;
            let step = if ascend { cfg.alpha } else { -cfg.alpha };
            for ((v, &gv), &xo) in xa.data.iter_mut().zip(&g.data).zip(&x.data) {
                *v += step * gv.signum() * if gv == 0.0 { 0.0 } else { 1.0 };
                *v = v.clamp(xo - cfg.epsilon, xo + cfg.epsilon).clamp(0.0, 1.0);
            }
        }
        let pred = model.predict(&xa)?;
        let success = goal.satisfied(pred);
        let objective = match goal {
            Goal::Escape { label } => model.class_loss_input_grad(&xa, label)?.0,
            Goal::Reach { target } => -model.class_loss_input_grad(&xa, target)?.0,
        };
        let better = best.as_ref().is_none_or(|(s, _, _)| objective > *s);
        if better {
            best = Some((objective, xa, success));
        }
        if success {
            break;
        }
    }
    let (_, adversarial, success) = best.expect("restarts ≥ 1");
    let linf = linf_dist(&adversarial, x);
    debug_assert!(linf <= cfg.epsilon + 1e-12);
    debug_assert!(adversarial.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    Ok(EvasionOutcome {
        adversarial,
        success,
        target: match goal {
            Goal::Escape { .. } => None,
            Goal::Reach { target } => Some(target),
        },
        linf,
        restarts_tried,
    })
}

fn linf_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NesConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub max_iters: usize,
    /// Queries per gradient estimate; must be even (antithetic pairs).
    pub n_samples: usize,
    /// Smoothing radius, in input units (the pixel range is 1.0).
    pub sigma: f64,
    /// Hard cap on oracle queries for the whole attack.
    pub query_budget: usize,
    pub target_mode: TargetMode,
}

impl Default for NesConfig {
    fn default() -> Self {
        NesConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            max_iters: 20,
            n_samples: 50,
            sigma: 0.001,
            query_budget: 2000,
            target_mode: TargetMode::Untargeted,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NesOutcome {
    pub adversarial: Tensor,
    pub success: bool,
    pub target: Option<usize>,
    pub linf: f64,
    pub queries_used: usize,
    /// True when the query budget ran out before the iteration cap.
    pub budget_exhausted: bool,
    pub iters_run: usize,
}

/// Antithetic Gaussian gradient estimate of a scalar field:
/// ĝ = (1/(σ·n)) Σ_i [f(x + σuᵢ) − f(x − σuᵢ)] uᵢ over n/2 pairs.
pub fn nes_gradient_estimate<F: FnMut(&Tensor) -> Result<f64>>(
    mut f: F,
    x: &Tensor,
    sigma: f64,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if n_samples == 0 || n_samples % 2 != 0 {
        return Err(Error::Config(format!(
            "n_samples must be a positive even number, got {n_samples}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Config("sigma must be > 0".into()));
    }
    let (c, h, w) = x.shape();
    let mut g = Tensor::zeros(c, h, w);
    let mut u = Tensor::zeros(c, h, w);
    for _ in 0..n_samples / 2 {
        rng.fill_normal(&mut u.data, 1.0);
        let mut xp = x.clone();
        xp.add_scaled(&u, sigma);
        let mut xm = x.clone();
        xm.add_scaled(&u, -sigma);
        let diff = f(&xp)? - f(&xm)?;
        g.add_scaled(&u, diff);
    }
    g.scale(1.0 / (sigma * n_samples as f64));
    Ok(g)
}

/// Score-based black-box evasion: the PGD loop with NES gradient estimates.
/// Stops early — reporting partial progress — when the query budget is hit.
pub fn nes_attack<M: Oracle + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    cfg: &NesConfig,
    rng: &mut Rng,
) -> Result<NesOutcome> {
    if cfg.n_samples == 0 || cfg.n_samples % 2 != 0 {
        return Err(Error::Config(format!(
            "n_samples must be a positive even number, got {}",
            cfg.n_samples
        )));
    }
    if cfg.epsilon < 0.0 || cfg.alpha < 0.0 {
        return Err(Error::Config("epsilon and alpha must be ≥ 0".into()));
    }
    if label >= model.num_classes() {
        return Err(Error::Config(format!("label {label} out of range")));
    }
    let mut queries = 0usize;

    // Goal resolution costs one probe for the likelihood-ranked modes.
    if matches!(cfg.target_mode, TargetMode::MostLikely | TargetMode::LeastLikely) {
        queries += 1;
    }
    let goal = resolve_goal(model, x, label, cfg.target_mode)?;
    // Maximized objective: leave the true class / approach the target class.
    let objective = |m: &M, xq: &Tensor, q: &mut usize| -> Result<f64> {
        *q += 1;
        let p = m.probs(xq)?;
        Ok(match goal {
            Goal::Escape { label } => -p[label].max(1e-300).ln(),
            Goal::Reach { target } => p[target].max(1e-300).ln(),
        })
    };

    let mut xa = x.clone();
    let mut stream = rng.split(0xE5);
    for v in xa.data.iter_mut() {
        *v = (*v + stream.uniform_in(-cfg.epsilon, cfg.epsilon)).clamp(0.0, 1.0);
    }
    let mut success = false;
    let mut budget_exhausted = false;
    let mut iters_run = 0;

    for _ in 0..cfg.max_iters {
        // One success probe plus a full estimate must fit in the budget.
        if queries + 1 > cfg.query_budget {
            budget_exhausted = true;
            break;
        }
        queries += 1;
        if goal.satisfied(model.predict(&xa)?) {
            success = true;
            break;
        }
        if queries + cfg.n_samples > cfg.query_budget {
            budget_exhausted = true;
            break;
        }
        let g = nes_gradient_estimate(
            |xq| objective(model, xq, &mut queries),
            &xa,
            cfg.sigma,
            cfg.n_samples,
            &mut stream,
        )?;
        for ((v, &gv), &xo) in xa.data.iter_mut().zip(&g.data).zip(&x.data) {
            *v += cfg.alpha * gv.signum() * if gv == 0.0 { 0.0 } else { 1.0 };
            *v = v.clamp(xo - cfg.epsilon, xo + cfg.epsilon).clamp(0.0, 1.0);
        }
        iters_run += 1;
    }
    if !success && !budget_exhausted && queries < cfg.query_budget {
        queries += 1;
        success = goal.satisfied(model.predict(&xa)?);
    }

    let linf = linf_dist(&xa, x);
    debug_assert!(linf <= cfg.epsilon + 1e-12);
    Ok(NesOutcome {
        adversarial: xa,
        success,
        target: match goal {
            Goal::Escape { .. } => None,
            Goal::Reach { target } => Some(target),
        },
        linf,
        queries_used: queries,
        budget_exhausted,
        iters_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::FnOracle;
    use std::cell::Cell;

    /// Two-class logistic model: logits = (w·x + b, 0).
    struct Logistic {
        w: Vec<f64>,
        b: f64,
        dims: (usize, usize, usize),
    }

    impl Logistic {
        fn z(&self, x: &Tensor) -> f64 {
            self.w.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f64>() + self.b
        }
    }

    impl Oracle for Logistic {
        fn num_classes(&self) -> usize {
            2
        }

        fn input_dims(&self) -> (usize, usize, usize) {
            self.dims
        }

        fn probs(&self, x: &Tensor) -> Result<Vec<f64>> {
            let z = self.z(x);
            let p0 = 1.0 / (1.0 + (-z).exp());
            Ok(vec![p0, 1.0 - p0])
        }
    }

    impl WhiteBox for Logistic {
        fn class_loss_input_grad(&self, x: &Tensor, c: usize) -> Result<(f64, Tensor)> {
            let p = self.probs(x)?;
            let loss = -p[c].max(1e-300).ln();
            // d(-ln p_c)/dz, with dz/dx = w.
            let dz = if c == 0 { -(1.0 - p[0]) } else { p[0] };
            let (ci, h, w) = x.shape();
            let mut g = Tensor::zeros(ci, h, w);
            for (gi, &wi) in g.data.iter_mut().zip(&self.w) {
                *gi = dz * wi;
            }
            Ok((loss, g))
        }
    }

    fn mid_input(d: usize) -> Tensor {
        Tensor::from_vec(1, 1, d, vec![0.5; d])
    }

    #[test]
    fn pgd_succeeds_exactly_when_the_margin_is_reachable() {
        let d = 8;
        let w = vec![1.0; d];
        // At x = 0.5·1, z = d/2 + b. Full-strength PGD reaches z − ε·‖w‖₁.
        let eps = 0.05;
        let reachable = Logistic {
            w: w.clone(),
            b: -(0.5 * d as f64) + eps * d as f64 * 0.6, // margin 0.24 < ε‖w‖₁ = 0.4
            dims: (1, d, 1),
        };
        let unreachable = Logistic {
            w,
            b: -(0.5 * d as f64) + eps * d as f64 * 1.4, // margin 0.56 > 0.4
            dims: (1, d, 1),
        };
        let cfg = EvasionConfig {
            epsilon: eps,
            alpha: eps / 4.0,
            max_iters: 10,
            restarts: 3,
            target_mode: TargetMode::Untargeted,
        };
        let x = mid_input(d);
        let mut rng = Rng::seed_from_u64(1);
        let out = pgd_attack(&reachable, &x, 0, &cfg, &mut rng).unwrap();
        assert!(out.success);
        assert!(out.linf <= eps + 1e-12);
        let mut rng = Rng::seed_from_u64(1);
        let out = pgd_attack(&unreachable, &x, 0, &cfg, &mut rng).unwrap();
        assert!(!out.success);
        assert!(out.linf <= eps + 1e-12);
    }

    #[test]
    fn pgd_respects_ball_and_pixel_range_even_near_the_boundary() {
        let d = 6;
        let model = Logistic {
            w: vec![3.0, -2.0, 1.0, 0.5, -0.5, 2.0],
            b: 0.1,
            dims: (1, d, 1),
        };
        // Input hugging the pixel bounds.
        let x = Tensor::from_vec(1, 1, d, vec![0.999, 0.001, 1.0, 0.0, 0.5, 0.98]);
        let cfg = EvasionConfig {
            epsilon: 0.1,
            alpha: 0.05,
            max_iters: 5,
            restarts: 4,
            target_mode: TargetMode::Untargeted,
        };
        let mut rng = Rng::seed_from_u64(7);
        let out = pgd_attack(&model, &x, 0, &cfg, &mut rng).unwrap();
        for (a, o) in out.adversarial.data.iter().zip(&x.data) {
            assert!((a - o).abs() <= cfg.epsilon + 1e-12);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn pgd_is_deterministic_in_the_rng_seed() {
        let d = 5;
        let model = Logistic {
            w: vec![1.0, -1.0, 2.0, 0.3, -0.7],
            b: 0.2,
            dims: (1, d, 1),
        };
        let x = mid_input(d);
        let cfg = EvasionConfig::default();
        let a = pgd_attack(&model, &x, 0, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
        let b = pgd_attack(&model, &x, 0, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.adversarial.data, b.adversarial.data);
        assert_eq!(a.success, b.success);
        // A single step keeps the random start visible in the output, so
        // different seeds must land on different points (a long horizon can
        // drive every start into the same ball corner on a linear model).
        let short = EvasionConfig {
            max_iters: 1,
            restarts: 1,
            ..cfg
        };
        let p = pgd_attack(&model, &x, 0, &short, &mut Rng::seed_from_u64(3)).unwrap();
        let q = pgd_attack(&model, &x, 0, &short, &mut Rng::seed_from_u64(4)).unwrap();
        assert!(p.adversarial.data != q.adversarial.data);
    }

    /// Three-class linear oracle for target resolution.
    struct ThreeClass;

    impl Oracle for ThreeClass {
        fn num_classes(&self) -> usize {
            3
        }

        fn input_dims(&self) -> (usize, usize, usize) {
            (1, 2, 1)
        }

        fn probs(&self, _x: &Tensor) -> Result<Vec<f64>> {
            Ok(vec![0.6, 0.3, 0.1])
        }
    }

    impl WhiteBox for ThreeClass {
        fn class_loss_input_grad(&self, x: &Tensor, c: usize) -> Result<(f64, Tensor)> {
            let p = self.probs(x)?;
            Ok((-p[c].ln(), Tensor::zeros(1, 1, 2)))
        }
    }

    #[test]
    fn target_modes_resolve_ranked_classes() {
        let x = Tensor::zeros(1, 1, 2);
        let mk = |mode| EvasionConfig {
            max_iters: 0,
            restarts: 1,
            target_mode: mode,
            ..Default::default()
        };
        let mut rng = Rng::seed_from_u64(0);
        let out = pgd_attack(&ThreeClass, &x, 0, &mk(TargetMode::MostLikely), &mut rng).unwrap();
        assert_eq!(out.target, Some(1));
        let out = pgd_attack(&ThreeClass, &x, 0, &mk(TargetMode::LeastLikely), &mut rng).unwrap();
        assert_eq!(out.target, Some(2));
        let out = pgd_attack(&ThreeClass, &x, 1, &mk(TargetMode::MostLikely), &mut rng).unwrap();
        assert_eq!(out.target, Some(0));
        assert!(pgd_attack(&ThreeClass, &x, 1, &mk(TargetMode::Fixed(1)), &mut rng).is_err());
        assert!(pgd_attack(&ThreeClass, &x, 1, &mk(TargetMode::Fixed(9)), &mut rng).is_err());
    }

    #[test]
    fn nes_estimate_recovers_a_linear_gradient() {
        let d = 16;
        let mut rng = Rng::seed_from_u64(11);
        let c: Vec<f64> = (0..d).map(|i| ((i as f64) - 7.5) / 4.0).collect();
        let x = mid_input(d);
        let cv = c.clone();
        let g = nes_gradient_estimate(
            |xq| Ok(cv.iter().zip(&xq.data).map(|(a, b)| a * b).sum::<f64>()),
            &x,
            0.001,
            200,
            &mut rng,
        )
        .unwrap();
        let dot: f64 = g.data.iter().zip(&c).map(|(a, b)| a * b).sum();
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gn = g.l2_norm();
        let cos = dot / (cn * gn);
        assert!(cos > 0.9, "cosine {cos}");
        // Odd sample counts are rejected.
        assert!(nes_gradient_estimate(|_| Ok(0.0), &x, 0.001, 5, &mut rng).is_err());
    }

    #[test]
    fn nes_attack_flips_the_logistic_model_within_budget() {
        let d = 8;
        let model = Logistic {
            w: vec![1.0; d],
            b: -(0.5 * d as f64) + 0.1,
            dims: (1, d, 1),
        };
        let cfg = NesConfig {
            epsilon: 0.06,
            alpha: 0.015,
            max_iters: 12,
            n_samples: 30,
            sigma: 0.001,
            query_budget: 1000,
            target_mode: TargetMode::Untargeted,
        };
        let x = mid_input(d);
        let mut rng = Rng::seed_from_u64(2);
        let out = nes_attack(&model, &x, 0, &cfg, &mut rng).unwrap();
        assert!(out.success, "queries {}", out.queries_used);
        assert!(out.queries_used <= cfg.query_budget);
        assert!(out.linf <= cfg.epsilon + 1e-12);
    }

    #[test]
    fn nes_attack_respects_the_query_budget_exactly() {
        let calls = Cell::new(0usize);
        let oracle = FnOracle {
            classes: 2,
            dims: (1, 4, 1),
            logits_fn: |x: &Tensor| {
                calls.set(calls.get() + 1);
                vec![x.data.iter().sum::<f64>(), 0.0]
            },
        };
        let cfg = NesConfig {
            max_iters: 100,
            n_samples: 10,
            query_budget: 37,
            ..Default::default()
        };
        let x = mid_input(4);
        let mut rng = Rng::seed_from_u64(5);
        let out = nes_attack(&oracle, &x, 0, &cfg, &mut rng).unwrap();
        assert!(out.queries_used <= 37);
        assert_eq!(calls.get(), out.queries_used);
        assert!(out.budget_exhausted || out.success);

        // Odd n_samples is a configuration error.
        let bad = NesConfig {
            n_samples: 9,
            ..Default::default()
        };
        assert!(nes_attack(&oracle, &x, 0, &bad, &mut rng).is_err());
    }
}
