//! Label-only membership inference via boundary distance: inputs the model
//! memorized sit farther from its decision boundary, so the ℓ2 distance
//! found by a HopSkipJump probe separates members from non-members. The
//! separation is scored with the rank-based AUC (ties count one half).

use super::{AttackRecord, Oracle};
use crate::error::{Error, Result};
use crate::data::Dataset;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipConfig {
    /// Boundary-walk iterations per input.
    pub hsj_iters: usize,
    /// Hard cap on oracle queries per input.
    pub max_evals: usize,
    /// Base sample count for the gradient-direction estimate (grows √t).
    pub init_evals: usize,
    /// Random draws allowed when searching for any adversarial point.
    pub init_size: usize,
    pub seed: u64,
}

impl Default for MembershipConfig {
    fn default() -> Self {
        MembershipConfig {
            hsj_iters: 50,
            max_evals: 2500,
            init_evals: 100,
            init_size: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HsjOutcome {
    /// Best ℓ2 distance to a misclassified point; `Some(0)` when the input is
    /// already misclassified; `None` when no adversarial point was found.
    pub distance: Option<f64>,
    pub queries: usize,
    /// Best-so-far distance after each iteration (non-increasing).
    pub iter_distances: Vec<f64>,
}

/// Decision-boundary walk using label queries only: find any misclassified
/// point, bisect to the boundary, then alternate Monte-Carlo normal
/// estimation, a geometric step with backtracking, and re-projection.
pub fn hopskipjump_distance<M: Oracle + ?Sized>(
    model: &M,
    x: &Tensor,
    label: usize,
    cfg: &MembershipConfig,
    rng: &mut Rng,
) -> Result<HsjOutcome> {
    if cfg.max_evals == 0 || cfg.init_size == 0 || cfg.init_evals == 0 {
        return Err(Error::Config("HSJ budgets must be ≥ 1".into()));
    }
    let mut queries = 0usize;
    let is_adv = |z: &Tensor, q: &mut usize| -> Result<bool> {
        *q += 1;
        Ok(model.predict(z)? != label)
    };

    if is_adv(x, &mut queries)? {
        return Ok(HsjOutcome {
            distance: Some(0.0),
            queries,
            iter_distances: Vec::new(),
        });
    }

    // Find any adversarial point among uniform random images.
    let (c, h, w) = x.shape();
    let dim = (c * h * w) as f64;
    let mut init_rng = rng.split(1);
    let mut adv: Option<Tensor> = None;
    for _ in 0..cfg.init_size {
        if queries >= cfg.max_evals {
            break;
        }
        let mut cand = Tensor::zeros(c, h, w);
        for v in cand.data.iter_mut() {
            *v = init_rng.uniform();
        }
        if is_adv(&cand, &mut queries)? {
            adv = Some(cand);
            break;
        }
    }
    let Some(start) = adv else {
        return Ok(HsjOutcome {
            distance: None,
            queries,
            iter_distances: Vec::new(),
        });
    };

    // Project onto the boundary between the clean input and the start.
    let mut boundary = bisect(model, x, &start, label, &mut queries, cfg.max_evals)?;
    let mut best = boundary.l2_dist(x);
    let mut iter_distances = Vec::with_capacity(cfg.hsj_iters);
    let mut est_rng = rng.split(2);

    for t in 1..=cfg.hsj_iters {
        if queries >= cfg.max_evals {
            break;
        }
        let dist = boundary.l2_dist(x);
        // Sampling radius shrinks with the current distance.
        let delta = (dist / dim.sqrt()).max(1e-6);
        let b_t = ((cfg.init_evals as f64 * (t as f64).sqrt()) as usize)
            .min(cfg.max_evals.saturating_sub(queries));
        if b_t == 0 {
            break;
        }

        // Monte-Carlo estimate of the outward normal, with the mean-φ
        // baseline as control variate.
        let mut dirs: Vec<Tensor> = Vec::with_capacity(b_t);
        let mut phis: Vec<f64> = Vec::with_capacity(b_t);
        let mut u = Tensor::zeros(c, h, w);
        for _ in 0..b_t {
            est_rng.fill_normal(&mut u.data, 1.0);
            let un = u.l2_norm().max(1e-12);
            let mut probe = boundary.clone();
            probe.add_scaled(&u, delta / un);
            for v in probe.data.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            let phi = if is_adv(&probe, &mut queries)? { 1.0 } else { -1.0 };
            let mut dir = u.clone();
            dir.scale(1.0 / un);
            dirs.push(dir);
            phis.push(phi);
        }
        let phi_bar = phis.iter().sum::<f64>() / phis.len() as f64;
        let mut v = Tensor::zeros(c, h, w);
        for (dir, phi) in dirs.iter().zip(&phis) {
            v.add_scaled(dir, phi - phi_bar);
        }
        let vn = v.l2_norm();
        if vn > 1e-12 {
            v.scale(1.0 / vn);
            // Geometric step along the estimated normal, backtracking until
            // the candidate is still adversarial.
            let mut xi = dist / (t as f64).sqrt();
            let mut moved = false;
            for _ in 0..30 {
                if queries >= cfg.max_evals {
                    break;
                }
                let mut cand = boundary.clone();
                cand.add_scaled(&v, xi);
                for vv in cand.data.iter_mut() {
                    *vv = vv.clamp(0.0, 1.0);
                }
                if is_adv(&cand, &mut queries)? {
                    boundary = bisect(model, x, &cand, label, &mut queries, cfg.max_evals)?;
                    moved = true;
                    break;
                }
                xi /= 2.0;
            }
            if !moved {
                // Keep the current boundary point; re-tighten the projection.
                boundary = bisect(model, x, &boundary, label, &mut queries, cfg.max_evals)?;
            }
        }
        let d = boundary.l2_dist(x);
        if d < best {
            best = d;
        }
        iter_distances.push(best);
    }

    Ok(HsjOutcome {
        distance: Some(best),
        queries,
        iter_distances,
    })
}

/// Binary search along the segment [clean, adv]; returns an adversarial
/// point within 2⁻³⁰ of the boundary (in segment parameter). Stops early at
/// the query budget — the adversarial-side endpoint stays valid at any depth.
fn bisect<M: Oracle + ?Sized>(
    model: &M,
    clean: &Tensor,
    adv: &Tensor,
    label: usize,
    queries: &mut usize,
    budget: usize,
) -> Result<Tensor> {
    let mut lo = 0.0f64; // clean side
    let mut hi = 1.0f64; // adversarial side
    let blend = |a: f64| -> Tensor {
        let mut out = clean.clone();
        out.scale(1.0 - a);
        out.add_scaled(adv, a);
        out
    };
    for _ in 0..30 {
        if *queries >= budget {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let cand = blend(mid);
        *queries += 1;
        if model.predict(&cand)? != label {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(blend(hi))
}

/// Mann-Whitney AUC of `pos` scores over `neg` scores with average ranks for
/// ties — identical to the pairwise count with ½ per tie.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> f64 {
    assert!(!pos.is_empty() && !neg.is_empty(), "AUC needs both groups");
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("AUC scores must not be NaN"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn)
}

#[derive(Debug, Clone)]
pub struct MembershipOutcome {
    /// AUC of member distances over non-member distances; `None` when either
    /// group ended up empty after exclusions.
    pub auc: Option<f64>,
    /// Inputs skipped because no adversarial point was found.
    pub excluded: usize,
    pub mean_member_distance: f64,
    pub mean_nonmember_distance: f64,
    pub records: Vec<AttackRecord>,
    pub total_queries: usize,
}

/// Probe every member and non-member, then score the separation. Inputs with
/// no reachable adversarial point are excluded from the AUC but reported.
pub fn membership_infer<M: Oracle + ?Sized>(
    model: &M,
    members: &Dataset,
    nonmembers: &Dataset,
    cfg: &MembershipConfig,
) -> Result<MembershipOutcome> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Data("membership inference needs both groups".into()));
    }
    let mut records = Vec::with_capacity(members.len() + nonmembers.len());
    let mut member_d = Vec::new();
    let mut nonmember_d = Vec::new();
    let mut excluded = 0usize;
    let mut total_queries = 0usize;
    let mut base = Rng::seed_from_u64(cfg.seed);

    for (pass, ds) in [(true, members), (false, nonmembers)] {
        let offset = if pass { 0 } else { members.len() };
        for (i, (x, &y)) in ds.images.iter().zip(&ds.labels).enumerate() {
            let id = offset + i;
            let mut rng = base.split(id as u64 + 1);
            let out = hopskipjump_distance(model, x, y, cfg, &mut rng)?;
            total_queries += out.queries;
            match out.distance {
                Some(d) => {
                    if pass {
                        member_d.push(d);
                    } else {
                        nonmember_d.push(d);
                    }
                }
                None => excluded += 1,
            }
            records.push(AttackRecord::Membership {
                id,
                member: pass,
                distance: out.distance,
            });
        }
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let auc = if member_d.is_empty() || nonmember_d.is_empty() {
        None
    } else {
        Some(auc_from_scores(&member_d, &nonmember_d))
    };
    Ok(MembershipOutcome {
        auc,
        excluded,
        mean_member_distance: mean(&member_d),
        mean_nonmember_distance: mean(&nonmember_d),
        records,
        total_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::FnOracle;

    /// Pairwise O(n²) reference: count wins, half-credit ties.
    fn auc_pairwise(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for &p in pos {
            for &n in neg {
                if p > n {
                    s += 1.0;
                } else if p == n {
                    s += 0.5;
                }
            }
        }
        s / (pos.len() as f64 * neg.len() as f64)
    }

    #[test]
    fn rank_auc_equals_the_pairwise_count_exactly() {
        let mut rng = Rng::seed_from_u64(4);
        for trial in 0..50 {
            let np = 1 + rng.below(19) as usize;
            let nn = 1 + rng.below(19) as usize;
            // Quantized scores force plenty of ties.
            let draw = |r: &mut Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| (r.below(8) as f64) / 2.0).collect()
            };
            let pos = draw(&mut rng, np);
            let neg = draw(&mut rng, nn);
            let fast = auc_from_scores(&pos, &neg);
            let slow = auc_pairwise(&pos, &neg);
            assert_eq!(fast.to_bits(), slow.to_bits(), "trial {trial}");
        }
        assert_eq!(auc_from_scores(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc_from_scores(&[0.0, 1.0], &[2.0, 3.0]), 0.0);
        assert_eq!(auc_from_scores(&[1.0], &[1.0]), 0.5);
    }

    /// Linear two-class oracle: class 0 iff w·x + b ≥ 0.
    fn linear_oracle(
        w: Vec<f64>,
        b: f64,
        dims: (usize, usize, usize),
    ) -> FnOracle<impl Fn(&Tensor) -> Vec<f64>> {
        FnOracle {
            classes: 2,
            dims,
            logits_fn: move |x: &Tensor| {
                let z: f64 = w.iter().zip(&x.data).map(|(a, v)| a * v).sum::<f64>() + b;
                vec![z, 0.0]
            },
        }
    }

    #[test]
    fn hsj_recovers_the_linear_boundary_distance() {
        let d = 12;
        let w: Vec<f64> = (0..d).map(|i| 0.4 + 0.1 * i as f64).collect();
        let b = -0.5 * w.iter().sum::<f64>() + 0.8;
        let model = linear_oracle(w.clone(), b, (1, d, 1));
        let x = Tensor::from_vec(1, 1, d, vec![0.5; d]);
        let z: f64 = w.iter().map(|wi| wi * 0.5).sum::<f64>() + b;
        let w_norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let true_dist = z.abs() / w_norm;

        let cfg = MembershipConfig {
            hsj_iters: 30,
            max_evals: 2500,
            init_evals: 60,
            init_size: 100,
            seed: 0,
        };
        let mut rng = Rng::seed_from_u64(9);
        let out = hopskipjump_distance(&model, &x, 0, &cfg, &mut rng).unwrap();
        let got = out.distance.expect("boundary reachable");
        let rel = (got - true_dist).abs() / true_dist;
        assert!(rel < 0.05, "got {got}, true {true_dist}, rel {rel}");
        assert!(out.queries <= cfg.max_evals);
        // Best-so-far trace never increases.
        assert!(out
            .iter_distances
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn misclassified_inputs_cost_one_query_and_report_zero() {
        let model = linear_oracle(vec![1.0, 1.0], -2.0, (1, 2, 1));
        let x = Tensor::from_vec(1, 1, 2, vec![0.5, 0.5]); // z < 0 ⇒ class 1
        let mut rng = Rng::seed_from_u64(1);
        let out =
            hopskipjump_distance(&model, &x, 0, &MembershipConfig::default(), &mut rng).unwrap();
        assert_eq!(out.distance, Some(0.0));
        assert_eq!(out.queries, 1);
    }

    #[test]
    fn unreachable_boundary_reports_none() {
        let constant = FnOracle {
            classes: 2,
            dims: (1, 3, 1),
            logits_fn: |_: &Tensor| vec![5.0, 0.0],
        };
        let x = Tensor::from_vec(1, 1, 3, vec![0.2, 0.4, 0.6]);
        let cfg = MembershipConfig {
            init_size: 25,
            ..Default::default()
        };
        let mut rng = Rng::seed_from_u64(2);
        let out = hopskipjump_distance(&constant, &x, 0, &cfg, &mut rng).unwrap();
        assert_eq!(out.distance, None);
        assert_eq!(out.queries, 1 + 25);
    }

    #[test]
    fn membership_outcome_matches_record_aggregates() {
        // Boundary crosses the unit cube; distances differ by the bias each
        // group sees, giving a clean separation.
        let d = 4;
        let model = linear_oracle(vec![1.0; d], -1.2, (1, d, 1));
        let mk = |vals: Vec<f64>| Dataset {
            name: "probe".into(),
            num_classes: 2,
            dims: (1, d, 1),
            images: vals
                .iter()
                .map(|&v| Tensor::from_vec(1, 1, d, vec![v; d]))
                .collect(),
            labels: vec![0; vals.len()],
        };
        // Members sit deeper inside class 0 than non-members.
        let members = mk(vec![0.9, 0.85, 0.8]);
        let nonmembers = mk(vec![0.4, 0.45, 0.5]);
        let cfg = MembershipConfig {
            hsj_iters: 10,
            max_evals: 600,
            init_evals: 30,
            init_size: 50,
            seed: 3,
        };
        let out = membership_infer(&model, &members, &nonmembers, &cfg).unwrap();
        assert_eq!(out.records.len(), 6);
        let agg = crate::attacks::aggregates_from_records(&out.records);
        assert_eq!(agg["membership_auc"], out.auc.unwrap());
        assert_eq!(agg["membership_excluded"], out.excluded as f64);
        // Deeper members ⇒ larger distances ⇒ AUC near 1.
        assert!(out.auc.unwrap() > 0.8, "auc {:?}", out.auc);
        // Deterministic.
        let again = membership_infer(&model, &members, &nonmembers, &cfg).unwrap();
        assert_eq!(again.auc, out.auc);
    }
}
