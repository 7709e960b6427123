//! Attack suite: white-box and black-box evasion, neural backdoors, model
//! extraction, and boundary-distance membership inference.
//!
//! Every attack emits typed per-input records; aggregate metrics are defined
//! once, in [`aggregates_from_records`], and recomputed from the records when
//! a run is verified — a report whose summary numbers cannot be reproduced
//! from its own records is treated as corrupt.

pub mod backdoor;
pub mod evasion;
pub mod extraction;
pub mod membership;

pub use backdoor::{
    optimize_trigger, select_target_neurons, stamp_trigger, trojan_inject, BackdoorConfig,
    BackdoorOutcome, Trigger,
};
pub use evasion::{nes_attack, pgd_attack, EvasionConfig, EvasionOutcome, NesConfig, NesOutcome};
pub use extraction::{knockoff_steal, StealConfig, StealOutcome, StealStrategy};
pub use membership::{
    auc_from_scores, hopskipjump_distance, membership_infer, HsjOutcome, MembershipConfig,
    MembershipOutcome,
};

use crate::error::Result;
use crate::nn::Network;
use crate::tensor::{argmax, softmax, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Label-or-probability query access (black-box surface).
pub trait Oracle {
    fn num_classes(&self) -> usize;
    /// (height, width, channels)
    fn input_dims(&self) -> (usize, usize, usize);
    fn probs(&self, x: &Tensor) -> Result<Vec<f64>>;
    fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.probs(x)?))
    }
}

/// Adds input gradients of per-class loss (white-box surface).
pub trait WhiteBox: Oracle {
    /// Cross-entropy of class `c` at `x` and its gradient w.r.t. `x`.
    fn class_loss_input_grad(&self, x: &Tensor, c: usize) -> Result<(f64, Tensor)>;
}

impl Oracle for Network {
    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        Network::input_dims(self)
    }

    fn probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        Network::probs(self, x)
    }

    fn predict(&self, x: &Tensor) -> Result<usize> {
        Network::predict(self, x)
    }
}

impl WhiteBox for Network {
    fn class_loss_input_grad(&self, x: &Tensor, c: usize) -> Result<(f64, Tensor)> {
        Network::class_loss_input_grad(self, x, c)
    }
}

/// An [`Oracle`] view over fixed logits-producing closures; handy for tests
/// and for wrapping counting/limiting layers around a model.
pub struct FnOracle<F> {
    pub classes: usize,
    pub dims: (usize, usize, usize),
    pub logits_fn: F,
}

impl<F: Fn(&Tensor) -> Vec<f64>> Oracle for FnOracle<F> {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(&(self.logits_fn)(x)))
    }
}

/// How evasion picks its goal class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "class", rename_all = "snake_case")]
pub enum TargetMode {
    /// Succeed by leaving the true class.
    Untargeted,
    /// Target the highest-probability class other than the true label.
    MostLikely,
    /// Target the lowest-probability class.
    LeastLikely,
    /// Target a fixed class index.
    Fixed(usize),
}

/// One per-input observation from an attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackRecord {
    Evasion {
        id: usize,
        success: bool,
        /// ℓ∞ distance actually used.
        linf: f64,
    },
    Backdoor {
        id: usize,
        clean_correct_before: bool,
        clean_correct_after: bool,
        stamped_hits_target: bool,
    },
    Steal {
        id: usize,
        victim_label: usize,
        surrogate_ce: f64,
        agree: bool,
    },
    Membership {
        id: usize,
        member: bool,
        /// Boundary distance; `None` when no adversarial point was found.
        distance: Option<f64>,
    },
}

/// The canonical aggregate definitions. Records of mixed kinds contribute to
/// their own metrics; an empty input yields an empty map.
pub fn aggregates_from_records(records: &[AttackRecord]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();

    let ev: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            AttackRecord::Evasion { success, .. } => Some(*success),
            _ => None,
        })
        .collect();
    if !ev.is_empty() {
        let hits = ev.iter().filter(|&&s| s).count();
        out.insert("asr".into(), hits as f64 / ev.len() as f64);
    }

    let bd: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            AttackRecord::Backdoor {
                clean_correct_before,
                clean_correct_after,
                stamped_hits_target,
                ..
            } => Some((*clean_correct_before, *clean_correct_after, *stamped_hits_target)),
            _ => None,
        })
        .collect();
    if !bd.is_empty() {
        let n = bd.len() as f64;
        let before = bd.iter().filter(|t| t.0).count() as f64 / n;
        let after = bd.iter().filter(|t| t.1).count() as f64 / n;
        let hits = bd.iter().filter(|t| t.2).count() as f64 / n;
        out.insert("clean_acc_before".into(), before);
        out.insert("clean_acc_after".into(), after);
        out.insert("backdoor_asr".into(), hits);
        out.insert("cad".into(), before - after);
    }

    let st: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            AttackRecord::Steal {
                surrogate_ce, agree, ..
            } => Some((*surrogate_ce, *agree)),
            _ => None,
        })
        .collect();
    if !st.is_empty() {
        let n = st.len() as f64;
        out.insert("ace".into(), st.iter().map(|t| t.0).sum::<f64>() / n);
        out.insert(
            "agreement".into(),
            st.iter().filter(|t| t.1).count() as f64 / n,
        );
    }

    let mut members = Vec::new();
    let mut nonmembers = Vec::new();
    let mut excluded = 0usize;
    let mut any_membership = false;
    for r in records {
        if let AttackRecord::Membership {
            member, distance, ..
        } = r
        {
            any_membership = true;
            match distance {
                Some(d) => {
                    if *member {
                        members.push(*d);
                    } else {
                        nonmembers.push(*d);
                    }
                }
                None => excluded += 1,
            }
        }
    }
    if any_membership {
        out.insert("membership_excluded".into(), excluded as f64);
        if !members.is_empty() && !nonmembers.is_empty() {
            out.insert(
                "membership_auc".into(),
                auc_from_scores(&members, &nonmembers),
            );
        }
    }

    out
}

/// A serializable attack run: configuration snapshot, per-input records,
/// and the aggregates derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub name: String,
    pub config: serde_json::Value,
    pub records: Vec<AttackRecord>,
    pub aggregates: BTreeMap<String, f64>,
}

impl AttackReport {
    pub fn new<C: Serialize>(name: &str, config: &C, records: Vec<AttackRecord>) -> Result<Self> {
        let aggregates = aggregates_from_records(&records);
        Ok(AttackReport {
            name: name.to_string(),
            config: serde_json::to_value(config)?,
            records,
            aggregates,
        })
    }

    /// True when the stored aggregates equal a fresh recomputation bit for
    /// bit. NaN never verifies.
    pub fn aggregates_verify(&self) -> bool {
        let fresh = aggregates_from_records(&self.records);
        fresh.len() == self.aggregates.len()
            && fresh.iter().all(|(k, v)| {
                self.aggregates
                    .get(k)
                    .is_some_and(|s| s.to_bits() == v.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregates_cover_every_record_kind() {
        let records = vec![
            AttackRecord::Evasion {
                id: 0,
                success: true,
                linf: 0.03,
            },
            AttackRecord::Evasion {
                id: 1,
                success: false,
                linf: 0.03,
            },
            AttackRecord::Backdoor {
                id: 0,
                clean_correct_before: true,
                clean_correct_after: true,
                stamped_hits_target: true,
            },
            AttackRecord::Backdoor {
                id: 1,
                clean_correct_before: true,
                clean_correct_after: false,
                stamped_hits_target: false,
            },
            AttackRecord::Steal {
                id: 0,
                victim_label: 2,
                surrogate_ce: 1.5,
                agree: true,
            },
            AttackRecord::Membership {
                id: 0,
                member: true,
                distance: Some(2.0),
            },
            AttackRecord::Membership {
                id: 1,
                member: false,
                distance: Some(1.0),
            },
            AttackRecord::Membership {
                id: 2,
                member: false,
                distance: None,
            },
        ];
        let agg = aggregates_from_records(&records);
        assert_eq!(agg["asr"], 0.5);
        assert_eq!(agg["clean_acc_before"], 1.0);
        assert_eq!(agg["clean_acc_after"], 0.5);
        assert_eq!(agg["cad"], 0.5);
        assert_eq!(agg["backdoor_asr"], 0.5);
        assert_eq!(agg["ace"], 1.5);
        assert_eq!(agg["membership_auc"], 1.0);
        assert_eq!(agg["membership_excluded"], 1.0);
    }

    #[test]
    fn report_round_trips_and_verifies() {
        let records = vec![AttackRecord::Evasion {
            id: 0,
            success: true,
            linf: 0.01,
        }];
        let rep = AttackReport::new("evasion", &serde_json::json!({"eps": 0.03}), records).unwrap();
        assert!(rep.aggregates_verify());
        let json = serde_json::to_string(&rep).unwrap();
        let back: AttackReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
        assert!(back.aggregates_verify());

        let mut tampered = rep.clone();
        *tampered.aggregates.get_mut("asr").unwrap() = 0.75;
        assert!(!tampered.aggregates_verify());
    }
}
