//! Neural backdoor injection without access to the victim's training set:
//! pick the penultimate units most strongly wired to the target class, shape
//! a small bottom-right trigger patch that excites them, then fine-tune the
//! classifier head on a mixture of clean behavior and trigger→target.

use super::AttackRecord;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorConfig {
    pub trigger_h: usize,
    pub trigger_w: usize,
    /// Blend weight kept by the original image: x' = t·x + (1−t)·trigger.
    pub transparency: f64,
    /// How many penultimate units the trigger is shaped to excite.
    pub n_neuron: usize,
    pub preprocess_lr: f64,
    pub preprocess_iters: usize,
    /// Class every stamped input should fall into.
    pub target: usize,
    /// Weight of the trigger→target term in the fine-tune loss.
    pub lambda: f64,
    /// Head fine-tuning schedule (phase two).
    pub finetune: TrainConfig,
}

impl Default for BackdoorConfig {
    fn default() -> Self {
        BackdoorConfig {
            trigger_h: 3,
            trigger_w: 3,
            transparency: 0.7,
            n_neuron: 2,
            preprocess_lr: 0.015,
            preprocess_iters: 20,
            target: 0,
            lambda: 1.0,
            finetune: TrainConfig {
                epochs: 4,
                batch_size: 32,
                learning_rate: 0.01,
                ..Default::default()
            },
        }
    }
}

/// A trigger patch anchored at (y0, x0), blended with weight
/// `transparency` on the host image.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub patch: Tensor,
    pub y0: usize,
    pub x0: usize,
    pub transparency: f64,
}

/// Blend the trigger into a copy of `x`; pixels outside the patch are
/// untouched. Blending two in-gamut values stays in gamut.
pub fn stamp_trigger(x: &Tensor, trig: &Trigger) -> Result<Tensor> {
    let (c, h, w) = x.shape();
    let (pc, ph, pw) = trig.patch.shape();
    if pc != c || trig.y0 + ph > h || trig.x0 + pw > w {
        return Err(Error::Shape(format!(
            "trigger {:?}@({},{}) does not fit image {:?}",
            trig.patch.shape(),
            trig.y0,
            trig.x0,
            x.shape()
        )));
    }
    let t = trig.transparency;
    let mut out = x.clone();
    for ch in 0..c {
        for dy in 0..ph {
            for dx in 0..pw {
                let v = out.at_mut(ch, trig.y0 + dy, trig.x0 + dx);
                *v = t * *v + (1.0 - t) * trig.patch.at(ch, dy, dx);
            }
        }
    }
    Ok(out)
}

/// Indices of the `n` entries of `row` with the largest magnitude
/// (ties broken toward the lower index), ascending.
pub fn select_target_neurons(row: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > row.len() {
        return Err(Error::Config(format!(
            "n_neuron {n} out of range for a {}-unit layer",
            row.len()
        )));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .abs()
            .partial_cmp(&row[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = idx[..n].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Gradient-ascend the patch pixels to maximize the mean summed activation of
/// the selected penultimate units over the stamped `hosts`. Shaping against
/// real carrier images keeps the excitation alive under the per-image channel
/// statistics that normalization layers recompute; with no hosts supplied the
/// ascent falls back to a single mid-gray canvas. Returns the trigger and the
/// (before, after) mean activation values.
pub fn optimize_trigger(
    network: &Network,
    hosts: &[Tensor],
    selected: &[usize],
    cfg: &BackdoorConfig,
) -> Result<(Trigger, f64, f64)> {
    let (h, w, c) = network.input_dims();
    if cfg.trigger_h > h || cfg.trigger_w > w {
        return Err(Error::Config("trigger larger than the input".into()));
    }
    if !(0.0..=1.0).contains(&cfg.transparency) {
        return Err(Error::Config("transparency must lie in [0, 1]".into()));
    }
    let (_, d) = network.classifier_weights();
    let mut sel = vec![0.0; d];
    for &i in selected {
        if i >= d {
            return Err(Error::Config(format!("neuron {i} out of range")));
        }
        sel[i] = 1.0;
    }
    let y0 = h - cfg.trigger_h;
    let x0 = w - cfg.trigger_w;

    let gray = {
        let mut canvas = Tensor::zeros(c, h, w);
        for v in canvas.data.iter_mut() {
            *v = 0.5;
        }
        vec![canvas]
    };
    let carriers: &[Tensor] = if hosts.is_empty() { &gray } else { hosts };
    let inv = 1.0 / carriers.len() as f64;
    // The blend keeps (1−γ) of the patch, so that factor carries into ∂x'/∂r.
    let gain = 1.0 - cfg.transparency;

    let mut trig = Trigger {
        patch: Tensor::zeros(c, cfg.trigger_h, cfg.trigger_w),
        y0,
        x0,
        transparency: cfg.transparency,
    };
    for v in trig.patch.data.iter_mut() {
        *v = 0.5;
    }

    let mean_activation = |trig: &Trigger| -> Result<f64> {
        let mut total = 0.0;
        for host in carriers {
            let stamped = stamp_trigger(host, trig)?;
            total += network.penultimate_selection_input_grad(&stamped, &sel)?.0;
        }
        Ok(total * inv)
    };

    let before = mean_activation(&trig)?;
    for _ in 0..cfg.preprocess_iters {
        let mut step = Tensor::zeros(c, cfg.trigger_h, cfg.trigger_w);
        for host in carriers {
            let stamped = stamp_trigger(host, &trig)?;
            let (_, g) = network.penultimate_selection_input_grad(&stamped, &sel)?;
            for ch in 0..c {
                for dy in 0..cfg.trigger_h {
                    for dx in 0..cfg.trigger_w {
                        *step.at_mut(ch, dy, dx) += gain * g.at(ch, y0 + dy, x0 + dx) * inv;
                    }
                }
            }
        }
        for (v, &g) in trig.patch.data.iter_mut().zip(&step.data) {
            *v = (*v + cfg.preprocess_lr * g).clamp(0.0, 1.0);
        }
    }
    let after = mean_activation(&trig)?;
    Ok((trig, before, after))
}

#[derive(Debug, Clone)]
pub struct BackdoorOutcome {
    pub network: Network,
    pub trigger: Trigger,
    pub selected_neurons: Vec<usize>,
    /// Selected-unit activation at the gray canvas before/after shaping.
    pub activation_before: f64,
    pub activation_after: f64,
    pub clean_acc_before: f64,
    pub clean_acc_after: f64,
    /// Fraction of stamped test inputs classified as the target.
    pub asr: f64,
    /// Clean accuracy drop caused by the injection.
    pub cad: f64,
    pub records: Vec<AttackRecord>,
}

/// Run the full injection against a trained network. `tune_data` stands in
/// for the attacker's substitute dataset; `test_data` is only used for
/// evaluation.
pub fn trojan_inject(
    network: &Network,
    tune_data: &Dataset,
    test_data: &Dataset,
    cfg: &BackdoorConfig,
) -> Result<BackdoorOutcome> {
    if cfg.target >= network.num_classes() {
        return Err(Error::Config(format!("target class {} out of range", cfg.target)));
    }
    if tune_data.is_empty() || test_data.is_empty() {
        return Err(Error::Data("backdoor needs tuning and test data".into()));
    }
    if cfg.lambda < 0.0 {
        return Err(Error::Config("lambda must be ≥ 0".into()));
    }

    // Phase 1: wiring + trigger shaping against a slice of the tuning set.
    let (w_all, d) = network.classifier_weights();
    let row = &w_all[cfg.target * d..(cfg.target + 1) * d];
    let selected = select_target_neurons(row, cfg.n_neuron)?;
    let hosts = tune_data.subsample(32, 0x7716).images;
    let (trigger, act_before, act_after) = optimize_trigger(network, &hosts, &selected, cfg)?;

    // Baseline clean predictions.
    let mut before_correct = Vec::with_capacity(test_data.len());
    for (x, &y) in test_data.images.iter().zip(&test_data.labels) {
        before_correct.push(network.predict(x)? == y);
    }
    let clean_acc_before =
        before_correct.iter().filter(|&&b| b).count() as f64 / test_data.len() as f64;

    // Phase 2: head-only fine-tune on clean + stamped→target mixture.
    let mut tuned = network.clone();
    finetune_head(&mut tuned, tune_data, &trigger, cfg)?;

    // Evaluation.
    let mut records = Vec::with_capacity(test_data.len());
    let mut after_hits = 0usize;
    let mut asr_hits = 0usize;
    for (i, (x, &y)) in test_data.images.iter().zip(&test_data.labels).enumerate() {
        let clean_correct_after = tuned.predict(x)? == y;
        after_hits += clean_correct_after as usize;
        let stamped = stamp_trigger(x, &trigger)?;
        let stamped_hits_target = tuned.predict(&stamped)? == cfg.target;
        asr_hits += stamped_hits_target as usize;
        records.push(AttackRecord::Backdoor {
            id: i,
            clean_correct_before: before_correct[i],
            clean_correct_after,
            stamped_hits_target,
        });
    }
    let n = test_data.len() as f64;
    let clean_acc_after = after_hits as f64 / n;
    let asr = asr_hits as f64 / n;
    Ok(BackdoorOutcome {
        network: tuned,
        trigger,
        selected_neurons: selected,
        activation_before: act_before,
        activation_after: act_after,
        clean_acc_before,
        clean_acc_after,
        asr,
        cad: clean_acc_before - clean_acc_after,
        records,
    })
}

/// SGD with momentum on the classifier head only; every example contributes
/// its clean term and its stamped→target term weighted by `lambda`.
fn finetune_head(
    network: &mut Network,
    data: &Dataset,
    trigger: &Trigger,
    cfg: &BackdoorConfig,
) -> Result<()> {
    let tc = &cfg.finetune;
    if tc.batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let head: Vec<usize> = network
        .params
        .tensors
        .iter()
        .enumerate()
        .filter(|(_, t)| t.name == "fc.w" || t.name == "fc.b")
        .map(|(i, _)| i)
        .collect();
    let mut shuffle_rng = crate::rng::Rng::seed_from_u64(tc.seed).split(0x7903);
    let mut velocity = network.params.zero_grads();

    for epoch in 0..tc.epochs {
        let lr = crate::trainer::cosine_lr(tc.learning_rate, epoch, tc.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(tc.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let mut acc = network.params.zero_grads();
            for &i in batch {
                let (_, g_clean) = network.loss_grads(&data.images[i], data.labels[i])?;
                acc.add_scaled(&g_clean, inv);
                let stamped = stamp_trigger(&data.images[i], trigger)?;
                let (_, g_trig) = network.loss_grads(&stamped, cfg.target)?;
                acc.add_scaled(&g_trig, cfg.lambda * inv);
            }
            // Restrict the update to the head.
            for (ti, g) in acc.by_param.iter_mut().enumerate() {
                if !head.contains(&ti) {
                    for v in g.iter_mut() {
                        *v = 0.0;
                    }
                }
            }
            let norm = acc.l2_norm();
            if tc.grad_clip > 0.0 && norm > tc.grad_clip {
                acc.scale(tc.grad_clip / norm);
            }
            velocity.scale(tc.momentum);
            velocity.add_scaled(&acc, 1.0);
            network.params.add_scaled_grads(&velocity, -lr);
            if !network.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "head fine-tune diverged in epoch {epoch}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load, DataSource, DatasetSpec};
    use crate::nn::RefArch;
    use crate::trainer::train_model;
    use crate::ModelArch;

    fn toy_setup() -> (Network, Dataset, Dataset) {
        let mut spec = DatasetSpec::synthetic(31);
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
            *train_per_class = 40;
            *test_per_class = 12;
            *height = 8;
            *width = 8;
        }
        let bundle = load(&spec).unwrap();
        let net = Network::new(
            ModelArch::Reference {
                arch: RefArch::Chain { width: 8, depth: 2 },
                input_dims: (8, 8, 3),
                num_classes: 3,
            },
            5,
        )
        .unwrap();
        let trained = train_model(
            net,
            &bundle.train,
            &TrainConfig {
                epochs: 4,
                batch_size: 24,
                learning_rate: 0.05,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        (trained.network, bundle.train, bundle.test)
    }

    #[test]
    fn stamping_blends_only_the_patch() {
        let mut x = Tensor::zeros(2, 5, 5);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i % 10) as f64 / 10.0;
        }
        let mut patch = Tensor::zeros(2, 2, 2);
        for v in patch.data.iter_mut() {
            *v = 1.0;
        }
        let trig = Trigger {
            patch,
            y0: 3,
            x0: 3,
            transparency: 0.7,
        };
        let out = stamp_trigger(&x, &trig).unwrap();
        for ch in 0..2 {
            for y in 0..5 {
                for xx in 0..5 {
                    let inside = (3..5).contains(&y) && (3..5).contains(&xx);
                    let orig = x.at(ch, y, xx);
                    let got = out.at(ch, y, xx);
                    if inside {
                        let want = 0.7 * orig + 0.3 * 1.0;
                        assert!((got - want).abs() < 1e-12);
                    } else {
                        assert_eq!(got, orig);
                    }
                    assert!((0.0..=1.0).contains(&got));
                }
            }
        }
        // Degenerate transparencies.
        let all = Trigger {
            transparency: 1.0,
            ..trig.clone()
        };
        assert_eq!(stamp_trigger(&x, &all).unwrap().data, x.data);
        let none = Trigger {
            transparency: 0.0,
            ..trig.clone()
        };
        let full = stamp_trigger(&x, &none).unwrap();
        assert_eq!(full.at(0, 3, 3), 1.0);
        // Oversized trigger is rejected.
        let huge = Trigger {
            patch: Tensor::zeros(2, 9, 9),
            y0: 0,
            x0: 0,
            transparency: 0.5,
        };
        assert!(stamp_trigger(&x, &huge).is_err());
    }

    #[test]
    fn neuron_selection_takes_largest_magnitudes_with_stable_ties() {
        let row = [0.1, -5.0, 2.0, 3.0, -3.0];
        assert_eq!(select_target_neurons(&row, 1).unwrap(), vec![1]);
        // |3.0| ties |-3.0|: the lower index (3) wins the second slot.
        assert_eq!(select_target_neurons(&row, 2).unwrap(), vec![1, 3]);
        assert_eq!(select_target_neurons(&row, 3).unwrap(), vec![1, 3, 4]);
        assert!(select_target_neurons(&row, 0).is_err());
        assert!(select_target_neurons(&row, 6).is_err());
    }

    #[test]
    fn trigger_shaping_raises_the_selected_activation() {
        let (net, train, _) = toy_setup();
        let (w_all, d) = net.classifier_weights();
        let selected = select_target_neurons(&w_all[..d], 2).unwrap();
        let cfg = BackdoorConfig::default();
        // Canvas fallback (no hosts).
        let (trig, before, after) = optimize_trigger(&net, &[], &selected, &cfg).unwrap();
        assert!(after >= before, "ascent went backwards: {before} → {after}");
        assert_eq!(trig.patch.shape(), (3, 3, 3));
        assert_eq!((trig.y0, trig.x0), (5, 5));
        assert!(trig.patch.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Deterministic: no randomness in shaping.
        let (trig2, ..) = optimize_trigger(&net, &[], &selected, &cfg).unwrap();
        assert_eq!(trig.patch.data, trig2.patch.data);
        // Host-batch shaping keeps the invariants and still ascends.
        let hosts = &train.images[..8];
        let (ht, hb, ha) = optimize_trigger(&net, hosts, &selected, &cfg).unwrap();
        assert!(ha >= hb, "host ascent went backwards: {hb} → {ha}");
        assert!(ht.patch.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn injection_installs_the_backdoor_on_the_toy_model() {
        let (net, train, test) = toy_setup();
        let cfg = BackdoorConfig {
            target: 1,
            finetune: TrainConfig {
                epochs: 3,
                batch_size: 24,
                learning_rate: 0.05,
                seed: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = trojan_inject(&net, &train, &test, &cfg).unwrap();
        assert_eq!(out.records.len(), test.len());
        assert!((out.cad - (out.clean_acc_before - out.clean_acc_after)).abs() < 1e-15);
        // The aggregates derived from records equal the reported numbers.
        let agg = crate::attacks::aggregates_from_records(&out.records);
        assert_eq!(agg["backdoor_asr"], out.asr);
        assert_eq!(agg["cad"], out.cad);
        assert!(out.asr > 0.5, "asr {}", out.asr);
        assert!(out.cad < 0.3, "cad {}", out.cad);
        // Only the head moved.
        for (a, b) in net.params.tensors.iter().zip(&out.network.params.tensors) {
            if a.name == "fc.w" || a.name == "fc.b" {
                assert_ne!(a.data, b.data, "{}", a.name);
            } else {
                assert_eq!(a.data, b.data, "{}", a.name);
            }
        }
    }
}
