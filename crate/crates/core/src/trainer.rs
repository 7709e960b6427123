//! Model training: SGD with momentum, weight decay, cosine learning-rate
//! annealing, and a global gradient-norm clip; label poisoning; adversarial
//! training; and checkpoint round-trips (binary weight blob + JSON sidecar).

use crate::attacks::{pgd_attack, EvasionConfig};
use crate::data::{hex, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Grads, Network};
use crate::rng::Rng;
use crate::search_space::ArchParams;
use crate::ModelArch;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

/// Cosine annealing over whole epochs: starts at `lr0`, ends at 0.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = epoch as f64 / (total - 1) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    /// NaN when no epoch ran; stored as JSON null in checkpoint sidecars.
    #[serde(with = "nullable_f64")]
    pub final_train_loss: f64,
    pub train_accuracy: f64,
}

/// JSON cannot carry non-finite floats; round-trip them through null.
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// A trained network together with how it was produced.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub config: TrainConfig,
    pub data_fingerprint: String,
    pub metrics: TrainMetrics,
}

/// Plain supervised training. `epochs = 0` returns the network bit-exact.
pub fn train_model(network: Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_inner(network, data, cfg, None)
}

/// Adversarial training: every minibatch is replaced by untargeted evasion
/// examples crafted against the current weights before the gradient step.
/// With `epsilon = 0` the crafted examples equal the originals, so the run
/// matches [`train_model`] bit for bit (the attack uses its own seed stream).
pub fn adversarial_train(
    network: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    evasion: &EvasionConfig,
) -> Result<TrainedModel> {
    train_inner(network, data, cfg, Some(evasion))
}

fn train_inner(
    mut network: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    evasion: Option<&EvasionConfig>,
) -> Result<TrainedModel> {
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let fingerprint = data.fingerprint();
    let mut shuffle_rng = Rng::seed_from_u64(cfg.seed).split(0x7EA1);
    let mut attack_rng = Rng::seed_from_u64(cfg.seed).split(0xA77C);

    let mut velocity = network.params.zero_grads();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let mut acc = network.params.zero_grads();
            for &i in batch {
                let label = data.labels[i];
                let x = match evasion {
                    None => data.images[i].clone(),
                    Some(ev) => {
                        let mut r = attack_rng.split(i as u64 + 1);
                        pgd_attack(&network, &data.images[i], label, ev, &mut r)?.adversarial
                    }
                };
                let (loss, g) = network.loss_grads(&x, label)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, example {i}"
                    )));
                }
                loss_sum += loss;
                acc.add_scaled(&g, inv);
            }
            sgd_step(&mut network, &mut velocity, &acc, lr, cfg);
            if !network.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "parameters diverged during epoch {epoch} (lr {lr:.6})"
                )));
            }
        }
        epoch_losses.push(loss_sum / data.len() as f64);
    }

    let train_accuracy = if cfg.epochs == 0 {
        0.0
    } else {
        evaluate_accuracy(&network, data)?
    };
    let final_train_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(TrainedModel {
        network,
        config: cfg.clone(),
        data_fingerprint: fingerprint,
        metrics: TrainMetrics {
            epochs_run: cfg.epochs,
            epoch_losses,
            final_train_loss,
            train_accuracy,
        },
    })
}

/// One SGD step: clip the averaged loss gradient to `grad_clip` (global ℓ2),
/// add weight decay, fold into the momentum buffer, and descend.
fn sgd_step(network: &mut Network, velocity: &mut Grads, batch_grad: &Grads, lr: f64, cfg: &TrainConfig) {
    let mut g = batch_grad.clone();
    let norm = g.l2_norm();
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        g.scale(cfg.grad_clip / norm);
    }
    if cfg.weight_decay != 0.0 {
        for (ti, t) in network.params.tensors.iter().enumerate() {
            let dst = &mut g.by_param[ti];
            for (d, &th) in dst.iter_mut().zip(&t.data) {
                *d += cfg.weight_decay * th;
            }
        }
    }
    velocity.scale(cfg.momentum);
    velocity.add_scaled(&g, 1.0);
    network.params.add_scaled_grads(velocity, -lr);
}

/// Top-1 accuracy (argmax ties go to the lowest class index).
pub fn evaluate_accuracy(network: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (x, &y) in data.images.iter().zip(&data.labels) {
        if network.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy over a dataset.
pub fn evaluate_loss(network: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut sum = 0.0;
    for (x, &y) in data.images.iter().zip(&data.labels) {
        sum += network.loss(x, y)?;
    }
    Ok(sum / data.len() as f64)
}

/// Flip the labels of ⌊p·N⌋ distinct examples to a uniformly drawn *other*
/// class. Returns the poisoned copy and the affected indices (sorted).
/// `p = 0` returns the dataset unchanged.
pub fn poison_labels(data: &Dataset, p: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("poison fraction {p} outside [0, 1]")));
    }
    let n_poison = (p * data.len() as f64).floor() as usize;
    let mut out = data.clone();
    if n_poison == 0 {
        return Ok((out, Vec::new()));
    }
    let mut rng = Rng::seed_from_u64(seed).split(0x9012);
    let mut idx = rng.sample_indices(data.len(), n_poison);
    idx.sort_unstable();
    for &i in &idx {
        let old = out.labels[i];
        // Uniform over the other classes: draw in [0, k−1) and skip `old`.
        let draw = rng.below(data.num_classes - 1);
        out.labels[i] = if draw >= old { draw + 1 } else { draw };
    }
    Ok((out, idx))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ACPK0001";
const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointSidecar {
    schema_version: u32,
    arch: ModelArch,
    alpha: Option<ArchParams>,
    config: TrainConfig,
    data_fingerprint: String,
    metrics: TrainMetrics,
    blob_sha256: String,
}

/// Write `stem.bin` (magic + length + little-endian f64 weights) and
/// `stem.json` (architecture, config, metrics, blob hash).
pub fn save_checkpoint(model: &TrainedModel, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let flat = model.network.params.to_flat();
    let mut blob = Vec::with_capacity(16 + flat.len() * 8);
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in &flat {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let digest = hex(&Sha256::digest(&blob));
    let sidecar = CheckpointSidecar {
        schema_version: CHECKPOINT_SCHEMA,
        arch: model.network.arch.clone(),
        alpha: model.network.alpha.clone(),
        config: model.config.clone(),
        data_fingerprint: model.data_fingerprint.clone(),
        metrics: model.metrics.clone(),
        blob_sha256: digest,
    };
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&bin_path, &blob)?;
    std::fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok((bin_path, json_path))
}

/// Load a checkpoint pair, verifying magic, length, and blob hash.
pub fn load_checkpoint(stem: &Path) -> Result<TrainedModel> {
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");
    let blob = std::fs::read(&bin_path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", bin_path.display())))?;
    let sidecar: CheckpointSidecar = serde_json::from_slice(
        &std::fs::read(&json_path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", json_path.display())))?,
    )?;
    if sidecar.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {}",
            sidecar.schema_version
        )));
    }
    let digest = hex(&Sha256::digest(&blob));
    if digest != sidecar.blob_sha256 {
        return Err(Error::Checkpoint(format!(
            "{} does not match its recorded hash; refusing to load",
            bin_path.display()
        )));
    }
    if blob.len() < 16 || &blob[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad weight-blob magic".into()));
    }
    let n = u64::from_le_bytes(blob[8..16].try_into().unwrap()) as usize;
    if blob.len() != 16 + n * 8 {
        return Err(Error::Checkpoint(format!(
            "weight blob claims {n} values but holds {} bytes",
            blob.len()
        )));
    }
    let flat: Vec<f64> = blob[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut network = Network::new(sidecar.arch, 0)?;
    if flat.len() != network.params.flat_len() {
        return Err(Error::Checkpoint(format!(
            "blob holds {} weights, architecture needs {}",
            flat.len(),
            network.params.flat_len()
        )));
    }
    network.params.load_flat(&flat);
    network.alpha = sidecar.alpha;
    Ok(TrainedModel {
        network,
        config: sidecar.config,
        data_fingerprint: sidecar.data_fingerprint,
        metrics: sidecar.metrics,
    })
}
