//! Dataset ingestion: CIFAR-10 binary batches and a synthetic stand-in with
//! the same record layout, plus seeded subset selection and content
//! fingerprints for the cache layer.
//!
//! The CIFAR-10 root is taken from the spec or, failing that, from the
//! `ARCHSEC_DATA_ROOT` environment variable. When neither is set,
//! experiments fall back to the synthetic source declared in their spec.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable naming the directory that holds
/// `cifar-10-batches-bin/`.
pub const DATA_ROOT_ENV: &str = "ARCHSEC_DATA_ROOT";

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 × 1024 pixel bytes
const CIFAR_SIDE: usize = 32;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// CIFAR-10 binary batches under `root` (or `$ARCHSEC_DATA_ROOT`).
    Cifar10 { root: Option<PathBuf> },
    /// Class-template images with additive noise, in CIFAR record layout.
    Synthetic {
        num_classes: usize,
        height: usize,
        width: usize,
        channels: usize,
        train_per_class: usize,
        test_per_class: usize,
        /// Noise std relative to the template contrast; larger is harder.
        noise: f64,
        seed: u64,
    },
}

impl DataSource {
    /// A small but learnable default: 4 well-separated classes at 12×12×3.
    pub fn default_synthetic(seed: u64) -> DataSource {
        DataSource::Synthetic {
            num_classes: 4,
            height: 12,
            width: 12,
            channels: 3,
            train_per_class: 600,
            test_per_class: 150,
            noise: 0.22,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Keep only this many training examples (seeded uniform subset).
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
}

impl DatasetSpec {
    pub fn synthetic(seed: u64) -> DatasetSpec {
        DatasetSpec {
            source: DataSource::default_synthetic(seed),
            train_limit: None,
            test_limit: None,
            subset_seed: 0,
        }
    }
}

/// An in-memory labeled image set; pixels live in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    /// (height, width, channels)
    pub dims: (usize, usize, usize),
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// New dataset holding the given indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            dims: self.dims,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded uniform subsample without replacement (identity if `n` ≥ len).
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = Rng::seed_from_u64(seed).split(0x5e1ec7);
        let mut idx = rng.sample_indices(self.len(), n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Content hash over labels and quantized pixels, independent of how the
    /// data was produced.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.num_classes.to_le_bytes());
        h.update(self.dims.0.to_le_bytes());
        h.update(self.dims.1.to_le_bytes());
        h.update(self.dims.2.to_le_bytes());
        for (img, &lbl) in self.images.iter().zip(&self.labels) {
            h.update([lbl as u8]);
            for &v in &img.data {
                // 16-bit quantization is far below any training noise floor.
                let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
                h.update(q.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Per-class index lists.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolve and load the spec'd dataset, applying subset limits.
pub fn load(spec: &DatasetSpec) -> Result<DataBundle> {
    let mut bundle = match &spec.source {
        DataSource::Cifar10 { root } => {
            let root = resolve_cifar_root(root.as_deref())?;
            load_cifar10(&root)?
        }
        DataSource::Synthetic { .. } => synthesize(&spec.source)?,
    };
    if let Some(n) = spec.train_limit {
        bundle.train = bundle.train.subsample(n, spec.subset_seed ^ 0xA11CE);
    }
    if let Some(n) = spec.test_limit {
        bundle.test = bundle.test.subsample(n, spec.subset_seed ^ 0xB0B);
    }
    Ok(bundle)
}

fn resolve_cifar_root(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    if let Ok(env_root) = std::env::var(DATA_ROOT_ENV) {
        let base = PathBuf::from(env_root);
        let nested = base.join("cifar-10-batches-bin");
        return Ok(if nested.is_dir() { nested } else { base });
    }
    Err(Error::Data(format!(
        "no CIFAR-10 root configured; set `root` in the dataset spec or {DATA_ROOT_ENV}"
    )))
}

/// Parse the six CIFAR-10 binary batches.
pub fn load_cifar10(root: &Path) -> Result<DataBundle> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        parse_cifar_file(&root.join(name), &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    parse_cifar_file(&root.join(CIFAR_TEST_FILE), &mut test_images, &mut test_labels)?;
    let dims = (CIFAR_SIDE, CIFAR_SIDE, 3);
    Ok(DataBundle {
        train: Dataset {
            name: "cifar10-train".into(),
            num_classes: 10,
            dims,
            images: train_images,
            labels: train_labels,
        },
        test: Dataset {
            name: "cifar10-test".into(),
            num_classes: 10,
            dims,
            images: test_images,
            labels: test_labels,
        },
    })
}

/// One `.bin` batch: records of 3073 bytes, label then CHW pixel planes.
pub fn parse_cifar_file(
    path: &Path,
    images: &mut Vec<Tensor>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label > 9 {
            return Err(Error::Data(format!(
                "{}: record {rec} (byte offset {}) has label {label} > 9",
                path.display(),
                rec * CIFAR_RECORD
            )));
        }
        let px = &chunk[1..];
        let mut t = Tensor::zeros(3, CIFAR_SIDE, CIFAR_SIDE);
        for (i, &b) in px.iter().enumerate() {
            t.data[i] = b as f64 / 255.0;
        }
        images.push(t);
        labels.push(label);
    }
    Ok(())
}

/// Generate the synthetic source: each class gets a smooth random template;
/// samples are the template plus per-pixel Gaussian noise, clamped to [0, 1].
fn synthesize(src: &DataSource) -> Result<DataBundle> {
    let DataSource::Synthetic {
        num_classes,
        height,
        width,
        channels,
        train_per_class,
        test_per_class,
        noise,
        seed,
    } = src
    else {
        return Err(Error::Config("synthesize called on non-synthetic source".into()));
    };
    let (k, h, w, c) = (*num_classes, *height, *width, *channels);
    if k < 2 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Config("synthetic dims/classes out of range".into()));
    }
    let mut rng = Rng::seed_from_u64(*seed).split(0xD47A);
    let templates: Vec<Tensor> = (0..k).map(|_| smooth_template(c, h, w, &mut rng)).collect();

    let make = |per_class: usize, stream: &mut Rng| {
        let mut images = Vec::with_capacity(per_class * k);
        let mut labels = Vec::with_capacity(per_class * k);
        for _ in 0..per_class {
            for (cls, tmpl) in templates.iter().enumerate() {
                let mut img = tmpl.clone();
                for v in img.data.iter_mut() {
                    *v = (*v + noise * stream.normal()).clamp(0.0, 1.0);
                }
                images.push(img);
                labels.push(cls);
            }
        }
        (images, labels)
    };

    let mut train_stream = rng.split(1);
    let mut test_stream = rng.split(2);
    let (train_images, train_labels) = make(*train_per_class, &mut train_stream);
    let (test_images, test_labels) = make(*test_per_class, &mut test_stream);
    let dims = (h, w, c);
    Ok(DataBundle {
        train: Dataset {
            name: "synthetic-train".into(),
            num_classes: k,
            dims,
            images: train_images,
            labels: train_labels,
        },
        test: Dataset {
            name: "synthetic-test".into(),
            num_classes: k,
            dims,
            images: test_images,
            labels: test_labels,
        },
    })
}

/// A low-frequency pattern in [0.15, 0.85]: a sum of a few random cosine
/// waves per channel, rescaled. Smoothness keeps classes distinguishable
/// under convolution while leaving room for adversarial perturbations.
fn smooth_template(c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.uniform_in(0.5, 2.0),  // fy
                    rng.uniform_in(0.5, 2.0),  // fx
                    rng.uniform_in(0.0, std::f64::consts::TAU), // phase
                    rng.uniform_in(0.5, 1.0),  // amplitude
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for &(fy, fx, ph, a) in &waves {
                    let arg = std::f64::consts::TAU
                        * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                        + ph;
                    v += a * arg.cos();
                }
                *t.at_mut(ch, y, x) = v;
            }
        }
    }
    // Rescale to [0.15, 0.85] so noise and triggers stay in gamut.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &t.data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    for v in t.data.iter_mut() {
        *v = 0.15 + 0.70 * (*v - lo) / span;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_gamut() {
        let spec = DatasetSpec::synthetic(42);
        let a = load(&spec).unwrap();
        let b = load(&spec).unwrap();
        assert_eq!(a.train.fingerprint(), b.train.fingerprint());
        assert_eq!(a.test.fingerprint(), b.test.fingerprint());
        assert_eq!(a.train.len(), 4 * 600);
        assert_eq!(a.test.len(), 4 * 150);
        for img in a.train.images.iter().take(20) {
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Different seed, different content.
        let c = load(&DatasetSpec::synthetic(43)).unwrap();
        assert_ne!(a.train.fingerprint(), c.train.fingerprint());
    }

    #[test]
    fn synthetic_classes_are_separated() {
        let bundle = load(&DatasetSpec::synthetic(7)).unwrap();
        let ds = &bundle.train;
        // Nearest-template classification should be nearly perfect: average
        // within-class distance must undercut cross-class distance.
        let by = ds.by_class();
        let mean_img = |idx: &[usize]| {
            let mut m = Tensor::zeros(ds.dims.2, ds.dims.0, ds.dims.1);
            for &i in idx {
                m.add_scaled(&ds.images[i], 1.0 / idx.len() as f64);
            }
            m
        };
        let centroids: Vec<Tensor> = by.iter().map(|v| mean_img(&v[..50])).collect();
        let mut correct = 0;
        let total = 200;
        for i in 0..total {
            let img = &ds.images[i];
            let mut best = (f64::INFINITY, 0);
            for (c, cen) in centroids.iter().enumerate() {
                let d = img.l2_dist(cen);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == ds.labels[i] {
                correct += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 0.95, "{correct}/{total}");
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let bundle = load(&DatasetSpec::synthetic(5)).unwrap();
        let a = bundle.train.subsample(100, 9);
        let b = bundle.train.subsample(100, 9);
        let c = bundle.train.subsample(100, 10);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.len(), 100);
        // Identity when n ≥ len.
        let d = bundle.test.subsample(10_000_000, 1);
        assert_eq!(d.len(), bundle.test.len());
    }

    #[test]
    fn cifar_parser_reads_records_and_reports_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // Two records: label 3 with ascending pixels, label 9 with constant.
        let mut bytes = Vec::new();
        bytes.push(3u8);
        for i in 0..3072usize {
            bytes.push((i % 256) as u8);
        }
        bytes.push(9u8);
        bytes.extend(std::iter::repeat_n(128u8, 3072));
        std::fs::write(&path, &bytes).unwrap();

        let mut images = Vec::new();
        let mut labels = Vec::new();
        parse_cifar_file(&path, &mut images, &mut labels).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(images[0].shape(), (3, 32, 32));
        assert!((images[0].data[0] - 0.0).abs() < 1e-12);
        assert!((images[0].data[255] - 1.0).abs() < 1e-12);
        assert!((images[1].data[1000] - 128.0 / 255.0).abs() < 1e-12);

        // Truncated file: not a whole record.
        std::fs::write(&path, &bytes[..4000]).unwrap();
        let err = parse_cifar_file(&path, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        assert!(err.to_string().contains("3073"), "{err}");

        // Bad label in second record: offset is called out.
        bytes[3073] = 12;
        std::fs::write(&path, &bytes).unwrap();
        let err = parse_cifar_file(&path, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 1") && msg.contains("3073"), "{msg}");
    }

    #[test]
    fn select_precedes_by_class_consistently() {
        let bundle = load(&DatasetSpec::synthetic(3)).unwrap();
        let sel = bundle.train.select(&[5, 1, 9]);
        assert_eq!(sel.len(), 3);
        assert_eq!(sel.labels[0], bundle.train.labels[5]);
        assert_eq!(sel.labels[2], bundle.train.labels[9]);
        let by = sel.by_class();
        let total: usize = by.iter().map(|v| v.len()).sum();
        assert_eq!(total, 3);
    }
}
