//! Datasets: the CIFAR-10 binary format, seeded synthetic blob data, the
//! stratified train/validation split, and batch iteration.
//!
//! Images are stored raw in `[0, 1]`; per-channel normalization statistics
//! are computed from the images at load time and applied when batches are
//! materialized.

use crate::error::{Error, Result};
use crate::graph::INPUT_CHANNELS;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub name: String,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<S>,
    pub labels: Vec<u8>,
    pub classes: usize,
    /// Per-channel normalization statistics (mean, std).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hw(&self) -> usize {
        self.images.shape()[2]
    }

    fn from_parts(name: String, images: Tensor<S>, labels: Vec<u8>, classes: usize) -> Result<Self> {
        let (n, c, _, _) = images.dim4();
        if n != labels.len() {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        let (mean, std) = channel_stats(&images, c);
        Ok(Dataset { name, images, labels, classes, mean, std })
    }

    /// Recompute normalization statistics from another dataset (the training
    /// split), so validation batches use training-set statistics.
    pub fn adopt_stats(&mut self, other: &Dataset<S>) {
        self.mean = other.mean.clone();
        self.std = other.std.clone();
    }

    /// Normalized `[len, C, H, W]` tensor for the given sample indices.
    pub fn gather_normalized(&self, idx: &[usize]) -> Tensor<S> {
        let (_, c, h, w) = self.images.dim4();
        let plane = c * h * w;
        let mut out = Tensor::zeros(&[idx.len(), c, h, w]);
        for (row, &i) in idx.iter().enumerate() {
            let src = &self.images.data()[i * plane..(i + 1) * plane];
            let dst = &mut out.data_mut()[row * plane..(row + 1) * plane];
            for ci in 0..c {
                let mu = S::of(self.mean[ci]);
                let sd = S::of(self.std[ci]);
                for j in 0..h * w {
                    dst[ci * h * w + j] = (src[ci * h * w + j] - mu) / sd;
                }
            }
        }
        out
    }

    pub fn labels_for(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Stratified split: `⌊frac·N_c⌋` samples of every class go to the
    /// validation set; the rest stay in training. Deterministic under `seed`.
    pub fn split_train_val(&self, frac: f64, seed: u64) -> Result<(Dataset<S>, Dataset<S>)> {
        if !(0.0..1.0).contains(&frac) || frac <= 0.0 {
            return Err(Error::Config(format!("validation fraction must be in (0,1), got {frac}")));
        }
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            per_class[y as usize].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut val_idx = Vec::new();
        let mut train_idx = Vec::new();
        for (cls, idx) in per_class.iter_mut().enumerate() {
            let take = (frac * idx.len() as f64).floor() as usize;
            if take == 0 {
                return Err(Error::Config(format!(
                    "class {cls} gets 0 validation samples at fraction {frac} ({} available)",
                    idx.len()
                )));
            }
            shuffle(idx, &mut rng);
            val_idx.extend_from_slice(&idx[..take]);
            train_idx.extend_from_slice(&idx[take..]);
        }
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        let mut train = self.subset(&train_idx, format!("{}-train", self.name))?;
        let mut val = self.subset(&val_idx, format!("{}-val", self.name))?;
        // normalization always comes from the training split
        let (mean, std) = channel_stats(&train.images, INPUT_CHANNELS);
        train.mean = mean;
        train.std = std;
        val.adopt_stats(&train);
        Ok((train, val))
    }

    fn subset(&self, idx: &[usize], name: String) -> Result<Dataset<S>> {
        let (_, c, h, w) = self.images.dim4();
        let plane = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * plane);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        Dataset::from_parts(
            name,
            Tensor::new(vec![idx.len(), c, h, w], data)?,
            self.labels_for(idx),
            self.classes,
        )
    }

    /// Write in the CIFAR-style binary record format: 1 label byte followed
    /// by `C·H·W` pixel bytes (plane-major), pixels quantized to `u8`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let (n, c, h, w) = self.images.dim4();
        let mut bytes = Vec::with_capacity(n * (1 + c * h * w));
        for i in 0..n {
            bytes.push(self.labels[i]);
            let src = &self.images.data()[i * c * h * w..(i + 1) * c * h * w];
            for &v in src {
                let q = (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
                bytes.push(q);
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

fn channel_stats<S: Scalar>(images: &Tensor<S>, c: usize) -> (Vec<f64>, Vec<f64>) {
    let (n, _, h, w) = images.dim4();
    let mut mean = vec![0.0f64; c];
    let mut std = vec![0.0f64; c];
    let per = (n * h * w) as f64;
    for ni in 0..n {
        for ci in 0..c {
            for &v in &images.data()[(ni * c + ci) * h * w..][..h * w] {
                mean[ci] += v.as_f64();
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= per;
    }
    for ni in 0..n {
        for ci in 0..c {
            for &v in &images.data()[(ni * c + ci) * h * w..][..h * w] {
                let d = v.as_f64() - mean[ci];
                std[ci] += d * d;
            }
        }
    }
    for s in std.iter_mut() {
        *s = (*s / per).sqrt().max(1e-8);
    }
    (mean, std)
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Parse records of `1 + C·hw²` bytes (label, then plane-major pixels).
pub fn parse_records<S: Scalar>(
    bytes: &[u8],
    classes: usize,
    hw: usize,
    name: &str,
) -> Result<Dataset<S>> {
    let rec = 1 + INPUT_CHANNELS * hw * hw;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "{name}: {} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (rec - 1));
    let inv = 1.0 / 255.0;
    for r in 0..n {
        let chunk = &bytes[r * rec..(r + 1) * rec];
        if chunk[0] as usize >= classes {
            return Err(Error::Data(format!(
                "{name}: record {r} has label {} (classes: {classes})",
                chunk[0]
            )));
        }
        labels.push(chunk[0]);
        data.extend(chunk[1..].iter().map(|&b| S::of(b as f64 * inv)));
    }
    Dataset::from_parts(
        name.to_string(),
        Tensor::new(vec![n, INPUT_CHANNELS, hw, hw], data)?,
        labels,
        classes,
    )
}

/// Load one CIFAR-10-format binary file (3073-byte records, 32×32 RGB).
pub fn load_binary_file<S: Scalar>(path: &Path, classes: usize, hw: usize) -> Result<Dataset<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    parse_records(&bytes, classes, hw, &path.file_name().unwrap_or_default().to_string_lossy())
}

/// Load the CIFAR-10 training set: `data_batch_1.bin` … `data_batch_5.bin`
/// under `dir`.
pub fn load_cifar10<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let mut bytes = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        std::fs::File::open(&path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
    }
    parse_records(&bytes, 10, 32, "cifar10")
}

/// Parameters of the synthetic blob dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub hw: usize,
    /// Noise scale; at 0 every sample equals its class prototype and a
    /// linear probe separates the classes exactly.
    pub difficulty: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { seed: 0, classes: 4, per_class: 500, hw: 8, difficulty: 1.0 }
    }
}

/// Gaussian-blob class prototypes rendered as C-channel images plus seeded
/// pixel noise scaled by `difficulty`.
pub fn synth_dataset<S: Scalar>(spec: &SynthSpec) -> Result<Dataset<S>> {
    if spec.classes < 2 || spec.per_class == 0 || spec.hw < 2 {
        return Err(Error::Config(format!("invalid synth spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = INPUT_CHANNELS;
    let hw = spec.hw;
    // per-class prototype: an off-center bump with a class-specific channel mix
    let mut protos = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let cx = 0.25 + 0.5 * rng.gen::<f64>();
        let cy = 0.25 + 0.5 * rng.gen::<f64>();
        let sigma = 0.15 + 0.2 * rng.gen::<f64>();
        let amps: Vec<f64> = (0..c).map(|_| 0.25 + 0.55 * rng.gen::<f64>()).collect();
        let mut proto = vec![0.0f64; c * hw * hw];
        for ci in 0..c {
            for y in 0..hw {
                for x in 0..hw {
                    let dx = x as f64 / hw as f64 - cx;
                    let dy = y as f64 / hw as f64 - cy;
                    let bump = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    proto[ci * hw * hw + y * hw + x] = 0.15 + amps[ci] * bump;
                }
            }
        }
        protos.push(proto);
    }
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * c * hw * hw);
    let mut labels = Vec::with_capacity(n);
    let mut spare: Option<f64> = None;
    let mut normal = |rng: &mut ChaCha8Rng| -> f64 {
        if let Some(v) = spare.take() {
            return v;
        }
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let v: f64 = rng.gen::<f64>();
        let r = (-2.0 * u.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * v;
        spare = Some(r * th.sin());
        r * th.cos()
    };
    for cls in 0..spec.classes {
        for _ in 0..spec.per_class {
            labels.push(cls as u8);
            for &p in &protos[cls] {
                let noisy = p + spec.difficulty * 0.12 * normal(&mut rng);
                data.push(S::of(noisy.clamp(0.0, 1.0)));
            }
        }
    }
    Dataset::from_parts(
        format!("synth-c{}-n{}-hw{}-d{}", spec.classes, spec.per_class, hw, spec.difficulty),
        Tensor::new(vec![n, c, hw, hw], data)?,
        labels,
        spec.classes,
    )
}

/// Mini-batch index plan for one epoch: a seeded reshuffle split into
/// batches, last partial batch kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let epoch_seed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    shuffle(&mut order, &mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_synth() -> Dataset<f32> {
        synth_dataset(&SynthSpec { seed: 1, classes: 3, per_class: 5, hw: 4, difficulty: 0.5 })
            .unwrap()
    }

    #[test]
    fn synth_sizes_and_determinism() {
        let d = tiny_synth();
        assert_eq!(d.len(), 15);
        assert_eq!(d.images.shape(), &[15, 3, 4, 4]);
        let d2 = tiny_synth();
        assert_eq!(d.images.data(), d2.images.data());
        assert_eq!(d.labels, d2.labels);
    }

    #[test]
    fn two_record_handcrafted_file() {
        let hw = 2usize;
        let rec = 1 + 3 * hw * hw;
        let mut bytes = vec![0u8; 2 * rec];
        bytes[0] = 7;
        bytes[rec] = 3;
        bytes[rec + 1] = 255;
        let d: Dataset<f32> = parse_records(&bytes, 10, hw, "fixture").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![7, 3]);
        assert!((d.images.data()[3 * hw * hw] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncated_file_and_bad_label_rejected() {
        let bad = vec![0u8; 100];
        assert!(parse_records::<f32>(&bad, 10, 32, "x").is_err());
        let hw = 2;
        let mut rec = vec![0u8; 1 + 3 * hw * hw];
        rec[0] = 10; // label out of range for 10 classes
        assert!(parse_records::<f32>(&rec, 10, hw, "x").is_err());
    }

    #[test]
    fn all_zero_record_normalizes_to_minus_mean_over_std() {
        let hw = 2usize;
        let rec = 1 + 3 * hw * hw;
        let mut bytes = vec![0u8; 2 * rec];
        // second record is all 255 so std is nonzero
        for b in bytes[rec + 1..].iter_mut() {
            *b = 255;
        }
        let d: Dataset<f64> = parse_records(&bytes, 10, hw, "x").unwrap();
        let batch = d.gather_normalized(&[0]);
        for ci in 0..3 {
            let expect = -d.mean[ci] / d.std[ci];
            assert!((batch.data()[ci * hw * hw] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn split_is_stratified_partition() {
        let d = synth_dataset::<f32>(&SynthSpec {
            seed: 3,
            classes: 4,
            per_class: 20,
            hw: 4,
            difficulty: 1.0,
        })
        .unwrap();
        let (train, val) = d.split_train_val(0.25, 9).unwrap();
        assert_eq!(val.len(), 4 * 5);
        assert_eq!(train.len() + val.len(), d.len());
        for cls in 0..4u8 {
            assert_eq!(val.labels.iter().filter(|&&y| y == cls).count(), 5);
            assert_eq!(train.labels.iter().filter(|&&y| y == cls).count(), 15);
        }
        // deterministic under seed
        let (t2, v2) = d.split_train_val(0.25, 9).unwrap();
        assert_eq!(train.labels, t2.labels);
        assert_eq!(val.images.data(), v2.images.data());
    }

    #[test]
    fn split_fraction_too_small_errors() {
        let d = tiny_synth();
        assert!(d.split_train_val(0.05, 0).is_err()); // floor(0.05*5) = 0
    }

    #[test]
    fn batches_cover_dataset_once() {
        let plans = epoch_batches(10, 4, 7, 0);
        assert_eq!(plans.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = plans.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // epoch changes order
        assert_ne!(epoch_batches(10, 4, 7, 0), epoch_batches(10, 4, 7, 1));
        // same epoch reproduces
        assert_eq!(epoch_batches(10, 4, 7, 3), epoch_batches(10, 4, 7, 3));
    }

    #[test]
    fn binary_roundtrip_exact_on_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.bin");
        let d = tiny_synth();
        d.write_binary(&path).unwrap();
        let back: Dataset<f32> = load_binary_file(&path, 3, 4).unwrap();
        assert_eq!(back.labels, d.labels);
        for (a, b) in back.images.data().iter().zip(d.images.data().iter()) {
            let qa = (a * 255.0).round() as i32;
            let qb = (b * 255.0).round() as i32;
            assert_eq!(qa, qb);
        }
    }

    #[test]
    fn difficulty_zero_is_linearly_separable() {
        // nearest-class-mean is a linear classifier; at difficulty 0 it must
        // reach 100% train accuracy
        let d = synth_dataset::<f64>(&SynthSpec {
            seed: 5,
            classes: 3,
            per_class: 4,
            hw: 6,
            difficulty: 0.0,
        })
        .unwrap();
        let plane = 3 * 36;
        let mut means = vec![vec![0.0f64; plane]; 3];
        let mut counts = [0usize; 3];
        for i in 0..d.len() {
            let cls = d.labels[i] as usize;
            counts[cls] += 1;
            for (m, &v) in means[cls].iter_mut().zip(&d.images.data()[i * plane..(i + 1) * plane]) {
                *m += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(counts.iter()) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        for i in 0..d.len() {
            let xi = &d.images.data()[i * plane..(i + 1) * plane];
            let pred = (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = xi.iter().zip(&means[a]).map(|(x, m)| (x - m) * (x - m)).sum();
                    let db: f64 = xi.iter().zip(&means[b]).map(|(x, m)| (x - m) * (x - m)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(pred, d.labels[i] as usize);
        }
    }
}
