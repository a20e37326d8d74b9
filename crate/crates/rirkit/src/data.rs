//! CIFAR-10/100 binary ingestion, normalization, augmentation, deterministic
//! batching, stratified subsetting, and a synthetic CIFAR-format dataset for
//! tests and demos.
//!
//! Binary layout (the datasets' published format): CIFAR-10 records are 3073
//! bytes (1 label + 3072 channel-major RGB pixels of a 32x32 image);
//! CIFAR-100 records are 3074 bytes (coarse label, fine label, pixels). The
//! fine label is used.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RirError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_EDGE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_EDGE * IMAGE_EDGE;
const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
    /// Generated in the CIFAR-10 wire format; no files required.
    Synthetic,
}

impl CifarVariant {
    pub fn classes(&self) -> usize {
        match self {
            CifarVariant::Cifar100 => 100,
            _ => 10,
        }
    }

    fn record_len(&self) -> usize {
        match self {
            CifarVariant::Cifar100 => IMAGE_LEN + 2,
            _ => IMAGE_LEN + 1,
        }
    }
}

impl std::fmt::Display for CifarVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
            CifarVariant::Synthetic => "synthetic",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = RirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            "synthetic" => Ok(CifarVariant::Synthetic),
            other => Err(RirError::Lookup(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// Images live in [0, 1] after loading (channel-major per image); labels are
/// fine labels in [0, classes).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// Gathers the indexed images into an [N, 3, 32, 32] batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::from_vec(&[indices.len(), IMAGE_CHANNELS, IMAGE_EDGE, IMAGE_EDGE], data)
            .expect("batch shape");
        (t, labels)
    }
}

fn parse_records(bytes: &[u8], variant: CifarVariant, source: &str) -> Result<(Vec<f32>, Vec<u8>)> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(RirError::Format(format!(
            "{source}: expected a positive multiple of {rec} bytes, got {}",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let record = &bytes[r * rec..(r + 1) * rec];
        let label = match variant {
            CifarVariant::Cifar100 => record[1],
            _ => record[0],
        };
        if (label as usize) >= variant.classes() {
            return Err(RirError::CorruptData(format!(
                "{source}: record {r} has label {label}, classes = {}",
                variant.classes()
            )));
        }
        labels.push(label);
        let pixel0 = rec - IMAGE_LEN;
        images.extend(record[pixel0..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

fn expected_files(variant: CifarVariant, split: SplitTag) -> Vec<&'static str> {
    match (variant, split) {
        (CifarVariant::Cifar100, SplitTag::Train) => vec!["train.bin"],
        (CifarVariant::Cifar100, SplitTag::Test) => vec!["test.bin"],
        (_, SplitTag::Train) => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        (_, SplitTag::Test) => vec!["test_batch.bin"],
    }
}

fn resolve_dir(dir: &Path, variant: CifarVariant) -> PathBuf {
    let conventional = match variant {
        CifarVariant::Cifar100 => "cifar-100-binary",
        _ => "cifar-10-batches-bin",
    };
    let nested = dir.join(conventional);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Loads one split from the standard binary files under `dir` (the
/// conventional extracted subdirectory is also searched). No partial dataset
/// is returned on any error.
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: SplitTag) -> Result<Dataset> {
    if variant == CifarVariant::Synthetic {
        return Err(RirError::config(
            "synthetic dataset is generated, not loaded; use synthetic_dataset()".to_string(),
        ));
    }
    let dir = resolve_dir(dir, variant);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in expected_files(variant, split) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| {
            RirError::Format(format!("cannot read {}: {e}", path.display()))
        })?;
        let (im, la) = parse_records(&bytes, variant, &path.display().to_string())?;
        images.extend(im);
        labels.extend(la);
    }
    Ok(Dataset { images, labels, classes: variant.classes(), split })
}

/// Serializes images in [0, 1] back to the binary record format. Pixels are
/// rounded to bytes, so a loaded dataset round-trips bitwise.
pub fn encode_records(dataset: &Dataset, variant: CifarVariant) -> Vec<u8> {
    let rec = variant.record_len();
    let mut out = Vec::with_capacity(dataset.len() * rec);
    for i in 0..dataset.len() {
        match variant {
            CifarVariant::Cifar100 => {
                // Coarse labels are not modeled; write 0.
                out.push(0);
                out.push(dataset.labels[i]);
            }
            _ => out.push(dataset.labels[i]),
        }
        out.extend(
            dataset
                .image(i)
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Deterministic core of the augmentation: zero-pad 4 px each side, crop the
/// 32x32 window at (dy, dx) in [0, 8]^2, then optionally mirror horizontally.
pub fn augment_with(image: &[f32], dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    debug_assert_eq!(image.len(), IMAGE_LEN);
    let e = IMAGE_EDGE;
    let mut out = vec![0.0f32; IMAGE_LEN];
    for c in 0..IMAGE_CHANNELS {
        for y in 0..e {
            let sy = y + dy;
            if sy < CROP_PAD || sy >= e + CROP_PAD {
                continue;
            }
            for x in 0..e {
                let sx = x + dx;
                if sx < CROP_PAD || sx >= e + CROP_PAD {
                    continue;
                }
                let tx = if flip { e - 1 - x } else { x };
                out[(c * e + y) * e + tx] = image[(c * e + (sy - CROP_PAD)) * e + (sx - CROP_PAD)];
            }
        }
    }
    out
}

/// Random crop and horizontal flip; draw order is (dy, dx, flip).
pub fn augment<R: Rng>(image: &[f32], rng: &mut R) -> Vec<f32> {
    let dy = rng.random_range(0..=2 * CROP_PAD);
    let dx = rng.random_range(0..=2 * CROP_PAD);
    let flip = rng.random_bool(0.5);
    augment_with(image, dy, dx, flip)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Per-channel standardization. Without `stats` the dataset's own statistics
/// are computed (train split); pass the train stats to normalize a test
/// split. Returns the statistics that were applied.
pub fn normalize(dataset: &mut Dataset, stats: Option<&NormStats>) -> NormStats {
    let plane = IMAGE_EDGE * IMAGE_EDGE;
    let stats = match stats {
        Some(s) => *s,
        None => {
            let mut mean = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            let n = (dataset.len() * plane) as f64;
            for i in 0..dataset.len() {
                let img = dataset.image(i);
                for c in 0..3 {
                    for &v in &img[c * plane..(c + 1) * plane] {
                        mean[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
            }
            let mut out = NormStats { mean: [0.0; 3], std: [0.0; 3] };
            for c in 0..3 {
                let m = mean[c] / n;
                let var = (sq[c] / n - m * m).max(0.0);
                out.mean[c] = m as f32;
                // Guard against constant channels.
                out.std[c] = var.sqrt().max(1e-6) as f32;
            }
            out
        }
    };
    for i in 0..dataset.len() {
        let base = i * IMAGE_LEN;
        for c in 0..3 {
            let (m, s) = (stats.mean[c], stats.std[c]);
            for v in &mut dataset.images[base + c * plane..base + (c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
    }
    stats
}

// ---------------------------------------------------------------------------
// Subsetting and batching
// ---------------------------------------------------------------------------

/// Class-stratified sample of n items, deterministic per seed. The quota is
/// n / classes per class with the remainder going to the lowest class ids.
pub fn stratified_subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(RirError::Range(format!(
            "subset of {n} from a dataset of {}",
            dataset.len()
        )));
    }
    let k = dataset.classes;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &label) in dataset.labels.iter().enumerate() {
        pools[label as usize].push(i);
    }
    let mut selected = Vec::with_capacity(n);
    for (class, pool) in pools.iter_mut().enumerate() {
        let quota = n / k + usize::from(class < n % k);
        if quota > pool.len() {
            return Err(RirError::Range(format!(
                "class {class} has {} items, quota is {quota}",
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        // Partial Fisher-Yates: the first `quota` slots are a uniform sample.
        for i in 0..quota {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        selected.extend_from_slice(&pool[..quota]);
    }
    selected.sort_unstable();
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for &i in &selected {
        images.extend_from_slice(dataset.image(i));
        labels.push(dataset.labels[i]);
    }
    Ok(Dataset { images, labels, classes: k, split: dataset.split })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
}

/// Shuffled batch index lists: ceil(m / batch_size) batches, the last one
/// possibly short. The order is a pure function of (seed, epoch, m).
pub fn batch_indices(m: usize, plan: &BatchPlan) -> Vec<Vec<usize>> {
    assert!(plan.batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(plan.epoch.wrapping_add(1));
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(plan.batch_size).map(|c| c.to_vec()).collect()
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Class-structured images in the CIFAR value range: a smooth per-class
/// template, a random spatial shift, and pixel noise, quantized to bytes so
/// the data is exactly representable in the binary format. Learnable by a
/// small network but not trivially separable.
pub fn synthetic_dataset(
    classes: usize,
    n: usize,
    split: SplitTag,
    seed: u64,
) -> Dataset {
    let e = IMAGE_EDGE;
    // Templates are shared between splits of the same seed.
    let mut template_rng = ChaCha8Rng::seed_from_u64(seed);
    template_rng.set_stream(0xfeed);
    let coarse = 4usize;
    let mut templates = vec![0.0f32; classes * IMAGE_LEN];
    for class in 0..classes {
        for c in 0..IMAGE_CHANNELS {
            let grid: Vec<f32> = (0..coarse * coarse)
                .map(|_| template_rng.random_range(0.15..0.85))
                .collect();
            // Bilinear upsample of the coarse grid.
            for y in 0..e {
                for x in 0..e {
                    let fy = y as f32 / e as f32 * (coarse - 1) as f32;
                    let fx = x as f32 / e as f32 * (coarse - 1) as f32;
                    let (y0, x0) = (fy as usize, fx as usize);
                    let (y1, x1) = ((y0 + 1).min(coarse - 1), (x0 + 1).min(coarse - 1));
                    let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
                    let v = grid[y0 * coarse + x0] * (1.0 - wy) * (1.0 - wx)
                        + grid[y0 * coarse + x1] * (1.0 - wy) * wx
                        + grid[y1 * coarse + x0] * wy * (1.0 - wx)
                        + grid[y1 * coarse + x1] * wy * wx;
                    templates[(class * IMAGE_CHANNELS + c) * e * e + y * e + x] = v;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        SplitTag::Train => 1,
        SplitTag::Test => 2,
    });
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u8);
        let shift_y = rng.random_range(-3i32..=3);
        let shift_x = rng.random_range(-3i32..=3);
        let tpl = &templates[class * IMAGE_LEN..(class + 1) * IMAGE_LEN];
        for c in 0..IMAGE_CHANNELS {
            for y in 0..e {
                for x in 0..e {
                    let sy = (y as i32 + shift_y).clamp(0, e as i32 - 1) as usize;
                    let sx = (x as i32 + shift_x).clamp(0, e as i32 - 1) as usize;
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = tpl[(c * e + sy) * e + sx] + 0.12 * noise as f32;
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    images.push(byte as f32 / 255.0);
                }
            }
        }
    }
    Dataset { images, labels, classes, split }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_c10_bytes(labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        let mut v = 0u8;
        for &label in labels {
            bytes.push(label);
            for _ in 0..IMAGE_LEN {
                bytes.push(v);
                v = v.wrapping_add(1);
            }
        }
        bytes
    }

    #[test]
    fn constructed_two_record_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = ramp_c10_bytes(&[3, 7]);
        // One file stands in for every train batch file.
        for name in expected_files(CifarVariant::Cifar10, SplitTag::Train) {
            std::fs::write(dir.path().join(name), &bytes).unwrap();
        }
        let ds = load_cifar(dir.path(), CifarVariant::Cifar10, SplitTag::Train).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(&ds.labels[..2], &[3, 7]);
        assert_eq!(ds.image(0)[0], 0.0);
        assert!((ds.image(0)[1] - 1.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn c100_uses_the_fine_label() {
        let mut bytes = vec![5u8, 42u8]; // coarse 5, fine 42
        bytes.extend(std::iter::repeat(128u8).take(IMAGE_LEN));
        let (_, labels) = parse_records(&bytes, CifarVariant::Cifar100, "mem").unwrap();
        assert_eq!(labels, vec![42]);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = ramp_c10_bytes(&[1]);
        bytes.pop();
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let err = load_cifar(dir.path(), CifarVariant::Cifar10, SplitTag::Test).unwrap_err();
        assert!(matches!(err, RirError::Format(_)), "{err}");
        assert!(err.to_string().contains("3073"), "{err}");
    }

    #[test]
    fn out_of_range_label_is_corrupt_data() {
        let mut bytes = vec![12u8];
        bytes.extend(std::iter::repeat(0u8).take(IMAGE_LEN));
        assert!(matches!(
            parse_records(&bytes, CifarVariant::Cifar10, "mem"),
            Err(RirError::CorruptData(_))
        ));
    }

    #[test]
    fn encode_load_roundtrip_is_bitwise() {
        let bytes = ramp_c10_bytes(&[0, 9, 4]);
        let (images, labels) = parse_records(&bytes, CifarVariant::Cifar10, "mem").unwrap();
        let ds = Dataset { images, labels, classes: 10, split: SplitTag::Test };
        let encoded = encode_records(&ds, CifarVariant::Cifar10);
        assert_eq!(encoded, bytes);

        let (im2, la2) = parse_records(&encoded, CifarVariant::Cifar10, "mem").unwrap();
        let ds2 = Dataset { images: im2, labels: la2, classes: 10, split: SplitTag::Test };
        assert_eq!(ds, ds2);
    }

    #[test]
    fn synthetic_roundtrips_through_the_binary_format() {
        let ds = synthetic_dataset(10, 30, SplitTag::Train, 5);
        let encoded = encode_records(&ds, CifarVariant::Cifar10);
        let (images, labels) = parse_records(&encoded, CifarVariant::Cifar10, "mem").unwrap();
        assert_eq!(images, ds.images);
        assert_eq!(labels, ds.labels);
    }

    #[test]
    fn center_crop_without_flip_is_the_original() {
        let ds = synthetic_dataset(3, 3, SplitTag::Train, 1);
        let img = ds.image(1);
        assert_eq!(augment_with(img, CROP_PAD, CROP_PAD, false), img);
    }

    #[test]
    fn forced_double_flip_restores_the_image() {
        let ds = synthetic_dataset(3, 3, SplitTag::Train, 2);
        let img = ds.image(0);
        let once = augment_with(img, CROP_PAD, CROP_PAD, true);
        let twice = augment_with(&once, CROP_PAD, CROP_PAD, true);
        assert_eq!(twice, img);
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let ds = synthetic_dataset(5, 8, SplitTag::Train, 3);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            (0..ds.len()).flat_map(|i| augment(ds.image(i), &mut rng)).collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn augmentation_preserves_shape_and_bounds() {
        let ds = synthetic_dataset(4, 12, SplitTag::Train, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..ds.len() {
            let img = ds.image(i);
            let lo = img.iter().cloned().fold(f32::INFINITY, f32::min).min(0.0);
            let hi = img.iter().cloned().fold(f32::NEG_INFINITY, f32::max).max(0.0);
            let aug = augment(img, &mut rng);
            assert_eq!(aug.len(), IMAGE_LEN);
            // New values may only be the exact padding zeros.
            for &v in &aug {
                assert!(v >= lo && v <= hi, "value {v} outside [{lo}, {hi}]");
                assert!(v == 0.0 || img.contains(&v));
            }
        }
    }

    #[test]
    fn normalization_standardizes_train_and_reuses_stats_on_test() {
        let mut train = synthetic_dataset(10, 200, SplitTag::Train, 6);
        let mut test = synthetic_dataset(10, 50, SplitTag::Test, 6);
        let stats = normalize(&mut train, None);
        let applied = normalize(&mut test, Some(&stats));
        assert_eq!(stats, applied);

        let plane = IMAGE_EDGE * IMAGE_EDGE;
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            let n = (train.len() * plane) as f64;
            for i in 0..train.len() {
                for &v in &train.image(i)[c * plane..(c + 1) * plane] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / n;
            let std = (sq / n - mean * mean).sqrt();
            assert!(mean.abs() <= 1e-6, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() <= 1e-4, "channel {c} std {std}");
        }

        // Test split was normalized with train statistics, not its own.
        let mut test_fresh = synthetic_dataset(10, 50, SplitTag::Test, 6);
        let own = normalize(&mut test_fresh, None);
        assert_ne!(own, stats);
    }

    #[test]
    fn constant_dataset_stays_finite() {
        let mut ds = Dataset {
            images: vec![0.5; 4 * IMAGE_LEN],
            labels: vec![0, 1, 0, 1],
            classes: 2,
            split: SplitTag::Train,
        };
        normalize(&mut ds, None);
        assert!(ds.images.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stratified_subset_has_exact_class_counts() {
        let ds = synthetic_dataset(10, 1000, SplitTag::Train, 7);
        let sub = stratified_subset(&ds, 500, 11).unwrap();
        assert_eq!(sub.len(), 500);
        for class in 0..10u8 {
            let count = sub.labels.iter().filter(|&&l| l == class).count();
            assert_eq!(count, 50, "class {class}");
        }
        // Determinism.
        let again = stratified_subset(&ds, 500, 11).unwrap();
        assert_eq!(sub, again);
        let other = stratified_subset(&ds, 500, 12).unwrap();
        assert_ne!(sub, other);

        assert!(matches!(stratified_subset(&ds, 1001, 0), Err(RirError::Range(_))));
    }

    #[test]
    fn batch_sizes_cover_the_dataset() {
        let plan = BatchPlan { batch_size: 4, seed: 1, epoch: 0 };
        let batches = batch_indices(11, &plan);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 3]);
    }

    #[test]
    fn epoch_streams_are_permutations_of_the_same_multiset() {
        let m = 37;
        let a: Vec<usize> = batch_indices(m, &BatchPlan { batch_size: 5, seed: 1, epoch: 0 })
            .into_iter()
            .flatten()
            .collect();
        let b: Vec<usize> = batch_indices(m, &BatchPlan { batch_size: 5, seed: 2, epoch: 0 })
            .into_iter()
            .flatten()
            .collect();
        let c: Vec<usize> = batch_indices(m, &BatchPlan { batch_size: 5, seed: 1, epoch: 1 })
            .into_iter()
            .flatten()
            .collect();
        assert_ne!(a, b);
        assert_ne!(a, c);
        let sorted = |mut v: Vec<usize>| {
            v.sort_unstable();
            v
        };
        let want: Vec<usize> = (0..m).collect();
        assert_eq!(sorted(a.clone()), want);
        assert_eq!(sorted(b), want);
        assert_eq!(sorted(c), want);
        // Same plan twice: identical order.
        let again: Vec<usize> = batch_indices(m, &BatchPlan { batch_size: 5, seed: 1, epoch: 0 })
            .into_iter()
            .flatten()
            .collect();
        assert_eq!(a, again);
    }
}
