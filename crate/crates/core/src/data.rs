//! Datasets: IDX and CIFAR-10 binary readers, a seeded Gaussian-blob
//! generator, a native binary format, label-noise injection and noisy-sample
//! recall.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ProbVector, Tensor2};
use crate::rng::{self, stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD_LEN: usize = 1 + 3072;
pub const CIFAR10_CLASSES: usize = 10;

/// Labelled samples with ids `0..N` (the row index). `noisy_ids` lists the
/// samples whose label was corrupted by [`inject_label_noise`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor2,
    labels: Vec<usize>,
    classes: usize,
    noisy_ids: BTreeSet<usize>,
}

impl Dataset {
    pub fn new(features: Tensor2, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if classes == 0 {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Input(format!(
                "sample {i} has label {y} >= {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
            noisy_ids: BTreeSet::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn feature(&self, id: usize) -> &[f64] {
        self.features.row(id)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn one_hot(&self, id: usize) -> ProbVector {
        ProbVector::one_hot(self.labels[id], self.classes).expect("labels validated")
    }

    pub fn noisy_ids(&self) -> &BTreeSet<usize> {
        &self.noisy_ids
    }

    pub fn contains(&self, id: usize) -> bool {
        id < self.len()
    }

    /// Feature rows for `ids`, in the given order.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor2> {
        let d = self.dims();
        let mut values = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if !self.contains(id) {
                return Err(Error::Input(format!("unknown sample id {id}")));
            }
            values.extend_from_slice(self.feature(id));
        }
        Tensor2::new(ids.len(), d, values)
    }

    /// Subset with ids renumbered contiguously in the order of `ids`.
    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        let features = self.batch(ids)?;
        let labels = ids.iter().map(|&i| self.labels[i]).collect();
        let mut out = Dataset::new(features, labels, self.classes)?;
        out.noisy_ids = ids
            .iter()
            .enumerate()
            .filter(|(_, id)| self.noisy_ids.contains(id))
            .map(|(new, _)| new)
            .collect();
        Ok(out)
    }
}

/// Gaussian blobs: `per_class` samples around each of `classes` centers drawn
/// uniformly from `[0, 1]^dims`, with isotropic standard deviation `spread`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Samples are emitted round-robin over classes so ids interleave labels.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.dims == 0 || spec.per_class == 0 {
        return Err(Error::Config(format!("degenerate synthetic spec {spec:?}")));
    }
    if !spec.spread.is_finite() || spec.spread < 0.0 {
        return Err(Error::Config(format!(
            "spread must be finite and >= 0, got {}",
            spec.spread
        )));
    }
    let mut rng = rng::stream_rng(spec.seed, stream::DATA);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dims).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.classes * spec.per_class;
    let mut values = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for (c, center) in centers.iter().enumerate() {
            values.extend(center.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Tensor2::new(n, spec.dims, values)?, labels, spec.classes)
}

/// Seeded hold-out split: `round(fraction·N)` samples go to the second set.
/// Both parts keep the original relative order.
pub fn split_holdout(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "hold-out fraction must be in [0, 1), got {fraction}"
        )));
    }
    let n = data.len();
    let n_test = (fraction * n as f64).round() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream_rng(seed, stream::SPLIT));
    let mut test: Vec<usize> = ids[..n_test].to_vec();
    let mut train: Vec<usize> = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, "truncated IDX header"))
}

/// Parses an IDX3 unsigned-byte image file into `N × (rows·cols)` features in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor2> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let d = be_u32(bytes, 8)? as usize * be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() < n * d {
        return Err(Error::format(
            (16 + body.len()) as u64,
            format!("IDX image data truncated: need {} bytes", n * d),
        ));
    }
    if body.len() > n * d {
        return Err(Error::format(
            (16 + n * d) as u64,
            "trailing bytes after IDX image data",
        ));
    }
    Tensor2::new(n, d, body.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            (8 + body.len().min(n)) as u64,
            format!(
                "IDX label file holds {} labels, header says {n}",
                body.len()
            ),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair. The class count is `max(label) + 1`, or
/// `classes` when given.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let x = parse_idx_images(&read_file(images)?)?;
    let y = parse_idx_labels(&read_file(labels)?)?;
    if x.rows() != y.len() {
        return Err(Error::Dimension(format!(
            "{} images but {} labels",
            x.rows(),
            y.len()
        )));
    }
    let m = classes.unwrap_or_else(|| y.iter().max().map_or(1, |&m| m + 1));
    if let Some((i, &l)) = y.iter().enumerate().find(|(_, &l)| l >= m) {
        return Err(Error::format(
            8 + i as u64,
            format!("label {l} out of range for {m} classes"),
        ));
    }
    Dataset::new(x, y, m)
}

/// Parses concatenated CIFAR-10 binary records (1 label byte + 3072 pixels).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR10_RECORD_LEN) {
        let whole = bytes.len() / CIFAR10_RECORD_LEN * CIFAR10_RECORD_LEN;
        return Err(Error::format(
            whole as u64,
            format!(
                "CIFAR-10 data length {} is not a multiple of the {CIFAR10_RECORD_LEN}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(Error::format(
                (i * CIFAR10_RECORD_LEN) as u64,
                format!("CIFAR-10 label {label} out of range"),
            ));
        }
        labels.push(label);
        values.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Tensor2::new(n, 3072, values)?, labels, CIFAR10_CLASSES)
}

pub fn load_cifar10(files: &[PathBuf]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for f in files {
        let part = parse_cifar10(&read_file(f)?)?;
        labels.extend_from_slice(part.labels());
        values.extend_from_slice(part.features().values());
    }
    Dataset::new(
        Tensor2::new(labels.len(), 3072, values)?,
        labels,
        CIFAR10_CLASSES,
    )
}

// Native format: header line `#acs-dataset v1\n`, then little-endian
// N u64, dims u32, classes u32, labels u32*, features f64*, noisy count u64,
// noisy ids u64*.
const NATIVE_TAG: &[u8] = b"#acs-dataset v1\n";

pub fn dataset_to_bytes(data: &Dataset) -> Vec<u8> {
    let mut buf = NATIVE_TAG.to_vec();
    buf.extend((data.len() as u64).to_le_bytes());
    buf.extend((data.dims() as u32).to_le_bytes());
    buf.extend((data.classes as u32).to_le_bytes());
    for &y in &data.labels {
        buf.extend((y as u32).to_le_bytes());
    }
    for v in data.features.values() {
        buf.extend(v.to_le_bytes());
    }
    buf.extend((data.noisy_ids.len() as u64).to_le_bytes());
    for &id in &data.noisy_ids {
        buf.extend((id as u64).to_le_bytes());
    }
    buf
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.starts_with(NATIVE_TAG) {
        return Err(Error::format(0, "missing #acs-dataset v1 header"));
    }
    let mut pos = NATIVE_TAG.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format(pos as u64, "truncated dataset file"))?;
        pos += n;
        Ok(s)
    };
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let labels = (0..n)
        .map(|_| take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize))
        .collect::<Result<Vec<_>>>()?;
    let values = (0..n * d)
        .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
        .collect::<Result<Vec<_>>>()?;
    let k = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let noisy = (0..k)
        .map(|_| take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize))
        .collect::<Result<BTreeSet<_>>>()?;
    let end = NATIVE_TAG.len() + 16 + 4 * n + 8 * n * d + 8 + 8 * k;
    if end != bytes.len() {
        return Err(Error::format(end as u64, "trailing bytes after dataset"));
    }
    let mut data = Dataset::new(Tensor2::new(n, d, values)?, labels, m)?;
    if let Some(&bad) = noisy.iter().find(|&&id| id >= n) {
        return Err(Error::Input(format!(
            "noisy id {bad} outside dataset of {n}"
        )));
    }
    data.noisy_ids = noisy;
    Ok(data)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(data)).map_err(|e| Error::io(path, e))
}

pub fn load_native(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&read_file(path)?)
}

/// Where a run's train/test data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Blobs with a seeded hold-out test split.
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Use only the first `limit` training samples.
        #[serde(default)]
        limit: Option<usize>,
    },
    Cifar10Bin {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
    },
    Native {
        train: PathBuf,
        test: PathBuf,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

fn truncate(data: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(k) if k < data.len() => data.subset(&(0..k).collect::<Vec<_>>()),
        _ => Ok(data),
    }
}

/// Loads `(train, test)` for a source.
pub fn load_dataset(source: &DataSource) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Synthetic {
            spec,
            test_fraction,
        } => split_holdout(&generate_synthetic(spec)?, *test_fraction, spec.seed),
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
        } => {
            let train = load_idx(train_images, train_labels, None)?;
            let test = load_idx(test_images, test_labels, Some(train.classes()))?;
            Ok((truncate(train, *limit)?, test))
        }
        DataSource::Cifar10Bin {
            train_files,
            test_files,
            limit,
        } => Ok((
            truncate(load_cifar10(train_files)?, *limit)?,
            load_cifar10(test_files)?,
        )),
        DataSource::Native { train, test } => Ok((load_native(train)?, load_native(test)?)),
    }
}

/// Re-labels exactly `round(ρ·N)` distinct samples, each to a class drawn
/// uniformly from the `M − 1` classes other than its original one.
pub fn inject_label_noise(data: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "noise fraction must be in [0, 1), got {rho}"
        )));
    }
    let n = data.len();
    let count = (rho * n as f64).round() as usize;
    let mut out = data.clone();
    if count == 0 {
        return Ok(out);
    }
    if data.classes < 2 {
        return Err(Error::Config(
            "label noise needs at least two classes".into(),
        ));
    }
    let mut rng = rng::stream_rng(seed, stream::NOISE);
    let mut chosen: Vec<usize> = sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for &id in &chosen {
        let orig = out.labels[id];
        let draw = rng.gen_range(0..data.classes - 1);
        out.labels[id] = if draw >= orig { draw + 1 } else { draw };
    }
    out.noisy_ids.extend(chosen);
    Ok(out)
}

/// `|pruned ∩ noisy| / |noisy|`.
pub fn noisy_recall(pruned: &BTreeSet<usize>, noisy: &BTreeSet<usize>) -> Result<f64> {
    if noisy.is_empty() {
        return Err(Error::Input(
            "noisy recall is undefined without noisy samples".into(),
        ));
    }
    Ok(pruned.intersection(noisy).count() as f64 / noisy.len() as f64)
}

/// Ids `0..n` not in `kept`.
pub fn pruned_ids(n: usize, kept: &[usize]) -> BTreeSet<usize> {
    let kept: BTreeSet<usize> = kept.iter().copied().collect();
    (0..n).filter(|i| !kept.contains(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn idx_header_arithmetic() {
        let px: Vec<u8> = (0..12).map(|i| i * 20).collect();
        let x = parse_idx_images(&idx_images(3, 2, 2, &px)).unwrap();
        assert_eq!((x.rows(), x.cols()), (3, 4));
        assert_eq!(x.get(2, 3), 220.0 / 255.0);
        assert!(x.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_errors_name_offsets() {
        let mut bad = idx_images(3, 2, 2, &[0; 12]);
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let short = idx_images(3, 2, 2, &[0; 10]);
        assert!(matches!(
            parse_idx_images(&short),
            Err(Error::Format { offset: 26, .. })
        ));
        assert!(matches!(
            parse_idx_images(&[0, 0]),
            Err(Error::Format { .. })
        ));
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend(4u32.to_be_bytes());
        labels.extend([1, 2, 3]);
        assert!(matches!(
            parse_idx_labels(&labels),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn idx_pair_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let (xi, yi) = (dir.path().join("x"), dir.path().join("y"));
        std::fs::write(&xi, idx_images(3, 2, 2, &[7; 12])).unwrap();
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend(3u32.to_be_bytes());
        labels.extend([0, 2, 1]);
        std::fs::write(&yi, &labels).unwrap();
        let d = load_idx(&xi, &yi, None).unwrap();
        assert_eq!((d.len(), d.dims(), d.classes()), (3, 4, 3));
        assert!(matches!(
            load_idx(&xi, &yi, Some(2)),
            Err(Error::Format { offset: 9, .. })
        ));
    }

    #[test]
    fn cifar_record_stride() {
        let mut rec = vec![3u8];
        rec.extend(vec![255u8; 3072]);
        let mut two = rec.clone();
        two.extend(&rec);
        let d = parse_cifar10(&two).unwrap();
        assert_eq!((d.len(), d.dims(), d.label(1)), (2, 3072, 3));
        assert!(matches!(
            parse_cifar10(&two[..3072 * 2]),
            Err(Error::Format { offset: 3073, .. })
        ));
        let mut badlabel = two.clone();
        badlabel[3073] = 10;
        assert!(matches!(
            parse_cifar10(&badlabel),
            Err(Error::Format { offset: 3073, .. })
        ));
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec {
            classes: 2,
            dims: 2,
            per_class: 50,
            spread: 0.1,
            seed: 1,
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.labels().iter().filter(|&&y| y == 0).count(), 50);
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_ne!(
            a,
            generate_synthetic(&SyntheticSpec { seed: 2, ..spec }).unwrap()
        );
    }

    #[test]
    fn holdout_split_sizes() {
        let spec = SyntheticSpec {
            classes: 3,
            dims: 4,
            per_class: 100,
            spread: 0.2,
            seed: 9,
        };
        let (train, test) = split_holdout(&generate_synthetic(&spec).unwrap(), 0.2, 9).unwrap();
        assert_eq!((train.len(), test.len()), (240, 60));
    }

    fn blobs(n_per: usize, m: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            classes: m,
            dims: 3,
            per_class: n_per,
            spread: 0.1,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn noise_injection_counts() {
        let clean = blobs(25, 4);
        let noisy = inject_label_noise(&clean, 0.1, 7).unwrap();
        assert_eq!(noisy.noisy_ids().len(), 10);
        for id in 0..clean.len() {
            assert_eq!(noisy.feature(id), clean.feature(id));
            let changed = noisy.label(id) != clean.label(id);
            assert_eq!(changed, noisy.noisy_ids().contains(&id));
        }
        assert_eq!(noisy, inject_label_noise(&clean, 0.1, 7).unwrap());
        let none = inject_label_noise(&clean, 0.0, 7).unwrap();
        assert_eq!(none, clean);
        assert!(none.noisy_ids().is_empty());
        assert!(inject_label_noise(&clean, 1.0, 7).is_err());
    }

    #[test]
    fn recall_examples() {
        let noisy: BTreeSet<usize> = (0..10).collect();
        assert_eq!(noisy_recall(&(0..20).collect(), &noisy).unwrap(), 1.0);
        assert_eq!(noisy_recall(&(10..20).collect(), &noisy).unwrap(), 0.0);
        assert_eq!(noisy_recall(&(3..20).collect(), &noisy).unwrap(), 0.7);
        assert!(noisy_recall(&noisy, &BTreeSet::new()).is_err());
        assert_eq!(pruned_ids(5, &[1, 3]), [0, 2, 4].into_iter().collect());
    }

    #[test]
    fn native_roundtrip_bit_exact() {
        let d = inject_label_noise(&blobs(10, 3), 0.2, 1).unwrap();
        let bytes = dataset_to_bytes(&d);
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(dataset_to_bytes(&back), bytes);
        assert!(dataset_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
