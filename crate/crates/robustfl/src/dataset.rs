//! Labeled classification data: IDX loading, synthetic generation, and
//! client partitioning (IID and label-skewed Non-IID).

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Immutable labeled dataset: a row-major feature matrix in `[0,1]` plus
/// integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if n_features == 0 || num_classes == 0 {
            return Err(Error::invalid("n_features and num_classes must be positive"));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::invalid(format!(
                "feature matrix has {} entries, expected {} rows x {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteResult("LabeledDataset::new"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// A new dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("LabeledDataset::subset"));
        }
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("subset index {i} out of range")));
            }
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(features, self.n_features, labels, self.num_classes)
    }

    /// The first `limit` rows (all rows when `limit` exceeds the length).
    pub fn head(&self, limit: usize) -> Result<LabeledDataset> {
        let n = limit.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        self.subset(&indices)
    }

    /// Replaces the labels wholesale; used by attack transforms.
    pub(crate) fn with_labels(&self, labels: Vec<usize>) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.features.clone(),
            self.n_features,
            labels,
            self.num_classes,
        )
    }
}

/// Disjoint assignment of dataset rows to `K` clients; every client gets at
/// least one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(assignments: Vec<Vec<usize>>, parent_len: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (k, set) in assignments.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::invalid(format!("client {k} received no samples")));
            }
            for &i in set {
                if i >= parent_len {
                    return Err(Error::invalid(format!("partition index {i} out of range")));
                }
                if !seen.insert(i) {
                    return Err(Error::invalid(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(Self { assignments })
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_indices(&self, k: usize) -> &[usize] {
        &self.assignments[k]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }
}

fn read_u32_be(reader: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::TruncatedFile(format!("while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an MNIST-style IDX image/label file pair.
///
/// Headers are big-endian 32-bit words; magic `0x00000803` for images and
/// `0x00000801` for labels. Pixels come out scaled to `[0,1]`; labels must
/// be 0-9. With `limit`, only the first `limit` samples are kept.
pub fn load_mnist(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<LabeledDataset> {
    let mut img = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut img, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n_images = read_u32_be(&mut img, "image count")? as usize;
    let rows = read_u32_be(&mut img, "row count")? as usize;
    let cols = read_u32_be(&mut img, "column count")? as usize;
    let n_features = rows * cols;
    if n_features == 0 {
        return Err(Error::invalid("IDX image dimensions are zero"));
    }

    let mut lbl = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lbl, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = read_u32_be(&mut lbl, "label count")? as usize;
    if n_labels != n_images {
        return Err(Error::invalid(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }

    let n = limit.map_or(n_images, |l| l.min(n_images));

    let mut pixel_buf = vec![0u8; n * n_features];
    img.read_exact(&mut pixel_buf)
        .map_err(|_| Error::TruncatedFile("image data shorter than header".into()))?;
    let mut label_buf = vec![0u8; n];
    lbl.read_exact(&mut label_buf)
        .map_err(|_| Error::TruncatedFile("label data shorter than header".into()))?;

    let features: Vec<f64> = pixel_buf.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = label_buf.iter().map(|&l| l as usize).collect();
    LabeledDataset::new(features, n_features, labels, 10)
}

/// Writes a dataset as an IDX image/label file pair (the exact format
/// [`load_mnist`] reads). Features must be `rows x cols` per sample; each
/// value is quantized to a byte via `round(v * 255)`. A write/load round
/// trip is bit-exact whenever every feature is of the form `k/255`.
pub fn write_idx(
    ds: &LabeledDataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if rows * cols != ds.n_features() {
        return Err(Error::invalid(format!(
            "{rows}x{cols} does not match {} features",
            ds.n_features()
        )));
    }
    if ds.num_classes() > 256 {
        return Err(Error::invalid("IDX labels are single bytes"));
    }
    let mut img = BufWriter::new(File::create(images_path)?);
    img.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    img.write_all(&(ds.len() as u32).to_be_bytes())?;
    img.write_all(&(rows as u32).to_be_bytes())?;
    img.write_all(&(cols as u32).to_be_bytes())?;
    for &v in ds.features() {
        img.write_all(&[(v * 255.0).round().clamp(0.0, 255.0) as u8])?;
    }
    img.flush()?;

    let mut lbl = BufWriter::new(File::create(labels_path)?);
    lbl.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lbl.write_all(&(ds.len() as u32).to_be_bytes())?;
    for &l in ds.labels() {
        lbl.write_all(&[l as u8])?;
    }
    lbl.flush()?;
    Ok(())
}

/// Synthesizes Gaussian class clusters: one cluster center per class, drawn
/// deterministically from `seed`, with per-sample isotropic noise of the
/// given `spread`. Samples interleave classes (`label = i % num_classes`) so
/// any prefix stays balanced; features are clamped to `[0,1]`.
pub fn synth_blobs(
    n_per_class: usize,
    num_classes: usize,
    n_features: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_class == 0 || num_classes == 0 || n_features == 0 {
        return Err(Error::invalid("synth_blobs counts must be positive"));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::invalid("spread must be a positive finite real"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let c: Vec<f64> = (0..n_features).map(|_| rng.gen_range(0.2..0.8)).collect();
        centers.push(c);
    }
    let n = n_per_class * num_classes;
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        for j in 0..n_features {
            let noise: f64 = rng.sample(StandardNormal);
            features.push((centers[label][j] + spread * noise).clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    LabeledDataset::new(features, n_features, labels, num_classes)
}

const DIGIT_SIDE: usize = 28;

/// Synthesizes a 10-class 28x28 grayscale image dataset with the same
/// schema as MNIST: each class has a smooth random prototype built from a
/// few Gaussian bumps, and each sample is the prototype under a small pixel
/// shift plus pixel noise, quantized to bytes. Pixel values are exactly
/// `k/255`, so [`write_idx`] followed by [`load_mnist`] round-trips
/// bit-exactly. Samples interleave classes (`label = i % 10`).
pub fn synth_digits(n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive"));
    }
    let num_classes = 10;
    let side = DIGIT_SIDE as f64;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                let cx = proto_rng.gen_range(6.0..side - 6.0);
                let cy = proto_rng.gen_range(6.0..side - 6.0);
                let sigma = proto_rng.gen_range(2.0..4.5);
                let amp = proto_rng.gen_range(0.6..1.0);
                (cx, cy, sigma, amp)
            })
            .collect();
        let mut img = vec![0.0; DIGIT_SIDE * DIGIT_SIDE];
        for y in 0..DIGIT_SIDE {
            for x in 0..DIGIT_SIDE {
                let mut v = 0.0;
                for &(cx, cy, sigma, amp) in &bumps {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
                img[y * DIGIT_SIDE + x] = v.min(1.0);
            }
        }
        prototypes.push(img);
    }

    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED_D161_75));
    let n = n_per_class * num_classes;
    let mut features = Vec::with_capacity(n * DIGIT_SIDE * DIGIT_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let proto = &prototypes[label];
        let dx = sample_rng.gen_range(-1i64..=1);
        let dy = sample_rng.gen_range(-1i64..=1);
        for y in 0..DIGIT_SIDE as i64 {
            for x in 0..DIGIT_SIDE as i64 {
                let sx = x - dx;
                let sy = y - dy;
                let base = if (0..DIGIT_SIDE as i64).contains(&sx)
                    && (0..DIGIT_SIDE as i64).contains(&sy)
                {
                    proto[sy as usize * DIGIT_SIDE + sx as usize]
                } else {
                    0.0
                };
                let noise: f64 = sample_rng.sample(StandardNormal);
                let v = (base + 0.12 * noise).clamp(0.0, 1.0);
                let byte = (v * 255.0).round();
                features.push(byte / 255.0);
            }
        }
        labels.push(label);
    }
    LabeledDataset::new(features, DIGIT_SIDE * DIGIT_SIDE, labels, num_classes)
}

/// Random even split: a seeded permutation cut into `K` parts whose sizes
/// differ by at most one (the first `n mod K` clients get the extra row).
pub fn partition_iid(ds: &LabeledDataset, k: usize, seed: u64) -> Result<Partition> {
    if k == 0 || k > ds.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples across {k} clients",
            ds.len()
        )));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);

    let base = ds.len() / k;
    let extra = ds.len() % k;
    let mut assignments = Vec::with_capacity(k);
    let mut cursor = 0;
    for client in 0..k {
        let size = base + usize::from(client < extra);
        assignments.push(perm[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Partition::new(assignments, ds.len())
}

/// Label-skewed split controlled by `q`: clients are divided into
/// `num_classes` equal groups (client `c` belongs to group `c % L`), and a
/// sample with label `l` lands in group `l` with probability `q`, otherwise
/// uniformly in one of the other groups. Within a group, samples are dealt
/// round-robin so client shard sizes stay even. Larger `q` means stronger
/// heterogeneity; `q = 1/L` matches a uniform spread.
pub fn partition_noniid(ds: &LabeledDataset, k: usize, q: f64, seed: u64) -> Result<Partition> {
    let l = ds.num_classes();
    if k == 0 || k % l != 0 {
        return Err(Error::invalid(format!(
            "client count {k} must be a positive multiple of {l} classes"
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("q={q} outside [0,1]")));
    }
    let per_group = k / l;
    // group g owns clients {g, g+L, g+2L, ...}
    let members: Vec<Vec<usize>> = (0..l)
        .map(|g| (0..per_group).map(|i| g + i * l).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut counters = vec![0usize; l];
    for i in 0..ds.len() {
        let label = ds.label(i);
        let group = if rng.gen_range(0.0..1.0) < q || l == 1 {
            label
        } else {
            // uniform over the other L-1 groups
            let r = rng.gen_range(0..l - 1);
            if r < label {
                r
            } else {
                r + 1
            }
        };
        let client = members[group][counters[group] % per_group];
        counters[group] += 1;
        assignments[client].push(i);
    }
    Partition::new(assignments, ds.len())
}
