//! Dataset loading, normalization, subsetting and teacher-logit tables.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{Shape3, Tensor};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
/// MNIST, FashionMNIST and CIFAR10 all have ten classes.
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Granularity of z-score statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// One mean and standard deviation per pixel of every channel.
    PerFeature,
    /// One mean and standard deviation per image channel, pooled over pixels.
    #[default]
    PerChannel,
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationMode::PerFeature => "per-feature",
            NormalizationMode::PerChannel => "per-channel",
        })
    }
}

impl std::str::FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "per-feature" | "feature" => Ok(NormalizationMode::PerFeature),
            "per-channel" | "channel" => Ok(NormalizationMode::PerChannel),
            other => Err(Error::Config(format!(
                "unknown normalization {other:?} (expected per-feature or per-channel)"
            ))),
        }
    }
}

/// Z-score statistics expanded to one entry per feature, and where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mode: NormalizationMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero standard deviation; they normalize to 0.
    pub zero_std: Vec<usize>,
    /// Split the statistics were fitted on.
    pub fitted_on: Split,
    /// Fingerprint of the fitting data.
    pub source: u64,
}

/// Images `[N, c, h, w]`, labels, and the original index of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    keys: Vec<usize>,
    num_classes: usize,
    split: Split,
    normalization: Option<Normalizer>,
}

impl Dataset {
    /// `images` must be rank 4; sample keys default to `0..N`.
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "images must be [N, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Range(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        let keys = (0..labels.len()).collect();
        Ok(Self {
            images,
            labels,
            keys,
            num_classes,
            split,
            normalization: None,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Original index of each sample in the file it was loaded from.
    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn normalization(&self) -> Option<&Normalizer> {
        self.normalization.as_ref()
    }

    pub fn sample_shape(&self) -> Shape3 {
        let s = self.images.shape();
        Shape3::new(s[1], s[2], s[3])
    }

    pub fn feature_len(&self) -> usize {
        self.images.row_len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let n = self.feature_len();
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data)
                .expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            keys: indices.iter().map(|&i| self.keys[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Batch tensor `[B, c, h, w]` for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.select(indices).images
    }

    /// Seeded shuffle of `0..N` cut into batches of at most `batch_size`.
    pub fn shuffled_batches(&self, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Order-sensitive FNV-1a hash of shapes, pixels, labels and keys.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for &d in self.images.shape() {
            h.write(&(d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.write(&v.to_bits().to_le_bytes());
        }
        for (&l, &k) in self.labels.iter().zip(&self.keys) {
            h.write(&(l as u64).to_le_bytes());
            h.write(&(k as u64).to_le_bytes());
        }
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, 0, format!("corrupt gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header"))
}

fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            path,
            (16 + body.len()) as u64,
            format!(
                "truncated pixel data: expected {need} bytes, found {}",
                body.len()
            ),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad label magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            path,
            (8 + body.len()) as u64,
            format!("truncated labels: expected {n}, found {}", body.len()),
        ));
    }
    body[..n]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < NUM_CLASSES {
                Ok(b as usize)
            } else {
                Err(Error::format(
                    path,
                    (8 + i) as u64,
                    format!("label {b} out of range"),
                ))
            }
        })
        .collect()
}

/// Loads an IDX image/label pair (optionally gzipped), scaling pixels to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::format(
            labels_path,
            4,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels,
        NUM_CLASSES,
        Split::Train,
    )
}

/// Locates `{prefix}-images-idx3-ubyte[.gz]` and the matching labels in `dir`.
pub fn idx_paths(dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let find = |stem: String| -> Result<PathBuf> {
        for candidate in [
            dir.join(format!("{stem}.gz")),
            dir.join(&stem),
            dir.join(stem.replace("-idx", ".idx")),
        ] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
        Err(Error::io(
            dir.join(&stem),
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "IDX file not found (also tried .gz)",
            ),
        ))
    };
    Ok((
        find(format!("{prefix}-images-idx3-ubyte"))?,
        find(format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

/// Train (`train-*`) or test (`t10k-*`) split of an MNIST-layout directory.
pub fn load_idx_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = if split == Split::Test {
        "t10k"
    } else {
        "train"
    };
    let (images, labels) = idx_paths(dir, prefix)?;
    Ok(load_idx(&images, &labels)?.with_split(split))
}

/// Concatenates CIFAR10 binary batches (3073-byte records).
pub fn load_cifar10(batch_paths: &[PathBuf]) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::Config("no CIFAR10 batch files given".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            let full = bytes.len() / CIFAR_RECORD_LEN;
            return Err(Error::format(
                path,
                (full * CIFAR_RECORD_LEN) as u64,
                format!(
                    "file size {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record",
                    bytes.len()
                ),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            let label = rec[0] as usize;
            if label >= NUM_CLASSES {
                return Err(Error::format(
                    path,
                    (r * CIFAR_RECORD_LEN) as u64,
                    format!("label {label} out of range"),
                ));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        NUM_CLASSES,
        Split::Train,
    )
}

/// `data_batch_{1..5}.bin` or `test_batch.bin` under `dir`.
pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let paths: Vec<PathBuf> = if split == Split::Test {
        vec![dir.join("test_batch.bin")]
    } else {
        (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect()
    };
    Ok(load_cifar10(&paths)?.with_split(split))
}

/// Per-feature population mean and standard deviation.
pub fn fit_normalizer(train: &Dataset) -> Result<Normalizer> {
    fit_normalizer_with(train, NormalizationMode::PerFeature)
}

/// Population statistics at the requested granularity.
pub fn fit_normalizer_with(train: &Dataset, mode: NormalizationMode) -> Result<Normalizer> {
    if train.is_empty() {
        return Err(Error::Config(
            "cannot fit a normalizer on an empty split".into(),
        ));
    }
    match mode {
        NormalizationMode::PerFeature => fit_per_feature(train),
        NormalizationMode::PerChannel => fit_per_channel(train),
    }
}

fn fit_per_channel(train: &Dataset) -> Result<Normalizer> {
    let shape = train.sample_shape();
    let plane = shape.h * shape.w;
    let n = (train.len() * plane) as f64;
    let mut mean_c = vec![0.0; shape.c];
    for row in train.images.rows() {
        for (c, m) in mean_c.iter_mut().enumerate() {
            *m += row[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
    }
    mean_c.iter_mut().for_each(|m| *m /= n);
    let mut var_c = vec![0.0; shape.c];
    for row in train.images.rows() {
        for (c, v) in var_c.iter_mut().enumerate() {
            *v += row[c * plane..(c + 1) * plane]
                .iter()
                .map(|x| (x - mean_c[c]) * (x - mean_c[c]))
                .sum::<f64>();
        }
    }
    let std_c: Vec<f64> = var_c.iter().map(|v| (v / n).sqrt()).collect();
    let expand = |v: &[f64]| {
        v.iter()
            .flat_map(|&x| std::iter::repeat_n(x, plane))
            .collect::<Vec<_>>()
    };
    let std = expand(&std_c);
    let zero_std = (0..std.len()).filter(|&i| std[i] == 0.0).collect();
    Ok(Normalizer {
        mode: NormalizationMode::PerChannel,
        mean: expand(&mean_c),
        std,
        zero_std,
        fitted_on: train.split,
        source: train.fingerprint(),
    })
}

fn fit_per_feature(train: &Dataset) -> Result<Normalizer> {
    let d = train.feature_len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for row in train.images.rows() {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in train.images.rows() {
        var.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((v, x), m)| *v += (x - m) * (x - m));
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let zero_std = std
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(Normalizer {
        mode: NormalizationMode::PerFeature,
        mean,
        std,
        zero_std,
        fitted_on: train.split,
        source: train.fingerprint(),
    })
}

/// `z = (x − μ)/σ`, with zero-variance features mapped to 0.
pub fn apply_normalizer(ds: &Dataset, norm: &Normalizer) -> Result<Dataset> {
    let d = ds.feature_len();
    if norm.mean.len() != d || norm.std.len() != d {
        return Err(Error::Shape(format!(
            "normalizer has {} features, dataset has {d}",
            norm.mean.len()
        )));
    }
    let inv: Vec<f64> = norm
        .std
        .iter()
        .map(|s| if *s == 0.0 { 0.0 } else { 1.0 / s })
        .collect();
    let mut out = ds.clone();
    for row in out.images.data_mut().chunks_exact_mut(d.max(1)) {
        for ((x, m), k) in row.iter_mut().zip(&norm.mean).zip(&inv) {
            *x = (*x - m) * k;
        }
    }
    out.normalization = Some(norm.clone());
    Ok(out)
}

fn class_buckets(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut buckets = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        buckets[l].push(i);
    }
    buckets
}

/// Seeded, class-balanced subset with `per_class` samples of every label,
/// kept in original order.
pub fn subset(ds: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * ds.num_classes);
    for (class, mut bucket) in class_buckets(ds).into_iter().enumerate() {
        if bucket.len() < per_class {
            return Err(Error::Config(format!(
                "class {class} has {} samples, {per_class} requested",
                bucket.len()
            )));
        }
        bucket.shuffle(&mut rng);
        chosen.extend_from_slice(&bucket[..per_class]);
    }
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}

/// Stratified, seeded split into `(train, val)` with `val_fraction` of each
/// class (at least one per non-empty class) in the validation part.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut bucket in class_buckets(ds) {
        if bucket.is_empty() {
            continue;
        }
        bucket.shuffle(&mut rng);
        let k = ((bucket.len() as f64 * val_fraction).round() as usize).clamp(1, bucket.len());
        val.extend_from_slice(&bucket[..k]);
        train.extend_from_slice(&bucket[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    if train.is_empty() {
        return Err(Error::Config(
            "validation split leaves no training samples".into(),
        ));
    }
    Ok((ds.select(&train), ds.select(&val).with_split(Split::Val)))
}

pub const LOGITS_HEADER: &str = "qdistill-teacher-logits v1";

/// Per-sample teacher logits keyed by original dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    teacher_name: String,
    num_classes: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl TeacherLogits {
    pub fn new(teacher_name: impl Into<String>, num_classes: usize) -> Result<Self> {
        let teacher_name = teacher_name.into();
        if teacher_name.is_empty() || teacher_name.contains(char::is_whitespace) {
            return Err(Error::Config(format!(
                "invalid teacher name {teacher_name:?}"
            )));
        }
        Ok(Self {
            teacher_name,
            num_classes,
            rows: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, key: usize, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "{} logits for a {}-class table",
                logits.len(),
                self.num_classes
            )));
        }
        self.rows.insert(key, logits);
        Ok(())
    }

    pub fn teacher_name(&self) -> &str {
        &self.teacher_name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, key: usize) -> Option<&[f64]> {
        self.rows.get(&key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Errors with every key of `ds` that has no row.
    pub fn check_coverage(&self, ds: &Dataset) -> Result<()> {
        if ds.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "teacher has {} classes, dataset {}",
                self.num_classes, ds.num_classes
            )));
        }
        let missing: Vec<usize> = ds
            .keys
            .iter()
            .copied()
            .filter(|k| !self.rows.contains_key(k))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Coverage { missing })
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{LOGITS_HEADER} teacher={} classes={} rows={}\n",
            self.teacher_name,
            self.num_classes,
            self.rows.len()
        );
        for (k, v) in &self.rows {
            s.push_str(&k.to_string());
            for x in v {
                s.push(',');
                s.push_str(&format!("{x:?}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut offset = 0usize;
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().unwrap_or("").trim_end();
        let rest = header
            .strip_prefix(LOGITS_HEADER)
            .ok_or_else(|| Error::format(path, 0, format!("expected header {LOGITS_HEADER:?}")))?;
        let mut name = None;
        let mut classes = None;
        let mut rows = None;
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| {
                Error::format(path, 0, format!("malformed header field {field:?}"))
            })?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::format(path, 0, format!("bad {k} value {v:?}")))
            };
            match k {
                "teacher" => name = Some(v.to_string()),
                "classes" => classes = Some(num()?),
                "rows" => rows = Some(num()?),
                _ => {
                    return Err(Error::format(
                        path,
                        0,
                        format!("unknown header field {k:?}"),
                    ))
                }
            }
        }
        let (Some(name), Some(classes), Some(rows)) = (name, classes, rows) else {
            return Err(Error::format(
                path,
                0,
                "header needs teacher, classes and rows",
            ));
        };
        let mut table =
            TeacherLogits::new(name, classes).map_err(|e| Error::format(path, 0, e.to_string()))?;
        offset += text.split_inclusive('\n').next().map_or(0, str::len);
        for line in lines {
            let here = offset as u64;
            offset += line.len();
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let key: usize = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| {
                    Error::format(path, here, "row does not start with a sample index")
                })?;
            let values = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format(path, here, format!("unparsable logit in row {key}")))?;
            if values.len() != classes {
                return Err(Error::format(
                    path,
                    here,
                    format!(
                        "row {key} has {} logits, header says {classes}",
                        values.len()
                    ),
                ));
            }
            if table.rows.insert(key, values).is_some() {
                return Err(Error::format(path, here, format!("duplicate row {key}")));
            }
        }
        if table.rows.len() != rows {
            return Err(Error::format(
                path,
                offset as u64,
                format!("header promises {rows} rows, found {}", table.rows.len()),
            ));
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Reads a logits file and checks it covers every sample of `ds`.
pub fn load_teacher_logits(path: &Path, ds: &Dataset) -> Result<TeacherLogits> {
    let table = TeacherLogits::read(path)?;
    if table.num_classes != ds.num_classes {
        return Err(Error::format(
            path,
            0,
            format!(
                "table has {} classes, dataset has {}",
                table.num_classes, ds.num_classes
            ),
        ));
    }
    table.check_coverage(ds)?;
    Ok(table)
}
