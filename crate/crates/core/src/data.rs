//! Datasets, the raw binary image format, synthetic data and batching.
//!
//! The on-disk format is the CIFAR binary layout: each record is one label
//! byte followed by `C·H·W` pixel bytes in channel-major order. A sidecar text
//! file of `key=value` lines describes the records:
//!
//! ```text
//! channels=3
//! height=32
//! width=32
//! records=50000
//! classes=100
//! split=train
//! labeled=true
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub records: usize,
    pub num_classes: usize,
    pub split: String,
    /// Unlabeled data still carries a label byte on disk; it is ignored.
    pub labeled: bool,
}

impl DatasetMeta {
    pub fn record_len(&self) -> usize {
        1 + self.channels * self.height * self.width
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("channels", self.channels.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("records", self.records.to_string()),
            ("classes", self.num_classes.to_string()),
            ("split", self.split.clone()),
            ("labeled", self.labeled.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("line {}: expected key=value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| {
            kv.remove(key).ok_or_else(|| Error::format(origin, format!("missing key `{key}`")))
        };
        let num = |key: &str, v: String| {
            v.parse::<usize>().map_err(|_| Error::format(origin, format!("`{key}` is not an integer: {v}")))
        };
        let meta = Self {
            channels: num("channels", take("channels")?)?,
            height: num("height", take("height")?)?,
            width: num("width", take("width")?)?,
            records: num("records", take("records")?)?,
            num_classes: num("classes", take("classes")?)?,
            split: take("split")?,
            labeled: match take("labeled")?.as_str() {
                "true" => true,
                "false" => false,
                other => return Err(Error::format(origin, format!("`labeled` must be true or false, got {other}"))),
            },
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::format(origin, format!("unknown key `{k}`")));
        }
        Ok(meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Sidecar path for a data file: `x.bin` → `x.meta`.
pub fn meta_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("meta")
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N_d, C, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub split: String,
}

/// One mini-batch with the dataset indices of its samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("dataset images must be rank 4, got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::Shape(format!("{} labels for {} images", l.len(), images.shape()[0])));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Usage(format!("label {bad} out of range for {num_classes} classes")));
            }
        }
        Ok(Self { images, labels, num_classes, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Same images without labels.
    pub fn unlabeled(&self) -> Self {
        Self { labels: None, ..self.clone() }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        self.batch_flipped(indices, &[])
    }

    /// Builds a batch, mirroring horizontally the samples whose flag is set.
    fn batch_flipped(&self, indices: &[usize], flip: &[bool]) -> Result<Batch> {
        let [c, h, w] = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample index {i} out of range for {} samples", self.len())));
            }
            let s = self.sample(i);
            if flip.get(k).copied().unwrap_or(false) {
                for row in s.chunks_exact(w) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(s);
            }
        }
        Ok(Batch {
            images: Tensor::new(data, &[indices.len(), c, h, w])?,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            indices: indices.to_vec(),
        })
    }

    /// Subset in the given order.
    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Self> {
        let b = self.batch(indices)?;
        Self::new(b.images, b.labels, self.num_classes, split)
    }

    /// Moves `test_fraction` of each class (rounded down) into a test split.
    /// Which samples go where is decided by a seeded shuffle.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Parameter(format!("test fraction must lie in [0, 1), got {test_fraction}")));
        }
        let labels = self.labels.as_ref().ok_or_else(|| Error::Usage("stratified split needs labels".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == class).collect();
            members.shuffle(&mut rng);
            let k = (members.len() as f64 * test_fraction).floor() as usize;
            test.extend_from_slice(&members[..k]);
            train.extend_from_slice(&members[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train, "train")?, self.subset(&test, "test")?))
    }

    pub fn meta(&self) -> DatasetMeta {
        let [channels, height, width] = self.sample_shape();
        DatasetMeta {
            channels,
            height,
            width,
            records: self.len(),
            num_classes: self.num_classes,
            split: self.split.clone(),
            labeled: self.labels.is_some(),
        }
    }

    /// Raw records. Pixels are rounded to the nearest `k/255`; missing labels
    /// are written as 0.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let n = self.sample_len();
        let mut out = Vec::with_capacity(self.len() * (1 + n));
        for i in 0..self.len() {
            out.push(self.labels.as_ref().map_or(0, |l| l[i] as u8));
            out.extend(self.sample(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        out
    }

    /// Writes `path` and its `.meta` sidecar.
    pub fn write_raw_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.num_classes > 256 {
            return Err(Error::Usage("the raw format stores labels in one byte".into()));
        }
        std::fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))?;
        let mp = meta_path(path);
        std::fs::write(&mp, self.meta().to_text()).map_err(|e| Error::io(&mp, e))
    }
}

pub fn pixel_value(byte: u8) -> f64 {
    byte as f64 / 255.0
}

pub fn parse_raw_binary(buf: &[u8], meta: &DatasetMeta, origin: &Path) -> Result<Dataset> {
    let rec = meta.record_len();
    let expected = meta.records * rec;
    if buf.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "expected {expected} bytes ({} records of {rec}), found {}",
                meta.records,
                buf.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(meta.records * (rec - 1));
    let mut labels = Vec::with_capacity(meta.records);
    for (i, r) in buf.chunks_exact(rec).enumerate() {
        if meta.labeled && r[0] as usize >= meta.num_classes {
            return Err(Error::format(
                origin,
                format!("record {i}: label {} not below {} classes", r[0], meta.num_classes),
            ));
        }
        labels.push(r[0] as usize);
        images.extend(r[1..].iter().map(|&b| pixel_value(b)));
    }
    let images = Tensor::new(images, &[meta.records, meta.channels, meta.height, meta.width])?;
    Dataset::new(images, meta.labeled.then_some(labels), meta.num_classes, meta.split.clone())
}

pub fn load_raw_binary(path: impl AsRef<Path>, meta: &DatasetMeta) -> Result<Dataset> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_raw_binary(&buf, meta, path)
}

/// Loads `path` using the metadata in its `.meta` sidecar.
pub fn load_with_sidecar(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    load_raw_binary(path, &DatasetMeta::load(meta_path(path))?)
}

/// Generator for class-conditional blob images.
///
/// Every class owns a few Gaussian blobs with fixed centres, widths and
/// per-channel colours, drawn from `prototype_seed`. A sample places its
/// class's blobs with jittered centres and amplitudes on a grey background
/// and adds pixel noise. Two generators with different prototype seeds give
/// two domains built from the same kind of features.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    pub prototype_seed: u64,
    pub blobs_per_class: usize,
    /// Blob-centre jitter as a fraction of the image side.
    pub jitter: f64,
    /// Per-sample amplitude spread: amplitudes are drawn from `1 ± spread`.
    pub amplitude_spread: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

struct Blob {
    cy: f64,
    cx: f64,
    width: f64,
    colour: Vec<f64>,
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, per_class: usize, shape: [usize; 3], prototype_seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            shape,
            prototype_seed,
            blobs_per_class: 2,
            jitter: 0.08,
            amplitude_spread: 0.3,
            noise: 0.1,
        }
    }

    fn prototypes(&self) -> Vec<Vec<Blob>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let side = self.shape[1].min(self.shape[2]) as f64;
        (0..self.num_classes)
            .map(|_| {
                (0..self.blobs_per_class)
                    .map(|_| Blob {
                        cy: rng.random_range(0.2..0.8) * self.shape[1] as f64,
                        cx: rng.random_range(0.2..0.8) * self.shape[2] as f64,
                        width: rng.random_range(0.1..0.25) * side,
                        colour: (0..self.shape[0]).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    })
                    .collect()
            })
            .collect()
    }

    /// Draws `per_class` samples of every class, interleaved so sample `i`
    /// has label `i mod c`.
    pub fn generate(&self, sample_seed: u64, split: &str) -> Result<Dataset> {
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        let [c, h, w] = self.shape;
        let protos = self.prototypes();
        let side = h.min(w) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let n = self.num_classes * self.per_class;
        let mut images = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        let mut img = vec![0.0; c * h * w];
        for i in 0..n {
            let class = i % self.num_classes;
            img.fill(0.5);
            for blob in &protos[class] {
                let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
                let cy = blob.cy + self.jitter * side * gauss();
                let cx = blob.cx + self.jitter * side * gauss();
                let amp = 0.35 * (1.0 + rng.random_range(-self.amplitude_spread..=self.amplitude_spread));
                let inv = 1.0 / (2.0 * blob.width * blob.width);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        let g = amp * (-d2 * inv).exp();
                        for (ch, col) in blob.colour.iter().enumerate() {
                            img[(ch * h + y) * w + x] += col * g;
                        }
                    }
                }
            }
            for v in img.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let noisy = *v + self.noise * z;
                *v = pixel_value((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            images.extend_from_slice(&img);
            labels.push(class);
        }
        Dataset::new(Tensor::new(images, &[n, c, h, w])?, Some(labels), self.num_classes, split)
    }
}

/// Synthetic dataset with default difficulty; `seed` drives both the class
/// prototypes and the samples.
pub fn make_synthetic(num_classes: usize, per_class: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    SyntheticConfig::new(num_classes, per_class, shape, seed).generate(seed, "train")
}

/// Epoch-wise shuffled mini-batches over `len` samples.
#[derive(Debug, Clone)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    flip: bool,
    epoch: u64,
    order: Vec<usize>,
    flips: Vec<bool>,
    pos: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        let mut s = Self { len, batch_size, seed, flip: false, epoch: 0, order: Vec::new(), flips: Vec::new(), pos: 0 };
        s.start_epoch(0);
        Ok(s)
    }

    /// Random horizontal flips, drawn per (seed, epoch). Off by default.
    pub fn with_flip(mut self, on: bool) -> Self {
        self.flip = on;
        let epoch = self.epoch;
        self.start_epoch(epoch);
        self
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    /// Resets to the start of `epoch` with that epoch's permutation.
    pub fn start_epoch(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng);
        self.flips = if self.flip { (0..self.len).map(|_| rng.random_bool(0.5)).collect() } else { Vec::new() };
        self.epoch = epoch;
        self.pos = 0;
    }

    /// Sample indices of the next batch in this epoch; the last one may be
    /// short. `None` once the epoch is exhausted.
    pub fn next_indices(&mut self) -> Option<&[usize]> {
        if self.pos >= self.len {
            return None;
        }
        let start = self.pos;
        self.pos = (start + self.batch_size).min(self.len);
        Some(&self.order[start..self.pos])
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Result<Option<Batch>> {
        if data.len() != self.len {
            return Err(Error::Usage(format!("stream over {} samples used with {} samples", self.len, data.len())));
        }
        let start = self.pos;
        let Some(idx) = self.next_indices() else {
            return Ok(None);
        };
        let idx = idx.to_vec();
        let flips = if self.flip { &self.flips[start..start + idx.len()] } else { &[][..] };
        data.batch_flipped(&idx, flips).map(Some)
    }
}
