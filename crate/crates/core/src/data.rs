//! Dataset ingestion: IDX files, image preprocessing, epoch batching, and the
//! synthetic Gaussian-mixture latent target used by the oracle harness.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const IMAGES_MAGIC_4D: u32 = 0x0000_0804;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

/// Raw unsigned-byte images, optionally with labels.
///
/// A labels-only file read with [`IdxKind::Labels`] yields `channels == 0`
/// and an empty pixel buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImageSet {
    pub pixels: Vec<u8>,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Option<Vec<u8>>,
    pub source: String,
}

impl RawImageSet {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Attaches labels read from a separate file.
    pub fn with_labels(mut self, labels: RawImageSet) -> Result<Self> {
        let l = labels
            .labels
            .ok_or_else(|| Error::Argument(format!("{} carries no labels", labels.source)))?;
        if l.len() != self.count {
            return Err(Error::Argument(format!(
                "{} has {} labels for {} images in {}",
                labels.source,
                l.len(),
                self.count,
                self.source
            )));
        }
        self.labels = Some(l);
        Ok(self)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an IDX file. Images may be `n×h×w` (magic `0x803`) or
/// `n×c×h×w` (magic `0x804`); labels are `n` bytes (magic `0x801`).
pub fn read_idx(path: impl AsRef<Path>, kind: IdxKind) -> Result<RawImageSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path, kind)
}

pub fn parse_idx(bytes: &[u8], path: &Path, kind: IdxKind) -> Result<RawImageSet> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic = be_u32(bytes, 0);
    let ndim = match (kind, magic) {
        (IdxKind::Images, IMAGES_MAGIC) => 3,
        (IdxKind::Images, IMAGES_MAGIC_4D) => 4,
        (IdxKind::Labels, LABELS_MAGIC) => 1,
        (IdxKind::Images, _) => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected an IDX images file (magic 0x00000803), found magic {magic:#010x}"),
            })
        }
        (IdxKind::Labels, _) => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected an IDX labels file (magic 0x00000801), found magic {magic:#010x}"),
            })
        }
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(truncated(header + payload));
    }
    let body = bytes[header..header + payload].to_vec();
    let source = path.display().to_string();
    Ok(match kind {
        IdxKind::Labels => RawImageSet {
            pixels: Vec::new(),
            count: dims[0],
            channels: 0,
            height: 0,
            width: 0,
            labels: Some(body),
            source,
        },
        IdxKind::Images => {
            let (c, h, w) = if ndim == 3 {
                (1, dims[1], dims[2])
            } else {
                (dims[1], dims[2], dims[3])
            };
            RawImageSet {
                pixels: body,
                count: dims[0],
                channels: c,
                height: h,
                width: w,
                labels: None,
                source,
            }
        }
    })
}

/// Serialises images (or labels) back into IDX bytes.
pub fn encode_idx(set: &RawImageSet, kind: IdxKind) -> Vec<u8> {
    let mut out = Vec::new();
    match kind {
        IdxKind::Labels => {
            let labels = set.labels.as_deref().unwrap_or(&[]);
            out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
        IdxKind::Images => {
            let dims: Vec<usize> = if set.channels == 1 {
                out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
                vec![set.count, set.height, set.width]
            } else {
                out.extend_from_slice(&IMAGES_MAGIC_4D.to_be_bytes());
                vec![set.count, set.channels, set.height, set.width]
            };
            for d in dims {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            out.extend_from_slice(&set.pixels);
        }
    }
    out
}

/// Images in `[-1, 1]`, laid out `N × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    data: Tensor<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::Argument(format!(
                "image batch must be N×C×H×W, got {:?}",
                data.shape()
            )));
        }
        let (lo, hi) = (-T::one(), T::one());
        if let Some(v) = data.data().iter().find(|&&v| !(v >= lo && v <= hi)) {
            return Err(Error::Argument(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(idx),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.slice_rows(start, end),
        }
    }
}

/// Zero-pads each image symmetrically to `target_size × target_size`, then maps
/// bytes affinely with `x ↦ x/127.5 − 1`. Odd padding puts the extra pixel
/// at the bottom/right.
pub fn preprocess<T: Real>(raw: &RawImageSet, target_size: usize) -> Result<ImageBatch<T>> {
    if target_size < raw.height || target_size < raw.width {
        return Err(Error::Argument(format!(
            "target size {target_size} smaller than source {}×{}",
            raw.height, raw.width
        )));
    }
    let (c, h, w) = (raw.channels, raw.height, raw.width);
    let top = (target_size - h) / 2;
    let left = (target_size - w) / 2;
    let plane = target_size * target_size;
    let mut data = vec![-T::one(); raw.count * c * plane];
    let lut: Vec<T> = (0..=255u32).map(|b| T::lit(b as f64 / 127.5 - 1.0)).collect();
    for i in 0..raw.count {
        let img = raw.image(i);
        for ch in 0..c {
            let dst = &mut data[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            for y in 0..h {
                for x in 0..w {
                    dst[(y + top) * target_size + x + left] = lut[img[(ch * h + y) * w + x] as usize];
                }
            }
        }
    }
    ImageBatch::new(Tensor::from_vec(&[raw.count, c, target_size, target_size], data)?)
}

/// Reads an image file and its label file, preprocessed to `target_size`.
pub fn load_labelled<T: Real>(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    target_size: usize,
) -> Result<(ImageBatch<T>, Vec<usize>)> {
    let raw = read_idx(images, IdxKind::Images)?.with_labels(read_idx(labels, IdxKind::Labels)?)?;
    let batch = preprocess(&raw, target_size)?;
    let labels = raw.labels.unwrap_or_default().into_iter().map(usize::from).collect();
    Ok((batch, labels))
}

/// Maps a value in `[-1, 1]` to a byte with `round((x + 1)·127.5)`, halves rounding up.
pub fn to_byte<T: Real>(x: T) -> u8 {
    let v = ((x.as_f64() + 1.0) * 127.5 + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

/// Shuffled mini-batch order for one epoch, a pure function of `(seed, epoch)`.
/// The trailing partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch + 1));
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Isotropic Gaussian mixture in `d` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub component_means: Vec<Vec<f64>>,
    pub component_stddev: f64,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(component_means: Vec<Vec<f64>>, component_stddev: f64, weights: Vec<f64>) -> Result<Self> {
        let spec = Self {
            component_means,
            component_stddev,
            weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `k` equal-weight components evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, stddev: f64) -> Result<Self> {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(means, stddev, vec![1.0 / k as f64; k])
    }

    pub fn dim(&self) -> usize {
        self.component_means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.component_means.is_empty() {
            return Err(Error::Argument("mixture needs at least one component".into()));
        }
        if self.component_means.len() != self.weights.len() {
            return Err(Error::Argument("one weight per component required".into()));
        }
        let d = self.dim();
        if self.component_means.iter().any(|m| m.len() != d) {
            return Err(Error::Argument("component means differ in dimension".into()));
        }
        // zero is allowed for degenerate point targets
        if !(self.component_stddev >= 0.0 && self.component_stddev.is_finite()) {
            return Err(Error::Argument("stddev must be non-negative and finite".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Argument("weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Index of the closest component mean.
    pub fn nearest(&self, point: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, m) in self.component_means.iter().enumerate() {
            let d: f64 = m.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// Draws `n` i.i.d. points: a component by weight, then its mean plus N(0, σ²I).
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mixture_with(spec, n, &mut rng)
}

pub fn sample_mixture_with(spec: &MixtureSpec, n: usize, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    if n == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    spec.validate()?;
    let d = spec.dim();
    let mut cdf = Vec::with_capacity(spec.weights.len());
    let mut acc = 0.0;
    for w in &spec.weights {
        acc += w;
        cdf.push(acc);
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * acc;
        let comp = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
        for &m in &spec.component_means[comp] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(m + spec.component_stddev * z);
        }
    }
    Tensor::from_vec(&[n, d], data)
}
