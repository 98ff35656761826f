//! Labeled image datasets: IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary
//! batches.

use std::borrow::Cow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{ModelSpec, Samples, Target};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images `[N, C, H, W]` in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(format!("images must be [N, C, H, W], got {:?}", images.dims())));
        }
        let n = images.dims()[0];
        if n != labels.len() {
            return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!("label {bad} outside 0..{num_classes}")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(LabeledDataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Shape of a single image, `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let k = self.image_len();
        Tensor::from_parts(self.image_shape().to_vec(), self.images.data()[i * k..(i + 1) * k].to_vec())
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if indices.is_empty() {
            return Err(Error::config("selection is empty"));
        }
        let k = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * k);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::config(format!("sample index {i} out of range 0..{}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * k..(i + 1) * k]);
            labels.push(self.labels[i]);
        }
        let mut dims = self.images.dims().to_vec();
        dims[0] = indices.len();
        Ok(LabeledDataset { images: Tensor::from_parts(dims, data), labels, num_classes: self.num_classes })
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Result<LabeledDataset> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Same images with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<LabeledDataset> {
        LabeledDataset::new(self.images.clone(), labels, self.num_classes)
    }
}

impl Samples for LabeledDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input(&self, i: usize) -> Cow<'_, Tensor> {
        Cow::Owned(self.image(i))
    }

    fn target(&self, i: usize) -> Target<'_> {
        Target::Label(self.labels[i])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at as u64, format!("truncated {what}")))
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated image payload: need {need} bytes, have {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format((16 + need) as u64, "trailing bytes after image payload"));
    }
    Ok((n, rows, cols, payload))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated label payload: need {n} bytes, have {}", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(Error::format((8 + n) as u64, "trailing bytes after label payload"));
    }
    Ok(payload)
}

/// Loads an IDX image/label pair. Pixels are scaled by 1/255 and get a
/// single channel axis. Class count is 10.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::format(4, format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::format(4, "IDX file holds no samples"));
    }
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::format((8 + pos) as u64, format!("label {} outside 0..10", labels[pos])));
    }
    LabeledDataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, 10)
}

/// Writes a single-channel dataset as an IDX pair. Pixels are stored as
/// `round(v * 255)`, so datasets loaded from IDX round-trip exactly.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let dims = ds.images.dims();
    if dims[1] != 1 {
        return Err(Error::shape(format!("IDX holds one channel, dataset has {}", dims[1])));
    }
    if ds.num_classes > 256 {
        return Err(Error::config("IDX labels are single bytes"));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES, dims[0] as u32, dims[2] as u32, dims[3] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS, dims[0] as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Loads and concatenates CIFAR-10 binary batches.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledDataset> {
    if batch_paths.is_empty() {
        return Err(Error::config("no CIFAR-10 batch files given"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            let whole = bytes.len() - bytes.len() % CIFAR_RECORD;
            return Err(Error::format(
                whole as u64,
                format!("{}: size {} is not a positive multiple of {CIFAR_RECORD}", path.display(), bytes.len()),
            ));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if record[0] >= 10 {
                return Err(Error::format(
                    (r * CIFAR_RECORD) as u64,
                    format!("{}: label {} outside 0..10", path.display(), record[0]),
                ));
            }
            labels.push(record[0] as usize);
            data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    LabeledDataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)
}

/// Seeded permutation, then the first `ceil(fraction * N)` samples go to
/// the first half.
pub fn split_and_shuffle(ds: &LabeledDataset, seed: u64, fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction {fraction} must be in (0, 1)")));
    }
    let n = ds.len();
    let cut = ((fraction * n as f64).ceil() as usize).min(n);
    if cut == 0 || cut == n {
        return Err(Error::config(format!("fraction {fraction} leaves one side of a {n}-sample split empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((ds.select(&order[..cut])?, ds.select(&order[cut..])?))
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate_accuracy(model: &ModelSpec, ds: &LabeledDataset) -> Result<f64> {
    let correct = (0..ds.len())
        .into_par_iter()
        .map(|i| model.predict(&ds.image(i)).map(|p| usize::from(p == ds.labels[i])))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / ds.len() as f64)
}
