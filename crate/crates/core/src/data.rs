//! MNIST IDX ingestion, batching and synthetic digit-like fixtures.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{CfpError, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

/// Raw image payload of an IDX file, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Images `[N, 1, H, W]` in `[0, 1]` with class ids in `[0, 10)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CfpError::Idx {
            offset,
            detail: "truncated header".into(),
        })
}

pub fn parse_idx_header(bytes: &[u8]) -> Result<IdxHeader> {
    let magic = read_u32(bytes, 0)?;
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(CfpError::Idx {
            offset: 0,
            detail: format!("magic {magic:#010x} is not an unsigned-byte idx file"),
        });
    }
    let ndims = bytes[3] as usize;
    let dims = (0..ndims)
        .map(|i| read_u32(bytes, 4 + 4 * i))
        .collect::<Result<Vec<_>>>()?;
    Ok(IdxHeader { magic, dims })
}

fn payload<'a>(bytes: &'a [u8], header: &IdxHeader) -> Result<&'a [u8]> {
    let start = 4 + 4 * header.dims.len();
    let len: usize = header.dims.iter().map(|&d| d as usize).product();
    let available = bytes.len().saturating_sub(start);
    if available < len {
        return Err(CfpError::Idx {
            offset: bytes.len(),
            detail: format!("payload truncated: need {len} bytes after offset {start}, have {available}"),
        });
    }
    Ok(&bytes[start..start + len])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let header = parse_idx_header(bytes)?;
    if header.magic != IDX_IMAGES_MAGIC || header.dims.len() != 3 {
        return Err(CfpError::Idx {
            offset: 0,
            detail: format!("expected image magic {IDX_IMAGES_MAGIC}, got {}", header.magic),
        });
    }
    let pixels = payload(bytes, &header)?.to_vec();
    Ok(IdxImages {
        count: header.dims[0] as usize,
        rows: header.dims[1] as usize,
        cols: header.dims[2] as usize,
        pixels,
    })
}

/// Labels of an IDX label file; values must be digit classes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let header = parse_idx_header(bytes)?;
    if header.magic != IDX_LABELS_MAGIC || header.dims.len() != 1 {
        return Err(CfpError::Idx {
            offset: 0,
            detail: format!("expected label magic {IDX_LABELS_MAGIC}, got {}", header.magic),
        });
    }
    let data = payload(bytes, &header)?;
    data.iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < NUM_CLASSES {
                Ok(b as usize)
            } else {
                Err(CfpError::LabelRange {
                    index: i,
                    label: b as usize,
                    classes: NUM_CLASSES,
                })
            }
        })
        .collect()
}

pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

pub fn normalize_pixel(p: u8) -> f64 {
    p as f64 / 255.0
}

pub fn normalize_images(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&p| normalize_pixel(p)).collect()
}

impl IdxImages {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.count, 1, self.rows, self.cols],
            normalize_images(&self.pixels),
        )
        .expect("idx payload length checked")
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.rows() != labels.len() {
            return Err(CfpError::Dataset(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= NUM_CLASSES) {
            return Err(CfpError::LabelRange {
                index,
                label,
                classes: NUM_CLASSES,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CfpError::Dataset("pixel outside [0, 1]".into()));
        }
        Ok(Dataset { images, labels })
    }

    pub fn from_idx(images: &IdxImages, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(images.to_tensor(), labels)
    }

    pub fn empty(sample_shape: [usize; 3]) -> Self {
        let [c, h, w] = sample_shape;
        Dataset {
            images: Tensor::zeros(vec![0, c, h, w]),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Contiguous range `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset { images, labels }
    }

    /// Splits off the last `tail` samples: `(head, tail)`.
    pub fn split_tail(&self, tail: usize) -> (Dataset, Dataset) {
        let cut = self.len().saturating_sub(tail);
        (self.slice(0, cut), self.slice(cut, self.len()))
    }

    /// Converts back to raw bytes; exact for datasets that came from bytes.
    pub fn to_idx(&self) -> (IdxImages, Vec<usize>) {
        let [_, h, w] = self.sample_shape();
        let pixels = self.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        (
            IdxImages {
                count: self.len(),
                rows: h,
                cols: w,
                pixels,
            },
            self.labels.clone(),
        )
    }
}

/// Seeded permutation of `0..n` cut into consecutive batches; the last may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| CfpError::io(path, e))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| CfpError::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| CfpError::io(path, e))?;
    }
    Ok(bytes)
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
        if candidate.exists() {
            return Ok(candidate);
        }
    }
    Err(CfpError::Dataset(format!("{stem}[.gz] not found in {}", dir.display())))
}

pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = parse_idx_images(&read_maybe_gz(images)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if imgs.count != labels.len() {
        return Err(CfpError::Dataset(format!(
            "{} images but {} labels",
            imgs.count,
            labels.len()
        )));
    }
    Dataset::from_idx(&imgs, labels)
}

/// Standard MNIST training and test sets from a directory of (optionally gzipped) IDX files.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(
        &locate(dir, "train-images-idx3-ubyte")?,
        &locate(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx_pair(
        &locate(dir, "t10k-images-idx3-ubyte")?,
        &locate(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}

/// Synthetic 28x28 "digits": classes 0-4 are a single bar at one of five
/// orientations, classes 5-9 the same orientations drawn as two parallel
/// bars. Random offsets and pixel noise; values are quantized to bytes so the
/// set survives an IDX round trip exactly.
pub fn synth_dataset(n: usize, seed: u64) -> Dataset {
    const SIDE: usize = 28;
    let mut rng = seeded(seed);
    let noise = Normal::new(0.0, 0.08).unwrap();
    let mut pixels = vec![0u8; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for img in pixels.chunks_exact_mut(SIDE * SIDE) {
        let label = rng.random_range(0..NUM_CLASSES);
        labels.push(label);
        let angle = (label % 5) as f64 * std::f64::consts::PI / 5.0;
        let (dx, dy) = (angle.cos(), angle.sin());
        let (nx, ny) = (-dy, dx);
        let cx = 13.5 + rng.random_range(-2.5..2.5);
        let cy = 13.5 + rng.random_range(-2.5..2.5);
        let offsets: &[f64] = if label < 5 { &[0.0] } else { &[-3.5, 3.5] };
        let half_len = rng.random_range(8.0..11.0);
        for (i, px) in img.iter_mut().enumerate() {
            let (x, y) = ((i % SIDE) as f64 - cx, (i / SIDE) as f64 - cy);
            let along = x * dx + y * dy;
            let mut v: f64 = 0.0;
            for off in offsets {
                let across = x * nx + y * ny - off;
                if along.abs() <= half_len {
                    v = v.max((1.0 - (across.abs() - 0.8).max(0.0)).clamp(0.0, 1.0));
                }
            }
            v = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            *px = (v * 255.0).round() as u8;
        }
    }
    let images = IdxImages {
        count: n,
        rows: SIDE,
        cols: SIDE,
        pixels,
    };
    Dataset::from_idx(&images, labels).expect("synthetic data is well-formed")
}
