//! Labeled image datasets: IDX ingestion, synthetic generators, and
//! seeded train/validation splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Image};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Validates shapes, labels and the `[0, 1]` pixel range.
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images
            .iter()
            .flat_map(|i| i.values())
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidArgument(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        let ds = Self::new_unchecked(images, labels, num_classes);
        if let Some(&label) = ds.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        Ok(ds)
    }

    /// Skips the pixel-range and label checks (real-valued test data).
    /// Panics if images and labels differ in length or grid.
    pub fn new_unchecked(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Self {
        assert_eq!(images.len(), labels.len(), "one label per image");
        if let Some(first) = images.first() {
            let g = first.grid();
            assert!(
                images.iter().all(|i| i.grid() == g),
                "images must share one grid"
            );
        }
        Self {
            images,
            labels,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Grid shared by all images, `None` when empty.
    pub fn grid(&self) -> Option<Grid2D> {
        self.images.first().map(Image::grid)
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            images: self.images.iter().collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Batch<'_> {
        Batch {
            images: indices.iter().map(|&i| &self.images[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` examples (all of them if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Applies `f` to every image, keeping labels.
    pub fn map_images(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<Self> {
        Ok(Self {
            images: self.images.iter().map(f).collect::<Result<_>>()?,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }

    fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// A borrowed view of examples in a fixed order.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    images: Vec<&'a Image>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> (&'a Image, usize) {
        (self.images[i], self.labels[i])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    let chunk = bytes.get(offset..end).ok_or_else(|| Error::IdxTruncated {
        path: path.to_path_buf(),
        needed: end,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxBadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixel bytes are scaled by `1/255`; the grid has `h = 1/cols`.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = read_file(image_path)?;
    let lbl_bytes = read_file(label_path)?;

    check_magic(&img_bytes, IDX_IMAGES_MAGIC, image_path)?;
    let count = be_u32(&img_bytes, 4, image_path)? as usize;
    let rows = be_u32(&img_bytes, 8, image_path)? as usize;
    let cols = be_u32(&img_bytes, 12, image_path)? as usize;
    let pixels = rows * cols;
    let needed = 16 + count * pixels;
    if img_bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: image_path.to_path_buf(),
            needed,
            found: img_bytes.len(),
        });
    }

    check_magic(&lbl_bytes, IDX_LABELS_MAGIC, label_path)?;
    let label_count = be_u32(&lbl_bytes, 4, label_path)? as usize;
    if lbl_bytes.len() < 8 + label_count {
        return Err(Error::IdxTruncated {
            path: label_path.to_path_buf(),
            needed: 8 + label_count,
            found: lbl_bytes.len(),
        });
    }
    if label_count != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let grid = Grid2D::new(cols, rows, 1.0 / cols as f64)?;
    let images = img_bytes[16..needed]
        .chunks_exact(pixels)
        .map(|px| Image::new(grid, px.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = lbl_bytes[8..8 + count]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(10);
    LabeledDataset::new(images, labels, num_classes)
}

/// Writes a dataset as an IDX pair, quantizing pixels to bytes.
pub fn write_idx(data: &LabeledDataset, image_path: &Path, label_path: &Path) -> Result<()> {
    let grid = data.grid().ok_or(Error::EmptyDataset)?;
    let mut img = Vec::with_capacity(16 + data.len() * grid.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&(grid.ny() as u32).to_be_bytes());
    img.extend_from_slice(&(grid.nx() as u32).to_be_bytes());
    for im in data.images() {
        img.extend(
            im.values()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    let mut lbl = Vec::with_capacity(8 + data.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lbl.extend(data.labels().iter().map(|&l| l as u8));
    fs::write(image_path, img).map_err(|e| Error::io(image_path, e))?;
    fs::write(label_path, lbl).map_err(|e| Error::io(label_path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Gaussian bumps near (0.3, 0.3) for class 0 and (0.7, 0.7) for class 1.
    Blobs,
    /// Horizontal (class 0) versus vertical (class 1) bars placed in the
    /// central half of the image.
    Bars,
}

impl SyntheticKind {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Bars => "bars",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "blobs" => Some(SyntheticKind::Blobs),
            "bars" => Some(SyntheticKind::Bars),
            _ => None,
        }
    }
}

/// Bar thickness in pixels for a grid side of `n`.
pub fn bar_thickness(n: usize) -> usize {
    (n / 8).max(1)
}

/// Rows/columns `[n/4, 3n/4)` where bars may be placed.
pub fn bar_band(n: usize) -> std::ops::Range<usize> {
    n / 4..(3 * n / 4).max(n / 4 + 1)
}

/// Two-class synthetic images. Labels alternate `0, 1, 0, …`; additive
/// Gaussian noise of standard deviation `noise` is clamped back to `[0, 1]`.
pub fn make_synthetic(
    kind: SyntheticKind,
    n: usize,
    grid: Grid2D,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs at least 2 examples".into(),
        ));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise {noise} must be nonnegative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut v = vec![0.0; grid.len()];
        match kind {
            SyntheticKind::Bars => {
                let (side, along) = if label == 0 { (ny, nx) } else { (nx, ny) };
                let t = bar_thickness(side);
                let band = bar_band(side);
                let last = band.end.saturating_sub(t).max(band.start);
                let start = rng.random_range(band.start..=last);
                for a in start..(start + t).min(side) {
                    for b in 0..along {
                        let idx = if label == 0 { a * nx + b } else { b * nx + a };
                        v[idx] = 1.0;
                    }
                }
            }
            SyntheticKind::Blobs => {
                let center = if label == 0 { 0.3 } else { 0.7 };
                let cy = center + rng.random_range(-0.05..0.05);
                let cx = center + rng.random_range(-0.05..0.05);
                let width = 0.12;
                for r in 0..ny {
                    for c in 0..nx {
                        let y = (r as f64 + 0.5) / ny as f64 - cy;
                        let x = (c as f64 + 0.5) / nx as f64 - cx;
                        v[r * nx + c] = (-(x * x + y * y) / (2.0 * width * width)).exp();
                    }
                }
            }
        }
        if noise > 0.0 {
            for px in v.iter_mut() {
                *px = (*px + noise * gauss.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        images.push(Image::new(grid, v)?);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, 2)
}

/// Seeded permutation of `0..n` split at `round(n · train_fraction)`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} examples at fraction {train_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n_train);
    Ok((order, val))
}

pub fn split(
    data: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (tr, va) = split_indices(data.len(), train_fraction, seed)?;
    Ok((data.select(&tr), data.select(&va)))
}
