//! Labeled image sets: the CIFAR-10 binary reader, a procedural generator,
//! and epoch batching.

use std::fs;
use std::path::{Path, PathBuf};

use lsn_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::{seed, Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

/// Images `[N, C, S, S]` in `[0,1]`, flattened, with labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    pub channels: usize,
    pub side: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        Tensor::new([self.channels, self.side, self.side], self.pixels(i).to_vec()).expect("image layout")
    }

    /// Stacks the given samples into `[B, C, S, S]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        Tensor::new([indices.len(), self.channels, self.side, self.side], data).expect("batch layout")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().flat_map(|&i| self.pixels(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    /// First `n` samples (all when `n` is 0 or exceeds the size).
    pub fn truncated(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let indices: Vec<usize> = (0..n).collect();
        self.subset(&indices)
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split.clone(),
            channels: self.channels,
            side: self.side,
            num_classes: self.num_classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptDataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decodes one CIFAR-10 binary batch: records of a label byte followed by
/// the red, green and blue 32×32 planes.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(corrupt(
            path,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(corrupt(path, format!("record {i} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

pub fn read_cifar10_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_cifar10(&bytes, path)
}

fn cifar_files(dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let names: Vec<String> = match split {
        "train" => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        "test" => vec!["test_batch.bin".into()],
        other => return Err(Error::Config(format!("unknown CIFAR-10 split `{other}`"))),
    };
    let missing: Vec<&str> = names.iter().filter(|n| !dir.join(n).is_file()).map(|n| n.as_str()).collect();
    if !missing.is_empty() {
        return Err(corrupt(dir, format!("missing CIFAR-10 {split} batches: {}", missing.join(", "))));
    }
    Ok(names.iter().map(|n| dir.join(n)).collect())
}

/// Reads every batch file of a split (`train` or `test`) in file order.
pub fn load_cifar10_split(dir: &Path, split: &str) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in cifar_files(dir, split)? {
        let (im, lb) = read_cifar10_file(&f)?;
        images.extend(im);
        labels.extend(lb);
    }
    Ok(Dataset {
        name: "cifar10".into(),
        split: split.into(),
        channels: 3,
        side: CIFAR_SIDE,
        num_classes: CIFAR_CLASSES,
        images,
        labels,
    })
}

/// The five training batches `data_batch_{1..5}.bin` of `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    load_cifar10_split(dir, "train")
}

const FAMILY_HUES: [f64; 4] = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0 / 6.0];

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Whether offset `(dx, dy)` from the center lies inside shape `kind` of radius `r`.
fn inside(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        2 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        _ => dx.abs() <= r && dy.abs() <= r && ((dx + r) / 2.0).floor() as i64 % 2 == 0,
    }
}

fn render(class: usize, side: usize, rng: &mut impl Rng) -> Vec<f32> {
    let kind = class % 4;
    let hue = FAMILY_HUES[class / 4] + rng.random_range(-0.04..0.04);
    let fg = hsv(hue, rng.random_range(0.6..1.0), rng.random_range(0.6..1.0));
    let bg_level = rng.random_range(0.0..0.35);
    let bg: [f64; 3] = std::array::from_fn(|_| bg_level + rng.random_range(-0.05..0.05));
    let s = side as f64;
    let r = rng.random_range(0.2 * s..0.3 * s);
    let cx = s / 2.0 + rng.random_range(-0.15 * s..0.15 * s);
    let cy = s / 2.0 + rng.random_range(-0.15 * s..0.15 * s);
    let plane = side * side;
    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let base = if inside(kind, dx, dy, r) { fg } else { bg };
            for c in 0..3 {
                let v = base[c] + rng.random_range(-0.08..0.08);
                img[c * plane + y * side + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Procedural 32×32 shapes: class `k` draws shape `k mod 4` (circle, square,
/// triangle, stripes) in color family `k div 4` over a noisy background.
/// Sample `i` has label `i mod num_classes`.
pub fn synth_dataset(n: usize, num_classes: usize, seed_value: u64) -> Result<Dataset> {
    if n == 0 || !(2..=16).contains(&num_classes) {
        return Err(Error::Config(format!(
            "synthetic dataset needs n > 0 and 2..=16 classes, got n={n}, classes={num_classes}"
        )));
    }
    let side = CIFAR_SIDE;
    let mut images = Vec::with_capacity(n * 3 * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mut rng = seed::rng(&[0x5359_4E54, seed_value, i as u64]);
        images.extend(render(class, side, &mut rng));
        labels.push(class);
    }
    Ok(Dataset {
        name: "synth".into(),
        split: "train".into(),
        channels: 3,
        side,
        num_classes,
        images,
        labels,
    })
}

/// Shuffled sample order for one epoch, cut into full batches.
pub fn batch_order(n: usize, batch_size: usize, epoch: u64, seed_value: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(&[0x4241_5443, seed_value, epoch]));
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batch_iter(ds: &Dataset, batch_size: usize, epoch: u64, seed_value: u64) -> Vec<Vec<usize>> {
    batch_order(ds.len(), batch_size, epoch, seed_value)
}
