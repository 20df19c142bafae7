//! Datasets: CIFAR-10 binary records, block-mean downscaling, and a
//! synthetic gradient-and-shapes generator for runs without CIFAR on disk.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Images, Pixel};

/// Bytes per CIFAR-10 binary record: one label byte and three 32x32 planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub images: Images,
    pub labels: Option<Vec<usize>>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Images, labels: Option<Vec<usize>>, split: Split) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("dataset has no images".into()));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::Dataset(format!("{} labels for {} images", l.len(), images.len())));
            }
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            split: self.split,
        }
    }

    /// First `n_train` items as the training split, the next `n_eval` as the eval split.
    pub fn split_off(&self, n_train: usize, n_eval: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_eval == 0 || n_train + n_eval > self.len() {
            return Err(Error::Dataset(format!(
                "cannot take {n_train} + {n_eval} items from {}",
                self.len()
            )));
        }
        let mut train = self.select(&(0..n_train).collect::<Vec<_>>());
        let mut eval = self.select(&(n_train..n_train + n_eval).collect::<Vec<_>>());
        train.split = Split::Train;
        eval.split = Split::Eval;
        Ok((train, eval))
    }

    pub fn check_labels(&self, n_classes: usize) -> Result<()> {
        if let Some(&bad) = self.labels.iter().flatten().find(|&&l| l >= n_classes) {
            return Err(Error::Dataset(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(())
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Dataset(format!(
            "{} bytes is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Dataset(format!("record {r} has label {label}")));
        }
        labels.push(label);
        let planes = &rec[1..];
        for p in 0..plane {
            data.extend_from_slice(&[planes[p], planes[plane + p], planes[2 * plane + p]]);
        }
    }
    Dataset::new(Images::new(n, CIFAR_SIDE, CIFAR_SIDE, data)?, Some(labels), Split::Train)
}

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes)
}

/// Averages `factor x factor` blocks, rounding halves up.
pub fn downscale(dataset: &Dataset, factor: usize) -> Result<Dataset> {
    let im = &dataset.images;
    let (h, w) = (im.height(), im.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dataset(format!("{h}x{w} is not divisible by {factor}")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let count = (factor * factor) as u32;
    let mut out = Images::zeros(im.len(), ho, wo);
    for n in 0..im.len() {
        for i in 0..ho {
            for j in 0..wo {
                let mut sums = [0u32; 3];
                for a in 0..factor {
                    for b in 0..factor {
                        let p = im.pixel(n, i * factor + a, j * factor + b).channels();
                        for c in 0..3 {
                            sums[c] += p[c] as u32;
                        }
                    }
                }
                let [r, g, b] = sums.map(|s| ((2 * s + count) / (2 * count)) as u8);
                out.set_pixel(n, i, j, Pixel::new(r, g, b));
            }
        }
    }
    Dataset::new(out, dataset.labels.clone(), dataset.split)
}

/// Deterministic images: a two-colour linear gradient background with one to
/// three filled rectangles or discs. The label selects the shape kind and a
/// colour family, so class-conditional runs have something to learn.
pub fn synthetic(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || side == 0 {
        return Err(Error::Dataset("synthetic dataset needs n > 0 and side > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Images::zeros(n, side, side);
    let mut labels = Vec::with_capacity(n);
    let s = side as f64;
    for k in 0..n {
        let label = rng.random_range(0..CIFAR_CLASSES);
        labels.push(label);
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        for i in 0..side {
            for j in 0..side {
                let t = (((j as f64 / s - 0.5) * dx + (i as f64 / s - 0.5) * dy) + 0.75) / 1.5;
                let t = t.clamp(0.0, 1.0);
                let p: [u8; 3] = std::array::from_fn(|c| (c0[c] + (c1[c] - c0[c]) * t).round() as u8);
                images.set_pixel(k, i, j, Pixel::new(p[0], p[1], p[2]));
            }
        }
        let disc = label % 2 == 1;
        let family = label / 2;
        let shapes = rng.random_range(1..=3);
        for _ in 0..shapes {
            let mut color: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..=80));
            color[family % 3] = rng.random_range(170..=255);
            if family >= 3 {
                color[(family + 1) % 3] = rng.random_range(170..=255);
            }
            let ci = rng.random_range(0.0..s);
            let cj = rng.random_range(0.0..s);
            let r = rng.random_range(s / 8.0..s / 3.0);
            for i in 0..side {
                for j in 0..side {
                    let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
                    let inside = if disc {
                        di * di + dj * dj <= r * r
                    } else {
                        di.abs() <= r && dj.abs() <= r * 0.7
                    };
                    if inside {
                        images.set_pixel(k, i, j, Pixel::new(color[0], color[1], color[2]));
                    }
                }
            }
        }
    }
    Dataset::new(images, Some(labels), Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, f: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        for c in 0..3 {
            for p in 0..CIFAR_SIDE * CIFAR_SIDE {
                r.push(f(c, p));
            }
        }
        r
    }

    #[test]
    fn cifar_records_are_deplaned() {
        let mut bytes = record(3, |c, p| ((c * 7 + p) % 251) as u8);
        bytes.extend(record(9, |c, _| 10 * c as u8));
        let ds = parse_cifar(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels.as_deref(), Some(&[3, 9][..]));
        // pixel (1, 2) is plane offset 34
        assert_eq!(ds.images.pixel(0, 1, 2), Pixel::new(34, 41, 48));
        assert_eq!(ds.images.pixel(1, 31, 31), Pixel::new(0, 10, 20));
    }

    #[test]
    fn cifar_rejects_bad_sizes_and_labels() {
        assert!(parse_cifar(&[]).is_err());
        assert!(parse_cifar(&vec![0; CIFAR_RECORD_BYTES + 1]).is_err());
        assert!(parse_cifar(&record(10, |_, _| 0)).is_err());
    }

    #[test]
    fn downscale_rounds_half_up() {
        let mut im = Images::zeros(1, 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let v = if (i + j) % 2 == 0 { 0 } else { 255 };
                im.set_pixel(0, i, j, Pixel::new(v, v, v));
            }
        }
        let ds = Dataset::new(im, None, Split::Train).unwrap();
        let out = downscale(&ds, 2).unwrap();
        assert!(out.images.data().iter().all(|&v| v == 128));
        let flat = Dataset::new(Images::new(1, 2, 2, vec![77; 12]).unwrap(), None, Split::Train).unwrap();
        assert!(downscale(&flat, 2).unwrap().images.data().iter().all(|&v| v == 77));
        assert!(downscale(&flat, 3).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_varied() {
        let a = synthetic(8, 16, 5).unwrap();
        let b = synthetic(8, 16, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images.image(0), a.images.image(1));
        a.check_labels(10).unwrap();
        let (t, e) = a.split_off(6, 2).unwrap();
        assert_eq!((t.len(), e.len(), e.split), (6, 2, Split::Eval));
    }
}
