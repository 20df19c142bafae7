//! Raster-order ancestral sampling and sample image files.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ablations::softmax_conditionals;
use crate::dlm::{sample_pixel, unpack_at};
use crate::error::{Error, Result};
use crate::image::{Images, Pixel};
use crate::network::{HeadKind, Mode, Model, SOFTMAX_HEAD_CHANNELS};
use crate::ppm::write_ppm;
use crate::tape::Tape;
use crate::tensor::Scalar;

/// Columns of a class-conditional grid, one per label.
pub const GRID_COLUMNS: usize = 10;

fn draw_from_logprobs(logp: &[f64], rng: &mut impl Rng) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (v, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return v as u8;
        }
    }
    (logp.len() - 1) as u8
}

fn draw_softmax(head: &[f64], rng: &mut impl Rng) -> Result<Pixel> {
    let mut p = Pixel::default();
    p.r = draw_from_logprobs(&softmax_conditionals(p, head)?[0], rng);
    p.g = draw_from_logprobs(&softmax_conditionals(p, head)?[1], rng);
    p.b = draw_from_logprobs(&softmax_conditionals(p, head)?[2], rng);
    Ok(p)
}

/// Draws `n` images of `h x w` pixel by pixel; each pixel comes from its
/// conditional given every pixel already drawn. Rows below the current one
/// are cropped from the network input.
pub fn sample_images<T: Scalar>(
    model: &Model<T>,
    n: usize,
    h: usize,
    w: usize,
    labels: Option<&[usize]>,
    rng: &mut impl Rng,
) -> Result<Images> {
    let cfg = model.config();
    cfg.check_input(h, w)?;
    if n == 0 {
        return Err(Error::Invalid("cannot sample zero images".into()));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Invalid(format!("{} labels for {n} samples", l.len())));
        }
    }
    let m = cfg.spatial_multiple();
    let mut canvas = Images::zeros(n, h, w);
    for i in 0..h {
        let rows = (i + 1).div_ceil(m) * m;
        for j in 0..w {
            let crop = canvas.crop_rows(rows)?;
            let mut tape = Tape::<T>::new();
            let params = model.bind(&mut tape, false);
            let x = tape.constant(crop.to_centered());
            let f = model.forward(&mut tape, &params, x, labels, Mode::Eval, rng)?;
            let head = tape.value(f.head);
            for k in 0..n {
                let p = match cfg.head {
                    HeadKind::Softmax => {
                        let o = head.offset(&[k, i, j, 0]);
                        let raw: Vec<f64> = head.elems()[o..o + SOFTMAX_HEAD_CHANNELS]
                            .iter()
                            .map(|&v| Scalar::to_f64(v))
                            .collect();
                        draw_softmax(&raw, rng)?
                    }
                    HeadKind::DiscretizedLogistic | HeadKind::ContinuousLogistic => {
                        sample_pixel(&unpack_at(head, cfg.n_mixtures, k, i, j)?, rng)
                    }
                };
                canvas.set_pixel(k, i, j, p);
            }
        }
    }
    Ok(canvas)
}

fn sample_name(seed: u64, label: Option<usize>, index: usize) -> String {
    match label {
        Some(l) => format!("sample-seed{seed}-label{l}-{index:03}.ppm"),
        None => format!("sample-seed{seed}-{index:03}.ppm"),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Samples `n` images (all with `label` if given) and writes one PPM each.
pub fn emit_samples<T: Scalar>(
    model: &Model<T>,
    n: usize,
    label: Option<usize>,
    seed: u64,
    (h, w): (usize, usize),
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let labels = label.map(|l| vec![l; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = sample_images(model, n, h, w, labels.as_deref(), &mut rng)?;
    ensure_dir(out_dir)?;
    let mut paths = Vec::with_capacity(n);
    for k in 0..n {
        let path = out_dir.join(sample_name(seed, label, k));
        write_ppm(&images, k, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Tiles samples into one image: `rows` samples per label, column `c` holding label `c`.
pub fn class_grid<T: Scalar>(model: &Model<T>, rows: usize, seed: u64, (h, w): (usize, usize)) -> Result<Images> {
    if model.config().n_classes != Some(GRID_COLUMNS) {
        return Err(Error::Invalid(format!(
            "class grid needs a model with {GRID_COLUMNS} classes"
        )));
    }
    let labels: Vec<usize> = (0..rows).flat_map(|_| 0..GRID_COLUMNS).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = sample_images(model, labels.len(), h, w, Some(&labels), &mut rng)?;
    let mut grid = Images::zeros(1, rows * h, GRID_COLUMNS * w);
    for (k, _) in labels.iter().enumerate() {
        let (row, col) = (k / GRID_COLUMNS, k % GRID_COLUMNS);
        for i in 0..h {
            for j in 0..w {
                grid.set_pixel(0, row * h + i, col * w + j, samples.pixel(k, i, j));
            }
        }
    }
    Ok(grid)
}

/// Writes a class grid as `grid-seed{seed}.ppm` in `out_dir`.
pub fn emit_class_grid<T: Scalar>(
    model: &Model<T>,
    rows: usize,
    seed: u64,
    size: (usize, usize),
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let grid = class_grid(model, rows, seed, size)?;
    ensure_dir(out_dir)?;
    let path = out_dir.join(format!("grid-seed{seed}.ppm"));
    write_ppm(&grid, 0, &path)?;
    Ok(path)
}
