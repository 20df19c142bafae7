//! 8-bit RGB image batches in NHWC layout.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Half of the 8-bit range; maps sub-pixel values to centered units.
pub const HALF_RANGE: f64 = 127.5;

/// Sub-pixel value in centered units, `v / 127.5 − 1 ∈ [−1, 1]`.
pub fn centered(v: u8) -> f64 {
    v as f64 / HALF_RANGE - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pixel {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Pixel {
    pub fn new(r: u8, g: u8, b: u8) -> Self {
        Pixel { r, g, b }
    }

    pub fn channels(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }
}

/// `n` images of `h x w` RGB pixels, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Images {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Images {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w * 3 {
            return Err(Error::shape(
                "Images::new",
                format!("{n}x{h}x{w}x3 needs {} bytes, got {}", n * h * w * 3, data.len()),
            ));
        }
        Ok(Images { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Images {
            n,
            h,
            w,
            data: vec![0; n * h * w * 3],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn subpixels(&self) -> usize {
        self.data.len()
    }

    fn index(&self, n: usize, i: usize, j: usize) -> usize {
        ((n * self.h + i) * self.w + j) * 3
    }

    pub fn pixel(&self, n: usize, i: usize, j: usize) -> Pixel {
        let o = self.index(n, i, j);
        Pixel::new(self.data[o], self.data[o + 1], self.data[o + 2])
    }

    pub fn set_pixel(&mut self, n: usize, i: usize, j: usize, p: Pixel) {
        let o = self.index(n, i, j);
        self.data[o..o + 3].copy_from_slice(&p.channels());
    }

    /// Bytes of image `n`.
    pub fn image(&self, n: usize) -> &[u8] {
        let size = self.h * self.w * 3;
        &self.data[n * size..(n + 1) * size]
    }

    pub fn select(&self, indices: &[usize]) -> Images {
        let mut data = Vec::with_capacity(indices.len() * self.h * self.w * 3);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Images {
            n: indices.len(),
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// The first `rows` rows of every image.
    pub fn crop_rows(&self, rows: usize) -> Result<Images> {
        if rows > self.h {
            return Err(Error::Invalid(format!("cannot take {rows} rows of {}", self.h)));
        }
        let (img, keep) = (self.h * self.w * 3, rows * self.w * 3);
        let data = self.data.chunks(img.max(1)).flat_map(|c| &c[..keep]).copied().collect();
        Images::new(self.n, rows, self.w, data)
    }

    pub fn concat(&self, other: &Images) -> Result<Images> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::shape("Images::concat", "spatial extents differ"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Images {
            n: self.n + other.n,
            h: self.h,
            w: self.w,
            data,
        })
    }

    /// `[n, h, w, 3]` tensor in centered units.
    pub fn to_centered<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.n, self.h, self.w, 3],
            self.data.iter().map(|&v| T::from_f64(centered(v))).collect(),
        )
    }
}
