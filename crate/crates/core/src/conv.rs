//! NHWC convolution kernels (im2col + GEMM) and their adjoints.
//!
//! Kernels are laid out `[kh, kw, cin, cout]`, which is exactly the
//! `[kh*kw*cin, cout]` matrix multiplied against the im2col buffer.

use crate::error::{Error, Result};
use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Scalar, Tensor};

/// Zero padding applied independently to each spatial edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Padding {
            top,
            bottom,
            left,
            right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(kh: usize, kw: usize, stride: (usize, usize), padding: Padding) -> Self {
        ConvGeometry {
            kh,
            kw,
            stride,
            padding,
        }
    }

    /// Spatial output extent of the forward convolution on an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::shape("conv2d", "zero stride or kernel extent"));
        }
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if ph < self.kh || pw < self.kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded input {ph}x{pw} smaller than kernel {}x{}",
                    self.kh, self.kw
                ),
            ));
        }
        Ok(((ph - self.kh) / sh + 1, (pw - self.kw) / sw + 1))
    }

    /// Spatial extent produced by the transposed convolution of an `h x w` input.
    pub fn transpose_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        if h == 0 || w == 0 {
            return Err(Error::shape("conv2d_transpose", "empty input"));
        }
        let full_h = (h - 1) * sh + self.kh;
        let full_w = (w - 1) * sw + self.kw;
        let crop_h = self.padding.top + self.padding.bottom;
        let crop_w = self.padding.left + self.padding.right;
        if full_h <= crop_h || full_w <= crop_w {
            return Err(Error::shape("conv2d_transpose", "padding exceeds output"));
        }
        Ok((full_h - crop_h, full_w - crop_w))
    }
}

fn nhwc(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::shape(op, format!("expected NHWC, got {:?}", t.shape()))),
    }
}

fn kernel_dims(
    k: &Tensor<impl Scalar>,
    geom: &ConvGeometry,
    op: &'static str,
) -> Result<(usize, usize)> {
    match *k.shape() {
        [kh, kw, cin, cout] if kh == geom.kh && kw == geom.kw => Ok((cin, cout)),
        _ => Err(Error::shape(
            op,
            format!(
                "kernel {:?} does not match geometry {}x{}",
                k.shape(),
                geom.kh,
                geom.kw
            ),
        )),
    }
}

/// Gathers every receptive patch of `x` into one row of a `[n*ho*wo, kh*kw*c]` matrix.
fn im2col<T: Scalar>(
    x: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    geom: &ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let (sh, sw) = geom.stride;
    let row_len = geom.kh * geom.kw * c;
    let mut cols = vec![T::zero(); n * ho * wo * row_len];
    let mut row = 0;
    for ni in 0..n {
        let img = &x[ni * h * w * c..(ni + 1) * h * w * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut cols[row * row_len..(row + 1) * row_len];
                for ky in 0..geom.kh {
                    let iy = (oy * sh + ky) as isize - geom.padding.top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..geom.kw {
                        let ix = (ox * sw + kx) as isize - geom.padding.left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy * w + ix as usize) * c;
                        let d = (ky * geom.kw + kx) * c;
                        dst[d..d + c].copy_from_slice(&img[src..src + c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into an image buffer.
fn col2im<T: Scalar>(
    cols: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    geom: &ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let (sh, sw) = geom.stride;
    let row_len = geom.kh * geom.kw * c;
    let mut x = vec![T::zero(); n * h * w * c];
    let mut row = 0;
    for ni in 0..n {
        let img = &mut x[ni * h * w * c..(ni + 1) * h * w * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let src_row = &cols[row * row_len..(row + 1) * row_len];
                for ky in 0..geom.kh {
                    let iy = (oy * sh + ky) as isize - geom.padding.top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..geom.kw {
                        let ix = (ox * sw + kx) as isize - geom.padding.left as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy * w + ix as usize) * c;
                        let s = (ky * geom.kw + kx) * c;
                        for (d, &v) in img[dst..dst + c].iter_mut().zip(&src_row[s..s + c]) {
                            *d = *d + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// Cross-correlation of `x: [n,h,w,cin]` with `k: [kh,kw,cin,cout]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let (n, h, w, c) = nhwc(x, "conv2d")?;
    let (cin, cout) = kernel_dims(k, geom, "conv2d")?;
    if cin != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {cin}"),
        ));
    }
    let (ho, wo) = geom.output_hw(h, w)?;
    let m = n * ho * wo;
    let kk = geom.kh * geom.kw * c;
    let mut out = vec![T::zero(); m * cout];
    if geom.kh == 1 && geom.kw == 1 && geom.stride == (1, 1) && geom.padding == Padding::NONE {
        gemm_nn(m, kk, cout, x.elems(), k.elems(), T::zero(), &mut out);
    } else {
        let cols = im2col(x.elems(), (n, h, w, c), geom, (ho, wo));
        gemm_nn(m, kk, cout, &cols, k.elems(), T::zero(), &mut out);
    }
    Ok(Tensor::from_parts(vec![n, ho, wo, cout], out))
}

/// Adjoint of [`conv2d`] in its input: maps `y: [n,ho,wo,cout]` to `[n,h,w,cin]`,
/// where `(h, w)` is the geometry's natural transposed extent.
pub fn conv2d_transpose<T: Scalar>(
    y: &Tensor<T>,
    k: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (_, ho, wo, _) = nhwc(y, "conv2d_transpose")?;
    let (h, w) = geom.transpose_output_hw(ho, wo)?;
    conv2d_input_grad(y, k, geom, (h, w))
}

/// `dL/dx` of a convolution whose input had spatial extent `(h, w)`.
pub(crate) fn conv2d_input_grad<T: Scalar>(
    dy: &Tensor<T>,
    k: &Tensor<T>,
    geom: &ConvGeometry,
    (h, w): (usize, usize),
) -> Result<Tensor<T>> {
    let (n, ho, wo, co) = nhwc(dy, "conv2d_transpose")?;
    let (cin, cout) = kernel_dims(k, geom, "conv2d_transpose")?;
    if co != cout {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {co} channels, kernel produces {cout}"),
        ));
    }
    if geom.output_hw(h, w)? != (ho, wo) {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("{h}x{w} does not convolve to {ho}x{wo}"),
        ));
    }
    let m = n * ho * wo;
    let kk = geom.kh * geom.kw * cin;
    if geom.kh == 1 && geom.kw == 1 && geom.stride == (1, 1) && geom.padding == Padding::NONE {
        let mut dx = vec![T::zero(); m * cin];
        gemm_nt(m, cout, kk, dy.elems(), k.elems(), T::zero(), &mut dx);
        return Ok(Tensor::from_parts(vec![n, h, w, cin], dx));
    }
    let mut dcols = vec![T::zero(); m * kk];
    gemm_nt(m, cout, kk, dy.elems(), k.elems(), T::zero(), &mut dcols);
    let dx = col2im(&dcols, (n, h, w, cin), geom, (ho, wo));
    Ok(Tensor::from_parts(vec![n, h, w, cin], dx))
}

/// `dL/dk` of `conv2d(x, k)` given `dy`.
pub(crate) fn conv2d_kernel_grad<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, h, w, c) = nhwc(x, "conv2d")?;
    let (n2, ho, wo, cout) = nhwc(dy, "conv2d")?;
    if n != n2 || geom.output_hw(h, w)? != (ho, wo) {
        return Err(Error::shape("conv2d", "gradient does not match output"));
    }
    let m = n * ho * wo;
    let kk = geom.kh * geom.kw * c;
    let mut dk = vec![T::zero(); kk * cout];
    if geom.kh == 1 && geom.kw == 1 && geom.stride == (1, 1) && geom.padding == Padding::NONE {
        gemm_tn(kk, m, cout, x.elems(), dy.elems(), T::zero(), &mut dk);
    } else {
        let cols = im2col(x.elems(), (n, h, w, c), geom, (ho, wo));
        gemm_tn(kk, m, cout, &cols, dy.elems(), T::zero(), &mut dk);
    }
    Ok(Tensor::from_parts(vec![geom.kh, geom.kw, c, cout], dk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, independent of im2col.
    fn conv_naive(x: &Tensor<f64>, k: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
        let [n, h, w, c] = *x.shape() else { panic!() };
        let cout = k.shape()[3];
        let (ho, wo) = g.output_hw(h, w).unwrap();
        let mut out = Tensor::zeros(vec![n, ho, wo, cout]);
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride.0 + ky) as isize - g.padding.top as isize;
                                let ix = (ox * g.stride.1 + kx) as isize - g.padding.left as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    acc += x.at(&[ni, iy as usize, ix as usize, ci])
                                        * k.at(&[ky, kx, ci, co]);
                                }
                            }
                        }
                        let off = out.offset(&[ni, oy, ox, co]);
                        out.elems_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(vec![2, 3, 4, 1], 1.0, &mut rng);
        let k = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let g = ConvGeometry::new(1, 1, (1, 1), Padding::NONE);
        assert_eq!(conv2d(&x, &k, &g).unwrap(), x);
    }

    #[test]
    fn stride_two_block_sums() {
        let x = Tensor::<f64>::from_fn(vec![1, 4, 4, 1], |i| i as f64);
        let k = Tensor::full(vec![2, 2, 1, 1], 1.0);
        let g = ConvGeometry::new(2, 2, (2, 2), Padding::NONE);
        let y = conv2d(&x, &k, &g).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        // block (0,0) = 0+1+4+5
        assert_eq!(y.elems(), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn matches_naive_for_asymmetric_padding_and_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (kh, kw, s, pad) in [
            (2, 3, (1, 1), Padding::new(1, 0, 1, 1)),
            (2, 2, (2, 2), Padding::new(1, 0, 1, 0)),
            (2, 3, (2, 2), Padding::new(1, 0, 1, 1)),
            (3, 1, (1, 2), Padding::new(0, 2, 0, 0)),
        ] {
            let x = Tensor::<f64>::randn(vec![2, 6, 5, 3], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(vec![kh, kw, 3, 4], 1.0, &mut rng);
            let g = ConvGeometry::new(kh, kw, s, pad);
            let fast = conv2d(&x, &k, &g).unwrap();
            let slow = conv_naive(&x, &k, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.elems().iter().zip(slow.elems()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_geometry_and_zero_input() {
        let g = ConvGeometry::new(2, 2, (2, 2), Padding::NONE);
        let y = Tensor::<f64>::zeros(vec![1, 2, 2, 1]);
        let k = Tensor::full(vec![2, 2, 1, 1], 1.0);
        let x = conv2d_transpose(&y, &k, &g).unwrap();
        assert_eq!(x.shape(), &[1, 4, 4, 1]);
        assert!(x.elems().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 4, 2]);
        let k = Tensor::<f32>::zeros(vec![1, 1, 3, 1]);
        let g = ConvGeometry::new(1, 1, (1, 1), Padding::NONE);
        assert!(conv2d(&x, &k, &g).is_err());
    }
}
