//! Binary PPM (P6, maxval 255) reading and writing.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Images;

/// Encodes image `n` of `images` as P6 bytes.
pub fn encode_ppm(images: &Images, n: usize) -> Result<Vec<u8>> {
    if n >= images.len() {
        return Err(Error::Invalid(format!("image {n} of {}", images.len())));
    }
    let mut out = format!("P6\n{} {}\n255\n", images.width(), images.height()).into_bytes();
    out.extend_from_slice(images.image(n));
    Ok(out)
}

pub fn write_ppm(images: &Images, n: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(images, n)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn bad(msg: &str) -> Error {
    Error::Invalid(format!("ppm: {msg}"))
}

/// Parses a P6 file with maxval 255 into a single-image batch.
pub fn decode_ppm(bytes: &[u8]) -> Result<Images> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h * 3 {
        return Err(bad("raster size does not match header"));
    }
    Images::new(1, h, w, raster.to_vec())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Images> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
