//! Binary PPM (P6) and PGM (P5) raster I/O. The simplest bit-exact image
//! formats: no codec, no compression, trivially diffable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write an RGB image tensor [3,H,W] with values in [0,1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_ppm",
            detail: format!("expected [3,H,W], got {shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(data[c * plane + i]));
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write a grayscale tensor [H,W] with values in [0,1] as binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "write_pgm",
            detail: format!("expected [H,W], got {shape:?}"),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Read a binary PPM (P6, maxval 255) into an RGB tensor [3,H,W] in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fmt = |msg: String| Error::Format {
        what: format!("ppm {}", path.display()),
        msg,
    };

    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(fmt("missing P6 magic".into()));
    }
    pos += 2;

    let next_token = |pos: &mut usize| -> Result<usize> {
        // skip whitespace and '#' comments between header tokens
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fmt("expected integer header token".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .expect("ascii digits")
            .parse::<usize>()
            .map_err(|e| fmt(format!("bad header integer: {e}")))
    };

    let w = next_token(&mut pos)?;
    let h = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if maxval != 255 {
        return Err(fmt(format!("unsupported maxval {maxval}, only 255")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt("missing whitespace before pixel data".into()));
    }
    pos += 1;
    if w == 0 || h == 0 {
        return Err(fmt("zero image dimension".into()));
    }

    let need = w * h * 3;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(fmt(format!(
            "pixel payload is {} bytes, expected {need}",
            raster.len()
        )));
    }
    let plane = w * h;
    let mut data = vec![0.0f64; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raster[i * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}
