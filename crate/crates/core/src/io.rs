//! Netpbm image I/O (binary P6 / P5, 8-bit) and kernel exports.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{quantize_u8, Image};
use crate::kernels::KernelMatrix;

/// Encodes an RGB image as P6 or a single-channel image as P5.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims();
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::Shape(format!("cannot encode {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize_u8(img.get(ch, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // single whitespace byte separates header from raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported magic `{m}` (expected P5 or P6)")),
    };
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
    let w = parse(&fields[1], "width")?;
    let h = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (expected 255)"));
    }
    let need = channels * w * h;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| "truncated raster".to_string())?;
    let mut img = Image::zeros(channels, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                img.set(c, y, x, raster[(y * w + x) * channels + c] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_kernel_text(path: impl AsRef<Path>, k: &KernelMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, k.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_kernel_text(path: impl AsRef<Path>) -> Result<KernelMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut weights = Vec::new();
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        rows += 1;
        for tok in line.split_whitespace() {
            weights.push(tok.parse::<f64>().map_err(|_| bad(format!("bad number `{tok}`")))?);
        }
    }
    KernelMatrix::from_weights(rows, weights).map_err(|e| bad(e.to_string()))
}

/// Max-normalized 8-bit P5 rendering of a kernel.
pub fn encode_kernel_pgm(k: &KernelMatrix) -> Vec<u8> {
    let n = k.size();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(k.to_gray8());
    out
}

pub fn write_kernel_pgm(path: impl AsRef<Path>, k: &KernelMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_kernel_pgm(k)).map_err(|e| Error::io(path, e))
}

/// Side-by-side rendering of ground truth, prediction and absolute
/// difference, each max-normalized independently, separated by a 1px gap.
pub fn kernel_triptych(gt: &KernelMatrix, pred: &KernelMatrix) -> Image {
    let n = gt.size().max(pred.size());
    let (gt, pred) = (gt.resized(n), pred.resized(n));
    let diff = KernelMatrix::from_weights(
        n,
        gt.weights().iter().zip(pred.weights()).map(|(a, b)| (a - b).abs()).collect(),
    )
    .expect("same size");
    let panels = [gt.to_gray8(), pred.to_gray8(), diff.to_gray8()];
    let mut img = Image::zeros(1, n, 3 * n + 2);
    for (p, panel) in panels.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                img.set(0, y, p * (n + 1) + x, panel[y * n + x] as f32 / 255.0);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_roundtrip_is_exact_on_8bit_values() {
        let img = Image::from_fn(3, 5, 7, |c, y, x| ((c * 71 + y * 13 + x * 29) % 256) as f32 / 255.0);
        let back = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let gray = Image::from_fn(1, 4, 3, |_, y, x| ((y * 3 + x) * 20) as f32 / 255.0);
        let bytes = encode_pnm(&gray).unwrap();
        assert!(bytes.starts_with(b"P5\n3 4\n255\n"));
        assert_eq!(decode_pnm(&bytes).unwrap(), gray);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert!(decode_pnm(b"P3\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n4 4\n255\n\x00").unwrap_err().contains("truncated"));
    }
}
