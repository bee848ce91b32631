//! Baseline JPEG pixel effect: color transform, 8x8 DCT, table quantization.
//!
//! Entropy coding is lossless and therefore omitted; the roundtrip reproduces
//! exactly what a baseline encoder/decoder pair does to sample values
//! (without 8-bit rounding of intermediate samples).

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JpegSpec {
    /// Whether the stage compresses.
    pub j: bool,
    /// Quality factor; 100 when `j` is false.
    pub q: u32,
}

impl JpegSpec {
    pub fn none() -> Self {
        JpegSpec { j: false, q: 100 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.j && !(1..100).contains(&self.q) {
            return Err(Error::domain("q", format!("{} not in [1, 100) for a compressed stage", self.q)));
        }
        if !self.j && self.q != 100 {
            return Err(Error::domain("q", "uncompressed stages store q = 100"));
        }
        Ok(())
    }
}

const LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_BASE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

fn scaled_table(base: &[u16; 64], quality: u32) -> [f64; 64] {
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut t = [0.0; 64];
    for (dst, &b) in t.iter_mut().zip(base) {
        *dst = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

/// Scaled `(luma, chroma)` quantization tables for a quality factor.
pub fn quant_tables(quality: u32) -> Result<([f64; 64], [f64; 64])> {
    if !(1..=100).contains(&quality) {
        return Err(Error::domain("q", format!("{quality} not in [1, 100]")));
    }
    Ok((scaled_table(&LUMA_BASE, quality), scaled_table(&CHROMA_BASE, quality)))
}

/// Orthonormal DCT-II basis, `basis[u * 8 + x]`.
fn dct_basis() -> &'static [f64; 64] {
    static BASIS: OnceLock<[f64; 64]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [0.0; 64];
        for u in 0..8 {
            let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for x in 0..8 {
                b[u * 8 + x] = cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

fn fdct(block: &mut [f64; 64]) {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u * 8 + x] * block[y * 8 + x]).sum();
        }
    }
    for v in 0..8 {
        for u in 0..8 {
            block[v * 8 + u] = (0..8).map(|y| b[v * 8 + y] * tmp[y * 8 + u]).sum();
        }
    }
}

fn idct(block: &mut [f64; 64]) {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u * 8 + x] * block[v * 8 + u]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|v| b[v * 8 + y] * tmp[v * 8 + x]).sum();
        }
    }
}

/// Quantizes one sample plane (values in 0..255 units) block by block.
/// The plane is edge-extended to a multiple of 8, as encoders do.
fn quantize_plane(plane: &mut [f64], h: usize, w: usize, table: &[f64; 64]) {
    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));
    let mut block = [0.0; 64];
    for by in 0..bh {
        for bx in 0..bw {
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by * 8 + y).min(h - 1);
                    let sx = (bx * 8 + x).min(w - 1);
                    block[y * 8 + x] = plane[sy * w + sx] - 128.0;
                }
            }
            fdct(&mut block);
            for (c, q) in block.iter_mut().zip(table) {
                *c = (*c / q).round() * q;
            }
            idct(&mut block);
            for y in 0..8 {
                for x in 0..8 {
                    let (sy, sx) = (by * 8 + y, bx * 8 + x);
                    if sy < h && sx < w {
                        plane[sy * w + sx] = block[y * 8 + x] + 128.0;
                    }
                }
            }
        }
    }
}

fn subsample_420(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (sh, sw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; sh * sw];
    for y in 0..sh {
        for x in 0..sw {
            let mut acc = 0.0;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                acc += plane[(2 * y + dy).min(h - 1) * w + (2 * x + dx).min(w - 1)];
            }
            out[y * sw + x] = acc / 4.0;
        }
    }
    (out, sh, sw)
}

/// JPEG pixel roundtrip at quality `q` (1..=100), optionally with 4:2:0
/// chroma subsampling (box down, replicate up).
pub fn jpeg_roundtrip_with(image: &Image, quality: u32, chroma_420: bool) -> Result<Image> {
    let (luma_t, chroma_t) = quant_tables(quality)?;
    let (c, h, w) = image.dims();
    let n = h * w;
    let px = |ch: usize, i: usize| image.data()[ch * n + i] as f64 * 255.0;
    if c == 1 {
        let mut y: Vec<f64> = (0..n).map(|i| px(0, i)).collect();
        quantize_plane(&mut y, h, w, &luma_t);
        let data = y.iter().map(|v| (v / 255.0).clamp(0.0, 1.0) as f32).collect();
        return Image::new(1, h, w, data);
    }
    if c != 3 {
        return Err(Error::Shape(format!("JPEG needs 1 or 3 channels, got {c}")));
    }
    let mut ys = vec![0.0; n];
    let mut cb = vec![0.0; n];
    let mut cr = vec![0.0; n];
    for i in 0..n {
        let (r, g, b) = (px(0, i), px(1, i), px(2, i));
        ys[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = -0.168_735_891_6 * r - 0.331_264_108_4 * g + 0.5 * b + 128.0;
        cr[i] = 0.5 * r - 0.418_687_589_2 * g - 0.081_312_410_8 * b + 128.0;
    }
    quantize_plane(&mut ys, h, w, &luma_t);
    if chroma_420 {
        for plane in [&mut cb, &mut cr] {
            let (mut small, sh, sw) = subsample_420(plane, h, w);
            quantize_plane(&mut small, sh, sw, &chroma_t);
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = small[(y / 2) * sw + x / 2];
                }
            }
        }
    } else {
        quantize_plane(&mut cb, h, w, &chroma_t);
        quantize_plane(&mut cr, h, w, &chroma_t);
    }
    let mut out = Image::zeros(3, h, w);
    let data = out.data_mut();
    for i in 0..n {
        let (y, u, v) = (ys[i], cb[i] - 128.0, cr[i] - 128.0);
        let rgb = [y + 1.402 * v, y - 0.344_136_286_2 * u - 0.714_136_286_2 * v, y + 1.772 * u];
        for (ch, val) in rgb.iter().enumerate() {
            data[ch * n + i] = (val / 255.0).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

pub fn jpeg_roundtrip(image: &Image, quality: u32) -> Result<Image> {
    jpeg_roundtrip_with(image, quality, false)
}
