//! Separable resampling with half-pixel centers and reflect boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Area,
    Bilinear,
    Bicubic,
}

impl ResizeMode {
    pub const ALL: [ResizeMode; 3] = [ResizeMode::Area, ResizeMode::Bilinear, ResizeMode::Bicubic];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResizeSpec {
    pub mode: ResizeMode,
    /// Output / input size ratio.
    pub scale: f64,
}

impl ResizeSpec {
    pub fn identity() -> Self {
        ResizeSpec {
            mode: ResizeMode::Area,
            scale: 1.0,
        }
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::domain("scale", format!("{} is not positive", self.scale)));
        }
        let h = (height as f64 * self.scale).round() as usize;
        let w = (width as f64 * self.scale).round() as usize;
        if h == 0 || w == 0 {
            return Err(Error::domain(
                "scale",
                format!("{height}x{width} scaled by {} is empty", self.scale),
            ));
        }
        Ok((h, w))
    }
}

pub fn resize(image: &Image, spec: &ResizeSpec) -> Result<Image> {
    let (h, w) = spec.output_dims(image.height(), image.width())?;
    resize_to(image, spec.mode, h, w)
}

/// Resamples to an exact output size; each axis uses its own ratio.
pub fn resize_to(image: &Image, mode: ResizeMode, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::domain("size", "output size must be at least 1x1"));
    }
    let (c, h, w) = image.dims();
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let rows = taps(mode, h, out_h);
    let cols = taps(mode, w, out_w);
    // horizontal pass then vertical pass
    let mut tmp = vec![0f64; c * h * out_w];
    for ch in 0..c {
        let plane = image.plane(ch);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (x, t) in cols.iter().enumerate() {
                tmp[(ch * h + y) * out_w + x] = t.iter().map(|&(i, wt)| wt * src[i] as f64).sum();
            }
        }
    }
    let mut out = Image::zeros(c, out_h, out_w);
    for ch in 0..c {
        for (y, t) in rows.iter().enumerate() {
            for x in 0..out_w {
                let v: f64 = t.iter().map(|&(i, wt)| wt * tmp[(ch * h + i) * out_w + x]).sum();
                out.set(ch, y, x, v as f32);
            }
        }
    }
    Ok(out)
}

/// Per output index, the (source index, weight) pairs; weights sum to 1.
fn taps(mode: ResizeMode, n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| match mode {
            ResizeMode::Area => area_taps(o, ratio, n_in),
            ResizeMode::Bilinear => {
                let src = (o as f64 + 0.5) * ratio - 0.5;
                let i0 = src.floor();
                let f = src - i0;
                let i0 = i0 as isize;
                merge(vec![(reflect(i0, n_in as isize), 1.0 - f), (reflect(i0 + 1, n_in as isize), f)])
            }
            ResizeMode::Bicubic => {
                let src = (o as f64 + 0.5) * ratio - 0.5;
                let i0 = src.floor();
                let f = src - i0;
                let i0 = i0 as isize;
                merge(
                    (-1..=2)
                        .map(|d| (reflect(i0 + d, n_in as isize), cubic(f - d as f64)))
                        .collect(),
                )
            }
        })
        .collect()
}

fn area_taps(o: usize, ratio: f64, n_in: usize) -> Vec<(usize, f64)> {
    let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
    let mut t = Vec::new();
    let first = lo.floor() as usize;
    let last = (hi.ceil() as usize).min(n_in);
    for i in first..last {
        let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
        if overlap > 0.0 {
            t.push((i, overlap / ratio));
        }
    }
    t
}

fn merge(mut t: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    t.sort_by_key(|&(i, _)| i);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(t.len());
    for (i, w) in t {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += w,
            _ => out.push((i, w)),
        }
    }
    out.retain(|&(_, w)| w != 0.0);
    out
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}
