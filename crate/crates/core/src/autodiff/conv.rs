//! im2col helpers for stride-1, same-size 2-D cross-correlation.

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use crate::image::reflect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
    Reflect,
}

/// For each kernel offset, the source index of every output position
/// (`None` where zero padding applies).
pub(crate) fn offsets(n: usize, k: usize, pad: Padding) -> Vec<Vec<Option<usize>>> {
    let r = (k / 2) as isize;
    (0..k as isize)
        .map(|d| {
            (0..n as isize)
                .map(|i| {
                    let s = i + d - r;
                    match pad {
                        Padding::Zero => (0..n as isize).contains(&s).then_some(s as usize),
                        Padding::Reflect => Some(reflect(s, n as isize)),
                    }
                })
                .collect()
        })
        .collect()
}

/// Output columns `lo..hi` read the source at `x + d - r` without padding.
fn interior(n: usize, k: usize, d: usize) -> (usize, usize) {
    let r = k / 2;
    let lo = r.saturating_sub(d).min(n);
    let hi = (n + r).saturating_sub(d).min(n).max(lo);
    (lo, hi)
}

pub(crate) struct ConvGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub rows: Vec<Vec<Option<usize>>>,
    pub cols: Vec<Vec<Option<usize>>>,
    spans: Vec<(usize, usize)>,
}

impl ConvGeometry {
    pub fn new(c: usize, h: usize, w: usize, k: usize, pad: Padding) -> Self {
        ConvGeometry {
            c,
            h,
            w,
            k,
            rows: offsets(h, k, pad),
            cols: offsets(w, k, pad),
            spans: (0..k).map(|d| interior(w, k, d)).collect(),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Fills `cols` (`C k k x H W`) from one `C x H x W` sample.
    pub fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let hw = h * w;
        let r = k / 2;
        for c in 0..self.c {
            let plane = &input[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    let dst = &mut cols[row..row + hw];
                    let (lo, hi) = self.spans[kx];
                    let map = &self.cols[kx];
                    for y in 0..h {
                        let out = &mut dst[y * w..(y + 1) * w];
                        let Some(sy) = self.rows[ky][y] else {
                            out.fill(T::zero());
                            continue;
                        };
                        let src = &plane[sy * w..(sy + 1) * w];
                        for x in (0..lo).chain(hi..w) {
                            out[x] = map[x].map_or(T::zero(), |sx| src[sx]);
                        }
                        if hi > lo {
                            out[lo..hi].copy_from_slice(&src[lo + kx - r..hi + kx - r]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into a `C x H x W` gradient buffer.
    pub fn col2im<T: Scalar>(&self, cols: &[T], grad: &mut [T]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let hw = h * w;
        let r = k / 2;
        for c in 0..self.c {
            let plane = &mut grad[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    let src = &cols[row..row + hw];
                    let (lo, hi) = self.spans[kx];
                    let map = &self.cols[kx];
                    for y in 0..h {
                        let Some(sy) = self.rows[ky][y] else { continue };
                        let g = &src[y * w..(y + 1) * w];
                        let dst = &mut plane[sy * w..(sy + 1) * w];
                        for x in (0..lo).chain(hi..w) {
                            if let Some(sx) = map[x] {
                                dst[sx] += g[x];
                            }
                        }
                        if hi > lo {
                            for (d, &v) in dst[lo + kx - r..hi + kx - r].iter_mut().zip(&g[lo..hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
