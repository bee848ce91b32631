use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;

use crate::image::Image;
use crate::rng::{derive_seed, rng_from_seed, Rng as ChaRng};

fn color(rng: &mut ChaRng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise with the given cell size, in [-1, 1].
fn value_noise(size: usize, cell: usize, rng: &mut ChaRng) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |j: usize, i: usize| lattice[j * n + i];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

struct Polygon {
    pts: Vec<(f64, f64)>,
    color: [f64; 3],
    alpha: f64,
}

impl Polygon {
    fn random(size: usize, rng: &mut ChaRng) -> Self {
        let s = size as f64;
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(s / 10.0..s / 3.0);
        let n = rng.random_range(3..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let pts = angles
            .iter()
            .map(|a| {
                let rr = r * rng.random_range(0.5..1.0);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        Polygon {
            pts,
            color: color(rng),
            alpha: rng.random_range(0.6..=1.0),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        let n = self.pts.len();
        for i in 0..n {
            let (xi, yi) = self.pts[i];
            let (xj, yj) = self.pts[(i + n - 1) % n];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
        }
        inside
    }
}

/// One procedural HR image: a colour gradient, multi-scale lattice noise,
/// an optional stripe or checker texture and a few hard-edged polygons.
pub fn synth_hr_image(size: usize, seed: u64) -> Image {
    let mut rng = rng_from_seed(seed);
    let s = size as f64;
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let a = rng.random_range(0.0..2.0 * PI);
    let mut px: Vec<[f64; 3]> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let t = (((x - s / 2.0) * a.cos() + (y - s / 2.0) * a.sin()) / s + 0.5).clamp(0.0, 1.0);
            [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t)
        })
        .collect();

    for cell in [16usize, 8, 4, 2] {
        if cell >= size || rng.random::<f64>() < 0.3 {
            continue;
        }
        let amp = rng.random_range(0.03..0.15);
        let tint = color(&mut rng);
        let noise = value_noise(size, cell, &mut rng);
        for (p, n) in px.iter_mut().zip(&noise) {
            for c in 0..3 {
                p[c] += amp * n * (0.5 + tint[c]);
            }
        }
    }

    let texture = rng.random_range(0..3);
    if texture > 0 {
        let tex_color = color(&mut rng);
        let opacity = rng.random_range(0.2..0.6);
        let phi = rng.random_range(0.0..PI);
        let freq = rng.random_range(0.05..0.35);
        let period = rng.random_range(2..=8) as f64;
        let (mx, my) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let mask_angle = rng.random_range(0.0..2.0 * PI);
        for (i, p) in px.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            if (x - mx) * mask_angle.cos() + (y - my) * mask_angle.sin() < 0.0 {
                continue;
            }
            let v = if texture == 1 {
                0.5 + 0.5 * (2.0 * PI * freq * (x * phi.cos() + y * phi.sin())).sin()
            } else if ((x / period).floor() + (y / period).floor()) as i64 % 2 == 0 {
                1.0
            } else {
                0.0
            };
            for c in 0..3 {
                p[c] = p[c] * (1.0 - opacity * v) + tex_color[c] * opacity * v;
            }
        }
    }

    for _ in 0..rng.random_range(1..=4) {
        let poly = Polygon::random(size, &mut rng);
        for (i, p) in px.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            if poly.contains(x, y) {
                for (v, col) in p.iter_mut().zip(poly.color) {
                    *v = *v * (1.0 - poly.alpha) + col * poly.alpha;
                }
            }
        }
    }

    Image::from_fn(3, size, size, |c, y, x| px[y * size + x][c].clamp(0.0, 1.0) as f32)
}

/// `n` images, image `i` seeded by `derive_seed(seed, i)`.
pub fn synth_hr_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..n)
        .into_par_iter()
        .map(|i| synth_hr_image(size, derive_seed(seed, i as u64)))
        .collect()
}
