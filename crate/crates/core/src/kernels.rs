//! Blur kernel synthesis: generalized Gaussian, plateau and circular low-pass
//! (sinc) families, plus the samplers used to build degradations.
//!
//! Kernel coordinates are integers centered on the middle pixel. `x` runs
//! along columns (left to right) and `y` along rows (top to bottom); the
//! quadratic form is evaluated on the column vector `[x, y]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Plateau,
    Sinc,
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelKind::Gaussian),
            "plateau" => Ok(KernelKind::Plateau),
            "sinc" => Ok(KernelKind::Sinc),
            other => Err(Error::domain("kind", format!("unknown kernel kind `{other}`"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Plateau => "plateau",
            KernelKind::Sinc => "sinc",
        })
    }
}

/// Parameters of one blur kernel.
///
/// A Gaussian spec with `size == 1` is the identity (no-blur) kernel; it is
/// the only spec allowed a size below 3 and zero sigmas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurKernelSpec {
    pub kind: KernelKind,
    pub size: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
    pub beta: f64,
    pub omega_c: f64,
}

impl BlurKernelSpec {
    pub fn gaussian(sigma_x: f64, sigma_y: f64, theta: f64, beta: f64, size: usize) -> Result<Self> {
        Self::shaped(KernelKind::Gaussian, sigma_x, sigma_y, theta, beta, size)
    }

    pub fn plateau(sigma_x: f64, sigma_y: f64, theta: f64, beta: f64, size: usize) -> Result<Self> {
        Self::shaped(KernelKind::Plateau, sigma_x, sigma_y, theta, beta, size)
    }

    fn shaped(
        kind: KernelKind,
        sigma_x: f64,
        sigma_y: f64,
        theta: f64,
        beta: f64,
        size: usize,
    ) -> Result<Self> {
        let spec = BlurKernelSpec {
            kind,
            size,
            sigma_x,
            sigma_y,
            theta,
            beta,
            omega_c: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sinc(omega_c: f64, size: usize) -> Result<Self> {
        let spec = BlurKernelSpec {
            kind: KernelKind::Sinc,
            size,
            sigma_x: 0.0,
            sigma_y: 0.0,
            theta: 0.0,
            beta: 0.0,
            omega_c,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The no-blur kernel: a 1x1 Gaussian slot with zeroed shape fields.
    pub fn identity() -> Self {
        BlurKernelSpec {
            kind: KernelKind::Gaussian,
            size: 1,
            sigma_x: 0.0,
            sigma_y: 0.0,
            theta: 0.0,
            beta: 1.0,
            omega_c: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == KernelKind::Gaussian && self.size == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_identity() {
            return Ok(());
        }
        check_size(self.size)?;
        match self.kind {
            KernelKind::Gaussian | KernelKind::Plateau => {
                check_shape(self.sigma_x, self.sigma_y, self.beta)?;
                if !(-PI..=PI).contains(&self.theta) {
                    return Err(Error::domain("theta", format!("{} not in [-pi, pi]", self.theta)));
                }
                if self.omega_c != 0.0 {
                    return Err(Error::domain("omega_c", "must be zero for gaussian/plateau kernels"));
                }
            }
            KernelKind::Sinc => {
                check_omega(self.omega_c)?;
                if self.sigma_x != 0.0 || self.sigma_y != 0.0 || self.theta != 0.0 || self.beta != 0.0 {
                    return Err(Error::domain("sigma_x", "sinc kernels store zero sigma/theta/beta"));
                }
            }
        }
        Ok(())
    }

    /// Rewrites an anisotropic spec into the unique equivalent form with
    /// `sigma_x >= sigma_y` and `theta` in `[-pi/2, pi/2)`.
    ///
    /// Swapping the two sigmas while rotating by a quarter turn, or rotating
    /// by a half turn, yields the same covariance, so the realized kernel is
    /// unchanged up to rounding.
    pub fn canonical(mut self) -> Self {
        if self.kind == KernelKind::Sinc || self.is_identity() {
            return self;
        }
        if self.sigma_x < self.sigma_y {
            std::mem::swap(&mut self.sigma_x, &mut self.sigma_y);
            self.theta += PI / 2.0;
        }
        self.theta = wrap_half_turn(self.theta);
        if self.sigma_x == self.sigma_y {
            self.theta = 0.0;
        }
        self
    }
}

fn wrap_half_turn(theta: f64) -> f64 {
    let t = (theta + PI / 2.0).rem_euclid(PI) - PI / 2.0;
    // rem_euclid may round up to exactly PI/2
    if t >= PI / 2.0 {
        t - PI
    } else {
        t
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(Error::domain("size", format!("{size} is not an odd integer >= 3")));
    }
    Ok(())
}

fn check_shape(sigma_x: f64, sigma_y: f64, beta: f64) -> Result<()> {
    if !(sigma_x > 0.0 && sigma_x.is_finite()) {
        return Err(Error::domain("sigma_x", format!("{sigma_x} is not positive")));
    }
    if !(sigma_y > 0.0 && sigma_y.is_finite()) {
        return Err(Error::domain("sigma_y", format!("{sigma_y} is not positive")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::domain("beta", format!("{beta} is not positive")));
    }
    Ok(())
}

fn check_omega(omega_c: f64) -> Result<()> {
    if !(omega_c > 0.0 && omega_c <= PI) {
        return Err(Error::domain("omega_c", format!("{omega_c} not in (0, pi]")));
    }
    Ok(())
}

/// A square, odd-sized grid of kernel weights stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    size: usize,
    weights: Vec<f64>,
}

impl KernelMatrix {
    pub fn from_weights(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) || size == 0 {
            return Err(Error::domain("size", format!("{size} is not odd")));
        }
        if weights.len() != size * size {
            return Err(Error::Shape(format!(
                "{} weights for a {size}x{size} kernel",
                weights.len()
            )));
        }
        Ok(KernelMatrix { size, weights })
    }

    /// Kernel with a single unit weight at the center.
    pub fn identity(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        weights[size * size / 2] = 1.0;
        KernelMatrix { size, weights }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> isize {
        (self.size / 2) as isize
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at centered coordinates (`x` column offset, `y` row offset).
    pub fn at(&self, x: isize, y: isize) -> f64 {
        let r = self.radius();
        self.weights[((y + r) as usize) * self.size + (x + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Second central moments `(m_xx, m_xy, m_yy)` of the weights.
    pub fn second_moments(&self) -> (f64, f64, f64) {
        let r = self.radius();
        let total = self.sum();
        let (mut mx, mut my) = (0.0, 0.0);
        for y in -r..=r {
            for x in -r..=r {
                let w = self.at(x, y);
                mx += w * x as f64;
                my += w * y as f64;
            }
        }
        mx /= total;
        my /= total;
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for y in -r..=r {
            for x in -r..=r {
                let w = self.at(x, y);
                let (dx, dy) = (x as f64 - mx, y as f64 - my);
                xx += w * dx * dx;
                xy += w * dx * dy;
                yy += w * dy * dy;
            }
        }
        (xx / total, xy / total, yy / total)
    }

    /// Zero-pads (or center-crops) to another odd size.
    pub fn resized(&self, size: usize) -> KernelMatrix {
        let mut out = vec![0.0; size * size];
        let (r_in, r_out) = (self.radius(), (size / 2) as isize);
        let r = r_in.min(r_out);
        for y in -r..=r {
            for x in -r..=r {
                out[((y + r_out) as usize) * size + (x + r_out) as usize] = self.at(x, y);
            }
        }
        KernelMatrix { size, weights: out }
    }

    /// Plain-text grid: one row per line, space separated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.weights.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|w| format!("{w:.10e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Max-normalized 8-bit grayscale bytes (row-major), negative lobes clipped to 0.
    pub fn to_gray8(&self) -> Vec<u8> {
        let max = self.weights.iter().cloned().fold(f64::MIN, f64::max);
        self.weights
            .iter()
            .map(|&w| {
                if max <= 0.0 {
                    0
                } else {
                    (255.0 * (w / max).clamp(0.0, 1.0)).round() as u8
                }
            })
            .collect()
    }
}

/// Inverse of `Rot(theta) diag(sx^2, sy^2) Rot(theta)^T` as `(a, b, c)` with
/// the quadratic form `a x^2 + 2 b x y + c y^2`.
fn inverse_covariance(sigma_x: f64, sigma_y: f64, theta: f64) -> (f64, f64, f64) {
    let (s, c) = theta.sin_cos();
    let (vx, vy) = (sigma_x * sigma_x, sigma_y * sigma_y);
    let cxx = c * c * vx + s * s * vy;
    let cxy = c * s * (vx - vy);
    let cyy = s * s * vx + c * c * vy;
    let det = cxx * cyy - cxy * cxy;
    (cyy / det, -cxy / det, cxx / det)
}

fn shaped_weights(
    sigma_x: f64,
    sigma_y: f64,
    theta: f64,
    beta: f64,
    size: usize,
    profile: impl Fn(f64) -> f64,
) -> Result<KernelMatrix> {
    check_shape(sigma_x, sigma_y, beta)?;
    check_size(size)?;
    let (a, b, c) = inverse_covariance(sigma_x, sigma_y, theta);
    let r = (size / 2) as isize;
    let mut weights = Vec::with_capacity(size * size);
    for y in -r..=r {
        for x in -r..=r {
            let (x, y) = (x as f64, y as f64);
            let q = a * x * x + 2.0 * b * x * y + c * y * y;
            weights.push(profile(q.max(0.0).powf(beta)));
        }
    }
    Ok(KernelMatrix { size, weights })
}

/// Unnormalized generalized Gaussian `exp(-0.5 * q^beta)`.
pub fn gaussian_weights(sigma_x: f64, sigma_y: f64, theta: f64, beta: f64, size: usize) -> Result<KernelMatrix> {
    shaped_weights(sigma_x, sigma_y, theta, beta, size, |qb| (-0.5 * qb).exp())
}

/// Unnormalized plateau `1 / (1 + q^beta)`.
pub fn plateau_weights(sigma_x: f64, sigma_y: f64, theta: f64, beta: f64, size: usize) -> Result<KernelMatrix> {
    shaped_weights(sigma_x, sigma_y, theta, beta, size, |qb| 1.0 / (1.0 + qb))
}

/// Unnormalized circular low-pass kernel built on `J1`; the center takes the
/// limit `omega_c^2 / (4 pi)`.
pub fn sinc_weights(omega_c: f64, size: usize) -> Result<KernelMatrix> {
    check_omega(omega_c)?;
    check_size(size)?;
    let r = (size / 2) as isize;
    let mut weights = Vec::with_capacity(size * size);
    for y in -r..=r {
        for x in -r..=r {
            let d = ((x * x + y * y) as f64).sqrt();
            let w = if d == 0.0 {
                omega_c * omega_c / (4.0 * PI)
            } else {
                omega_c / (2.0 * PI * d) * bessel_j1(omega_c * d)
            };
            weights.push(w);
        }
    }
    Ok(KernelMatrix { size, weights })
}

pub fn synth_gaussian_kernel(sigma_x: f64, sigma_y: f64, theta: f64, beta: f64, size: usize) -> Result<KernelMatrix> {
    normalize_kernel(&gaussian_weights(sigma_x, sigma_y, theta, beta, size)?)
}

pub fn synth_plateau_kernel(sigma_x: f64, sigma_y: f64, theta: f64, beta: f64, size: usize) -> Result<KernelMatrix> {
    normalize_kernel(&plateau_weights(sigma_x, sigma_y, theta, beta, size)?)
}

pub fn synth_sinc_kernel(omega_c: f64, size: usize) -> Result<KernelMatrix> {
    normalize_kernel(&sinc_weights(omega_c, size)?)
}

pub fn normalize_kernel(kernel: &KernelMatrix) -> Result<KernelMatrix> {
    let sum = kernel.sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::DegenerateKernel);
    }
    Ok(KernelMatrix {
        size: kernel.size,
        weights: kernel.weights.iter().map(|w| w / sum).collect(),
    })
}

/// Multiplies each weight by an independent factor drawn from
/// `U[1 - strength, 1 + strength]` and renormalizes.
pub fn apply_kernel_noise<R: Rng + ?Sized>(kernel: &KernelMatrix, strength: f64, rng: &mut R) -> Result<KernelMatrix> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::domain("strength", format!("{strength} not in [0, 1]")));
    }
    if strength == 0.0 {
        return Ok(kernel.clone());
    }
    let noisy = KernelMatrix {
        size: kernel.size,
        weights: kernel
            .weights
            .iter()
            .map(|w| w * rng.random_range(1.0 - strength..=1.0 + strength))
            .collect(),
    };
    normalize_kernel(&noisy)
}

/// Realizes a spec: synthesis, optional multiplicative noise, normalization.
///
/// Sinc kernels skip the noise unless `noise_sinc` is set.
pub fn kernel_from_spec<R: Rng + ?Sized>(
    spec: &BlurKernelSpec,
    noise_strength: f64,
    noise_sinc: bool,
    rng: &mut R,
) -> Result<KernelMatrix> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(KernelMatrix::identity(1));
    }
    let base = match spec.kind {
        KernelKind::Gaussian => synth_gaussian_kernel(spec.sigma_x, spec.sigma_y, spec.theta, spec.beta, spec.size)?,
        KernelKind::Plateau => synth_plateau_kernel(spec.sigma_x, spec.sigma_y, spec.theta, spec.beta, spec.size)?,
        KernelKind::Sinc => synth_sinc_kernel(spec.omega_c, spec.size)?,
    };
    if spec.kind == KernelKind::Sinc && !noise_sinc {
        return Ok(base);
    }
    apply_kernel_noise(&base, noise_strength, rng)
}

// J1 coefficients. For |x| < 12 the Maclaurin series
//     J1(x) = sum_m (-1)^m (x/2)^(2m+1) / (m! (m+1)!)
// is summed until terms vanish (at most 40 terms; terms peak near 4e3 at
// x = 12, so cancellation costs about 4 digits, leaving ~1e-12 absolute error).
// Beyond that the Hankel expansion
//     J1(x) = sqrt(2/(pi x)) (P cos chi - Q sin chi),  chi = x - 3pi/4
// is truncated at its smallest term, which is below 1e-10 for x >= 12.
const SERIES_LIMIT: f64 = 12.0;

pub fn bessel_j1(x: f64) -> f64 {
    let ax = x.abs();
    let value = if ax < SERIES_LIMIT {
        j1_series(ax)
    } else {
        j1_hankel(ax)
    };
    if x < 0.0 {
        -value
    } else {
        value
    }
}

fn j1_series(x: f64) -> f64 {
    let half = 0.5 * x;
    let h2 = half * half;
    let mut term = half;
    let mut sum = term;
    for m in 1..40 {
        let m = m as f64;
        term *= -h2 / (m * (m + 1.0));
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

fn j1_hankel(x: f64) -> f64 {
    const MU: f64 = 4.0;
    let z = 8.0 * x;
    // a_k = prod_{i=1..k} (mu - (2i-1)^2) / (k! z^k); even k feed P, odd k feed Q
    let mut p = 1.0;
    let mut q = 0.0;
    let mut a = 1.0f64;
    let mut last = f64::INFINITY;
    for k in 1..60 {
        let odd = (2 * k - 1) as f64;
        let next = a * (MU - odd * odd) / (k as f64 * z);
        if next.abs() >= last || next.abs() < 1e-17 {
            break;
        }
        last = next.abs();
        a = next;
        // P = a0 - a2 + a4 - ..., Q = a1 - a3 + a5 - ...
        match k % 4 {
            0 => p += a,
            1 => q += a,
            2 => p -= a,
            _ => q -= a,
        }
    }
    let chi = x - 0.75 * PI;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPreset {
    BlurryX2,
    BlurryX4,
    RealStage1,
    RealStage2,
}

impl FromStr for KernelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blurry_x2" => Ok(KernelPreset::BlurryX2),
            "blurry_x4" => Ok(KernelPreset::BlurryX4),
            "real_stage1" => Ok(KernelPreset::RealStage1),
            "real_stage2" => Ok(KernelPreset::RealStage2),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

/// Sigma range of the blurry presets (open interval).
pub const BLURRY_SIGMA: (f64, f64) = (0.6, 5.0);

fn open_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

/// Draws a kernel spec from a preset. Anisotropic draws are returned in
/// canonical form (see [`BlurKernelSpec::canonical`]).
pub fn sample_kernel_spec<R: Rng + ?Sized>(preset: KernelPreset, rng: &mut R) -> BlurKernelSpec {
    match preset {
        KernelPreset::BlurryX2 | KernelPreset::BlurryX4 => {
            let size = if preset == KernelPreset::BlurryX2 { 11 } else { 31 };
            let sigma_x = open_uniform(rng, BLURRY_SIGMA.0, BLURRY_SIGMA.1);
            let sigma_y = open_uniform(rng, BLURRY_SIGMA.0, BLURRY_SIGMA.1);
            let theta = rng.random_range(-PI..=PI);
            BlurKernelSpec {
                kind: KernelKind::Gaussian,
                size,
                sigma_x,
                sigma_y,
                theta,
                beta: 1.0,
                omega_c: 0.0,
            }
            .canonical()
        }
        KernelPreset::RealStage1 | KernelPreset::RealStage2 => {
            let sigma_hi = if preset == KernelPreset::RealStage1 { 3.0 } else { 1.5 };
            let size = 2 * rng.random_range(3..=10usize) + 1;
            let u: f64 = rng.random();
            if u < 0.15 {
                return BlurKernelSpec {
                    kind: KernelKind::Sinc,
                    size,
                    sigma_x: 0.0,
                    sigma_y: 0.0,
                    theta: 0.0,
                    beta: 0.0,
                    omega_c: rng.random_range(PI / 3.0..=PI),
                };
            }
            let (kind, beta) = if u < 0.85 {
                (KernelKind::Gaussian, rng.random_range(0.5..=4.0))
            } else {
                (KernelKind::Plateau, rng.random_range(1.0..=2.0))
            };
            BlurKernelSpec {
                kind,
                size,
                sigma_x: rng.random_range(0.2..=sigma_hi),
                sigma_y: rng.random_range(0.2..=sigma_hi),
                theta: rng.random_range(-PI..=PI),
                beta,
                omega_c: 0.0,
            }
            .canonical()
        }
    }
}
