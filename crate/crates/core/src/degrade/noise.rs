use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Additive noise of one degradation stage.
///
/// `gaussian` is the type bit (`true` Gaussian, `false` Poisson) and `rgb`
/// the color bit (`true` independent per channel, `false` gray).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(rename = "n_t")]
    pub gaussian: bool,
    #[serde(rename = "n_c")]
    pub rgb: bool,
    pub sigma_g: f64,
    pub lambda: f64,
}

impl NoiseSpec {
    /// Zero-strength Gaussian noise.
    pub fn none() -> Self {
        NoiseSpec {
            gaussian: true,
            rgb: true,
            sigma_g: 0.0,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_g >= 0.0 && self.sigma_g.is_finite()) {
            return Err(Error::domain("sigma_g", format!("{} is negative", self.sigma_g)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::domain("lambda", format!("{} is negative", self.lambda)));
        }
        if self.gaussian && self.lambda != 0.0 {
            return Err(Error::domain("lambda", "gaussian noise stores lambda = 0"));
        }
        if !self.gaussian && self.sigma_g != 0.0 {
            return Err(Error::domain("sigma_g", "poisson noise stores sigma_g = 0"));
        }
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        if self.gaussian {
            self.sigma_g == 0.0
        } else {
            self.lambda == 0.0
        }
    }
}

/// Pre-clamp Gaussian noise samples; gray mode shares one draw per pixel
/// across channels.
pub fn gaussian_noise_field<R: Rng + ?Sized>(
    channels: usize,
    height: usize,
    width: usize,
    sigma_g: f64,
    rgb: bool,
    rng: &mut R,
) -> Result<Vec<f32>> {
    if !(sigma_g >= 0.0 && sigma_g.is_finite()) {
        return Err(Error::domain("sigma_g", format!("{sigma_g} is negative")));
    }
    let n = height * width;
    if sigma_g == 0.0 {
        return Ok(vec![0.0; channels * n]);
    }
    let normal = Normal::new(0.0, sigma_g).expect("finite sigma");
    if rgb {
        Ok((0..channels * n).map(|_| normal.sample(rng) as f32).collect())
    } else {
        let shared: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Ok((0..channels).flat_map(|_| shared.iter().copied()).collect())
    }
}

pub fn add_gaussian_noise<R: Rng + ?Sized>(image: &Image, sigma_g: f64, rgb: bool, rng: &mut R) -> Result<Image> {
    if sigma_g == 0.0 {
        return Ok(image.clone());
    }
    let (c, h, w) = image.dims();
    let field = gaussian_noise_field(c, h, w, sigma_g, rgb, rng)?;
    let mut out = image.clone();
    for (v, n) in out.data_mut().iter_mut().zip(field) {
        *v = (*v + n).clamp(0.0, 1.0);
    }
    Ok(out)
}

fn shot(x: f64, counts_per_unit: f64, rng: &mut (impl Rng + ?Sized)) -> f64 {
    let mean = x.max(0.0) * counts_per_unit;
    if mean <= 0.0 {
        return 0.0;
    }
    let k: f64 = Poisson::new(mean).expect("positive mean").sample(rng);
    k / counts_per_unit
}

/// Pre-clamp shot-noise image `Poisson(x / lambda) * lambda`, so the
/// variance at intensity `x` is `x * lambda`.
///
/// Gray mode draws counts on the BT.601 luminance and adds the resulting
/// offset to every channel.
pub fn poisson_noisy<R: Rng + ?Sized>(image: &Image, lambda: f64, rgb: bool, rng: &mut R) -> Result<Vec<f32>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::domain("lambda", format!("{lambda} is not positive")));
    }
    let v = 1.0 / lambda;
    let (c, h, w) = image.dims();
    let n = h * w;
    if rgb || c == 1 {
        return Ok(image.data().iter().map(|&x| shot(x as f64, v, rng) as f32).collect());
    }
    let mut out = image.data().to_vec();
    for i in 0..n {
        let luma = if c == 3 {
            0.299 * image.data()[i] as f64 + 0.587 * image.data()[n + i] as f64 + 0.114 * image.data()[2 * n + i] as f64
        } else {
            image.data()[i] as f64
        };
        let delta = (shot(luma, v, rng) - luma) as f32;
        for ch in 0..c {
            out[ch * n + i] += delta;
        }
    }
    Ok(out)
}

pub fn add_poisson_noise<R: Rng + ?Sized>(image: &Image, lambda: f64, rgb: bool, rng: &mut R) -> Result<Image> {
    let (c, h, w) = image.dims();
    let data = poisson_noisy(image, lambda, rgb, rng)?;
    Ok(Image::new(c, h, w, data)?.clamped())
}

pub fn apply_noise<R: Rng + ?Sized>(image: &Image, spec: &NoiseSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    if spec.is_noop() {
        return Ok(image.clone());
    }
    if spec.gaussian {
        add_gaussian_noise(image, spec.sigma_g, spec.rgb, rng)
    } else {
        add_poisson_noise(image, spec.lambda, spec.rgb, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_identity() {
        let img = Image::from_fn(3, 4, 4, |c, y, x| (c + y + x) as f32 / 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_gaussian_noise(&img, 0.0, true, &mut rng).unwrap(), img);
    }

    #[test]
    fn gray_gaussian_shares_channels() {
        let img = Image::filled(3, 8, 8, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = add_gaussian_noise(&img, 0.05, false, &mut rng).unwrap();
        assert_eq!(out.plane(0), out.plane(1));
        assert_eq!(out.plane(1), out.plane(2));
        let rgb = add_gaussian_noise(&img, 0.05, true, &mut rng).unwrap();
        assert_ne!(rgb.plane(0), rgb.plane(1));
    }

    #[test]
    fn poisson_zero_stays_zero() {
        let img = Image::zeros(3, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = add_poisson_noise(&img, 0.01, true, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(add_poisson_noise(&img, 0.0, true, &mut rng).is_err());
    }

    #[test]
    fn gray_poisson_adds_shared_offset() {
        let img = Image::from_fn(3, 6, 6, |c, _, _| 0.3 + 0.1 * c as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = poisson_noisy(&img, 0.01, false, &mut rng).unwrap();
        let n = 36;
        for i in 0..n {
            let d0 = noisy[i] - img.data()[i];
            let d2 = noisy[2 * n + i] - img.data()[2 * n + i];
            assert!((d0 - d2).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_invariants() {
        assert!(NoiseSpec { gaussian: true, rgb: true, sigma_g: 0.1, lambda: 0.1 }.validate().is_err());
        assert!(NoiseSpec { gaussian: false, rgb: true, sigma_g: 0.1, lambda: 0.0 }.validate().is_err());
        assert!(NoiseSpec::none().validate().is_ok());
    }
}
