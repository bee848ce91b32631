//! The degradation model: blur, resize, noise and JPEG applied in two
//! stages, plus the blur-and-decimate model used for blurry-only data.

pub mod jpeg;
pub mod noise;
pub mod params;
pub mod resize;

use rand::Rng;

pub use jpeg::{jpeg_roundtrip, jpeg_roundtrip_with, JpegSpec};
pub use noise::{add_gaussian_noise, add_poisson_noise, apply_noise, NoiseSpec};
pub use params::{
    decode_theta, encode_theta, null_theta, sample_degradation, theta_table_hash, DecodedTheta,
    DegradationParams, DegradationPreset, DegradationRecord, StageParams, ThetaTable, BLURRY_KERNEL_NOISE,
    STAGE_DIM, THETA_DIM, THETA_TABLE_V1,
};
pub use resize::{resize, resize_to, ResizeMode, ResizeSpec};

use crate::error::{Error, Result};
use crate::image::{reflect, Image};
use crate::kernels::{kernel_from_spec, KernelMatrix};

/// Per-channel 2-D correlation with reflect padding; output has the input size.
///
/// Kernels synthesized here are point-symmetric, so this equals convolution.
pub fn convolve2d(image: &Image, kernel: &KernelMatrix) -> Result<Image> {
    let (c, h, w) = image.dims();
    let k = kernel.size();
    if k > h || k > w {
        return Err(Error::domain(
            "kernel",
            format!("{k}x{k} kernel larger than {h}x{w} image"),
        ));
    }
    if k == 1 {
        let s = kernel.weights()[0] as f32;
        let mut out = image.clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        return Ok(out);
    }
    let r = kernel.radius();
    let (hi, wi) = (h as isize, w as isize);
    let row_idx: Vec<Vec<usize>> = (0..hi).map(|y| (-r..=r).map(|d| reflect(y + d, hi)).collect()).collect();
    let col_idx: Vec<Vec<usize>> = (0..wi).map(|x| (-r..=r).map(|d| reflect(x + d, wi)).collect()).collect();
    let weights = kernel.weights();
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        let src = image.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f64;
                for (ky, &sy) in row_idx[y].iter().enumerate() {
                    let row = &src[sy * w..(sy + 1) * w];
                    let krow = &weights[ky * k..(ky + 1) * k];
                    for (kw, &sx) in krow.iter().zip(&col_idx[x]) {
                        acc += kw * row[sx] as f64;
                    }
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Keeps the upper-left pixel of every `s x s` block.
pub fn downsample_s_fold(image: &Image, s: usize) -> Result<Image> {
    let (c, h, w) = image.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {s}")));
    }
    Ok(Image::from_fn(c, h / s, w / s, |ch, y, x| image.get(ch, s * y, s * x)))
}

/// Blur then s-fold decimation; no noise, no compression.
pub fn degrade_blurry(hr: &Image, kernel: &KernelMatrix, s: usize) -> Result<Image> {
    if !hr.height().is_multiple_of(s) || !hr.width().is_multiple_of(s) {
        return Err(Error::Shape(format!("{}x{} not divisible by {s}", hr.height(), hr.width())));
    }
    downsample_s_fold(&convolve2d(hr, kernel)?, s)
}

/// One blur, resize, noise, JPEG pass. Values are clamped to `[0, 1]` at the
/// end of the stage.
pub fn apply_stage<R: Rng + ?Sized>(image: &Image, stage: &StageParams, rng: &mut R) -> Result<Image> {
    stage.validate()?;
    let kernel = kernel_from_spec(&stage.blur, 0.0, false, rng)?;
    let blurred = convolve2d(image, &kernel)?;
    let resized = resize(&blurred, &stage.resize)?;
    let noisy = apply_noise(&resized, &stage.noise, rng)?;
    let out = if stage.jpeg.j {
        jpeg_roundtrip(&noisy, stage.jpeg.q)?
    } else {
        noisy
    };
    Ok(out.clamped())
}

/// Both stages, then an exact bicubic resize to `(H/s, W/s)`.
pub fn degrade_two_stage<R: Rng + ?Sized>(hr: &Image, params: &DegradationParams, rng: &mut R) -> Result<Image> {
    params.validate()?;
    let s = params.target_sr_scale as usize;
    let (h, w) = (hr.height(), hr.width());
    if h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {s}")));
    }
    let mid = apply_stage(hr, &params.stage1, rng)?;
    let out = apply_stage(&mid, &params.stage2, rng)?;
    Ok(resize_to(&out, ResizeMode::Bicubic, h / s, w / s)?.clamped())
}

/// Synthesizes the LR image for a degradation: blur-only parameters go
/// through [`degrade_blurry`] with multiplicative kernel noise, everything
/// else through [`degrade_two_stage`].
pub fn synthesize_lr<R: Rng + ?Sized>(
    hr: &Image,
    params: &DegradationParams,
    kernel_noise: f64,
    rng: &mut R,
) -> Result<Image> {
    if params.is_blur_only() {
        params.validate()?;
        let kernel = kernel_from_spec(&params.stage1.blur, kernel_noise, false, rng)?;
        Ok(degrade_blurry(hr, &kernel, params.target_sr_scale as usize)?.clamped())
    } else {
        degrade_two_stage(hr, params, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{synth_gaussian_kernel, BlurKernelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(c, h, w, |_, _, _| rng.random())
    }

    fn naive_correlate(img: &Image, k: &KernelMatrix) -> Image {
        let r = k.radius();
        let (c, h, w) = img.dims();
        Image::from_fn(c, h, w, |ch, y, x| {
            let mut acc = 0f64;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = reflect(y as isize + dy, h as isize);
                    let sx = reflect(x as isize + dx, w as isize);
                    acc += k.at(dx, dy) * img.get(ch, sy, sx) as f64;
                }
            }
            acc as f32
        })
    }

    #[test]
    fn identity_and_constant_kernels() {
        let img = random_image(3, 9, 9, 1);
        assert_eq!(convolve2d(&img, &KernelMatrix::identity(5)).unwrap(), img);
        let flat = Image::filled(3, 12, 12, 0.42);
        let k = synth_gaussian_kernel(1.4, 0.7, 0.3, 1.0, 7).unwrap();
        for &v in convolve2d(&flat, &k).unwrap().data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_brute_force() {
        let img = random_image(1, 5, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
        let k = crate::kernels::normalize_kernel(&KernelMatrix::from_weights(3, raw).unwrap()).unwrap();
        let a = convolve2d(&img, &k).unwrap();
        let b = naive_correlate(&img, &k);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(convolve2d(&img, &KernelMatrix::identity(7)).is_err());
    }

    #[test]
    fn decimation() {
        let img = Image::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32);
        assert_eq!(downsample_s_fold(&img, 2).unwrap().data(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(downsample_s_fold(&img, 1).unwrap(), img);
        assert!(downsample_s_fold(&img, 3).is_err());
    }

    #[test]
    fn blurry_with_identity_kernel_is_decimation() {
        let img = random_image(3, 8, 8, 4);
        let lr = degrade_blurry(&img, &KernelMatrix::identity(3), 2).unwrap();
        assert_eq!(lr, downsample_s_fold(&img, 2).unwrap());
    }

    #[test]
    fn identity_stage_is_noop() {
        let img = random_image(3, 16, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_stage(&img, &StageParams::identity(), &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn jpeg_only_stage_equals_roundtrip() {
        let img = random_image(3, 16, 16, 6);
        let mut stage = StageParams::identity();
        stage.jpeg = JpegSpec { j: true, q: 95 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_stage(&img, &stage, &mut rng).unwrap();
        assert_eq!(out, jpeg_roundtrip(&img, 95).unwrap().clamped());
    }

    #[test]
    fn two_stage_dims_and_identity_composition() {
        let img = random_image(3, 32, 24, 7);
        let p = DegradationParams::null(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lr = degrade_two_stage(&img, &p, &mut rng).unwrap();
        assert_eq!(lr.dims(), (3, 8, 6));
        let direct = resize_to(&img, ResizeMode::Bicubic, 8, 6).unwrap().clamped();
        assert_eq!(lr, direct);
        assert!(degrade_two_stage(&random_image(3, 30, 24, 1), &p, &mut rng).is_err());
    }

    #[test]
    fn seeded_real_degradation_reproduces() {
        let img = random_image(3, 64, 64, 8);
        let p = sample_degradation(DegradationPreset::RealX2, &mut ChaCha8Rng::seed_from_u64(21));
        let a = degrade_two_stage(&img, &p, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = degrade_two_stage(&img, &p, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (3, 32, 32));
    }

    #[test]
    fn synthesize_dispatches_on_blur_only() {
        let img = random_image(3, 16, 16, 9);
        let mut p = DegradationParams::null(2);
        p.stage1.blur = BlurKernelSpec::gaussian(1.0, 1.0, 0.0, 1.0, 5).unwrap();
        let k = crate::kernels::synth_gaussian_kernel(1.0, 1.0, 0.0, 1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lr = synthesize_lr(&img, &p, 0.0, &mut rng).unwrap();
        assert_eq!(lr, degrade_blurry(&img, &k, 2).unwrap().clamped());
    }
}
