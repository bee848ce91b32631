use dansr::degrade::noise::{gaussian_noise_field, poisson_noisy};
use dansr::degrade::{
    add_gaussian_noise, convolve2d, degrade_blurry, degrade_two_stage, jpeg_roundtrip, resize_to, sample_degradation,
    DegradationParams, DegradationPreset, ResizeMode,
};
use dansr::kernels::{kernel_from_spec, sample_kernel_spec, KernelMatrix, KernelPreset};
use dansr::metrics::psnr;
use dansr::train::synth_hr_image;
use dansr::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(c, h, w, |_, _, _| rng.random())
}

fn mirror(i: isize, n: isize) -> usize {
    let i = if i < 0 { -i } else { i };
    (if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

/// `(x ⊗ k)↓s` written out literally: one output pixel at a time.
fn naive_blur_decimate(x: &Image, k: &KernelMatrix, s: usize) -> Vec<f64> {
    let (c, h, w) = x.dims();
    let r = k.radius();
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..h / s {
            for j in 0..w / s {
                let mut acc = 0.0;
                for u in -r..=r {
                    for v in -r..=r {
                        let yy = mirror((s * i) as isize + u, h as isize);
                        let xx = mirror((s * j) as isize + v, w as isize);
                        acc += k.at(v, u) * x.get(ch, yy, xx) as f64;
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn degrade_blurry_matches_naive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for n in 0..50 {
        let x = random_image(3, 16, 16, &mut rng);
        let noise = if n % 2 == 0 { 0.0 } else { 0.25 };
        let spec = sample_kernel_spec(KernelPreset::BlurryX2, &mut rng);
        let k = kernel_from_spec(&spec, noise, false, &mut rng).unwrap();
        let got = degrade_blurry(&x, &k, 2).unwrap();
        for (a, b) in got.data().iter().zip(naive_blur_decimate(&x, &k, 2)) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    assert!(worst <= 1e-6, "max entrywise error {worst:e}");
}

#[test]
fn convolution_partition_of_unity_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = sample_kernel_spec(KernelPreset::RealStage1, &mut rng);
    let k = kernel_from_spec(&spec, 0.0, false, &mut rng).unwrap();
    let flat = Image::filled(3, 24, 24, 0.37);
    for v in convolve2d(&flat, &k).unwrap().data() {
        assert!((v - 0.37).abs() < 1e-5);
    }
    let x = random_image(1, 9, 9, &mut rng);
    assert_eq!(convolve2d(&x, &KernelMatrix::identity(1)).unwrap(), x);
    let lr = degrade_blurry(&x.crop(0, 0, 8, 8).unwrap(), &KernelMatrix::identity(3), 2).unwrap();
    assert_eq!(lr.get(0, 1, 2), x.get(0, 2, 4));
}

#[test]
fn jpeg_psnr_monotone_in_quality() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let images = [
        synth_hr_image(64, 1).quantized(),
        synth_hr_image(40, 2).quantized(),
        random_image(3, 32, 32, &mut rng).quantized(),
    ];
    for img in &images {
        let scores: Vec<f64> = [10, 30, 50, 70, 90, 100]
            .iter()
            .map(|&q| psnr(&jpeg_roundtrip(img, q).unwrap(), img).unwrap())
            .collect();
        assert!(scores.windows(2).all(|w| w[0] <= w[1]), "{scores:?}");
        assert!(scores[5] >= 50.0, "q=100 gives {:.2} dB", scores[5]);
    }
}

#[test]
fn gaussian_noise_statistics() {
    let sigma = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let field = gaussian_noise_field(1, 1000, 1000, sigma, true, &mut rng).unwrap();
    let n = field.len() as f64;
    let mean = field.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (field.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / sigma - 1.0).abs() < 0.02, "std {std}");
    let gray = add_gaussian_noise(&Image::filled(3, 20, 20, 0.5), 0.1, false, &mut rng).unwrap();
    assert_eq!(gray.plane(0), gray.plane(1));
    assert_eq!(gray.plane(1), gray.plane(2));
}

#[test]
fn poisson_noise_statistics() {
    let (x, lambda) = (0.4f64, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img = Image::filled(1, 1000, 1000, x as f32);
    let noisy = poisson_noisy(&img, lambda, true, &mut rng).unwrap();
    let n = noisy.len() as f64;
    let mean = noisy.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = noisy.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!((mean / x - 1.0).abs() < 0.01, "mean {mean}");
    assert!((var / (x * lambda) - 1.0).abs() < 0.10, "var {var}");
    let zero = poisson_noisy(&Image::zeros(1, 4, 4), lambda, true, &mut rng).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
}

#[test]
fn two_stage_identity_is_bicubic_downscale() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let hr = random_image(3, 24, 24, &mut rng);
    let lr = degrade_two_stage(&hr, &DegradationParams::null(4), &mut rng).unwrap();
    assert_eq!(lr.dims(), (3, 6, 6));
    let want = resize_to(&hr, ResizeMode::Bicubic, 6, 6).unwrap().clamped();
    for (a, b) in lr.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn seeded_real_pipeline_is_reproducible() {
    let hr = synth_hr_image(48, 3);
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_degradation(DegradationPreset::RealX2, &mut rng);
        degrade_two_stage(&hr, &p, &mut rng).unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_eq!(run(5).dims(), (3, 24, 24));
}
