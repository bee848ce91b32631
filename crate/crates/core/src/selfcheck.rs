//! Numerical self-verification: gradient checks for every op, kernel
//! identities, codec roundtrips and JPEG quality ordering.

use std::f64::consts::PI;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_with, GradCheckOptions, Graph, Padding, Tensor, Var};
use crate::degrade::{
    decode_theta, encode_theta, jpeg_roundtrip, sample_degradation, DegradationParams, DegradationPreset, StageParams,
};
use crate::error::Result;
use crate::kernels::{bessel_j1, kernel_from_spec, sample_kernel_spec, KernelPreset};
use crate::metrics::psnr;
use crate::rng::{rng_from_seed, Rng as ChaRng};
use crate::train::synth_hr_image;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            detail: None,
        }
    }

    fn failed(name: impl Into<String>, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            max_error: f64::NAN,
            tolerance: 0.0,
            passed: false,
            detail: Some(detail),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SelfCheckOptions {
    /// Corrupts conv weight gradients; the suite must then fail.
    pub inject_fault: bool,
    pub seed: u64,
}

pub const GRAD_TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Entries bounded away from zero, for ops with a kink there.
fn off_zero(shape: &[usize], rng: &mut ChaRng) -> Tensor<f64> {
    let mut t = rand_tensor(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaRng) -> Vec<(String, OpFn, Vec<Tensor<f64>>)> {
    let mut cases: Vec<(String, OpFn, Vec<Tensor<f64>>)> = Vec::new();
    for (i, &(n, c, h, w, o, k)) in [(1, 2, 5, 6, 3, 3), (2, 3, 4, 4, 2, 1), (1, 1, 7, 5, 2, 3)].iter().enumerate() {
        for pad in [Padding::Zero, Padding::Reflect] {
            let inputs = vec![
                rand_tensor(&[n, c, h, w], rng),
                rand_tensor(&[o, c, k, k], rng),
                rand_tensor(&[o], rng),
            ];
            cases.push((
                format!("conv2d/{pad:?}/{i}").to_lowercase(),
                Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), pad)),
                inputs,
            ));
        }
    }
    for (i, &(n, fi, fo)) in [(1, 3, 2), (4, 5, 7), (2, 1, 1)].iter().enumerate() {
        let inputs = vec![rand_tensor(&[n, fi], rng), rand_tensor(&[fo, fi], rng), rand_tensor(&[fo], rng)];
        cases.push((format!("linear/{i}"), Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))), inputs));
    }
    let shapes4 = [[1usize, 2, 4, 4], [2, 3, 2, 6], [1, 1, 6, 2]];
    for (i, s) in shapes4.iter().enumerate() {
        cases.push((format!("leaky_relu/{i}"), Box::new(|g, v| g.leaky_relu(v[0], 0.2)), vec![off_zero(s, rng)]));
        cases.push((
            format!("add/{i}"),
            Box::new(|g, v| g.add(v[0], v[1])),
            vec![rand_tensor(s, rng), rand_tensor(s, rng)],
        ));
        cases.push((format!("scale/{i}"), Box::new(|g, v| g.scale(v[0], -0.7)), vec![rand_tensor(s, rng)]));
        let mut other = *s;
        other[1] += 1;
        cases.push((
            format!("concat/{i}"),
            Box::new(|g, v| g.concat_channels(v[0], v[1])),
            vec![rand_tensor(s, rng), rand_tensor(&other, rng)],
        ));
        cases.push((format!("avg_pool2/{i}"), Box::new(|g, v| g.avg_pool2(v[0])), vec![rand_tensor(s, rng)]));
        cases.push((format!("global_avg_pool/{i}"), Box::new(|g, v| g.global_avg_pool(v[0])), vec![rand_tensor(s, rng)]));
        let a = rand_tensor(s, rng);
        let d = off_zero(s, rng);
        let b = Tensor::new(s, a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect()).expect("shape");
        cases.push((format!("l1_loss/{i}"), Box::new(|g, v| g.l1_loss(v[0], v[1])), vec![a.clone(), b.clone()]));
        cases.push((format!("l2_loss/{i}"), Box::new(|g, v| g.l2_loss(v[0], v[1])), vec![a, b]));
    }
    for (i, &(n, f, h, w)) in [(1, 3, 2, 2), (2, 2, 3, 1), (1, 1, 4, 5)].iter().enumerate() {
        cases.push((
            format!("broadcast/{i}"),
            Box::new(move |g, v| g.broadcast_spatial(v[0], h, w)),
            vec![rand_tensor(&[n, f], rng)],
        ));
        cases.push((
            format!("repeat_batch/{i}"),
            Box::new(move |g, v| g.repeat_batch(v[0], h)),
            vec![rand_tensor(&[1, f], rng)],
        ));
    }
    for (i, &(n, c, h, w, r)) in [(1, 4, 2, 3, 2), (2, 8, 1, 2, 2), (1, 9, 2, 2, 3)].iter().enumerate() {
        cases.push((
            format!("pixel_shuffle/{i}"),
            Box::new(move |g, v| g.pixel_shuffle(v[0], r)),
            vec![rand_tensor(&[n, c, h, w], rng)],
        ));
    }
    for (i, &(n, c, h, w)) in [(1, 2, 4, 4), (2, 3, 3, 5), (1, 1, 5, 3)].iter().enumerate() {
        let inputs = vec![
            rand_tensor(&[n, c, h, w], rng),
            rand_tensor(&[c, c, 3, 3], rng),
            rand_tensor(&[c], rng),
            rand_tensor(&[c, c, 3, 3], rng),
            rand_tensor(&[c], rng),
        ];
        cases.push((
            format!("residual_block/{i}"),
            Box::new(|g, v| g.residual_block(v[0], [v[1], v[2], v[3], v[4]], Padding::Zero)),
            inputs,
        ));
    }
    cases
}

pub fn gradient_checks(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let mut rng = rng_from_seed(opts.seed);
    let gc = GradCheckOptions {
        inject_fault: opts.inject_fault,
        seed: opts.seed,
        ..Default::default()
    };
    op_cases(&mut rng)
        .into_iter()
        .map(|(name, f, inputs)| match grad_check_with(f, &inputs, &gc) {
            Ok(r) => CheckResult::at_most(format!("grad/{name}"), r.max_rel_error, GRAD_TOL),
            Err(e) => CheckResult::failed(format!("grad/{name}"), e.to_string()),
        })
        .collect()
}

/// `J1(x) = (1/2π) ∫ cos(τ - x sin τ) dτ` over a full period; the trapezoid
/// rule converges geometrically for periodic integrands.
pub fn bessel_j1_integral(x: f64) -> f64 {
    let n = 256;
    let h = 2.0 * PI / n as f64;
    (0..n).map(|i| (i as f64 * h - x * (i as f64 * h).sin()).cos()).sum::<f64>() / n as f64
}

pub fn kernel_checks(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let bessel = (0..=1000)
        .map(|i| {
            let x = i as f64 * 0.01;
            (bessel_j1(x) - bessel_j1_integral(x)).abs()
        })
        .fold(0.0, f64::max);
    let mut rng = rng_from_seed(opts.seed);
    let mut sum_err = 0.0f64;
    let mut symmetry_err = 0.0f64;
    for preset in [KernelPreset::BlurryX2, KernelPreset::RealStage1, KernelPreset::RealStage2] {
        for _ in 0..200 {
            let spec = sample_kernel_spec(preset, &mut rng);
            match kernel_from_spec(&spec, 0.0, false, &mut rng) {
                Ok(k) => {
                    sum_err = sum_err.max((k.sum() - 1.0).abs());
                    let r = k.radius();
                    for y in -r..=r {
                        for x in -r..=r {
                            symmetry_err = symmetry_err.max((k.at(x, y) - k.at(-x, -y)).abs());
                        }
                    }
                }
                Err(_) => sum_err = f64::INFINITY,
            }
        }
    }
    vec![
        CheckResult::at_most("kernel/bessel_j1_vs_integral", bessel, 1e-8),
        CheckResult::at_most("kernel/sum_to_one", sum_err, 1e-6),
        CheckResult::at_most("kernel/point_symmetry", symmetry_err, 1e-12),
    ]
}

/// Exact agreement of discrete fields and the largest continuous-field
/// difference after an encode/decode roundtrip.
pub fn codec_roundtrip_error(p: &DegradationParams) -> Result<(bool, f64)> {
    let d = decode_theta(&encode_theta(p)?, p.target_sr_scale)?.params;
    let mut exact = d.target_sr_scale == p.target_sr_scale;
    let mut err = 0.0f64;
    for (a, b) in [(&p.stage1, &d.stage1), (&p.stage2, &d.stage2)] {
        let (da, db) = (discrete(a), discrete(b));
        exact &= da == db;
        for (x, y) in continuous(a).iter().zip(continuous(b)) {
            err = err.max((x - y).abs());
        }
    }
    Ok((exact, err))
}

fn discrete(s: &StageParams) -> (String, usize, usize, bool, bool, bool, u32) {
    let q = if s.jpeg.j { s.jpeg.q } else { 0 };
    (
        s.blur.kind.to_string(),
        s.blur.size,
        s.resize.mode.index(),
        s.noise.gaussian,
        s.noise.rgb,
        s.jpeg.j,
        q,
    )
}

fn continuous(s: &StageParams) -> [f64; 8] {
    [
        s.blur.sigma_x,
        s.blur.sigma_y,
        s.blur.theta,
        s.blur.beta,
        s.blur.omega_c,
        s.resize.scale,
        s.noise.sigma_g,
        s.noise.lambda,
    ]
}

pub fn codec_checks(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let mut rng = rng_from_seed(opts.seed ^ 0xc0dec);
    let mut out = Vec::new();
    for preset in [
        DegradationPreset::BlurryX2,
        DegradationPreset::BlurryX4,
        DegradationPreset::RealX2,
        DegradationPreset::RealX4,
    ] {
        let mut mismatches = 0;
        let mut err = 0.0f64;
        for _ in 0..500 {
            match codec_roundtrip_error(&sample_degradation(preset, &mut rng)) {
                Ok((exact, e)) => {
                    mismatches += usize::from(!exact);
                    err = err.max(e);
                }
                Err(_) => mismatches += 1,
            }
        }
        let mut r = CheckResult::at_most(format!("codec/{}", preset.name()), err, 1e-6);
        if mismatches > 0 {
            r.passed = false;
            r.detail = Some(format!("{mismatches} discrete mismatches"));
        }
        out.push(r);
    }
    out
}

pub fn jpeg_checks(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let img = synth_hr_image(48, opts.seed).quantized();
    let qs = [10u32, 30, 50, 70, 90, 100];
    let scores: Result<Vec<f64>> = qs.iter().map(|&q| psnr(&jpeg_roundtrip(&img, q)?, &img)).collect();
    let scores = match scores {
        Ok(s) => s,
        Err(e) => return vec![CheckResult::failed("jpeg", e.to_string())],
    };
    let worst_drop = scores.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let mut mono = CheckResult::at_most("jpeg/psnr_increasing_in_q", worst_drop.max(0.0), 0.0);
    mono.passed = worst_drop < 0.0;
    mono.detail = Some(format!("{scores:.2?}"));
    let q100 = scores[scores.len() - 1];
    let mut high = CheckResult::at_most("jpeg/q100_psnr", (50.0 - q100).max(0.0), 0.0);
    high.passed = q100 >= 50.0;
    high.detail = Some(format!("{q100:.2} dB"));
    vec![mono, high]
}

pub fn run(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let mut all = gradient_checks(opts);
    all.extend(kernel_checks(opts));
    all.extend(codec_checks(opts));
    all.extend(jpeg_checks(opts));
    all
}
