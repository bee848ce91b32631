use std::f64::consts::PI;

use dansr::degrade::{
    decode_theta, encode_theta, null_theta, DegradationParams, JpegSpec, NoiseSpec, ResizeMode, ResizeSpec,
    StageParams, THETA_DIM,
};
use dansr::kernels::{BlurKernelSpec, KernelKind};
use proptest::prelude::*;

fn odd_size() -> impl Strategy<Value = usize> {
    (1usize..=15).prop_map(|h| 2 * h + 1)
}

fn blur() -> impl Strategy<Value = BlurKernelSpec> {
    let shaped = (
        prop::bool::ANY,
        odd_size(),
        1e-3f64..=5.0,
        1e-3f64..=5.0,
        -PI..=PI,
        1e-3f64..=4.0,
    )
        .prop_map(|(plateau, size, sx, sy, th, beta)| {
            if plateau {
                BlurKernelSpec::plateau(sx, sy, th, beta, size).unwrap()
            } else {
                BlurKernelSpec::gaussian(sx, sy, th, beta, size).unwrap()
            }
        });
    let sinc = (odd_size(), 1e-3f64..=PI).prop_map(|(size, wc)| BlurKernelSpec::sinc(wc, size).unwrap());
    prop_oneof![4 => shaped, 2 => sinc, 1 => Just(BlurKernelSpec::identity())]
}

fn stage() -> impl Strategy<Value = StageParams> {
    let resize = (0usize..3, 0.05f64..=2.0).prop_map(|(m, scale)| ResizeSpec {
        mode: ResizeMode::ALL[m],
        scale,
    });
    let noise = (prop::bool::ANY, prop::bool::ANY, 0.0f64..=0.2, 0.0f64..=0.02).prop_map(|(g, rgb, sg, lam)| {
        NoiseSpec {
            gaussian: g,
            rgb,
            sigma_g: if g { sg } else { 0.0 },
            lambda: if g { 0.0 } else { lam },
        }
    });
    let jpeg = prop_oneof![
        (1u32..100).prop_map(|q| JpegSpec { j: true, q }),
        Just(JpegSpec { j: false, q: 100 })
    ];
    (blur(), resize, noise, jpeg).prop_map(|(blur, resize, noise, jpeg)| StageParams {
        blur,
        resize,
        noise,
        jpeg,
    })
}

fn params() -> impl Strategy<Value = DegradationParams> {
    (stage(), stage(), prop_oneof![Just(2u32), Just(4u32)]).prop_map(|(stage1, stage2, s)| DegradationParams {
        stage1,
        stage2,
        target_sr_scale: s,
    })
}

fn kind_tag(k: KernelKind) -> u8 {
    match k {
        KernelKind::Gaussian => 0,
        KernelKind::Plateau => 1,
        KernelKind::Sinc => 2,
    }
}

fn assert_stage_close(a: &StageParams, b: &StageParams) {
    assert_eq!(kind_tag(a.blur.kind), kind_tag(b.blur.kind));
    assert_eq!(a.blur.size, b.blur.size);
    assert_eq!(a.resize.mode, b.resize.mode);
    assert_eq!((a.noise.gaussian, a.noise.rgb), (b.noise.gaussian, b.noise.rgb));
    assert_eq!((a.jpeg.j, a.jpeg.q), (b.jpeg.j, b.jpeg.q));
    let pairs = [
        (a.blur.sigma_x, b.blur.sigma_x),
        (a.blur.sigma_y, b.blur.sigma_y),
        (a.blur.theta, b.blur.theta),
        (a.blur.beta, b.blur.beta),
        (a.blur.omega_c, b.blur.omega_c),
        (a.resize.scale, b.resize.scale),
        (a.noise.sigma_g, b.noise.sigma_g),
        (a.noise.lambda, b.noise.lambda),
    ];
    for (x, y) in pairs {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn roundtrip_is_exact_up_to_1e6(p in params()) {
        let v = encode_theta(&p).unwrap();
        prop_assert_eq!(v.len(), THETA_DIM);
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        let d = decode_theta(&v, p.target_sr_scale).unwrap();
        prop_assert!(d.repairs.is_empty(), "{:?}", d.repairs);
        assert_stage_close(&p.stage1, &d.params.stage1);
        assert_stage_close(&p.stage2, &d.params.stage2);
        prop_assert_eq!(d.params.target_sr_scale, p.target_sr_scale);
    }
}

#[test]
fn null_vector_and_jpeg_endpoint() {
    let v = null_theta();
    assert_eq!(v, encode_theta(&DegradationParams::null(4)).unwrap());
    assert_eq!(&v[16..18], &[0.0, 1.0]);
    assert_eq!(&v[34..36], &[0.0, 1.0]);
}

#[test]
fn decode_is_total_and_reports_repairs() {
    let mut v = vec![0.5; THETA_DIM];
    v[3] = f64::NAN;
    v[20] = 7.0;
    let d = decode_theta(&v, 2).unwrap();
    assert!(!d.repairs.is_empty());
    d.params.validate().unwrap();
    assert!(decode_theta(&v[..10], 2).is_err());
}
