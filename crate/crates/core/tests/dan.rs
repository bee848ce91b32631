use dansr::autodiff::{grad_check, AdamConfig, AdamState, Graph, ParameterStore, Tensor};
use dansr::dan::{infer, init_params, param_shapes, Dan, DanConfig, ForwardOptions};
use dansr::degrade::{decode_theta, THETA_DIM};
use dansr::train::{batch_losses, gradient_norms, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(scale: u32, t: usize, c: usize) -> DanConfig {
    DanConfig {
        iterations: t,
        feature_channels: c,
        restorer_blocks: 2,
        estimator_blocks: 2,
        theta_feature_dim: 16,
        ..DanConfig::desk(scale)
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random::<f32>())
}

fn batch(cfg: &DanConfig, n: usize, hw: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.sr_scale as usize;
    Batch {
        lr: rand_tensor(&[n, 3, hw, hw], &mut rng),
        hr: rand_tensor(&[n, 3, hw * s, hw * s], &mut rng),
        theta: rand_tensor(&[n, THETA_DIM], &mut rng),
        origins: vec![],
    }
}

#[test]
fn shape_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for scale in [2, 4] {
        for t in 1..=4 {
            for c in [8, 32] {
                let cfg = small(scale, t, c);
                let store = init_params(&cfg, 1).unwrap();
                let mut g = Graph::new();
                let y = g.constant(rand_tensor(&[2, 3, 8, 12], &mut rng)).unwrap();
                let out = Dan::new(&cfg, &store).forward(&mut g, y, None, &ForwardOptions::default()).unwrap();
                let s = scale as usize;
                assert_eq!(g.value(out.sr).shape(), &[2, 3, 8 * s, 12 * s]);
                assert_eq!(g.value(out.theta).shape(), &[2, THETA_DIM]);
                assert_eq!(out.trace.len(), t);
                assert_eq!(g.value(out.fx0).shape(), &[2, c, 8, 12]);
            }
        }
    }
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let cfg = small(4, 2, 8);
    let a = init_params(&cfg, 1).unwrap();
    let b = init_params(&cfg, 2).unwrap();
    let expected: usize = param_shapes(&cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(a.num_values(), expected);
    assert_eq!(a.num_values(), b.num_values());
    assert!(a.get("theta0").unwrap().tensor.data().iter().all(|&v| v == 0.0));
    assert!(a.names().any(|n| n == "tail_image.up1.w"));
}

#[test]
fn unfolding_equals_manual_composition() {
    for jacobi in [true, false] {
        let cfg = DanConfig {
            jacobi_update: jacobi,
            ..small(2, 3, 8)
        };
        let mut store = init_params(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        store.set("theta0", rand_tensor(&[1, THETA_DIM], &mut rng)).unwrap();
        let y_t = rand_tensor(&[2, 3, 8, 8], &mut rng);

        let mut g = Graph::new();
        let y = g.constant(y_t.clone()).unwrap();
        let out = Dan::new(&cfg, &store).forward(&mut g, y, None, &ForwardOptions::default()).unwrap();

        let mut h = Graph::new();
        let dan = Dan::new(&cfg, &store);
        let y = h.constant(y_t).unwrap();
        let fx0 = dan.head_image(&mut h, y).unwrap();
        let t0 = dan.theta0(&mut h, 2).unwrap();
        let mut ft = dan.head_theta(&mut h, t0).unwrap();
        let mut fx = fx0;
        for _ in 0..3 {
            if jacobi {
                let nx = dan.restorer(&mut h, fx0, ft).unwrap();
                ft = dan.estimator(&mut h, fx0, fx).unwrap();
                fx = nx;
            } else {
                ft = dan.estimator(&mut h, fx0, fx).unwrap();
                fx = dan.restorer(&mut h, fx0, ft).unwrap();
            }
        }
        let sr = dan.tail_image(&mut h, fx).unwrap();
        let th = dan.tail_theta(&mut h, ft).unwrap();
        assert_eq!(g.value(out.sr).data(), h.value(sr).data());
        assert_eq!(g.value(out.theta).data(), h.value(th).data());
    }
}

#[test]
fn every_group_receives_gradient() {
    let cfg = small(2, 3, 8);
    let mut store = init_params(&cfg, 5).unwrap();
    // the default init zeroes theta0; move it off zero so no path is degenerate
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    store.set("theta0", rand_tensor(&[1, THETA_DIM], &mut rng)).unwrap();
    let norms = gradient_norms(&cfg, &store, &batch(&cfg, 2, 8, 7), 1.0).unwrap();
    for group in ["theta0", "head_image", "head_theta", "restorer", "estimator", "tail_image", "tail_theta"] {
        let n = norms.get(group).copied().unwrap_or(0.0);
        assert!(n > 0.0, "{group}: {n}");
    }
    let fresh = init_params(&cfg, 5).unwrap();
    assert!(gradient_norms(&cfg, &fresh, &batch(&cfg, 2, 8, 7), 1.0).unwrap()["theta0"] > 0.0);
}

#[test]
fn gt_toggle_makes_sr_independent_of_estimator() {
    let cfg = small(2, 3, 8);
    let store = init_params(&cfg, 8).unwrap();
    let mut other = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names: Vec<String> = other.names().filter(|n| n.starts_with("estimator")).map(String::from).collect();
    for name in names {
        let shape = other.get(&name).unwrap().tensor.shape().to_vec();
        other.set(&name, Tensor::from_fn(&shape, |_| rng.random_range(-0.5f32..0.5))).unwrap();
    }
    let mut lr_rng = ChaCha8Rng::seed_from_u64(10);
    let lr = dansr::Image::from_fn(3, 12, 12, |_, _, _| lr_rng.random());
    let gt: Vec<f32> = (0..THETA_DIM).map(|i| (i as f32 * 0.37).fract()).collect();
    let opts = ForwardOptions::default();
    let a = infer(&cfg, &store, &lr, Some(&gt), &opts).unwrap();
    let b = infer(&cfg, &other, &lr, Some(&gt), &opts).unwrap();
    assert_eq!(a.sr, b.sr);
    assert_ne!(a.theta, b.theta);
    let c = infer(&cfg, &other, &lr, None, &opts).unwrap();
    assert_ne!(b.sr, c.sr);
}

#[test]
fn restorer_and_estimator_are_sensitive_to_their_inputs() {
    let cfg = small(2, 1, 8);
    let store = init_params(&cfg, 11).unwrap();
    let dan = Dan::new(&cfg, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let fx0_t = rand_tensor(&[1, 8, 8, 8], &mut rng);
    let ft_t = rand_tensor(&[1, 16], &mut rng);
    let run = |ft_shift: f32, fx_shift: f32| {
        let mut g = Graph::new();
        let fx0 = g.constant(fx0_t.clone()).unwrap();
        let mut ft = ft_t.clone();
        ft.data_mut().iter_mut().for_each(|v| *v += ft_shift);
        let ft = g.constant(ft).unwrap();
        let mut fx = fx0_t.clone();
        fx.data_mut()[0] += fx_shift;
        let fx = g.constant(fx).unwrap();
        let r = dan.restorer(&mut g, fx0, ft).unwrap();
        let e = dan.estimator(&mut g, fx0, fx).unwrap();
        assert_eq!(g.value(r).shape(), &[1, 8, 8, 8]);
        assert_eq!(g.value(e).shape(), &[1, 16]);
        (g.value(r).data().to_vec(), g.value(e).data().to_vec())
    };
    let (r0, e0) = run(0.0, 0.0);
    let (r1, e1) = run(0.1, 0.0);
    let (r2, e2) = run(0.0, 0.5);
    let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    assert!(diff(&r0, &r1) > 0.0);
    assert_eq!(e0, e1);
    assert!(diff(&e0, &e2) > 0.0);
    assert_eq!(r0, r2);

    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&[1, 8, 6, 6], &mut rng)).unwrap();
    assert!(dan.estimator(&mut g, x, x).is_err());
}

#[test]
fn restorer_with_zero_residual_weights_returns_fused_features() {
    let cfg = small(2, 1, 8);
    let mut store = init_params(&cfg, 13).unwrap();
    let names: Vec<String> = store.names().filter(|n| n.starts_with("restorer.block")).map(String::from).collect();
    for name in names {
        let shape = store.get(&name).unwrap().tensor.shape().to_vec();
        store.set(&name, Tensor::zeros(&shape)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut g = Graph::new();
    let fx0 = g.constant(rand_tensor(&[1, 8, 4, 4], &mut rng)).unwrap();
    let ft = g.constant(rand_tensor(&[1, 16], &mut rng)).unwrap();
    let out = Dan::new(&cfg, &store).restorer(&mut g, fx0, ft).unwrap();
    // fused = LeakyReLU(conv1x1(concat(fx0, broadcast(ft))))
    let w = store.get("restorer.fuse.w").unwrap().tensor.data().to_vec();
    let b = store.get("restorer.fuse.b").unwrap().tensor.data().to_vec();
    let (x, f) = (g.value(fx0).data().to_vec(), g.value(ft).data().to_vec());
    for o in 0..8 {
        for p in 0..16 {
            let mut acc = b[o] as f64;
            for i in 0..8 {
                acc += w[o * 24 + i] as f64 * x[i * 16 + p] as f64;
            }
            for j in 0..16 {
                acc += w[o * 24 + 8 + j] as f64 * f[j] as f64;
            }
            let want = if acc > 0.0 { acc } else { 0.2 * acc };
            assert!((g.value(out).data()[o * 16 + p] as f64 - want).abs() < 1e-5);
        }
    }
}

#[test]
fn end_to_end_input_gradient_check() {
    let cfg = DanConfig {
        iterations: 2,
        feature_channels: 2,
        restorer_blocks: 1,
        estimator_blocks: 1,
        theta_feature_dim: 3,
        ..DanConfig::desk(2)
    };
    let store: ParameterStore<f64> = init_params(&cfg, 15).unwrap().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let y = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.random::<f64>());
    let err = grad_check(
        |g, v| {
            let out = Dan::new(&cfg, &store).forward(g, v[0], None, &ForwardOptions::default())?;
            let zs = g.constant(Tensor::zeros(&[1, 3, 8, 8]))?;
            let zt = g.constant(Tensor::zeros(&[1, THETA_DIM]))?;
            let a = g.l2_loss(out.sr, zs)?;
            let b = g.l2_loss(out.theta, zt)?;
            g.add(a, b)
        },
        &[y],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-3, "relative error {err:e}");
}

#[test]
fn startup_loss_identity_with_zeroed_final_layers() {
    let cfg = small(2, 3, 8);
    let mut store = init_params(&cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let img_bias: Vec<f32> = (0..3).map(|_| rng.random()).collect();
    let th_bias: Vec<f32> = (0..THETA_DIM).map(|_| rng.random()).collect();
    store.set("tail_image.out.w", Tensor::zeros(&[3, 8, 3, 3])).unwrap();
    store.set("tail_image.out.b", Tensor::new(&[3], img_bias.clone()).unwrap()).unwrap();
    store.set("tail_theta.fc2.w", Tensor::zeros(&[THETA_DIM, 16])).unwrap();
    store.set("tail_theta.fc2.b", Tensor::new(&[THETA_DIM], th_bias.clone()).unwrap()).unwrap();
    let b = batch(&cfg, 2, 8, 19);
    let (l1, l2) = batch_losses(&cfg, &store, &b).unwrap();

    let hr = b.hr.data();
    let per = hr.len() / 6;
    let l1_want = hr.iter().enumerate().map(|(i, &v)| (img_bias[(i / per) % 3] - v).abs() as f64).sum::<f64>()
        / hr.len() as f64;
    let l2_want = b
        .theta
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| ((th_bias[i % THETA_DIM] - v) as f64).powi(2))
        .sum::<f64>()
        / b.theta.len() as f64;
    assert!(l1.is_finite() && l2.is_finite());
    assert!((l1 - l1_want).abs() < 1e-6, "{l1} vs {l1_want}");
    assert!((l2 - l2_want).abs() < 1e-6, "{l2} vs {l2_want}");
}

#[test]
fn ablation_flags() {
    let cfg = DanConfig {
        feature_space_iteration: false,
        ..small(2, 3, 8)
    };
    let store = init_params(&cfg, 20).unwrap();
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let y = g.constant(rand_tensor(&[1, 3, 8, 8], &mut rng)).unwrap();
    let out = Dan::new(&cfg, &store).forward(&mut g, y, None, &ForwardOptions::default()).unwrap();
    assert!(out.trace.iter().all(|t| t.sr.is_some() && t.theta.is_some()));

    let cfg = DanConfig {
        learnable_init: false,
        ..small(2, 1, 8)
    };
    let mut store = init_params(&cfg, 22).unwrap();
    assert!(!store.get("theta0").unwrap().trainable);
    let mut g = Graph::new();
    let b = batch(&cfg, 1, 8, 23);
    let y = g.constant(b.lr.clone()).unwrap();
    let out = Dan::new(&cfg, &store).forward(&mut g, y, None, &ForwardOptions::default()).unwrap();
    let t = g.constant(b.theta.clone()).unwrap();
    let loss = g.l2_loss(out.theta, t).unwrap();
    g.backward(loss).unwrap();
    let mut adam = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() });
    adam.step(&mut store, &g.param_grads()).unwrap();
    assert!(store.get("theta0").unwrap().tensor.data().iter().all(|&v| v == 0.0));
}

#[test]
fn per_iteration_decodes_and_theta_always_decodes() {
    let cfg = small(2, 3, 8);
    let store = init_params(&cfg, 24).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let lr = dansr::Image::from_fn(3, 10, 6, |_, _, _| rng.random());
    let opts = ForwardOptions {
        iterations: Some(4),
        decode_each_iteration: true,
    };
    let out = infer(&cfg, &store, &lr, None, &opts).unwrap();
    assert_eq!(out.sr.dims(), (3, 20, 12));
    assert_eq!(out.per_iteration.len(), 4);
    assert_eq!(out.per_iteration[3].0, out.sr);
    let theta: Vec<f64> = out.theta.iter().map(|&v| v as f64).collect();
    decode_theta(&theta, 2).unwrap().params.validate().unwrap();
}
