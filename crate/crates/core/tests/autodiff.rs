use dansr::autodiff::{
    grad_check, grad_check_with, AdamConfig, AdamState, GradCheckOptions, Graph, Padding, ParameterStore, Tensor,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so leaky-ReLU and L1 kinks are not crossed.
fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: Padding) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let r = (k / 2) as isize;
    let at = |s: usize, ch: usize, y: isize, xx: isize| -> f64 {
        let (y, xx) = match pad {
            Padding::Zero => {
                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                    return 0.0;
                }
                (y as usize, xx as usize)
            }
            Padding::Reflect => {
                let f = |i: isize, n: isize| -> usize {
                    let i = if i < 0 { -i } else { i };
                    (if i >= n { 2 * (n - 1) - i } else { i }) as usize
                };
                (f(y, h as isize), f(xx, wd as isize))
            }
        };
        x.data()[((s * c + ch) * h + y) * wd + xx]
    };
    Tensor::from_fn(&[n, o, h, wd], |i| {
        let xx = (i % wd) as isize;
        let y = ((i / wd) % h) as isize;
        let oc = (i / (wd * h)) % o;
        let s = i / (wd * h * o);
        let mut acc = b[oc];
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    acc += w.data()[((oc * c + ch) * k + ky) * k + kx] * at(s, ch, y + ky as isize - r, xx + kx as isize - r);
                }
            }
        }
        acc
    })
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pad in [Padding::Zero, Padding::Reflect] {
        for (shape, o, k) in [([2, 3, 5, 5], 4, 3), ([1, 2, 6, 4], 3, 5), ([3, 4, 3, 3], 2, 1)] {
            let x = rand_tensor(&shape, &mut rng);
            let w = rand_tensor(&[o, shape[1], k, k], &mut rng);
            let b = rand_tensor(&[o], &mut rng);
            let mut g = Graph::new();
            let (xv, wv, bv) = (
                g.constant(x.clone()).unwrap(),
                g.constant(w.clone()).unwrap(),
                g.constant(b.clone()).unwrap(),
            );
            let y = g.conv2d(xv, wv, Some(bv), pad).unwrap();
            let oracle = naive_conv(&x, &w, b.data(), pad);
            for (a, e) in g.value(y).data().iter().zip(oracle.data()) {
                assert!((a - e).abs() < 1e-12, "{pad:?} {shape:?}");
            }
        }
    }
}

#[test]
fn conv_identity_weight_adds_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
    let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()).unwrap(), g.constant(w).unwrap(), g.constant(b.clone()).unwrap());
    let y = g.conv2d(xv, wv, Some(bv), Padding::Zero).unwrap();
    for (i, (&a, &e)) in g.value(y).data().iter().zip(x.data()).enumerate() {
        assert_eq!(a, e + b.data()[(i / 16) % 3]);
    }
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3])).unwrap();
    assert!(g.conv2d(x, w, None, Padding::Zero).is_err());
    let w = g.constant(Tensor::zeros(&[2, 3, 2, 2])).unwrap();
    assert!(g.conv2d(x, w, None, Padding::Zero).is_err());
}

#[test]
fn conv_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for pad in [Padding::Zero, Padding::Reflect] {
        for (shape, o, k) in [([2, 3, 5, 5], 4, 3), ([1, 2, 6, 4], 3, 5), ([3, 4, 3, 3], 2, 1)] {
            let inputs = [
                rand_tensor(&shape, &mut rng),
                rand_tensor(&[o, shape[1], k, k], &mut rng),
                rand_tensor(&[o], &mut rng),
            ];
            let err = grad_check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), pad), &inputs, 1e-4).unwrap();
            assert!(err <= TOL, "conv {pad:?} {shape:?}: {err}");
        }
    }
}

#[test]
fn linear_oracle_and_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[3, 5], &mut rng);
    let w = rand_tensor(&[4, 5], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    for n in 0..3 {
        for j in 0..4 {
            let e: f64 = b.data()[j] + (0..5).map(|f| x.data()[n * 5 + f] * w.data()[j * 5 + f]).sum::<f64>();
            assert!((g.value(y).data()[n * 4 + j] - e).abs() < 1e-12);
        }
    }

    let eye = Tensor::from_fn(&[5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(eye).unwrap());
    let y = g.linear(xv, wv, None).unwrap();
    assert_eq!(g.value(y), &x);

    for (n, f, o) in [(1, 3, 2), (4, 7, 5), (2, 36, 64)] {
        let inputs = [rand_tensor(&[n, f], &mut rng), rand_tensor(&[o, f], &mut rng), rand_tensor(&[o], &mut rng)];
        let err = grad_check(|g, v| g.linear(v[0], v[1], Some(v[2])), &inputs, 1e-4).unwrap();
        assert!(err <= 1e-8, "linear {n}x{f}->{o}: {err}");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    let y = g.leaky_relu(v, 1.0).unwrap();
    assert_eq!(g.value(y), &x);

    for shape in [[1, 1, 2, 3], [2, 3, 4, 4], [3, 2, 5, 1]] {
        let inputs = [rand_away_from_zero(&shape, &mut rng)];
        for slope in [0.0, 0.2] {
            let err = grad_check(|g, v| g.leaky_relu(v[0], slope), &inputs, 1e-4).unwrap();
            assert!(err <= TOL);
        }
        let inputs = [rand_tensor(&shape, &mut rng), rand_tensor(&shape, &mut rng)];
        assert!(grad_check(|g, v| g.add(v[0], v[1]), &inputs, 1e-4).unwrap() <= 1e-8);
        assert!(grad_check(|g, v| g.scale(v[0], -0.7), &inputs[..1], 1e-4).unwrap() <= 1e-8);
    }
}

#[test]
fn concat_is_exact_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (ca, cb) in [(1, 1), (2, 3), (4, 1)] {
        let a = rand_tensor(&[2, ca, 3, 4], &mut rng);
        let b = rand_tensor(&[2, cb, 3, 4], &mut rng);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let y = g.concat_channels(av, bv).unwrap();
        assert_eq!(g.value(y).shape(), &[2, ca + cb, 3, 4]);
        let out = g.value(y).data();
        for s in 0..2 {
            let base = s * (ca + cb) * 12;
            assert_eq!(&out[base..base + ca * 12], &a.data()[s * ca * 12..(s + 1) * ca * 12]);
            assert_eq!(&out[base + ca * 12..base + (ca + cb) * 12], &b.data()[s * cb * 12..(s + 1) * cb * 12]);
        }
        let err = grad_check(|g, v| g.concat_channels(v[0], v[1]), &[a, b], 1e-4).unwrap();
        assert!(err <= 1e-8);
    }
}

#[test]
fn broadcast_spatial_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[2, 3], &mut rng);
    let mut g = Graph::new();
    let v = g.variable(x.clone()).unwrap();
    let y = g.broadcast_spatial(v, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), x.data());
    assert_eq!(g.value(y).shape(), &[2, 3, 1, 1]);

    let mut g = Graph::new();
    let v = g.variable(x.clone()).unwrap();
    let y = g.broadcast_spatial(v, 4, 5).unwrap();
    let ones = vec![1.0; 2 * 3 * 20];
    let s = g.dot_const(y, &ones).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().iter().all(|&d| d == 20.0));

    for (n, f, h, w) in [(1, 1, 2, 2), (2, 3, 4, 5), (3, 8, 1, 6)] {
        let err = grad_check(|g, v| g.broadcast_spatial(v[0], h, w), &[rand_tensor(&[n, f], &mut rng)], 1e-4).unwrap();
        assert!(err <= 1e-8);
    }
}

#[test]
fn pixel_shuffle_is_a_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    let y = g.pixel_shuffle(v, 1).unwrap();
    assert_eq!(g.value(y), &x);

    let x = rand_tensor(&[2, 8, 3, 2], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    let y = g.pixel_shuffle(v, 2).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[2, 2, 6, 4]);
    let mut restored = vec![0.0; x.len()];
    for n in 0..2 {
        for c in 0..2 {
            for yy in 0..6 {
                for xx in 0..4 {
                    let src = ((n * 8 + c * 4 + (yy % 2) * 2 + xx % 2) * 3 + yy / 2) * 2 + xx / 2;
                    restored[src] = out.data()[((n * 2 + c) * 6 + yy) * 4 + xx];
                }
            }
        }
    }
    assert_eq!(restored, x.data());

    for (shape, r) in [([1, 4, 2, 2], 2), ([2, 8, 3, 3], 2), ([1, 9, 2, 1], 3)] {
        let err = grad_check(|g, v| g.pixel_shuffle(v[0], r), &[rand_tensor(&shape, &mut rng)], 1e-4).unwrap();
        assert!(err <= 1e-8);
    }
}

#[test]
fn pooling_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let v = g.constant(Tensor::full(&[2, 3, 4, 6], 0.37f64)).unwrap();
    let p = g.avg_pool2(v).unwrap();
    let q = g.global_avg_pool(v).unwrap();
    assert!(g.value(p).data().iter().all(|&x| (x - 0.37).abs() < 1e-15));
    assert!(g.value(q).data().iter().all(|&x| (x - 0.37).abs() < 1e-15));

    let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    let p = g.avg_pool2(v).unwrap();
    let q = g.global_avg_pool(v).unwrap();
    for c in 0..2 {
        for y in 0..2 {
            for xx in 0..2 {
                let at = |dy: usize, dx: usize| x.data()[(c * 4 + 2 * y + dy) * 4 + 2 * xx + dx];
                let e = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                assert!((g.value(p).data()[(c * 2 + y) * 2 + xx] - e).abs() < 1e-15);
            }
        }
        let e: f64 = x.data()[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
        assert!((g.value(q).data()[c] - e).abs() < 1e-15);
    }
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::zeros(&[1, 1, 3, 4])).unwrap();
    assert!(g.avg_pool2(v).is_err());

    for shape in [[1, 1, 2, 2], [2, 3, 4, 6], [1, 2, 8, 2]] {
        let inputs = [rand_tensor(&shape, &mut rng)];
        assert!(grad_check(|g, v| g.avg_pool2(v[0]), &inputs, 1e-4).unwrap() <= 1e-8);
        assert!(grad_check(|g, v| g.global_avg_pool(v[0]), &inputs, 1e-4).unwrap() <= 1e-8);
    }
}

#[test]
fn repeat_batch_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (f, n) in [(1, 1), (5, 3), (36, 8)] {
        let err = grad_check(|g, v| g.repeat_batch(v[0], n), &[rand_tensor(&[1, f], &mut rng)], 1e-4).unwrap();
        assert!(err <= 1e-8);
    }
}

#[test]
fn residual_block_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[2, 3, 5, 5], &mut rng);
    let zeros = [
        Tensor::zeros(&[3, 3, 3, 3]),
        Tensor::zeros(&[3]),
        Tensor::zeros(&[3, 3, 3, 3]),
        Tensor::zeros(&[3]),
    ];
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let p = zeros.map(|t| g.constant(t).unwrap());
    let y = g.residual_block(xv, p, Padding::Zero).unwrap();
    assert_eq!(g.value(y), &x);

    for shape in [[1, 2, 3, 3], [2, 3, 5, 5], [1, 4, 6, 4]] {
        let c = shape[1];
        let inputs = [
            rand_tensor(&shape, &mut rng),
            rand_tensor(&[c, c, 3, 3], &mut rng),
            rand_tensor(&[c], &mut rng),
            rand_tensor(&[c, c, 3, 3], &mut rng),
            rand_tensor(&[c], &mut rng),
        ];
        let err = grad_check(
            |g, v| g.residual_block(v[0], [v[1], v[2], v[3], v[4]], Padding::Reflect),
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err <= TOL, "residual {shape:?}: {err}");
    }
}

#[test]
fn losses() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(&[4], vec![0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let t = g.constant(Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let l2 = g.l2_loss(p, t).unwrap();
    let l1 = g.l1_loss(p, t).unwrap();
    assert_eq!(g.value(l2).data(), &[0.25]);
    assert_eq!(g.value(l1).data(), &[0.25]);
    let same = g.l1_loss(p, p).unwrap();
    assert_eq!(g.value(same).data(), &[0.0]);

    let mut g = Graph::<f64>::new();
    let p = g.variable(Tensor::new(&[2], vec![0.5, 0.5]).unwrap()).unwrap();
    let l = g.l1_loss(p, p).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for shape in [vec![4], vec![2, 36], vec![1, 3, 4, 4]] {
        let inputs = [rand_away_from_zero(&shape, &mut rng), Tensor::zeros(&shape)];
        assert!(grad_check(|g, v| g.l1_loss(v[0], v[1]), &inputs, 1e-4).unwrap() <= TOL);
        let inputs = [rand_tensor(&shape, &mut rng), rand_tensor(&shape, &mut rng)];
        assert!(grad_check(|g, v| g.l2_loss(v[0], v[1]), &inputs, 1e-4).unwrap() <= TOL);
    }
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 2], f64::MAX)).unwrap();
    assert!(g.scale(x, 10.0).is_err());
    assert!(g.variable(Tensor::full(&[1], f64::NAN)).is_err());
}

#[test]
fn negative_control_detects_corrupted_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [
        rand_tensor(&[1, 2, 4, 4], &mut rng),
        rand_tensor(&[3, 2, 3, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ];
    let opts = GradCheckOptions {
        inject_fault: true,
        ..Default::default()
    };
    let report = grad_check_with(|g, v| g.conv2d(v[0], v[1], Some(v[2]), Padding::Zero), &inputs, &opts).unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

#[test]
fn params_bind_once_and_share_gradient() {
    let mut store = ParameterStore::<f64>::new();
    store.insert("w", Tensor::new(&[1, 1], vec![2.0]).unwrap(), true).unwrap();
    assert!(store.insert("w", Tensor::zeros(&[1]), true).is_err());
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
    let w1 = g.param(&store, "w").unwrap();
    let y = g.linear(x, w1, None).unwrap();
    let w2 = g.param(&store, "w").unwrap();
    assert_eq!(w1, w2);
    let y = g.linear(y, w2, None).unwrap();
    g.backward(y).unwrap();
    // y = 3 w^2
    assert_eq!(g.param_grads()["w"], vec![12.0]);
    assert!(g.param(&store, "missing").is_err());
}

#[test]
fn adam_behaviour() {
    let mut store = ParameterStore::<f64>::new();
    store.insert("w", Tensor::new(&[1], vec![1.5]).unwrap(), true).unwrap();
    let mut adam = AdamState::new(AdamConfig {
        lr: 0.1,
        ..Default::default()
    });
    let zero = [("w".to_string(), vec![0.0])].into_iter().collect();
    adam.step(&mut store, &zero).unwrap();
    assert_eq!(store.get("w").unwrap().tensor.data(), &[1.5]);
    assert_eq!(adam.step, 1);

    let mut converged = None;
    for step in 1..=2000 {
        let w = store.get("w").unwrap().tensor.data()[0];
        if w * w < 1e-6 {
            converged = Some(step);
            break;
        }
        let grads = [("w".to_string(), vec![2.0 * w])].into_iter().collect();
        adam.step(&mut store, &grads).unwrap();
    }
    assert!(converged.is_some(), "w = {}", store.get("w").unwrap().tensor.data()[0]);

    let mut frozen = ParameterStore::<f64>::new();
    frozen.insert("c", Tensor::new(&[1], vec![1.0]).unwrap(), false).unwrap();
    let grads = [("c".to_string(), vec![5.0])].into_iter().collect();
    adam.step(&mut frozen, &grads).unwrap();
    assert_eq!(frozen.get("c").unwrap().tensor.data(), &[1.0]);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&[3, 4, 8, 8], &mut rng).cast::<f32>();
    let w = rand_tensor(&[5, 4, 3, 3], &mut rng).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.variable(x.clone()).unwrap(), g.variable(w.clone()).unwrap());
        let y = g.conv2d(xv, wv, None, Padding::Reflect).unwrap();
        let z = g.global_avg_pool(y).unwrap();
        let ones = vec![1.0; 15];
        let s = g.dot_const(z, &ones).unwrap();
        g.backward(s).unwrap();
        (g.value(y).clone(), g.grad(wv).unwrap().to_vec(), g.grad(xv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
