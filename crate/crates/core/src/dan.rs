//! The unfolded alternating network: learnable initial degradation, two
//! heads, a Restorer and an Estimator iterated `T` times with shared
//! weights, and two tails.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, ParameterStore, Scalar, Tensor, Var};
use crate::degrade::THETA_DIM;
use crate::error::{Error, Result};
use crate::image::{reflect, Image};
use crate::rng::rng_from_seed;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DanConfig {
    pub sr_scale: u32,
    pub iterations: usize,
    pub feature_channels: usize,
    pub restorer_blocks: usize,
    pub estimator_blocks: usize,
    pub theta_dim: usize,
    pub theta_feature_dim: usize,
    pub tail_theta_layers: usize,
    pub learnable_init: bool,
    pub feature_space_iteration: bool,
    pub jacobi_update: bool,
    pub padding: Padding,
}

impl DanConfig {
    pub fn desk(sr_scale: u32) -> Self {
        DanConfig {
            sr_scale,
            iterations: 3,
            feature_channels: 32,
            restorer_blocks: 4,
            estimator_blocks: 4,
            theta_dim: THETA_DIM,
            theta_feature_dim: 64,
            tail_theta_layers: 2,
            learnable_init: true,
            feature_space_iteration: true,
            jacobi_update: true,
            padding: Padding::Zero,
        }
    }

    pub fn paper(sr_scale: u32) -> Self {
        DanConfig {
            feature_channels: 64,
            restorer_blocks: 16,
            ..Self::desk(sr_scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| Err(Error::domain(name, reason));
        if !matches!(self.sr_scale, 2 | 4) {
            return bad("sr_scale", "must be 2 or 4");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1");
        }
        if self.feature_channels == 0 || self.theta_feature_dim == 0 {
            return bad("feature_channels", "dimensions must be positive");
        }
        if self.theta_dim != THETA_DIM {
            return bad("theta_dim", "must be 36");
        }
        if self.tail_theta_layers != 2 {
            return bad("tail_theta_layers", "only the two-layer tail is implemented");
        }
        Ok(())
    }

    /// Spatial LR sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.estimator_blocks
    }

    fn upsample_steps(&self) -> usize {
        if self.sr_scale == 4 {
            2
        } else {
            1
        }
    }
}

/// Every parameter shape, by name.
pub fn param_shapes(cfg: &DanConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.feature_channels;
    let f = cfg.theta_feature_dim;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("theta0".into(), vec![1, cfg.theta_dim]),
        ("head_image.w".into(), vec![c, 3, 3, 3]),
        ("head_image.b".into(), vec![c]),
        ("head_theta.w".into(), vec![f, cfg.theta_dim]),
        ("head_theta.b".into(), vec![f]),
        ("restorer.fuse.w".into(), vec![c, c + f, 1, 1]),
        ("restorer.fuse.b".into(), vec![c]),
        ("estimator.fuse.w".into(), vec![c, 2 * c, 1, 1]),
        ("estimator.fuse.b".into(), vec![c]),
        ("estimator.fc.w".into(), vec![f, c]),
        ("estimator.fc.b".into(), vec![f]),
        ("tail_image.out.w".into(), vec![3, c, 3, 3]),
        ("tail_image.out.b".into(), vec![3]),
        ("tail_theta.fc1.w".into(), vec![f, f]),
        ("tail_theta.fc1.b".into(), vec![f]),
        ("tail_theta.fc2.w".into(), vec![cfg.theta_dim, f]),
        ("tail_theta.fc2.b".into(), vec![cfg.theta_dim]),
    ];
    let block = |prefix: String, v: &mut Vec<(String, Vec<usize>)>| {
        for conv in ["conv1", "conv2"] {
            v.push((format!("{prefix}.{conv}.w"), vec![c, c, 3, 3]));
            v.push((format!("{prefix}.{conv}.b"), vec![c]));
        }
    };
    for i in 0..cfg.restorer_blocks {
        block(format!("restorer.block{i}"), &mut v);
    }
    for i in 0..cfg.estimator_blocks {
        block(format!("estimator.block{i}"), &mut v);
    }
    for i in 0..cfg.upsample_steps() {
        v.push((format!("tail_image.up{i}.w"), vec![4 * c, c, 3, 3]));
        v.push((format!("tail_image.up{i}.b"), vec![4 * c]));
    }
    v
}

/// Kaiming-uniform fan-in weights, zero biases, zero `theta0`; the second
/// conv of every residual block is scaled by 0.1.
pub fn init_params(cfg: &DanConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut store = ParameterStore::new();
    for (name, shape) in param_shapes(cfg) {
        let tensor = if name == "theta0" || name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if name.contains(".block") && name.contains("conv2") {
                bound *= 0.1;
            }
            Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound) as f32)
        };
        let trainable = name != "theta0" || cfg.learnable_init;
        store.insert(&name, tensor, trainable)?;
    }
    Ok(store)
}

/// Parameter group of a name (`head_image`, `restorer`, ...).
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Builds network pieces on a graph from a parameter store.
pub struct Dan<'a, T: Scalar> {
    pub config: &'a DanConfig,
    pub store: &'a ParameterStore<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    /// Overrides the configured iteration count.
    pub iterations: Option<usize>,
    /// Applies both tails after every iteration.
    pub decode_each_iteration: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub fx: Var,
    pub ftheta: Var,
    pub fx_norm: f64,
    pub ftheta_norm: f64,
    pub sr: Option<Var>,
    pub theta: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DanOutput {
    pub sr: Var,
    pub theta: Var,
    pub fx0: Var,
    pub trace: Vec<IterationTrace>,
}

impl<'a, T: Scalar> Dan<'a, T> {
    pub fn new(config: &'a DanConfig, store: &'a ParameterStore<T>) -> Self {
        Dan { config, store }
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        g.param(self.store, name)
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        g.conv2d(x, w, Some(b), self.config.padding)
    }

    fn fc(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        g.linear(x, w, Some(b))
    }

    fn block(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let p = [
            self.p(g, &format!("{prefix}.conv1.w"))?,
            self.p(g, &format!("{prefix}.conv1.b"))?,
            self.p(g, &format!("{prefix}.conv2.w"))?,
            self.p(g, &format!("{prefix}.conv2.b"))?,
        ];
        g.residual_block(x, p, self.config.padding)
    }

    /// `N x 3 x H x W` to `N x C x H x W`.
    pub fn head_image(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(y).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("head_image expects 3 channels, got {c}")));
        }
        self.conv(g, y, "head_image")
    }

    /// `N x 36` to `N x F`.
    pub fn head_theta(&self, g: &mut Graph<T>, theta: Var) -> Result<Var> {
        self.fc(g, theta, "head_theta")
    }

    /// The learnable initial degradation repeated over a batch.
    pub fn theta0(&self, g: &mut Graph<T>, batch: usize) -> Result<Var> {
        let t = self.p(g, "theta0")?;
        g.repeat_batch(t, batch)
    }

    pub fn restorer(&self, g: &mut Graph<T>, fx0: Var, ftheta: Var) -> Result<Var> {
        let (n, _, h, w) = g.value(fx0).dims4()?;
        let (nf, f) = g.value(ftheta).dims2()?;
        if nf != n || f != self.config.theta_feature_dim {
            return Err(Error::Shape(format!("restorer: features {:?} for batch {n}", g.value(ftheta).shape())));
        }
        let expanded = g.broadcast_spatial(ftheta, h, w)?;
        let cat = g.concat_channels(fx0, expanded)?;
        let fused = self.conv(g, cat, "restorer.fuse")?;
        let mut x = g.leaky_relu(fused, LEAK)?;
        for i in 0..self.config.restorer_blocks {
            x = self.block(g, x, &format!("restorer.block{i}"))?;
        }
        Ok(x)
    }

    pub fn estimator(&self, g: &mut Graph<T>, fx0: Var, fx: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(fx0).dims4()?;
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("estimator: {h}x{w} is not a multiple of {m}")));
        }
        let cat = g.concat_channels(fx0, fx)?;
        let fused = self.conv(g, cat, "estimator.fuse")?;
        let mut x = g.leaky_relu(fused, LEAK)?;
        for i in 0..self.config.estimator_blocks {
            x = self.block(g, x, &format!("estimator.block{i}"))?;
            x = g.avg_pool2(x)?;
        }
        let pooled = g.global_avg_pool(x)?;
        self.fc(g, pooled, "estimator.fc")
    }

    /// Features at LR size to an image `sr_scale` times larger.
    pub fn tail_image(&self, g: &mut Graph<T>, fx: Var) -> Result<Var> {
        let mut x = fx;
        for i in 0..self.config.upsample_steps() {
            x = self.conv(g, x, &format!("tail_image.up{i}"))?;
            x = g.pixel_shuffle(x, 2)?;
            x = g.leaky_relu(x, LEAK)?;
        }
        self.conv(g, x, "tail_image.out")
    }

    pub fn tail_theta(&self, g: &mut Graph<T>, ftheta: Var) -> Result<Var> {
        let h = self.fc(g, ftheta, "tail_theta.fc1")?;
        let h = g.leaky_relu(h, LEAK)?;
        self.fc(g, h, "tail_theta.fc2")
    }

    fn avg_pool_to_lr(&self, g: &mut Graph<T>, sr: Var) -> Result<Var> {
        let mut x = sr;
        for _ in 0..self.config.upsample_steps() {
            x = g.avg_pool2(x)?;
        }
        Ok(x)
    }

    /// The full unfolded network. With `gt_theta`, every degradation feature
    /// fed to the Restorer is `head_theta(gt_theta)`; the Estimator still runs
    /// and produces the returned `theta`.
    pub fn forward(&self, g: &mut Graph<T>, y: Var, gt_theta: Option<Var>, opts: &ForwardOptions) -> Result<DanOutput> {
        let cfg = self.config;
        let iterations = opts.iterations.unwrap_or(cfg.iterations);
        if iterations == 0 {
            return Err(Error::domain("iterations", "must be at least 1"));
        }
        let (n, _, _, _) = g.value(y).dims4()?;
        let fx0 = self.head_image(g, y)?;
        let theta0 = self.theta0(g, n)?;
        let mut ftheta = self.head_theta(g, theta0)?;
        let gt_feature = match gt_theta {
            Some(t) => Some(self.head_theta(g, t)?),
            None => None,
        };
        let mut fx = fx0;
        let mut trace = Vec::with_capacity(iterations);
        let mut last = None;
        for i in 0..iterations {
            let cond = |f: Var| gt_feature.unwrap_or(f);
            let (new_fx, new_ftheta) = if cfg.jacobi_update {
                let nx = self.restorer(g, fx0, cond(ftheta))?;
                let nt = self.estimator(g, fx0, fx)?;
                (nx, nt)
            } else {
                let nt = self.estimator(g, fx0, fx)?;
                let nx = self.restorer(g, fx0, cond(nt))?;
                (nx, nt)
            };
            let is_last = i + 1 == iterations;
            let decode = is_last || opts.decode_each_iteration || !cfg.feature_space_iteration;
            let (sr, theta) = if decode {
                (Some(self.tail_image(g, new_fx)?), Some(self.tail_theta(g, new_ftheta)?))
            } else {
                (None, None)
            };
            trace.push(IterationTrace {
                fx: new_fx,
                ftheta: new_ftheta,
                fx_norm: g.value(new_fx).norm(),
                ftheta_norm: g.value(new_ftheta).norm(),
                sr,
                theta,
            });
            if let (Some(sr), Some(theta)) = (sr, theta) {
                last = Some((sr, theta));
            }
            if cfg.feature_space_iteration {
                fx = new_fx;
                ftheta = new_ftheta;
            } else {
                let (sr, theta) = (sr.expect("decoded"), theta.expect("decoded"));
                let lr = self.avg_pool_to_lr(g, sr)?;
                fx = self.head_image(g, lr)?;
                ftheta = self.head_theta(g, theta)?;
            }
        }
        let (sr, theta) = last.expect("at least one iteration");
        Ok(DanOutput { sr, theta, fx0, trace })
    }
}

/// Stacks images into an `N x 3 x H x W` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if im.dims() != (c, h, w) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", (c, h, w), im.dims())));
        }
        data.extend(im.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Splits an `N x C x H x W` tensor into images.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    let per = c * h * w;
    (0..n)
        .map(|i| Image::new(c, h, w, t.data()[i * per..(i + 1) * per].iter().map(|v| v.f64() as f32).collect()))
        .collect()
}

/// Result of running the network on one LR image outside of training.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Clamped to `[0, 1]`.
    pub sr: Image,
    pub theta: Vec<f32>,
    pub per_iteration: Vec<(Image, Vec<f32>)>,
    pub fx_norms: Vec<f64>,
    pub ftheta_norms: Vec<f64>,
}

/// Runs the network on a full LR image. The input is reflect-padded up to
/// the pooling multiple and the output cropped back.
pub fn infer(
    cfg: &DanConfig,
    store: &ParameterStore,
    lr: &Image,
    gt_theta: Option<&[f32]>,
    opts: &ForwardOptions,
) -> Result<Inference> {
    let (_, h, w) = lr.dims();
    let m = cfg.size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = if (ph, pw) == (h, w) {
        lr.clone()
    } else {
        pad_reflect_to(lr, ph, pw)?
    };
    let mut g = Graph::<f32>::new();
    let y = g.constant(images_to_tensor(&[&padded])?)?;
    let gt = match gt_theta {
        Some(t) => Some(g.constant(Tensor::new(&[1, t.len()], t.to_vec())?)?),
        None => None,
    };
    let out = Dan::new(cfg, store).forward(&mut g, y, gt, opts)?;
    let s = cfg.sr_scale as usize;
    let decode = |g: &Graph<f32>, v: Var| -> Result<Image> {
        let im = tensor_to_images(g.value(v))?.remove(0);
        Ok(im.crop(0, 0, h * s, w * s)?.clamped())
    };
    let per_iteration = out
        .trace
        .iter()
        .filter_map(|t| Some((t.sr?, t.theta?)))
        .map(|(sr, th)| Ok((decode(&g, sr)?, g.value(th).data().to_vec())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Inference {
        sr: decode(&g, out.sr)?,
        theta: g.value(out.theta).data().to_vec(),
        per_iteration,
        fx_norms: out.trace.iter().map(|t| t.fx_norm).collect(),
        ftheta_norms: out.trace.iter().map(|t| t.ftheta_norm).collect(),
    })
}

fn pad_reflect_to(im: &Image, h: usize, w: usize) -> Result<Image> {
    let (c, ih, iw) = im.dims();
    Ok(Image::from_fn(c, h, w, |ch, y, x| {
        im.get(ch, reflect(y as isize, ih as isize), reflect(x as isize, iw as isize))
    }))
}
