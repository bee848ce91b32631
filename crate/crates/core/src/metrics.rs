//! Y-channel PSNR/SSIM, kernel accuracy and the evaluation report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParameterStore;
use crate::dan::{infer, DanConfig, ForwardOptions};
use crate::degrade::params::hex;
use crate::degrade::{decode_theta, degrade_blurry, resize_to, ResizeMode, THETA_DIM};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{kernel_triptych, write_pnm};
use crate::kernels::{kernel_from_spec, KernelMatrix};
use crate::rng::{derive_seed, rng_from_seed};
use crate::train::{config_hash, Checkpoint, Dataset};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YConvention {
    /// 16..235 studio swing.
    #[default]
    Studio,
    /// Full-range BT.601 luma.
    FullRange,
}

pub fn rgb_to_y_with(image: &Image, conv: YConvention) -> Result<Image> {
    let (c, h, w) = image.dims();
    if c != 3 {
        return Err(Error::Shape(format!("rgb_to_y needs 3 channels, got {c}")));
    }
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    let data = (0..h * w)
        .map(|i| {
            let (r, g, b) = (r[i] as f64, g[i] as f64, b[i] as f64);
            let y = match conv {
                YConvention::Studio => (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0,
                YConvention::FullRange => 0.299 * r + 0.587 * g + 0.114 * b,
            };
            y as f32
        })
        .collect();
    Image::new(1, h, w, data)
}

pub fn rgb_to_y(image: &Image) -> Result<Image> {
    rgb_to_y_with(image, YConvention::Studio)
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn shaved(im: &Image, shave: usize) -> Result<Image> {
    if shave == 0 {
        return Ok(im.clone());
    }
    let (_, h, w) = im.dims();
    if 2 * shave >= h || 2 * shave >= w {
        return Err(Error::domain("shave", format!("{shave} leaves nothing of {h}x{w}")));
    }
    im.crop(shave, shave, h - 2 * shave, w - 2 * shave)
}

fn luma(im: &Image, conv: YConvention) -> Result<Image> {
    if im.channels() == 1 {
        Ok(im.clone())
    } else {
        rgb_to_y_with(im, conv)
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n)
}

/// PSNR over all channels as given, for data on `[0, 1]`. Identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

pub fn psnr_y_with(a: &Image, b: &Image, shave: usize, conv: YConvention) -> Result<f64> {
    same_dims(a, b)?;
    psnr(&shaved(&luma(a, conv)?, shave)?, &shaved(&luma(b, conv)?, shave)?)
}

/// PSNR on the studio-swing Y channel; single-channel inputs are used as is.
pub fn psnr_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    psnr_y_with(a, b, shave, YConvention::Studio)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Single-scale SSIM with an 11x11 Gaussian window (σ 1.5), `L = 1`,
/// averaged over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (c, h, w) = a.dims();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Shape(format!("ssim needs at least {k}x{k}, got {h}x{w}")));
    }
    let g = ssim_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        // separable window: horizontal pass of the five moment maps
        let mut rows = vec![[0f64; 5]; h * ow];
        for y in 0..h {
            for x in 0..ow {
                let mut m = [0f64; 5];
                for (j, gw) in g.iter().enumerate() {
                    let (u, v) = (pa[y * w + x + j] as f64, pb[y * w + x + j] as f64);
                    m[0] += gw * u;
                    m[1] += gw * v;
                    m[2] += gw * u * u;
                    m[3] += gw * v * v;
                    m[4] += gw * u * v;
                }
                rows[y * ow + x] = m;
            }
        }
        for y in 0..oh {
            for x in 0..ow {
                let mut m = [0f64; 5];
                for (i, gw) in g.iter().enumerate() {
                    let r = &rows[(y + i) * ow + x];
                    for t in 0..5 {
                        m[t] += gw * r[t];
                    }
                }
                let (mu_a, mu_b) = (m[0], m[1]);
                let va = m[2] - mu_a * mu_a;
                let vb = m[3] - mu_b * mu_b;
                let cov = m[4] - mu_a * mu_b;
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

pub fn ssim_y_with(a: &Image, b: &Image, shave: usize, conv: YConvention) -> Result<f64> {
    same_dims(a, b)?;
    ssim(&shaved(&luma(a, conv)?, shave)?, &shaved(&luma(b, conv)?, shave)?)
}

pub fn ssim_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    ssim_y_with(a, b, shave, YConvention::Studio)
}

/// Mean squared difference of two kernels after zero-padding the smaller
/// one to the larger (both centered).
pub fn kernel_mse(k_hat: &KernelMatrix, k_gt: &KernelMatrix) -> f64 {
    let n = k_hat.size().max(k_gt.size());
    let (a, b) = (k_hat.resized(n), k_gt.resized(n));
    a.weights().iter().zip(b.weights()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (n * n) as f64
}

/// Y-PSNR between `lr` and `hr` re-degraded with `kernel` at scale `s`.
pub fn lr_psnr(hr: &Image, lr: &Image, kernel: &KernelMatrix, s: usize) -> Result<f64> {
    psnr_y(&degrade_blurry(hr, kernel, s)?, lr, 0)
}

pub fn bicubic_upscale(lr: &Image, s: usize) -> Result<Image> {
    Ok(resize_to(lr, ResizeMode::Bicubic, lr.height() * s, lr.width() * s)?.clamped())
}

pub fn theta_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Slot-wise mean of the manifest θ vectors.
pub fn theta_mean(data: &Dataset) -> Vec<f64> {
    let mut m = vec![0.0; THETA_DIM];
    for e in &data.manifest.entries {
        for (acc, v) in m.iter_mut().zip(&e.theta) {
            *acc += v;
        }
    }
    let n = data.manifest.entries.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("bad number {s}"))),
            },
        }
    }

    pub mod opt {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super")] f64);

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub theta_mse: f64,
    #[serde(default, with = "inf_as_string::opt", skip_serializing_if = "Option::is_none")]
    pub theta_mse_baseline: Option<f64>,
    #[serde(default, with = "inf_as_string::opt", skip_serializing_if = "Option::is_none")]
    pub kernel_mse: Option<f64>,
    #[serde(default, with = "inf_as_string::opt", skip_serializing_if = "Option::is_none")]
    pub lr_psnr: Option<f64>,
    #[serde(with = "inf_as_string")]
    pub bicubic_psnr: f64,
}

impl EvalRow {
    fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("psnr", Some(self.psnr)),
            ("ssim", Some(self.ssim)),
            ("theta_mse", Some(self.theta_mse)),
            ("theta_mse_baseline", self.theta_mse_baseline),
            ("kernel_mse", self.kernel_mse),
            ("lr_psnr", self.lr_psnr),
            ("bicubic_psnr", Some(self.bicubic_psnr)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "inf_as_string")]
    pub mean: f64,
    #[serde(with = "inf_as_string")]
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Aggregate { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if mean.is_finite() {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Aggregate { mean, std, n }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub use_gt_degradation: bool,
    /// Overrides the trained iteration count.
    pub iterations: Option<usize>,
    pub shave: usize,
    pub y_convention: YConvention,
    /// Training-set θ mean used for the baseline column.
    #[serde(skip)]
    pub theta_baseline: Option<Vec<f64>>,
    /// Writes `<id>_kernel.pgm` triptychs (GT, predicted, |diff|) here.
    #[serde(skip)]
    pub triptych_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub weights_hash: String,
    pub manifest_hash: String,
    pub preset: String,
    pub options: EvalOptions,
    pub iterations: usize,
    pub rows: Vec<EvalRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

impl EvalReport {
    pub fn aggregate(rows: &[EvalRow]) -> BTreeMap<String, Aggregate> {
        let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in rows {
            for (k, v) in r.metrics() {
                if let Some(v) = v {
                    cols.entry(k.to_string()).or_default().push(v);
                }
            }
        }
        cols.into_iter().map(|(k, v)| (k, Aggregate::of(&v))).collect()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregates.get(metric).map(|a| a.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        let mut out = String::from("id,psnr,ssim,theta_mse,theta_mse_baseline,kernel_mse,lr_psnr,bicubic_psnr\n");
        for r in &self.rows {
            let cols: Vec<String> = r.metrics().into_iter().map(|(_, v)| fmt(v)).collect();
            out.push_str(&format!("{},{}\n", r.id, cols.join(",")));
        }
        out
    }
}

pub fn manifest_hash(data: &Dataset) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(&data.manifest)?)))
}

/// The kernel actually used to synthesize an entry (including its kernel
/// noise), if the entry is blur-only.
pub fn realized_kernel(data: &Dataset, index: usize) -> Result<Option<KernelMatrix>> {
    let e = &data.manifest.entries[index];
    if !e.params.is_blur_only() {
        return Ok(None);
    }
    let mut rng = rng_from_seed(derive_seed(e.seed, 1));
    Ok(Some(kernel_from_spec(&e.params.stage1.blur, data.manifest.kernel_noise, false, &mut rng)?))
}

/// Runs the network on every entry (full images) and scores it. Rows follow
/// manifest order.
pub fn evaluate(cfg: &DanConfig, store: &ParameterStore, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let s = data.scale();
    let fwd = ForwardOptions {
        iterations: opts.iterations,
        decode_each_iteration: false,
    };
    if let Some(dir) = &opts.triptych_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<EvalRow> {
            let e = &data.manifest.entries[i];
            let (hr, lr) = (&data.hr[i], &data.lr[i]);
            let gt: Vec<f32> = e.theta.iter().map(|&v| v as f32).collect();
            let out = infer(cfg, store, lr, opts.use_gt_degradation.then_some(gt.as_slice()), &fwd)?;
            let theta_hat: Vec<f64> = out.theta.iter().map(|&v| v as f64).collect();
            let mut row = EvalRow {
                id: e.id.clone(),
                psnr: psnr_y_with(&out.sr, hr, opts.shave, opts.y_convention)?,
                ssim: ssim_y_with(&out.sr, hr, opts.shave, opts.y_convention)?,
                theta_mse: theta_mse(&theta_hat, &e.theta),
                theta_mse_baseline: opts.theta_baseline.as_ref().map(|m| theta_mse(m, &e.theta)),
                kernel_mse: None,
                lr_psnr: None,
                bicubic_psnr: psnr_y_with(&bicubic_upscale(lr, s)?, hr, opts.shave, opts.y_convention)?,
            };
            if let Some(k_gt) = realized_kernel(data, i)? {
                let decoded = decode_theta(&theta_hat, s as u32)?.params;
                let k_hat = kernel_from_spec(&decoded.stage1.blur, 0.0, false, &mut rng_from_seed(0))?;
                row.kernel_mse = Some(kernel_mse(&k_hat, &k_gt));
                let regen = degrade_blurry(hr, &k_hat, s)?.clamped().quantized();
                row.lr_psnr = Some(psnr_y_with(&regen, lr, 0, opts.y_convention)?);
                if let Some(dir) = &opts.triptych_dir {
                    write_pnm(dir.join(format!("{}_kernel.pgm", e.id)), &kernel_triptych(&k_gt, &k_hat))?;
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights_hash = Checkpoint::new(cfg.clone(), None, store.clone()).weights_hash()?;
    Ok(EvalReport {
        config_hash: config_hash(cfg),
        weights_hash,
        manifest_hash: manifest_hash(data)?,
        preset: data.manifest.preset.clone(),
        options: opts.clone(),
        iterations: opts.iterations.unwrap_or(cfg.iterations),
        aggregates: EvalReport::aggregate(&rows),
        rows,
    })
}
