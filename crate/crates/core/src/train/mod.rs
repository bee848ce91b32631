//! Dataset synthesis and manifests, the supervised training loop, tail
//! calibration and checkpoint persistence.

mod checkpoint;
mod dataset;
mod synth;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, Checkpoint, FORMAT_VERSION, MAGIC};
pub use dataset::{
    make_dataset, replay_lr, sample_batch, transform_params, Batch, CropOrigin, Dataset, DatasetManifest,
    ManifestEntry, MANIFEST_VERSION,
};
pub use synth::{synth_hr_image, synth_hr_images};

use crate::autodiff::{AdamConfig, AdamState, Graph, ParameterStore};
use crate::dan::{init_params, param_group, Dan, DanConfig, ForwardOptions};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub halve_every: u64,
    pub total_steps: u64,
    pub batch: usize,
    pub lr_patch: usize,
    pub theta_loss_weight: f64,
    pub seed: u64,
    pub augmentation: bool,
    pub val_every: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 2e-4,
            halve_every: 5_000,
            total_steps: 20_000,
            batch: 8,
            lr_patch: 32,
            theta_loss_weight: 1.0,
            seed: 0,
            augmentation: false,
            val_every: 1_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            halve_every: 200_000,
            total_steps: 600_000,
            batch: 64,
            lr_patch: 48,
            val_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr0.is_nan() || self.lr0 <= 0.0 || self.halve_every == 0 || self.batch == 0 || self.lr_patch == 0 {
            return Err(Error::domain("train", "lr0, halve_every, batch and lr_patch must be positive"));
        }
        if self.theta_loss_weight.is_nan() || self.theta_loss_weight < 0.0 {
            return Err(Error::domain("theta_loss_weight", "must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate used at `step` (0-based): halved every `halve_every`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr0 * 0.5f64.powi((step / self.halve_every) as i32)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr0,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss_l1: f64,
    pub loss_l2: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,loss_l1,loss_l2,lr,val_psnr";

    pub fn to_csv(&self) -> String {
        let val = self.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!("{},{:.9},{:.9},{:.9e},{val}", self.step, self.loss_l1, self.loss_l2, self.lr)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<&'a Dataset>,
    /// CSV log, appended to when resuming.
    pub log_path: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    /// Stops after this many steps in total instead of `total_steps`.
    pub stop_at: Option<u64>,
    pub on_row: Option<&'a dyn Fn(&LogRow)>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

struct StepLoss {
    graph: Graph<f32>,
    loss: crate::autodiff::Var,
    l1: f64,
    l2: f64,
}

fn batch_loss(
    cfg: &DanConfig,
    store: &ParameterStore,
    batch: &Batch,
    w: f64,
    opts: &ForwardOptions,
) -> Result<StepLoss> {
    let mut g = Graph::new();
    let y = g.constant(batch.lr.clone())?;
    let hr = g.constant(batch.hr.clone())?;
    let theta = g.constant(batch.theta.clone())?;
    let out = Dan::new(cfg, store).forward(&mut g, y, None, opts)?;
    let l1 = g.l1_loss(out.sr, hr)?;
    let l2 = g.l2_loss(out.theta, theta)?;
    let weighted = g.scale(l2, w)?;
    let loss = g.add(l1, weighted)?;
    let (l1, l2) = (g.value(l1).data()[0] as f64, g.value(l2).data()[0] as f64);
    Ok(StepLoss { graph: g, loss, l1, l2 })
}

fn group_norms(grads: &BTreeMap<String, Vec<f32>>) -> BTreeMap<String, f64> {
    let mut norms = BTreeMap::new();
    for (name, g) in grads {
        *norms.entry(param_group(name).to_string()).or_insert(0.0) +=
            g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    norms.values_mut().for_each(|v| *v = v.sqrt());
    norms
}

/// `(L1, L2)` of the training loss on one batch, without a backward pass.
pub fn batch_losses(cfg: &DanConfig, store: &ParameterStore, batch: &Batch) -> Result<(f64, f64)> {
    let s = batch_loss(cfg, store, batch, 1.0, &ForwardOptions::default())?;
    Ok((s.l1, s.l2))
}

/// Gradient norm of every parameter group after one step on one batch.
pub fn gradient_norms(
    cfg: &DanConfig,
    store: &ParameterStore,
    batch: &Batch,
    theta_loss_weight: f64,
) -> Result<BTreeMap<String, f64>> {
    let mut s = batch_loss(cfg, store, batch, theta_loss_weight, &ForwardOptions::default())?;
    s.graph.backward(s.loss)?;
    Ok(group_norms(&s.graph.param_grads()))
}

/// Mean Y-PSNR of the network over a dataset (full images).
pub fn validation_psnr(cfg: &DanConfig, store: &ParameterStore, data: &Dataset) -> Result<f64> {
    use rayon::prelude::*;
    let scores = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let out = crate::dan::infer(cfg, store, &data.lr[i], None, &ForwardOptions::default())?;
            crate::metrics::psnr_y(&out.sr, &data.hr[i], 0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

/// Runs Adam on `L1(SR, HR) + w * L2(theta_hat, theta)` at the final
/// iteration. Batches are drawn from a stream keyed by `(seed, step)` so a
/// resumed run continues exactly where the original would have.
pub fn train(dan_cfg: &DanConfig, cfg: &TrainConfig, data: &Dataset, opts: TrainOptions) -> Result<TrainOutcome> {
    dan_cfg.validate()?;
    cfg.validate()?;
    if data.scale() != dan_cfg.sr_scale as usize {
        return Err(Error::domain(
            "sr_scale",
            format!("network scale {} but dataset scale {}", dan_cfg.sr_scale, data.scale()),
        ));
    }
    if !cfg.lr_patch.is_multiple_of(dan_cfg.size_multiple()) {
        return Err(Error::domain(
            "lr_patch",
            format!("{} is not a multiple of {}", cfg.lr_patch, dan_cfg.size_multiple()),
        ));
    }
    let (mut store, mut adam, start) = match opts.resume {
        Some(ck) => {
            if &ck.dan != dan_cfg {
                return Err(Error::Checkpoint("resume checkpoint has a different network config".into()));
            }
            let adam = ck.adam.unwrap_or_else(|| AdamState::new(cfg.adam()));
            (ck.params, adam, ck.step)
        }
        None => (init_params(dan_cfg, derive_seed(cfg.seed, 0))?, AdamState::new(cfg.adam()), 0),
    };
    let end = opts.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut log_file = match opts.log_path {
        Some(p) => {
            let fresh = start == 0 || !p.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if fresh {
                writeln!(f, "{}", LogRow::CSV_HEADER).map_err(|e| Error::io(p, e))?;
            }
            Some((f, p))
        }
        None => None,
    };
    let batch_seed = derive_seed(cfg.seed, 1);
    let mut log = Vec::new();
    for step in start..end {
        let lr = cfg.lr_at(step);
        let batch = sample_batch(
            data,
            cfg.batch,
            cfg.lr_patch,
            cfg.augmentation,
            &mut rng_from_seed(derive_seed(batch_seed, step)),
        )?;
        let mut s = batch_loss(dan_cfg, &store, &batch, cfg.theta_loss_weight, &ForwardOptions::default())
            .map_err(|e| Error::Diverged {
                step,
                detail: format!("forward failed at lr {lr:.3e}: {e}"),
            })?;
        let backward = s.graph.backward(s.loss);
        let grads = s.graph.param_grads();
        let total = s.l1 + cfg.theta_loss_weight * s.l2;
        if backward.is_err() || !total.is_finite() || grads.values().flatten().any(|v| !v.is_finite()) {
            let norms = group_norms(&grads);
            return Err(Error::Diverged {
                step,
                detail: format!("loss {total}, lr {lr:.3e}, gradient norms {norms:?}"),
            });
        }
        adam.config.lr = lr;
        adam.step(&mut store, &grads)?;
        let done = step + 1;
        let val_psnr = match opts.validation {
            Some(v) if cfg.val_every > 0 && (done % cfg.val_every == 0 || done == cfg.total_steps) => {
                Some(validation_psnr(dan_cfg, &store, v)?)
            }
            _ => None,
        };
        let row = LogRow {
            step,
            loss_l1: s.l1,
            loss_l2: s.l2,
            lr,
            val_psnr,
        };
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(*p, e))?;
        }
        if let Some(cb) = opts.on_row {
            cb(&row);
        }
        log.push(row);
    }
    let mut checkpoint = Checkpoint::new(dan_cfg.clone(), Some(cfg.clone()), store);
    checkpoint.step = end.max(start);
    checkpoint.adam = Some(adam);
    Ok(TrainOutcome { checkpoint, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr_patch: usize,
    pub lr: f64,
    pub theta_loss_weight: f64,
    pub seed: u64,
}

impl CalibrationConfig {
    pub fn desk() -> Self {
        CalibrationConfig {
            steps: 1_000,
            batch: 8,
            lr_patch: 32,
            lr: 1e-4,
            theta_loss_weight: 1.0,
            seed: 0,
        }
    }
}

/// Fine-tunes copies of both tails on the features of iteration
/// `iterations` while every other weight stays frozen. Returns the full
/// parameter set with the tuned tails.
pub fn calibrate_tails(
    dan_cfg: &DanConfig,
    store: &ParameterStore,
    data: &Dataset,
    iterations: usize,
    cfg: &CalibrationConfig,
) -> Result<ParameterStore> {
    let mut tuned = store.clone();
    let names: Vec<String> = tuned.names().map(str::to_string).collect();
    for name in &names {
        let p = tuned.get_mut(name).expect("listed");
        p.trainable = name.starts_with("tail_");
    }
    let opts = ForwardOptions {
        iterations: Some(iterations),
        decode_each_iteration: false,
    };
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let seed = derive_seed(cfg.seed, iterations as u64);
    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg.batch, cfg.lr_patch, false, &mut rng_from_seed(derive_seed(seed, step)))?;
        let mut s = batch_loss(dan_cfg, &tuned, &batch, cfg.theta_loss_weight, &opts)?;
        s.graph.backward(s.loss)?;
        adam.step(&mut tuned, &s.graph.param_grads())?;
    }
    for name in &names {
        let trainable = store.get(name).expect("same names").trainable;
        tuned.get_mut(name).expect("listed").trainable = trainable;
    }
    Ok(tuned)
}
