use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::Value;

use dansr::dan::{infer, DanConfig, ForwardOptions};
use dansr::degrade::{
    decode_theta, sample_degradation, DegradationPreset, DegradationRecord, BLURRY_KERNEL_NOISE, THETA_DIM,
};
use dansr::io::{read_pnm, write_kernel_pgm, write_kernel_text, write_pnm};
use dansr::kernels::{kernel_from_spec, BlurKernelSpec};
use dansr::metrics::{evaluate, theta_mean, EvalOptions, YConvention};
use dansr::rng::{derive_seed, rng_from_seed};
use dansr::selfcheck::{self, SelfCheckOptions};
use dansr::train::{
    calibrate_tails, make_dataset, replay_lr, synth_hr_images, train, CalibrationConfig, Checkpoint, Dataset,
    TrainConfig, TrainOptions,
};

/// Bad flags or unreadable user input; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "dansr", version, about = "Blind super-resolution with an unfolded restorer/estimator network")]
struct Cli {
    /// Worker threads (1 gives bitwise-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one blur kernel.
    Kernel(KernelArgs),
    /// Degrade one HR image.
    Degrade(DegradeArgs),
    /// Create a synthetic HR/LR dataset with a manifest.
    Dataset(DatasetArgs),
    /// Train the network.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Estimate the degradation of one LR image.
    Estimate(EstimateArgs),
    /// Run the numerical self-checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Gaussian,
    Plateau,
    Sinc,
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 21)]
    size: usize,
    #[arg(long, default_value_t = 2.0)]
    sigma_x: f64,
    #[arg(long, default_value_t = 2.0)]
    sigma_y: f64,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    omega_c: f64,
    /// Multiplicative kernel noise strength.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, env = "DAN_SEED", default_value_t = 0)]
    seed: u64,
    /// Output prefix: writes `<out>.txt` and `<out>.pgm`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, conflicts_with = "theta_json", required_unless_present = "theta_json")]
    preset: Option<String>,
    /// Degradation record to replay (as written by `--emit-theta`).
    #[arg(long)]
    theta_json: Option<PathBuf>,
    #[arg(long)]
    scale: Option<u32>,
    #[arg(long, env = "DAN_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    emit_theta: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    n: Option<usize>,
    /// Side of the procedural HR images.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "DAN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Use the PPM/PGM files of this directory as HR images.
    #[arg(long)]
    hr_dir: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Validation manifest for periodic PSNR.
    #[arg(long)]
    val_dataset: Option<PathBuf>,
    /// JSON with optional `dan` and `train` objects, merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// CSV log (default: `<out>.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, conflicts_with = "paper")]
    desk: bool,
    #[arg(long)]
    paper: bool,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Stop after this many steps in total (the schedule still uses --steps).
    #[arg(long)]
    stop_at: Option<u64>,
    /// Write the checkpoint every N steps.
    #[arg(long)]
    save_every: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_patch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    halve_every: Option<u64>,
    #[arg(long)]
    theta_weight: Option<f64>,
    #[arg(long)]
    val_every: Option<u64>,
    #[arg(long)]
    augment: bool,
    #[arg(long, env = "DAN_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    use_gt_degradation: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    shave: usize,
    /// Full-range BT.601 luma instead of studio swing.
    #[arg(long)]
    full_range_y: bool,
    /// Training manifest: θ-mean baseline and calibration data.
    #[arg(long)]
    train_dataset: Option<PathBuf>,
    /// Fine-tune the tails for the `--iters` count first.
    #[arg(long, requires = "train_dataset")]
    calibrate_steps: Option<u64>,
    #[arg(long, env = "DAN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    triptych_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kernel_pgm: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, env = "DAN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: invalid JSON at line {} column {}: {e}", path.display(), e.line(), e.column())))
}

fn parse_preset(name: &str) -> Result<DegradationPreset> {
    name.parse().map_err(|_| usage(format!("--preset: unknown preset `{name}` (blurry_x2, blurry_x4, real_x2, real_x4)")))
}

fn cmd_kernel(a: KernelArgs) -> Result<()> {
    let spec = match a.kind {
        KindArg::Gaussian => BlurKernelSpec::gaussian(a.sigma_x, a.sigma_y, a.theta, a.beta, a.size),
        KindArg::Plateau => BlurKernelSpec::plateau(a.sigma_x, a.sigma_y, a.theta, a.beta, a.size),
        KindArg::Sinc => BlurKernelSpec::sinc(a.omega_c, a.size),
    }
    .map_err(|e| usage(e.to_string()))?;
    let k = kernel_from_spec(&spec, a.noise, true, &mut rng_from_seed(a.seed)).map_err(|e| usage(e.to_string()))?;
    let (mxx, myy, mxy) = k.second_moments();
    println!("kind {} size {}", spec.kind, k.size());
    println!("sum {:.6}", k.sum());
    println!("moments xx {mxx:.6} yy {myy:.6} xy {mxy:.6}");
    if let Some(out) = a.out {
        write_kernel_text(out.with_extension("txt"), &k)?;
        write_kernel_pgm(out.with_extension("pgm"), &k)?;
    }
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EmittedTheta {
    #[serde(flatten)]
    record: DegradationRecord,
    #[serde(default)]
    seed: Option<u64>,
}

fn cmd_degrade(a: DegradeArgs) -> Result<()> {
    let hr = read_pnm(&a.input)?;
    let (record, seed) = match (&a.preset, &a.theta_json) {
        (Some(name), _) => {
            let preset = parse_preset(name)?;
            if let Some(s) = a.scale {
                if s != preset.scale() {
                    bail!(usage(format!("--scale {s} disagrees with preset {name}")));
                }
            }
            let seed = a.seed.unwrap_or(0);
            let params = sample_degradation(preset, &mut rng_from_seed(derive_seed(seed, 0)));
            let noise = if preset.is_blurry() { BLURRY_KERNEL_NOISE } else { 0.0 };
            (DegradationRecord::new(params, noise)?, seed)
        }
        (None, Some(path)) => {
            let emitted: EmittedTheta = serde_json::from_value(read_json(path)?)
                .map_err(|e| usage(format!("{}: not a degradation record: {e}", path.display())))?;
            let mut params = emitted.record.params;
            if let Some(s) = a.scale {
                params.target_sr_scale = s;
            }
            params.validate().map_err(|e| usage(e.to_string()))?;
            let seed = a.seed.or(emitted.seed).unwrap_or(0);
            (DegradationRecord::new(params, emitted.record.kernel_noise)?, seed)
        }
        (None, None) => bail!(usage("one of --preset or --theta-json is required")),
    };
    let s = record.params.target_sr_scale as usize;
    let hr = hr.crop_to_multiple(s)?.quantized();
    let lr = replay_lr(&hr, &record.params, record.kernel_noise, seed)?;
    write_pnm(&a.out, &lr)?;
    println!("{}x{} -> {}x{}", hr.height(), hr.width(), lr.height(), lr.width());
    if let Some(path) = a.emit_theta {
        let text = serde_json::to_string_pretty(&EmittedTheta { record, seed: Some(seed) })?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_hr_dir(dir: &Path) -> Result<Vec<dansr::Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(usage(format!("--hr-dir {} has no PPM/PGM files", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let im = read_pnm(p)?;
            Ok(if im.channels() == 1 {
                dansr::Image::from_fn(3, im.height(), im.width(), |_, y, x| im.get(0, y, x))
            } else {
                im
            })
        })
        .collect()
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let preset = parse_preset(&a.preset)?;
    let mut hr = match &a.hr_dir {
        Some(dir) => read_hr_dir(dir)?,
        None => synth_hr_images(a.n.unwrap_or(200), a.size, derive_seed(a.seed, 0xd5)),
    };
    if let Some(n) = a.n {
        hr.truncate(n);
    }
    let m = make_dataset(&hr, preset, a.seed, &a.out_dir, a.force)?;
    println!("{} pairs, preset {}, manifest {}", m.entries.len(), m.preset, a.out_dir.join("manifest.json").display());
    Ok(())
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn effective_train_config(a: &TrainArgs, scale: u32) -> Result<(DanConfig, TrainConfig)> {
    let (dan, tr) = if a.paper {
        (DanConfig::paper(scale), TrainConfig::paper())
    } else {
        (DanConfig::desk(scale), TrainConfig::desk())
    };
    let mut v = serde_json::json!({ "dan": dan, "train": tr });
    if let Some(path) = &a.config {
        let file = read_json(path)?;
        if !file.is_object() {
            bail!(usage(format!("{}: expected an object with `dan` and/or `train`", path.display())));
        }
        merge(&mut v, &file);
    }
    let bad = |e: serde_json::Error| usage(format!("config: {e}"));
    let mut dan: DanConfig = serde_json::from_value(v["dan"].clone()).map_err(bad)?;
    let mut tr: TrainConfig = serde_json::from_value(v["train"].clone()).map_err(bad)?;
    dan.sr_scale = scale;
    if let Some(t) = a.iterations {
        dan.iterations = t;
    }
    if let Some(c) = a.channels {
        dan.feature_channels = c;
    }
    if let Some(b) = a.blocks {
        dan.restorer_blocks = b;
    }
    if let Some(s) = a.steps {
        tr.total_steps = s;
    }
    if let Some(b) = a.batch {
        tr.batch = b;
    }
    if let Some(p) = a.lr_patch {
        tr.lr_patch = p;
    }
    if let Some(lr) = a.lr {
        tr.lr0 = lr;
    }
    if let Some(h) = a.halve_every {
        tr.halve_every = h;
    }
    if let Some(w) = a.theta_weight {
        tr.theta_loss_weight = w;
    }
    if let Some(v) = a.val_every {
        tr.val_every = v;
    }
    if let Some(s) = a.seed {
        tr.seed = s;
    }
    tr.augmentation |= a.augment;
    dan.validate().map_err(|e| usage(e.to_string()))?;
    tr.validate().map_err(|e| usage(e.to_string()))?;
    Ok((dan, tr))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let val = a.val_dataset.as_ref().map(Dataset::load).transpose()?;
    let (dan_cfg, mut cfg) = effective_train_config(&a, data.scale() as u32)?;
    let mut resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        if a.config.is_none() && !a.paper && !a.desk {
            if let Some(t) = &ck.train {
                cfg = t.clone();
            }
        }
        info!("resuming from step {}", ck.step);
    }
    info!("dan config {}", serde_json::to_string(&dan_cfg)?);
    info!("train config {}", serde_json::to_string(&cfg)?);
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let end = a.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let chunk = a.save_every.unwrap_or(u64::MAX).max(1);
    let progress = |r: &dansr::train::LogRow| {
        if (r.step + 1).is_multiple_of(100) || r.val_psnr.is_some() {
            let val = r.val_psnr.map(|v| format!(" val_psnr {v:.3}")).unwrap_or_default();
            info!("step {} l1 {:.5} l2 {:.5} lr {:.2e}{val}", r.step + 1, r.loss_l1, r.loss_l2, r.lr);
        }
    };
    let mut step = resume.as_ref().map_or(0, |c| c.step);
    loop {
        let stop = step.saturating_add(chunk).min(end);
        let outcome = train(
            &dan_cfg,
            &cfg,
            &data,
            TrainOptions {
                validation: val.as_ref(),
                log_path: Some(&log_path),
                resume: resume.take(),
                stop_at: Some(stop),
                on_row: Some(&progress),
            },
        )?;
        outcome.checkpoint.save(&a.out)?;
        step = outcome.checkpoint.step;
        if step >= end {
            break;
        }
        resume = Some(outcome.checkpoint);
    }
    println!("trained to step {step}; checkpoint {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    if ck.dan.sr_scale as usize != data.scale() {
        bail!(usage(format!("checkpoint scale {} but dataset scale {}", ck.dan.sr_scale, data.scale())));
    }
    let train_data = a.train_dataset.as_ref().map(Dataset::load).transpose()?;
    let mut store = ck.params.clone();
    if let Some(steps) = a.calibrate_steps {
        let k = a.iters.unwrap_or(ck.dan.iterations);
        let cal = CalibrationConfig {
            steps,
            seed: a.seed,
            ..CalibrationConfig::desk()
        };
        info!("calibrating tails for {k} iterations ({steps} steps)");
        store = calibrate_tails(&ck.dan, &store, train_data.as_ref().expect("required by clap"), k, &cal)?;
    }
    let opts = EvalOptions {
        use_gt_degradation: a.use_gt_degradation,
        iterations: a.iters,
        shave: a.shave,
        y_convention: if a.full_range_y { YConvention::FullRange } else { YConvention::Studio },
        theta_baseline: train_data.as_ref().map(theta_mean),
        triptych_dir: a.triptych_dir.clone(),
    };
    let report = evaluate(&ck.dan, &store, &data, &opts)?;
    for (name, agg) in &report.aggregates {
        println!("{name:<20} mean {:>12.6} std {:>10.6}", agg.mean, agg.std);
    }
    if let Some(path) = &a.report {
        std::fs::write(path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct Estimate {
    #[serde(flatten)]
    record: DegradationRecord,
    raw_theta: Vec<f64>,
    repairs: Vec<String>,
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let lr = read_pnm(&a.input)?;
    let opts = ForwardOptions {
        iterations: a.iters,
        decode_each_iteration: false,
    };
    let out = infer(&ck.dan, &ck.params, &lr, None, &opts)?;
    let raw: Vec<f64> = out.theta.iter().map(|&v| v as f64).collect();
    debug_assert_eq!(raw.len(), THETA_DIM);
    let decoded = decode_theta(&raw, ck.dan.sr_scale)?;
    let record = DegradationRecord::new(decoded.params, 0.0)?;
    if let Some(path) = &a.kernel_pgm {
        let k = kernel_from_spec(&record.params.stage1.blur, 0.0, false, &mut rng_from_seed(0))?;
        println!("kernel {:?} size {} sum {:.6}", record.params.stage1.blur.kind, k.size(), k.sum());
        write_kernel_pgm(path, &k)?;
    }
    let est = Estimate {
        record,
        raw_theta: raw,
        repairs: decoded.repairs,
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&est)? + "\n")
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<bool> {
    let results = selfcheck::run(&SelfCheckOptions {
        inject_fault: a.inject_fault,
        seed: a.seed,
    });
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        let detail = r.detail.as_deref().map(|d| format!("  ({d})")).unwrap_or_default();
        println!(
            "{} {:<36} max_error {:.3e} tol {:.1e}{detail}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.tolerance
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match cli.command {
        Command::Kernel(a) => cmd_kernel(a)?,
        Command::Degrade(a) => cmd_degrade(a)?,
        Command::Dataset(a) => cmd_dataset(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Estimate(a) => cmd_estimate(a)?,
        Command::Selfcheck(a) => return cmd_selfcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
