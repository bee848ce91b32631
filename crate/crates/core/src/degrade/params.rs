//! Degradation parameters, presets and the fixed-length vector codec.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::jpeg::JpegSpec;
use super::noise::NoiseSpec;
use super::resize::{ResizeMode, ResizeSpec};
use crate::error::{Error, Result};
use crate::kernels::{sample_kernel_spec, BlurKernelSpec, KernelKind, KernelPreset};

/// Slots per stage: blur 8, resize 4, noise 4, jpeg 2.
pub const STAGE_DIM: usize = 18;
pub const THETA_DIM: usize = 2 * STAGE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub blur: BlurKernelSpec,
    pub resize: ResizeSpec,
    pub noise: NoiseSpec,
    pub jpeg: JpegSpec,
}

impl StageParams {
    /// The no-op stage.
    pub fn identity() -> Self {
        StageParams {
            blur: BlurKernelSpec::identity(),
            resize: ResizeSpec::identity(),
            noise: NoiseSpec::none(),
            jpeg: JpegSpec::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blur.validate()?;
        self.resize.output_dims(1000, 1000)?;
        self.noise.validate()?;
        self.jpeg.validate()
    }

    pub fn is_identity(&self) -> bool {
        self.blur.is_identity() && self.resize.scale == 1.0 && self.noise.is_noop() && !self.jpeg.j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub stage1: StageParams,
    pub stage2: StageParams,
    pub target_sr_scale: u32,
}

impl DegradationParams {
    pub fn null(target_sr_scale: u32) -> Self {
        DegradationParams {
            stage1: StageParams::identity(),
            stage2: StageParams::identity(),
            target_sr_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.target_sr_scale, 2 | 4) {
            return Err(Error::domain("target_sr_scale", format!("{} not in {{2, 4}}", self.target_sr_scale)));
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }

    /// True when only the first-stage blur is active: such degradations are
    /// realized as blur followed by s-fold decimation.
    pub fn is_blur_only(&self) -> bool {
        let s1 = &self.stage1;
        s1.resize.scale == 1.0 && s1.noise.is_noop() && !s1.jpeg.j && self.stage2.is_identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationPreset {
    BlurryX2,
    BlurryX4,
    RealX2,
    RealX4,
}

impl DegradationPreset {
    pub fn scale(self) -> u32 {
        match self {
            DegradationPreset::BlurryX2 | DegradationPreset::RealX2 => 2,
            DegradationPreset::BlurryX4 | DegradationPreset::RealX4 => 4,
        }
    }

    pub fn is_blurry(self) -> bool {
        matches!(self, DegradationPreset::BlurryX2 | DegradationPreset::BlurryX4)
    }

    pub fn name(self) -> &'static str {
        match self {
            DegradationPreset::BlurryX2 => "blurry_x2",
            DegradationPreset::BlurryX4 => "blurry_x4",
            DegradationPreset::RealX2 => "real_x2",
            DegradationPreset::RealX4 => "real_x4",
        }
    }
}

impl FromStr for DegradationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blurry_x2" => Ok(DegradationPreset::BlurryX2),
            "blurry_x4" => Ok(DegradationPreset::BlurryX4),
            "real_x2" => Ok(DegradationPreset::RealX2),
            "real_x4" => Ok(DegradationPreset::RealX4),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for DegradationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Multiplicative kernel noise used by the blurry presets.
pub const BLURRY_KERNEL_NOISE: f64 = 0.25;

struct RealStageRanges {
    kernel: KernelPreset,
    skip_blur_prob: f64,
    down: (f64, f64),
    up: (f64, f64),
    sigma_g: (f64, f64),
    lambda: (f64, f64),
}

const REAL_STAGE1: RealStageRanges = RealStageRanges {
    kernel: KernelPreset::RealStage1,
    skip_blur_prob: 0.0,
    down: (0.5, 1.0),
    up: (1.0, 1.5),
    sigma_g: (1.0 / 255.0, 30.0 / 255.0),
    lambda: (0.0005, 0.01),
};

const REAL_STAGE2: RealStageRanges = RealStageRanges {
    kernel: KernelPreset::RealStage2,
    skip_blur_prob: 0.2,
    down: (0.7, 1.0),
    up: (1.0, 1.2),
    sigma_g: (1.0 / 255.0, 25.0 / 255.0),
    lambda: (0.0005, 0.008),
};

fn sample_real_stage<R: Rng + ?Sized>(r: &RealStageRanges, rng: &mut R) -> StageParams {
    let blur = if rng.random::<f64>() < r.skip_blur_prob {
        BlurKernelSpec::identity()
    } else {
        sample_kernel_spec(r.kernel, rng)
    };
    let mode = ResizeMode::ALL[rng.random_range(0..3)];
    let u: f64 = rng.random();
    let scale = if u < 0.2 {
        rng.random_range(r.up.0..=r.up.1)
    } else if u < 0.9 {
        rng.random_range(r.down.0..r.down.1)
    } else {
        1.0
    };
    let gaussian = rng.random::<f64>() < 0.5;
    let rgb = rng.random::<f64>() >= 0.4;
    let noise = if gaussian {
        NoiseSpec {
            gaussian,
            rgb,
            sigma_g: rng.random_range(r.sigma_g.0..=r.sigma_g.1),
            lambda: 0.0,
        }
    } else {
        NoiseSpec {
            gaussian,
            rgb,
            sigma_g: 0.0,
            lambda: rng.random_range(r.lambda.0..=r.lambda.1),
        }
    };
    let jpeg = JpegSpec {
        j: true,
        q: rng.random_range(30..=95),
    };
    StageParams {
        blur,
        resize: ResizeSpec { mode, scale },
        noise,
        jpeg,
    }
}

pub fn sample_degradation<R: Rng + ?Sized>(preset: DegradationPreset, rng: &mut R) -> DegradationParams {
    let target_sr_scale = preset.scale();
    match preset {
        DegradationPreset::BlurryX2 | DegradationPreset::BlurryX4 => {
            let kp = if target_sr_scale == 2 {
                KernelPreset::BlurryX2
            } else {
                KernelPreset::BlurryX4
            };
            let mut stage1 = StageParams::identity();
            stage1.blur = sample_kernel_spec(kp, rng);
            DegradationParams {
                stage1,
                stage2: StageParams::identity(),
                target_sr_scale,
            }
        }
        DegradationPreset::RealX2 | DegradationPreset::RealX4 => DegradationParams {
            stage1: sample_real_stage(&REAL_STAGE1, rng),
            stage2: sample_real_stage(&REAL_STAGE2, rng),
            target_sr_scale,
        },
    }
}

// ---------------------------------------------------------------------------
// Vector codec

/// Affine normalization range of one continuous slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotRange {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaTable {
    pub version: u32,
    pub kernel_size: SlotRange,
    pub sigma: SlotRange,
    pub theta: SlotRange,
    pub beta: SlotRange,
    pub omega_c: SlotRange,
    pub scale: SlotRange,
    pub sigma_g: SlotRange,
    pub lambda: SlotRange,
    pub quality: SlotRange,
}

pub const THETA_TABLE_V1: ThetaTable = ThetaTable {
    version: 1,
    kernel_size: SlotRange { name: "k_s", lo: 1.0, hi: 31.0 },
    sigma: SlotRange { name: "sigma", lo: 0.0, hi: 5.0 },
    theta: SlotRange { name: "theta", lo: -PI, hi: PI },
    beta: SlotRange { name: "beta", lo: 0.0, hi: 4.0 },
    omega_c: SlotRange { name: "omega_c", lo: 0.0, hi: PI },
    scale: SlotRange { name: "s", lo: 0.0, hi: 2.0 },
    sigma_g: SlotRange { name: "sigma_g", lo: 0.0, hi: 0.2 },
    lambda: SlotRange { name: "lambda", lo: 0.0, hi: 0.02 },
    quality: SlotRange { name: "q", lo: 1.0, hi: 100.0 },
};

impl ThetaTable {
    /// Hex SHA-256 of the table's JSON form; manifests and checkpoints pin it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("table serializes");
        hex(&Sha256::digest(&json))
    }
}

pub fn theta_table_hash() -> &'static str {
    static HASH: OnceLock<String> = OnceLock::new();
    HASH.get_or_init(|| THETA_TABLE_V1.hash())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl SlotRange {
    fn encode(&self, v: f64) -> Result<f64> {
        const SLACK: f64 = 1e-9;
        let span = self.hi - self.lo;
        if !v.is_finite() || v < self.lo - SLACK * span || v > self.hi + SLACK * span {
            return Err(Error::domain(
                self.name,
                format!("{v} outside codec range [{}, {}]", self.lo, self.hi),
            ));
        }
        Ok(((v - self.lo) / span).clamp(0.0, 1.0))
    }

    fn decode(&self, u: f64) -> f64 {
        let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 };
        self.lo + u * (self.hi - self.lo)
    }
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn encode_stage(s: &StageParams, t: &ThetaTable, out: &mut Vec<f64>) -> Result<()> {
    s.validate()?;
    let b = &s.blur;
    out.push(bit(b.kind == KernelKind::Gaussian));
    out.push(bit(b.kind == KernelKind::Sinc));
    out.push(t.kernel_size.encode(b.size as f64)?);
    out.push(t.sigma.encode(b.sigma_x)?);
    out.push(t.sigma.encode(b.sigma_y)?);
    out.push(t.theta.encode(b.theta)?);
    out.push(t.beta.encode(b.beta)?);
    out.push(t.omega_c.encode(b.omega_c)?);
    for mode in ResizeMode::ALL {
        out.push(bit(s.resize.mode == mode));
    }
    out.push(t.scale.encode(s.resize.scale)?);
    out.push(bit(s.noise.gaussian));
    out.push(bit(s.noise.rgb));
    out.push(t.sigma_g.encode(s.noise.sigma_g)?);
    out.push(t.lambda.encode(s.noise.lambda)?);
    out.push(bit(s.jpeg.j));
    out.push(t.quality.encode(s.jpeg.q as f64)?);
    Ok(())
}

pub fn encode_theta(p: &DegradationParams) -> Result<Vec<f64>> {
    let t = &THETA_TABLE_V1;
    let mut v = Vec::with_capacity(THETA_DIM);
    encode_stage(&p.stage1, t, &mut v)?;
    encode_stage(&p.stage2, t, &mut v)?;
    debug_assert_eq!(v.len(), THETA_DIM);
    Ok(v)
}

/// Encoded null degradation (both stages identity).
pub fn null_theta() -> Vec<f64> {
    encode_theta(&DegradationParams::null(2)).expect("null params encode")
}

/// Result of decoding a raw vector, with every invariant repair applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTheta {
    pub params: DegradationParams,
    pub repairs: Vec<String>,
}

const MIN_SIGMA: f64 = 1e-3;
const MIN_BETA: f64 = 1e-3;
const MIN_OMEGA: f64 = 1e-3;
const MIN_SCALE: f64 = 0.05;

fn decode_stage(v: &[f64], t: &ThetaTable, stage: usize, repairs: &mut Vec<String>) -> StageParams {
    let mut note = |msg: String| repairs.push(format!("stage{stage}: {msg}"));
    let on = |x: f64| x >= 0.5;
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() || !(0.0..=1.0).contains(x) {
            note(format!("slot {i} value {x} clamped"));
        }
    }
    let kind = if on(v[1]) && v[1] >= v[0] {
        KernelKind::Sinc
    } else if on(v[0]) {
        KernelKind::Gaussian
    } else {
        KernelKind::Plateau
    };
    let raw_size = t.kernel_size.decode(v[2]);
    let size = (2.0 * ((raw_size - 1.0) / 2.0).round() + 1.0) as usize;
    let mut blur = BlurKernelSpec {
        kind,
        size,
        sigma_x: t.sigma.decode(v[3]),
        sigma_y: t.sigma.decode(v[4]),
        theta: t.theta.decode(v[5]),
        beta: t.beta.decode(v[6]),
        omega_c: t.omega_c.decode(v[7]),
    };
    if size < 3 {
        if kind != KernelKind::Gaussian || blur.sigma_x != 0.0 || blur.sigma_y != 0.0 {
            note(format!("kernel size {size} treated as identity blur"));
        }
        blur = BlurKernelSpec::identity();
    } else if kind == KernelKind::Sinc {
        if blur.sigma_x != 0.0 || blur.sigma_y != 0.0 || blur.theta != 0.0 || blur.beta != 0.0 {
            note("sinc kernel: gaussian fields zeroed".into());
        }
        blur.sigma_x = 0.0;
        blur.sigma_y = 0.0;
        blur.theta = 0.0;
        blur.beta = 0.0;
        if blur.omega_c < MIN_OMEGA {
            note(format!("omega_c {} raised to {MIN_OMEGA}", blur.omega_c));
            blur.omega_c = MIN_OMEGA;
        }
    } else {
        if blur.omega_c != 0.0 {
            note(format!("{kind} kernel: omega_c zeroed"));
            blur.omega_c = 0.0;
        }
        for (name, field, min) in [
            ("sigma_x", &mut blur.sigma_x, MIN_SIGMA),
            ("sigma_y", &mut blur.sigma_y, MIN_SIGMA),
            ("beta", &mut blur.beta, MIN_BETA),
        ] {
            if *field < min {
                note(format!("{name} {field} raised to {min}"));
                *field = min;
            }
        }
    }

    let mode_idx = (0..3)
        .max_by(|&a, &b| v[8 + a].partial_cmp(&v[8 + b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
        .unwrap_or(0);
    let mut scale = t.scale.decode(v[11]);
    if scale < MIN_SCALE {
        note(format!("scale {scale} raised to {MIN_SCALE}"));
        scale = MIN_SCALE;
    }
    let resize = ResizeSpec {
        mode: ResizeMode::ALL[mode_idx],
        scale,
    };

    let gaussian = on(v[12]);
    let mut noise = NoiseSpec {
        gaussian,
        rgb: on(v[13]),
        sigma_g: t.sigma_g.decode(v[14]),
        lambda: t.lambda.decode(v[15]),
    };
    if gaussian && noise.lambda != 0.0 {
        note("gaussian noise: lambda zeroed".into());
        noise.lambda = 0.0;
    }
    if !gaussian && noise.sigma_g != 0.0 {
        note("poisson noise: sigma_g zeroed".into());
        noise.sigma_g = 0.0;
    }

    let j = on(v[16]);
    let q_raw = t.quality.decode(v[17]).round() as u32;
    let q = if j {
        if q_raw >= 100 {
            note("compressed stage: q lowered to 99".into());
        }
        q_raw.clamp(1, 99)
    } else {
        if q_raw != 100 {
            note("uncompressed stage: q set to 100".into());
        }
        100
    };
    StageParams {
        blur,
        resize,
        noise,
        jpeg: JpegSpec { j, q },
    }
}

/// Total inverse of [`encode_theta`]: clamps, thresholds discrete slots at
/// 0.5 (argmax for the resize one-hot) and repairs invariants.
pub fn decode_theta(v: &[f64], target_sr_scale: u32) -> Result<DecodedTheta> {
    if v.len() != THETA_DIM {
        return Err(Error::Shape(format!("theta has {} entries, expected {THETA_DIM}", v.len())));
    }
    let t = &THETA_TABLE_V1;
    let mut repairs = Vec::new();
    let stage1 = decode_stage(&v[..STAGE_DIM], t, 1, &mut repairs);
    let stage2 = decode_stage(&v[STAGE_DIM..], t, 2, &mut repairs);
    Ok(DecodedTheta {
        params: DegradationParams {
            stage1,
            stage2,
            target_sr_scale,
        },
        repairs,
    })
}

/// JSON record of a degradation: structured fields plus the raw vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub params: DegradationParams,
    pub theta: Vec<f64>,
    pub theta_table: String,
    #[serde(default)]
    pub kernel_noise: f64,
}

impl DegradationRecord {
    pub fn new(params: DegradationParams, kernel_noise: f64) -> Result<Self> {
        Ok(DegradationRecord {
            theta: encode_theta(&params)?,
            params,
            theta_table: theta_table_hash().to_string(),
            kernel_noise,
        })
    }
}
