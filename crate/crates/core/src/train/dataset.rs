use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::degrade::{
    decode_theta, encode_theta, sample_degradation, synthesize_lr, theta_table_hash, DegradationParams,
    DegradationPreset, BLURRY_KERNEL_NOISE, THETA_DIM,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{read_pnm, write_pnm};
use crate::rng::{derive_seed, rng_from_seed};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub hr_path: String,
    pub lr_path: String,
    pub theta: Vec<f64>,
    pub params: DegradationParams,
    pub seed: u64,
}

/// Seed-addressed record of HR/LR pairs. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub preset: String,
    pub scale: u32,
    pub dataset_seed: u64,
    pub kernel_noise: f64,
    pub theta_table: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn preset(&self) -> Result<DegradationPreset> {
        self.preset.parse()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", self.version)));
        }
        if self.theta_table != theta_table_hash() {
            return Err(Error::Manifest("theta table hash does not match this build's codec".into()));
        }
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {}", e.id)));
            }
            if e.theta.len() != THETA_DIM {
                return Err(Error::Manifest(format!("{}: theta has {} entries", e.id, e.theta.len())));
            }
            decode_theta(&e.theta, self.scale)?;
        }
        Ok(())
    }

    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn stream_seeds(seed: u64) -> (u64, u64) {
    (derive_seed(seed, 0), derive_seed(seed, 1))
}

/// Regenerates an entry's LR image from its HR image, parameters and seed.
pub fn replay_lr(hr: &Image, params: &DegradationParams, kernel_noise: f64, seed: u64) -> Result<Image> {
    let mut rng = rng_from_seed(stream_seeds(seed).1);
    Ok(synthesize_lr(hr, params, kernel_noise, &mut rng)?.quantized())
}

/// Samples a degradation for every HR image and writes `hr/NNNN.ppm`,
/// `lr/NNNN.ppm` and `manifest.json` under `out_dir`. HR images are
/// center-cropped to a multiple of the scale and quantized to 8 bits first.
pub fn make_dataset(
    hr_images: &[Image],
    preset: DegradationPreset,
    seed: u64,
    out_dir: impl AsRef<Path>,
    force: bool,
) -> Result<DatasetManifest> {
    let out = out_dir.as_ref();
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Manifest(format!(
                "{} already exists and is not empty (use force to overwrite)",
                out.display()
            )));
        }
    }
    for sub in ["hr", "lr"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let scale = preset.scale();
    let kernel_noise = if preset.is_blurry() { BLURRY_KERNEL_NOISE } else { 0.0 };
    let width = hr_images.len().max(1).to_string().len().max(4);
    let entries = hr_images
        .par_iter()
        .enumerate()
        .map(|(i, hr)| -> Result<ManifestEntry> {
            let seed = derive_seed(seed, i as u64);
            let hr = hr.crop_to_multiple(scale as usize)?.quantized();
            let params = sample_degradation(preset, &mut rng_from_seed(stream_seeds(seed).0));
            let lr = replay_lr(&hr, &params, kernel_noise, seed)?;
            let id = format!("{i:0width$}");
            let (hr_path, lr_path) = (format!("hr/{id}.ppm"), format!("lr/{id}.ppm"));
            write_pnm(out.join(&hr_path), &hr)?;
            write_pnm(out.join(&lr_path), &lr)?;
            Ok(ManifestEntry {
                id,
                hr_path,
                lr_path,
                theta: encode_theta(&params)?,
                params,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        preset: preset.name().into(),
        scale,
        dataset_seed: seed,
        kernel_noise,
        theta_table: theta_table_hash().into(),
        entries,
        root: out.to_path_buf(),
    };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}

/// A manifest with its images in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub hr: Vec<Image>,
    pub lr: Vec<Image>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(DatasetManifest::load(manifest_path)?)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let pairs = manifest
            .entries
            .par_iter()
            .map(|e| -> Result<(Image, Image)> {
                let hr = read_pnm(manifest.path_of(&e.hr_path))?;
                let lr = read_pnm(manifest.path_of(&e.lr_path))?;
                let s = manifest.scale as usize;
                if hr.height() != lr.height() * s || hr.width() != lr.width() * s || hr.channels() != 3 {
                    return Err(Error::Manifest(format!(
                        "{}: HR {:?} and LR {:?} do not match scale {s}",
                        e.id,
                        hr.dims(),
                        lr.dims()
                    )));
                }
                Ok((hr, lr))
            })
            .collect::<Result<Vec<_>>>()?;
        let (hr, lr) = pairs.into_iter().unzip();
        Ok(Dataset { manifest, hr, lr })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.manifest.scale as usize
    }
}

/// Where one batch element was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOrigin {
    pub index: usize,
    pub lr_y: usize,
    pub lr_x: usize,
    pub hr_y: usize,
    pub hr_x: usize,
    /// Bits: 1 horizontal flip, 2 vertical flip, 4 transpose.
    pub transform: u8,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub theta: Tensor<f32>,
    pub origins: Vec<CropOrigin>,
}

fn augment(im: &Image, t: u8) -> Image {
    let mut out = im.clone();
    if t & 1 != 0 {
        out = out.flip_horizontal();
    }
    if t & 2 != 0 {
        out = out.flip_vertical();
    }
    if t & 4 != 0 {
        out = out.transpose();
    }
    out
}

/// Degradation parameters as seen through an augmentation transform: flips
/// negate the kernel angle, a transpose reflects it about the diagonal.
pub fn transform_params(params: &DegradationParams, t: u8) -> DegradationParams {
    let mut p = *params;
    for stage in [&mut p.stage1, &mut p.stage2] {
        let b = &mut stage.blur;
        if b.kind == crate::kernels::KernelKind::Sinc || b.is_identity() {
            continue;
        }
        if t & 1 != 0 {
            b.theta = -b.theta;
        }
        if t & 2 != 0 {
            b.theta = -b.theta;
        }
        if t & 4 != 0 {
            b.theta = std::f64::consts::FRAC_PI_2 - b.theta;
        }
        *b = (*b).canonical();
    }
    p
}

/// Aligned random crops: the HR crop starts at `scale` times the LR offset.
/// With augmentation the same flip/transpose is applied to both crops and
/// the θ target is re-encoded accordingly.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &Dataset,
    batch: usize,
    lr_patch: usize,
    augmentation: bool,
    rng: &mut R,
) -> Result<Batch> {
    if data.is_empty() || batch == 0 {
        return Err(Error::Shape("empty dataset or batch".into()));
    }
    let s = data.scale();
    let mut lr_crops = Vec::with_capacity(batch);
    let mut hr_crops = Vec::with_capacity(batch);
    let mut theta = Vec::with_capacity(batch * THETA_DIM);
    let mut origins = Vec::with_capacity(batch);
    for _ in 0..batch {
        let index = rng.random_range(0..data.len());
        let lr = &data.lr[index];
        if lr.height() < lr_patch || lr.width() < lr_patch {
            return Err(Error::Shape(format!(
                "LR image {:?} smaller than patch {lr_patch}",
                lr.dims()
            )));
        }
        let lr_y = rng.random_range(0..=lr.height() - lr_patch);
        let lr_x = rng.random_range(0..=lr.width() - lr_patch);
        let transform = if augmentation { rng.random_range(0..8u8) } else { 0 };
        let o = CropOrigin {
            index,
            lr_y,
            lr_x,
            hr_y: s * lr_y,
            hr_x: s * lr_x,
            transform,
        };
        lr_crops.push(augment(&lr.crop(lr_y, lr_x, lr_patch, lr_patch)?, transform));
        hr_crops.push(augment(
            &data.hr[index].crop(o.hr_y, o.hr_x, lr_patch * s, lr_patch * s)?,
            transform,
        ));
        let entry = &data.manifest.entries[index];
        if transform == 0 {
            theta.extend(entry.theta.iter().map(|&v| v as f32));
        } else {
            theta.extend(encode_theta(&transform_params(&entry.params, transform))?.iter().map(|&v| v as f32));
        }
        origins.push(o);
    }
    let lr_refs: Vec<&Image> = lr_crops.iter().collect();
    let hr_refs: Vec<&Image> = hr_crops.iter().collect();
    Ok(Batch {
        lr: crate::dan::images_to_tensor(&lr_refs)?,
        hr: crate::dan::images_to_tensor(&hr_refs)?,
        theta: Tensor::new(&[batch, THETA_DIM], theta)?,
        origins,
    })
}
