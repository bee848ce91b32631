use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dansr::dan::{infer, DanConfig, ForwardOptions};
use dansr::degrade::{self, DegradationParams, DegradationPreset};
use dansr::kernels::{self, BlurKernelSpec, KernelKind, KernelMatrix};
use dansr::metrics::{self, EvalOptions};
use dansr::rng::{derive_seed, rng_from_seed};
use dansr::train::{self, Checkpoint, Dataset, TrainConfig, TrainOptions};

fn err(e: dansr::Error) -> PyErr {
    match e {
        dansr::Error::Io { .. } | dansr::Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Planar float image, values nominally in `[0, 1]`.
#[pyclass(name = "Image", module = "dansr_py", skip_from_py_object)]
#[derive(Clone)]
struct PyImage(dansr::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        dansr::Image::new(channels, height, width, data).map(PyImage).map_err(err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        dansr::io::read_pnm(path).map(PyImage).map_err(err)
    }

    /// Procedural textured test image.
    #[staticmethod]
    fn synthetic(size: usize, seed: u64) -> Self {
        PyImage(train::synth_hr_image(size, seed))
    }

    fn write(&self, path: &str) -> PyResult<()> {
        dansr::io::write_pnm(path, &self.0).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.0.dims()
    }

    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn get(&self, c: usize, y: usize, x: usize) -> PyResult<f32> {
        let (ch, h, w) = self.0.dims();
        if c >= ch || y >= h || x >= w {
            return Err(PyValueError::new_err(format!("({c}, {y}, {x}) outside {:?}", self.0.dims())));
        }
        Ok(self.0.get(c, y, x))
    }

    fn quantized(&self) -> Self {
        PyImage(self.0.quantized())
    }

    fn __repr__(&self) -> String {
        format!("Image{:?}", self.0.dims())
    }
}

#[pyclass(name = "KernelSpec", module = "dansr_py", skip_from_py_object)]
#[derive(Clone)]
struct PyKernelSpec(BlurKernelSpec);

#[pymethods]
impl PyKernelSpec {
    #[staticmethod]
    #[pyo3(signature = (sigma_x, sigma_y, theta=0.0, beta=1.0, size=21))]
    fn gaussian(sigma_x: f64, sigma_y: f64, theta: f64, beta: f64, size: usize) -> PyResult<Self> {
        BlurKernelSpec::gaussian(sigma_x, sigma_y, theta, beta, size).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (sigma_x, sigma_y, theta=0.0, beta=1.0, size=21))]
    fn plateau(sigma_x: f64, sigma_y: f64, theta: f64, beta: f64, size: usize) -> PyResult<Self> {
        BlurKernelSpec::plateau(sigma_x, sigma_y, theta, beta, size).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (omega_c, size=21))]
    fn sinc(omega_c: f64, size: usize) -> PyResult<Self> {
        BlurKernelSpec::sinc(omega_c, size).map(Self).map_err(err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.0.kind.to_string()
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.size
    }

    /// Normalized kernel; `noise` is the multiplicative weight jitter.
    #[pyo3(signature = (noise=0.0, seed=0))]
    fn synthesize(&self, noise: f64, seed: u64) -> PyResult<PyKernel> {
        kernels::kernel_from_spec(&self.0, noise, false, &mut rng_from_seed(seed)).map(PyKernel).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "Kernel", module = "dansr_py", skip_from_py_object)]
#[derive(Clone)]
struct PyKernel(KernelMatrix);

#[pymethods]
impl PyKernel {
    #[getter]
    fn size(&self) -> usize {
        self.0.size()
    }

    fn sum(&self) -> f64 {
        self.0.sum()
    }

    /// Weight at offset `(x, y)` from the center.
    fn at(&self, x: isize, y: isize) -> f64 {
        self.0.at(x, y)
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.weights().chunks(self.0.size()).map(<[f64]>::to_vec).collect()
    }

    fn __repr__(&self) -> String {
        format!("Kernel(size={}, sum={:.6})", self.0.size(), self.0.sum())
    }
}

/// Network weights with their configuration.
#[pyclass(name = "Model", module = "dansr_py")]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Checkpoint::load(path).map(PyModel).map_err(err)
    }

    /// Freshly initialized network; `config` is a DanConfig JSON object.
    #[staticmethod]
    #[pyo3(signature = (config=None, scale=2, seed=0))]
    fn init(config: Option<&str>, scale: u32, seed: u64) -> PyResult<Self> {
        let cfg = match config {
            Some(c) => serde_json::from_str(c).map_err(json_err)?,
            None => DanConfig::desk(scale),
        };
        let store = dansr::dan::init_params(&cfg, seed).map_err(err)?;
        Ok(PyModel(Checkpoint::new(cfg, None, store)))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step
    }

    #[getter]
    fn scale(&self) -> u32 {
        self.0.dan.sr_scale
    }

    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.dan).map_err(json_err)
    }

    fn weights_hash(&self) -> PyResult<String> {
        self.0.weights_hash().map_err(err)
    }

    /// Returns `(sr_image, theta_hat)`.
    #[pyo3(signature = (lr, gt_theta=None, iterations=None))]
    fn infer(&self, lr: &PyImage, gt_theta: Option<Vec<f32>>, iterations: Option<usize>) -> PyResult<(PyImage, Vec<f32>)> {
        let opts = ForwardOptions {
            iterations,
            decode_each_iteration: false,
        };
        let out = infer(&self.0.dan, &self.0.params, &lr.0, gt_theta.as_deref(), &opts).map_err(err)?;
        Ok((PyImage(out.sr), out.theta))
    }

    /// Evaluation report (JSON) on a dataset manifest.
    #[pyo3(signature = (manifest, use_gt_degradation=false, iterations=None, shave=0))]
    fn evaluate(&self, manifest: &str, use_gt_degradation: bool, iterations: Option<usize>, shave: usize) -> PyResult<String> {
        let data = Dataset::load(manifest).map_err(err)?;
        let opts = EvalOptions {
            use_gt_degradation,
            iterations,
            shave,
            ..Default::default()
        };
        metrics::evaluate(&self.0.dan, &self.0.params, &data, &opts).and_then(|r| r.to_json()).map_err(err)
    }
}

fn preset(name: &str) -> PyResult<DegradationPreset> {
    name.parse().map_err(err)
}

/// Samples degradation parameters from a preset; returns JSON.
#[pyfunction]
#[pyo3(signature = (preset_name, seed=0))]
fn sample_degradation(preset_name: &str, seed: u64) -> PyResult<String> {
    let p = degrade::sample_degradation(preset(preset_name)?, &mut rng_from_seed(derive_seed(seed, 0)));
    serde_json::to_string(&p).map_err(json_err)
}

/// Two-stage degradation of `hr` with JSON parameters.
#[pyfunction]
#[pyo3(signature = (hr, params, seed=0))]
fn degrade_image(hr: &PyImage, params: &str, seed: u64) -> PyResult<PyImage> {
    let p: DegradationParams = serde_json::from_str(params).map_err(json_err)?;
    p.validate().map_err(err)?;
    degrade::degrade_two_stage(&hr.0, &p, &mut rng_from_seed(seed)).map(PyImage).map_err(err)
}

/// `(hr ⊗ k)` keeping every `scale`-th pixel.
#[pyfunction]
fn degrade_blurry(hr: &PyImage, kernel: &PyKernel, scale: usize) -> PyResult<PyImage> {
    degrade::degrade_blurry(&hr.0, &kernel.0, scale).map(PyImage).map_err(err)
}

#[pyfunction]
fn jpeg_roundtrip(image: &PyImage, quality: u32) -> PyResult<PyImage> {
    degrade::jpeg_roundtrip(&image.0, quality).map(PyImage).map_err(err)
}

#[pyfunction]
fn encode_theta(params: &str) -> PyResult<Vec<f64>> {
    let p: DegradationParams = serde_json::from_str(params).map_err(json_err)?;
    degrade::encode_theta(&p).map_err(err)
}

/// Returns `(params_json, repairs)`.
#[pyfunction]
fn decode_theta(theta: Vec<f64>, scale: u32) -> PyResult<(String, Vec<String>)> {
    let d = degrade::decode_theta(&theta, scale).map_err(err)?;
    Ok((serde_json::to_string(&d.params).map_err(json_err)?, d.repairs))
}

#[pyfunction]
fn bessel_j1(x: f64) -> f64 {
    kernels::bessel_j1(x)
}

#[pyfunction]
#[pyo3(signature = (a, b, shave=0))]
fn psnr_y(a: &PyImage, b: &PyImage, shave: usize) -> PyResult<f64> {
    metrics::psnr_y(&a.0, &b.0, shave).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, shave=0))]
fn ssim_y(a: &PyImage, b: &PyImage, shave: usize) -> PyResult<f64> {
    metrics::ssim_y(&a.0, &b.0, shave).map_err(err)
}

#[pyfunction]
fn kernel_mse(k_hat: &PyKernel, k_gt: &PyKernel) -> f64 {
    metrics::kernel_mse(&k_hat.0, &k_gt.0)
}

/// Writes a dataset of procedural images; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (preset_name, n, out_dir, size=64, seed=0, force=false))]
fn make_dataset(preset_name: &str, n: usize, out_dir: &str, size: usize, seed: u64, force: bool) -> PyResult<String> {
    let images = train::synth_hr_images(n, size, derive_seed(seed, 0xd5));
    train::make_dataset(&images, preset(preset_name)?, seed, out_dir, force).map_err(err)?;
    Ok(std::path::Path::new(out_dir).join("manifest.json").to_string_lossy().into_owned())
}

/// Trains `model` on a manifest. `config` is a TrainConfig JSON object
/// (desk defaults otherwise). Returns the trained model.
#[pyfunction]
#[pyo3(signature = (model, manifest, config=None, steps=None))]
fn train_model(py: Python<'_>, model: &PyModel, manifest: &str, config: Option<&str>, steps: Option<u64>) -> PyResult<PyModel> {
    let data = Dataset::load(manifest).map_err(err)?;
    let mut cfg: TrainConfig = match config {
        Some(c) => serde_json::from_str(c).map_err(json_err)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = steps {
        cfg.total_steps = s;
    }
    let dan = model.0.dan.clone();
    let mut init = Checkpoint::new(dan.clone(), None, model.0.params.clone());
    init.step = 0;
    let out = py
        .detach(|| {
            train::train(
                &dan,
                &cfg,
                &data,
                TrainOptions {
                    resume: Some(init),
                    ..Default::default()
                },
            )
        })
        .map_err(err)?;
    Ok(PyModel(out.checkpoint))
}

/// Runs the built-in numerical checks; returns `(name, passed, max_error)`.
#[pyfunction]
fn selfcheck() -> Vec<(String, bool, f64)> {
    dansr::selfcheck::run(&Default::default())
        .into_iter()
        .map(|r| (r.name, r.passed, r.max_error))
        .collect()
}

#[pyfunction]
fn kernel_kinds() -> Vec<String> {
    [KernelKind::Gaussian, KernelKind::Plateau, KernelKind::Sinc].iter().map(|k| k.to_string()).collect()
}

#[pymodule]
fn dansr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("THETA_DIM", degrade::THETA_DIM)?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyKernelSpec>()?;
    m.add_class::<PyKernel>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sample_degradation, m)?)?;
    m.add_function(wrap_pyfunction!(degrade_image, m)?)?;
    m.add_function(wrap_pyfunction!(degrade_blurry, m)?)?;
    m.add_function(wrap_pyfunction!(jpeg_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(encode_theta, m)?)?;
    m.add_function(wrap_pyfunction!(decode_theta, m)?)?;
    m.add_function(wrap_pyfunction!(bessel_j1, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_y, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_y, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_mse, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_kinds, m)?)?;
    Ok(())
}
