//! Python bindings: volumes as numpy arrays, the synthetic generator, the
//! preprocessing chain, U-Net training/inference, and IOU evaluation.

use numpy::{IntoPyArray, PyReadonlyArray3, PyReadonlyArray5};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::{Path, PathBuf};

use voxseg::config::RunConfig;
use voxseg::data;
use voxseg::inference::{binarize, plan_tiles, predict_volume, BlendMode};
use voxseg::metrics::{confusion_counts, iou_report};
use voxseg::nn::Mode;
use voxseg::preprocess;
use voxseg::tensor::Tensor5;
use voxseg::unet;
use voxseg::volume::{self, VoxelData};

fn err(e: voxseg::Error) -> PyErr {
    match e {
        voxseg::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A 3D scalar grid (u8, u16 or f32) with slice-spacing metadata.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Volume {
    inner: volume::Volume,
}

#[pymethods]
impl Volume {
    /// Builds a volume from a 3D numpy array of dtype uint8, uint16 or float32.
    #[staticmethod]
    #[pyo3(signature = (array, spacing = 1.0))]
    fn from_numpy(array: &Bound<'_, PyAny>, spacing: f64) -> PyResult<Self> {
        let (dims, data) = if let Ok(a) = array.extract::<PyReadonlyArray3<u8>>() {
            let v = a.as_array();
            (v.dim(), VoxelData::U8(v.iter().cloned().collect()))
        } else if let Ok(a) = array.extract::<PyReadonlyArray3<u16>>() {
            let v = a.as_array();
            (v.dim(), VoxelData::U16(v.iter().cloned().collect()))
        } else if let Ok(a) = array.extract::<PyReadonlyArray3<f32>>() {
            let v = a.as_array();
            (v.dim(), VoxelData::F32(v.iter().cloned().collect()))
        } else {
            return Err(PyValueError::new_err(
                "expected a 3D numpy array of dtype uint8, uint16 or float32",
            ));
        };
        let inner = volume::Volume::new([dims.0, dims.1, dims.2], spacing, data).map_err(err)?;
        Ok(Self { inner })
    }

    /// The voxel grid as a numpy array of the native dtype.
    fn to_numpy<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let [d, h, w] = self.inner.dims;
        Ok(match &self.inner.data {
            VoxelData::U8(v) => ndarray::Array3::from_shape_vec((d, h, w), v.clone())
                .expect("length checked")
                .into_pyarray(py)
                .into_any(),
            VoxelData::U16(v) => ndarray::Array3::from_shape_vec((d, h, w), v.clone())
                .expect("length checked")
                .into_pyarray(py)
                .into_any(),
            VoxelData::F32(v) => ndarray::Array3::from_shape_vec((d, h, w), v.clone())
                .expect("length checked")
                .into_pyarray(py)
                .into_any(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: volume::load_volume(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_volume(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.dims;
        (d, h, w)
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        self.inner.dtype().as_str()
    }

    #[getter]
    fn spacing(&self) -> f64 {
        self.inner.spacing
    }

    /// Defect fraction of a binary mask.
    fn porosity(&self) -> PyResult<f64> {
        data::porosity(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Volume(dims={:?}, dtype={}, spacing={})",
            self.inner.dims,
            self.inner.dtype().as_str(),
            self.inner.spacing
        )
    }
}

/// One of the three 3D U-Net variants.
#[pyclass]
struct UNet {
    model: unet::UNetModel<f32>,
}

#[pymethods]
impl UNet {
    #[new]
    #[pyo3(signature = (variant = "conv_bn_relu", in_channels = 1, out_channels = 2,
                        levels = 4, base_channels = 32, gn_channels_per_group = 1, seed = 0))]
    fn new(
        variant: &str,
        in_channels: usize,
        out_channels: usize,
        levels: usize,
        base_channels: usize,
        gn_channels_per_group: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = unet::UNetConfig {
            in_channels,
            out_channels,
            levels,
            base_channels,
            variant: unet::VariantKind::parse(variant).map_err(err)?,
            gn_channels_per_group,
        };
        Ok(Self { model: unet::build_model(&cfg, seed).map_err(err)? })
    }

    /// Number of learnable scalars.
    fn count_params(&mut self) -> usize {
        self.model.count_params()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.model.config().variant.as_str()
    }

    /// Eval-mode forward pass on a (n, c, d, h, w) float32 array.
    fn forward<'py>(
        &mut self,
        py: Python<'py>,
        input: PyReadonlyArray5<'py, f32>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let a = input.as_array();
        let s = a.dim();
        let shape = [s.0, s.1, s.2, s.3, s.4];
        let t = Tensor5::from_vec(shape, a.iter().cloned().collect()).map_err(err)?;
        let logits = self.model.forward(&t, Mode::Eval).map_err(err)?;
        let [n, c, d, h, w] = logits.shape();
        Ok(ndarray::Array5::from_shape_vec((n, c, d, h, w), logits.into_data())
            .expect("length checked")
            .into_pyarray(py)
            .into_any())
    }

    /// Sliding-window defect-probability prediction over a whole volume.
    /// The volume is normalized internally (z-score).
    #[pyo3(signature = (vol, patch = (32, 32, 32), stride = (32, 32, 32), blend = "uniform"))]
    fn predict(
        &mut self,
        vol: &Volume,
        patch: (usize, usize, usize),
        stride: (usize, usize, usize),
        blend: &str,
    ) -> PyResult<Volume> {
        let normalized = data::normalize_zscore(&vol.inner);
        let plan = plan_tiles(vol.inner.dims, [patch.0, patch.1, patch.2], [stride.0, stride.1, stride.2])
            .map_err(err)?;
        let prob = predict_volume(&mut self.model, &normalized, &plan, BlendMode::parse(blend).map_err(err)?)
            .map_err(err)?;
        Ok(Volume { inner: prob.to_volume() })
    }

    fn save(&mut self, path: PathBuf) -> PyResult<()> {
        voxseg::checkpoint::save_checkpoint(&path, &mut self.model, None).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, _) = voxseg::checkpoint::load_checkpoint(&path).map_err(err)?;
        Ok(Self { model })
    }
}

/// Generates a synthetic labeled volume; returns `(image, mask)`.
#[pyfunction]
#[pyo3(signature = (dims = (64, 64, 64), target_porosity = 0.05, radius = (2.0, 5.0),
                    elongation = (1.0, 2.0), material_gray = 200, pore_gray = 60,
                    noise_sigma = 10.0, blur_sigma = 0.8, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synth_generate(
    dims: (usize, usize, usize),
    target_porosity: f64,
    radius: (f64, f64),
    elongation: (f64, f64),
    material_gray: u8,
    pore_gray: u8,
    noise_sigma: f64,
    blur_sigma: f64,
    seed: u64,
) -> PyResult<(Volume, Volume)> {
    let spec = data::SynthSpec {
        dims: [dims.0, dims.1, dims.2],
        target_porosity,
        radius_range: [radius.0, radius.1],
        elongation_range: [elongation.0, elongation.1],
        material_gray,
        pore_gray,
        noise_sigma,
        blur_sigma,
        spacing: 1.0,
        seed,
    };
    let lv = data::synth_generate(&spec).map_err(err)?;
    Ok((Volume { inner: lv.image }, Volume { inner: lv.mask }))
}

/// Per-volume z-score normalization to an f32 volume.
#[pyfunction]
fn normalize_zscore(v: &Volume) -> Volume {
    Volume { inner: data::normalize_zscore(&v.inner) }
}

/// Linear 16-to-8-bit window quantization.
#[pyfunction]
#[pyo3(signature = (v, lo = 0, hi = 65535))]
fn quantize_u16_to_u8(v: &Volume, lo: u16, hi: u16) -> PyResult<Volume> {
    Ok(Volume { inner: preprocess::quantize_u16_to_u8(&v.inner, lo, hi).map_err(err)? })
}

/// 3D median filter over the (2r+1)^3 neighborhood.
#[pyfunction]
#[pyo3(signature = (v, radius = 1))]
fn median3d(v: &Volume, radius: usize) -> PyResult<Volume> {
    Ok(Volume { inner: preprocess::median3d(&v.inner, radius).map_err(err)? })
}

/// Per-slice 2D non-local means denoising.
#[pyfunction]
#[pyo3(signature = (v, h = 10.0, patch_radius = 1, search_radius = 5))]
fn nlm_denoise(v: &Volume, h: f64, patch_radius: usize, search_radius: usize) -> PyResult<Volume> {
    Ok(Volume { inner: preprocess::nlm_denoise(&v.inner, h, patch_radius, search_radius).map_err(err)? })
}

/// Per-slice Bernsen local thresholding; returns a {0,1} defect mask.
#[pyfunction]
#[pyo3(signature = (v, window_radius = 15, c_min = 15, low_level = 128))]
fn bernsen_threshold(v: &Volume, window_radius: usize, c_min: u8, low_level: u8) -> PyResult<Volume> {
    let p = preprocess::BernsenParams { window_radius, c_min, low_level };
    Ok(Volume { inner: preprocess::bernsen_threshold(&v.inner, &p).map_err(err)? })
}

/// Thresholds a probability volume into a {0,1} mask.
#[pyfunction]
#[pyo3(signature = (prob, threshold = 0.5))]
fn binarize_prob(prob: &Volume, threshold: f64) -> PyResult<Volume> {
    let pv = voxseg::inference::ProbVolume::from_volume(&prob.inner).map_err(err)?;
    Ok(Volume { inner: binarize(&pv, threshold).map_err(err)? })
}

/// Confusion counts and IOU of a predicted mask against a reference mask.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: &Volume, truth: &Volume) -> PyResult<Bound<'py, PyDict>> {
    let c = confusion_counts(&pred.inner, &truth.inner).map_err(err)?;
    let r = iou_report(&c);
    let d = PyDict::new(py);
    d.set_item("tp", c.tp)?;
    d.set_item("fp", c.fp)?;
    d.set_item("fn", c.fn_)?;
    d.set_item("tn", c.tn)?;
    d.set_item("iou_defect", r.iou_defect)?;
    d.set_item("iou_background", r.iou_background)?;
    d.set_item("mean_iou", r.mean_iou)?;
    Ok(d)
}

/// The step-decay learning rate at an iteration.
#[pyfunction]
#[pyo3(signature = (iter, initial_lr = 2e-4, milestones = vec![600, 1000, 1400], gamma = 0.5))]
fn lr_at(iter: u64, initial_lr: f64, milestones: Vec<u64>, gamma: f64) -> f64 {
    voxseg::optim::lr_at(iter, &voxseg::optim::LrSchedule { initial_lr, milestones, gamma })
}

/// Runs the full training loop from a config file plus `key=value`
/// overrides; returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = Vec::new()))]
fn train<'py>(
    py: Python<'py>,
    config: Option<PathBuf>,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_file(Path::new(&p)).map_err(err)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&overrides).map_err(err)?;
    let (_, outcome) = voxseg::train::train_loop(&cfg).map_err(err)?;
    let d = PyDict::new(py);
    let losses: Vec<f64> = outcome.log.records.iter().filter_map(|r| r.loss).collect();
    d.set_item("iterations", losses.len())?;
    d.set_item("final_loss", losses.last().copied())?;
    d.set_item("final_checkpoint", outcome.final_checkpoint)?;
    d.set_item("best_checkpoint", outcome.best_checkpoint)?;
    d.set_item("log", outcome.log_path)?;
    d.set_item("wall_secs", outcome.wall_secs)?;
    if let Some(v) = outcome.final_val {
        d.set_item("val_mean_iou", v.mean_iou)?;
        d.set_item("val_defect_iou", v.iou_defect)?;
    }
    Ok(d)
}

#[pymodule]
fn voxseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<UNet>()?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_zscore, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_u16_to_u8, m)?)?;
    m.add_function(wrap_pyfunction!(median3d, m)?)?;
    m.add_function(wrap_pyfunction!(nlm_denoise, m)?)?;
    m.add_function(wrap_pyfunction!(bernsen_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(binarize_prob, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
