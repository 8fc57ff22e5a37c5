//! Python module `cxhg`: models, training, metrics and the encoding op.
//!
//! Arrays cross the boundary as flat lists in row-major order together
//! with a shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use cxhg::data::{extract_patches, generate_dataset, generate_tiles, read_dataset, split, RasterData, SceneSpec, SplitRatio};
use cxhg::hourglass::{predict_labels, HourglassConfig, Model};
use cxhg::metrics;
use cxhg::train::{self, poly_lr as core_poly_lr, Checkpoint, LossWeights, LrSchedule, TrainConfig};
use cxhg::{verify, Error, Record, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_) | Error::NonFinite { .. } => {
            PyArithmeticError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Network architecture. Defaults are the full-size configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: HourglassConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (num_modules=4, depth=4, widths=None, stem_width=64, num_classes=6, input_channels=5, patch_size=256, encoding_divisor=8, codewords=32, stem_stride=1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_modules: usize,
        depth: usize,
        widths: Option<Vec<usize>>,
        stem_width: usize,
        num_classes: usize,
        input_channels: usize,
        patch_size: usize,
        encoding_divisor: usize,
        codewords: usize,
        stem_stride: usize,
    ) -> PyResult<Self> {
        let inner = HourglassConfig {
            num_modules,
            depth,
            widths: widths.unwrap_or_else(|| vec![128, 128, 256, 256]),
            stem_width,
            num_classes,
            input_channels,
            patch_size,
            encoding_resolution_divisor: encoding_divisor,
            codewords,
            stem_stride,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// The smallest configuration (one module, 16-pixel patches).
    #[staticmethod]
    fn tiny() -> Self {
        Self {
            inner: HourglassConfig::tiny(),
        }
    }

    #[getter]
    fn num_modules(&self) -> usize {
        self.inner.num_modules
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn input_channels(&self) -> usize {
        self.inner.input_channels
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.inner.widths.clone()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Per-module logits, fused logits and class-presence probabilities of
/// one batch.
#[pyclass(name = "Prediction", get_all)]
pub struct PyPrediction {
    /// Shape of each logits array, `[B, classes, H, W]`.
    shape: Vec<usize>,
    per_module_logits: Vec<Vec<f32>>,
    fused_logits: Vec<f32>,
    presence: Vec<Vec<f32>>,
    labels: Vec<u8>,
}

#[pyclass(name = "Model")]
pub struct PyModel {
    inner: Model<f32>,
}

fn batch_tensor(image: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    if shape.len() != 4 {
        return Err(PyValueError::new_err(format!("image shape {shape:?} is not [B, C, H, W]")));
    }
    Tensor::new(&shape, image).map_err(to_py)
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Model::build(&config.inner, seed).map_err(to_py)?,
        })
    }

    /// Model restored from a checkpoint written by `save` or the CLI.
    #[staticmethod]
    fn load(config: PyConfig, path: PathBuf) -> PyResult<Self> {
        let mut inner = Model::build(&config.inner, 0).map_err(to_py)?;
        Checkpoint::load(&path).and_then(|c| c.restore(&mut inner, None)).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::capture(&self.inner, None, 0, true).save(&path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(_, p)| p.name.clone()).collect()
    }

    /// Eval-mode forward pass. The model must have been trained or loaded
    /// (batch-norm statistics must exist).
    #[pyo3(signature = (image, shape, encoding=true))]
    fn predict(&self, image: Vec<f32>, shape: Vec<usize>, encoding: bool) -> PyResult<PyPrediction> {
        let x = batch_tensor(image, shape)?;
        let p = self.inner.predict(&x, encoding).map_err(to_py)?;
        Ok(PyPrediction {
            shape: p.fused_logits.shape().to_vec(),
            labels: predict_labels(&p.fused_logits).map_err(to_py)?,
            per_module_logits: p.per_module_logits.into_iter().map(Tensor::into_values).collect(),
            fused_logits: p.fused_logits.into_values(),
            presence: p.se_probs.into_iter().map(Tensor::into_values).collect(),
        })
    }

    /// Total training loss of one batch (train mode, no update).
    #[pyo3(signature = (image, shape, labels, encoding=true, se_weight=0.2))]
    fn loss(&self, image: Vec<f32>, shape: Vec<usize>, labels: Vec<u8>, encoding: bool, se_weight: f64) -> PyResult<f64> {
        let x = batch_tensor(image, shape)?;
        let opts = cxhg::hourglass::ForwardOptions::train().with_encoding(encoding);
        train::batch_loss(&self.inner, &x, &labels, opts, LossWeights { se_weight }).map_err(to_py)
    }

    /// Two-phase training on every patch of a dataset directory. Returns
    /// the training log as CSV.
    #[pyo3(signature = (dataset_dir, epochs_phase1=20, epochs_phase2=20, batch_size=16, base_lr=1e-4, power=0.95, se_weight=0.2, seed=0, augment=true))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset_dir: PathBuf,
        epochs_phase1: usize,
        epochs_phase2: usize,
        batch_size: usize,
        base_lr: f64,
        power: f64,
        se_weight: f64,
        seed: u64,
        augment: bool,
    ) -> PyResult<String> {
        let tc = TrainConfig {
            epochs_phase1,
            epochs_phase2,
            batch_size,
            micro_batch: None,
            base_lr,
            power,
            loss: LossWeights { se_weight },
            seed,
            augment,
        };
        let model = &mut self.inner;
        py.detach(|| {
            let patch = model.config().patch_size;
            let mut samples = Vec::new();
            for (img, labels) in read_dataset(&dataset_dir)? {
                samples.extend(extract_patches(&img, &labels, patch)?);
            }
            let (tr, val) = split(samples, SplitRatio::default(), seed)?;
            let report = train::train(model, &tr, &val, &tc, &mut |_| {}, &mut |_, _, _| Ok(()))?;
            Ok(report.to_csv())
        })
        .map_err(to_py)
    }
}

/// Confusion matrix over class ids; 255 is ignored.
#[pyclass(name = "ConfusionMatrix")]
pub struct PyConfusionMatrix {
    inner: metrics::ConfusionMatrix,
}

#[pymethods]
impl PyConfusionMatrix {
    #[new]
    fn new(num_classes: usize) -> Self {
        Self {
            inner: metrics::ConfusionMatrix::new(num_classes),
        }
    }

    fn update(&mut self, pred: Vec<u8>, truth: Vec<u8>) -> PyResult<()> {
        self.inner.update(&pred, &truth).map_err(to_py)
    }

    fn get(&self, truth: usize, pred: usize) -> u64 {
        self.inner.get(truth, pred)
    }

    fn total(&self) -> u64 {
        self.inner.total()
    }

    fn pix_acc(&self) -> PyResult<f64> {
        self.inner.pix_acc().map_err(to_py)
    }

    fn mean_iou(&self) -> PyResult<f64> {
        self.inner.mean_iou().map_err(to_py)
    }

    fn class_iou(&self) -> Vec<Option<f64>> {
        self.inner.class_iou()
    }

    fn report_csv(&self) -> PyResult<String> {
        self.inner.report_csv().map_err(to_py)
    }
}

/// Residual encoding: features `[B, C, H, W]`, codewords `[K, C]` and
/// smoothing `[K]` to residual encoders `[B, K, C]` (flat).
#[pyfunction]
fn encode(features: Vec<f64>, shape: Vec<usize>, codewords: Vec<f64>, smoothing: Vec<f64>) -> PyResult<Vec<f64>> {
    let x = Tensor::new(&shape, features).map_err(to_py)?;
    let k = smoothing.len();
    let c = if k == 0 { 0 } else { codewords.len() / k };
    let d = Tensor::new(&[k, c], codewords).map_err(to_py)?;
    let s = Tensor::new(&[k], smoothing).map_err(to_py)?;
    let mut rec = Record::new();
    let (xv, dv, sv) = (rec.constant(x), rec.constant(d), rec.constant(s));
    let e = rec.encode(xv, dv, sv).map_err(to_py)?;
    Ok(rec.value(e).values().to_vec())
}

#[pyfunction]
fn poly_lr(base_lr: f64, power: f64, total_iter: usize, iter: usize) -> PyResult<f64> {
    let s = LrSchedule::new(base_lr, power, total_iter).map_err(to_py)?;
    Ok(core_poly_lr(&s, iter))
}

/// One synthetic tile: `(image, labels)` with the image planar in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (width=256, height=256, seed=0))]
fn synth_tile(width: usize, height: usize, seed: u64) -> PyResult<(Vec<f32>, Vec<u8>)> {
    let spec = SceneSpec {
        width,
        height,
        ..SceneSpec::default()
    };
    let (img, labels) = generate_tiles(&spec, 1, seed).map_err(to_py)?.remove(0);
    let image = match &img.data {
        RasterData::U8(v) => v.iter().map(|&b| b as f32 / 255.0).collect(),
        RasterData::F32(v) => v.clone(),
    };
    Ok((image, labels.data))
}

/// Writes a synthetic dataset directory; returns the per-class pixel
/// census.
#[pyfunction]
#[pyo3(signature = (out_dir, tiles, width=256, height=256, seed=0))]
fn write_synth_dataset(out_dir: PathBuf, tiles: usize, width: usize, height: usize, seed: u64) -> PyResult<Vec<u64>> {
    let spec = SceneSpec {
        width,
        height,
        ..SceneSpec::default()
    };
    generate_dataset(&out_dir, &spec, tiles, seed).map_err(to_py)
}

/// Runs a verification suite (`gradcheck`, `oracle` or `all`); returns
/// whether every check passed and the report text.
#[pyfunction]
#[pyo3(signature = (suite="all"))]
fn run_verify(py: Python<'_>, suite: &str) -> PyResult<(bool, String)> {
    let suite: verify::Suite = suite.parse().map_err(PyValueError::new_err)?;
    let report = py.detach(|| verify::run(suite));
    Ok((report.passed(), report.to_text()))
}

#[pymodule]
#[pyo3(name = "cxhg")]
fn cxhg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrediction>()?;
    m.add_class::<PyConfusionMatrix>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(synth_tile, m)?)?;
    m.add_function(wrap_pyfunction!(write_synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
