//! Python bindings: datasets, training, evaluation, probes and loss functions.
//!
//! Structured results (reports, metrics) come back as plain dicts and lists.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dbmnet::dataset::{load_images, load_manifest, split_loco, synth_generate, SynthConfig};
use dbmnet::evaluator::{self, LabelMap, Ranking};
use dbmnet::losses;
use dbmnet::model::forward;
use dbmnet::probe::{self, Stage};
use dbmnet::trainer::{self, GradCheckSetup};
use dbmnet::{DatasetManifest, Error, Image, ImageStore};

create_exception!(pydbmnet, DbmnetError, PyException);

fn err(e: Error) -> PyErr {
    DbmnetError::new_err(format!("{}: {e}", e.kind()))
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match value {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, S: Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| err(e.into()))?;
    json_to_py(py, &v)
}

fn rows_to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(err(Error::Shape(
            "rows must all have the same length".into(),
        )));
    }
    Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| err(Error::Shape(e.to_string())))
}

/// A labelled image collection held in memory.
#[pyclass(module = "pydbmnet")]
struct Dataset {
    manifest: DatasetManifest,
    store: ImageStore,
}

#[pymethods]
impl Dataset {
    /// Generate the synthetic multi-view dataset.
    #[staticmethod]
    #[pyo3(signature = (actions=6, views=4, per_cell=200, image_size=32, noise_sigma=0.05, seed=7))]
    fn synthetic(
        actions: usize,
        views: usize,
        per_cell: usize,
        image_size: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = SynthConfig {
            actions,
            views,
            per_cell,
            image_size,
            noise_sigma,
            seed,
        };
        let (manifest, store) = synth_generate(&config).map_err(err)?;
        Ok(Self { manifest, store })
    }

    /// Load a `<root>/<view>/<action>/<image>` tree, resizing to `size x size`.
    #[staticmethod]
    fn from_directory(root: PathBuf, size: usize) -> PyResult<Self> {
        let manifest = load_manifest(&root).map_err(err)?;
        let store = load_images(&manifest, size).map_err(err)?;
        Ok(Self { manifest, store })
    }

    fn __len__(&self) -> usize {
        self.manifest.len()
    }

    #[getter]
    fn actions(&self) -> Vec<String> {
        self.manifest.label_space.actions().to_vec()
    }

    #[getter]
    fn views(&self) -> Vec<String> {
        self.manifest.label_space.views().to_vec()
    }

    #[getter]
    fn action_ids(&self) -> Vec<usize> {
        self.manifest.entries.iter().map(|e| e.action_id).collect()
    }

    #[getter]
    fn view_ids(&self) -> Vec<usize> {
        self.manifest.entries.iter().map(|e| e.view_id).collect()
    }

    /// Flat channel-major pixels of entry `index` and its side length.
    fn image(&self, index: usize) -> PyResult<(Vec<f32>, usize)> {
        let entry = self.manifest.entries.get(index).ok_or_else(|| {
            err(Error::Label {
                label: index,
                classes: self.manifest.len(),
            })
        })?;
        let img = self.store.get(&entry.source_id).map_err(err)?;
        Ok((img.data().to_vec(), img.height()))
    }

    /// Samples `view` only.
    fn view_subset(&self, view: usize) -> Self {
        Self {
            manifest: self.manifest.filter_view(view),
            store: self.store.clone(),
        }
    }
}

/// A trained (or freshly initialized) model with its label space and config.
#[pyclass(module = "pydbmnet")]
struct Checkpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::load_checkpoint(&path).map_err(err)?,
        })
    }

    /// Untrained parameters for `preset` ("desk", "paper", "tiny") sized for `dataset`.
    #[staticmethod]
    #[pyo3(signature = (dataset, preset="desk", identity_gate=false, seed=0))]
    fn initial(dataset: &Dataset, preset: &str, identity_gate: bool, seed: u64) -> PyResult<Self> {
        let mut config = trainer::TrainConfig::preset(preset).map_err(err)?;
        config.seed = seed;
        if identity_gate {
            config.gate = trainer::GateMode::Identity;
        }
        Ok(Self {
            inner: trainer::initial_checkpoint(&config, &dataset.manifest.label_space)
                .map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn val_top1(&self) -> f64 {
        self.inner.val_top1
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Training configuration stored in the checkpoint.
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Forward one image given as flat channel-major pixels of a `size x size` picture.
    /// Returns a dict with `f`, `z_v`, `p_v`, `f_hat` and `z_a`.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        pixels: Vec<f32>,
        size: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let image = Image::new(size, size, pixels).map_err(err)?;
        let out = forward(&image, &self.inner.params, false).map_err(err)?;
        let dict = PyDict::new(py);
        dict.set_item("f", out.f.to_vec())?;
        dict.set_item("z_v", out.z_v.to_vec())?;
        dict.set_item("p_v", out.p_v.to_vec())?;
        dict.set_item("f_hat", out.f_hat.to_vec())?;
        dict.set_item("z_a", out.z_a.to_vec())?;
        Ok(dict)
    }

    /// Action logits for every sample of `dataset`.
    fn predict(&self, dataset: &Dataset) -> PyResult<Vec<Vec<f32>>> {
        let logits = evaluator::predict_logits(
            &self.inner.params,
            &dataset.manifest,
            &dataset.store,
            self.inner.config.eval_batch_size,
        )
        .map_err(err)?;
        Ok(logits.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Backbone (`stage="pre"`) or gated (`stage="post"`) features per sample.
    #[pyo3(signature = (dataset, stage="pre"))]
    fn features(&self, dataset: &Dataset, stage: &str) -> PyResult<Vec<Vec<f64>>> {
        let stage = match stage {
            "pre" => Stage::Pre,
            "post" => Stage::Post,
            other => {
                return Err(err(Error::Config(format!(
                    "stage must be \"pre\" or \"post\", got {other:?}"
                ))))
            }
        };
        let fm = probe::extract_features(&self.inner, &dataset.manifest, &dataset.store, stage)
            .map_err(err)?;
        Ok(fm.rows.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// Train on all views except `test_view`; returns the best checkpoint and the
/// per-epoch metrics.
#[pyfunction]
#[pyo3(signature = (dataset, test_view, preset="desk", overrides=Vec::new(), val_fraction=0.2, split_seed=0))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    test_view: usize,
    preset: &str,
    overrides: Vec<String>,
    val_fraction: f64,
    split_seed: u64,
) -> PyResult<(Checkpoint, Bound<'py, PyAny>)> {
    let run = dbmnet::RunConfig::from_preset(preset, &overrides).map_err(err)?;
    let split = split_loco(&dataset.manifest, test_view, val_fraction, split_seed).map_err(err)?;
    let outcome = py
        .detach(|| trainer::train(&run.train, &split.train, &split.val, &dataset.store))
        .map_err(err)?;
    let metrics = to_py(py, &outcome.metrics)?;
    Ok((
        Checkpoint {
            inner: outcome.checkpoint,
        },
        metrics,
    ))
}

/// Top-1/top-5 report of `checkpoint` on `dataset`. With `label_map` (a JSON
/// file path), classes are mapped first.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, label_map=None, ranking="restricted"))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    label_map: Option<PathBuf>,
    ranking: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let report = match label_map {
        None => evaluator::evaluate(&checkpoint.inner, &dataset.manifest, &dataset.store),
        Some(path) => {
            let ranking = match ranking {
                "restricted" => Ranking::Restricted,
                "full" => Ranking::Full,
                other => return Err(err(Error::Config(format!("unknown ranking {other:?}")))),
            };
            LabelMap::load(
                &path,
                dataset.manifest.label_space.actions(),
                checkpoint.inner.label_space.actions(),
            )
            .and_then(|map| {
                evaluator::cross_dataset_eval(
                    &checkpoint.inner,
                    &dataset.manifest,
                    &dataset.store,
                    &map,
                    ranking,
                )
            })
        }
    }
    .map_err(err)?;
    to_py(py, &report)
}

/// Nearest-centroid view accuracy on features before and after the gate.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, test_view, val_fraction=0.2, split_seed=0))]
fn probe_view_drop<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    test_view: usize,
    val_fraction: f64,
    split_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let split = split_loco(&dataset.manifest, test_view, val_fraction, split_seed).map_err(err)?;
    let result =
        probe::probe_view_drop(&checkpoint.inner, &split.train, &split.val, &dataset.store)
            .map_err(err)?;
    to_py(py, &result)
}

/// Percentage of rows whose label is among the `k` largest scores.
#[pyfunction]
fn topk_accuracy(logits: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> PyResult<f64> {
    let logits = rows_to_array(logits)?;
    evaluator::topk_accuracy(logits.view(), &labels, k).map_err(err)
}

/// `num_classes x num_classes` counts, rows are ground truth.
#[pyfunction]
fn confusion_matrix(
    predictions: Vec<usize>,
    truth: Vec<usize>,
    num_classes: usize,
) -> PyResult<Vec<Vec<u64>>> {
    let m = evaluator::confusion_matrix(&predictions, &truth, num_classes).map_err(err)?;
    Ok(m.rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn cross_entropy(logits: Vec<f64>, label: usize) -> PyResult<f64> {
    losses::cross_entropy(ndarray::ArrayView1::from(&logits), label).map_err(err)
}

/// Mean triplet hinge over rows of anchors, positives and negatives.
#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, delta=1.0))]
fn triplet_margin(
    anchor: Vec<Vec<f64>>,
    positive: Vec<Vec<f64>>,
    negative: Vec<Vec<f64>>,
    delta: f64,
) -> PyResult<f64> {
    let (a, p, n) = (
        rows_to_array(anchor)?,
        rows_to_array(positive)?,
        rows_to_array(negative)?,
    );
    losses::triplet_margin(a.view(), p.view(), n.view(), delta).map_err(err)
}

/// Finite-difference check of the analytic gradient on a training batch of
/// `preset`. Returns one report per `stop_gradient_pv` setting.
#[pyfunction]
#[pyo3(signature = (preset="tiny", epsilon=1e-5))]
fn gradient_check<'py>(py: Python<'py>, preset: &str, epsilon: f64) -> PyResult<Bound<'py, PyAny>> {
    let run = dbmnet::RunConfig::from_preset(preset, &[]).map_err(err)?;
    let (manifest, mut store) = synth_generate(&run.synth).map_err(err)?;
    store.resize_all(run.train.input_size);
    let setup = GradCheckSetup::new(&run.train, &manifest, &store).map_err(err)?;
    let mut reports = Vec::new();
    for stop in [false, true] {
        let problem = setup.problem(run.train.loss_weights, stop);
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        reports.push(trainer::gradient_check(&problem, epsilon, &mut rng).map_err(err)?);
    }
    to_py(py, &reports)
}

#[pymodule]
fn pydbmnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DbmnetError", m.py().get_type::<DbmnetError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(probe_view_drop, m)?)?;
    m.add_function(wrap_pyfunction!(topk_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_margin, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
