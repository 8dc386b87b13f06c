//! Python bindings for boxes, assignment, datasets, statistics, training and
//! evaluation.

use std::path::PathBuf;

use hoi_core::datamodel::{synth_dataset, Dataset, OaVocabulary, SynthOptions};
use hoi_core::evalmod::{self, detections_from_predictions, evaluate, ClassMode, EvalConfig, Scenario};
use hoi_core::geometry::{self, Box, Rsc};
use hoi_core::heads::PredictionSet;
use hoi_core::matchloss;
use hoi_core::spatial::{self, default_layout_stats, StatsMode};
use hoi_core::trainer::{config::parse_assignment, predict_dataset, LoadedModel, TrainConfig, Trainer};
use hoi_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Axis-aligned box in normalized corner form.
#[pyclass(name = "Box", frozen, module = "hoi")]
struct PyBox(Box);

#[pymethods]
impl PyBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        Box::new(x1, y1, x2, y2).map(PyBox).map_err(to_py)
    }

    #[staticmethod]
    fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> PyResult<Self> {
        Box::from_center(cx, cy, w, h).map(PyBox).map_err(to_py)
    }

    #[staticmethod]
    fn from_tlwh(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        Box::from_tlwh(x, y, w, h).map(PyBox).map_err(to_py)
    }

    #[getter]
    fn corners(&self) -> [f64; 4] {
        self.0.corners()
    }

    #[getter]
    fn center(&self) -> [f64; 4] {
        self.0.center_form()
    }

    #[getter]
    fn tlwh(&self) -> [f64; 4] {
        self.0.tlwh()
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBox) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    fn giou(&self, other: &PyBox) -> f64 {
        geometry::giou(&self.0, &other.0)
    }

    fn __eq__(&self, other: &PyBox) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let [x1, y1, x2, y2] = self.0.corners();
        format!("Box({x1}, {y1}, {x2}, {y2})")
    }
}

/// Relative spatial configuration `(dx, dy, dw, dh)` of an object box.
#[pyfunction]
fn rsc(human: &PyBox, object: &PyBox) -> [f64; 4] {
    geometry::rsc(&human.0, &object.0).to_array()
}

/// Places an object box relative to `human`; the result is not clamped.
#[pyfunction]
fn apply_rsc(human: &PyBox, r: [f64; 4]) -> PyBox {
    PyBox(geometry::apply_rsc(&human.0, &Rsc::from_array(r)))
}

/// Minimum-cost assignment of each row to a distinct column.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("cost rows have different lengths"));
    }
    if cost.len() > cols && !cost.is_empty() {
        return Err(PyValueError::new_err("need at least as many columns as rows"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PyValueError::new_err("costs must be finite"));
    }
    Ok(matchloss::hungarian(&cost))
}

#[pyfunction]
fn average_precision(tp: Vec<bool>, n_gt: usize) -> f64 {
    evalmod::average_precision(&tp, n_gt)
}

/// Binary human/object maps as two `size x size` nested lists.
#[pyfunction]
#[pyo3(signature = (human, object, size))]
fn rasterize(human: &PyBox, object: Option<&PyBox>, size: usize) -> Vec<Vec<Vec<u8>>> {
    let map = spatial::rasterize(&human.0, object.map(|b| &b.0), size);
    (0..2).map(|c| map.channel(c).chunks(size).map(<[u8]>::to_vec).collect()).collect()
}

#[pyclass(name = "Dataset", module = "hoi")]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Dataset::load(&path).map(PyDataset).map_err(to_py)
    }

    /// Synthetic scenes over the default vocabulary.
    #[staticmethod]
    #[pyo3(signature = (seed, n_images, image_size = 32, max_instances = 3))]
    fn synth(seed: u64, n_images: usize, image_size: usize, max_instances: usize) -> PyResult<Self> {
        if image_size < 8 || max_instances == 0 {
            return Err(PyValueError::new_err("image_size must be >= 8 and max_instances >= 1"));
        }
        let vocab = OaVocabulary::default_synthetic();
        let opts = SynthOptions {
            image_size,
            max_instances,
            ..SynthOptions::default()
        };
        Ok(PyDataset(synth_dataset(seed, n_images, &vocab, &default_layout_stats(&vocab), &opts)))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn __len__(&self) -> usize {
        self.0.images.len()
    }

    fn image_ids(&self) -> Vec<u64> {
        self.0.images.iter().map(|i| i.id).collect()
    }

    fn pair_keys(&self) -> Vec<String> {
        (0..self.0.vocabulary.num_pairs()).map(|i| self.0.vocabulary.pair_key(i)).collect()
    }

    fn pair_counts(&self) -> Vec<usize> {
        self.0.pair_counts()
    }

    /// Maximum-likelihood layout statistics as the JSON stats file.
    #[pyo3(signature = (mode = "bivariate"))]
    fn fit_stats(&self, mode: &str) -> PyResult<String> {
        let mode = match mode {
            "bivariate" => StatsMode::Bivariate,
            "multivariate" => StatsMode::Multivariate,
            other => return Err(PyValueError::new_err(format!("unknown statistics mode `{other}`"))),
        };
        let stats = spatial::fit_stats(&self.0, mode).map_err(to_py)?;
        Ok(stats.to_json(&self.0.vocabulary))
    }
}

fn prediction_dict<'py>(py: Python<'py>, set: &PredictionSet) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("image_id", set.image_id)?;
    d.set_item("oa_scores", set.oa_scores.clone())?;
    let queries = set
        .queries
        .iter()
        .map(|q| {
            let qd = PyDict::new(py);
            qd.set_item("human_box", q.human_box().corners())?;
            qd.set_item("object_box", (!q.object_is_null()).then(|| q.object_box().corners()))?;
            qd.set_item("object_probs", q.obj_probs.clone())?;
            qd.set_item("interaction", q.hoi_raw.clone())?;
            qd.set_item("interaction_weighted", q.hoi_weighted.clone())?;
            Ok(qd)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("queries", queries)?;
    Ok(d)
}

/// A trained detector loaded from a checkpoint.
#[pyclass(name = "Model", module = "hoi")]
struct PyModel(LoadedModel);

impl PyModel {
    fn predictions(&self, dataset: &Dataset, oracle: Option<bool>) -> PyResult<Vec<PredictionSet>> {
        let oracle = oracle.unwrap_or_else(|| self.0.oracle_oa());
        predict_dataset(&self.0.model, &self.0.assets, dataset, oracle).map_err(to_py)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        LoadedModel::load(&path).map(PyModel).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.model.params.numel()
    }

    /// One dict per image. `oracle` defaults to the training mode.
    #[pyo3(signature = (dataset, oracle = None))]
    fn predict<'py>(&self, py: Python<'py>, dataset: &PyDataset, oracle: Option<bool>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.predictions(&dataset.0, oracle)?
            .iter()
            .map(|s| prediction_dict(py, s))
            .collect()
    }

    /// mAP report with per-class APs keyed by class name.
    #[pyo3(signature = (dataset, scenario = 2, class_mode = "action", oracle = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        scenario: u8,
        class_mode: &str,
        oracle: Option<bool>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let scenario =
            Scenario::from_number(scenario).ok_or_else(|| PyValueError::new_err("scenario must be 1 or 2"))?;
        let class_mode = match class_mode {
            "action" => ClassMode::Action,
            "pair" => ClassMode::Pair,
            other => return Err(PyValueError::new_err(format!("unknown class mode `{other}`"))),
        };
        let sets = self.predictions(&dataset.0, oracle)?;
        let cfg = EvalConfig {
            scenario,
            class_mode,
            train_pair_counts: self.0.train_pair_counts.clone(),
        };
        let report = evaluate(&detections_from_predictions(&sets), &dataset.0, &cfg);
        let d = PyDict::new(py);
        d.set_item("map", report.map)?;
        d.set_item("rare", report.rare)?;
        d.set_item("non_rare", report.non_rare)?;
        let per_class = PyDict::new(py);
        for c in &report.per_class {
            per_class.set_item(&c.name, c.ap)?;
        }
        d.set_item("per_class", per_class)?;
        Ok(d)
    }
}

/// Trains from a TOML config into `out_dir`. `overrides` are `key=value`
/// strings applied on top of the file.
#[pyfunction]
#[pyo3(signature = (config, out_dir, overrides = Vec::new()))]
fn train<'py>(py: Python<'py>, config: PathBuf, out_dir: PathBuf, overrides: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let pairs = overrides
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<hoi_core::Result<Vec<_>>>()
        .map_err(to_py)?;
    let cfg = TrainConfig::load(&config, &pairs).map_err(to_py)?;
    let summary = py
        .detach(|| {
            let mut trainer = Trainer::from_config(cfg)?;
            trainer.run(&out_dir)
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("steps", summary.steps)?;
    d.set_item("epochs", summary.epochs)?;
    d.set_item("final_loss", summary.final_loss.map(|l| l.total))?;
    d.set_item("final_train_map", summary.final_train_map)?;
    d.set_item("best_train_map", summary.best_train_map)?;
    Ok(d)
}

#[pymodule]
fn hoi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rsc, m)?)?;
    m.add_function(wrap_pyfunction!(apply_rsc, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
