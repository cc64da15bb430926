//! Python bindings: box geometry, matching, Trident-NMS, AP and a model
//! wrapper around the Rust core.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prnet_core::eval::{self, Dataset, EvalConfig, SynthSceneSpec};
use prnet_core::inference::{self, HOIDetection, NmsMode, PredictionDump, TridentNMSConfig};
use prnet_core::model::{checkpoint, BBox, ModelConfig, PrNet};
use prnet_core::training;
use prnet_core::Error;

type Box4 = (f64, f64, f64, f64);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn bbox(b: Box4) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

fn tuple(b: BBox) -> Box4 {
    (b.cx, b.cy, b.w, b.h)
}

fn nms_config(mode: &str, weights: (f64, f64, f64), threshold: f64) -> PyResult<TridentNMSConfig> {
    let mode = match mode {
        "product" => NmsMode::Product,
        "sum" => NmsMode::Sum,
        m => return Err(PyValueError::new_err(format!("mode must be 'product' or 'sum', got {m:?}"))),
    };
    let cfg = TridentNMSConfig::new(mode, weights.0, weights.1, weights.2, threshold);
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Intersection over union of two `(cx, cy, w, h)` boxes.
#[pyfunction]
fn iou(a: Box4, b: Box4) -> f64 {
    inference::iou(bbox(a), bbox(b))
}

/// Smallest box containing both inputs.
#[pyfunction]
fn outer_box(a: Box4, b: Box4) -> Box4 {
    tuple(training::outer_box(bbox(a), bbox(b)))
}

/// Combines (human, object, relation) IoUs under the given mode and weights.
#[pyfunction]
#[pyo3(signature = (ious, mode="product", weights=(1.0, 0.5, 0.5)))]
fn tri_iou(ious: (f64, f64, f64), mode: &str, weights: (f64, f64, f64)) -> PyResult<f64> {
    let cfg = nms_config(mode, weights, 0.5)?;
    Ok(inference::tri_iou_from([ious.0, ious.1, ious.2], &cfg))
}

/// Minimum-cost assignment of ground truths (columns) to queries (rows).
/// Returns `(query, gt)` pairs in ground-truth order.
#[pyfunction]
fn linear_sum_assignment(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    training::linear_sum_assignment(&cost).map_err(py_err)
}

/// All-points interpolated AP; `None` when there is no ground truth.
#[pyfunction]
fn average_precision(tp: Vec<bool>, scores: Vec<f64>, num_gt: usize) -> PyResult<Option<f64>> {
    if tp.len() != scores.len() {
        return Err(PyValueError::new_err("tp and scores differ in length"));
    }
    Ok(eval::average_precision(&tp, &scores, num_gt))
}

/// One scored (human, object, relation) triplet.
#[pyclass(module = "prnet", skip_from_py_object)]
#[derive(Clone)]
struct Detection {
    inner: HOIDetection,
}

#[pymethods]
impl Detection {
    #[new]
    #[pyo3(signature = (human_box, object_box, object_class, relation_class, score, query_index=0))]
    fn new(
        human_box: Box4,
        object_box: Box4,
        object_class: usize,
        relation_class: usize,
        score: f64,
        query_index: usize,
    ) -> Self {
        let (h, o) = (bbox(human_box), bbox(object_box));
        Self {
            inner: HOIDetection {
                human_box: h,
                object_box: o,
                relation_box: h.outer(o),
                object_class,
                relation_class,
                score,
                query_index,
            },
        }
    }

    #[getter]
    fn human_box(&self) -> Box4 {
        tuple(self.inner.human_box)
    }

    #[getter]
    fn object_box(&self) -> Box4 {
        tuple(self.inner.object_box)
    }

    #[getter]
    fn relation_box(&self) -> Box4 {
        tuple(self.inner.relation_box)
    }

    #[getter]
    fn object_class(&self) -> usize {
        self.inner.object_class
    }

    #[getter]
    fn relation_class(&self) -> usize {
        self.inner.relation_class
    }

    #[getter]
    fn score(&self) -> f64 {
        self.inner.score
    }

    #[getter]
    fn query_index(&self) -> usize {
        self.inner.query_index
    }

    fn __repr__(&self) -> String {
        format!(
            "Detection(object_class={}, relation_class={}, score={:.4}, query_index={})",
            self.inner.object_class, self.inner.relation_class, self.inner.score, self.inner.query_index
        )
    }
}

/// Greedy per-category suppression; returns the kept detections, best first.
#[pyfunction]
#[pyo3(signature = (detections, mode="product", weights=(1.0, 0.5, 0.5), threshold=0.5))]
fn trident_nms(
    detections: Vec<PyRef<'_, Detection>>,
    mode: &str,
    weights: (f64, f64, f64),
    threshold: f64,
) -> PyResult<Vec<Detection>> {
    let cfg = nms_config(mode, weights, threshold)?;
    let dets: Vec<HOIDetection> = detections.iter().map(|d| d.inner.clone()).collect();
    Ok(inference::trident_nms(&dets, &cfg)
        .into_iter()
        .map(|inner| Detection { inner })
        .collect())
}

/// Writes a synthetic dataset (annotations, PNGs, simulated detections)
/// to `out_dir` and returns `(num_train, num_test)`.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, num_train=200, num_test=50, size=64, duplicate_rate=0.5))]
fn generate_dataset(
    out_dir: PathBuf,
    seed: u64,
    num_train: usize,
    num_test: usize,
    size: usize,
    duplicate_rate: f64,
) -> PyResult<(usize, usize)> {
    let spec = SynthSceneSpec {
        seed,
        num_train,
        num_test,
        width: size,
        height: size,
        duplicate_rate,
        ..SynthSceneSpec::default()
    };
    spec.validate().map_err(py_err)?;
    let d = eval::generate_synthetic_dataset(&spec).map_err(py_err)?;
    d.write(&out_dir).map_err(py_err)?;
    Ok((d.train.images.len(), d.test.images.len()))
}

/// Scores a detection dump against a dataset file. Returns a dict with
/// `mAP_full`, `mAP_rare` and `mAP_nonrare` (the last two may be None).
#[pyfunction]
#[pyo3(signature = (dump_path, dataset_path, nms=true))]
fn evaluate<'py>(py: Python<'py>, dump_path: PathBuf, dataset_path: PathBuf, nms: bool) -> PyResult<Bound<'py, PyDict>> {
    let dump = PredictionDump::load(&dump_path).map_err(py_err)?;
    let dump = if nms { dump.apply_nms(&TridentNMSConfig::default()) } else { dump };
    let data = Dataset::load(&dataset_path).map_err(py_err)?;
    let r = eval::mean_ap(&dump, &data, &EvalConfig::default()).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mAP_full", r.map_full)?;
    out.set_item("mAP_rare", r.map_rare)?;
    out.set_item("mAP_nonrare", r.map_nonrare)?;
    out.set_item("categories", r.counts.full)?;
    Ok(out)
}

/// A detector, either freshly initialised or loaded from a checkpoint.
#[pyclass(module = "prnet")]
struct Model {
    net: PrNet,
}

#[pymethods]
impl Model {
    /// New model from a JSON config (defaults to the toy configuration).
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match config_json {
            Some(s) => ModelConfig::from_json(s).map_err(py_err)?,
            None => ModelConfig::toy(),
        };
        Ok(Self {
            net: PrNet::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            net: PrNet::from_checkpoint(&ck).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.net, None).map_err(py_err)
    }

    /// Total number of scalar parameters.
    fn num_parameters(&self) -> usize {
        self.net.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.net.config.image_height, self.net.config.image_width)
    }

    #[getter]
    fn parallel_predictor(&self) -> bool {
        self.net.config.parallel_predictor
    }

    /// Detections for one RGB image file, top-`top_k` before optional
    /// Trident-NMS with the default settings.
    #[pyo3(signature = (image_path, top_k=100, nms=true))]
    fn predict(&self, image_path: PathBuf, top_k: usize, nms: bool) -> PyResult<Vec<Detection>> {
        let img = image::open(&image_path)
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", image_path.display())))?
            .to_rgb8();
        let tensor = eval::image_to_tensor(&img);
        let raw = inference::raw_detections(&self.net, &tensor, top_k).map_err(py_err)?;
        let dets = if nms {
            inference::trident_nms(&raw, &TridentNMSConfig::default())
        } else {
            raw
        };
        Ok(dets.into_iter().map(|inner| Detection { inner }).collect())
    }
}

#[pymodule]
fn prnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Detection>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(outer_box, m)?)?;
    m.add_function(wrap_pyfunction!(tri_iou, m)?)?;
    m.add_function(wrap_pyfunction!(linear_sum_assignment, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(trident_nms, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
