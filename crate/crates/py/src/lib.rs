//! Python bindings: the main types and operations behind one in-process
//! module. Rasters cross the boundary as nested lists (rows of values),
//! masks as rows of booleans.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

use briges_core::align::{self, FeatureMap};
use briges_core::config::ModelConfig;
use briges_core::error::Error;
use briges_core::gate;
use briges_core::graph::Graph;
use briges_core::io::{read_checkpoint, write_checkpoint};
use briges_core::losses::{self, DisparityMap};
use briges_core::metrics::{self, Closer, DepthMap, Direction, PixelPair};
use briges_core::pipeline::StubModel;
use briges_core::tensor::Tensor;

fn py_err(err: Error) -> PyErr {
    match err {
        Error::Parameter(_) | Error::Dimension(_) | Error::Data(_) => {
            PyValueError::new_err(err.to_string())
        }
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(usize, usize, Vec<f64>)> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(PyValueError::new_err("expected a non-empty 2-d list"));
    }
    let w = rows[0].len();
    let mut flat = Vec::with_capacity(rows.len() * w);
    for row in rows {
        if row.len() != w {
            return Err(PyValueError::new_err("rows have unequal lengths"));
        }
        flat.extend_from_slice(row);
    }
    Ok((rows.len(), w, flat))
}

fn unflatten(values: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..h)
        .map(|y| values[y * w..(y + 1) * w].to_vec())
        .collect()
}

fn disparity(rows: &[Vec<f64>], mask: Option<Vec<Vec<bool>>>) -> PyResult<DisparityMap> {
    let (h, w, flat) = flatten(rows)?;
    let mask = match mask {
        Some(m) => {
            let flat_mask: Vec<bool> = m.into_iter().flatten().collect();
            if flat_mask.len() != h * w {
                return Err(PyValueError::new_err("mask shape does not match values"));
            }
            flat_mask
        }
        None => vec![true; h * w],
    };
    DisparityMap::new(h, w, flat, mask).map_err(py_err)
}

fn depth(rows: &[Vec<f64>], mask: Option<Vec<Vec<bool>>>) -> PyResult<DepthMap> {
    let (h, w, flat) = flatten(rows)?;
    let mask = match mask {
        Some(m) => {
            let flat_mask: Vec<bool> = m.into_iter().flatten().collect();
            if flat_mask.len() != h * w {
                return Err(PyValueError::new_err("mask shape does not match values"));
            }
            flat_mask
        }
        None => vec![true; h * w],
    };
    DepthMap::new(h, w, flat, mask).map_err(py_err)
}

/// Row-stable softmax of each row of `rows`, logits divided by `tau`.
#[pyfunction]
fn softmax_rows(rows: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let (h, w, flat) = flatten(&rows)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![h, w], flat).map_err(py_err)?);
    let y = g.softmax_rows(x, tau).map_err(py_err)?;
    Ok(unflatten(g.value(y).data(), h, w))
}

/// Shannon entropy (nats) of each attention row.
#[pyfunction]
fn attention_entropy(weights: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let (h, w, flat) = flatten(&weights)?;
    let rec = gate::AttentionRecord {
        weights: Tensor::new(vec![h, w], flat).map_err(py_err)?,
        block: gate::BlockKind::Cross,
        gate_index: 0,
    };
    Ok(gate::attention_entropy(&rec))
}

/// Align-corners bilinear resize of a single-channel grid.
#[pyfunction]
fn bilinear_resize(grid: Vec<Vec<f64>>, h: usize, w: usize) -> PyResult<Vec<Vec<f64>>> {
    let (sh, sw, flat) = flatten(&grid)?;
    let map = FeatureMap::new(sh, sw, 1, flat).map_err(py_err)?;
    let out = align::bilinear_resize(&map, h, w).map_err(py_err)?;
    Ok(unflatten(out.values(), h, w))
}

/// Per-channel 2×2 max pooling of a single-channel grid.
#[pyfunction]
fn max_pool_2x2(grid: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (sh, sw, flat) = flatten(&grid)?;
    let map = FeatureMap::new(sh, sw, 1, flat).map_err(py_err)?;
    let out = align::max_pool_2x2(&map).map_err(py_err)?;
    let (oh, ow) = out.grid();
    Ok(unflatten(out.values(), oh, ow))
}

/// Resolution alignment: bilinear resize to twice the target, then 2×2 max
/// pooling.
#[pyfunction]
fn align_semantic(grid: Vec<Vec<f64>>, h: usize, w: usize) -> PyResult<Vec<Vec<f64>>> {
    let (sh, sw, flat) = flatten(&grid)?;
    let map = FeatureMap::new(sh, sw, 1, flat).map_err(py_err)?;
    let out = align::align_semantic(&map, (h, w)).map_err(py_err)?;
    Ok(unflatten(out.values(), h, w))
}

/// Resize a single-channel image so the shorter side is `size` (aspect
/// preserved), then crop a seeded random size×size window.
#[pyfunction]
fn preprocess_image(image: Vec<Vec<f64>>, size: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let (h, w, flat) = flatten(&image)?;
    let raster = align::Raster::new(h, w, 1, flat).map_err(py_err)?;
    let mut rng = briges_core::rng::Prng::new(seed);
    let out = align::preprocess_image(&raster, size, &mut rng).map_err(py_err)?;
    Ok(unflatten(&out.data, size, size))
}

/// Invert valid depths and min-max normalize to [0, 1].
#[pyfunction]
#[pyo3(signature = (depth_rows, mask=None))]
fn depth_to_normalized_disparity(
    depth_rows: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
) -> PyResult<Vec<Vec<f64>>> {
    let d = depth(&depth_rows, mask)?;
    let disp = losses::depth_to_normalized_disparity(&d).map_err(py_err)?;
    Ok(unflatten(&disp.values, disp.h, disp.w))
}

/// Scale/shift-invariant normalization over the valid pixels.
#[pyfunction]
#[pyo3(signature = (values, mask=None))]
fn ssi_normalize(values: Vec<Vec<f64>>, mask: Option<Vec<Vec<bool>>>) -> PyResult<Vec<Vec<f64>>> {
    let d = disparity(&values, mask)?;
    let out = losses::ssi_normalize(&d).map_err(py_err)?;
    Ok(unflatten(&out, d.h, d.w))
}

/// Mean absolute difference of the SSI-normalized rasters.
#[pyfunction]
#[pyo3(signature = (pred, gt, mask=None))]
fn affine_invariant_loss(
    pred: Vec<Vec<f64>>,
    gt: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
) -> PyResult<f64> {
    let gt = disparity(&gt, mask)?;
    let (_, _, flat) = flatten(&pred)?;
    losses::affine_invariant_loss(&flat, &gt).map_err(py_err)
}

/// Multi-scale gradient matching loss of the SSI residual.
#[pyfunction]
#[pyo3(signature = (pred, gt, mask=None, n_scales=4))]
fn gradient_matching_loss(
    pred: Vec<Vec<f64>>,
    gt: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
    n_scales: usize,
) -> PyResult<f64> {
    let gt = disparity(&gt, mask)?;
    let (_, _, flat) = flatten(&pred)?;
    losses::gradient_matching_loss(&flat, &gt, n_scales).map_err(py_err)
}

/// Least-squares scale/shift fit of `pred` to `gt` over valid pixels.
#[pyfunction]
#[pyo3(signature = (pred, gt, mask=None))]
fn align_least_squares(
    pred: Vec<Vec<f64>>,
    gt: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
) -> PyResult<(f64, f64)> {
    let pred = depth(&pred, mask.clone())?;
    let gt = depth(&gt, mask)?;
    metrics::align_least_squares(&pred, &gt).map_err(py_err)
}

/// Mean relative absolute error of `aligned` against `gt`.
#[pyfunction]
#[pyo3(signature = (aligned, gt, mask=None))]
fn absrel(
    aligned: Vec<Vec<f64>>,
    gt: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
) -> PyResult<f64> {
    let aligned = depth(&aligned, mask.clone())?;
    let gt = depth(&gt, mask)?;
    metrics::absrel(&aligned, &gt).map_err(py_err)
}

/// Fraction of pixels with max depth ratio strictly below 1.25.
#[pyfunction]
#[pyo3(signature = (aligned, gt, mask=None))]
fn delta1(
    aligned: Vec<Vec<f64>>,
    gt: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
) -> PyResult<f64> {
    let aligned = depth(&aligned, mask.clone())?;
    let gt = depth(&gt, mask)?;
    metrics::delta1(&aligned, &gt).map_err(py_err)
}

/// ((ya, xa), (yb, xb), closer) with closer "a" or "b".
type PyPair = ((usize, usize), (usize, usize), String);

/// Fraction of pixel pairs whose predicted ordering matches the label.
#[pyfunction]
fn pairwise_accuracy(pred: Vec<Vec<f64>>, pairs: Vec<PyPair>) -> PyResult<f64> {
    let pred = depth(&pred, None)?;
    let pairs: Vec<PixelPair> = pairs
        .into_iter()
        .map(|(a, b, closer)| {
            let closer = match closer.as_str() {
                "a" | "A" => Ok(Closer::A),
                "b" | "B" => Ok(Closer::B),
                other => Err(PyValueError::new_err(format!(
                    "closer must be 'a' or 'b', got {other:?}"
                ))),
            }?;
            Ok(PixelPair { a, b, closer })
        })
        .collect::<PyResult<_>>()?;
    metrics::pairwise_accuracy(&pred, &pairs).map_err(py_err)
}

/// Per-setting mean rank; directions are "lower" or "higher" per column.
#[pyfunction]
fn average_rank(table: Vec<Vec<f64>>, directions: Vec<String>) -> PyResult<Vec<f64>> {
    let dirs: Vec<Direction> = directions
        .iter()
        .map(|d| match d.as_str() {
            "lower" => Ok(Direction::LowerBetter),
            "higher" => Ok(Direction::HigherBetter),
            other => Err(PyValueError::new_err(format!(
                "direction must be 'lower' or 'higher', got {other:?}"
            ))),
        })
        .collect::<PyResult<_>>()?;
    metrics::average_rank(&table, &dirs).map_err(py_err)
}

/// Compare gate gradients against central finite differences. Returns
/// (worst_relative_error, worst_parameter, components_checked).
#[pyfunction]
#[pyo3(signature = (seed=0, instances=4))]
fn gradcheck(seed: u64, instances: usize) -> PyResult<(f64, String, usize)> {
    let report = briges_core::gradcheck::gradcheck(seed, instances, None).map_err(py_err)?;
    Ok((report.worst_rel, report.worst_param, report.components))
}

/// The full pipeline: frozen stub encoders/decoder, four trainable gates,
/// and the hidden reference gates behind the synthetic targets.
#[pyclass]
struct Model {
    inner: StubModel,
}

#[pymethods]
impl Model {
    /// Build a model from flat `key = value` config text (defaults apply
    /// for omitted keys; None uses the desk-scale defaults).
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<String>) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => ModelConfig::parse(&text).map_err(py_err)?,
            None => ModelConfig::default(),
        };
        Ok(Model {
            inner: StubModel::new(cfg).map_err(py_err)?,
        })
    }

    /// Load a checkpoint written by `save` or the command-line trainer.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: read_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&path, &self.inner).map_err(py_err)
    }

    fn config_text(&self) -> String {
        self.inner.config().to_text()
    }

    fn frozen_digest(&self) -> String {
        self.inner.frozen_digest()
    }

    /// Copy the hidden reference gates into the trainable slots.
    fn use_reference_gates(&mut self) {
        self.inner.set_gates_to_reference();
    }

    /// Predicted raster for one sample seed. `tau` defaults to the
    /// config's inference temperature.
    #[pyo3(signature = (seed, tau=None))]
    fn forward(&self, seed: u64, tau: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
        let tau = tau.unwrap_or(self.inner.config().tau_inference);
        let (raster, _) = self.inner.forward(seed, tau).map_err(py_err)?;
        let cfg = self.inner.config();
        Ok(unflatten(&raster, cfg.out_h, cfg.out_w))
    }

    /// Attention records of one forward pass: a list of dicts with gate,
    /// block, weights, and per-row entropy.
    #[pyo3(signature = (seed, tau=None))]
    fn attention(&self, py: Python<'_>, seed: u64, tau: Option<f64>) -> PyResult<Vec<Py<PyDict>>> {
        let tau = tau.unwrap_or(self.inner.config().tau_inference);
        let (_, records) = self.inner.forward(seed, tau).map_err(py_err)?;
        records
            .iter()
            .map(|rec| {
                let d = PyDict::new(py);
                d.set_item("gate", rec.gate_index)?;
                d.set_item("block", rec.block.label())?;
                d.set_item(
                    "weights",
                    unflatten(rec.weights.data(), rec.rows(), rec.keys()),
                )?;
                d.set_item("entropy", gate::attention_entropy(rec))?;
                Ok(d.unbind())
            })
            .collect()
    }

    /// Ground-truth disparity raster for one sample seed.
    fn make_target(&self, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let target = self.inner.make_target(seed).map_err(py_err)?;
        Ok(unflatten(&target.values, target.h, target.w))
    }

    /// Gate-only training. Returns (step, lr, loss) tuples.
    #[pyo3(signature = (run_seed, steps=None, batch=None))]
    fn train(
        &mut self,
        run_seed: u64,
        steps: Option<usize>,
        batch: Option<usize>,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let steps = steps.unwrap_or(self.inner.config().steps);
        let batch = batch.unwrap_or(self.inner.config().batch);
        let log = self.inner.train(run_seed, steps, batch).map_err(py_err)?;
        Ok(log.entries.iter().map(|e| (e.step, e.lr, e.loss)).collect())
    }

    /// Aggregate evaluation over sample seeds; per-seed reports included.
    #[pyo3(signature = (seeds, tau=None))]
    fn evaluate(&self, py: Python<'_>, seeds: Vec<u64>, tau: Option<f64>) -> PyResult<Py<PyDict>> {
        let tau = tau.unwrap_or(self.inner.config().tau_inference);
        let report = self.inner.evaluate(&seeds, tau).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("absrel", report.aggregate.absrel)?;
        out.set_item("delta1", report.aggregate.delta1)?;
        out.set_item("scale", report.aggregate.scale)?;
        out.set_item("shift", report.aggregate.shift)?;
        out.set_item("n_valid", report.aggregate.n_valid)?;
        let per_seed: Vec<Py<PyDict>> = report
            .per_seed
            .iter()
            .map(|(seed, r)| {
                let d = PyDict::new(py);
                d.set_item("seed", seed)?;
                d.set_item("absrel", r.absrel)?;
                d.set_item("delta1", r.delta1)?;
                d.set_item("scale", r.scale)?;
                d.set_item("shift", r.shift)?;
                d.set_item("n_valid", r.n_valid)?;
                Ok(d.unbind())
            })
            .collect::<PyResult<_>>()?;
        out.set_item("per_seed", per_seed)?;
        Ok(out.unbind())
    }
}

#[pymodule]
fn briges(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(attention_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_resize, m)?)?;
    m.add_function(wrap_pyfunction!(max_pool_2x2, m)?)?;
    m.add_function(wrap_pyfunction!(align_semantic, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_image, m)?)?;
    m.add_function(wrap_pyfunction!(depth_to_normalized_disparity, m)?)?;
    m.add_function(wrap_pyfunction!(ssi_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(affine_invariant_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_matching_loss, m)?)?;
    m.add_function(wrap_pyfunction!(align_least_squares, m)?)?;
    m.add_function(wrap_pyfunction!(absrel, m)?)?;
    m.add_function(wrap_pyfunction!(delta1, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(average_rank, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
