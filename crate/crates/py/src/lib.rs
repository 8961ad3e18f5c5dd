//! Python bindings: wire codec, metrics, config helpers and whole-pipeline
//! entry points. Configs cross the boundary as JSON text.

use codealign::codespace::CodeMap;
use codealign::config::RunConfig;
use codealign::dataset::{make_dataset, DatasetStore};
use codealign::eval::{ap_from_pairs, run_experiment as run, Suite};
use codealign::wire::{self, CodeMessage, MessageMeta};
use codealign::{Error, Pose, RngSeed};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::Config(_)
        | Error::Json(_)
        | Error::Shape(_)
        | Error::Index(_)
        | Error::Encode(_)
        | Error::Corruption(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config_from(json: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut c = match json {
        Some(text) => RunConfig::from_json(text).map_err(py_err)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        c.seed = RngSeed(s);
    }
    c.validate().map_err(py_err)?;
    Ok(c)
}

/// `32 * C / ceil(log2 D)`.
#[pyfunction]
fn compression_ratio(channels: usize, codebook_size: usize) -> PyResult<f64> {
    wire::compression_ratio(channels, codebook_size).map_err(py_err)
}

#[pyfunction]
fn payload_len(height: usize, width: usize, codebook_size: usize) -> PyResult<usize> {
    wire::payload_len(height, width, codebook_size).map_err(py_err)
}

/// Serializes a code map into a wire message.
#[pyfunction]
#[pyo3(signature = (height, width, indices, codebook_size, owner, sender_id=0, scene_id=0, pose=(0.0, 0.0, 0.0)))]
#[allow(clippy::too_many_arguments)]
fn pack_code_map<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    indices: Vec<u16>,
    codebook_size: usize,
    owner: &str,
    sender_id: u32,
    scene_id: u32,
    pose: (f64, f64, f64),
) -> PyResult<Bound<'py, PyBytes>> {
    let map = CodeMap::new(height, width, indices, owner, codebook_size).map_err(py_err)?;
    let meta = MessageMeta {
        sender_id,
        scene_id,
        pose: Pose::new(pose.0, pose.1, pose.2),
    };
    let msg = wire::pack(&map, &meta).map_err(py_err)?;
    Ok(PyBytes::new(py, &msg.to_bytes()))
}

/// Parses a wire message into a dict of its fields.
#[pyfunction]
fn unpack_code_map<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let msg = CodeMessage::from_bytes(data).map_err(py_err)?;
    let (map, meta) = wire::unpack(&msg).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("height", map.height())?;
    d.set_item("width", map.width())?;
    d.set_item("codebook_size", map.codebook_size())?;
    d.set_item("owner", map.owner())?;
    d.set_item("indices", map.indices().to_vec())?;
    d.set_item("sender_id", meta.sender_id)?;
    d.set_item("scene_id", meta.scene_id)?;
    d.set_item("pose", (meta.pose.x, meta.pose.y, meta.pose.heading))?;
    d.set_item("payload_bytes", msg.payload.len())?;
    d.set_item("header_bytes", msg.header_len())?;
    Ok(d)
}

/// Threshold-free average precision of scores against binary labels.
#[pyfunction]
fn cell_ap(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    ap_from_pairs(scores.into_iter().zip(labels).collect()).map_err(py_err)
}

#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&RunConfig::default()).map_err(|e| py_err(e.into()))
}

#[pyfunction]
#[pyo3(signature = (config_json=None, seed=None))]
fn config_hash(config_json: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    config_from(config_json, seed)?.hash().map_err(py_err)
}

/// Writes the dataset directory and returns its manifest hash.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None, seed=None))]
fn generate_dataset(py: Python<'_>, out_dir: &str, config_json: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let c = config_from(config_json, seed)?;
    py.detach(|| {
        let d = make_dataset(&c.dataset, c.seed)?;
        DatasetStore::write(out_dir, &d)?;
        Ok(d.manifest.config_hash)
    })
    .map_err(py_err)
}

/// Generates data, trains every stage and runs `suites` in memory; returns
/// report JSON. Writes report files too when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=None, suites=None, out_dir=None))]
fn run_experiment(
    py: Python<'_>,
    config_json: Option<&str>,
    seed: Option<u64>,
    suites: Option<Vec<String>>,
    out_dir: Option<&str>,
) -> PyResult<String> {
    let c = config_from(config_json, seed)?;
    let suites = match suites {
        Some(names) => names.iter().map(|s| Suite::parse(s)).collect::<Result<Vec<_>, _>>().map_err(py_err)?,
        None => Suite::ALL.to_vec(),
    };
    py.detach(|| {
        let data = make_dataset(&c.dataset, c.seed)?;
        let report = run(&data, &c, &suites)?;
        if let Some(dir) = out_dir {
            report.write(std::path::Path::new(dir))?;
        }
        report.to_json()
    })
    .map_err(py_err)
}

#[pymodule]
pub fn codealign_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compression_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(payload_len, m)?)?;
    m.add_function(wrap_pyfunction!(pack_code_map, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_code_map, m)?)?;
    m.add_function(wrap_pyfunction!(cell_ap, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
