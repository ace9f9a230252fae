//! Python module `aapt`.

use std::sync::Arc;

use aapt_core::checkpoint::Checkpoint;
use aapt_core::config::{RunConfig, Stage};
use aapt_core::pipeline::{control_episode, generate_episode, load_checkpoint};
use aapt_core::stream::{decode_frame_stream, FrameOut};
use aapt_core::AaptError;
use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: AaptError) -> PyErr {
    match e {
        AaptError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => PyFileNotFoundError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// `(key, default, doc)` for every config key.
#[pyfunction]
fn config_keys() -> Vec<(String, String, String)> {
    aapt_core::config::keys().into_iter().map(|(k, v, d)| (k.to_string(), v, d.to_string())).collect()
}

/// Parses a flat config and returns its fully resolved text.
#[pyfunction]
fn resolve_config(text: &str) -> PyResult<String> {
    Ok(RunConfig::parse(text).map_err(err)?.resolved())
}

/// Stage name and `(name, shape, byte offset)` manifest of a checkpoint.
#[pyfunction]
fn checkpoint_manifest(path: &str) -> PyResult<(String, Vec<(String, Vec<usize>, u64)>)> {
    let ck = Checkpoint::load(path).map_err(err)?;
    Ok((ck.stage.name().to_string(), ck.manifest().into_iter().map(|e| (e.name, e.shape, e.offset)).collect()))
}

/// Streams `frames` pixel frames from a stage2 or stage3 checkpoint and
/// returns them as concatenated frame records.
#[pyfunction]
fn generate<'py>(py: Python<'py>, path: &str, frames: usize, seed: u64) -> PyResult<Bound<'py, PyBytes>> {
    let ck = Checkpoint::load(path).map_err(err)?;
    if !matches!(ck.stage, Stage::Stage2 | Stage::Stage3) {
        return Err(err(AaptError::Provenance { expected: "stage2 or stage3".into(), found: ck.stage.name().into() }));
    }
    let mut cfg = ck.run_config().map_err(err)?;
    cfg.seed = seed;
    let l = load_checkpoint(&ck).map_err(err)?;
    let gen = Arc::new(l.gen.ok_or_else(|| PyValueError::new_err("checkpoint has no generator"))?);
    let ep = control_episode(&cfg, &l.stats, seed, frames).map_err(err)?;
    let out = generate_episode(&gen, &l.codec, &ep, seed, false).map_err(err)?;
    let mut bin = Vec::new();
    for t in 0..frames {
        bin.extend_from_slice(&FrameOut::from_video(&out.video, t, t as u32).map_err(err)?.encode());
    }
    Ok(PyBytes::new(py, &bin))
}

/// Splits frame records into `(frame_index, width, height, rgb)` tuples.
#[pyfunction]
fn decode_frames<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Vec<(u32, u16, u16, Bound<'py, PyBytes>)>> {
    let frames = decode_frame_stream(data).map_err(err)?;
    Ok(frames.into_iter().map(|f| (f.frame_index, f.width, f.height, PyBytes::new(py, &f.rgb))).collect())
}

#[pymodule]
fn aapt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FRAME_MAGIC", PyBytes::new(m.py(), aapt_core::stream::FRAME_MAGIC))?;
    m.add_function(wrap_pyfunction!(config_keys, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frames, m)?)?;
    Ok(())
}
