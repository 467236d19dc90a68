//! Python bindings: dataset generation and IO, training, evaluation, guide
//! extraction, metrics, and the gradient-check suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use tokenguide::checkpoint::load_checkpoint;
use tokenguide::metrics::{evaluate_dataset, hd95 as hd95_rs, overlap_metrics};
use tokenguide::model::TrainMode;
use tokenguide::synth::{
    generate_dataset as gen_rs, read_dataset, write_dataset, BinaryMask, SynthConfig,
    TextureProfile,
};
use tokenguide::train::{train as train_rs, TrainConfig};

fn to_py_err(e: tokenguide::Error) -> PyErr {
    match e {
        tokenguide::Error::Io(_) | tokenguide::Error::Format { .. } => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<TrainMode> {
    match mode {
        "baseline" => Ok(TrainMode::Baseline),
        "guided" => Ok(TrainMode::GuidedFrozen),
        "guided-lora" => Ok(TrainMode::GuidedLora),
        other => Err(PyValueError::new_err(format!(
            "unknown mode '{other}' (expected baseline | guided | guided-lora)"
        ))),
    }
}

fn mask_from_rows(rows: Vec<Vec<u8>>) -> PyResult<BinaryMask> {
    let h = rows.len();
    let w = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(h * w);
    for r in &rows {
        if r.len() != w {
            return Err(PyValueError::new_err("ragged mask rows"));
        }
        flat.extend_from_slice(r);
    }
    BinaryMask::from_vec(h, w, flat).map_err(to_py_err)
}

/// Generate a synthetic dataset and write it as a GDS1 file.
#[pyfunction]
#[pyo3(signature = (path, n, size=64, contrast=0.25, noise_sigma=0.1, seed=0, shifted=false))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    path: PathBuf,
    n: usize,
    size: usize,
    contrast: f64,
    noise_sigma: f64,
    seed: u64,
    shifted: bool,
) -> PyResult<usize> {
    let cfg = SynthConfig {
        size,
        n_samples: n,
        contrast,
        noise_sigma,
        texture: if shifted { TextureProfile::Shifted } else { TextureProfile::Default },
        seed,
        ..Default::default()
    };
    let (samples, _warnings) = gen_rs(&cfg);
    write_dataset(&samples, &path).map_err(to_py_err)?;
    Ok(samples.len())
}

/// Load one sample: (image rows, mask rows).
#[pyfunction]
fn load_sample(path: PathBuf, index: usize) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<u8>>)> {
    let samples = read_dataset(&path).map_err(to_py_err)?;
    let s = samples
        .get(index)
        .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
    let (h, w) = (s.mask.h(), s.mask.w());
    let image = (0..h).map(|y| s.image.data()[y * w..(y + 1) * w].to_vec()).collect();
    let mask = (0..h).map(|y| s.mask.data()[y * w..(y + 1) * w].to_vec()).collect();
    Ok((image, mask))
}

#[pyfunction]
fn dataset_len(path: PathBuf) -> PyResult<usize> {
    Ok(read_dataset(&path).map_err(to_py_err)?.len())
}

/// Train a model; returns (best_val_dsc, best_epoch) and writes the checkpoint.
#[pyfunction]
#[pyo3(signature = (data, val, mode, out, epochs=30, seed=1, lambda_=0.5, patch=8, dim=64,
                    enc_depth=4, heads=4, base_channels=16, unet_depth=3, book_k=16))]
#[allow(clippy::too_many_arguments)]
fn train(
    data: PathBuf,
    val: PathBuf,
    mode: &str,
    out: PathBuf,
    epochs: usize,
    seed: u64,
    lambda_: f64,
    patch: usize,
    dim: usize,
    enc_depth: usize,
    heads: usize,
    base_channels: usize,
    unet_depth: usize,
    book_k: usize,
) -> PyResult<(f64, usize)> {
    let mode = parse_mode(mode)?;
    let mut cfg = TrainConfig { epochs, seeds: vec![seed], ..Default::default() };
    cfg.loss.lambda = lambda_;
    cfg.encoder.patch = patch;
    cfg.encoder.dim = dim;
    cfg.encoder.depth = enc_depth;
    cfg.encoder.heads = heads;
    cfg.book.k = book_k;
    cfg.unet.base_channels = base_channels;
    cfg.unet.depth = unet_depth;
    cfg.unet.gate_stages = (0..unet_depth).collect();
    let train_set = read_dataset(&data).map_err(to_py_err)?;
    let val_set = read_dataset(&val).map_err(to_py_err)?;
    let result = train_rs(mode, &cfg, &train_set, &val_set).map_err(to_py_err)?;
    let summary = (result.best_val_dsc, result.best_epoch);
    let ckpt = result.into_checkpoint(&cfg);
    tokenguide::checkpoint::save_checkpoint(&ckpt, &out).map_err(to_py_err)?;
    Ok(summary)
}

/// Evaluate a checkpoint on a dataset; returns the metrics report as JSON.
#[pyfunction]
#[pyo3(signature = (ckpt, data, tta=false))]
fn evaluate(ckpt: PathBuf, data: PathBuf, tta: bool) -> PyResult<String> {
    let checkpoint = load_checkpoint(&ckpt).map_err(to_py_err)?;
    let model = checkpoint.build_model().map_err(to_py_err)?;
    let samples = read_dataset(&data).map_err(to_py_err)?;
    let report =
        evaluate_dataset(&model, &samples, tta, vec![checkpoint.meta.seed]).map_err(to_py_err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Guide mask of one sample at image resolution, as rows of floats in (0,1).
#[pyfunction]
fn guide_mask(ckpt: PathBuf, data: PathBuf, index: usize) -> PyResult<Vec<Vec<f32>>> {
    let checkpoint = load_checkpoint(&ckpt).map_err(to_py_err)?;
    let model = checkpoint.build_model().map_err(to_py_err)?;
    let samples = read_dataset(&data).map_err(to_py_err)?;
    let s = samples
        .get(index)
        .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
    let (_, guide) = model.forward_logits(&s.image).map_err(to_py_err)?;
    let guide = guide.ok_or_else(|| {
        PyValueError::new_err("checkpoint has no guide components (baseline mode)")
    })?;
    Ok((0..guide.h).map(|y| guide.values.data()[y * guide.w..(y + 1) * guide.w].to_vec()).collect())
}

/// Predicted binary mask of one sample.
#[pyfunction]
#[pyo3(signature = (ckpt, data, index, tta=false))]
fn predict_mask(ckpt: PathBuf, data: PathBuf, index: usize, tta: bool) -> PyResult<Vec<Vec<u8>>> {
    use tokenguide::metrics::Predictor;
    let checkpoint = load_checkpoint(&ckpt).map_err(to_py_err)?;
    let model = checkpoint.build_model().map_err(to_py_err)?;
    let samples = read_dataset(&data).map_err(to_py_err)?;
    let s = samples
        .get(index)
        .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
    let mask = model.predict_mask(&s.image, tta).map_err(to_py_err)?;
    let (h, w) = (mask.h(), mask.w());
    Ok((0..h).map(|y| mask.data()[y * w..(y + 1) * w].to_vec()).collect())
}

/// IoU and Dice of two binary masks given as nested rows.
#[pyfunction]
fn overlap(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<(f64, f64)> {
    overlap_metrics(&mask_from_rows(pred)?, &mask_from_rows(gt)?).map_err(to_py_err)
}

/// HD95 surface distance of two binary masks given as nested rows.
#[pyfunction]
fn hd95(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    hd95_rs(&mask_from_rows(pred)?, &mask_from_rows(gt)?).map_err(to_py_err)
}

/// Run the gradient-check suite; returns (op_name, max_rel_err, n_checked).
#[pyfunction]
#[pyo3(signature = (full=false))]
fn gradcheck(full: bool) -> PyResult<Vec<(String, f64, usize)>> {
    let reports = tokenguide::gradcheck::standard_suite(full).map_err(to_py_err)?;
    Ok(reports.into_iter().map(|r| (r.op_name, r.max_rel_err, r.n_params_checked)).collect())
}

#[pyfunction]
fn version() -> &'static str {
    tokenguide::ARTIFACT_VERSION
}

#[pymodule]
fn tokenguide_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_sample, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_len, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(guide_mask, m)?)?;
    m.add_function(wrap_pyfunction!(predict_mask, m)?)?;
    m.add_function(wrap_pyfunction!(overlap, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
