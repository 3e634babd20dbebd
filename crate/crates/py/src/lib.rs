//! Python bindings: presets, statistics helpers and checkpoint inference.
//!
//! Errors surface as `destyle.DestyleError` with the library's error code
//! in `args[0]` and the message in `args[1]`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use destyle_core::analysis;
use destyle_core::checkpoint;
use destyle_core::experiment::ExperimentConfig;
use destyle_core::filters::PresetRegistry;
use destyle_core::network::Network;
use destyle_core::Image;

create_exception!(destyle, DestyleError, PyException);

fn err(e: destyle_core::Error) -> PyErr {
    DestyleError::new_err((e.code(), e.to_string()))
}

/// Names of the built-in presets, in registry order.
#[pyfunction]
fn preset_names() -> Vec<String> {
    PresetRegistry::builtin().names().into_iter().map(str::to_string).collect()
}

/// Applies a built-in preset to interleaved RGB values in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (name, width, height, pixels, intensity = 1.0))]
fn apply_preset(name: &str, width: usize, height: usize, pixels: Vec<f64>, intensity: f64) -> PyResult<Vec<f64>> {
    let reg = PresetRegistry::builtin();
    let preset = reg.get(name).map_err(err)?.with_intensity(intensity);
    let img = Image::new(width, height, pixels).map_err(err)?;
    Ok(preset.apply(&img).map_err(err)?.pixels().to_vec())
}

/// Symmetric KL divergence between two 1-D Gaussians.
#[pyfunction]
fn sym_kl_gaussian(mu_a: f64, var_a: f64, mu_b: f64, var_b: f64) -> PyResult<f64> {
    analysis::sym_kl_gaussian(mu_a, var_a, mu_b, var_b).map_err(err)
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    analysis::spearman(&xs, &ys).map_err(err)
}

/// Parses and validates an experiment config; returns its canonical JSON.
#[pyfunction]
fn canonical_config(text: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(text).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg.to_json())
}

/// A network loaded from a checkpoint, in inference mode.
#[pyclass(module = "destyle")]
struct Model {
    net: Network,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            net: checkpoint::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.net.spec().num_classes
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.net.spec().input_size
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.net.base_param_count()
    }

    /// Class logits for one image of interleaved RGB values.
    fn logits(&self, width: usize, height: usize, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let img = Image::new(width, height, pixels).map_err(err)?;
        let x = Image::batch_to_tensor(&[&img]).map_err(err)?;
        Ok(self.net.logits(&x).map_err(err)?.into_data())
    }
}

#[pymodule]
fn destyle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DestyleError", m.py().get_type::<DestyleError>())?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(apply_preset, m)?)?;
    m.add_function(wrap_pyfunction!(sym_kl_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_config, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
