//! Python bindings: load models, compress and decompress images, score them.
//!
//! Images cross the boundary as `(height, width, pixels)` where `pixels` is a
//! flat row-major list of RGB values in `[0, 1]`.

use cpdc::autoencoder::TrainConfig;
use cpdc::codec::{self, Bitstream};
use cpdc::data::{procedural_corpus, Dataset};
use cpdc::model_file::{self, LoadedModel};
use cpdc::tensor::Tensor;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use std::path::PathBuf;

fn err(e: cpdc::Error) -> PyErr {
    match e {
        cpdc::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Image = (usize, usize, Vec<f64>);

pub fn to_tensor(height: usize, width: usize, pixels: Vec<f64>) -> cpdc::Result<Tensor> {
    Tensor::new(&[height, width, 3], pixels)
}

pub fn from_tensor(x: Tensor) -> Image {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    (h, w, x.into_data())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A trained model as stored in a model file.
#[pyclass(name = "Model", module = "cpdc_py")]
pub struct PyModel {
    inner: LoadedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: model_file::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyModel {
            inner: model_file::from_bytes(data).map_err(err)?,
        })
    }

    /// Latent channels `K`.
    #[getter]
    fn channels(&self) -> usize {
        self.inner.model.channels()
    }

    /// Quantization centers `L`.
    #[getter]
    fn num_symbols(&self) -> usize {
        self.inner.model.num_symbols()
    }

    #[getter]
    fn centers(&self) -> Vec<f64> {
        self.inner.model.centers.values().to_vec()
    }

    /// Identifier written into every bitstream, as hex.
    #[getter]
    fn hash(&self) -> String {
        hex(&self.inner.hash)
    }

    /// Compresses an image; returns the bitstream file contents.
    fn compress<'py>(&mut self, py: Python<'py>, height: usize, width: usize, pixels: Vec<f64>) -> PyResult<Bound<'py, PyBytes>> {
        let x = to_tensor(height, width, pixels).map_err(err)?;
        let c = codec::compress_image(&mut self.inner.model, self.inner.hash, &x).map_err(err)?;
        Ok(PyBytes::new(py, &c.bitstream.to_bytes()))
    }

    /// Reconstruction `(height, width, pixels)` from bitstream bytes.
    fn decompress(&mut self, data: &[u8]) -> PyResult<Image> {
        let bs = Bitstream::from_bytes(data).map_err(err)?;
        let x = codec::decompress_image(&mut self.inner.model, self.inner.hash, &bs).map_err(err)?;
        Ok(from_tensor(x))
    }

    /// Model-predicted coding cost and masked coding cost of an image, in bits.
    fn coding_cost(&mut self, height: usize, width: usize, pixels: Vec<f64>) -> PyResult<(f64, f64)> {
        let x = to_tensor(height, width, pixels).map_err(err)?;
        let c = codec::compress_image(&mut self.inner.model, self.inner.hash, &x).map_err(err)?;
        Ok((c.coding_cost, c.masked_coding_cost))
    }

    fn __repr__(&self) -> String {
        format!("Model(K={}, L={}, hash={})", self.channels(), self.num_symbols(), self.hash())
    }
}

/// Payload bits per pixel of a bitstream (header excluded).
#[pyfunction]
fn bitstream_bpp(data: &[u8]) -> PyResult<f64> {
    Ok(Bitstream::from_bytes(data).map_err(err)?.bpp())
}

#[pyfunction]
fn read_image(path: PathBuf) -> PyResult<Image> {
    Ok(from_tensor(cpdc::image_io::read_image(&path).map_err(err)?))
}

#[pyfunction]
fn write_image(path: PathBuf, height: usize, width: usize, pixels: Vec<f64>) -> PyResult<()> {
    let x = to_tensor(height, width, pixels).map_err(err)?;
    cpdc::image_io::write_ppm(&path, &x).map_err(err)
}

/// MS-SSIM of two images of the same size with the default configuration.
#[pyfunction]
fn ms_ssim(height: usize, width: usize, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    let a = to_tensor(height, width, x).map_err(err)?;
    let b = to_tensor(height, width, y).map_err(err)?;
    cpdc::metrics::ms_ssim(&a, &b, &Default::default()).map_err(err)
}

/// A deterministic procedural test texture.
#[pyfunction]
fn procedural_texture(seed: u64, height: usize, width: usize) -> Image {
    from_tensor(cpdc::data::procedural_texture(seed, height, width))
}

/// Trains a model and writes it to `out`; returns the model hash.
///
/// `config` is TOML with the same keys as the `[train]` table of the CLI config.
#[pyfunction]
#[pyo3(signature = (out, data_dir=None, procedural=0, config=None))]
fn train(py: Python<'_>, out: PathBuf, data_dir: Option<PathBuf>, procedural: usize, config: Option<&str>) -> PyResult<String> {
    let cfg: TrainConfig = match config {
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let mut data = match data_dir {
        Some(d) => Dataset::load_dir(&d).map_err(err)?,
        None => Dataset::default(),
    };
    if procedural > 0 {
        data.extend(procedural_corpus(cfg.seed, procedural, 128));
    }
    let hash = py.detach(|| -> cpdc::Result<[u8; 8]> {
        let model = cpdc::autoencoder::train(&cfg, &data, |_| Ok(()))?;
        model_file::save(&out, &model, Some(&cfg))
    });
    Ok(hex(&hash.map_err(err)?))
}

#[pymodule]
fn cpdc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(bitstream_bpp, m)?)?;
    m.add_function(wrap_pyfunction!(read_image, m)?)?;
    m.add_function(wrap_pyfunction!(write_image, m)?)?;
    m.add_function(wrap_pyfunction!(ms_ssim, m)?)?;
    m.add_function(wrap_pyfunction!(procedural_texture, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
