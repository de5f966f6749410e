//! Python bindings: the core tensor/attention operations plus a trainable
//! language model, exposed as the `seqformer_py` extension module.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use seqformer_core::attention::{self, HeadParams, MaskMode, MHSAParams};
use seqformer_core::block::{self, NormParams};
use seqformer_core::checkpoint;
use seqformer_core::config::RunConfig;
use seqformer_core::data::Vocab;
use seqformer_core::embed;
use seqformer_core::error::Error as CoreError;
use seqformer_core::model::{self, HeadKind, ModelConfig, ModelParams, Sampler};
use seqformer_core::tensor::Tensor as CoreTensor;
use seqformer_core::train;

fn to_py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn mask_mode(causal: bool) -> MaskMode {
    if causal {
        MaskMode::Causal
    } else {
        MaskMode::None
    }
}

/// Dense 2-D array of f64, features down the rows, sequence across columns.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: CoreTensor,
}

#[pymethods]
impl Tensor {
    /// Build from nested rows: Tensor([[1.0, 2.0], [3.0, 4.0]]).
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Tensor {
            inner: CoreTensor::from_rows(&rows).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            inner: CoreTensor::zeros(rows, cols),
        }
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        Tensor {
            inner: CoreTensor::identity(n),
        }
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn tolist(&self) -> Vec<Vec<f64>> {
        (0..self.inner.rows())
            .map(|r| (0..self.inner.cols()).map(|c| self.inner.get(r, c)).collect())
            .collect()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<f64> {
        if row >= self.inner.rows() || col >= self.inner.cols() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(row, col))
    }

    fn matmul(&self, other: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.matmul(&other.inner).map_err(to_py_err)?,
        })
    }

    fn add(&self, other: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.add(&other.inner).map_err(to_py_err)?,
        })
    }

    fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            inner: self.inner.scale(factor),
        }
    }

    fn hadamard(&self, other: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.hadamard(&other.inner).map_err(to_py_err)?,
        })
    }

    fn transpose(&self) -> Tensor {
        Tensor {
            inner: self.inner.transpose(),
        }
    }

    fn column_softmax(&self) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.column_softmax().map_err(to_py_err)?,
        })
    }

    fn column_mean_var(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.column_mean_var()
    }

    fn __repr__(&self) -> String {
        format!("Tensor({}x{})", self.inner.rows(), self.inner.cols())
    }
}

/// Attention matrix A with A[key, query] = softmax over keys of k.q.
#[pyfunction]
#[pyo3(signature = (x, u_q, u_k, causal = false, scale = true))]
fn attention_weights(
    x: &Tensor,
    u_q: &Tensor,
    u_k: &Tensor,
    causal: bool,
    scale: bool,
) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: attention::attention_weights(
            &x.inner,
            &u_q.inner,
            &u_k.inner,
            mask_mode(causal),
            scale,
        )
        .map_err(to_py_err)?,
    })
}

/// Weighted average of input columns: Y = X A.
#[pyfunction]
fn apply_attention(x: &Tensor, a: &Tensor) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: attention::apply_attention(&x.inner, &a.inner).map_err(to_py_err)?,
    })
}

/// Multi-head self-attention; heads are (u_q, u_k, v) triples.
#[pyfunction]
#[pyo3(signature = (x, heads, causal = false, scale = true))]
fn mhsa_forward(
    x: &Tensor,
    heads: Vec<(Tensor, Tensor, Tensor)>,
    causal: bool,
    scale: bool,
) -> PyResult<Tensor> {
    let heads = heads
        .into_iter()
        .map(|(u_q, u_k, v)| HeadParams::new(u_q.inner, u_k.inner, v.inner))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py_err)?;
    let params = MHSAParams::new(heads, scale).map_err(to_py_err)?;
    Ok(Tensor {
        inner: attention::mhsa_forward(&x.inner, &params, mask_mode(causal)).map_err(to_py_err)?,
    })
}

/// Per-token standardisation with learned scale and shift.
#[pyfunction]
#[pyo3(signature = (x, gamma, beta, epsilon = 1e-5))]
fn token_norm(x: &Tensor, gamma: Vec<f64>, beta: Vec<f64>, epsilon: f64) -> PyResult<Tensor> {
    let d = gamma.len();
    let params = NormParams {
        gamma: CoreTensor::new(d, 1, gamma).map_err(to_py_err)?,
        beta: CoreTensor::new(beta.len(), 1, beta).map_err(to_py_err)?,
        epsilon,
    };
    Ok(Tensor {
        inner: block::token_norm(&x.inner, &params).map_err(to_py_err)?,
    })
}

/// Fixed sinusoid position table (D x N).
#[pyfunction]
fn sinusoidal_positions(d: usize, n: usize) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: embed::sinusoidal_positions(d, n).map_err(to_py_err)?,
    })
}

/// Run the built-in invariant suite; returns True when every check passes.
#[pyfunction]
fn selftest() -> PyResult<bool> {
    let mut sink = Vec::new();
    seqformer_core::selftest::run(&mut sink).map_err(to_py_err)
}

/// A trained (or freshly trainable) character-level language model.
#[pyclass]
struct Model {
    params: ModelParams,
    config: ModelConfig,
    losses: Vec<f64>,
}

#[pymethods]
impl Model {
    /// Train on a corpus string using the `key = value` run configuration.
    #[staticmethod]
    fn train_lm(config_text: &str, corpus: &str) -> PyResult<Model> {
        let rc = RunConfig::parse(config_text).map_err(to_py_err)?;
        if rc.head != HeadKind::Lm {
            return Err(PyValueError::new_err("train_lm requires head = lm"));
        }
        let vocab = Vocab::from_corpus(corpus.as_bytes()).map_err(to_py_err)?;
        let ids = vocab.encode(corpus.as_bytes()).map_err(to_py_err)?;
        let config = rc.to_lm_model_config(vocab).map_err(to_py_err)?;
        let (params, losses) =
            train::train_lm(&config, &rc.optim, rc.seq_len, &ids).map_err(to_py_err)?;
        Ok(Model {
            params,
            config,
            losses,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let (params, config) = checkpoint::load_checkpoint(path.as_ref()).map_err(to_py_err)?;
        Ok(Model {
            params,
            config,
            losses: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.params, &self.config, path.as_ref()).map_err(to_py_err)
    }

    /// Per-step training losses from the run that produced this model.
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Prompt plus sampled continuation; greedy unless a temperature is given.
    #[pyo3(signature = (prompt, steps, temperature = None, seed = 0))]
    fn generate(
        &self,
        prompt: &str,
        steps: usize,
        temperature: Option<f64>,
        seed: u64,
    ) -> PyResult<String> {
        let vocab = match &self.config.task {
            seqformer_core::model::TaskConfig::Lm { vocab, .. } => vocab.clone(),
            _ => return Err(PyValueError::new_err("not a language model")),
        };
        let prompt_ids = vocab.encode(prompt.as_bytes()).map_err(to_py_err)?;
        let sampler = match temperature {
            Some(t) => Sampler::Temperature(t),
            None => Sampler::Greedy,
        };
        let ids = model::generate(&self.params, &self.config, &prompt_ids, steps, sampler, seed)
            .map_err(to_py_err)?;
        let bytes = vocab.decode(&ids).map_err(to_py_err)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Mean next-token cross-entropy of a text under this model, in nats.
    fn loss(&self, text: &str) -> PyResult<f64> {
        let vocab = match &self.config.task {
            seqformer_core::model::TaskConfig::Lm { vocab, .. } => vocab.clone(),
            _ => return Err(PyValueError::new_err("not a language model")),
        };
        let ids = vocab.encode(text.as_bytes()).map_err(to_py_err)?;
        model::lm_loss(&ids, &self.params, &self.config).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(d={}, heads={}, layers={}, params={})",
            self.config.d,
            self.config.n_heads,
            self.config.n_layers,
            self.params.param_count()
        )
    }
}

#[pymodule]
fn seqformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(attention_weights, m)?)?;
    m.add_function(wrap_pyfunction!(apply_attention, m)?)?;
    m.add_function(wrap_pyfunction!(mhsa_forward, m)?)?;
    m.add_function(wrap_pyfunction!(token_norm, m)?)?;
    m.add_function(wrap_pyfunction!(sinusoidal_positions, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
