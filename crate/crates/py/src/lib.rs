//! Python bindings: the tensor/tape core plus the end-to-end pipeline
//! (synthetic corpora, training, evaluation, prediction).
//!
//! Build as a cdylib and import as `hlstm_py`; see python/smoke_test.py.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use hlstm::checkpoint::Checkpoint;
use hlstm::data::{
    generate_synthetic, parse_corpus, prepare_reviews, write_corpus, SyntheticSpec, Tokenizer,
};
use hlstm::model::{predict as model_predict, Dims, ModelKind};
use hlstm::train::{evaluate as eval_model, fit, FitOptions, TrainConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

// ── Tensor / tape core ───────────────────────────────────────────────

/// Dense 64-bit tensor, row-major.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: hlstm::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: hlstm::Tensor::new(&shape, values).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: hlstm::Tensor::fill(&shape, 0.0).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn item(&self) -> PyResult<f64> {
        if self.inner.len() != 1 {
            return Err(PyValueError::new_err("item() needs a one-element tensor"));
        }
        Ok(self.inner.data()[0])
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Gradient tape for reverse-mode differentiation. Consumed by
/// `backward`; gradients are then available through `grad`.
#[pyclass(name = "Tape", unsendable)]
struct PyTape {
    tape: RefCell<hlstm::Tape>,
    grads: RefCell<Option<hlstm::GradientMap>>,
}

#[pymethods]
impl PyTape {
    #[new]
    fn new() -> Self {
        PyTape {
            tape: RefCell::new(hlstm::Tape::new()),
            grads: RefCell::new(None),
        }
    }

    /// Register a trainable leaf; gradients accumulate to the returned
    /// tensor's handle.
    fn param(&self, t: &PyTensor) -> PyTensor {
        PyTensor {
            inner: self.tape.borrow_mut().param(&t.inner),
        }
    }

    fn matmul(&self, a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
        self.binop(a, b, |tape, a, b| tape.matmul(a, b))
    }

    fn add(&self, a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
        self.binop(a, b, |tape, a, b| tape.add(a, b))
    }

    fn sub(&self, a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
        self.binop(a, b, |tape, a, b| tape.sub(a, b))
    }

    fn mul(&self, a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
        self.binop(a, b, |tape, a, b| tape.mul(a, b))
    }

    fn concat(&self, a: &PyTensor, b: &PyTensor, axis: usize) -> PyResult<PyTensor> {
        self.binop(a, b, |tape, a, b| tape.concat(a, b, axis))
    }

    fn sigmoid(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.unop(x, |tape, x| tape.sigmoid(x))
    }

    fn tanh(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.unop(x, |tape, x| tape.tanh(x))
    }

    fn softmax(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.unop(x, |tape, x| tape.softmax(x))
    }

    fn sum(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.unop(x, |tape, x| tape.sum(x))
    }

    /// Backpropagate from a scalar loss. May be called once per tape.
    fn backward(&self, loss: &PyTensor) -> PyResult<()> {
        let grads = self.tape.borrow_mut().backward(&loss.inner).map_err(err)?;
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Gradient of the loss w.r.t. a tensor returned by `param`.
    fn grad(&self, t: &PyTensor) -> PyResult<Option<PyTensor>> {
        let borrow = self.grads.borrow();
        let Some(grads) = borrow.as_ref() else {
            return Err(PyValueError::new_err("call backward first"));
        };
        Ok(grads.get(&t.inner).map(|g| PyTensor { inner: g.clone() }))
    }
}

impl PyTape {
    fn binop(
        &self,
        a: &PyTensor,
        b: &PyTensor,
        f: impl FnOnce(
            &mut hlstm::Tape,
            &hlstm::Tensor,
            &hlstm::Tensor,
        ) -> hlstm::Result<hlstm::Tensor>,
    ) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: f(&mut self.tape.borrow_mut(), &a.inner, &b.inner).map_err(err)?,
        })
    }

    fn unop(
        &self,
        x: &PyTensor,
        f: impl FnOnce(&mut hlstm::Tape, &hlstm::Tensor) -> hlstm::Result<hlstm::Tensor>,
    ) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: f(&mut self.tape.borrow_mut(), &x.inner).map_err(err)?,
        })
    }
}

// ── Pipeline functions ───────────────────────────────────────────────

/// Generate deterministic synthetic train/test corpora; returns the two
/// file paths.
#[pyfunction]
#[pyo3(signature = (out_dir, train_reviews=500, test_reviews=200, ambiguity=0.5, seed=42))]
fn synth(
    out_dir: PathBuf,
    train_reviews: usize,
    test_reviews: usize,
    ambiguity: f64,
    seed: u64,
) -> PyResult<(String, String)> {
    let spec = SyntheticSpec {
        train_reviews,
        test_reviews,
        ambiguity_rate: ambiguity,
        seed,
        ..SyntheticSpec::default()
    };
    let (train, test) = generate_synthetic(&spec).map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(err)?;
    let train_path = out_dir.join("train.xml");
    let test_path = out_dir.join("test.xml");
    write_corpus(&train_path, &train).map_err(err)?;
    write_corpus(&test_path, &test).map_err(err)?;
    Ok((
        train_path.display().to_string(),
        test_path.display().to_string(),
    ))
}

#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (corpus, out_dir, *, model="hlstm", seed=42, epochs=200, batch_size=10,
                    lr=0.001, hidden=200, word_dim=300, aspect_dim=15, patience=10,
                    dropout=0.5, val_fraction=0.1, embeddings=None, pretokenized=false))]
fn train(
    py: Python<'_>,
    corpus: PathBuf,
    out_dir: PathBuf,
    model: &str,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    hidden: usize,
    word_dim: usize,
    aspect_dim: usize,
    patience: usize,
    dropout: f64,
    val_fraction: f64,
    embeddings: Option<PathBuf>,
    pretokenized: bool,
) -> PyResult<Py<PyDict>> {
    let reviews = parse_corpus(&corpus).map_err(err)?;
    let opts = FitOptions {
        kind: ModelKind::parse(model).map_err(err)?,
        config: TrainConfig {
            seed,
            max_epochs: epochs,
            batch_size,
            learning_rate: lr,
            patience,
            dropout_rate: dropout,
            val_fraction,
            dims: Dims {
                word: word_dim,
                aspect: aspect_dim,
                hidden,
            },
            ..TrainConfig::default()
        },
        tokenizer: if pretokenized {
            Tokenizer::Pretokenized
        } else {
            Tokenizer::Simple
        },
        embeddings,
    };
    let outcome = fit(&reviews, &opts).map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(err)?;
    let ckpt_path = out_dir.join("model.ckpt");
    outcome.checkpoint.save(&ckpt_path).map_err(err)?;
    std::fs::write(
        out_dir.join("train_report.txt"),
        outcome.report.to_lines(),
    )
    .map_err(err)?;

    let dict = PyDict::new(py);
    dict.set_item("checkpoint", ckpt_path.display().to_string())?;
    dict.set_item("best_epoch", outcome.report.best_epoch)?;
    dict.set_item("stopping_epoch", outcome.report.stopping_epoch)?;
    dict.set_item("has_holdout", outcome.report.has_holdout)?;
    if let Some(c) = outcome.embedding_coverage {
        dict.set_item("embedding_coverage", c)?;
    }
    let epochs_list = PyList::empty(py);
    for r in &outcome.report.epochs {
        let row = PyDict::new(py);
        row.set_item("epoch", r.epoch)?;
        row.set_item("train_loss", r.train_loss)?;
        row.set_item("val_acc", r.val_acc)?;
        row.set_item("elapsed_ms", r.elapsed_ms)?;
        epochs_list.append(row)?;
    }
    dict.set_item("epochs", epochs_list)?;
    Ok(dict.into())
}

fn load_padded(
    checkpoint: &Path,
    corpus: &Path,
) -> PyResult<(Checkpoint, Vec<hlstm::data::PaddedReview>)> {
    let ckpt = Checkpoint::load(checkpoint).map_err(err)?;
    let reviews = parse_corpus(corpus).map_err(err)?;
    let padded = prepare_reviews(
        &reviews,
        ckpt.tokenizer,
        &ckpt.vocab,
        &ckpt.aspects,
        ckpt.sentence_len,
        ckpt.review_len,
    );
    Ok((ckpt, padded))
}

/// Accuracy and confusion matrix of a checkpoint on a labeled corpus.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, corpus: PathBuf) -> PyResult<Py<PyDict>> {
    let (ckpt, padded) = load_padded(&checkpoint, &corpus)?;
    let report = eval_model(&ckpt.model, &padded).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("accuracy", report.accuracy)?;
    dict.set_item("instances", report.n_instances)?;
    dict.set_item("confusion", report.confusion.to_vec())?;
    Ok(dict.into())
}

/// Per-instance predictions: (review_id, sentence_id, aspect, polarity)
/// records in input order.
#[pyfunction]
fn predict(
    checkpoint: PathBuf,
    corpus: PathBuf,
) -> PyResult<Vec<(String, String, String, String)>> {
    let (ckpt, padded) = load_padded(&checkpoint, &corpus)?;
    let mut out = Vec::new();
    for review in &padded {
        let labels = model_predict(&ckpt.model, review).map_err(err)?;
        for (slot, label) in labels.iter().enumerate() {
            let (Some(meta), Some(polarity)) = (&review.meta[slot], label) else {
                continue;
            };
            out.push((
                review.review_id.clone(),
                meta.sentence_id.clone(),
                meta.aspect.to_string(),
                polarity.to_string(),
            ));
        }
    }
    Ok(out)
}

/// Finite-difference check of the reverse-mode gradients on a small
/// random composition; returns the max relative error.
#[pyfunction]
#[pyo3(signature = (seed=7))]
fn gradient_check(seed: u64) -> PyResult<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let a = hlstm::layers::uniform_init(3, 4, &mut rng);
    let w = hlstm::layers::uniform_init(4, 2, &mut rng);
    hlstm::gradcheck::finite_difference_oracle(
        |tape, p| {
            let t = tape.tanh(&p[0])?;
            let z = tape.matmul(&t, &p[1])?;
            let s = tape.softmax(&z)?;
            let picked = tape.select_row(&s, 1)?;
            // weight the class probabilities so the gradient is non-zero
            let weights = hlstm::Tensor::new(&[2], vec![2.0, -1.0])?;
            let weighted = tape.mul(&picked, &weights)?;
            tape.sum(&weighted)
        },
        &[a, w],
        1e-5,
    )
    .map_err(err)
}

/// Built-in default hyperparameters.
#[pyfunction]
fn defaults(py: Python<'_>) -> PyResult<Py<PyDict>> {
    let cfg = TrainConfig::default();
    let mut map: BTreeMap<&str, String> = BTreeMap::new();
    map.insert("learning_rate", cfg.learning_rate.to_string());
    map.insert("batch_size", cfg.batch_size.to_string());
    map.insert("patience", cfg.patience.to_string());
    map.insert("dropout_rate", cfg.dropout_rate.to_string());
    map.insert("clip_norm", cfg.clip_norm.to_string());
    map.insert("hidden", cfg.dims.hidden.to_string());
    map.insert("word_dim", cfg.dims.word.to_string());
    map.insert("aspect_dim", cfg.dims.aspect.to_string());
    let dict = PyDict::new(py);
    for (k, v) in map {
        dict.set_item(k, v)?;
    }
    Ok(dict.into())
}

#[pymodule]
fn hlstm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTape>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(defaults, m)?)?;
    Ok(())
}
