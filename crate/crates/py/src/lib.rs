//! Python bindings: reaction handling, tokenization, encoder towers,
//! losses, EMA bounds, corpus generation and the command-line driver.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use retrorank::curation::{generate_corpus as gen_corpus, GeneratorConfig};
use retrorank::encoder::{EncoderConfig, EncoderParams};
use retrorank::objectives::{self, ScoreMatrix};
use retrorank::reaction_engine::{self, ReactionEngine, RewriteEngine, RewriteTemplate};
use retrorank::stability::{self, DriftConstants};
use retrorank::tokenizer::{self, Vocabulary};

fn err(e: retrorank::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Canonical reactant-set key of a list of molecule strings.
#[pyfunction]
fn canonicalize(reactants: Vec<String>) -> PyResult<String> {
    reaction_engine::canonicalize(&reactants)
        .map(|k| k.as_str().to_string())
        .map_err(err)
}

/// Applies a `pattern>>r1.r2` rule to a product.
#[pyfunction]
#[pyo3(signature = (template, product, max_outcomes = 4))]
fn apply_template(template: &str, product: &str, max_outcomes: usize) -> PyResult<Vec<Vec<String>>> {
    let t = RewriteTemplate::parse(0, template).map_err(err)?;
    RewriteEngine.apply(&t, product, max_outcomes).map_err(err)
}

#[pyclass(name = "Vocabulary", from_py_object)]
#[derive(Clone)]
struct PyVocabulary(Vocabulary);

#[pymethods]
impl PyVocabulary {
    #[new]
    fn new(corpus: Vec<String>) -> PyResult<Self> {
        tokenizer::build_vocab(corpus.iter().map(String::as_str))
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.size()
    }

    fn encode(&self, text: &str, max_len: usize) -> PyResult<Vec<u32>> {
        self.0.encode(text, max_len).map(|s| s.tokens().to_vec()).map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }
}

/// One transformer tower.
#[pyclass(name = "Encoder")]
struct PyEncoder(EncoderParams);

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (vocab_size, seed = 0, hidden_dim = None, layers = None, heads = None, ff_dim = None, max_len = None, dropout = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        seed: u64,
        hidden_dim: Option<usize>,
        layers: Option<usize>,
        heads: Option<usize>,
        ff_dim: Option<usize>,
        max_len: Option<usize>,
        dropout: Option<f64>,
    ) -> PyResult<Self> {
        let d = EncoderConfig::desk(vocab_size);
        let cfg = EncoderConfig {
            vocab_size,
            hidden_dim: hidden_dim.unwrap_or(d.hidden_dim),
            layers: layers.unwrap_or(d.layers),
            heads: heads.unwrap_or(d.heads),
            ff_dim: ff_dim.unwrap_or(d.ff_dim),
            max_len: max_len.unwrap_or(d.max_len),
            dropout: dropout.unwrap_or(d.dropout),
        };
        EncoderParams::new(cfg, seed).map(Self).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.0.config().max_len
    }

    /// Unit-norm embedding of `text` in eval mode.
    fn embed(&self, vocab: &PyVocabulary, text: &str) -> PyResult<Vec<f64>> {
        let seq = vocab.0.encode(text, self.0.config().max_len).map_err(err)?;
        self.0.embed(&seq).map_err(err)
    }
}

/// Symmetric in-batch loss over a row-major `n`×`n` score matrix.
#[pyfunction]
fn stage1_loss(scores: Vec<f64>, n: usize) -> PyResult<(f64, Vec<f64>)> {
    let m = ScoreMatrix::new(n, n, scores).map_err(err)?;
    objectives::stage1_loss(&m).map(|l| (l.loss, l.grad)).map_err(err)
}

/// Smoothed multi-positive listwise loss with entropy bonus.
#[pyfunction]
fn stage2_loss(scores: Vec<f64>, positives: Vec<bool>, epsilon: f64, beta: f64) -> PyResult<(f64, Vec<f64>)> {
    let t = objectives::smoothed_targets(&positives, epsilon).map_err(err)?;
    objectives::stage2_loss(&scores, &t, beta)
        .map(|l| (l.loss, l.grad))
        .map_err(err)
}

#[pyfunction]
fn kld_loss(teacher: Vec<f64>, student: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    objectives::kld_loss(&teacher, &student)
        .map(|l| (l.loss, l.grad))
        .map_err(err)
}

/// Returns `(bound, closed_form)` for an `m`-step EMA window.
#[pyfunction]
#[pyo3(signature = (eta_g, alpha, m, delta0 = 0.0))]
fn ema_drift_bound(eta_g: f64, alpha: f64, m: usize, delta0: f64) -> PyResult<(f64, f64)> {
    let c = DriftConstants {
        eta_g,
        l_s: 1.0,
        l_sm: stability::SOFTMAX_LIPSCHITZ,
        delta0,
        alpha,
        m,
    };
    stability::ema_drift_bound(&c)
        .map(|b| (b.bound, b.closed_form))
        .map_err(err)
}

/// Synthetic corpus as `(records, templates)`; each record is
/// `(id, product, reactants, template_id, split)`.
#[pyfunction]
#[pyo3(signature = (n_templates = 300, n_reactions = 2000, seed = 0))]
#[allow(clippy::type_complexity)]
fn generate_corpus(
    n_templates: usize,
    n_reactions: usize,
    seed: u64,
) -> PyResult<(Vec<(u64, String, Vec<String>, usize, String)>, Vec<String>)> {
    let cfg = GeneratorConfig {
        n_templates,
        n_reactions,
        seed,
        ..GeneratorConfig::default()
    };
    let (records, library) = gen_corpus(&cfg, &RewriteEngine).map_err(err)?;
    let rows = records
        .into_iter()
        .map(|r| (r.id, r.product, r.reactants, r.template_id, r.split.to_string()))
        .collect();
    Ok((rows, library.raws().to_vec()))
}

/// Runs the command-line driver with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    retrorank::cli::run(std::iter::once("retrorank".to_string()).chain(args))
}

#[pymodule]
fn retrorank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(canonicalize, m)?)?;
    m.add_function(wrap_pyfunction!(apply_template, m)?)?;
    m.add_function(wrap_pyfunction!(stage1_loss, m)?)?;
    m.add_function(wrap_pyfunction!(stage2_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kld_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ema_drift_bound, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
