//! Python bindings. Structured values (stats, metrics, reports, experiment
//! outcomes) cross the boundary as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use recid_core::backbone::{load_backbone, AnyBackbone, PrefixConfig};
use recid_core::corpus::{
    compute_stats, load_corpus, parse_chain, read_examples as core_read_examples, run_pipeline,
    write_examples as core_write_examples, CorpusError, CorpusFormat, CorpusInput, DatasetSplit, PipelineConfig,
    RecExample, SplitName,
};
use recid_core::evaluation::{
    compute_metrics as core_compute_metrics, run_experiment as core_run_experiment, sample_few_shot as core_sample,
    sentinel_splits as core_sentinel_splits, EvalError, ExperimentDescriptor, FewShotSpec,
};
use recid_core::methods::{
    predict, train_baseline, train_hard_prompt, train_soft_prefix, MethodError, ModelHandle, ModelKind, TrainConfig,
};
use recid_core::templates::{render, TemplateError, TemplateRegistry, Verbalizer};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn corpus_err(e: CorpusError) -> PyErr {
    match e {
        CorpusError::Config(_) => value_err(e),
        _ => runtime_err(e),
    }
}

fn eval_err(e: EvalError) -> PyErr {
    match e {
        EvalError::Validation { .. } | EvalError::Contract(_) | EvalError::Sampling(_) => value_err(e),
        _ => runtime_err(e),
    }
}

fn method_err(e: MethodError) -> PyErr {
    match e {
        MethodError::Config(_) | MethodError::Contract(_) | MethodError::Template(_) | MethodError::Backbone(_) => {
            value_err(e)
        }
        _ => runtime_err(e),
    }
}

fn template_err(e: TemplateError) -> PyErr {
    value_err(e)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// One system turn to classify.
#[pyclass(module = "recid", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Example {
    inner: RecExample,
}

#[pymethods]
impl Example {
    #[staticmethod]
    fn from_dict(d: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(Self { inner: from_py(d)? })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn conversation_id(&self) -> &str {
        &self.inner.conversation_id
    }

    #[getter]
    fn target_index(&self) -> usize {
        self.inner.target_index
    }

    #[getter]
    fn label(&self) -> u8 {
        self.inner.label
    }

    #[getter]
    fn history(&self) -> Vec<(String, String)> {
        self.inner
            .history
            .iter()
            .map(|t| (format!("{:?}", t.speaker).to_lowercase(), t.text.clone()))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Example({}#{}, label={}, turns={})",
            self.inner.conversation_id,
            self.inner.target_index,
            self.inner.label,
            self.inner.history.len()
        )
    }
}

fn wrap(examples: Vec<RecExample>) -> Vec<Example> {
    examples.into_iter().map(|inner| Example { inner }).collect()
}

fn unwrap(examples: &[PyRef<'_, Example>]) -> Vec<RecExample> {
    examples.iter().map(|e| e.inner.clone()).collect()
}

fn split_of(name: SplitName, examples: &[PyRef<'_, Example>]) -> DatasetSplit {
    DatasetSplit::new(name, unwrap(examples))
}

fn splits_dict(py: Python<'_>, splits: [DatasetSplit; 3]) -> PyResult<Bound<'_, PyDict>> {
    let d = PyDict::new(py);
    for s in splits {
        d.set_item(s.name.as_str(), wrap(s.examples))?;
    }
    Ok(d)
}

/// Loads a corpus and runs a preprocessing chain. Give `input` for one file
/// split by `split`, or all of `train`, `dev`, `test`. Returns
/// `{"train": [...], "dev": [...], "test": [...]}`.
#[pyfunction]
#[pyo3(signature = (format, chain, input=None, train=None, dev=None, test=None, split="8:1:1", split_seed=0))]
#[allow(clippy::too_many_arguments)]
fn prepare<'py>(
    py: Python<'py>,
    format: &str,
    chain: &str,
    input: Option<PathBuf>,
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    test: Option<PathBuf>,
    split: &str,
    split_seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let format: CorpusFormat = format.parse().map_err(corpus_err)?;
    let cfg = PipelineConfig {
        steps: parse_chain(chain).map_err(corpus_err)?,
        ratios: split.parse().map_err(corpus_err)?,
        split_seed,
        ..PipelineConfig::default()
    };
    let load = |p: &PathBuf| load_corpus(p, format).map_err(corpus_err);
    let corpus = match (input, train, dev, test) {
        (Some(p), None, None, None) => CorpusInput::Pool(load(&p)?),
        (None, Some(a), Some(b), Some(c)) => CorpusInput::Presplit([load(&a)?, load(&b)?, load(&c)?]),
        _ => return Err(PyValueError::new_err("give `input` or all of `train`, `dev`, `test`")),
    };
    let out = run_pipeline(corpus, &cfg).map_err(corpus_err)?;
    let splits = out
        .splits
        .ok_or_else(|| PyValueError::new_err("the chain needs a labeling step to produce examples"))?;
    splits_dict(py, splits)
}

/// Split counts and positive ratio, as printed by `recid prepare`.
#[pyfunction]
fn corpus_stats<'py>(
    py: Python<'py>,
    dataset: &str,
    train: Vec<PyRef<'py, Example>>,
    dev: Vec<PyRef<'py, Example>>,
    test: Vec<PyRef<'py, Example>>,
) -> PyResult<Bound<'py, PyAny>> {
    let splits = [
        split_of(SplitName::Train, &train),
        split_of(SplitName::Dev, &dev),
        split_of(SplitName::Test, &test),
    ];
    to_py(py, &compute_stats(dataset, &splits).map_err(corpus_err)?)
}

#[pyfunction]
fn read_examples(path: PathBuf) -> PyResult<Vec<Example>> {
    Ok(wrap(core_read_examples(&path).map_err(corpus_err)?))
}

#[pyfunction]
fn write_examples(path: PathBuf, examples: Vec<PyRef<'_, Example>>) -> PyResult<()> {
    core_write_examples(&path, &unwrap(&examples)).map_err(corpus_err)
}

/// Synthetic splits whose label is signalled by a marker token.
#[pyfunction]
#[pyo3(signature = (train, dev, test, seed=0))]
fn sentinel_splits(py: Python<'_>, train: usize, dev: usize, test: usize, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    splits_dict(py, core_sentinel_splits(train, dev, test, seed))
}

#[pyfunction]
#[pyo3(signature = (examples, n, balanced=false, seed=0))]
fn sample_few_shot(examples: Vec<PyRef<'_, Example>>, n: usize, balanced: bool, seed: u64) -> PyResult<Vec<Example>> {
    let spec = FewShotSpec {
        n,
        balanced,
        seed,
        epoch_multiplier: None,
    };
    let out = core_sample(&split_of(SplitName::Train, &examples), &spec).map_err(eval_err)?;
    Ok(wrap(out.examples))
}

/// Accuracy, precision, recall and F1 with class 1 as positive.
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, predictions: Vec<u8>, golds: Vec<u8>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_compute_metrics(&predictions, &golds).map_err(eval_err)?)
}

/// A pretrained encoder (`"tiny"`, `"tiny:<seed>"` or a checkpoint directory).
#[pyclass(module = "recid", frozen)]
pub struct Backbone {
    inner: AnyBackbone,
}

#[pymethods]
impl Backbone {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_backbone(spec).map_err(value_err)?,
        })
    }

    #[getter]
    fn spec(&self) -> &str {
        self.inner.spec()
    }

    #[getter]
    fn fingerprint(&self) -> &str {
        self.inner.fingerprint()
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.max_len()
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.tokenizer().encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.inner.tokenizer().decode(&ids)
    }

    fn __repr__(&self) -> String {
        format!("Backbone({:?})", self.inner.spec())
    }
}

/// Hard prompt templates, the built-in set unless loaded from JSONL.
#[pyclass(module = "recid", frozen)]
pub struct Templates {
    inner: TemplateRegistry,
}

#[pymethods]
impl Templates {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => TemplateRegistry::load(&p).map_err(template_err)?,
            None => TemplateRegistry::default(),
        };
        Ok(Self { inner })
    }

    fn ids(&self) -> Vec<String> {
        self.inner.templates().iter().map(|t| t.id.clone()).collect()
    }

    fn body(&self, id: &str) -> PyResult<String> {
        Ok(self.inner.get(id).map_err(template_err)?.body.clone())
    }

    /// Token ids and mask position of `example` rendered within `max_len`.
    #[pyo3(signature = (id, example, backbone, max_len=None))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        id: &str,
        example: PyRef<'py, Example>,
        backbone: PyRef<'py, Backbone>,
        max_len: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let t = self.inner.get(id).map_err(template_err)?;
        let max_len = max_len.unwrap_or(backbone.inner.max_len());
        let r = render(t, &example.inner, backbone.inner.tokenizer(), max_len).map_err(template_err)?;
        let d = PyDict::new(py);
        d.set_item("token_ids", r.token_ids)?;
        d.set_item("mask_position", r.mask_position)?;
        d.set_item("dropped_history_turns", r.dropped_history_turns)?;
        Ok(d)
    }
}

/// A trained (or zero-shot) classifier.
#[pyclass(module = "recid", frozen)]
pub struct Model {
    inner: ModelHandle,
    report: Option<recid_core::methods::TrainReport>,
}

fn verbalizer_of(v: Option<(String, String)>) -> Verbalizer {
    match v {
        Some((a, b)) => Verbalizer { class_tokens: [a, b] },
        None => Verbalizer::default(),
    }
}

#[pymethods]
impl Model {
    /// Trains one of `SOFT_PREFIX`, `HARD_PROMPT`, `BASELINE`. `config`
    /// overrides the method defaults (learning_rate, epochs, batch_size, seed,
    /// max_len, ...); `prefix` sets length, inject_layers and init.
    #[staticmethod]
    #[pyo3(signature = (kind, backbone, train, dev, template=None, verbalizer=None, config=None, prefix=None))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        kind: &str,
        backbone: PyRef<'py, Backbone>,
        train: Vec<PyRef<'py, Example>>,
        dev: Vec<PyRef<'py, Example>>,
        template: Option<&str>,
        verbalizer: Option<(String, String)>,
        config: Option<Bound<'py, PyDict>>,
        prefix: Option<Bound<'py, PyDict>>,
    ) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(method_err)?;
        let mut cfg = serde_json::to_value(TrainConfig::for_kind(kind)).map_err(runtime_err)?;
        if let Some(c) = &config {
            let over: serde_json::Map<String, serde_json::Value> = from_py(c.as_any())?;
            for (k, v) in over {
                cfg[k] = v;
            }
        }
        let cfg: TrainConfig = serde_json::from_value(cfg).map_err(value_err)?;
        let prefix_cfg: PrefixConfig = match &prefix {
            Some(p) => from_py(p.as_any())?,
            None => PrefixConfig::default(),
        };
        let train = split_of(SplitName::Train, &train);
        let dev = split_of(SplitName::Dev, &dev);
        let enc = backbone.inner.encoder().map_err(value_err)?.clone();
        let registry = TemplateRegistry::default();
        let need_template = || -> PyResult<_> {
            let id = template.ok_or_else(|| PyValueError::new_err("this method needs a template id"))?;
            Ok(registry.get(id).map_err(template_err)?.clone())
        };
        let verbalizer = verbalizer_of(verbalizer);
        let trained = match kind {
            ModelKind::SoftPrefix => {
                let t = need_template()?;
                py.detach(|| train_soft_prefix(&train, &dev, &enc, &t, &verbalizer, &prefix_cfg, &cfg))
            }
            ModelKind::HardPrompt => {
                let t = need_template()?;
                py.detach(|| train_hard_prompt(&train, &dev, &enc, &t, &verbalizer, &cfg))
            }
            ModelKind::Baseline => py.detach(|| train_baseline(&train, &dev, &enc, &cfg)),
            ModelKind::ZeroShot => return Err(PyValueError::new_err("use Model.zero_shot for ZERO_SHOT")),
        }
        .map_err(method_err)?;
        Ok(Self {
            inner: trained.handle,
            report: Some(trained.report),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (backbone, template, verbalizer=None, max_len=None))]
    fn zero_shot(
        backbone: PyRef<'_, Backbone>,
        template: &str,
        verbalizer: Option<(String, String)>,
        max_len: Option<usize>,
    ) -> PyResult<Self> {
        let t = TemplateRegistry::default().get(template).map_err(template_err)?.clone();
        let max_len = max_len.unwrap_or(backbone.inner.max_len());
        let inner = ModelHandle::zero_shot(backbone.inner.clone(), t, verbalizer_of(verbalizer), max_len)
            .map_err(method_err)?;
        Ok(Self { inner, report: None })
    }

    /// Loads a saved model; the backbone defaults to the recorded spec and
    /// must match the recorded fingerprint.
    #[staticmethod]
    #[pyo3(signature = (path, backbone=None))]
    fn load(path: PathBuf, backbone: Option<PyRef<'_, Backbone>>) -> PyResult<Self> {
        let inner = ModelHandle::load(&path, backbone.map(|b| b.inner.clone())).map_err(method_err)?;
        Ok(Self { inner, report: None })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(method_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    /// Per-epoch training history, `None` for loaded or zero-shot models.
    #[getter]
    fn train_report<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.report.as_ref().map(|r| to_py(py, r)).transpose()
    }

    /// `(p0, p1)` for one example.
    fn score(&self, example: PyRef<'_, Example>) -> PyResult<(f64, f64)> {
        let p = self.inner.score(&example.inner).map_err(method_err)?;
        Ok((p.of(0), p.of(1)))
    }

    /// One dict per example; examples that cannot be scored raise.
    fn predict<'py>(&self, py: Python<'py>, examples: Vec<PyRef<'py, Example>>) -> PyResult<Bound<'py, PyAny>> {
        let examples = unwrap(&examples);
        let handle = &self.inner;
        let out = py.detach(|| predict(handle, &examples));
        let preds = out.into_iter().collect::<Result<Vec<_>, _>>().map_err(value_err)?;
        to_py(py, &preds)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {:?})", self.inner.kind.as_str(), self.inner.backbone.spec())
    }
}

/// Runs every seed of a TOML experiment descriptor and returns the per-seed
/// results and the mean/std aggregate.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, descriptor: &str) -> PyResult<Bound<'py, PyAny>> {
    let desc = ExperimentDescriptor::from_toml(descriptor).map_err(eval_err)?;
    let outcome = py.detach(|| core_run_experiment(&desc)).map_err(eval_err)?;
    let d = PyDict::new(py);
    d.set_item("results", to_py(py, &outcome.results)?)?;
    d.set_item("aggregate", to_py(py, &outcome.aggregate)?)?;
    Ok(d.into_any())
}

#[pymodule]
fn recid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Example>()?;
    m.add_class::<Backbone>()?;
    m.add_class::<Templates>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_stats, m)?)?;
    m.add_function(wrap_pyfunction!(read_examples, m)?)?;
    m.add_function(wrap_pyfunction!(write_examples, m)?)?;
    m.add_function(wrap_pyfunction!(sentinel_splits, m)?)?;
    m.add_function(wrap_pyfunction!(sample_few_shot, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
