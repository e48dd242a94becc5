use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::fixtures::sentinel_splits;
use super::metrics::{compute_metrics, MetricsReport, METRIC_NAMES};
use super::sampling::{sample_few_shot, FewShotSpec};
use super::EvalError;
use crate::backbone::{load_backbone, AnyBackbone, PrefixConfig};
use crate::corpus::{
    load_corpus_with, read_examples, run_pipeline, CorpusFormat, CorpusInput, DatasetSplit, LoadOptions,
    PipelineConfig, PreprocessStep, RuleSet, SplitName, SplitRatios, DEFAULT_ZH_KEYWORD,
};
use crate::methods::{
    predict, train_baseline, train_hard_prompt, train_soft_prefix, write_predictions, ModelHandle, ModelKind,
    Prediction, TrainConfig, TrainReport,
};
use crate::templates::{TemplateRegistry, Verbalizer};

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "RECID_OUTPUT_ROOT";

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Where the examples come from. Exactly one of `sentinel`, `prepared`,
/// `path` or the `train`/`dev`/`test` triple is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Name shown in statistics.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub sentinel: Option<SentinelSpec>,
    /// Directory holding `train.jsonl`, `dev.jsonl`, `test.jsonl` examples.
    #[serde(default)]
    pub prepared: Option<String>,
    #[serde(default)]
    pub format: Option<CorpusFormat>,
    /// Single corpus file, split by `split`.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub train: Option<String>,
    #[serde(default)]
    pub dev: Option<String>,
    #[serde(default)]
    pub test: Option<String>,
    #[serde(default)]
    pub chain: Vec<PreprocessStep>,
    /// Ratios such as `"8:1:1"`.
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default)]
    pub split_seed: Option<u64>,
    /// Rule file for `rule-filter`; the built-in after-sales list otherwise.
    #[serde(default)]
    pub rules: Option<String>,
    #[serde(default)]
    pub zh_keyword: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentinelSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Optional overrides of [`TrainConfig::for_kind`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub warmup_fraction: Option<f64>,
    pub max_steps: Option<usize>,
}

/// Everything needed to rerun an experiment. Path-valued fields and the
/// backbone spec may reference environment variables (`$HOME`, `${VAR}`,
/// `${VAR:-default}`, `~`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDescriptor {
    pub name: String,
    pub method: ModelKind,
    pub backbone: String,
    #[serde(default)]
    pub template: Option<String>,
    /// JSONL registry replacing the built-in templates.
    #[serde(default)]
    pub templates: Option<String>,
    #[serde(default)]
    pub verbalizer: Option<[String; 2]>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub max_len: Option<usize>,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub prefix: Option<PrefixConfig>,
    #[serde(default)]
    pub few_shot: Option<FewShotSpec>,
}

fn invalid(field: &str, message: impl Into<String>) -> EvalError {
    EvalError::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Expands `~` and environment variables.
pub fn expand_path(field: &str, raw: &str) -> Result<String, EvalError> {
    shellexpand::full(raw)
        .map(|s| s.into_owned())
        .map_err(|e| invalid(field, format!("cannot expand `{raw}`: {e}")))
}

impl ExperimentDescriptor {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_default();
            invalid(&field, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("descriptor serializes")
    }

    pub fn registry(&self) -> Result<TemplateRegistry, EvalError> {
        match &self.templates {
            None => Ok(TemplateRegistry::default()),
            Some(p) => {
                let p = expand_path("templates", p)?;
                TemplateRegistry::load(Path::new(&p)).map_err(|e| invalid("templates", e.to_string()))
            }
        }
    }

    pub fn verbalizer(&self) -> Verbalizer {
        match &self.verbalizer {
            Some(tokens) => Verbalizer {
                class_tokens: tokens.clone(),
            },
            None => Verbalizer::default(),
        }
    }

    /// Expanded output root: `output_dir`, else `$RECID_OUTPUT_ROOT`, else `runs`.
    pub fn output_root(&self) -> Result<PathBuf, EvalError> {
        match &self.output_dir {
            Some(d) => Ok(PathBuf::from(expand_path("output_dir", d)?)),
            None => Ok(std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into())),
        }
    }

    pub fn experiment_dir(&self) -> Result<PathBuf, EvalError> {
        Ok(self.output_root()?.join(&self.name))
    }

    /// Training configuration for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::for_kind(self.method);
        let t = &self.train;
        cfg.learning_rate = t.learning_rate.unwrap_or(cfg.learning_rate);
        cfg.epochs = t.epochs.unwrap_or(cfg.epochs);
        cfg.batch_size = t.batch_size.unwrap_or(cfg.batch_size);
        cfg.weight_decay = t.weight_decay.unwrap_or(cfg.weight_decay);
        cfg.warmup_fraction = t.warmup_fraction.unwrap_or(cfg.warmup_fraction);
        cfg.max_steps = t.max_steps;
        cfg.seed = seed;
        if let Some(m) = self.max_len {
            cfg.max_len = m;
        }
        if let Some(fs) = &self.few_shot {
            cfg.epoch_multiplier = fs.multiplier();
        }
        cfg
    }

    /// Checks field consistency without touching the filesystem beyond the
    /// template registry.
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a non-empty single path component"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.backbone.trim().is_empty() {
            return Err(invalid("backbone", "must not be empty"));
        }
        match (self.method.uses_template(), &self.template) {
            (true, None) => return Err(invalid("template", format!("{} needs a template id", self.method))),
            (false, Some(_)) => return Err(invalid("template", "BASELINE does not use a template")),
            (true, Some(id)) => {
                self.registry()?.get(id).map_err(|e| invalid("template", e.to_string()))?;
            }
            (false, None) => {}
        }
        match (self.method, &self.prefix) {
            (ModelKind::SoftPrefix, Some(p)) if p.length == 0 => {
                return Err(invalid("prefix.length", "must be at least 1"))
            }
            (ModelKind::SoftPrefix, _) => {}
            (_, Some(_)) => return Err(invalid("prefix", "only SOFT_PREFIX takes a prefix section")),
            _ => {}
        }
        if self.method == ModelKind::ZeroShot && (self.train != TrainSection::default() || self.few_shot.is_some()) {
            return Err(invalid("train", "ZERO_SHOT has no training stage"));
        }
        if self.method != ModelKind::ZeroShot {
            self.train_config(self.seeds[0])
                .validate()
                .map_err(|e| invalid("train", e.to_string()))?;
        }
        if let Some(fs) = &self.few_shot {
            fs.validate().map_err(|e| invalid("few_shot", e.to_string()))?;
        }
        if let Some(m) = self.max_len {
            if m < 2 {
                return Err(invalid("max_len", "must be at least 2"));
            }
        }
        self.corpus.validate()
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<(), EvalError> {
        let triple = [&self.train, &self.dev, &self.test];
        let n_triple = triple.iter().filter(|t| t.is_some()).count();
        if n_triple != 0 && n_triple != 3 {
            return Err(invalid("corpus.train", "train, dev and test must be given together"));
        }
        let sources = [self.sentinel.is_some(), self.prepared.is_some(), self.path.is_some(), n_triple == 3];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(invalid(
                "corpus",
                "set exactly one of `sentinel`, `prepared`, `path`, or `train`/`dev`/`test`",
            ));
        }
        let raw = self.path.is_some() || n_triple == 3;
        if raw && self.format.is_none() {
            return Err(invalid("corpus.format", "required for raw corpus files"));
        }
        if raw && !self.chain.iter().any(|s| matches!(s, PreprocessStep::DeriveLabels | PreprocessStep::RawLabels)) {
            return Err(invalid("corpus.chain", "raw corpora need a labeling step (derive-labels or raw-labels)"));
        }
        if !raw && !self.chain.is_empty() {
            return Err(invalid("corpus.chain", "only raw corpora take a preprocessing chain"));
        }
        if self.split.is_some() && self.path.is_none() {
            return Err(invalid("corpus.split", "ratios apply only to a single `path`"));
        }
        self.pipeline_config().map(|_| ())
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, EvalError> {
        let rules = match &self.rules {
            None => RuleSet::default_after_sales(),
            Some(p) => {
                let p = expand_path("corpus.rules", p)?;
                RuleSet::load(Path::new(&p)).map_err(|e| invalid("corpus.rules", e.to_string()))?
            }
        };
        let ratios = match &self.split {
            None => SplitRatios::default(),
            Some(s) => s.parse().map_err(|e: crate::corpus::CorpusError| invalid("corpus.split", e.to_string()))?,
        };
        let cfg = PipelineConfig {
            steps: self.chain.clone(),
            rules,
            zh_keyword: self.zh_keyword.clone().unwrap_or_else(|| DEFAULT_ZH_KEYWORD.into()),
            ratios,
            split_seed: self.split_seed.unwrap_or(0),
        };
        cfg.validate().map_err(|e| invalid("corpus.chain", e.to_string()))?;
        Ok(cfg)
    }

    /// Loads and preprocesses the corpus into train/dev/test splits.
    pub fn resolve(&self) -> Result<[DatasetSplit; 3], EvalError> {
        let stage = |e: &dyn std::fmt::Display| EvalError::Stage {
            stage: "corpus".into(),
            message: e.to_string(),
        };
        if let Some(s) = &self.sentinel {
            return Ok(sentinel_splits(s.train, s.dev, s.test, s.seed));
        }
        if let Some(dir) = &self.prepared {
            let dir = PathBuf::from(expand_path("corpus.prepared", dir)?);
            let mut out = Vec::new();
            for name in SplitName::ALL {
                let examples = read_examples(&dir.join(format!("{}.jsonl", name.as_str()))).map_err(|e| stage(&e))?;
                out.push(DatasetSplit::new(name, examples));
            }
            return Ok(out.try_into().expect("three splits"));
        }
        let format = self.format.expect("validated");
        let load = |field: &str, p: &str| -> Result<_, EvalError> {
            let p = expand_path(field, p)?;
            load_corpus_with(Path::new(&p), format, &LoadOptions::default()).map_err(|e| stage(&e))
        };
        let input = match (&self.path, &self.train, &self.dev, &self.test) {
            (Some(p), ..) => CorpusInput::Pool(load("corpus.path", p)?),
            (None, Some(a), Some(b), Some(c)) => CorpusInput::Presplit([
                load("corpus.train", a)?,
                load("corpus.dev", b)?,
                load("corpus.test", c)?,
            ]),
            _ => unreachable!("validated"),
        };
        let out = run_pipeline(input, &self.pipeline_config()?).map_err(|e| stage(&e))?;
        Ok(out.splits.expect("labeling step validated"))
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

/// Outcome of one seed of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub method: ModelKind,
    pub backbone: String,
    pub template: Option<String>,
    pub seed: u64,
    pub prefix_length: Option<usize>,
    pub few_shot_n: Option<usize>,
    pub train_size: usize,
    /// Base epochs times the few-shot multiplier; 0 without training.
    pub epochs: usize,
    /// Keyed by split name (`dev`, `test`).
    pub metrics: BTreeMap<String, MetricsReport>,
    pub train_report: Option<TrainReport>,
    pub failures: Vec<String>,
    pub started_at: String,
    pub wall_clock_seconds: f64,
    pub run_dir: PathBuf,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub descriptor: ExperimentDescriptor,
}

impl ExperimentResult {
    pub fn test(&self) -> Option<&MetricsReport> {
        self.metrics.get("test")
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EvalError::Contract(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub results: Vec<ExperimentResult>,
    /// split → metric → summary across seeds.
    pub aggregate: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

pub fn aggregate(results: &[ExperimentResult]) -> BTreeMap<String, BTreeMap<String, MetricSummary>> {
    let mut out = BTreeMap::new();
    let splits: std::collections::BTreeSet<&String> = results.iter().flat_map(|r| r.metrics.keys()).collect();
    for split in splits {
        let mut per_metric = BTreeMap::new();
        for metric in METRIC_NAMES {
            let xs: Vec<f64> = results
                .iter()
                .filter_map(|r| r.metrics.get(split).and_then(|m| m.get(metric)))
                .collect();
            if xs.is_empty() {
                continue;
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            per_metric.insert(metric.to_string(), MetricSummary { mean, std });
        }
        out.insert(split.clone(), per_metric);
    }
    out
}

/// Exclusive claim on an experiment directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, EvalError> {
        fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(EvalError::Locked(path.display().to_string())),
            Err(source) => Err(EvalError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct RunLog {
    file: File,
    start: Instant,
}

impl RunLog {
    fn create(path: &Path) -> Result<Self, EvalError> {
        Ok(Self {
            file: File::create(path).map_err(|source| EvalError::Io {
                path: path.display().to_string(),
                source,
            })?,
            start: Instant::now(),
        })
    }

    fn line(&mut self, stage: &str, message: &str) {
        log::info!("{stage}: {message}");
        let _ = writeln!(self.file, "[{:>9.3}s] {stage}: {message}", self.start.elapsed().as_secs_f64());
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), EvalError> {
    fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn stage_err(stage: &str) -> impl Fn(&dyn std::fmt::Display) -> EvalError + '_ {
    move |e| EvalError::Stage {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

/// Runs every seed of `desc`: preprocess, optional few-shot sampling,
/// training (unless ZERO_SHOT), prediction on dev and test, metrics.
/// Each seed writes into `<output>/<name>/seed-<seed>/`.
pub fn run_experiment(desc: &ExperimentDescriptor) -> Result<ExperimentOutcome, EvalError> {
    desc.validate()?;
    let exp_dir = desc.experiment_dir()?;
    let _lock = DirLock::acquire(&exp_dir)?;
    write_file(&exp_dir.join("descriptor.toml"), &desc.to_toml())?;

    let [train, dev, test] = desc.corpus.resolve()?;
    let backbone_spec = expand_path("backbone", &desc.backbone)?;
    let backbone = load_backbone(&backbone_spec).map_err(|e| stage_err("backbone")(&e))?;
    let mut results = Vec::new();
    for &seed in &desc.seeds {
        results.push(run_seed(desc, seed, &exp_dir, &backbone, &train, &dev, &test)?);
    }
    let outcome = ExperimentOutcome {
        aggregate: aggregate(&results),
        results,
    };
    write_file(&exp_dir.join("aggregate.json"), &json(&outcome.aggregate))?;
    Ok(outcome)
}

fn evaluate_split(handle: &ModelHandle, split: &DatasetSplit, failures: &mut Vec<String>) -> Result<(Vec<Prediction>, Option<MetricsReport>), EvalError> {
    let mut preds = Vec::with_capacity(split.len());
    for r in predict(handle, &split.examples) {
        match r {
            Ok(p) => preds.push(p),
            Err(f) => failures.push(format!("{}: {f}", split.name)),
        }
    }
    if preds.is_empty() {
        return Ok((preds, None));
    }
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let golds: Vec<u8> = preds.iter().map(|p| p.gold.unwrap_or(0)).collect();
    Ok((preds, Some(compute_metrics(&labels, &golds)?)))
}

#[allow(clippy::too_many_arguments)]
fn run_seed(
    desc: &ExperimentDescriptor,
    seed: u64,
    exp_dir: &Path,
    backbone: &AnyBackbone,
    train: &DatasetSplit,
    dev: &DatasetSplit,
    test: &DatasetSplit,
) -> Result<ExperimentResult, EvalError> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let run_dir = exp_dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&run_dir).map_err(|source| EvalError::Io {
        path: run_dir.display().to_string(),
        source,
    })?;
    let mut artifacts = BTreeMap::new();
    let mut log = RunLog::create(&run_dir.join("run.log"))?;
    artifacts.insert("log".to_string(), run_dir.join("run.log"));
    let descriptor_path = run_dir.join("descriptor.toml");
    write_file(&descriptor_path, &desc.to_toml())?;
    artifacts.insert("descriptor".to_string(), descriptor_path);
    log.line("corpus", &format!("train {} dev {} test {}", train.len(), dev.len(), test.len()));

    let mut train_split = train.clone();
    if let Some(fs) = &desc.few_shot {
        let spec = FewShotSpec { seed, ..fs.clone() };
        train_split = sample_few_shot(train, &spec).map_err(|e| stage_err("sample")(&e))?;
        let ids: Vec<(&str, usize)> = train_split.examples.iter().map(|e| e.key()).collect();
        let path = run_dir.join("sampled_ids.json");
        write_file(&path, &json(&ids))?;
        artifacts.insert("sampled_ids".to_string(), path);
        log.line(
            "sample",
            &format!("{} shots ({} positive), epoch multiplier {}", spec.n, train_split.positives(), spec.multiplier()),
        );
    }

    let registry = desc.registry()?;
    let template = desc.template.as_ref().map(|id| registry.get(id).cloned()).transpose().map_err(|e| stage_err("template")(&e))?;
    let verbalizer = desc.verbalizer();
    let cfg = desc.train_config(seed);
    let train_stage = stage_err("train");
    let (handle, train_report) = match desc.method {
        ModelKind::ZeroShot => {
            let h = ModelHandle::zero_shot(
                backbone.clone(),
                template.expect("validated"),
                verbalizer,
                desc.max_len.unwrap_or(backbone.max_len()),
            )
            .map_err(|e| train_stage(&e))?;
            (h, None)
        }
        kind => {
            let encoder = backbone.encoder().map_err(|e| train_stage(&e))?;
            log.line("train", &format!("{kind} on {} examples, {} epochs", train_split.len(), cfg.total_epochs()));
            let model = match kind {
                ModelKind::HardPrompt => {
                    train_hard_prompt(&train_split, dev, encoder, template.as_ref().expect("validated"), &verbalizer, &cfg)
                }
                ModelKind::SoftPrefix => train_soft_prefix(
                    &train_split,
                    dev,
                    encoder,
                    template.as_ref().expect("validated"),
                    &verbalizer,
                    &desc.prefix.clone().unwrap_or_default(),
                    &cfg,
                ),
                _ => train_baseline(&train_split, dev, encoder, &cfg),
            }
            .map_err(|e| train_stage(&e))?;
            for e in &model.report.history {
                log.line(
                    "train",
                    &format!(
                        "epoch {} steps {} loss {:.6} dev f1 {}",
                        e.epoch,
                        e.steps,
                        e.train_loss,
                        e.dev.map_or("-".to_string(), |m| format!("{:.4}", m.f1))
                    ),
                );
            }
            let path = run_dir.join("train_report.json");
            write_file(&path, &json(&model.report))?;
            artifacts.insert("train_report".to_string(), path);
            (model.handle, Some(model.report))
        }
    };
    let model_path = run_dir.join("model.safetensors");
    handle.save(&model_path).map_err(|e| stage_err("save")(&e))?;
    artifacts.insert("model".to_string(), model_path);

    let mut failures = Vec::new();
    let mut metrics = BTreeMap::new();
    for split in [dev, test] {
        let (preds, m) = evaluate_split(&handle, split, &mut failures).map_err(|e| stage_err("predict")(&e))?;
        if split.name == SplitName::Test {
            let path = run_dir.join("predictions.jsonl");
            write_predictions(&path, &preds).map_err(|e| stage_err("predict")(&e))?;
            artifacts.insert("predictions".to_string(), path);
        }
        if let Some(m) = m {
            log.line(
                "metrics",
                &format!(
                    "{}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
                    split.name, m.accuracy, m.precision, m.recall, m.f1
                ),
            );
            metrics.insert(split.name.as_str().to_string(), m);
        }
    }
    for f in &failures {
        log.line("predict", &format!("failed: {f}"));
    }
    if !metrics.contains_key("test") {
        return Err(EvalError::Stage {
            stage: "metrics".into(),
            message: "no test predictions (empty test split or every example failed)".into(),
        });
    }
    let metrics_path = run_dir.join("metrics.json");
    write_file(&metrics_path, &json(&metrics))?;
    artifacts.insert("metrics".to_string(), metrics_path);

    let result = ExperimentResult {
        name: desc.name.clone(),
        method: desc.method,
        backbone: desc.backbone.clone(),
        template: desc.template.clone(),
        seed,
        prefix_length: (desc.method == ModelKind::SoftPrefix)
            .then(|| desc.prefix.as_ref().map_or(PrefixConfig::default().length, |p| p.length)),
        few_shot_n: match desc.method {
            ModelKind::ZeroShot => Some(0),
            _ => desc.few_shot.as_ref().map(|f| f.n),
        },
        train_size: if desc.method == ModelKind::ZeroShot { 0 } else { train_split.len() },
        epochs: if desc.method == ModelKind::ZeroShot { 0 } else { cfg.total_epochs() },
        metrics,
        train_report,
        failures,
        started_at,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        run_dir: run_dir.clone(),
        artifacts,
        descriptor: desc.clone(),
    };
    write_file(&run_dir.join("result.json"), &json(&result))?;
    log.line("done", &format!("{:.1}s", result.wall_clock_seconds));
    Ok(result)
}

/// One experiment per prefix length, everything else identical. Names get a
/// `-p<length>` suffix; results come back ordered by length.
pub fn sweep_prefix_length(base: &ExperimentDescriptor, lengths: &[usize]) -> Result<Vec<ExperimentOutcome>, EvalError> {
    if base.method != ModelKind::SoftPrefix {
        return Err(invalid("method", "prefix sweeps need a SOFT_PREFIX descriptor"));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .into_iter()
        .map(|p| {
            let mut d = base.clone();
            d.name = format!("{}-p{p}", base.name);
            d.prefix = Some(PrefixConfig {
                length: p,
                ..base.prefix.clone().unwrap_or_default()
            });
            run_experiment(&d)
        })
        .collect()
}

/// Largest minus smallest mean test F1 across a sweep.
pub fn f1_spread(outcomes: &[ExperimentOutcome]) -> Option<f64> {
    let f1s: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.aggregate.get("test").and_then(|m| m.get("f1")).map(|s| s.mean))
        .collect();
    if f1s.is_empty() {
        return None;
    }
    let max = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

/// Default bound on [`f1_spread`] for calling a sweep stable.
pub const DEFAULT_STABILITY_THRESHOLD: f64 = 0.05;
