use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use recid_core::backbone::{load_backbone, BackboneError};
use recid_core::corpus::{
    compute_stats, load_corpus, parse_chain, rule_based_filter, run_pipeline, write_canonical, write_examples,
    CorpusError, CorpusFormat, CorpusInput, PipelineConfig, PreprocessStep, RecExample, RuleSet, SplitRatios,
    DEFAULT_ZH_KEYWORD,
};
use recid_core::evaluation::{
    compute_metrics, emit_report, f1_spread, load_results, run_experiment, sweep_prefix_length, EvalError,
    ExperimentDescriptor, ExperimentOutcome, FewShotSpec, MetricSummary, ReportKind, DEFAULT_STABILITY_THRESHOLD,
    METRIC_NAMES,
};
use recid_core::methods::{predict, write_predictions, MethodError, ModelHandle};
use recid_core::templates::{TemplateError, TemplateRegistry, Verbalizer};

use crate::manifest::{ManifestFile, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "recid", version, about = "Recommendability identification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a raw corpus, run the preprocessing chain and write splits.
    Prepare(PrepareArgs),
    /// Run every seed of an experiment descriptor.
    Train(TrainArgs),
    /// Score a saved model (or a zero-shot prompt) on one split.
    Eval(EvalArgs),
    /// Build tables or curves from finished runs.
    Report(ReportArgs),
    /// Run a soft-prefix descriptor once per prefix length.
    SweepPrefix(SweepArgs),
    /// Run a descriptor once per few-shot training size.
    FewShot(FewShotArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long, value_parser = parse_format)]
    pub format: CorpusFormat,
    /// Single corpus file, split by `--split`.
    #[arg(long, conflicts_with_all = ["train", "dev", "test"])]
    pub input: Option<PathBuf>,
    #[arg(long, requires_all = ["dev", "test"])]
    pub train: Option<PathBuf>,
    #[arg(long, requires_all = ["train", "test"])]
    pub dev: Option<PathBuf>,
    #[arg(long, requires_all = ["train", "dev"])]
    pub test: Option<PathBuf>,
    /// Comma-separated steps, e.g. `derive-labels,first-positive`.
    #[arg(long, default_value = "", value_parser = parse_steps)]
    pub chain: Steps,
    #[arg(long, default_value = "8:1:1", value_parser = parse_ratios)]
    pub split: SplitRatios,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// TOML rule file for `rule-filter`.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_ZH_KEYWORD)]
    pub zh_keyword: String,
    /// Name shown in the statistics table.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Steps(pub Vec<PreprocessStep>);

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, short)]
    pub descriptor: PathBuf,
    /// Replaces the descriptor's seeds; repeatable.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub output_dir: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Saved model archive (`model.safetensors`).
    #[arg(long, required_unless_present = "zero_shot", conflicts_with = "zero_shot")]
    pub model: Option<PathBuf>,
    /// Score with an untrained backbone and a hard template.
    #[arg(long, requires_all = ["backbone", "template"])]
    pub zero_shot: bool,
    /// Backbone spec; defaults to the one recorded in the model.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub template: Option<String>,
    /// JSONL template registry replacing the built-in templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Answer words for class 0 and class 1.
    #[arg(long, num_args = 2, value_names = ["NO", "YES"])]
    pub verbalizer: Option<Vec<String>>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Examples file, or a prepared directory holding `<split>.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Glob over `result.json` files or run directories.
    #[arg(long)]
    pub results: String,
    #[arg(long, value_parser = parse_kind)]
    pub kind: ReportKind,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, short)]
    pub descriptor: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lengths: Vec<usize>,
    /// Largest allowed spread of mean test F1 for a stable sweep.
    #[arg(long, default_value_t = DEFAULT_STABILITY_THRESHOLD)]
    pub threshold: f64,
    /// Where the sweep summary and curve go; `<output root>/<name>-prefix-sweep` by default.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FewShotArgs {
    #[arg(long, short)]
    pub descriptor: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    /// Sample equal numbers of positives and negatives.
    #[arg(long)]
    pub balanced: bool,
    #[arg(long)]
    pub epoch_multiplier: Option<usize>,
    /// `<output root>/<name>-few-shot` by default.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<CorpusFormat, String> {
    s.parse().map_err(|e: CorpusError| e.to_string())
}

fn parse_steps(s: &str) -> Result<Steps, String> {
    parse_chain(s).map(Steps).map_err(|e| e.to_string())
}

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    s.parse().map_err(|e: CorpusError| e.to_string())
}

fn parse_kind(s: &str) -> Result<ReportKind, String> {
    s.parse().map_err(|e: EvalError| e.to_string())
}

/// Usage and validation problems exit with 1, everything else with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Validation { .. } | EvalError::Contract(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::Fingerprint { .. } | BackboneError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<MethodError> for CliError {
    fn from(e: MethodError) -> Self {
        match e {
            MethodError::Backbone(b) => b.into(),
            MethodError::Template(t) => t.into(),
            MethodError::Config(_) | MethodError::Contract(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializes") + "\n"
}

/// Writes the manifest, runs `body`, then records how it ended.
fn with_manifest<F>(dir: &Path, manifest: RunManifest, body: F) -> Result<(), CliError>
where
    F: FnOnce() -> Result<Vec<PathBuf>, CliError>,
{
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file: ManifestFile = manifest.write(dir).map_err(io_err(dir))?;
    log::info!("manifest {}", file.path.display());
    let outcome = body();
    let (code, error, outputs) = match &outcome {
        Ok(paths) => (0, None, paths.clone()),
        Err(e) => (e.exit_code(), Some(e.to_string()), vec![]),
    };
    file.finish(code, error, outputs).map_err(io_err(&file.path))?;
    outcome.map(|_| ())
}

pub fn run(command: Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::Prepare(a) => prepare(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Report(a) => report(a, argv),
        Command::SweepPrefix(a) => sweep(a, argv),
        Command::FewShot(a) => few_shot(a, argv),
    }
}

fn prepare(a: PrepareArgs, argv: &[String]) -> Result<(), CliError> {
    let steps = a.chain.0.clone();
    let rules = match &a.rules {
        Some(p) => RuleSet::load(p)?,
        None => RuleSet::default_after_sales(),
    };
    let cfg = PipelineConfig {
        steps: steps.clone(),
        rules,
        zh_keyword: a.zh_keyword.clone(),
        ratios: a.split,
        split_seed: a.split_seed,
    };
    cfg.validate()?;
    let labeled = steps.iter().any(|s| matches!(s, PreprocessStep::DeriveLabels | PreprocessStep::RawLabels));
    let sources: Vec<&PathBuf> = match (&a.input, &a.train) {
        (Some(p), _) => vec![p],
        (None, Some(t)) => vec![t, a.dev.as_ref().expect("clap"), a.test.as_ref().expect("clap")],
        (None, None) => return Err(CliError::Usage("give --input or all of --train/--dev/--test".into())),
    };
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        sources[0].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
    });
    let out = a.out.clone();
    let config = json!({
        "format": a.format,
        "sources": sources,
        "chain": steps,
        "split": format!("{}:{}:{}", a.split.train, a.split.dev, a.split.test),
        "split_seed": a.split_seed,
        "rules": a.rules,
        "zh_keyword": a.zh_keyword,
        "dataset": dataset,
        "out": out,
    });
    let manifest = RunManifest::new("prepare", argv, config, vec![a.split_seed], vec![out.clone()]);
    with_manifest(&out, manifest, || {
        let mut loaded = Vec::new();
        for p in &sources {
            loaded.push(load_corpus(p, a.format)?);
        }
        let mut written = Vec::new();
        let has_filter = steps.contains(&PreprocessStep::RuleFilter);
        if !labeled {
            // Conversation-level steps only: no labels, no split.
            let names: Vec<String> = if loaded.len() == 1 {
                vec!["conversations.jsonl".into()]
            } else {
                ["train", "dev", "test"].iter().map(|s| format!("{s}.conversations.jsonl")).collect()
            };
            let mut reports = Vec::new();
            for (convs, name) in loaded.into_iter().zip(names) {
                let convs = if has_filter {
                    let (kept, report) = rule_based_filter(convs, &cfg.rules)?;
                    reports.push(report);
                    kept
                } else {
                    convs
                };
                let path = out.join(name);
                write_canonical(&path, &convs)?;
                written.push(path);
            }
            if let Some(first) = reports.first() {
                let merged = reports[1..].iter().fold(first.clone(), |m, r| m.merge(r));
                let path = out.join("filter_report.csv");
                write_text(&path, &merged.to_csv())?;
                written.push(path);
            }
            return Ok(written);
        }
        let input = if loaded.len() == 1 {
            CorpusInput::Pool(loaded.remove(0))
        } else {
            let [t, d, s]: [_; 3] = loaded.try_into().expect("three sources");
            CorpusInput::Presplit([t, d, s])
        };
        let output = run_pipeline(input, &cfg)?;
        let splits = output.splits.expect("labeling step present");
        for split in &splits {
            let path = out.join(format!("{}.jsonl", split.name.as_str()));
            write_examples(&path, &split.examples)?;
            written.push(path);
        }
        let stats = compute_stats(&dataset, &splits)?;
        print!("{stats}");
        let path = out.join("stats.json");
        write_text(&path, &to_json(&stats))?;
        written.push(path);
        let path = out.join("stats.txt");
        write_text(&path, &stats.to_string())?;
        written.push(path);
        if let Some(report) = &output.filter_report {
            let path = out.join("filter_report.csv");
            write_text(&path, &report.to_csv())?;
            written.push(path);
        }
        Ok(written)
    })
}

fn load_descriptor(path: &Path) -> Result<ExperimentDescriptor, CliError> {
    let desc = ExperimentDescriptor::load(path)?;
    desc.validate()?;
    Ok(desc)
}

fn print_aggregate(name: &str, outcome: &ExperimentOutcome) {
    for (split, metrics) in &outcome.aggregate {
        let cells: Vec<String> = METRIC_NAMES
            .iter()
            .filter_map(|m| metrics.get(*m).map(|s: &MetricSummary| format!("{m} {:.4} ± {:.4}", s.mean, s.std)))
            .collect();
        println!("{name} {split}: {}", cells.join("  "));
    }
}

fn outcome_paths(outcome: &ExperimentOutcome) -> Vec<PathBuf> {
    outcome.results.iter().map(|r| r.run_dir.join("result.json")).collect()
}

fn train(a: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let mut desc = load_descriptor(&a.descriptor)?;
    if !a.seeds.is_empty() {
        desc.seeds = a.seeds.clone();
    }
    if a.output_dir.is_some() {
        desc.output_dir = a.output_dir.clone();
    }
    desc.validate()?;
    let dir = desc.experiment_dir()?;
    let config = serde_json::to_value(&desc).expect("descriptor serializes");
    let manifest = RunManifest::new("train", argv, config, desc.seeds.clone(), vec![dir.clone()]);
    with_manifest(&dir, manifest, || {
        let outcome = run_experiment(&desc)?;
        print_aggregate(&desc.name, &outcome);
        for r in &outcome.results {
            println!("{}", r.run_dir.display());
        }
        Ok(outcome_paths(&outcome))
    })
}

fn load_split(data: &Path, split: &str) -> Result<Vec<RecExample>, CliError> {
    let file = if data.is_dir() { data.join(format!("{split}.jsonl")) } else { data.to_path_buf() };
    if !file.is_file() {
        return Err(CliError::Usage(format!("no examples file at {}", file.display())));
    }
    let examples = recid_core::corpus::read_examples(&file)?;
    if examples.is_empty() {
        return Err(CliError::Usage(format!("split `{split}` in {} is empty", file.display())));
    }
    Ok(examples)
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let examples = load_split(&a.data, &a.split)?;
    let backbone = a.backbone.as_deref().map(load_backbone).transpose()?;
    let handle = if let Some(model) = &a.model {
        ModelHandle::load(model, backbone)?
    } else {
        let registry = match &a.templates {
            Some(p) => TemplateRegistry::load(p)?,
            None => TemplateRegistry::default(),
        };
        let template = registry.get(a.template.as_deref().expect("clap"))?.clone();
        let verbalizer = match &a.verbalizer {
            Some(v) => Verbalizer {
                class_tokens: [v[0].clone(), v[1].clone()],
            },
            None => Verbalizer::default(),
        };
        let backbone = backbone.expect("clap");
        let max_len = a.max_len.unwrap_or(backbone.max_len());
        ModelHandle::zero_shot(backbone, template, verbalizer, max_len)?
    };
    let config = json!({
        "model": a.model,
        "zero_shot": a.zero_shot,
        "kind": handle.kind,
        "backbone": handle.backbone.spec(),
        "fingerprint": handle.backbone.fingerprint(),
        "template": handle.template.as_ref().map(|t| &t.id),
        "max_len": handle.max_len,
        "data": a.data,
        "split": a.split,
        "out": a.out,
    });
    let out = a.out.clone();
    let manifest = RunManifest::new("eval", argv, config, vec![], vec![out.clone()]);
    with_manifest(&out, manifest, || {
        let mut preds = Vec::new();
        let mut failures = Vec::new();
        for r in predict(&handle, &examples) {
            match r {
                Ok(p) => preds.push(p),
                Err(f) => failures.push(f.to_string()),
            }
        }
        if preds.is_empty() {
            return Err(CliError::Runtime(format!("every example failed; first: {}", failures[0])));
        }
        let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
        let golds: Vec<u8> = preds.iter().zip(&examples).map(|(p, e)| p.gold.unwrap_or(e.label)).collect();
        let metrics = compute_metrics(&labels, &golds)?;
        let pred_path = out.join("predictions.jsonl");
        write_predictions(&pred_path, &preds)?;
        let metrics_path = out.join("metrics.json");
        write_text(
            &metrics_path,
            &to_json(&json!({ "split": a.split, "metrics": metrics, "failures": failures })),
        )?;
        for m in METRIC_NAMES {
            let v = match m {
                "accuracy" => metrics.accuracy,
                "precision" => metrics.precision,
                "recall" => metrics.recall,
                _ => metrics.f1,
            };
            println!("{m} {v:.4}");
        }
        if !failures.is_empty() {
            log::warn!("{} examples could not be scored", failures.len());
        }
        Ok(vec![pred_path, metrics_path])
    })
}

fn report(a: ReportArgs, argv: &[String]) -> Result<(), CliError> {
    let results = load_results(&a.results)?;
    let config = json!({ "results": a.results, "kind": a.kind, "matched": results.len(), "out": a.out });
    let manifest = RunManifest::new("report", argv, config, vec![], vec![a.out.clone()]);
    with_manifest(&a.out, manifest, || {
        let paths = emit_report(&results, a.kind, &a.out)?;
        for p in &paths {
            println!("{}", p.display());
        }
        Ok(paths)
    })
}

fn sweep(a: SweepArgs, argv: &[String]) -> Result<(), CliError> {
    let desc = load_descriptor(&a.descriptor)?;
    let dir = match &a.report_dir {
        Some(d) => d.clone(),
        None => desc.output_root()?.join(format!("{}-prefix-sweep", desc.name)),
    };
    let config = json!({ "descriptor": desc, "lengths": a.lengths, "threshold": a.threshold, "report_dir": dir });
    let manifest = RunManifest::new("sweep-prefix", argv, config, desc.seeds.clone(), vec![dir.clone()]);
    with_manifest(&dir, manifest, || {
        let outcomes = sweep_prefix_length(&desc, &a.lengths)?;
        let mut lengths = a.lengths.clone();
        lengths.sort_unstable();
        lengths.dedup();
        let mut rows = Vec::new();
        for (p, o) in lengths.iter().zip(&outcomes) {
            print_aggregate(&format!("{}-p{p}", desc.name), o);
            let f1 = o.aggregate.get("test").and_then(|m| m.get("f1")).cloned();
            rows.push(json!({ "length": p, "test_f1": f1 }));
        }
        let spread = f1_spread(&outcomes);
        let stable = spread.is_some_and(|s| s <= a.threshold);
        match spread {
            Some(s) => println!("test F1 spread {s:.4} (threshold {}): {}", a.threshold, if stable { "stable" } else { "unstable" }),
            None => println!("no test F1 recorded"),
        }
        let summary = dir.join("sweep.json");
        write_text(
            &summary,
            &to_json(&json!({ "lengths": rows, "spread": spread, "threshold": a.threshold, "stable": stable })),
        )?;
        let results: Vec<_> = outcomes.iter().flat_map(|o| o.results.clone()).collect();
        let mut paths = vec![summary];
        paths.extend(emit_report(&results, ReportKind::PrefixCurve, &dir)?);
        for p in &paths {
            println!("{}", p.display());
        }
        Ok(paths)
    })
}

fn few_shot(a: FewShotArgs, argv: &[String]) -> Result<(), CliError> {
    let base = load_descriptor(&a.descriptor)?;
    let mut sizes = a.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let descriptors: Vec<ExperimentDescriptor> = sizes
        .iter()
        .map(|&n| {
            let mut d = base.clone();
            d.name = format!("{}-n{n}", base.name);
            d.few_shot = Some(FewShotSpec {
                n,
                balanced: a.balanced,
                seed: 0,
                epoch_multiplier: a.epoch_multiplier.or(base.few_shot.as_ref().and_then(|f| f.epoch_multiplier)),
            });
            d
        })
        .collect();
    for d in &descriptors {
        d.validate()?;
    }
    let dir = match &a.report_dir {
        Some(d) => d.clone(),
        None => base.output_root()?.join(format!("{}-few-shot", base.name)),
    };
    let config = json!({ "descriptors": descriptors, "report_dir": dir });
    let manifest = RunManifest::new("few-shot", argv, config, base.seeds.clone(), vec![dir.clone()]);
    with_manifest(&dir, manifest, || {
        let mut results = Vec::new();
        for d in &descriptors {
            let o = run_experiment(d)?;
            print_aggregate(&d.name, &o);
            results.extend(o.results);
        }
        let paths = emit_report(&results, ReportKind::SamplesCurve, &dir)?;
        for p in &paths {
            println!("{}", p.display());
        }
        Ok(paths)
    })
}
