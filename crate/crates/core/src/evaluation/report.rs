use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::ExperimentResult;
use super::metrics::METRIC_NAMES;
use super::EvalError;
use crate::methods::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReportKind {
    Table,
    SamplesCurve,
    PrefixCurve,
}

impl ReportKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReportKind::Table => "TABLE",
            ReportKind::SamplesCurve => "SAMPLES_CURVE",
            ReportKind::PrefixCurve => "PREFIX_CURVE",
        }
    }
}

impl FromStr for ReportKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "TABLE" => Ok(ReportKind::Table),
            "SAMPLES_CURVE" => Ok(ReportKind::SamplesCurve),
            "PREFIX_CURVE" => Ok(ReportKind::PrefixCurve),
            other => Err(EvalError::Contract(format!(
                "unknown report kind `{other}` (TABLE, SAMPLES_CURVE, PREFIX_CURVE)"
            ))),
        }
    }
}

/// Mean and sample std of test metrics over a group of results.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

fn summarize(label: String, group: &[&ExperimentResult]) -> Result<ReportRow, EvalError> {
    let mut cols: [Vec<f64>; 4] = Default::default();
    for r in group {
        let m = r
            .test()
            .ok_or_else(|| EvalError::Contract(format!("result `{}` seed {} has no test metrics", r.name, r.seed)))?;
        for (col, name) in cols.iter_mut().zip(METRIC_NAMES) {
            col.push(m.get(name).expect("known metric"));
        }
    }
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for (i, xs) in cols.iter().enumerate() {
        let n = xs.len() as f64;
        mean[i] = xs.iter().sum::<f64>() / n;
        if xs.len() > 1 {
            std[i] = (xs.iter().map(|x| (x - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        }
    }
    Ok(ReportRow {
        label,
        runs: group.len(),
        mean,
        std,
    })
}

/// Groups results preserving first-seen order.
fn group_by<K: Ord + Clone>(results: &[ExperimentResult], key: impl Fn(&ExperimentResult) -> K) -> Vec<(K, Vec<&ExperimentResult>)> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<K, Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        let k = key(r);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let g = groups.remove(&k).expect("present");
            (k, g)
        })
        .collect()
}

/// Training-set size on the samples axis: shots for few-shot runs, 0 for
/// zero-shot, the full train size otherwise.
pub fn sample_count(r: &ExperimentResult) -> usize {
    match r.method {
        ModelKind::ZeroShot => 0,
        _ => r.few_shot_n.unwrap_or(r.train_size),
    }
}

pub fn table_rows(results: &[ExperimentResult]) -> Result<Vec<ReportRow>, EvalError> {
    group_by(results, |r| r.name.clone())
        .into_iter()
        .map(|(name, group)| {
            let r = group[0];
            let mut label = format!("{name} [{}", r.method);
            if let Some(t) = &r.template {
                let _ = write!(label, ", {t}");
            }
            if let Some(p) = r.prefix_length {
                let _ = write!(label, ", p={p}");
            }
            label.push(']');
            summarize(label, &group)
        })
        .collect()
}

fn curve_rows(results: &[ExperimentResult], kind: ReportKind) -> Result<Vec<(usize, ReportRow)>, EvalError> {
    let x_of = |r: &ExperimentResult| -> Result<usize, EvalError> {
        match kind {
            ReportKind::SamplesCurve => Ok(sample_count(r)),
            _ => match (r.method, r.prefix_length) {
                (ModelKind::SoftPrefix, Some(p)) => Ok(p),
                _ => Err(EvalError::Contract(format!(
                    "PREFIX_CURVE needs SOFT_PREFIX results; `{}` is {}",
                    r.name, r.method
                ))),
            },
        }
    };
    let mut keyed = Vec::with_capacity(results.len());
    for r in results {
        keyed.push((x_of(r)?, r.clone()));
    }
    let mut by_x: BTreeMap<usize, Vec<&ExperimentResult>> = BTreeMap::new();
    for (x, r) in &keyed {
        by_x.entry(*x).or_default().push(r);
    }
    if by_x.len() < 2 {
        return Err(EvalError::Contract(format!(
            "{} needs at least 2 distinct points, got {}",
            kind.as_str(),
            by_x.len()
        )));
    }
    by_x.into_iter().map(|(x, g)| Ok((x, summarize(x.to_string(), &g)?))).collect()
}

fn write(path: &Path, contents: &str) -> Result<(), EvalError> {
    fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn grid_text(rows: &[ReportRow], first: &str) -> String {
    let width = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(first.len());
    let mut out = format!("{first:<width$}  runs");
    for m in METRIC_NAMES {
        let _ = write!(out, "  {m:>17}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<width$}  {:>4}", r.label, r.runs);
        for i in 0..4 {
            let cell = format!("{:.4} ± {:.4}", r.mean[i], r.std[i]);
            let _ = write!(out, "  {cell:>17}");
        }
        out.push('\n');
    }
    out
}

fn grid_csv(rows: &[ReportRow], first: &str) -> String {
    let mut out = format!("{first},runs");
    for m in METRIC_NAMES {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push('\n');
    for r in rows {
        let label = if r.label.contains([',', '"']) {
            format!("\"{}\"", r.label.replace('"', "\"\""))
        } else {
            r.label.clone()
        };
        let _ = write!(out, "{label},{}", r.runs);
        for i in 0..4 {
            let _ = write!(out, ",{:.6},{:.6}", r.mean[i], r.std[i]);
        }
        out.push('\n');
    }
    out
}

fn plot(path: &Path, caption: &str, x_desc: &str, rows: &[(usize, ReportRow)], metrics: &[usize]) -> Result<(), EvalError> {
    let err = |e: &dyn std::fmt::Display| EvalError::Contract(format!("plotting {}: {e}", path.display()));
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    // Points are evenly spaced and labeled with their value, since the
    // x values span orders of magnitude.
    let n = rows.len();
    let labels: Vec<String> = rows.iter().map(|(x, _)| x.to_string()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((0..n).into_segmented(), 0f64..1.05f64)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_labels(n)
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) if *i < n => labels[*i].clone(),
            _ => String::new(),
        })
        .x_desc(x_desc)
        .y_desc("test metric")
        .draw()
        .map_err(|e| err(&e))?;
    let colors = [RED, BLUE, GREEN, MAGENTA];
    for &m in metrics {
        let color = colors[m];
        let pts: Vec<(SegmentValue<usize>, f64)> =
            rows.iter().enumerate().map(|(i, (_, r))| (SegmentValue::CenterOf(i), r.mean[m])).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color))
            .map_err(|e| err(&e))?
            .label(METRIC_NAMES[m])
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))
}

/// Writes report files into `out_dir` and returns their paths.
///
/// TABLE: one row per experiment name (test metrics, mean ± std over seeds)
/// as `table.csv` and `table.txt`. SAMPLES_CURVE: all four metrics against
/// the training-set size. PREFIX_CURVE: F1 and accuracy against prefix
/// length. Curves write `<kind>.csv` and `<kind>.svg`.
pub fn emit_report(results: &[ExperimentResult], kind: ReportKind, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Contract("no results to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    match kind {
        ReportKind::Table => {
            let rows = table_rows(results)?;
            let csv = out_dir.join("table.csv");
            let txt = out_dir.join("table.txt");
            write(&csv, &grid_csv(&rows, "experiment"))?;
            write(&txt, &grid_text(&rows, "experiment"))?;
            Ok(vec![csv, txt])
        }
        ReportKind::SamplesCurve | ReportKind::PrefixCurve => {
            let rows = curve_rows(results, kind)?;
            let (stem, x_desc, caption, metrics): (_, _, _, &[usize]) = if kind == ReportKind::SamplesCurve {
                ("samples_curve", "training examples", "Metrics vs. number of training examples", &[0, 1, 2, 3])
            } else {
                ("prefix_curve", "prefix length", "Metrics vs. prefix length", &[0, 3])
            };
            let plain: Vec<ReportRow> = rows.iter().map(|(_, r)| r.clone()).collect();
            let csv = out_dir.join(format!("{stem}.csv"));
            let txt = out_dir.join(format!("{stem}.txt"));
            let svg = out_dir.join(format!("{stem}.svg"));
            write(&csv, &grid_csv(&plain, x_desc.split(' ').next_back().unwrap_or("x")))?;
            write(&txt, &grid_text(&plain, x_desc))?;
            plot(&svg, caption, x_desc, &rows, metrics)?;
            Ok(vec![csv, txt, svg])
        }
    }
}

/// Loads every `result.json` matching `pattern` (a glob), sorted by path.
pub fn load_results(pattern: &str) -> Result<Vec<ExperimentResult>, EvalError> {
    let paths = glob::glob(pattern).map_err(|e| EvalError::Contract(format!("bad glob `{pattern}`: {e}")))?;
    let mut found: Vec<PathBuf> = paths.filter_map(|p| p.ok()).collect();
    found.sort();
    let mut out = Vec::new();
    for p in found {
        let file = if p.is_dir() { p.join("result.json") } else { p };
        if file.file_name().is_some_and(|n| n == "result.json") && file.is_file() {
            out.push(ExperimentResult::load(&file)?);
        }
    }
    if out.is_empty() {
        return Err(EvalError::Contract(format!("no result.json matched `{pattern}`")));
    }
    Ok(out)
}
