//! Accuracy metrics, grouping, run statistics and report tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{BioLabel, Manifest};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    EmptyEval,
    #[error("mean accuracy needs both classes, found only {0}")]
    MissingClass(String),
    #[error("records lack the {0} attribute")]
    MissingAttribute(String),
    #[error("run statistics need at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("predictions file: {0}")]
    Csv(String),
}

impl MetricsError {
    pub fn name(&self) -> &'static str {
        match self {
            MetricsError::EmptyEval => "EmptyEval",
            MetricsError::MissingClass(_) => "MissingClass",
            MetricsError::MissingAttribute(_) => "MissingAttribute",
            MetricsError::TooFewRuns(_) => "TooFewRuns",
            MetricsError::InvalidRecord(_) => "InvalidRecord",
            MetricsError::Csv(_) => "CsvError",
        }
    }
}

impl From<csv::Error> for MetricsError {
    fn from(e: csv::Error) -> Self {
        MetricsError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: String,
    pub label: BioLabel,
    pub predicted: BioLabel,
    /// Probability of the predicted class.
    pub confidence: f64,
    pub patch_id: String,
    pub year: i32,
    pub region: Option<String>,
}

impl EvalRecord {
    pub fn is_correct(&self) -> bool {
        self.label == self.predicted
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(0.5..=1.0).contains(&self.confidence) {
            return Err(MetricsError::InvalidRecord(format!(
                "{}: confidence {} outside [0.5, 1]",
                self.sample_id, self.confidence
            )));
        }
        Ok(())
    }
}

/// Per-class tallies, indexed by [`BioLabel::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub n: [usize; 2],
    pub correct: [usize; 2],
}

impl ClassCounts {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (BioLabel, BioLabel)>) -> Self {
        let mut c = Self::default();
        for (label, predicted) in pairs {
            c.add(label, predicted);
        }
        c
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Self {
        Self::from_pairs(records.into_iter().map(|r| (r.label, r.predicted)))
    }

    pub fn add(&mut self, label: BioLabel, predicted: BioLabel) {
        self.n[label.index()] += 1;
        if label == predicted {
            self.correct[label.index()] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.n[0] + self.n[1]
    }

    pub fn class_accuracy(&self, label: BioLabel) -> Option<f64> {
        let i = label.index();
        (self.n[i] > 0).then(|| self.correct[i] as f64 / self.n[i] as f64)
    }

    pub fn oacc(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.correct[0] + self.correct[1]) as f64 / self.total() as f64)
    }

    /// Mean over the classes that occur; equals MAcc when both do.
    pub fn present_class_mean(&self) -> Option<f64> {
        let accs: Vec<f64> = BioLabel::ALL.iter().filter_map(|&l| self.class_accuracy(l)).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn summary(&self) -> Result<MetricsSummary, MetricsError> {
        if self.total() == 0 {
            return Err(MetricsError::EmptyEval);
        }
        match (self.class_accuracy(BioLabel::High), self.class_accuracy(BioLabel::Low)) {
            (Some(acc_high), Some(acc_low)) => Ok(MetricsSummary {
                oacc: self.oacc().unwrap_or_default(),
                macc: (acc_high + acc_low) / 2.0,
                acc_high,
                acc_low,
                n_total: self.total(),
                n_high: self.n[BioLabel::High.index()],
                n_low: self.n[BioLabel::Low.index()],
            }),
            (None, _) => Err(MetricsError::MissingClass("high".into())),
            (_, None) => Err(MetricsError::MissingClass("low".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub oacc: f64,
    pub macc: f64,
    pub acc_high: f64,
    pub acc_low: f64,
    pub n_total: usize,
    pub n_high: usize,
    pub n_low: usize,
}

pub fn overall_accuracy(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    ClassCounts::from_records(records).oacc().ok_or(MetricsError::EmptyEval)
}

pub fn mean_accuracy(records: &[EvalRecord]) -> Result<MetricsSummary, MetricsError> {
    ClassCounts::from_records(records).summary()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    Year,
    Region,
    Patch,
}

impl FromStr for GroupKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "year" => Ok(GroupKey::Year),
            "region" => Ok(GroupKey::Region),
            "patch" => Ok(GroupKey::Patch),
            other => Err(format!("unknown group key {other:?}")),
        }
    }
}

/// Tallies per group; [`ClassCounts::summary`] reports groups missing a class.
pub fn grouped_metrics(records: &[EvalRecord], key: GroupKey) -> Result<BTreeMap<String, ClassCounts>, MetricsError> {
    let mut groups: BTreeMap<String, ClassCounts> = BTreeMap::new();
    for r in records {
        let k = match key {
            GroupKey::Year => r.year.to_string(),
            GroupKey::Patch => r.patch_id.clone(),
            GroupKey::Region => {
                r.region.clone().ok_or_else(|| MetricsError::MissingAttribute(format!("region (sample {})", r.sample_id)))?
            }
        };
        groups.entry(k).or_default().add(r.label, r.predicted);
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (n - 1).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub runs: usize,
    pub oacc: MeanStd,
    pub macc: MeanStd,
    pub acc_high: MeanStd,
    pub acc_low: MeanStd,
}

pub fn run_stats(runs: &[MetricsSummary]) -> Result<RunStats, MetricsError> {
    if runs.len() < 2 {
        return Err(MetricsError::TooFewRuns(runs.len()));
    }
    let field = |f: fn(&MetricsSummary) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(RunStats {
        runs: runs.len(),
        oacc: field(|m| m.oacc),
        macc: field(|m| m.macc),
        acc_high: field(|m| m.acc_high),
        acc_low: field(|m| m.acc_low),
    })
}

/// Fraction as a percentage with one decimal, halves rounded up.
pub fn pct1(fraction: f64) -> String {
    format!("{:.1}", (fraction * 1000.0 + 0.5 + 1e-9).floor() / 10.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRow {
    pub patch_id: String,
    pub label: BioLabel,
    pub n: usize,
    /// Per-model accuracy over the classes present in the patch.
    pub values: Vec<f64>,
    pub average: f64,
    /// Indices of the best model(s).
    pub best: Vec<usize>,
}

/// Per-patch accuracies for several models, best average first.
pub fn per_patch_table(models: &[(String, Vec<EvalRecord>)]) -> Vec<PatchRow> {
    let mut patches: BTreeMap<&str, (BioLabel, Vec<ClassCounts>)> = BTreeMap::new();
    for (m, (_, records)) in models.iter().enumerate() {
        for r in records {
            let entry = patches.entry(&r.patch_id).or_insert_with(|| (r.label, vec![ClassCounts::default(); models.len()]));
            entry.1[m].add(r.label, r.predicted);
        }
    }
    let mut rows: Vec<PatchRow> = patches
        .into_iter()
        .map(|(id, (label, counts))| {
            let values: Vec<f64> = counts.iter().map(|c| c.present_class_mean().unwrap_or(0.0)).collect();
            let average = values.iter().sum::<f64>() / values.len() as f64;
            let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let best = (0..values.len()).filter(|&i| values[i] >= top - 1e-12).collect();
            let n = counts.iter().map(ClassCounts::total).max().unwrap_or(0);
            PatchRow { patch_id: id.to_string(), label, n, values, average, best }
        })
        .collect();
    rows.sort_by(|a, b| b.average.total_cmp(&a.average).then_with(|| a.patch_id.cmp(&b.patch_id)));
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

fn md_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn md_rule(aligns: &[bool]) -> String {
    let cells: Vec<String> = aligns.iter().map(|&right| if right { "---:".into() } else { "---".into() }).collect();
    md_row(&cells)
}

fn csv_line(cells: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(cells).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

/// One model's metrics, either a single run or mean and std over runs.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelResult {
    Single(MetricsSummary),
    Runs(RunStats),
}

impl ModelResult {
    fn cells(&self, format: ReportFormat) -> Vec<String> {
        match (self, format) {
            (ModelResult::Single(m), ReportFormat::Markdown) => {
                [m.oacc, m.macc, m.acc_high, m.acc_low].iter().map(|v| format!("{}%", pct1(*v))).collect()
            }
            (ModelResult::Single(m), ReportFormat::Csv) => {
                [m.oacc, m.macc, m.acc_high, m.acc_low].iter().map(|v| pct1(*v)).collect()
            }
            (ModelResult::Runs(r), ReportFormat::Markdown) => {
                [r.oacc, r.macc, r.acc_high, r.acc_low].iter().map(|s| format!("{}% ± {}", pct1(s.mean), pct1(s.std))).collect()
            }
            (ModelResult::Runs(r), ReportFormat::Csv) => {
                [r.oacc, r.macc, r.acc_high, r.acc_low].iter().flat_map(|s| [pct1(s.mean), pct1(s.std)]).collect()
            }
        }
    }
}

/// Model comparison table with OAcc, MAcc and per-class accuracies.
pub fn summary_table(rows: &[(String, ModelResult)], format: ReportFormat) -> String {
    let runs = rows.iter().any(|(_, r)| matches!(r, ModelResult::Runs(_)));
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out += &md_row(&["Model", "OAcc", "MAcc", "Acc_high", "Acc_low"].map(String::from));
            out += &md_rule(&[false, true, true, true, true]);
            for (name, r) in rows {
                out += &md_row(&[vec![name.clone()], r.cells(format)].concat());
            }
        }
        ReportFormat::Csv => {
            let header: Vec<String> = if runs {
                ["model", "oacc", "oacc_std", "macc", "macc_std", "acc_high", "acc_high_std", "acc_low", "acc_low_std"]
                    .map(String::from)
                    .to_vec()
            } else {
                ["model", "oacc", "macc", "acc_high", "acc_low"].map(String::from).to_vec()
            };
            out += &csv_line(&header);
            for (name, r) in rows {
                let mut cells = vec![name.clone()];
                let mut vals = r.cells(format);
                if runs && matches!(r, ModelResult::Single(_)) {
                    vals = vals.into_iter().flat_map(|v| [v, String::new()]).collect();
                }
                cells.extend(vals);
                out += &csv_line(&cells);
            }
        }
    }
    out
}

/// Per-patch table split into high and low sections.
pub fn patch_table(models: &[String], rows: &[PatchRow], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let mut header = vec!["Forest patch".to_string(), "Samples".into(), "Avg. MAcc".into()];
            header.extend(models.iter().cloned());
            for label in [BioLabel::High, BioLabel::Low] {
                let section: Vec<&PatchRow> = rows.iter().filter(|r| r.label == label).collect();
                if section.is_empty() {
                    continue;
                }
                let _ = writeln!(out, "### {label}\n");
                out += &md_row(&header);
                out += &md_rule(&[vec![false], vec![true; header.len() - 1]].concat());
                for r in section {
                    let mut cells = vec![r.patch_id.clone(), r.n.to_string(), pct1(r.average)];
                    cells.extend(r.values.iter().enumerate().map(|(i, v)| {
                        if r.best.contains(&i) {
                            format!("**{}**", pct1(*v))
                        } else {
                            pct1(*v)
                        }
                    }));
                    out += &md_row(&cells);
                }
                out.push('\n');
            }
        }
        ReportFormat::Csv => {
            let mut header = vec!["patch_id".to_string(), "label".into(), "samples".into(), "avg_macc".into()];
            header.extend(models.iter().cloned());
            header.push("best".into());
            out += &csv_line(&header);
            for r in rows {
                let mut cells = vec![r.patch_id.clone(), r.label.to_string(), r.n.to_string(), pct1(r.average)];
                cells.extend(r.values.iter().map(|v| pct1(*v)));
                cells.push(r.best.iter().map(|&i| models[i].as_str()).collect::<Vec<_>>().join(";"));
                out += &csv_line(&cells);
            }
        }
    }
    out
}

/// Grouped metrics; groups missing a class show `n/a` for MAcc.
pub fn group_table(groups: &BTreeMap<String, ClassCounts>, key_name: &str, format: ReportFormat) -> String {
    let opt = |v: Option<f64>| v.map(pct1).unwrap_or_else(|| "n/a".into());
    let mut out = String::new();
    let header = [key_name, "n", "n_high", "n_low", "OAcc", "MAcc", "Acc_high", "Acc_low"].map(String::from);
    match format {
        ReportFormat::Markdown => {
            out += &md_row(&header);
            out += &md_rule(&[false, true, true, true, true, true, true, true]);
        }
        ReportFormat::Csv => out += &csv_line(&header.map(|h| h.to_lowercase())),
    }
    for (k, c) in groups {
        let macc = c.summary().ok().map(|s| s.macc);
        let cells = vec![
            k.clone(),
            c.total().to_string(),
            c.n[BioLabel::High.index()].to_string(),
            c.n[BioLabel::Low.index()].to_string(),
            opt(c.oacc()),
            opt(macc),
            opt(c.class_accuracy(BioLabel::High)),
            opt(c.class_accuracy(BioLabel::Low)),
        ];
        out += &match format {
            ReportFormat::Markdown => md_row(&cells),
            ReportFormat::Csv => csv_line(&cells),
        };
    }
    out
}

/// One row of a predictions CSV (`model,sample_id,predicted,confidence`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub model: String,
    pub sample_id: String,
    pub predicted: BioLabel,
    pub confidence: f64,
}

pub fn write_predictions<W: Write>(preds: &[Prediction], w: W) -> Result<(), MetricsError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["model", "sample_id", "predicted", "confidence"])?;
    for p in preds {
        wr.serialize(p)?;
    }
    wr.flush().map_err(|e| MetricsError::Csv(e.to_string()))
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<Prediction>, MetricsError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != ["model", "sample_id", "predicted", "confidence"] {
        return Err(MetricsError::Csv(format!("unexpected header {header:?}")));
    }
    rd.deserialize().map(|row| row.map_err(MetricsError::from)).collect()
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, MetricsError> {
    let f = std::fs::File::open(path).map_err(|e| MetricsError::Csv(format!("{}: {e}", path.display())))?;
    read_predictions(std::io::BufReader::new(f))
}

/// `sample_id,region` sidecar.
pub fn read_regions<R: Read>(r: R) -> Result<HashMap<String, String>, MetricsError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = HashMap::new();
    for row in rd.records() {
        let row = row?;
        if row.len() < 2 {
            return Err(MetricsError::Csv("region rows need sample_id,region".into()));
        }
        out.insert(row[0].to_string(), row[1].to_string());
    }
    Ok(out)
}

/// Joins predictions of one model with manifest ground truth.
pub fn eval_records(
    preds: &[Prediction],
    manifest: &Manifest,
    regions: Option<&HashMap<String, String>>,
) -> Result<Vec<EvalRecord>, MetricsError> {
    let by_id = manifest.by_id();
    preds
        .iter()
        .map(|p| {
            let s = by_id
                .get(p.sample_id.as_str())
                .ok_or_else(|| MetricsError::InvalidRecord(format!("{} is not in the manifest", p.sample_id)))?;
            let r = EvalRecord {
                sample_id: p.sample_id.clone(),
                label: s.label,
                predicted: p.predicted,
                confidence: p.confidence,
                patch_id: s.patch_id.clone(),
                year: s.year,
                region: regions.and_then(|m| m.get(&p.sample_id).cloned()),
            };
            r.validate()?;
            Ok(r)
        })
        .collect()
}
