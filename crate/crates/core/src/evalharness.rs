//! Benchmark manifests, per-track metric aggregation, and report rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::read_png;
use crate::metrics::{self, MetricName, MetricReport, SsimParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PartComposition,
    TextureTransfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    InterId,
    InnerId,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::PartComposition => "part_composition",
            Task::TextureTransfer => "texture_transfer",
        }
    }
}

impl Track {
    pub fn as_str(&self) -> &'static str {
        match self {
            Track::InterId => "inter_id",
            Track::InnerId => "inner_id",
        }
    }

    /// Metrics joined from an external score file for this track.
    pub fn external_metrics(&self) -> &'static [MetricName] {
        match self {
            Track::InnerId => &[MetricName::Lpips],
            Track::InterId => &[MetricName::DinoI, MetricName::ClipI, MetricName::ClipT],
        }
    }
}

/// Table columns, in display order: ground-truth metrics, then embedding metrics.
pub const TABLE_COLUMNS: [MetricName; 6] = [
    MetricName::Ssim,
    MetricName::Psnr,
    MetricName::Lpips,
    MetricName::DinoI,
    MetricName::ClipI,
    MetricName::ClipT,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub task: Task,
    pub track: Track,
    pub source_path: PathBuf,
    pub mask_path: PathBuf,
    pub reference_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_region_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    #[serde(default)]
    pub depth_required: bool,
}

impl BenchmarkRecord {
    /// Structural invariants; file existence is checked separately.
    pub fn invariant_problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.id.trim().is_empty() {
            p.push("empty id".to_string());
        }
        match self.track {
            Track::InnerId if self.ground_truth_path.is_none() => {
                p.push("inner_id record requires ground_truth_path".into())
            }
            Track::InterId => {
                if self.reference_region_mask_path.is_none() {
                    p.push("inter_id record requires reference_region_mask_path".into());
                }
                if self.prompt_text.as_deref().is_none_or(|t| t.trim().is_empty()) {
                    p.push("inter_id record requires prompt_text".into());
                }
            }
            _ => {}
        }
        if self.task == Task::TextureTransfer && !self.depth_required {
            p.push("texture_transfer record must set depth_required".into());
        }
        p
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.source_path, &mut self.mask_path, &mut self.reference_path];
        v.extend(self.ground_truth_path.as_mut());
        v.extend(self.reference_region_mask_path.as_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordIssue {
    pub index: usize,
    pub id: String,
    pub problems: Vec<String>,
}

/// Valid records (paths resolved against the manifest directory) plus an
/// itemized list of rejected ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManifestCheck {
    pub records: Vec<BenchmarkRecord>,
    pub issues: Vec<RecordIssue>,
}

pub fn validate_manifest(path: impl AsRef<Path>) -> Result<ManifestCheck> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<serde_json::Value> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut check = ManifestCheck::default();
    let mut seen = HashMap::new();
    for (index, value) in raw.into_iter().enumerate() {
        let id = value.get("id").and_then(|v| v.as_str()).unwrap_or("").to_string();
        let mut rec: BenchmarkRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                check.issues.push(RecordIssue {
                    index,
                    id,
                    problems: vec![e.to_string()],
                });
                continue;
            }
        };
        let mut problems = rec.invariant_problems();
        if let Some(first) = seen.insert(rec.id.clone(), index) {
            problems.push(format!("duplicate id (first at record {first})"));
        }
        for p in rec.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                problems.push(format!("missing file {}", p.display()));
            }
        }
        if problems.is_empty() {
            check.records.push(rec);
        } else {
            check.issues.push(RecordIssue { index, id: rec.id, problems });
        }
    }
    Ok(check)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub task: Task,
    pub track: Track,
    pub count: usize,
    /// Means over records that carry each metric.
    pub means: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub records_in: usize,
    pub records_scored: usize,
    pub skipped: Vec<SkippedRecord>,
    /// Ordered by (task, track).
    pub tracks: Vec<TrackReport>,
}

type ScoreTable = HashMap<(String, MetricName), f64>;

/// Loads a score file keyed by (record id, metric). Later lines win.
pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let file = metrics::read_score_file(path)?;
    for (line, err) in &file.errors {
        warn!("{}:{line}: {err}", path.display());
    }
    let mut table = ScoreTable::new();
    for l in file.lines {
        let Some(metric) = MetricName::parse(&l.metric) else {
            warn!("{}: unknown metric {:?} for {}", path.display(), l.metric, l.id);
            continue;
        };
        if !metric.in_range(l.value) {
            warn!("{}: {} = {} out of range for {}", path.display(), l.metric, l.value, l.id);
            continue;
        }
        if table.insert((l.id.clone(), metric), l.value).is_some() {
            warn!("{}: duplicate {} for {}; keeping the last", path.display(), l.metric, l.id);
        }
    }
    Ok(table)
}

fn score_record(rec: &BenchmarkRecord, outputs_dir: &Path, scores: &ScoreTable) -> Result<MetricReport, String> {
    let out_path = outputs_dir.join(format!("{}.png", rec.id));
    if !out_path.is_file() {
        return Err(format!("missing output {}", out_path.display()));
    }
    let mut report = MetricReport::default();
    if rec.track == Track::InnerId {
        let gt_path = rec.ground_truth_path.as_ref().ok_or("no ground truth")?;
        let output = read_png(&out_path).map_err(|e| e.to_string())?.to_rgb();
        let gt = read_png(gt_path).map_err(|e| e.to_string())?.to_rgb();
        if !output.same_shape(&gt) {
            return Err(format!("output {:?} does not match ground truth {:?}", output.dims(), gt.dims()));
        }
        report.ssim = Some(metrics::ssim(&output, &gt, &SsimParams::default()).map_err(|e| e.to_string())?);
        report.psnr = Some(metrics::psnr(&output, &gt).map_err(|e| e.to_string())?);
    }
    for &m in rec.track.external_metrics() {
        if let Some(&v) = scores.get(&(rec.id.clone(), m)) {
            report.embed_scores.insert(m, v);
        }
    }
    Ok(report)
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    if values.iter().any(|v| v.is_infinite()) {
        return Some(f64::INFINITY);
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

fn aggregate(task: Task, track: Track, per_record: &[&MetricReport]) -> TrackReport {
    let ssim: Vec<f64> = per_record.iter().filter_map(|r| r.ssim).collect();
    let psnr: Vec<f64> = per_record.iter().filter_map(|r| r.psnr).collect();
    let mut embed_scores = BTreeMap::new();
    for &m in track.external_metrics() {
        let vals: Vec<f64> = per_record.iter().filter_map(|r| r.embed_scores.get(&m).copied()).collect();
        if let Some(v) = mean(&vals) {
            embed_scores.insert(m, v);
        }
    }
    TrackReport {
        task,
        track,
        count: per_record.len(),
        means: MetricReport {
            ssim: mean(&ssim),
            psnr: mean(&psnr),
            embed_scores,
        },
    }
}

/// Scores every record against `<outputs_dir>/<id>.png`. Ground-truth metrics
/// are computed here; embedding metrics come only from `scores`. Records
/// without an output are skipped and listed.
pub fn evaluate(records: &[BenchmarkRecord], outputs_dir: impl AsRef<Path>, scores: Option<&ScoreTable>) -> EvalReport {
    let empty = ScoreTable::new();
    let scores = scores.unwrap_or(&empty);
    let outputs_dir = outputs_dir.as_ref();
    let results: Vec<Result<MetricReport, String>> =
        records.par_iter().map(|r| score_record(r, outputs_dir, scores)).collect();

    let mut groups: BTreeMap<(Task, Track), Vec<&MetricReport>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for (rec, res) in records.iter().zip(&results) {
        match res {
            Ok(m) => groups.entry((rec.task, rec.track)).or_default().push(m),
            Err(reason) => {
                warn!("record {} skipped: {reason}", rec.id);
                skipped.push(SkippedRecord {
                    id: rec.id.clone(),
                    reason: reason.clone(),
                });
            }
        }
    }
    EvalReport {
        config_hash: None,
        records_in: records.len(),
        records_scored: records.len() - skipped.len(),
        skipped,
        tracks: groups.into_iter().map(|((task, track), v)| aggregate(task, track, &v)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

fn metric_value(means: &MetricReport, m: MetricName) -> Option<f64> {
    match m {
        MetricName::Ssim => means.ssim,
        MetricName::Psnr => means.psnr,
        other => means.embed_scores.get(&other).copied(),
    }
}

fn render_markdown(report: &EvalReport) -> String {
    let mut s = String::from("# Benchmark report\n\n");
    if let Some(h) = &report.config_hash {
        let _ = writeln!(s, "config hash: `{h}`\n");
    }
    let _ = writeln!(
        s,
        "records: {} in, {} scored, {} skipped\n",
        report.records_in,
        report.records_scored,
        report.skipped.len()
    );
    let head: Vec<&str> = TABLE_COLUMNS.iter().map(|m| m.heading()).collect();
    for t in &report.tracks {
        let _ = writeln!(s, "## {} / {}\n", t.task.as_str(), t.track.as_str());
        let _ = writeln!(s, "| Records | {} |", head.join(" | "));
        let _ = writeln!(s, "|---:|{}", "---:|".repeat(head.len()));
        let cells: Vec<String> = TABLE_COLUMNS
            .iter()
            .map(|&m| match metric_value(&t.means, m) {
                None => "—".to_string(),
                Some(v) if v.is_infinite() => "inf".to_string(),
                Some(v) if m == MetricName::Psnr => format!("{v:.2}"),
                Some(v) => format!("{v:.4}"),
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |\n", t.count, cells.join(" | "));
    }
    if !report.skipped.is_empty() {
        s.push_str("## Skipped\n\n");
        for k in &report.skipped {
            let _ = writeln!(s, "- `{}`: {}", k.id, k.reason);
        }
    }
    s
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Markdown => render_markdown(report),
    })
}

pub fn parse_report(json: &str) -> Result<EvalReport> {
    Ok(serde_json::from_str(json)?)
}
