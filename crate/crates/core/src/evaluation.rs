//! Deviation statistics, model comparisons and report export.
//!
//! "Mean relative deviation" is the mean of the absolute signed deviations.
//! Signed values are kept for histograms. Word-count requirements are
//! reported in a separate held-out section and never enter the aggregates of
//! the training metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::io::write_atomic;
use crate::metrics::{LengthMetricKind, LengthRequirement};
use crate::objectives::relative_deviation;
use crate::toy::sha256_hex;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON Schema for [`EvaluationReport`] documents.
pub const REPORT_JSON_SCHEMA: &str = include_str!("../schemas/evaluation_report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub id: String,
    #[serde(flatten)]
    pub requirement: LengthRequirement,
    pub actual: f64,
    pub signed_deviation_pct: f64,
}

impl EvaluationRecord {
    pub fn new(id: impl Into<String>, requirement: LengthRequirement, actual: f64) -> Result<Self> {
        if !(actual.is_finite() && actual >= 0.0) {
            return Err(domain(format!("actual length must be finite and >= 0, got {actual}")));
        }
        Ok(Self {
            id: id.into(),
            signed_deviation_pct: relative_deviation(actual, requirement.target())?,
            requirement,
            actual,
        })
    }
}

/// Bin edges, strictly increasing. Bins are left-closed: `[e_i, e_{i+1})`,
/// with an underflow bin below the first edge and an overflow bin at or above
/// the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    edges: Vec<f64>,
}

impl BinSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(domain("a bin spec needs at least two edges"));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(domain(format!("bin edges must be finite and strictly increasing: {edges:?}")));
        }
        Ok(Self { edges })
    }

    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(domain("need at least one bin"));
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
        edges.push(hi);
        Self::new(edges)
    }

    /// 41 uniform bins over [−50%, +50%].
    pub fn deviation_default() -> Self {
        Self::uniform(-50.0, 50.0, 41).expect("valid default bins")
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        Self::deviation_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub underflow: usize,
    pub counts: Vec<usize>,
    pub overflow: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.underflow + self.overflow + self.counts.iter().sum::<usize>()
    }
}

pub fn histogram(values: &[f64], spec: &BinSpec) -> Histogram {
    let edges = spec.edges();
    let mut h = Histogram { edges: edges.to_vec(), underflow: 0, counts: vec![0; edges.len() - 1], overflow: 0 };
    for &v in values {
        if v < edges[0] {
            h.underflow += 1;
        } else if v >= edges[edges.len() - 1] {
            h.overflow += 1;
        } else {
            // first edge strictly greater than v, minus one
            let i = edges.partition_point(|&e| e <= v) - 1;
            h.counts[i] += 1;
        }
    }
    h
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean_abs_deviation_pct: f64,
    pub median_abs_deviation_pct: f64,
    pub p90_abs_deviation_pct: f64,
    pub mean_signed_deviation_pct: f64,
    pub histogram: Histogram,
}

impl MetricSummary {
    /// Statistics are computed over sorted values, so the result does not
    /// depend on record order.
    pub fn from_deviations(signed: &[f64], bins: &BinSpec) -> Result<Self> {
        if signed.is_empty() {
            return Err(domain("no deviations to summarize"));
        }
        let n = signed.len() as f64;
        let mut abs: Vec<f64> = signed.iter().map(|d| d.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let mut sorted_signed = signed.to_vec();
        sorted_signed.sort_by(f64::total_cmp);
        Ok(Self {
            n: signed.len(),
            mean_abs_deviation_pct: compensated_sum(abs.iter().copied()) / n,
            median_abs_deviation_pct: quantile(&abs, 0.5),
            p90_abs_deviation_pct: quantile(&abs, 0.9),
            mean_signed_deviation_pct: compensated_sum(sorted_signed.iter().copied()) / n,
            histogram: histogram(signed, bins),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub config_digest: String,
    pub metrics: BTreeMap<LengthMetricKind, MetricSummary>,
    /// Mean |deviation| over every training-metric record.
    pub overall_mean_abs_deviation_pct: Option<f64>,
    /// Held-out (generalization probe) metrics; absent when none were probed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub held_out: BTreeMap<LengthMetricKind, MetricSummary>,
    /// Externally computed quality scores (semantic similarity, grammar, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub quality_scores: BTreeMap<String, f64>,
    pub records: Vec<EvaluationRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    pub bins: BinSpec,
    /// Free-form description of how the records were produced; folded into
    /// the config digest.
    pub label: String,
}

fn group_by_metric(records: &[EvaluationRecord]) -> BTreeMap<LengthMetricKind, Vec<f64>> {
    let mut groups: BTreeMap<LengthMetricKind, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.requirement.kind()).or_default().push(r.signed_deviation_pct);
    }
    groups
}

pub fn evaluate(records: &[EvaluationRecord], options: &EvaluateOptions) -> Result<EvaluationReport> {
    if records.is_empty() {
        return Err(domain("no records to evaluate"));
    }
    let mut metrics = BTreeMap::new();
    let mut held_out = BTreeMap::new();
    let mut training_abs = Vec::new();
    for (kind, devs) in group_by_metric(records) {
        let summary = MetricSummary::from_deviations(&devs, &options.bins)?;
        if kind.held_out() {
            held_out.insert(kind, summary);
        } else {
            training_abs.extend(devs.iter().map(|d| d.abs()));
            metrics.insert(kind, summary);
        }
    }
    training_abs.sort_by(f64::total_cmp);
    let overall =
        (!training_abs.is_empty()).then(|| compensated_sum(training_abs.iter().copied()) / training_abs.len() as f64);
    let digest_input = serde_json::to_vec(&(&options.bins, &options.label))?;
    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_digest: sha256_hex(&digest_input),
        metrics,
        overall_mean_abs_deviation_pct: overall,
        held_out,
        quality_scores: BTreeMap::new(),
        records: records.to_vec(),
    })
}

/// Summary of held-out-metric records only. Returns `None` for an empty probe
/// set so the section can be omitted.
pub fn generalization_probe(records: &[EvaluationRecord], bins: &BinSpec) -> Result<Option<MetricSummary>> {
    if let Some(r) = records.iter().find(|r| !r.requirement.kind().held_out()) {
        return Err(domain(format!(
            "record `{}` uses training metric `{}`; the probe only accepts held-out metrics",
            r.id,
            r.requirement.kind()
        )));
    }
    if records.is_empty() {
        return Ok(None);
    }
    let devs: Vec<f64> = records.iter().map(|r| r.signed_deviation_pct).collect();
    MetricSummary::from_deviations(&devs, bins).map(Some)
}

/// (candidate − baseline) / baseline × 100; negative is an improvement.
pub fn percent_change(baseline: f64, candidate: f64) -> Result<f64> {
    if baseline == candidate {
        return Ok(0.0);
    }
    if !(baseline.is_finite() && baseline > 0.0 && candidate.is_finite()) {
        return Err(domain(format!("cannot take percent change from {baseline} to {candidate}")));
    }
    Ok((candidate - baseline) * 100.0 / baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_digest: String,
    pub candidate_digest: String,
    pub per_metric_pct_change: BTreeMap<LengthMetricKind, f64>,
    pub overall_pct_change: Option<f64>,
}

pub fn compare(baseline: &EvaluationReport, candidate: &EvaluationReport) -> Result<ComparisonReport> {
    let mut per_metric = BTreeMap::new();
    for (kind, b) in &baseline.metrics {
        if let Some(c) = candidate.metrics.get(kind) {
            per_metric.insert(*kind, percent_change(b.mean_abs_deviation_pct, c.mean_abs_deviation_pct)?);
        }
    }
    if per_metric.is_empty() {
        return Err(domain("baseline and candidate reports share no metric"));
    }
    let overall = match (baseline.overall_mean_abs_deviation_pct, candidate.overall_mean_abs_deviation_pct) {
        (Some(b), Some(c)) => Some(percent_change(b, c)?),
        _ => None,
    };
    Ok(ComparisonReport {
        baseline_digest: report_digest(baseline)?,
        candidate_digest: report_digest(candidate)?,
        per_metric_pct_change: per_metric,
        overall_pct_change: overall,
    })
}

fn report_digest(report: &EvaluationReport) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(report)?))
}

/// Integer percentage with round-half-to-even and an explicit sign, e.g. `+5%`.
pub fn display_pct(value: f64) -> String {
    let r = value.round_ties_even();
    if r == 0.0 {
        "0%".to_string()
    } else {
        format!("{r:+}%")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
    Svg,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            "svg" | "svg-histogram" => Ok(ExportFormat::Svg),
            other => Err(Error::Parse(format!("unknown export format `{other}`"))),
        }
    }
}

pub const CSV_HEADER: [&str; 5] = ["id", "metric", "target", "actual", "signed_deviation_pct"];

pub fn records_to_csv(records: &[EvaluationRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            r.requirement.kind().as_str(),
            &r.requirement.format_target(),
            &r.actual.to_string(),
            &r.signed_deviation_pct.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Reads records written by [`records_to_csv`]. The `signed_deviation_pct`
/// column is optional; it is always recomputed and, when present, must agree.
pub fn records_from_csv(bytes: &[u8]) -> Result<Vec<EvaluationRecord>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().map_err(csv_err)?;
    let with_deviation = header.iter().eq(CSV_HEADER);
    if !with_deviation && header.iter().ne(CSV_HEADER[..4].iter().copied()) {
        return Err(Error::Parse(format!("unexpected CSV header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|_| Error::Parse(format!("column {} is not a number: {:?}", CSV_HEADER[i], &row[i])))
        };
        let requirement = LengthRequirement::new(row[1].parse()?, num(2)?)?;
        let record = EvaluationRecord::new(&row[0], requirement, num(3)?)?;
        if with_deviation {
            let given = num(4)?;
            if (given - record.signed_deviation_pct).abs() > 1e-9 * given.abs().max(1.0) {
                return Err(Error::Parse(format!(
                    "record `{}`: signed_deviation_pct {given} does not match target and actual ({})",
                    record.id, record.signed_deviation_pct
                )));
            }
        }
        out.push(record);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let r: EvaluationReport = serde_json::from_slice(bytes)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported report schema version {}", r.schema_version)));
        }
        Ok(r)
    }
}

pub fn export(report: &EvaluationReport, format: ExportFormat) -> Result<Vec<u8>> {
    match format {
        ExportFormat::Csv => records_to_csv(&report.records),
        ExportFormat::Json => report.to_json(),
        ExportFormat::Svg => Ok(render_svg(report).into_bytes()),
    }
}

pub fn export_to_path(report: &EvaluationReport, format: ExportFormat, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &export(report, format)?)
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_B: f64 = 48.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_R: f64 = 16.0;

/// One histogram panel per metric, laid out left to right. Static SVG.
pub fn render_svg(report: &EvaluationReport) -> String {
    let panels: Vec<(String, &MetricSummary)> = report
        .metrics
        .iter()
        .map(|(k, s)| (k.to_string(), s))
        .chain(report.held_out.iter().map(|(k, s)| (format!("{k} (held out)"), s)))
        .collect();
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif" font-size="11">"#
    );
    for (i, (title, summary)) in panels.iter().enumerate() {
        let _ =
            writeln!(svg, r#"<g class="panel" data-metric="{title}" transform="translate({},0)">"#, PANEL_W * i as f64);
        draw_panel(&mut svg, title, summary);
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

fn draw_panel(svg: &mut String, title: &str, summary: &MetricSummary) {
    let h = &summary.histogram;
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    // underflow, bins, overflow
    let bars: Vec<usize> =
        std::iter::once(h.underflow).chain(h.counts.iter().copied()).chain(std::iter::once(h.overflow)).collect();
    let max = bars.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = plot_w / bars.len() as f64;
    let x0 = MARGIN_L;
    let y0 = MARGIN_T + plot_h;
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-weight="bold">{title} (n={})</text>"#,
        x0 + plot_w / 2.0,
        summary.n
    );
    for (j, &count) in bars.iter().enumerate() {
        let bh = plot_h * count as f64 / max;
        let fill = if j == 0 || j == bars.len() - 1 { "#bbbbbb" } else { "#4477aa" };
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"><title>{count}</title></rect>"#,
            x0 + bar_w * j as f64,
            y0 - bh,
            bar_w,
            bh
        );
    }
    let _ = writeln!(svg, r##"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="#000"/>"##, x0 + plot_w);
    let _ = writeln!(svg, r##"<line x1="{x0}" y1="{MARGIN_T}" x2="{x0}" y2="{y0}" stroke="#000"/>"##);
    let first = h.edges[0];
    let last = h.edges[h.edges.len() - 1];
    for (label, frac) in
        [(first, 1.0), ((first + last) / 2.0, 0.5 * (bars.len() as f64)), (last, bars.len() as f64 - 1.0)]
    {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{label}</text>"#,
            x0 + bar_w * frac,
            y0 + 14.0
        );
    }
    let _ = writeln!(svg, r#"<text x="{x0}" y="{}" text-anchor="end">0</text>"#, y0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, MARGIN_T + 4.0, max as usize);
    let _ = writeln!(
        svg,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">deviation from length target (%)</text>"#,
        x0 + plot_w / 2.0,
        PANEL_H - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text class="y-label" x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">count</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    );
}
