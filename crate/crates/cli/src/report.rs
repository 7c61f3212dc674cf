//! Result tables: the sweep table, per-method summaries, preference tallies,
//! rank consistency between co-occurrence and preference strength, and
//! batch-size series.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};
use gvqa_core::metrics::Summary;
use gvqa_core::preference::CorrelationRow;
use serde::{Deserialize, Serialize};

/// One sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub config_hash: String,
    pub method: String,
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub at_coo: Option<f64>,
    pub qt_coo: Option<f64>,
    /// Final λ for AIMLE, configured λ for IMLE.
    pub lambda: Option<f64>,
    /// Temperature for the relaxed sampler.
    pub tau: Option<f64>,
}

/// Mean and standard deviation in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn percent(s: Summary) -> Self {
        Self {
            mean: 100.0 * s.mean,
            std: 100.0 * s.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub accuracy: Option<MeanStd>,
    pub at_coo: Option<MeanStd>,
    pub qt_coo: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRow {
    pub method: String,
    pub favored: usize,
    pub ties: usize,
    pub unfavored: usize,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationLine {
    pub metric: String,
    /// Methods entering the correlation, in order.
    pub methods: Vec<String>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
}

/// Published-style inputs for the report: per-method summaries and
/// preference rows, optionally with a reference correlation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTables {
    pub summaries: Vec<SummaryRow>,
    pub preferences: Vec<PreferenceRow>,
    #[serde(default)]
    pub correlations: Vec<CorrelationLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub batch_size: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub metric: String,
    pub method: String,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub summaries: Vec<SummaryRow>,
    pub preferences: Vec<PreferenceRow>,
    pub correlations: Vec<CorrelationLine>,
    /// Correlations supplied alongside the inputs, for comparison.
    pub reference_correlations: Vec<CorrelationLine>,
    pub series: Vec<Series>,
}

/// Per-method mean and std over every sweep cell of that method.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut by_method: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(method, rs)| {
            let pick = |f: &dyn Fn(&SweepRow) -> Option<f64>| {
                Summary::of(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>()).map(MeanStd::percent)
            };
            SummaryRow {
                method: method.to_string(),
                accuracy: pick(&|r| Some(r.accuracy)),
                at_coo: pick(&|r| r.at_coo),
                qt_coo: pick(&|r| r.qt_coo),
            }
        })
        .collect()
}

/// Correlates each co-occurrence mean with θ across methods that have both.
pub fn correlate(summaries: &[SummaryRow], preferences: &[PreferenceRow]) -> Result<Vec<CorrelationLine>> {
    let theta: BTreeMap<&str, f64> = preferences.iter().map(|p| (p.method.as_str(), p.theta)).collect();
    let mut out = Vec::new();
    for metric in ["AT-COO", "QT-COO"] {
        let mut methods = Vec::new();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for s in summaries {
            let value = if metric == "AT-COO" { s.at_coo } else { s.qt_coo };
            if let (Some(v), Some(t)) = (value, theta.get(s.method.as_str())) {
                methods.push(s.method.clone());
                xs.push(v.mean);
                ys.push(*t);
            }
        }
        if xs.len() < 2 {
            continue;
        }
        let row = CorrelationRow::compute(&xs, &ys)?;
        out.push(CorrelationLine {
            metric: metric.to_string(),
            methods,
            pearson: row.pearson,
            spearman: row.spearman,
            kendall: row.kendall,
        });
    }
    Ok(out)
}

/// Accuracy and co-occurrence means per batch size, one series per method.
pub fn batch_series(rows: &[SweepRow]) -> Vec<Series> {
    let mut out = Vec::new();
    let metrics: [(&str, fn(&SweepRow) -> Option<f64>); 3] = [
        ("accuracy", |r| Some(r.accuracy)),
        ("AT-COO", |r| r.at_coo),
        ("QT-COO", |r| r.qt_coo),
    ];
    let methods: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    for (name, f) in metrics {
        for m in &methods {
            let mut by_batch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.method == *m) {
                if let Some(v) = f(r) {
                    by_batch.entry(r.batch_size).or_default().push(v);
                }
            }
            if by_batch.is_empty() {
                continue;
            }
            out.push(Series {
                metric: name.to_string(),
                method: m.to_string(),
                points: by_batch
                    .into_iter()
                    .map(|(b, vs)| SeriesPoint {
                        batch_size: b,
                        value: vs.iter().sum::<f64>() / vs.len() as f64,
                    })
                    .collect(),
            });
        }
    }
    out
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("--".into(), |x| format!("{x:.digits$}"))
}

fn pm(v: Option<MeanStd>) -> String {
    v.map_or("--".into(), |x| format!("{:.2}±{:.2}", x.mean, x.std))
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect()));
    for r in rows {
        out.push_str(&line(r.clone()));
    }
    out
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.k.to_string(),
                format!("{:.2}", 100.0 * r.accuracy),
                r.batch_size.to_string(),
                r.epochs.to_string(),
                opt(r.at_coo.map(|v| 100.0 * v), 2),
                opt(r.qt_coo.map(|v| 100.0 * v), 2),
                opt(r.lambda, 3),
                opt(r.tau, 3),
                r.seed.to_string(),
            ]
        })
        .collect();
    table(
        &["Method", "Top-k", "Accuracy", "Batch-Size", "N-Epochs", "AT-COO", "QT-COO", "λ", "τ", "Seed"],
        &body,
    )
}

pub fn render_summaries(rows: &[SummaryRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.method.clone(), pm(r.accuracy), pm(r.at_coo), pm(r.qt_coo)])
        .collect();
    table(&["Method", "Accuracy", "AT-COO", "QT-COO"], &body)
}

pub fn render_preferences(rows: &[PreferenceRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.favored.to_string(),
                r.ties.to_string(),
                r.unfavored.to_string(),
                format!("{:.3}", r.theta),
            ]
        })
        .collect();
    table(&["Method", "Favored", "Ties", "Unfavored", "θ"], &body)
}

pub fn render_correlations(rows: &[CorrelationLine]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.metric.clone(), opt(r.pearson, 3), opt(r.spearman, 3), opt(r.kendall, 3)])
        .collect();
    table(&["Metric", "Pearson's r", "Spearman's ρ", "Kendall's τ"], &body)
}

pub fn render_series(series: &[Series]) -> String {
    let mut out = String::new();
    for s in series {
        let pts: Vec<String> = s.points.iter().map(|p| format!("{}:{:.4}", p.batch_size, p.value)).collect();
        let _ = writeln!(out, "{} {} {}", s.metric, s.method, pts.join(" "));
    }
    out
}

pub fn render(report: &Report) -> String {
    let mut out = format!("config {} seed {}\n\n", report.config_hash, report.seed);
    if !report.summaries.is_empty() {
        out.push_str("Mean and standard deviation per method (percent)\n");
        out.push_str(&render_summaries(&report.summaries));
        out.push('\n');
    }
    if !report.preferences.is_empty() {
        out.push_str("Preference tallies and Bradley-Terry strengths\n");
        out.push_str(&render_preferences(&report.preferences));
        out.push('\n');
    }
    if !report.correlations.is_empty() {
        out.push_str("Correlation of co-occurrence with preference strength\n");
        out.push_str(&render_correlations(&report.correlations));
        out.push('\n');
    }
    if !report.reference_correlations.is_empty() {
        out.push_str("Reference correlations\n");
        out.push_str(&render_correlations(&report.reference_correlations));
        out.push('\n');
    }
    if !report.series.is_empty() {
        out.push_str("Series over batch size (batch:value)\n");
        out.push_str(&render_series(&report.series));
    }
    out
}

pub fn check_reference(tables: &ReferenceTables) -> Result<()> {
    if tables.summaries.is_empty() {
        bail!("reference tables contain no summaries");
    }
    Ok(())
}
