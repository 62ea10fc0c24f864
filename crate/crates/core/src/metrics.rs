//! Homogeneity, completeness and V-measure, plus per dataset x split report
//! aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::FormatVerdict;
use crate::partition::Partition;
use crate::reward::RewardBreakdown;
use crate::task::{Dataset, Split};

/// Gold-class x predicted-cluster counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
    n: u64,
}

impl ContingencyTable {
    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols).map(|b| self.counts.iter().map(|r| r[b]).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let cols = self.counts.first().map_or(0, Vec::len);
        let counts = (0..cols)
            .map(|b| self.counts.iter().map(|r| r[b]).collect())
            .collect();
        Self { counts, n: self.n }
    }
}

pub fn contingency(pred: &Partition, gold: &Partition) -> Result<ContingencyTable> {
    if pred.m() != gold.m() {
        return Err(Error::SizeMismatch {
            left: pred.m(),
            right: gold.m(),
        });
    }
    let pred_labels = pred.labels();
    let mut counts = vec![vec![0u64; pred.k()]; gold.k()];
    for (a, cluster) in gold.clusters().iter().enumerate() {
        for &item in cluster {
            counts[a][pred_labels[item - 1] - 1] += 1;
        }
    }
    Ok(ContingencyTable {
        counts,
        n: gold.m() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub h: f64,
    pub c: f64,
    pub v: f64,
}

impl MetricScore {
    pub const ZERO: MetricScore = MetricScore {
        h: 0.0,
        c: 0.0,
        v: 0.0,
    };

    pub fn from_hc(h: f64, c: f64) -> Self {
        let v = if h + c > 0.0 { 2.0 * h * c / (h + c) } else { 0.0 };
        Self { h, c, v }
    }
}

fn xlogx(x: u64) -> f64 {
    if x == 0 {
        0.0
    } else {
        let x = x as f64;
        x * x.ln()
    }
}

/// H(rows) and H(rows | cols) in nats.
///
/// With integer counts, H(R) = ln n - (1/n) sum r ln r and
/// H(R|C) = (1/n) sum_c (n_c ln n_c - sum_r n_rc ln n_rc), so the only
/// division by n happens once at the end.
fn entropies(table: &ContingencyTable) -> (f64, f64) {
    let n = table.n;
    let sum_rows: f64 = table.row_sums().into_iter().map(xlogx).sum();
    // per column, so a pure column contributes exactly zero
    let cols = table.counts.first().map_or(0, Vec::len);
    let cond: f64 = (0..cols)
        .map(|b| {
            let col_total: u64 = table.counts.iter().map(|r| r[b]).sum();
            let cells: f64 = table.counts.iter().map(|r| xlogx(r[b])).sum();
            xlogx(col_total) - cells
        })
        .sum();
    let nf = n as f64;
    let h_rows = ((xlogx(n) - sum_rows) / nf).max(0.0);
    let h_rows_given_cols = (cond / nf).max(0.0);
    (h_rows, h_rows_given_cols)
}

fn one_minus_ratio(h: f64, h_cond: f64, single_class: bool) -> f64 {
    if single_class || h == 0.0 {
        1.0
    } else {
        (1.0 - h_cond / h).clamp(0.0, 1.0)
    }
}

pub fn score_table(table: &ContingencyTable) -> MetricScore {
    let (h_gold, h_gold_given_pred) = entropies(table);
    let (h_pred, h_pred_given_gold) = entropies(&table.transpose());
    let h = one_minus_ratio(h_gold, h_gold_given_pred, table.counts.len() <= 1);
    let c = one_minus_ratio(
        h_pred,
        h_pred_given_gold,
        table.counts.first().map_or(0, Vec::len) <= 1,
    );
    MetricScore::from_hc(h, c)
}

pub fn v_measure(pred: &Partition, gold: &Partition) -> Result<MetricScore> {
    Ok(score_table(&contingency(pred, gold)?))
}

pub fn homogeneity(pred: &Partition, gold: &Partition) -> Result<f64> {
    Ok(v_measure(pred, gold)?.h)
}

pub fn completeness(pred: &Partition, gold: &Partition) -> Result<f64> {
    Ok(v_measure(pred, gold)?.c)
}

/// One scored response as it appears in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub example_id: String,
    pub dataset: Dataset,
    pub split: Split,
    pub verdict: FormatVerdict,
    /// All zero when the response did not parse.
    pub score: MetricScore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub dataset: Dataset,
    pub split: Split,
    pub n: usize,
    pub mean_v: f64,
    pub format_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub records: Vec<ReportRecord>,
    pub cells: Vec<CellStat>,
    /// Per split: mean over datasets of the per-dataset means.
    pub split_avg: BTreeMap<Split, f64>,
    /// Mean V over every individual record.
    pub overall_v: f64,
    pub format_accuracy: f64,
}

pub fn aggregate(model: &str, records: Vec<ReportRecord>) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Empty("no records to aggregate"));
    }
    let mut groups: BTreeMap<(Dataset, Split), (usize, f64, usize)> = BTreeMap::new();
    for r in &records {
        let g = groups.entry((r.dataset, r.split)).or_default();
        g.0 += 1;
        g.1 += r.score.v;
        g.2 += usize::from(r.verdict.valid);
    }
    let cells: Vec<CellStat> = groups
        .iter()
        .map(|(&(dataset, split), &(n, sum_v, ok))| CellStat {
            dataset,
            split,
            n,
            mean_v: sum_v / n as f64,
            format_accuracy: ok as f64 / n as f64,
        })
        .collect();

    let mut by_split: BTreeMap<Split, Vec<f64>> = BTreeMap::new();
    for cell in &cells {
        by_split.entry(cell.split).or_default().push(cell.mean_v);
    }
    let split_avg = by_split
        .into_iter()
        .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
        .collect();

    let n = records.len() as f64;
    let overall_v = records.iter().map(|r| r.score.v).sum::<f64>() / n;
    let format_accuracy = records.iter().filter(|r| r.verdict.valid).count() as f64 / n;
    Ok(Report {
        model: model.to_string(),
        records,
        cells,
        split_avg,
        overall_v,
        format_accuracy,
    })
}

impl Report {
    pub fn cell(&self, dataset: Dataset, split: Split) -> Option<&CellStat> {
        self.cells
            .iter()
            .find(|c| c.dataset == dataset && c.split == split)
    }

    /// Counts of each format error code across all records.
    pub fn error_histogram(&self) -> BTreeMap<crate::parser::FormatErrorCode, usize> {
        let mut hist = BTreeMap::new();
        for r in &self.records {
            for e in &r.verdict.errors {
                *hist.entry(e.code).or_insert(0) += 1;
            }
        }
        hist
    }
}

/// Plain-text table with one row per report: datasets x {C0, C1, C2}, then
/// AVG x {C0, C1, C2}, OVERALL and format accuracy. Values are percentages.
pub fn render_table(reports: &[Report]) -> String {
    let datasets: Vec<Dataset> = Dataset::ALL
        .into_iter()
        .filter(|d| reports.iter().any(|r| r.cells.iter().any(|c| c.dataset == *d)))
        .collect();
    let model_w = reports
        .iter()
        .map(|r| r.model.chars().count())
        .max()
        .unwrap_or(0)
        .max(5);
    const W: usize = 7;

    let mut header1 = format!("{:<model_w$}", "Model");
    let mut header2 = format!("{:<model_w$}", "");
    for group in datasets.iter().map(|d| d.as_str()).chain(["AVG"]) {
        header1.push_str(&format!(" | {:^w$}", group, w = W * 3 + 2));
        header2.push_str(" | ");
        header2.push_str(
            &Split::EVAL
                .iter()
                .map(|s| format!("{:>W$}", s.as_str()))
                .collect::<Vec<_>>()
                .join(" "),
        );
    }
    header1.push_str(&format!(" | {:>W$} | {:>W$}", "OVERALL", "FORMAT"));
    header2.push_str(&format!(" | {:>W$} | {:>W$}", "V", "ACC"));

    let mut out = String::new();
    out.push_str(header1.trim_end());
    out.push('\n');
    out.push_str(header2.trim_end());
    out.push('\n');
    out.push_str(&"-".repeat(header1.trim_end().len()));
    out.push('\n');

    let pct = |v: Option<f64>| match v {
        Some(v) => format!("{:>W$.2}", 100.0 * v),
        None => format!("{:>W$}", "-"),
    };
    for report in reports {
        let mut row = format!("{:<model_w$}", report.model);
        for d in &datasets {
            row.push_str(" | ");
            let vals: Vec<String> = Split::EVAL
                .iter()
                .map(|s| pct(report.cell(*d, *s).map(|c| c.mean_v)))
                .collect();
            row.push_str(&vals.join(" "));
        }
        row.push_str(" | ");
        let vals: Vec<String> = Split::EVAL
            .iter()
            .map(|s| pct(report.split_avg.get(s).copied()))
            .collect();
        row.push_str(&vals.join(" "));
        row.push_str(&format!(
            " | {} | {}",
            pct(Some(report.overall_v)),
            pct(Some(report.format_accuracy))
        ));
        out.push_str(&row);
        out.push('\n');
    }
    out
}
