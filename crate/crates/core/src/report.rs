//! Table rendering for fairness reports, with bias banding.
//!
//! Difference cells fall into five bands at `0.1 / 0.2 / 0.3 / 0.45`; ratio
//! cells at `0.9 / 0.8 / 0.7 / 0.55`. Only the `0.1` and `0.9` edges carry
//! meaning as "bias present"; the inner edges just grade it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{FairnessReport, Metric};
use crate::train::Strategy;

pub const BAND_NAMES: [&str; 5] = ["green", "yellow-green", "yellow", "orange", "orange-red"];
const DIFFERENCE_EDGES: [f64; 4] = [0.1, 0.2, 0.3, 0.45];
const RATIO_EDGES: [f64; 4] = [0.9, 0.8, 0.7, 0.55];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            other => Err(Error::config(format!("unknown format '{other}' (csv|md)"))),
        }
    }
}

/// Band `1..=5` of a difference value; 1 is no bias.
pub fn difference_band(v: f64) -> u8 {
    1 + DIFFERENCE_EDGES.iter().filter(|&&e| v >= e).count() as u8
}

/// Band `1..=5` of a ratio value; 1 is no bias.
pub fn ratio_band(v: f64) -> u8 {
    1 + RATIO_EDGES.iter().filter(|&&e| v <= e).count() as u8
}

/// One table cell kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cell {
    Value(Metric),
    Difference(Metric),
    Ratio(Metric),
}

impl Cell {
    /// Key used in CSV output.
    pub fn key(self) -> String {
        match self {
            Cell::Value(m) => m.name().to_string(),
            Cell::Difference(m) => format!("diff_{}", m.name()),
            Cell::Ratio(m) => format!("ratio_{}", m.name()),
        }
    }

    pub fn extract(self, r: &FairnessReport) -> Option<f64> {
        match self {
            Cell::Value(m) => r.overall.get(m),
            Cell::Difference(m) => r.difference(m),
            Cell::Ratio(m) => r.ratio(m),
        }
    }

    pub fn band(self, v: f64) -> Option<u8> {
        match self {
            Cell::Value(_) => None,
            Cell::Difference(_) => Some(difference_band(v)),
            Cell::Ratio(_) => Some(ratio_band(v)),
        }
    }

    fn header(self) -> String {
        let arrow = |m: Metric, up: bool| format!("{} {}", m.name(), if up { "↑" } else { "↓" });
        match self {
            Cell::Value(m) => arrow(m, m != Metric::Fpr),
            Cell::Difference(Metric::Dp) => "DP ↓".into(),
            Cell::Difference(m) => format!("Δ{}", arrow(m, false)),
            Cell::Ratio(m) => format!("{} ratio ↑", m.name()),
        }
    }
}

const UTILITY: [Metric; 6] = [
    Metric::Acc,
    Metric::Ba,
    Metric::Ppv,
    Metric::Tpr,
    Metric::Fpr,
    Metric::F1,
];

/// The four tables: utility, differences, ratios, threshold-free AUC block.
pub fn tables() -> [(&'static str, Vec<Cell>); 4] {
    [
        ("Utility", UTILITY.iter().map(|&m| Cell::Value(m)).collect()),
        (
            "Fairness differences",
            Metric::THRESHOLDED.iter().map(|&m| Cell::Difference(m)).collect(),
        ),
        (
            "Fairness ratios",
            Metric::THRESHOLDED.iter().map(|&m| Cell::Ratio(m)).collect(),
        ),
        (
            "Threshold-independent",
            vec![
                Cell::Value(Metric::RocAuc),
                Cell::Value(Metric::PrAuc),
                Cell::Difference(Metric::RocAuc),
                Cell::Difference(Metric::PrAuc),
                Cell::Ratio(Metric::RocAuc),
                Cell::Ratio(Metric::PrAuc),
            ],
        ),
    ]
}

fn all_cells() -> Vec<Cell> {
    tables().into_iter().flat_map(|(_, c)| c).collect()
}

pub fn legend() -> String {
    let mut s = String::from("Bands (1 = no bias): ");
    let parts: Vec<String> = (0..5)
        .map(|i| {
            let d = match i {
                0 => format!("<{}", DIFFERENCE_EDGES[0]),
                4 => format!("≥{}", DIFFERENCE_EDGES[3]),
                _ => format!("[{}, {})", DIFFERENCE_EDGES[i - 1], DIFFERENCE_EDGES[i]),
            };
            let r = match i {
                0 => format!(">{}", RATIO_EDGES[0]),
                4 => format!("≤{}", RATIO_EDGES[3]),
                _ => format!("({}, {}]", RATIO_EDGES[i], RATIO_EDGES[i - 1]),
            };
            format!("{} {} (difference {d}, ratio {r})", i + 1, BAND_NAMES[i])
        })
        .collect();
    s.push_str(&parts.join("; "));
    s.push_str(". Only the 0.1 / 0.9 edges mark bias; inner edges grade it.");
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

/// One model's report as a table (markdown) or `metric,value,band` rows (CSV).
pub fn render_report(report: &FairnessReport, format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("metric,value,band\n");
            for cell in all_cells() {
                let v = cell.extract(report);
                let band = v.and_then(|v| cell.band(v)).map_or(String::new(), |b| b.to_string());
                let value = v.map_or(String::new(), |v| format!("{v}"));
                let _ = writeln!(out, "{},{value},{band}", cell.key());
            }
        }
        Format::Markdown => {
            let _ = writeln!(out, "n = {}, threshold = {:.2}\n", report.n, report.threshold);
            for (title, cells) in tables() {
                let _ = writeln!(out, "### {title}\n");
                let _ = writeln!(
                    out,
                    "| {} |",
                    cells.iter().map(|c| c.header()).collect::<Vec<_>>().join(" | ")
                );
                let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
                let row: Vec<String> = cells
                    .iter()
                    .map(|&c| {
                        let v = c.extract(report);
                        match v.and_then(|x| c.band(x)) {
                            Some(b) => format!("{} [{b}]", fmt_opt(v)),
                            None => fmt_opt(v),
                        }
                    })
                    .collect();
                let _ = writeln!(out, "| {} |\n", row.join(" | "));
            }
            for f in &report.flags {
                let _ = writeln!(out, "- {f}");
            }
            if !report.flags.is_empty() {
                out.push('\n');
            }
            out.push_str(&legend());
            out.push('\n');
        }
    }
    out
}

/// One (strategy, seed) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub report: FairnessReport,
}

/// Mean and sample standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

/// `strategy → cell → stat` across seeds.
pub fn summarize(results: &[RunResult]) -> BTreeMap<Strategy, BTreeMap<Cell, Option<Stat>>> {
    let mut out = BTreeMap::new();
    let mut strategies: Vec<Strategy> = results.iter().map(|r| r.strategy).collect();
    strategies.sort();
    strategies.dedup();
    for s in strategies {
        let mut cells = BTreeMap::new();
        for cell in all_cells() {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.strategy == s)
                .filter_map(|r| cell.extract(&r.report))
                .collect();
            cells.insert(cell, Stat::of(&vals));
        }
        out.insert(s, cells);
    }
    out
}

/// Per-seed rows `strategy,seed,metric,value`.
pub fn results_csv(results: &[RunResult]) -> String {
    let mut out = String::from("strategy,seed,metric,value\n");
    for r in results {
        for cell in all_cells() {
            if let Some(v) = cell.extract(&r.report) {
                let _ = writeln!(out, "{},{},{},{v}", r.strategy.name(), r.seed, cell.key());
            }
        }
    }
    out
}

/// Mean ± std across seeds, as markdown tables or `strategy,metric,mean,std,band` rows.
pub fn render_summary(results: &[RunResult], format: Format) -> String {
    let summary = summarize(results);
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("strategy,metric,mean,std,seeds,band\n");
            for (s, cells) in &summary {
                for cell in all_cells() {
                    if let Some(Some(st)) = cells.get(&cell) {
                        let band = cell.band(st.mean).map_or(String::new(), |b| b.to_string());
                        let _ = writeln!(
                            out,
                            "{},{},{:.3},{:.3},{},{band}",
                            s.name(),
                            cell.key(),
                            st.mean,
                            st.std,
                            st.count
                        );
                    }
                }
            }
        }
        Format::Markdown => {
            for (title, cells) in tables() {
                let _ = writeln!(out, "### {title}\n");
                let _ = writeln!(
                    out,
                    "| Strategy | {} |",
                    cells.iter().map(|c| c.header()).collect::<Vec<_>>().join(" | ")
                );
                let _ = writeln!(out, "|---|{}", "---|".repeat(cells.len()));
                for (s, stats) in &summary {
                    let row: Vec<String> = cells
                        .iter()
                        .map(|c| match stats.get(c).copied().flatten() {
                            None => "n/a".into(),
                            Some(st) => {
                                let base = format!("{:.3} ± {:.3}", st.mean, st.std);
                                match c.band(st.mean) {
                                    Some(b) => format!("{base} [{b}]"),
                                    None => base,
                                }
                            }
                        })
                        .collect();
                    let _ = writeln!(out, "| {} | {} |", s.display(), row.join(" | "));
                }
                out.push('\n');
            }
            out.push_str(&legend());
            out.push('\n');
        }
    }
    out
}
