//! Utility and group-fairness metrics for binary classifiers with a binary
//! sensitive attribute.
//!
//! Conventions for degenerate denominators:
//! * PPV with no predicted positives is `0` and flagged.
//! * TPR with no actual positives, FPR with no actual negatives (and BA, which
//!   needs both) are undefined; undefined values are left out of differences
//!   and ratios.
//! * A ratio of two zeros is `1`; a ratio with exactly one zero is `0`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores, true labels and group membership for one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    scores: Vec<f64>,
    labels: Vec<usize>,
    groups: Vec<usize>,
}

impl EvalFrame {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>, groups: Vec<usize>) -> Result<Self> {
        if scores.len() != labels.len() || labels.len() != groups.len() {
            return Err(Error::shape(format!(
                "frame columns differ in length: {} scores, {} labels, {} groups",
                scores.len(),
                labels.len(),
                groups.len()
            )));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::domain("scores must lie in [0, 1]"));
        }
        if labels.iter().chain(&groups).any(|&v| v > 1) {
            return Err(Error::domain("labels and groups must be 0 or 1"));
        }
        Ok(Self { scores, labels, groups })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Rows belonging to group `g`.
    pub fn group(&self, g: usize) -> (Vec<f64>, Vec<usize>) {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for i in 0..self.len() {
            if self.groups[i] == g {
                s.push(self.scores[i]);
                l.push(self.labels[i]);
            }
        }
        (s, l)
    }

    fn require_both_groups(&self) -> Result<()> {
        for g in 0..2 {
            if !self.groups.contains(&g) {
                return Err(Error::domain(format!("group {g} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, pred: bool, label: usize) {
        match (pred, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub overall: Counts,
    pub groups: [Counts; 2],
}

/// `ŷ = 1` iff `score ≥ threshold`, tallied overall and per group.
pub fn confusion(frame: &EvalFrame, threshold: f64) -> Result<Confusion> {
    if frame.is_empty() {
        return Err(Error::domain("empty evaluation frame"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::domain(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut c = Confusion {
        overall: Counts::default(),
        groups: [Counts::default(); 2],
    };
    for i in 0..frame.len() {
        let pred = frame.scores[i] >= threshold;
        c.overall.add(pred, frame.labels[i]);
        c.groups[frame.groups[i]].add(pred, frame.labels[i]);
    }
    Ok(c)
}

/// Threshold-dependent utility metrics. `None` marks an undefined value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub acc: Option<f64>,
    pub ba: Option<f64>,
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub f1: Option<f64>,
    /// `P(ŷ = 1)`, the quantity behind demographic parity.
    pub positive_rate: Option<f64>,
    /// PPV was forced to 0 because nothing was predicted positive.
    pub ppv_flagged: bool,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn utility_metrics(c: &Counts) -> Utility {
    let n = c.total();
    let tpr = ratio(c.tp, c.tp + c.fn_);
    let fpr = ratio(c.fp, c.fp + c.tn);
    let (ppv, ppv_flagged) = match ratio(c.tp, c.tp + c.fp) {
        Some(v) => (Some(v), false),
        None => (Some(0.0), true),
    };
    let ba = match (tpr, fpr) {
        (Some(t), Some(f)) => Some((t + (1.0 - f)) / 2.0),
        _ => None,
    };
    let f1 = match ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_) {
        Some(v) => Some(v),
        None if n > 0 => Some(0.0),
        None => None,
    };
    Utility {
        acc: ratio(c.tp + c.tn, n),
        ba,
        ppv,
        tpr,
        fpr,
        f1,
        positive_rate: ratio(c.tp + c.fp, n),
        ppv_flagged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "ACC")]
    Acc,
    #[serde(rename = "BA")]
    Ba,
    #[serde(rename = "PPV")]
    Ppv,
    #[serde(rename = "TPR")]
    Tpr,
    #[serde(rename = "FPR")]
    Fpr,
    #[serde(rename = "F1")]
    F1,
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "ROC_AUC")]
    RocAuc,
    #[serde(rename = "PR_AUC")]
    PrAuc,
}

impl Metric {
    pub const THRESHOLDED: [Metric; 7] = [
        Metric::Acc,
        Metric::Ba,
        Metric::Ppv,
        Metric::Tpr,
        Metric::Fpr,
        Metric::F1,
        Metric::Dp,
    ];
    pub const ALL: [Metric; 9] = [
        Metric::Acc,
        Metric::Ba,
        Metric::Ppv,
        Metric::Tpr,
        Metric::Fpr,
        Metric::F1,
        Metric::Dp,
        Metric::RocAuc,
        Metric::PrAuc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "ACC",
            Metric::Ba => "BA",
            Metric::Ppv => "PPV",
            Metric::Tpr => "TPR",
            Metric::Fpr => "FPR",
            Metric::F1 => "F1",
            Metric::Dp => "DP",
            Metric::RocAuc => "ROC_AUC",
            Metric::PrAuc => "PR_AUC",
        }
    }

    fn in_utility(self, u: &Utility) -> Option<f64> {
        match self {
            Metric::Acc => u.acc,
            Metric::Ba => u.ba,
            Metric::Ppv => u.ppv,
            Metric::Tpr => u.tpr,
            Metric::Fpr => u.fpr,
            Metric::F1 => u.f1,
            Metric::Dp => u.positive_rate,
            Metric::RocAuc | Metric::PrAuc => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `|m_0 − m_1|`, `None` if either side is undefined.
pub fn difference(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? - b?).abs())
}

/// `min(m_0 / m_1, m_1 / m_0)` with the zero conventions above.
pub fn min_ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    let (a, b) = (a?, b?);
    Some(if a == 0.0 && b == 0.0 {
        1.0
    } else if a == 0.0 || b == 0.0 {
        0.0
    } else {
        (a / b).min(b / a)
    })
}

fn group_metric(frame: &EvalFrame, threshold: f64, metric: Metric) -> Result<[Option<f64>; 2]> {
    frame.require_both_groups()?;
    match metric {
        Metric::RocAuc | Metric::PrAuc => {
            let f = if metric == Metric::RocAuc { roc_auc } else { pr_auc };
            let per = |g: usize| {
                let (s, l) = frame.group(g);
                f(&s, &l).ok()
            };
            Ok([per(0), per(1)])
        }
        _ => {
            let c = confusion(frame, threshold)?;
            Ok([
                metric.in_utility(&utility_metrics(&c.groups[0])),
                metric.in_utility(&utility_metrics(&c.groups[1])),
            ])
        }
    }
}

/// Group difference of one metric. `Ok(None)` when the metric is undefined
/// for a group (e.g. TPR in a group with no positives).
pub fn fairness_difference(frame: &EvalFrame, threshold: f64, metric: Metric) -> Result<Option<f64>> {
    let [a, b] = group_metric(frame, threshold, metric)?;
    Ok(difference(a, b))
}

/// Group min-ratio of one metric.
pub fn fairness_ratio(frame: &EvalFrame, threshold: f64, metric: Metric) -> Result<Option<f64>> {
    let [a, b] = group_metric(frame, threshold, metric)?;
    Ok(min_ratio(a, b))
}

fn check_binary_labels(labels: &[usize], n: usize) -> Result<(usize, usize)> {
    if labels.len() != n {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != n {
        return Err(Error::domain("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::domain("AUC needs both label values"));
    }
    Ok((pos, neg))
}

/// ROC-AUC as the Mann-Whitney statistic with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = check_binary_labels(labels, scores.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over descending distinct
/// score thresholds.
pub fn pr_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, _) = check_binary_labels(labels, scores.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Overall or per-group metric values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub utility: Utility,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

impl MetricSet {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::RocAuc => self.roc_auc,
            Metric::PrAuc => self.pr_auc,
            _ => m.in_utility(&self.utility),
        }
    }

    fn compute(scores: &[f64], labels: &[usize], counts: &Counts) -> Self {
        Self {
            utility: utility_metrics(counts),
            roc_auc: roc_auc(scores, labels).ok(),
            pr_auc: pr_auc(scores, labels).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub threshold: f64,
    pub n: usize,
    pub overall: MetricSet,
    pub groups: [MetricSet; 2],
    pub differences: BTreeMap<Metric, Option<f64>>,
    pub ratios: BTreeMap<Metric, Option<f64>>,
    /// Human-readable notes about degenerate denominators.
    pub flags: Vec<String>,
}

impl FairnessReport {
    pub fn compute(frame: &EvalFrame, threshold: f64) -> Result<Self> {
        frame.require_both_groups()?;
        let c = confusion(frame, threshold)?;
        let overall = MetricSet::compute(&frame.scores, &frame.labels, &c.overall);
        let groups = [0, 1].map(|g| {
            let (s, l) = frame.group(g);
            MetricSet::compute(&s, &l, &c.groups[g])
        });
        let mut differences = BTreeMap::new();
        let mut ratios = BTreeMap::new();
        for m in Metric::ALL {
            let (a, b) = (groups[0].get(m), groups[1].get(m));
            differences.insert(m, difference(a, b));
            ratios.insert(m, min_ratio(a, b));
        }
        let mut flags = Vec::new();
        for (name, set) in [("overall", &overall), ("group 0", &groups[0]), ("group 1", &groups[1])] {
            if set.utility.ppv_flagged {
                flags.push(format!("{name}: no predicted positives, PPV set to 0"));
            }
            if set.utility.tpr.is_none() {
                flags.push(format!("{name}: no actual positives, TPR undefined"));
            }
            if set.utility.fpr.is_none() {
                flags.push(format!("{name}: no actual negatives, FPR undefined"));
            }
        }
        Ok(Self {
            threshold,
            n: frame.len(),
            overall,
            groups,
            differences,
            ratios,
            flags,
        })
    }

    pub fn difference(&self, m: Metric) -> Option<f64> {
        self.differences.get(&m).copied().flatten()
    }

    pub fn ratio(&self, m: Metric) -> Option<f64> {
        self.ratios.get(&m).copied().flatten()
    }
}
