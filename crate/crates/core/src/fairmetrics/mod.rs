//! Segment-conditioned fairness evaluation: confusion tables, ratio metrics
//! with parity deviation, AUC-ROC with bootstrap intervals, and the
//! data-efficiency sweep.

mod auc;
mod report;
mod sweep;

pub use auc::{auc_roc, best_worst_gap, bootstrap_ci, format_auc_ci, segment_delta, size_vs_gap_scatter, ScatterRow};
pub use report::{
    evaluate_fairness, AttributeReport, AucEntry, DeviationBand, EvaluationConfig, FairnessReport, RunMetadata,
    SegmentReport,
};
pub use sweep::{
    data_efficiency_sweep, subsample_per_segment, summarize_sweep, SweepBandRow, SweepConfig, SweepRow,
    DEFAULT_SAMPLES_PER_SEGMENT,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::AttributeTable;
use crate::error::{Error, Result};

/// Deviations strictly below this value count as fair.
pub const FAIRNESS_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl SegmentConfusion {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }

    pub fn record(&mut self, prediction: usize, label: usize) {
        match (prediction, label) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MetricKind {
    Dir,
    Fdr,
    Fnr,
    For,
    Fpr,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [Self::Dir, Self::Fdr, Self::Fnr, Self::For, Self::Fpr];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dir => "DIR",
            Self::Fdr => "FDR",
            Self::Fnr => "FNR",
            Self::For => "FOR",
            Self::Fpr => "FPR",
        }
    }

    /// Numerator and denominator of the per-group rate.
    pub fn rate_parts(self, c: &SegmentConfusion) -> (u64, u64) {
        match self {
            Self::Dir => (c.tp + c.fp, c.total()),
            Self::Fdr => (c.fp, c.tp + c.fp),
            Self::Fnr => (c.fn_, c.positives()),
            Self::For => (c.fn_, c.tn + c.fn_),
            Self::Fpr => (c.fp, c.negatives()),
        }
    }

    pub fn rate(self, c: &SegmentConfusion) -> Option<f64> {
        let (num, den) = self.rate_parts(c);
        (den > 0).then(|| num as f64 / den as f64)
    }
}

pub fn parity_deviation(value: f64) -> f64 {
    (1.0 - value).abs()
}

pub fn is_fair(deviation: f64) -> bool {
    deviation < FAIRNESS_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioMetricResult {
    pub kind: MetricKind,
    pub value: Option<f64>,
    pub undefined_reason: Option<String>,
    pub privileged: String,
    pub unprivileged: String,
    pub parity_deviation: Option<f64>,
    pub fair: Option<bool>,
}

/// Rate of the unprivileged group over the rate of the privileged group.
///
/// The ratio is formed from integer cross products so that swapping the two
/// groups yields the exact reciprocal fraction.
pub fn ratio_metric(
    unprivileged: &SegmentConfusion,
    privileged: &SegmentConfusion,
    kind: MetricKind,
    unprivileged_label: &str,
    privileged_label: &str,
) -> RatioMetricResult {
    let (nu, du) = kind.rate_parts(unprivileged);
    let (np, dp) = kind.rate_parts(privileged);
    let reason = if du == 0 {
        Some(format!("{} rate has a zero denominator for the unprivileged group", kind.as_str()))
    } else if dp == 0 {
        Some(format!("{} rate has a zero denominator for the privileged group", kind.as_str()))
    } else if np == 0 {
        Some(format!("{} rate of the privileged group is zero", kind.as_str()))
    } else {
        None
    };
    let value = reason.is_none().then(|| {
        let num = nu as u128 * dp as u128;
        let den = du as u128 * np as u128;
        num as f64 / den as f64
    });
    let deviation = value.map(parity_deviation);
    RatioMetricResult {
        kind,
        value,
        undefined_reason: reason,
        privileged: privileged_label.to_string(),
        unprivileged: unprivileged_label.to_string(),
        parity_deviation: deviation,
        fair: deviation.map(is_fair),
    }
}

/// Confusion counts per value of `attribute`.
pub fn confusion_by_segment(
    predictions: &[usize],
    labels: &[usize],
    sample_ids: &[String],
    attrs: &AttributeTable,
    attribute: &str,
) -> Result<BTreeMap<String, SegmentConfusion>> {
    check_lengths(predictions.len(), labels.len(), sample_ids.len())?;
    let mut out: BTreeMap<String, SegmentConfusion> = BTreeMap::new();
    for ((&p, &y), v) in predictions
        .iter()
        .zip(labels)
        .zip(attrs.column_for(sample_ids, attribute)?)
    {
        out.entry(v.to_string()).or_default().record(p, y);
    }
    Ok(out)
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || b != c {
        return Err(Error::Contract(format!(
            "{a} predictions, {b} labels and {c} sample ids are not aligned"
        )));
    }
    Ok(())
}

/// How the privileged and unprivileged groups of an attribute are formed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum PrivilegeRule {
    /// The most frequent value (ties: lexicographically first) against every
    /// other sample pooled.
    MajorityVsRest,
    /// Two named values; samples with any other value are left out.
    Explicit { privileged: String, unprivileged: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivilegeSpec {
    pub rules: BTreeMap<String, PrivilegeRule>,
}

/// Resolved privileged/unprivileged membership of one attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivilegeGroups {
    pub privileged: String,
    pub unprivileged: String,
    privileged_values: Vec<String>,
    unprivileged_values: Option<Vec<String>>,
}

impl PrivilegeGroups {
    /// `Some(true)` for privileged, `Some(false)` for unprivileged, `None`
    /// for samples outside both groups.
    pub fn side(&self, value: &str) -> Option<bool> {
        if self.privileged_values.iter().any(|v| v == value) {
            Some(true)
        } else {
            match &self.unprivileged_values {
                None => Some(false),
                Some(vals) => vals.iter().any(|v| v == value).then_some(false),
            }
        }
    }
}

impl PrivilegeSpec {
    pub fn rule(&self, attribute: &str) -> PrivilegeRule {
        self.rules
            .get(attribute)
            .cloned()
            .unwrap_or(PrivilegeRule::MajorityVsRest)
    }

    /// Groups for `attribute`; the majority is counted over the whole table.
    pub fn resolve(&self, attrs: &AttributeTable, attribute: &str) -> Result<PrivilegeGroups> {
        let values = attrs.values_of(attribute)?;
        match self.rule(attribute) {
            PrivilegeRule::Explicit {
                privileged,
                unprivileged,
            } => {
                for v in [&privileged, &unprivileged] {
                    if !values.contains(v) {
                        return Err(Error::Config(format!(
                            "attribute {attribute} has no value {v}"
                        )));
                    }
                }
                Ok(PrivilegeGroups {
                    privileged_values: vec![privileged.clone()],
                    unprivileged_values: Some(vec![unprivileged.clone()]),
                    privileged,
                    unprivileged,
                })
            }
            PrivilegeRule::MajorityVsRest => {
                let column = attrs.column_for(attrs.ids(), attribute)?;
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for v in column {
                    *counts.entry(v).or_default() += 1;
                }
                // BTreeMap iterates in sorted order, so the first maximum wins ties.
                let (majority, _) = counts
                    .iter()
                    .fold(None, |best: Option<(&str, usize)>, (&v, &c)| match best {
                        Some((_, bc)) if bc >= c => best,
                        _ => Some((v, c)),
                    })
                    .ok_or_else(|| Error::EmptyInput(format!("attribute {attribute} has no values")))?;
                Ok(PrivilegeGroups {
                    privileged: majority.to_string(),
                    unprivileged: format!("not {majority}"),
                    privileged_values: vec![majority.to_string()],
                    unprivileged_values: None,
                })
            }
        }
    }
}

/// Pooled confusion of the unprivileged and privileged groups.
pub fn group_confusions(
    predictions: &[usize],
    labels: &[usize],
    sample_ids: &[String],
    attrs: &AttributeTable,
    attribute: &str,
    groups: &PrivilegeGroups,
) -> Result<(SegmentConfusion, SegmentConfusion)> {
    check_lengths(predictions.len(), labels.len(), sample_ids.len())?;
    let mut unpriv = SegmentConfusion::default();
    let mut priv_ = SegmentConfusion::default();
    for ((&p, &y), v) in predictions
        .iter()
        .zip(labels)
        .zip(attrs.column_for(sample_ids, attribute)?)
    {
        match groups.side(v) {
            Some(true) => priv_.record(p, y),
            Some(false) => unpriv.record(p, y),
            None => {}
        }
    }
    Ok((unpriv, priv_))
}

/// All five ratio metrics of one attribute.
pub fn attribute_metrics(
    predictions: &[usize],
    labels: &[usize],
    sample_ids: &[String],
    attrs: &AttributeTable,
    attribute: &str,
    privilege: &PrivilegeSpec,
) -> Result<Vec<RatioMetricResult>> {
    let groups = privilege.resolve(attrs, attribute)?;
    let (u, p) = group_confusions(predictions, labels, sample_ids, attrs, attribute, &groups)?;
    Ok(MetricKind::ALL
        .iter()
        .map(|&k| ratio_metric(&u, &p, k, &groups.unprivileged, &groups.privileged))
        .collect())
}
