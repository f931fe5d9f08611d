use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    auc_roc, best_worst_gap, bootstrap_ci, confusion_by_segment, format_auc_ci, group_confusions, ratio_metric,
    MetricKind, PrivilegeRule, PrivilegeSpec, RatioMetricResult, SegmentConfusion,
};
use crate::dataset::AttributeTable;
use crate::error::{Error, Result};
use crate::finetune::DECISION_THRESHOLD;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub n_boot: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub dataset: String,
    pub model_id: String,
    pub strategy: String,
    pub origin: String,
    pub seed: u64,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucEntry {
    pub n: usize,
    pub auc: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// `0.829 (0.81-0.85)` style rendering.
    pub formatted: Option<String>,
    pub delta_vs_general: Option<f64>,
    pub undefined_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub size: usize,
    pub confusion: SegmentConfusion,
    pub auc: AucEntry,
}

/// Min, mean and max of the defined parity deviations in a collection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviationBand {
    pub min: Option<f64>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl DeviationBand {
    pub fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => undefined += 1,
            }
        }
        if defined.is_empty() {
            return Self {
                undefined,
                ..Self::default()
            };
        }
        Self {
            min: Some(defined.iter().copied().fold(f64::INFINITY, f64::min)),
            mean: Some(defined.iter().sum::<f64>() / defined.len() as f64),
            max: Some(defined.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            defined: defined.len(),
            undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub privileged: String,
    pub unprivileged: String,
    pub privilege_rule: PrivilegeRule,
    pub metrics: BTreeMap<MetricKind, RatioMetricResult>,
    pub segments: BTreeMap<String, SegmentReport>,
    pub best_worst_gap: Option<f64>,
    pub deviation: DeviationBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub metadata: RunMetadata,
    pub config_hash: Option<String>,
    pub decision_threshold: f64,
    pub general: AucEntry,
    pub attributes: BTreeMap<String, AttributeReport>,
    /// Band over every metric of every attribute.
    pub deviation: DeviationBand,
}

fn auc_entry(scores: &[f64], labels: &[usize], cfg: &EvaluationConfig, tag: &str) -> Result<AucEntry> {
    let mut entry = AucEntry {
        n: scores.len(),
        auc: None,
        ci_low: None,
        ci_high: None,
        formatted: None,
        delta_vs_general: None,
        undefined_reason: None,
    };
    match auc_roc(scores, labels) {
        Ok(a) => entry.auc = Some(a),
        Err(e @ Error::UndefinedAuc(_)) => {
            entry.undefined_reason = Some(e.to_string());
            return Ok(entry);
        }
        Err(e) => return Err(e),
    }
    match bootstrap_ci(scores, labels, cfg.n_boot, cfg.alpha, derive_seed(cfg.seed, tag)) {
        Ok((lo, hi)) => {
            entry.ci_low = Some(lo);
            entry.ci_high = Some(hi);
            entry.formatted = entry.auc.map(|a| format_auc_ci(a, lo, hi));
        }
        Err(e @ Error::UndefinedCi(_)) => entry.undefined_reason = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(entry)
}

/// Full fairness suite for one model's class-1 scores on an evaluation set.
///
/// `attributes` empty means every attribute of the table.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_fairness(
    scores: &[f64],
    labels: &[usize],
    sample_ids: &[String],
    attrs: &AttributeTable,
    attributes: &[String],
    privilege: &PrivilegeSpec,
    config: &EvaluationConfig,
    metadata: RunMetadata,
) -> Result<FairnessReport> {
    let predictions = crate::finetune::predict_labels(scores);
    let general = auc_entry(scores, labels, config, "ci-general")?;
    let attributes: Vec<String> = if attributes.is_empty() {
        attrs.attributes().to_vec()
    } else {
        attributes.to_vec()
    };
    let mut out = BTreeMap::new();
    for attribute in &attributes {
        let groups = privilege.resolve(attrs, attribute)?;
        let (u, p) = group_confusions(&predictions, labels, sample_ids, attrs, attribute, &groups)?;
        let metrics: BTreeMap<MetricKind, RatioMetricResult> = MetricKind::ALL
            .iter()
            .map(|&k| (k, ratio_metric(&u, &p, k, &groups.unprivileged, &groups.privileged)))
            .collect();
        let confusions = confusion_by_segment(&predictions, labels, sample_ids, attrs, attribute)?;
        let mut segments = BTreeMap::new();
        for (value, rows) in attrs.segments(sample_ids, attribute)? {
            let s: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let mut auc = auc_entry(&s, &y, config, &format!("ci-{attribute}-{value}"))?;
            auc.delta_vs_general = auc.auc.zip(general.auc).map(|(a, g)| a - g);
            segments.insert(
                value.clone(),
                SegmentReport {
                    size: rows.len(),
                    confusion: confusions[&value],
                    auc,
                },
            );
        }
        let per_segment: BTreeMap<String, Option<f64>> =
            segments.iter().map(|(k, v)| (k.clone(), v.auc.auc)).collect();
        out.insert(
            attribute.clone(),
            AttributeReport {
                privileged: groups.privileged.clone(),
                unprivileged: groups.unprivileged.clone(),
                privilege_rule: privilege.rule(attribute),
                deviation: DeviationBand::from_values(metrics.values().map(|m| m.parity_deviation)),
                metrics,
                segments,
                best_worst_gap: best_worst_gap(&per_segment),
            },
        );
    }
    let deviation = DeviationBand::from_values(
        out.values()
            .flat_map(|a: &AttributeReport| a.metrics.values().map(|m| m.parity_deviation)),
    );
    Ok(FairnessReport {
        metadata,
        config_hash: None,
        decision_threshold: DECISION_THRESHOLD,
        general,
        attributes: out,
        deviation,
    })
}

impl FairnessReport {
    /// Pretty JSON with object keys in sorted order.
    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Flattened `attribute,metric,privileged,unprivileged,value,parity_deviation,fair` rows.
    pub fn metric_csv(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.config_hash {
            out.push_str(&format!("# config_hash={h}\n"));
        }
        out.push_str("attribute,metric,privileged,unprivileged,value,parity_deviation,fair\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into());
        for (attr, rep) in &self.attributes {
            for m in rep.metrics.values() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    attr,
                    m.kind.as_str(),
                    m.privileged,
                    m.unprivileged,
                    opt(m.value),
                    opt(m.parity_deviation),
                    m.fair.map(|f| f.to_string()).unwrap_or_else(|| "undefined".into())
                ));
            }
        }
        out
    }

    /// Mean parity deviation over every defined metric of every attribute.
    pub fn mean_parity_deviation(&self) -> Option<f64> {
        self.deviation.mean
    }
}
