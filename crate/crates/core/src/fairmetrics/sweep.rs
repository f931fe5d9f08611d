use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attribute_metrics, auc_roc, DeviationBand, PrivilegeSpec};
use crate::dataset::{AttributeTable, Dataset};
use crate::error::{Error, Result};
use crate::finetune::{finetune, predict_labels, train_supervised_baseline, FinetuneConfig};
use crate::model::{FreezeMask, ModelParams};
use crate::rng::{derive_seed_n, seeded};

pub const DEFAULT_SAMPLES_PER_SEGMENT: [usize; 5] = [10, 20, 40, 80, 150];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Attribute whose segments are subsampled.
    pub attribute: String,
    pub samples_per_segment: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Mask used to fine-tune the pretrained encoder.
    pub ssl_mask: FreezeMask,
    pub finetune: FinetuneConfig,
    /// Attributes evaluated on the test split; empty means all.
    pub audit_attributes: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            attribute: String::new(),
            samples_per_segment: DEFAULT_SAMPLES_PER_SEGMENT.to_vec(),
            seeds: vec![0],
            ssl_mask: FreezeMask::new(vec![true, false, true]),
            finetune: FinetuneConfig::default(),
            audit_attributes: Vec::new(),
        }
    }
}

/// Exactly `count` samples of every segment of `attribute`, drawn without
/// replacement and kept in their original order.
pub fn subsample_per_segment(
    data: &Dataset,
    attrs: &AttributeTable,
    attribute: &str,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    let segments = attrs.segments(&data.sample_ids, attribute)?;
    let mut rng = seeded(seed);
    let mut keep = Vec::with_capacity(count * segments.len());
    for (value, rows) in &segments {
        if rows.len() < count {
            return Err(Error::InsufficientSegment {
                attribute: attribute.to_string(),
                value: value.clone(),
                size: rows.len(),
                required: count,
            });
        }
        keep.extend(sample(&mut rng, rows.len(), count).into_iter().map(|k| rows[k]));
    }
    keep.sort_unstable();
    data.subset(&keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub samples_per_segment: usize,
    pub model: String,
    pub seed: u64,
    pub auc: Option<f64>,
    pub deviation: DeviationBand,
}

/// Fine-tunes the pretrained encoder and trains the supervised baseline on
/// `c` samples per segment for every count and seed, then evaluates the
/// ratio metrics on the untouched test split.
pub fn data_efficiency_sweep(
    encoder: &ModelParams,
    train: &Dataset,
    test: &Dataset,
    attrs: &AttributeTable,
    privilege: &PrivilegeSpec,
    config: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    if config.samples_per_segment.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config("sweep needs sample counts and seeds".into()));
    }
    let largest = *config.samples_per_segment.iter().max().expect("non-empty");
    for (value, rows) in attrs.segments(&train.sample_ids, &config.attribute)? {
        if rows.len() < largest {
            return Err(Error::InsufficientSegment {
                attribute: config.attribute.clone(),
                value,
                size: rows.len(),
                required: largest,
            });
        }
    }
    let audit: Vec<String> = if config.audit_attributes.is_empty() {
        attrs.attributes().to_vec()
    } else {
        config.audit_attributes.clone()
    };
    let cells: Vec<(u64, usize, bool)> = config
        .seeds
        .iter()
        .flat_map(|&s| {
            config
                .samples_per_segment
                .iter()
                .flat_map(move |&c| [(s, c, true), (s, c, false)])
        })
        .collect();
    cells
        .par_iter()
        .map(|&(seed, count, ssl)| {
            let subset = subsample_per_segment(
                train,
                attrs,
                &config.attribute,
                count,
                derive_seed_n(seed, "sweep-subsample", count as u64),
            )?;
            let cfg = FinetuneConfig {
                seed: derive_seed_n(seed, "sweep-train", count as u64),
                ..config.finetune.clone()
            };
            let model = if ssl {
                finetune(encoder, &config.ssl_mask, &subset, None, &cfg)?.0
            } else {
                train_supervised_baseline(&subset, None, encoder.config(), &cfg)?.0
            };
            let scores = model.predict_proba(&test.samples)?;
            let preds = predict_labels(&scores);
            let mut devs = Vec::new();
            for a in &audit {
                let metrics = attribute_metrics(&preds, &test.labels, &test.sample_ids, attrs, a, privilege)?;
                devs.extend(metrics.into_iter().map(|m| m.parity_deviation));
            }
            Ok(SweepRow {
                samples_per_segment: count,
                model: if ssl { "ssl" } else { "supervised" }.to_string(),
                seed,
                auc: auc_roc(&scores, &test.labels).ok(),
                deviation: DeviationBand::from_values(devs),
            })
        })
        .collect()
}

/// Seed-averaged band per (count, model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBandRow {
    pub samples_per_segment: usize,
    pub model: String,
    pub seeds: usize,
    pub min: Option<f64>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub auc: Option<f64>,
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepBandRow> {
    let mut groups: BTreeMap<(usize, String), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.samples_per_segment, r.model.clone())).or_default().push(r);
    }
    let avg = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    groups
        .into_iter()
        .map(|((count, model), rs)| SweepBandRow {
            samples_per_segment: count,
            model,
            seeds: rs.len(),
            min: avg(rs.iter().filter_map(|r| r.deviation.min).collect()),
            mean: avg(rs.iter().filter_map(|r| r.deviation.mean).collect()),
            max: avg(rs.iter().filter_map(|r| r.deviation.max).collect()),
            auc: avg(rs.iter().filter_map(|r| r.auc).collect()),
        })
        .collect()
}
