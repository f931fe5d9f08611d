use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc("labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

const MAX_REDRAWS: usize = 1000;

/// Percentile bootstrap interval of the AUC over resampled rows. Resamples
/// holding a single class are redrawn.
pub fn bootstrap_ci(scores: &[f64], labels: &[usize], n_boot: usize, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    auc_roc(scores, labels)?;
    if n_boot == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "bootstrap needs n_boot > 0 and alpha in (0, 1), got {n_boot} and {alpha}"
        )));
    }
    let n = scores.len();
    let mut rng = seeded(seed);
    let mut stats = Vec::with_capacity(n_boot);
    let mut s = vec![0.0; n];
    let mut y = vec![0; n];
    for _ in 0..n_boot {
        let mut attempts = 0;
        loop {
            for k in 0..n {
                let i = rng.random_range(0..n);
                s[k] = scores[i];
                y[k] = labels[i];
            }
            let pos = y.iter().filter(|&&l| l == 1).count();
            if pos > 0 && pos < n {
                break;
            }
            attempts += 1;
            if attempts >= MAX_REDRAWS {
                return Err(Error::UndefinedCi(format!(
                    "{MAX_REDRAWS} consecutive resamples held a single class"
                )));
            }
        }
        stats.push(auc_roc(&s, &y)?);
    }
    stats.sort_by(f64::total_cmp);
    Ok((quantile(&stats, alpha / 2.0), quantile(&stats, 1.0 - alpha / 2.0)))
}

/// `0.829 (0.81-0.85)`: point estimate to three decimals, bounds to two
/// with trailing zeros dropped (`(0.8-1.0)`).
pub fn format_auc_ci(point: f64, lo: f64, hi: f64) -> String {
    fn bound(v: f64) -> String {
        let s = format!("{v:.2}");
        let t = s.trim_end_matches('0');
        if t.ends_with('.') {
            format!("{t}0")
        } else {
            t.to_string()
        }
    }
    format!("{point:.3} ({}-{})", bound(lo), bound(hi))
}

/// Difference of every segment AUC from the general-population AUC;
/// undefined segments stay undefined.
pub fn segment_delta(per_segment: &BTreeMap<String, Option<f64>>, general: f64) -> BTreeMap<String, Option<f64>> {
    per_segment
        .iter()
        .map(|(k, v)| (k.clone(), v.map(|a| a - general)))
        .collect()
}

/// Max minus min over defined segment AUCs; needs at least two.
pub fn best_worst_gap(per_segment: &BTreeMap<String, Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = per_segment.values().flatten().copied().collect();
    if defined.len() < 2 {
        return None;
    }
    let max = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = defined.iter().copied().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub segment: String,
    pub relative_size: f64,
    pub delta: f64,
}

/// Segment share of the population against its AUC gap to the general AUC,
/// one row per defined segment.
pub fn size_vs_gap_scatter(
    per_segment: &BTreeMap<String, Option<f64>>,
    sizes: &BTreeMap<String, usize>,
    general: f64,
) -> Vec<ScatterRow> {
    let total: usize = sizes.values().sum();
    per_segment
        .iter()
        .filter_map(|(k, v)| {
            let auc = (*v)?;
            let size = *sizes.get(k)?;
            Some(ScatterRow {
                segment: k.clone(),
                relative_size: size as f64 / total.max(1) as f64,
                delta: auc - general,
            })
        })
        .collect()
}
