//! Representation similarity: linear CKA (optionally conditioned on a
//! protected-attribute segment), layerwise CKA matrices, and medoid-based
//! intra/inter segment distances.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{check_unique, AttributeTable};
use crate::error::{Error, Result};
use crate::model::{flatten_block, pool_block};
use crate::tensorcore::gemm::{gemm, View};
use crate::tensorcore::ArrayF;

/// Per-sample activations `[N x D]` with the id of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    values: ArrayF,
    sample_ids: Vec<String>,
}

/// How a `[N x T x C]` block map becomes a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockReduction {
    /// Global max over time, `[N x C]`.
    Pool,
    /// Time and channels concatenated, `[N x (T*C)]`.
    Flatten,
}

impl ActivationMatrix {
    pub fn new(values: ArrayF, sample_ids: Vec<String>) -> Result<Self> {
        let [n, _] = *values.shape() else {
            return Err(Error::Dimension(format!(
                "activations must be [N x D], got {:?}",
                values.shape()
            )));
        };
        if n != sample_ids.len() {
            return Err(Error::Alignment(format!("{n} rows but {} sample ids", sample_ids.len())));
        }
        check_unique(&sample_ids)?;
        Ok(Self { values, sample_ids })
    }

    /// Activations of one encoder block map.
    pub fn from_block(map: &ArrayF, sample_ids: Vec<String>, reduction: BlockReduction) -> Result<Self> {
        let values = match (map.ndim(), reduction) {
            (2, _) => map.clone(),
            (_, BlockReduction::Pool) => pool_block(map)?,
            (_, BlockReduction::Flatten) => flatten_block(map)?,
        };
        Self::new(values, sample_ids)
    }

    pub fn values(&self) -> &ArrayF {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn restrict(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            values: self.values.select_rows(rows)?,
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        })
    }
}

fn centered(m: &ActivationMatrix, center: bool) -> Vec<f64> {
    let (n, d) = (m.rows(), m.cols());
    let mut out = m.values.data().to_vec();
    if center {
        for j in 0..d {
            let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
            for i in 0..n {
                out[i * d + j] -= mean;
            }
        }
    }
    out
}

/// Squared Frobenius norm of `Aᵀ B` for row-major `A [N x p]`, `B [N x q]`.
///
/// Uses the `p x q` cross-covariance when the features are narrower than
/// the sample count, otherwise the equivalent `N x N` Gram inner product.
fn cross_norm_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    if p.max(q) <= n {
        let mut c = vec![0.0; p * q];
        gemm(
            a,
            View::row_major(n, p).transposed(),
            b,
            View::row_major(n, q),
            0.0,
            &mut c,
            View::row_major(p, q),
        );
        c.iter().map(|v| v * v).sum()
    } else {
        let mut ka = vec![0.0; n * n];
        let mut kb = vec![0.0; n * n];
        gemm(a, View::row_major(n, p), a, View::row_major(n, p).transposed(), 0.0, &mut ka, View::row_major(n, n));
        gemm(b, View::row_major(n, q), b, View::row_major(n, q).transposed(), 0.0, &mut kb, View::row_major(n, n));
        ka.iter().zip(&kb).map(|(x, y)| x * y).sum()
    }
}

/// `‖HᵀJ‖²_F / (‖HᵀH‖_F ‖JᵀJ‖_F)`, on column-centered inputs when `center`.
pub fn linear_cka(h: &ActivationMatrix, j: &ActivationMatrix, center: bool) -> Result<f64> {
    if h.sample_ids != j.sample_ids {
        return Err(Error::Alignment(
            "activation matrices do not list the same samples in the same order".into(),
        ));
    }
    let n = h.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!("CKA needs at least 2 samples, got {n}")));
    }
    let (p, q) = (h.cols(), j.cols());
    let hc = centered(h, center);
    let jc = centered(j, center);
    let hh = cross_norm_sq(&hc, p, &hc, p, n).sqrt();
    let jj = cross_norm_sq(&jc, q, &jc, q, n).sqrt();
    if hh == 0.0 || jj == 0.0 {
        return Err(Error::Degenerate("activation matrix has zero variance".into()));
    }
    Ok(cross_norm_sq(&hc, p, &jc, q, n) / (hh * jj))
}

/// Linear CKA on the rows whose attribute `attribute` equals `value`.
pub fn conditioned_cka(
    h: &ActivationMatrix,
    j: &ActivationMatrix,
    attrs: &AttributeTable,
    attribute: &str,
    value: &str,
    center: bool,
) -> Result<f64> {
    if h.sample_ids != j.sample_ids {
        return Err(Error::Alignment(
            "activation matrices do not list the same samples in the same order".into(),
        ));
    }
    let rows = attrs
        .segments(&h.sample_ids, attribute)?
        .remove(value)
        .unwrap_or_default();
    if rows.len() < 2 {
        return Err(Error::InsufficientSegment {
            attribute: attribute.to_string(),
            value: value.to_string(),
            size: rows.len(),
            required: 2,
        });
    }
    linear_cka(&h.restrict(&rows)?, &j.restrict(&rows)?, center)
}

/// Entry `(a, b)` is the CKA between block `a` of the first model and block
/// `b` of the second.
pub fn layerwise_cka_matrix(
    acts_a: &[ActivationMatrix],
    acts_b: &[ActivationMatrix],
    center: bool,
) -> Result<Vec<Vec<f64>>> {
    acts_a
        .iter()
        .map(|a| acts_b.iter().map(|b| linear_cka(a, b, center)).collect())
        .collect()
}

/// Layerwise CKA restricted to one attribute segment.
pub fn conditioned_cka_matrix(
    acts_a: &[ActivationMatrix],
    acts_b: &[ActivationMatrix],
    attrs: &AttributeTable,
    attribute: &str,
    value: &str,
    center: bool,
) -> Result<Vec<Vec<f64>>> {
    acts_a
        .iter()
        .map(|a| {
            acts_b
                .iter()
                .map(|b| conditioned_cka(a, b, attrs, attribute, value, center))
                .collect()
        })
        .collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Point with the smallest summed L1 distance to all others; ties go to the
/// lowest index.
pub fn medoid(points: &ArrayF) -> Result<usize> {
    let k = points.shape().first().copied().unwrap_or(0);
    if k == 0 {
        return Err(Error::EmptyInput("medoid of an empty point set".into()));
    }
    let mut best = (f64::INFINITY, 0);
    for i in 0..k {
        let s: f64 = (0..k).map(|j| l1(points.row(i), points.row(j))).sum();
        if s < best.0 {
            best = (s, i);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDistance {
    pub value: String,
    pub size: usize,
    /// Sample id of the segment medoid.
    pub medoid: String,
    /// Mean pairwise L1 distance within the segment; absent below 2 samples.
    pub intra_mean: Option<f64>,
}

/// Medoid-based distance summary for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistanceStats {
    pub attribute: String,
    pub segments: Vec<SegmentDistance>,
    /// L1 distance between segment medoids, in segment order.
    pub inter_medoid: Vec<Vec<f64>>,
    /// Mean of the defined intra-segment means.
    pub mean_intra: Option<f64>,
    /// Mean over distinct segment pairs of the medoid distance.
    pub mean_inter: Option<f64>,
    pub statistic: String,
}

pub fn group_distance_stats(h: &ActivationMatrix, attrs: &AttributeTable, attribute: &str) -> Result<GroupDistanceStats> {
    let groups = attrs.segments(&h.sample_ids, attribute)?;
    let mut segments = Vec::with_capacity(groups.len());
    let mut medoids = Vec::with_capacity(groups.len());
    for (value, rows) in &groups {
        let pts = h.values.select_rows(rows)?;
        let m = medoid(&pts)?;
        medoids.push(pts.row(m).to_vec());
        let k = rows.len();
        let intra_mean = (k >= 2).then(|| {
            let mut s = 0.0;
            for a in 0..k {
                for b in a + 1..k {
                    s += l1(pts.row(a), pts.row(b));
                }
            }
            s / (k * (k - 1) / 2) as f64
        });
        segments.push(SegmentDistance {
            value: value.clone(),
            size: k,
            medoid: h.sample_ids[rows[m]].clone(),
            intra_mean,
        });
    }
    let inter: Vec<Vec<f64>> = medoids
        .iter()
        .map(|a| medoids.iter().map(|b| l1(a, b)).collect())
        .collect();
    let intra: Vec<f64> = segments.iter().filter_map(|s| s.intra_mean).collect();
    let pairs: Vec<f64> = (0..inter.len())
        .flat_map(|a| (a + 1..inter.len()).map(move |b| (a, b)))
        .map(|(a, b)| inter[a][b])
        .collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(GroupDistanceStats {
        attribute: attribute.to_string(),
        mean_intra: mean(&intra),
        mean_inter: mean(&pairs),
        segments,
        inter_medoid: inter,
        statistic: "intra: mean pairwise L1 within segment; inter: L1 between segment medoids".into(),
    })
}

/// One CKA value keyed by attribute segment and block pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaEntry {
    pub attribute: String,
    pub segment: String,
    pub block_a: usize,
    pub block_b: usize,
    pub cka: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undefined_reason: Option<String>,
}

/// Conditioned layerwise CKA for every segment of every attribute, plus the
/// unconditioned population under attribute and segment `all`.
pub fn cka_table(
    acts_a: &[ActivationMatrix],
    acts_b: &[ActivationMatrix],
    attrs: &AttributeTable,
    center: bool,
) -> Result<Vec<CkaEntry>> {
    let ids = acts_a
        .first()
        .map(|a| a.sample_ids.clone())
        .ok_or_else(|| Error::EmptyInput("no activation blocks".into()))?;
    let mut out = Vec::new();
    let mut push = |attribute: &str, segment: &str, a: usize, b: usize, r: Result<f64>| match r {
        Ok(v) => {
            out.push(CkaEntry {
                attribute: attribute.into(),
                segment: segment.into(),
                block_a: a,
                block_b: b,
                cka: Some(v),
                undefined_reason: None,
            });
            Ok(())
        }
        Err(e @ (Error::Degenerate(_) | Error::InsufficientSegment { .. })) => {
            out.push(CkaEntry {
                attribute: attribute.into(),
                segment: segment.into(),
                block_a: a,
                block_b: b,
                cka: None,
                undefined_reason: Some(e.to_string()),
            });
            Ok(())
        }
        Err(e) => Err(e),
    };
    for (a, ha) in acts_a.iter().enumerate() {
        for (b, hb) in acts_b.iter().enumerate() {
            push("all", "all", a, b, linear_cka(ha, hb, center))?;
        }
    }
    for attribute in attrs.attributes() {
        let segments = attrs.segments(&ids, attribute)?;
        for value in segments.keys() {
            for (a, ha) in acts_a.iter().enumerate() {
                for (b, hb) in acts_b.iter().enumerate() {
                    push(attribute, value, a, b, conditioned_cka(ha, hb, attrs, attribute, value, center))?;
                }
            }
        }
    }
    Ok(out)
}

pub fn write_cka_csv(path: &Path, entries: &[CkaEntry], config_hash: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = config_hash {
        out.push_str(&format!("# config_hash={h}\n"));
    }
    out.push_str("attribute,segment,block_a,block_b,cka\n");
    for e in entries {
        let v = e.cka.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into());
        out.push_str(&format!("{},{},{},{},{}\n", e.attribute, e.segment, e.block_a, e.block_b, v));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Nested JSON view: attribute → segment → `[block_a][block_b]`.
pub fn cka_json(entries: &[CkaEntry]) -> serde_json::Value {
    let mut tree: BTreeMap<&str, BTreeMap<&str, BTreeMap<String, Option<f64>>>> = BTreeMap::new();
    for e in entries {
        tree.entry(&e.attribute)
            .or_default()
            .entry(&e.segment)
            .or_default()
            .insert(format!("{},{}", e.block_a, e.block_b), e.cka);
    }
    serde_json::to_value(tree).expect("plain map serializes")
}
