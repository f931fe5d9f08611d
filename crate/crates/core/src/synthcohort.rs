//! Seeded synthetic cohorts with controllable demographic imbalance,
//! outcome-prevalence bias and per-segment signal quality, plus dataset
//! requirement checks and audits.
//!
//! A sample of a user with label `y` is
//! `x[t, m] = y · s · P[t, m] + a · sin(ω t + φ) + σ · e[t, m]`
//! where `P` is a fixed unit-RMS pattern, `e` is stationary AR(1) noise
//! and `s`, `σ` and the label prevalence are products of per-segment
//! multipliers over all attributes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{AttributeTable, Dataset};
use crate::error::{Error, Result};
use crate::fairmetrics::PrivilegeSpec;
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensorcore::ArrayF;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
    pub proportions: Vec<f64>,
    /// Per-value multipliers; empty means all ones.
    pub prevalence_scale: Vec<f64>,
    pub noise_scale: Vec<f64>,
    pub separation_scale: Vec<f64>,
}

impl AttributeSpec {
    pub fn new(name: &str, values: &[&str], proportions: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
            proportions: proportions.to_vec(),
            ..Self::default()
        }
    }

    fn scale(v: &[f64], k: usize) -> f64 {
        v.get(k).copied().unwrap_or(1.0)
    }

    fn validate(&self, users: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("attribute {}: {m}", self.name)));
        if self.name.is_empty() || self.values.is_empty() {
            return err("needs a name and at least one value".into());
        }
        if self.proportions.len() != self.values.len() {
            return err("one proportion per value is required".into());
        }
        if self.proportions.iter().any(|&p| !(p > 0.0)) {
            return err("proportions must be positive".into());
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return err(format!("proportions sum to {sum}, not 1"));
        }
        let min = self.proportions.iter().copied().fold(f64::INFINITY, f64::min);
        if (users as f64) * min < 2.0 {
            return err(format!("{users} users leave fewer than 2 expected in the smallest segment"));
        }
        for (label, v) in [
            ("prevalence", &self.prevalence_scale),
            ("noise", &self.noise_scale),
            ("separation", &self.separation_scale),
        ] {
            if !v.is_empty() && v.len() != self.values.len() {
                return err(format!("{label} scale needs one entry per value"));
            }
            if v.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
                return err(format!("{label} scale entries must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub name: String,
    pub users: usize,
    pub timesteps: usize,
    pub channels: usize,
    pub attributes: Vec<AttributeSpec>,
    pub prevalence: f64,
    pub noise: f64,
    pub separation: f64,
    /// Amplitude of a label-independent oscillation with random phase.
    pub nuisance: f64,
    pub ar_coefficient: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub open_benchmark: bool,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            users: 2000,
            timesteps: 48,
            channels: 8,
            attributes: vec![
                AttributeSpec::new("gender", &["female", "male"], &[0.45, 0.55]),
                AttributeSpec::new("age", &["<65", ">=65"], &[0.45, 0.55]),
                AttributeSpec::new("language", &["english", "other"], &[0.85, 0.15]),
            ],
            prevalence: 0.3,
            noise: 1.0,
            separation: 1.0,
            nuisance: 0.5,
            ar_coefficient: 0.8,
            split: [0.64, 0.16, 0.20],
            open_benchmark: true,
            seed: 0,
        }
    }
}

impl CohortConfig {
    /// Two-segment cohort where a 20% minority has twice the feature noise
    /// and half the outcome prevalence.
    pub fn biased_minority(users: usize, timesteps: usize, channels: usize, seed: u64) -> Self {
        Self {
            name: "biased-minority".into(),
            users,
            timesteps,
            channels,
            attributes: vec![AttributeSpec {
                prevalence_scale: vec![1.0, 0.5],
                noise_scale: vec![1.0, 2.0],
                ..AttributeSpec::new("group", &["majority", "minority"], &[0.8, 0.2])
            }],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users < 2 || self.timesteps == 0 || self.channels == 0 {
            return Err(Error::Config("cohort needs at least 2 users and non-empty samples".into()));
        }
        for a in &self.attributes {
            a.validate(self.users)?;
        }
        let mut names: Vec<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("attribute names must be unique".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return Err(Error::Config("AR coefficient must lie in [0, 1)".into()));
        }
        if self.split.iter().any(|&s| s < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be non-negative and sum to 1".into()));
        }
        // Every combination of prevalence multipliers must keep the rate in (0, 1).
        let (lo, hi) = self.attributes.iter().fold((self.prevalence, self.prevalence), |(lo, hi), a| {
            let scales: Vec<f64> = (0..a.values.len())
                .map(|k| AttributeSpec::scale(&a.prevalence_scale, k))
                .collect();
            let min = scales.iter().copied().fold(f64::INFINITY, f64::min);
            let max = scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo * min, hi * max)
        });
        if !(lo > 0.0 && hi < 1.0) {
            return Err(Error::Config(format!(
                "segment prevalences span [{lo}, {hi}], outside (0, 1)"
            )));
        }
        if !(self.noise >= 0.0 && self.separation >= 0.0 && self.nuisance >= 0.0) {
            return Err(Error::Config("noise, separation and nuisance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Row indices of the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub dataset: Dataset,
    pub attributes: AttributeTable,
    pub splits: Splits,
}

impl Cohort {
    pub fn train(&self) -> Result<Dataset> {
        self.dataset.subset(&self.splits.train)
    }

    pub fn validation(&self) -> Result<Dataset> {
        self.dataset.subset(&self.splits.validation)
    }

    pub fn test(&self) -> Result<Dataset> {
        self.dataset.subset(&self.splits.test)
    }
}

fn latent_pattern(t: usize, m: usize, rng: &mut Rng) -> Vec<f64> {
    let mut p = vec![0.0; t * m];
    for c in 0..m {
        let cycles = rng.random_range(0.5..2.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let weight: f64 = StandardNormal.sample(rng);
        for s in 0..t {
            p[s * m + c] = weight * (std::f64::consts::TAU * cycles * s as f64 / t as f64 + phase).sin();
        }
    }
    let rms = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt();
    if rms > 0.0 {
        p.iter_mut().for_each(|v| *v /= rms);
    }
    p
}

fn categorical(proportions: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in proportions.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    proportions.len() - 1
}

/// Deterministic cohort for a configuration.
pub fn generate(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let (n, t, m) = (config.users, config.timesteps, config.channels);
    let pattern = latent_pattern(t, m, &mut seeded(derive_seed(config.seed, "cohort-pattern")));
    let mut rng = seeded(derive_seed(config.seed, "cohort-samples"));
    let innovation = (1.0 - config.ar_coefficient * config.ar_coefficient).sqrt();
    let mut data = Vec::with_capacity(n * t * m);
    let mut labels = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    let mut e = vec![0.0; m];
    for _ in 0..n {
        let mut prevalence = config.prevalence;
        let mut noise = config.noise;
        let mut separation = config.separation;
        let mut row = Vec::with_capacity(config.attributes.len());
        for a in &config.attributes {
            let k = categorical(&a.proportions, &mut rng);
            prevalence *= AttributeSpec::scale(&a.prevalence_scale, k);
            noise *= AttributeSpec::scale(&a.noise_scale, k);
            separation *= AttributeSpec::scale(&a.separation_scale, k);
            row.push(a.values[k].clone());
        }
        let y = usize::from(rng.random::<f64>() < prevalence);
        let omega = std::f64::consts::TAU * rng.random_range(1.0..4.0) / t as f64;
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        for s in 0..t {
            let wave = config.nuisance * (omega * s as f64 + phi).sin();
            for c in 0..m {
                let z: f64 = StandardNormal.sample(&mut rng);
                e[c] = if s == 0 { z } else { config.ar_coefficient * e[c] + innovation * z };
                data.push(y as f64 * separation * pattern[s * m + c] + wave + noise * e[c]);
            }
        }
        keys.push((row.join("\u{1f}"), y));
        labels.push(y);
        rows.push(row);
    }
    let ids: Vec<String> = (0..n).map(|i| format!("u{i:05}")).collect();
    let splits = stratified_split(&keys, config.split, &mut seeded(derive_seed(config.seed, "cohort-split")));
    Ok(Cohort {
        dataset: Dataset::new(ArrayF::new(vec![n, t, m], data)?, labels, ids.clone())?,
        attributes: AttributeTable::new(config.attributes.iter().map(|a| a.name.clone()).collect(), ids, rows)?,
        splits,
    })
}

/// Splits every stratum separately; indices stay sorted within each split.
fn stratified_split<K: Ord + Clone>(keys: &[K], fractions: [f64; 3], rng: &mut Rng) -> Splits {
    let mut strata: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        strata.entry(k.clone()).or_default().push(i);
    }
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut members in strata.into_values() {
        members.shuffle(rng);
        let n = members.len();
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        train.extend_from_slice(&members[..n_train]);
        validation.extend_from_slice(&members[n_train..n_train + n_val]);
        test.extend_from_slice(&members[n_train + n_val..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Splits {
        train,
        validation,
        test,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Generator { config_hash: String },
    ExternalImport { source: String },
}

/// On-disk description of a dataset. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub samples_path: PathBuf,
    pub labels_path: PathBuf,
    pub attributes_path: PathBuf,
    pub splits_path: PathBuf,
    pub users: usize,
    pub timesteps: usize,
    pub channels: usize,
    pub attributes: Vec<String>,
    pub provenance: Provenance,
    pub open_benchmark: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct SplitIds {
    train: Vec<String>,
    validation: Vec<String>,
    test: Vec<String>,
}

/// Writes the sample blob, labels, attribute table, splits and manifest.
pub fn write_cohort(cohort: &Cohort, dir: &Path, name: &str, provenance: Provenance, open_benchmark: bool) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = &cohort.dataset;
    let manifest = DatasetManifest {
        name: name.to_string(),
        samples_path: "samples.f64".into(),
        labels_path: "labels.txt".into(),
        attributes_path: "attributes.csv".into(),
        splits_path: "splits.json".into(),
        users: d.len(),
        timesteps: d.timesteps(),
        channels: d.channels(),
        attributes: cohort.attributes.attributes().to_vec(),
        provenance,
        open_benchmark,
    };
    let blob: Vec<u8> = d.samples.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let p = dir.join(&manifest.samples_path);
    std::fs::write(&p, blob).map_err(|e| Error::io(&p, e))?;
    let labels: String = d.labels.iter().map(|l| format!("{l}\n")).collect();
    let p = dir.join(&manifest.labels_path);
    std::fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;
    cohort.attributes.write_csv(&dir.join(&manifest.attributes_path))?;
    let to_ids = |v: &[usize]| v.iter().map(|&i| d.sample_ids[i].clone()).collect();
    let splits = SplitIds {
        train: to_ids(&cohort.splits.train),
        validation: to_ids(&cohort.splits.validation),
        test: to_ids(&cohort.splits.test),
    };
    let p = dir.join(&manifest.splits_path);
    std::fs::write(&p, serde_json::to_string_pretty(&splits)? + "\n").map_err(|e| Error::io(&p, e))?;
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads and validates the dataset a manifest points to.
pub fn load_cohort(manifest_path: &Path) -> Result<(Cohort, DatasetManifest)> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let bad = |path: &Path, message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let (n, t, m) = (manifest.users, manifest.timesteps, manifest.channels);
    let p = base.join(&manifest.samples_path);
    let blob = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if blob.len() != 8 * n * t * m {
        return Err(bad(&p, format!("expected {} bytes for [{n} x {t} x {m}], found {}", 8 * n * t * m, blob.len())));
    }
    let data = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let p = base.join(&manifest.labels_path);
    let labels: Vec<usize> = std::fs::read_to_string(&p)
        .map_err(|e| Error::io(&p, e))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<usize>().map_err(|e| bad(&p, format!("label {l:?}: {e}"))))
        .collect::<Result<_>>()?;
    let attributes = AttributeTable::read_csv(&base.join(&manifest.attributes_path))?;
    if attributes.attributes() != manifest.attributes.as_slice() {
        return Err(bad(manifest_path, "attribute columns differ from the manifest".into()));
    }
    let ids = attributes.ids().to_vec();
    let dataset = Dataset::new(ArrayF::new(vec![n, t, m], data)?, labels, ids)?;
    let p = base.join(&manifest.splits_path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let split_ids: SplitIds = serde_json::from_str(&text)?;
    let position: std::collections::HashMap<&str, usize> =
        dataset.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let resolve = |v: &[String]| -> Result<Vec<usize>> {
        v.iter()
            .map(|id| {
                position
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| bad(&p, format!("split lists unknown sample {id}")))
            })
            .collect()
    };
    let splits = Splits {
        train: resolve(&split_ids.train)?,
        validation: resolve(&split_ids.validation)?,
        test: resolve(&split_ids.test)?,
    };
    Ok((
        Cohort {
            dataset,
            attributes,
            splits,
        },
        manifest,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementCheck {
    pub requirement: String,
    pub passed: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementReport {
    pub checks: Vec<RequirementCheck>,
}

impl RequirementReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, requirement: &str) -> Option<&RequirementCheck> {
        self.checks.iter().find(|c| c.requirement == requirement)
    }
}

pub const DEFAULT_MIN_USERS: usize = 1000;

/// Protected attributes present, enough users, more than one modality, and
/// an openly available benchmark.
pub fn check_requirements(manifest: &DatasetManifest, min_users: usize) -> RequirementReport {
    let a = manifest.attributes.len();
    let checks = vec![
        RequirementCheck {
            requirement: "protected-attributes".into(),
            passed: a >= 1,
            reason: format!("{a} protected attribute(s) available"),
        },
        RequirementCheck {
            requirement: "sufficient-users".into(),
            passed: manifest.users >= min_users,
            reason: format!("{} users, at least {min_users} required", manifest.users),
        },
        RequirementCheck {
            requirement: "multimodal".into(),
            passed: manifest.channels > 1,
            reason: if manifest.channels > 1 {
                format!("{} modalities", manifest.channels)
            } else {
                "unimodal data is excluded".into()
            },
        },
        RequirementCheck {
            requirement: "open-benchmark".into(),
            passed: manifest.open_benchmark,
            reason: if manifest.open_benchmark {
                "publicly available".into()
            } else {
                "not marked as an open benchmark".into()
            },
        },
    ];
    RequirementReport { checks }
}

/// Label prevalence of the unprivileged group over that of the privileged
/// group; `None` when the privileged prevalence is zero.
pub fn outcome_dir(dataset: &Dataset, attrs: &AttributeTable, attribute: &str, privilege: &PrivilegeSpec) -> Result<Option<f64>> {
    let groups = privilege.resolve(attrs, attribute)?;
    let mut counts = [[0usize; 2]; 2];
    for (v, &y) in attrs.column_for(&dataset.sample_ids, attribute)?.into_iter().zip(&dataset.labels) {
        if let Some(is_priv) = groups.side(v) {
            counts[usize::from(is_priv)][y] += 1;
        }
    }
    for (side, name) in [(0, &groups.unprivileged), (1, &groups.privileged)] {
        if counts[side][0] + counts[side][1] == 0 {
            return Err(Error::InsufficientSegment {
                attribute: attribute.to_string(),
                value: name.clone(),
                size: 0,
                required: 1,
            });
        }
    }
    let prevalence = |c: [usize; 2]| c[1] as f64 / (c[0] + c[1]) as f64;
    let (pu, pp) = (prevalence(counts[0]), prevalence(counts[1]));
    Ok((pp > 0.0).then(|| pu / pp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentShare {
    pub value: String,
    pub count: usize,
    pub proportion: f64,
    pub positives: usize,
    pub prevalence: f64,
}

/// Segment counts, shares and outcome prevalence for every attribute.
pub fn segment_histogram(dataset: &Dataset, attrs: &AttributeTable) -> Result<BTreeMap<String, Vec<SegmentShare>>> {
    let n = dataset.len();
    let mut out = BTreeMap::new();
    for attribute in attrs.attributes() {
        let shares = attrs
            .segments(&dataset.sample_ids, attribute)?
            .into_iter()
            .map(|(value, rows)| {
                let positives = rows.iter().filter(|&&i| dataset.labels[i] == 1).count();
                SegmentShare {
                    value,
                    count: rows.len(),
                    proportion: rows.len() as f64 / n as f64,
                    positives,
                    prevalence: positives as f64 / rows.len() as f64,
                }
            })
            .collect();
        out.insert(attribute.clone(), shares);
    }
    Ok(out)
}

/// `86.6% English`: share of the largest segment to one decimal.
pub fn format_majority_share(shares: &[SegmentShare]) -> Option<String> {
    let top = shares
        .iter()
        .fold(None::<&SegmentShare>, |best, s| match best {
            Some(b) if b.count >= s.count => Some(b),
            _ => Some(s),
        })?;
    Some(format!("{:.1}% {}", 100.0 * top.proportion, top.value))
}
