//! Experiment runner: pretrain, strategy grid, fairness evaluation,
//! conditioned CKA and the data-efficiency sweep, each writing hashed
//! artifacts into one run directory.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use report::{build_report, verify_run, REPORT_FAMILIES};

use crate::error::{Error, Result};
use crate::fairmetrics::{
    data_efficiency_sweep, evaluate_fairness, summarize_sweep, EvaluationConfig, FairnessReport, PrivilegeSpec,
    RunMetadata, SweepConfig, SweepRow, DEFAULT_SAMPLES_PER_SEGMENT,
};
use crate::finetune::{
    run_strategy_grid, standard_strategies, FinetuneConfig, FinetuneTrace, StrategyDescriptor, StrategyOrigin,
};
use crate::hashing::{config_hash, file_sha256, sha256_hex};
use crate::model::{EncoderConfig, FreezeMask, ModelParams};
use crate::simcka::{cka_json, cka_table, group_distance_stats, write_cka_csv, ActivationMatrix, BlockReduction};
use crate::ssl::{pretrain, write_loss_trace_csv, PretrainConfig};
use crate::synthcohort::{
    check_requirements, generate, load_cohort, write_cohort, Cohort, CohortConfig, DatasetManifest, Provenance,
    RequirementReport, MANIFEST_FILE,
};

pub const RUN_RECORD_FILE: &str = "run.json";
const LOCK_FILE: &str = ".fairprobe.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Grid,
    Evaluate,
    Cka,
    Sweep,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Pretrain, Stage::Grid, Stage::Evaluate, Stage::Cka, Stage::Sweep];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Grid => "grid",
            Stage::Evaluate => "evaluate",
            Stage::Cka => "cka",
            Stage::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Comma-separated stage list such as `grid,evaluate`.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let set: BTreeSet<Stage> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Stage::from_str)
        .collect::<Result<_>>()?;
    if set.is_empty() {
        return Err(Error::Config("no stages given".into()));
    }
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkaSettings {
    pub center: bool,
    pub reduction: BlockReduction,
}

impl Default for CkaSettings {
    fn default() -> Self {
        Self {
            center: true,
            reduction: BlockReduction::Pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub attribute: String,
    pub samples_per_segment: Vec<usize>,
    pub ssl_mask: FreezeMask,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            attribute: String::new(),
            samples_per_segment: DEFAULT_SAMPLES_PER_SEGMENT.to_vec(),
            ssl_mask: FreezeMask::new(vec![true, false, true]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest, relative to the config file.
    pub dataset: PathBuf,
    /// Encoder shape; defaults to the standard encoder for the dataset.
    pub encoder: Option<EncoderConfig>,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Empty means linear probe, gradual stages, surgical masks and the
    /// supervised baseline.
    pub strategies: Vec<StrategyDescriptor>,
    pub gradual_stages: Option<usize>,
    /// Attributes to audit; empty means all.
    pub attributes: Vec<String>,
    pub privilege: PrivilegeSpec,
    pub evaluation: EvaluationConfig,
    pub cka: CkaSettings,
    pub sweep: Option<SweepSettings>,
    pub seeds: Vec<u64>,
    pub min_users: usize,
    /// Run directory, relative to the config file.
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data").join(MANIFEST_FILE),
            encoder: None,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            strategies: Vec::new(),
            gradual_stages: None,
            attributes: Vec::new(),
            privilege: PrivilegeSpec::default(),
            evaluation: EvaluationConfig::default(),
            cka: CkaSettings::default(),
            sweep: None,
            seeds: vec![0],
            min_users: crate::synthcohort::DEFAULT_MIN_USERS,
            output: PathBuf::from("run"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {s} is listed twice")));
        }
        if !self.dataset.is_file() {
            return Err(Error::Config(format!(
                "dataset manifest {} does not exist",
                self.dataset.display()
            )));
        }
        self.finetune.validate()?;
        self.pretrain.augmentation.validate()?;
        if let Some(e) = &self.encoder {
            e.validate()?;
        }
        Ok(())
    }

    /// Reads a config and resolves its paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = read_json_file(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.output = base.join(&cfg.output);
        Ok(cfg)
    }

    /// Hash over the content of the experiment, independent of where the
    /// files live.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("dataset");
            o.remove("output");
        }
        config_hash(&v)
    }
}

/// Parses JSON, reporting syntax errors with the file and location.
pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed_at: u64,
    /// Relative path → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub toolkit_version: String,
    pub dataset: String,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub sweep_configured: bool,
    pub started_at: u64,
    /// Keyed by `seed-<s>/<stage>`, `sweep` or `report`.
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunRecord {
    pub fn read(dir: &Path) -> Result<Self> {
        read_json_file(&dir.join(RUN_RECORD_FILE))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_RECORD_FILE);
        let text = serde_json::to_string_pretty(&serde_json::to_value(self)?)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Stage keys a complete run needs.
    pub fn required_stages(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .seeds
            .iter()
            .flat_map(|s| {
                [Stage::Pretrain, Stage::Grid, Stage::Evaluate, Stage::Cka]
                    .into_iter()
                    .map(move |st| stage_key(st, *s))
            })
            .collect();
        if self.sweep_configured {
            keys.push(Stage::Sweep.as_str().to_string());
        }
        keys
    }

    pub fn missing_stages(&self) -> Vec<String> {
        self.required_stages()
            .into_iter()
            .filter(|k| !self.stages.contains_key(k))
            .collect()
    }
}

fn stage_key(stage: Stage, seed: u64) -> String {
    match stage {
        Stage::Sweep => stage.as_str().to_string(),
        _ => format!("seed-{seed}/{stage}"),
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Exclusive ownership of a run directory for one invocation.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "{} is locked by another invocation (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Writes a cohort for `config` into `out`, refusing to replace an existing
/// dataset unless `force`.
pub fn generate_dataset(config: &CohortConfig, out: &Path, force: bool) -> Result<PathBuf> {
    let manifest_path = out.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    let cohort = generate(config)?;
    let hash = config_hash(config)?;
    write_cohort(
        &cohort,
        out,
        &config.name,
        Provenance::Generator { config_hash: hash },
        config.open_benchmark,
    )?;
    Ok(manifest_path)
}

pub fn check_dataset(manifest_path: &Path, min_users: usize) -> Result<RequirementReport> {
    let manifest = crate::synthcohort::read_manifest(manifest_path)?;
    Ok(check_requirements(&manifest, min_users))
}

#[derive(Serialize, Deserialize)]
struct GridEntry {
    descriptor: StrategyDescriptor,
    trainable_params: usize,
    checkpoint: String,
    trace: FinetuneTrace,
}

#[derive(Serialize, Deserialize)]
struct GridIndex {
    config_hash: String,
    strategies: Vec<GridEntry>,
}

#[derive(Serialize, Deserialize)]
struct CkaSelection {
    ssl: String,
    supervised: String,
}

/// One invocation on a run directory.
pub struct Runner {
    config: ExperimentConfig,
    hash: String,
    out: PathBuf,
    force: bool,
    cohort: Cohort,
    manifest: DatasetManifest,
    record: RunRecord,
    warnings: Vec<String>,
    _lock: RunLock,
}

impl Runner {
    pub fn open(config: ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let hash = config.hash()?;
        let out = config.output.clone();
        let lock = RunLock::acquire(&out)?;
        let (cohort, manifest) = load_cohort(&config.dataset)?;
        let mut warnings = Vec::new();
        for c in check_requirements(&manifest, config.min_users).checks {
            if c.passed {
                continue;
            }
            let synthetic = matches!(manifest.provenance, Provenance::Generator { .. });
            if c.requirement == "open-benchmark" && synthetic {
                warnings.push(format!("requirement {} not met: {}", c.requirement, c.reason));
            } else {
                return Err(Error::Config(format!(
                    "dataset requirement {} not met: {}",
                    c.requirement, c.reason
                )));
            }
        }
        let dataset_hash = file_sha256(&config.dataset)?;
        let record = match RunRecord::read(&out) {
            Ok(r) if r.config_hash == hash && r.dataset_hash == dataset_hash => r,
            Ok(_) if !force => {
                return Err(Error::Config(format!(
                    "{} holds a run of a different config or dataset; pass --force to replace it",
                    out.display()
                )))
            }
            Ok(_) | Err(Error::Io { .. }) => RunRecord {
                config_hash: hash.clone(),
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
                dataset: manifest.name.clone(),
                dataset_hash,
                seeds: config.seeds.clone(),
                sweep_configured: config.sweep.is_some(),
                started_at: now(),
                stages: BTreeMap::new(),
            },
            Err(e) => return Err(e),
        };
        Ok(Self {
            config,
            hash,
            out,
            force,
            cohort,
            manifest,
            record,
            warnings,
            _lock: lock,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    /// Runs `stages` in pipeline order, persisting the run record after
    /// every completed stage.
    pub fn run(&mut self, stages: &[Stage]) -> Result<&RunRecord> {
        let wanted: BTreeSet<Stage> = stages.iter().copied().collect();
        if wanted.contains(&Stage::Sweep) && self.config.sweep.is_none() {
            return Err(Error::Config("sweep stage requested but no sweep is configured".into()));
        }
        for stage in wanted {
            let seeds: Vec<Option<u64>> = match stage {
                Stage::Sweep => vec![None],
                _ => self.config.seeds.iter().map(|&s| Some(s)).collect(),
            };
            for seed in seeds {
                let key = stage_key(stage, seed.unwrap_or(0));
                if self.record.stages.contains_key(&key) && !self.force {
                    return Err(Error::Config(format!(
                        "stage {key} already completed in {}; pass --force to overwrite",
                        self.out.display()
                    )));
                }
                let artifacts = self.run_stage(stage, seed).map_err(|e| Error::Stage {
                    stage: key.clone(),
                    source: Box::new(e),
                })?;
                self.record.stages.insert(
                    key,
                    StageRecord {
                        completed_at: now(),
                        artifacts,
                    },
                );
                self.record.write(&self.out)?;
            }
        }
        Ok(&self.record)
    }

    fn run_stage(&self, stage: Stage, seed: Option<u64>) -> Result<BTreeMap<String, String>> {
        let mut art = Artifacts::new(&self.out);
        match (stage, seed) {
            (Stage::Pretrain, Some(s)) => self.stage_pretrain(s, &mut art)?,
            (Stage::Grid, Some(s)) => self.stage_grid(s, &mut art)?,
            (Stage::Evaluate, Some(s)) => self.stage_evaluate(s, &mut art)?,
            (Stage::Cka, Some(s)) => self.stage_cka(s, &mut art)?,
            (Stage::Sweep, _) => self.stage_sweep(&mut art)?,
            (_, None) => unreachable!("per-seed stage without a seed"),
        }
        Ok(art.recorded)
    }

    fn encoder_config(&self) -> EncoderConfig {
        self.config.encoder.clone().unwrap_or_else(|| {
            EncoderConfig::standard(self.manifest.timesteps, self.manifest.channels)
        })
    }

    fn strategies(&self) -> Result<Vec<StrategyDescriptor>> {
        if !self.config.strategies.is_empty() {
            return Ok(self.config.strategies.clone());
        }
        let blocks = self.encoder_config().num_blocks();
        standard_strategies(blocks, self.config.gradual_stages.unwrap_or(blocks))
    }

    fn require(&self, stage: Stage, seed: u64, needed_by: Stage) -> Result<()> {
        if self.record.stages.contains_key(&stage_key(stage, seed)) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "stage {needed_by} needs stage {stage} for seed {seed}; run it first"
            )))
        }
    }

    fn load_encoder(&self, seed: u64, needed_by: Stage) -> Result<ModelParams> {
        self.require(Stage::Pretrain, seed, needed_by)?;
        let path = self.out.join(format!("seed-{seed}/pretrain/encoder.ckpt"));
        Ok(ModelParams::load_checkpoint(&path)?.0)
    }

    fn stage_pretrain(&self, seed: u64, art: &mut Artifacts) -> Result<()> {
        let train = self.cohort.train()?;
        let cfg = PretrainConfig {
            seed,
            ..self.config.pretrain.clone()
        };
        let outcome = pretrain(&train.samples, &self.encoder_config(), &cfg)?;
        let counters = BTreeMap::from([
            ("epochs".to_string(), cfg.epochs as u64),
            ("steps".to_string(), outcome.steps as u64),
        ]);
        let header = outcome.model.checkpoint_header(counters, Some(self.hash.clone()));
        let rel = format!("seed-{seed}/pretrain/encoder.ckpt");
        outcome.model.save_checkpoint(&art.prepare(&rel)?, &header)?;
        art.record(&rel)?;
        let rel = format!("seed-{seed}/pretrain/loss.csv");
        write_loss_trace_csv(&art.prepare(&rel)?, &outcome.loss_trace, Some(&self.hash))?;
        art.record(&rel)
    }

    fn stage_grid(&self, seed: u64, art: &mut Artifacts) -> Result<()> {
        let encoder = self.load_encoder(seed, Stage::Grid)?;
        let strategies = self.strategies()?;
        let cfg = FinetuneConfig {
            seed,
            ..self.config.finetune.clone()
        };
        let validation = self.cohort.validation()?;
        let validation = (!validation.is_empty()).then_some(validation);
        let runs = run_strategy_grid(&encoder, &self.cohort.train()?, validation.as_ref(), &strategies, &cfg)?;
        let mut entries = Vec::with_capacity(runs.len());
        for run in runs {
            let rel = format!("seed-{seed}/grid/{}.ckpt", run.descriptor.name);
            let counters = BTreeMap::from([
                ("epochs".to_string(), run.trace.epoch_losses.len() as u64),
                ("steps".to_string(), run.trace.steps as u64),
            ]);
            let header = run.model.checkpoint_header(counters, Some(self.hash.clone()));
            run.model.save_checkpoint(&art.prepare(&rel)?, &header)?;
            art.record(&rel)?;
            entries.push(GridEntry {
                descriptor: run.descriptor,
                trainable_params: run.trainable_params,
                checkpoint: rel,
                trace: run.trace,
            });
        }
        let index = GridIndex {
            config_hash: self.hash.clone(),
            strategies: entries,
        };
        art.write_json(&format!("seed-{seed}/grid/strategies.json"), &index)
    }

    fn read_grid(&self, seed: u64, needed_by: Stage) -> Result<GridIndex> {
        self.require(Stage::Grid, seed, needed_by)?;
        read_json_file(&self.out.join(format!("seed-{seed}/grid/strategies.json")))
    }

    fn stage_evaluate(&self, seed: u64, art: &mut Artifacts) -> Result<()> {
        let index = self.read_grid(seed, Stage::Evaluate)?;
        let test = self.cohort.test()?;
        let cfg = EvaluationConfig {
            seed,
            ..self.config.evaluation.clone()
        };
        for entry in &index.strategies {
            let (model, _) = ModelParams::load_checkpoint(&self.out.join(&entry.checkpoint))?;
            let scores = model.predict_proba(&test.samples)?;
            let metadata = RunMetadata {
                dataset: self.manifest.name.clone(),
                model_id: entry.descriptor.name.clone(),
                strategy: entry.descriptor.label(),
                origin: entry.descriptor.origin.as_str().to_string(),
                seed,
                trainable_params: entry.trainable_params,
            };
            let mut report = evaluate_fairness(
                &scores,
                &test.labels,
                &test.sample_ids,
                &self.cohort.attributes,
                &self.config.attributes,
                &self.config.privilege,
                &cfg,
                metadata,
            )?;
            report.config_hash = Some(self.hash.clone());
            let rel = format!("seed-{seed}/evaluate/{}.json", entry.descriptor.name);
            report.write_json(&art.prepare(&rel)?)?;
            art.record(&rel)?;
        }
        Ok(())
    }

    fn stage_cka(&self, seed: u64, art: &mut Artifacts) -> Result<()> {
        let index = self.read_grid(seed, Stage::Cka)?;
        self.require(Stage::Evaluate, seed, Stage::Cka)?;
        let mut reports = Vec::with_capacity(index.strategies.len());
        for entry in &index.strategies {
            let path = self.out.join(format!("seed-{seed}/evaluate/{}.json", entry.descriptor.name));
            reports.push((entry, FairnessReport::read_json(&path)?));
        }
        let selection = select_models(&reports)?;
        let test = self.cohort.test()?;
        let activations = |name: &str| -> Result<(Vec<ActivationMatrix>, ActivationMatrix)> {
            let entry = &reports.iter().find(|(e, _)| e.descriptor.name == name).expect("selected").0;
            let (model, _) = ModelParams::load_checkpoint(&self.out.join(&entry.checkpoint))?;
            let acts = model.activations(&test.samples)?;
            let blocks = acts
                .blocks
                .iter()
                .map(|b| ActivationMatrix::from_block(b, test.sample_ids.clone(), self.config.cka.reduction))
                .collect::<Result<_>>()?;
            Ok((blocks, ActivationMatrix::new(acts.embedding, test.sample_ids.clone())?))
        };
        let (ssl_blocks, ssl_emb) = activations(&selection.ssl)?;
        let (sup_blocks, sup_emb) = activations(&selection.supervised)?;
        let entries = cka_table(&ssl_blocks, &sup_blocks, &self.cohort.attributes, self.config.cka.center)?;
        let rel = format!("seed-{seed}/cka/cka.csv");
        write_cka_csv(&art.prepare(&rel)?, &entries, Some(&self.hash))?;
        art.record(&rel)?;
        let attributes = self.audit_attributes();
        let mut distances = BTreeMap::new();
        for (label, emb) in [("ssl", &ssl_emb), ("supervised", &sup_emb)] {
            let per_attr = attributes
                .iter()
                .map(|a| Ok((a.clone(), group_distance_stats(emb, &self.cohort.attributes, a)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            distances.insert(label, per_attr);
        }
        art.write_json(
            &format!("seed-{seed}/cka/cka.json"),
            &serde_json::json!({
                "config_hash": self.hash,
                "ssl": selection.ssl,
                "supervised": selection.supervised,
                "center": self.config.cka.center,
                "reduction": self.config.cka.reduction,
                "matrices": cka_json(&entries),
                "distances": distances,
            }),
        )
    }

    fn audit_attributes(&self) -> Vec<String> {
        if self.config.attributes.is_empty() {
            self.cohort.attributes.attributes().to_vec()
        } else {
            self.config.attributes.clone()
        }
    }

    fn stage_sweep(&self, art: &mut Artifacts) -> Result<()> {
        let settings = self.config.sweep.as_ref().expect("checked in run");
        let train = self.cohort.train()?;
        let test = self.cohort.test()?;
        let mut rows: Vec<SweepRow> = Vec::new();
        for &seed in &self.config.seeds {
            let encoder = self.load_encoder(seed, Stage::Sweep)?;
            let cfg = SweepConfig {
                attribute: settings.attribute.clone(),
                samples_per_segment: settings.samples_per_segment.clone(),
                seeds: vec![seed],
                ssl_mask: settings.ssl_mask.clone(),
                finetune: self.config.finetune.clone(),
                audit_attributes: self.config.attributes.clone(),
            };
            rows.extend(data_efficiency_sweep(
                &encoder,
                &train,
                &test,
                &self.cohort.attributes,
                &self.config.privilege,
                &cfg,
            )?);
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into());
        let mut csv = format!(
            "# config_hash={}\nsamples_per_segment,model,seed,auc,deviation_min,deviation_mean,deviation_max\n",
            self.hash
        );
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.samples_per_segment,
                r.model,
                r.seed,
                opt(r.auc),
                opt(r.deviation.min),
                opt(r.deviation.mean),
                opt(r.deviation.max)
            ));
        }
        art.write_text("sweep/rows.csv", &csv)?;
        let mut csv = format!(
            "# config_hash={}\nsamples_per_segment,model,seeds,deviation_min,deviation_mean,deviation_max,auc\n",
            self.hash
        );
        for b in summarize_sweep(&rows) {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                b.samples_per_segment,
                b.model,
                b.seeds,
                opt(b.min),
                opt(b.mean),
                opt(b.max),
                opt(b.auc)
            ));
        }
        art.write_text("sweep/bands.csv", &csv)
    }
}

/// Best SSL strategy by general-population AUC (ties: fewer trainable
/// parameters, then name) and the supervised baseline.
fn select_models(reports: &[(&GridEntry, FairnessReport)]) -> Result<CkaSelection> {
    let supervised = reports
        .iter()
        .find(|(e, _)| e.descriptor.origin == StrategyOrigin::SupervisedScratch)
        .ok_or_else(|| Error::Config("CKA needs a supervised-scratch strategy in the grid".into()))?;
    let ssl = reports
        .iter()
        .filter(|(e, r)| e.descriptor.origin != StrategyOrigin::SupervisedScratch && r.general.auc.is_some())
        .min_by(|(ea, ra), (eb, rb)| {
            let (a, b) = (ra.general.auc.expect("filtered"), rb.general.auc.expect("filtered"));
            b.total_cmp(&a)
                .then(ea.trainable_params.cmp(&eb.trainable_params))
                .then(ea.descriptor.name.cmp(&eb.descriptor.name))
        })
        .ok_or_else(|| Error::Config("CKA needs a pretrained strategy with a defined AUC".into()))?;
    Ok(CkaSelection {
        ssl: ssl.0.descriptor.name.clone(),
        supervised: supervised.0.descriptor.name.clone(),
    })
}

/// Files written by one stage, with their digests.
struct Artifacts<'a> {
    root: &'a Path,
    recorded: BTreeMap<String, String>,
}

impl<'a> Artifacts<'a> {
    fn new(root: &'a Path) -> Self {
        Self {
            root,
            recorded: BTreeMap::new(),
        }
    }

    fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(path)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let digest = file_sha256(&self.root.join(rel))?;
        self.recorded.insert(rel.to_string(), digest);
        Ok(())
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.prepare(rel)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.recorded.insert(rel.to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(&serde_json::to_value(value)?)? + "\n";
        self.write_text(rel, &text)
    }
}

/// Caps the global thread pool at `FAIRPROBE_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("FAIRPROBE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("FAIRPROBE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

/// Opens a runner and executes `stages` (all configured stages when `None`).
pub fn run_experiment(config: ExperimentConfig, stages: Option<&[Stage]>, force: bool) -> Result<RunRecord> {
    let all: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|&s| s != Stage::Sweep || config.sweep.is_some())
        .collect();
    let mut runner = Runner::open(config, force)?;
    runner.run(stages.unwrap_or(&all))?;
    Ok(runner.record().clone())
}
