//! Supervised fine-tuning of (pretrained) encoders under freeze masks:
//! gradual unfreezing, surgical single-block masks, linear probing and the
//! fully supervised baseline.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::shuffled_batches;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_encoder, EncoderConfig, FreezeMask, HeadConfig, Mode, ModelParams};
use crate::rng::{derive_seed, derive_seed_n, seeded};
use crate::tensorcore::{adadelta_step, softmax_cross_entropy, OptimizerState, Tape};

/// Probability threshold on class 1 used to turn scores into labels.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stopping: bool,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub head: HeadConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            base_lr: 0.03,
            batch_size: 64,
            seed: 0,
            early_stopping: false,
            patience: 10,
            rho: 0.95,
            epsilon: 1e-6,
            head: HeadConfig::classification(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.head.output_dim() != 2 {
            return Err(Error::Config("classification head must end in 2 units".into()));
        }
        self.head.validate()
    }
}

/// Per-strategy overrides read from a grid file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stopping: Option<bool>,
}

impl FinetuneOverrides {
    pub fn apply(&self, base: &FinetuneConfig) -> FinetuneConfig {
        let mut c = base.clone();
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.base_lr {
            c.base_lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.early_stopping {
            c.early_stopping = v;
        }
        c
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyOrigin {
    Gradual,
    Surgical,
    LinearProbe,
    SupervisedScratch,
}

impl StrategyOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gradual => "gradual",
            Self::Surgical => "surgical",
            Self::LinearProbe => "linear-probe",
            Self::SupervisedScratch => "supervised-scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDescriptor {
    pub name: String,
    pub mask: FreezeMask,
    pub origin: StrategyOrigin,
    #[serde(default, skip_serializing_if = "FinetuneOverrides::is_empty")]
    pub overrides: FinetuneOverrides,
}

impl StrategyDescriptor {
    pub fn new(name: impl Into<String>, mask: FreezeMask, origin: StrategyOrigin) -> Self {
        Self {
            name: name.into(),
            mask,
            origin,
            overrides: FinetuneOverrides::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.origin {
            StrategyOrigin::SupervisedScratch => self.mask.trainable_blocks() == self.mask.len(),
            StrategyOrigin::LinearProbe => self.mask.trainable_blocks() == 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "strategy {} has mask {} incompatible with origin {}",
                self.name,
                self.mask,
                self.origin.as_str()
            )))
        }
    }

    /// Figure label: frozen-block count and glyphs, e.g. `1 (●○●)`.
    pub fn label(&self) -> String {
        self.mask.glyphs()
    }
}

/// Algorithm 1: starting from an all-frozen encoder, every stage unfreezes the
/// next `⌊L / stages⌋` blocks counting back from the last one; the final stage
/// is all-trainable.
pub fn gradual_unfreeze_schedule(num_blocks: usize, num_stages: usize) -> Result<Vec<FreezeMask>> {
    if num_stages == 0 || num_blocks < num_stages {
        return Err(Error::Config(format!(
            "cannot unfreeze {num_blocks} blocks in {num_stages} stages"
        )));
    }
    let step = num_blocks / num_stages;
    Ok((1..=num_stages)
        .map(|stage| {
            let open = if stage == num_stages { num_blocks } else { stage * step };
            FreezeMask::new((0..num_blocks).map(|b| b >= num_blocks - open).collect())
        })
        .collect())
}

/// Masks with exactly one trainable block, then masks with exactly one frozen
/// block, without duplicates.
pub fn surgical_masks(num_blocks: usize) -> Vec<FreezeMask> {
    let single_on = (0..num_blocks).map(|k| FreezeMask::new((0..num_blocks).map(|b| b == k).collect()));
    let single_off = (0..num_blocks).map(|k| FreezeMask::new((0..num_blocks).map(|b| b != k).collect()));
    let mut seen = HashSet::new();
    single_on
        .chain(single_off)
        .filter(|m| m.trainable_blocks() > 0 && seen.insert(m.clone()))
        .collect()
}

/// Linear probe, gradual stages, surgical masks and the supervised baseline.
pub fn standard_strategies(num_blocks: usize, num_stages: usize) -> Result<Vec<StrategyDescriptor>> {
    let mut out = vec![StrategyDescriptor::new(
        "linear-probe",
        FreezeMask::all_frozen(num_blocks),
        StrategyOrigin::LinearProbe,
    )];
    for (i, m) in gradual_unfreeze_schedule(num_blocks, num_stages)?.into_iter().enumerate() {
        out.push(StrategyDescriptor::new(format!("gradual-{}", i + 1), m, StrategyOrigin::Gradual));
    }
    for m in surgical_masks(num_blocks) {
        out.push(StrategyDescriptor::new(
            format!("surgical-{}", m.bits().iter().map(u8::to_string).collect::<String>()),
            m,
            StrategyOrigin::Surgical,
        ));
    }
    out.push(StrategyDescriptor::new(
        "supervised",
        FreezeMask::all_trainable(num_blocks),
        StrategyOrigin::SupervisedScratch,
    ));
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrace {
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    pub warnings: Vec<String>,
    pub steps: usize,
    /// Epoch (from 1) whose weights were kept when early stopping is on.
    pub best_epoch: Option<usize>,
}

/// Attaches a fresh classification head to a copy of `encoder` and trains it
/// with `mask` applied to the encoder blocks.
pub fn finetune(
    encoder: &ModelParams,
    mask: &FreezeMask,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &FinetuneConfig,
) -> Result<(ModelParams, FinetuneTrace)> {
    config.validate()?;
    let mut model = encoder.clone();
    model.attach_head(&config.head, derive_seed(config.seed, "classifier"))?;
    model.set_freeze_mask(mask)?;
    let trace = train_classifier(&mut model, train, validation, config)?;
    Ok((model, trace))
}

/// Keeps training a classifier (encoder and head) under a new mask.
pub fn continue_finetune(
    classifier: &ModelParams,
    mask: &FreezeMask,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &FinetuneConfig,
) -> Result<(ModelParams, FinetuneTrace)> {
    config.validate()?;
    if classifier.head().is_none() {
        return Err(Error::Contract("warm start needs a classifier with a head".into()));
    }
    let mut model = classifier.clone();
    model.set_freeze_mask(mask)?;
    let trace = train_classifier(&mut model, train, validation, config)?;
    Ok((model, trace))
}

/// Same architecture from a random initialisation, everything trainable.
pub fn train_supervised_baseline(
    train: &Dataset,
    validation: Option<&Dataset>,
    encoder: &EncoderConfig,
    config: &FinetuneConfig,
) -> Result<(ModelParams, FinetuneTrace)> {
    let init = build_encoder(encoder, derive_seed(config.seed, "supervised-encoder"))?;
    finetune(&init, &FreezeMask::all_trainable(encoder.num_blocks()), train, validation, config)
}

fn check_compatible(model: &ModelParams, data: &Dataset) -> Result<()> {
    let c = model.config();
    if data.timesteps() != c.timesteps || data.channels() != c.channels {
        return Err(Error::Dimension(format!(
            "dataset is [T={}, M={}] but the encoder expects [T={}, M={}]",
            data.timesteps(),
            data.channels(),
            c.timesteps,
            c.channels
        )));
    }
    Ok(())
}

fn train_classifier(
    model: &mut ModelParams,
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &FinetuneConfig,
) -> Result<FinetuneTrace> {
    if train.is_empty() {
        return Err(Error::Contract("fine-tuning needs a non-empty labeled set".into()));
    }
    check_compatible(model, train)?;
    let val = match (config.early_stopping, validation) {
        (true, None) => {
            return Err(Error::Config("early stopping needs a validation set".into()));
        }
        (true, Some(v)) if v.is_empty() => {
            return Err(Error::Contract("validation set is empty".into()));
        }
        (true, Some(v)) => {
            check_compatible(model, v)?;
            Some(v)
        }
        (false, _) => None,
    };
    let mut trace = FinetuneTrace::default();
    let [neg, pos] = train.class_counts();
    if neg == 0 || pos == 0 {
        trace
            .warnings
            .push(format!("degenerate labels: every training sample has label {}", usize::from(pos > 0)));
    }
    let mut opt = OptimizerState::adadelta_with(config.base_lr, config.rho, config.epsilon)?;
    let mut best: Option<(f64, ModelParams, usize)> = None;
    for epoch in 0..config.epochs {
        let mut order_rng = seeded(derive_seed_n(config.seed, "finetune-order", epoch as u64));
        let mut drop_rng = seeded(derive_seed_n(config.seed, "finetune-dropout", epoch as u64));
        let mut sum = 0.0;
        let mut count = 0;
        for batch in shuffled_batches(train.len(), config.batch_size, &mut order_rng) {
            let x = train.samples.select_rows(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, &x, Mode::Train, &mut drop_rng)?;
            let logits = model.apply_head(&mut tape, enc.embedding)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            sum += tape.value(loss).item()?;
            count += 1;
            model.store_mut().zero_grad();
            tape.backward_into(loss, model.store_mut())?;
            adadelta_step(model.store_mut(), &mut opt)?;
        }
        trace.epoch_losses.push(sum / count as f64);
        if let Some(v) = val {
            let l = evaluation_loss(model, v)?;
            trace.validation_losses.push(l);
            if best.as_ref().is_none_or(|(b, _, _)| l < *b) {
                best = Some((l, model.clone(), epoch + 1));
            } else if epoch + 1 - best.as_ref().map_or(0, |b| b.2) >= config.patience {
                break;
            }
        }
    }
    if let Some((_, kept, epoch)) = best {
        *model = kept;
        trace.best_epoch = Some(epoch);
    }
    model.store_mut().zero_grad();
    trace.steps = opt.step;
    Ok(trace)
}

/// Mean cross-entropy in evaluation mode.
pub fn evaluation_loss(model: &ModelParams, data: &Dataset) -> Result<f64> {
    let logits = model.outputs(&data.samples)?;
    Ok(softmax_cross_entropy(&logits, &data.labels)?.0)
}

/// Hard labels from class-1 probabilities.
pub fn predict_labels(probabilities: &[f64]) -> Vec<usize> {
    probabilities
        .iter()
        .map(|&p| usize::from(p >= DECISION_THRESHOLD))
        .collect()
}

pub fn accuracy(model: &ModelParams, data: &Dataset) -> Result<f64> {
    let pred = predict_labels(&model.predict_proba(&data.samples)?);
    let hits = pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// One trained classifier of a strategy grid.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub descriptor: StrategyDescriptor,
    pub model: ModelParams,
    pub trace: FinetuneTrace,
    /// Trainable scalars during this strategy's training, head included.
    pub trainable_params: usize,
}

/// Trains one classifier per strategy, preserving input order.
///
/// Gradual stages form a chain: each one continues from the previous gradual
/// stage's classifier. All other strategies start from `encoder` (or from a
/// fresh initialisation for the supervised baseline) and run in parallel.
pub fn run_strategy_grid(
    encoder: &ModelParams,
    train: &Dataset,
    validation: Option<&Dataset>,
    strategies: &[StrategyDescriptor],
    config: &FinetuneConfig,
) -> Result<Vec<StrategyRun>> {
    if strategies.is_empty() {
        return Err(Error::Config("strategy grid is empty".into()));
    }
    let mut names = HashSet::new();
    for s in strategies {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(Error::Config(format!("duplicate strategy name {}", s.name)));
        }
        if s.mask.len() != encoder.num_blocks() {
            return Err(Error::Config(format!(
                "strategy {} has {} mask flags for {} blocks",
                s.name,
                s.mask.len(),
                encoder.num_blocks()
            )));
        }
    }
    let chain: Vec<usize> = (0..strategies.len())
        .filter(|&i| strategies[i].origin == StrategyOrigin::Gradual)
        .collect();
    let mut jobs: Vec<Vec<usize>> = (0..strategies.len())
        .filter(|&i| strategies[i].origin != StrategyOrigin::Gradual)
        .map(|i| vec![i])
        .collect();
    if !chain.is_empty() {
        jobs.push(chain);
    }
    let results: Vec<Vec<(usize, StrategyRun)>> = jobs
        .par_iter()
        .map(|job| {
            let mut done = Vec::with_capacity(job.len());
            let mut previous: Option<ModelParams> = None;
            for &i in job {
                let s = &strategies[i];
                let cfg = s.overrides.apply(config);
                let (model, trace) = match (s.origin, previous.as_ref()) {
                    (StrategyOrigin::SupervisedScratch, _) => {
                        train_supervised_baseline(train, validation, encoder.config(), &cfg)?
                    }
                    (StrategyOrigin::Gradual, Some(prev)) => continue_finetune(prev, &s.mask, train, validation, &cfg)?,
                    _ => finetune(encoder, &s.mask, train, validation, &cfg)?,
                };
                previous = Some(model.clone());
                done.push((
                    i,
                    StrategyRun {
                        descriptor: s.clone(),
                        trainable_params: model.count_trainable(),
                        model,
                        trace,
                    },
                ));
            }
            Ok(done)
        })
        .collect::<Result<_>>()?;
    let mut ordered: Vec<Option<StrategyRun>> = vec![None; strategies.len()];
    for (i, run) in results.into_iter().flatten() {
        ordered[i] = Some(run);
    }
    Ok(ordered.into_iter().map(|r| r.expect("every strategy ran")).collect())
}

pub fn read_strategy_grid(path: &Path) -> Result<Vec<StrategyDescriptor>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grid: Vec<StrategyDescriptor> = serde_json::from_str(&text)?;
    for s in &grid {
        s.validate()?;
    }
    Ok(grid)
}
