//! SimCLR-style contrastive pretraining for multivariate time series.
//!
//! Two stochastic views of each sample (global scaling, sign inversion) are
//! embedded by the encoder and projection head, then pulled together by the
//! NT-Xent objective against the other in-batch samples.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batching::shuffled_batches;
use crate::error::{Error, Result};
use crate::model::{build_encoder, EncoderConfig, HeadConfig, Mode, ModelParams};
use crate::rng::{derive_seed_n, seeded, Rng};
use crate::tensorcore::{optimizer_step, ArrayF, Function, OptimizerState, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Standard deviation of the multiplicative factor s ~ N(1, σ²).
    pub scaling_sigma: f64,
    pub inversion_probability: f64,
    /// Draw one factor per channel instead of one per sample.
    pub per_channel_scaling: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            scaling_sigma: 0.1,
            inversion_probability: 0.5,
            per_channel_scaling: false,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scaling_sigma > 0.0 && self.scaling_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "scaling sigma {} must be positive",
                self.scaling_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.inversion_probability) {
            return Err(Error::Config(format!(
                "inversion probability {} outside [0, 1]",
                self.inversion_probability
            )));
        }
        Ok(())
    }
}

/// One augmented view of a `[T x M]` sample.
pub fn augment_view(x: &ArrayF, config: &AugmentationConfig, rng: &mut Rng) -> Result<ArrayF> {
    config.validate()?;
    let [_, m] = *x.shape() else {
        return Err(Error::Dimension(format!(
            "augmentation expects [T x M], got {:?}",
            x.shape()
        )));
    };
    let normal = Normal::new(1.0, config.scaling_sigma)
        .map_err(|e| Error::Config(format!("scaling distribution: {e}")))?;
    let factors: Vec<f64> = if config.per_channel_scaling {
        (0..m).map(|_| normal.sample(rng)).collect()
    } else {
        vec![normal.sample(rng); m]
    };
    let sign = if rng.random::<f64>() < config.inversion_probability {
        -1.0
    } else {
        1.0
    };
    let data = x
        .data()
        .chunks_exact(m)
        .flat_map(|row| row.iter().zip(&factors).map(|(v, s)| sign * s * v))
        .collect();
    ArrayF::new(x.shape().to_vec(), data)
}

/// Two independently augmented views (the positive pair) of one sample.
pub fn augment_pair(x: &ArrayF, config: &AugmentationConfig, rng: &mut Rng) -> Result<(ArrayF, ArrayF)> {
    Ok((augment_view(x, config, rng)?, augment_view(x, config, rng)?))
}

/// Augments a `[B x T x M]` batch into `[2B x T x M]` with the views of
/// sample `i` at rows `2i` and `2i + 1`.
pub fn augment_batch(batch: &ArrayF, config: &AugmentationConfig, rng: &mut Rng) -> Result<ArrayF> {
    let [b, t, m] = *batch.shape() else {
        return Err(Error::Dimension(format!(
            "batch must be [B x T x M], got {:?}",
            batch.shape()
        )));
    };
    let mut data = Vec::with_capacity(2 * batch.len());
    for i in 0..b {
        let sample = ArrayF::new(vec![t, m], batch.row(i).to_vec())?;
        let (va, vb) = augment_pair(&sample, config, rng)?;
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
    }
    ArrayF::new(vec![2 * b, t, m], data)
}

struct NtXentParts {
    unit: Vec<f64>,
    norms: Vec<f64>,
    /// Row-wise softmax over the non-self candidates, zero on the diagonal.
    probs: Vec<f64>,
    loss: f64,
}

fn nt_xent_parts(z: &ArrayF, temperature: f64) -> Result<NtXentParts> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let [n, e] = *z.shape() else {
        return Err(Error::Dimension(format!(
            "NT-Xent expects [2B x E] embeddings, got {:?}",
            z.shape()
        )));
    };
    if n < 2 || n % 2 != 0 {
        return Err(Error::Contract(format!(
            "NT-Xent needs an even number (>= 2) of rows, got {n}"
        )));
    }
    let mut unit = z.data().to_vec();
    let mut norms = Vec::with_capacity(n);
    for (row, chunk) in unit.chunks_exact_mut(e).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm { row });
        }
        chunk.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    let mut probs = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let ui = &unit[i * e..(i + 1) * e];
        let logits: Vec<f64> = (0..n)
            .map(|k| {
                let uk = &unit[k * e..(k + 1) * e];
                ui.iter().zip(uk).map(|(a, b)| a * b).sum::<f64>() / temperature
            })
            .collect();
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| logits[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            let w = (logits[k] - max).exp();
            probs[i * n + k] = w;
            denom += w;
        }
        for k in 0..n {
            probs[i * n + k] /= denom;
        }
        let pos = i ^ 1;
        loss += max + denom.ln() - logits[pos];
    }
    Ok(NtXentParts {
        unit,
        norms,
        probs,
        loss: loss / n as f64,
    })
}

/// Normalized temperature-scaled cross-entropy over `[2B x E]` embeddings
/// whose rows `2i` and `2i + 1` are positive pairs.
///
/// Every row is an anchor; its logits are cosine similarities to the other
/// `2B - 1` rows divided by the temperature, with the partner as target.
pub fn nt_xent(z: &ArrayF, temperature: f64) -> Result<f64> {
    Ok(nt_xent_parts(z, temperature)?.loss)
}

/// Tape primitive for [`nt_xent`].
#[derive(Debug, Clone)]
pub struct NtXent {
    pub temperature: f64,
}

impl Function for NtXent {
    fn name(&self) -> &'static str {
        "nt_xent"
    }

    fn forward(&self, inputs: &[&ArrayF]) -> Result<ArrayF> {
        if inputs.len() != 1 {
            return Err(Error::Contract("nt_xent takes one input".into()));
        }
        Ok(ArrayF::scalar(nt_xent(inputs[0], self.temperature)?))
    }

    fn backward(
        &self,
        inputs: &[&ArrayF],
        _output: &ArrayF,
        grad_output: &ArrayF,
        _needs: &[bool],
    ) -> Vec<Option<ArrayF>> {
        let z = inputs[0];
        let parts = nt_xent_parts(z, self.temperature).expect("validated in forward");
        let (n, e) = (z.shape()[0], z.shape()[1]);
        let scale = grad_output.data()[0] / n as f64;
        // d loss / d logit[i][k] = (p_ik - [k is the partner of i]) / n.
        let mut g = parts.probs;
        for i in 0..n {
            g[i * n + (i ^ 1)] -= 1.0;
        }
        let u = &parts.unit;
        let mut dz = vec![0.0; n * e];
        for i in 0..n {
            let mut du = vec![0.0; e];
            for k in 0..n {
                let w = (g[i * n + k] + g[k * n + i]) * scale / self.temperature;
                if w != 0.0 {
                    for (d, v) in du.iter_mut().zip(&u[k * e..(k + 1) * e]) {
                        *d += w * v;
                    }
                }
            }
            let ui = &u[i * e..(i + 1) * e];
            let proj: f64 = ui.iter().zip(&du).map(|(a, b)| a * b).sum();
            for j in 0..e {
                dz[i * e + j] = (du[j] - ui[j] * proj) / parts.norms[i];
            }
        }
        vec![Some(ArrayF::new(z.shape().to_vec(), dz).expect("finite gradient"))]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub temperature: f64,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    pub projection: HeadConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            base_lr: 0.1,
            temperature: 0.1,
            seed: 0,
            augmentation: AugmentationConfig::default(),
            projection: HeadConfig::projection(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Encoder with the projection head still attached.
    pub model: ModelParams,
    /// Mean NT-Xent loss of every epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// Contrastive pretraining with SGD and a cosine-decayed learning rate.
///
/// Only unlabeled samples `[N x T x M]` are accepted.
pub fn pretrain(samples: &ArrayF, encoder: &EncoderConfig, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.augmentation.validate()?;
    if config.batch_size < 2 {
        return Err(Error::Config("pretraining batch size must be at least 2".into()));
    }
    let n = samples.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Contract(format!(
            "pretraining needs at least 2 samples, got {n}"
        )));
    }
    let mut model = build_encoder(encoder, config.seed)?;
    model.attach_head(&config.projection, config.seed)?;
    // A trailing singleton batch has no negatives and is skipped.
    let batches_per_epoch = n / config.batch_size + usize::from(n % config.batch_size >= 2);
    let total = config.epochs * batches_per_epoch;
    let mut trace = Vec::with_capacity(config.epochs);
    if total == 0 {
        return Ok(PretrainOutcome {
            model,
            loss_trace: trace,
            steps: 0,
        });
    }
    let mut opt = OptimizerState::sgd_cosine(config.base_lr, total)?;
    for epoch in 0..config.epochs {
        let mut order_rng = seeded(derive_seed_n(config.seed, "pretrain-order", epoch as u64));
        let mut aug_rng = seeded(derive_seed_n(config.seed, "pretrain-augment", epoch as u64));
        let mut drop_rng = seeded(derive_seed_n(config.seed, "pretrain-dropout", epoch as u64));
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in shuffled_batches(n, config.batch_size, &mut order_rng) {
            if batch.len() < 2 {
                continue;
            }
            let x = samples.select_rows(&batch)?;
            let views = augment_batch(&x, &config.augmentation, &mut aug_rng)?;
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, &views, Mode::Train, &mut drop_rng)?;
            let z = model.apply_head(&mut tape, enc.embedding)?;
            let loss = tape.apply(
                Box::new(NtXent {
                    temperature: config.temperature,
                }),
                &[z],
            )?;
            sum += tape.value(loss).item()?;
            count += 1;
            model.store_mut().zero_grad();
            tape.backward_into(loss, model.store_mut())?;
            optimizer_step(model.store_mut(), &mut opt)?;
        }
        trace.push(sum / count.max(1) as f64);
    }
    model.store_mut().zero_grad();
    Ok(PretrainOutcome {
        model,
        loss_trace: trace,
        steps: opt.step,
    })
}

/// Writes `epoch,loss` rows (epochs numbered from 1).
pub fn write_loss_trace_csv(path: &Path, trace: &[f64], config_hash: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = config_hash {
        out.push_str(&format!("# config_hash={h}\n"));
    }
    out.push_str("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
