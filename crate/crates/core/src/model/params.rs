use super::config::{EncoderConfig, FreezeMask, HeadConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensorcore::{glorot_uniform, softmax_rows, ArrayF, ParamId, ParamStore, Tape, Var};

/// Forward-pass mode: training enables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub(crate) layers: Vec<(ParamId, ParamId)>,
}

impl HeadParams {
    /// (weight, bias) of every dense layer, input side first.
    pub fn layer_ids(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }
}

/// Encoder blocks plus an optional head, all held in one parameter store.
///
/// Encoder parameters always come first in the store so heads can be swapped
/// without touching them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub(crate) config: EncoderConfig,
    pub(crate) store: ParamStore,
    pub(crate) blocks: Vec<BlockParams>,
    pub(crate) head: Option<HeadParams>,
    pub(crate) mask: FreezeMask,
    pub(crate) seed: u64,
}

/// Symbolic outputs of [`ModelParams::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Pooled embedding `[B x D]`.
    pub embedding: Var,
    /// Post-ReLU map of every block, `[B x T_b x C_b]`.
    pub blocks: Vec<Var>,
}

/// Concrete evaluation-mode activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub embedding: ArrayF,
    pub blocks: Vec<ArrayF>,
}

/// Randomly initialised encoder (Glorot-uniform kernels, zero biases), all
/// blocks trainable and no head.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = seeded(derive_seed(seed, "encoder-init"));
    let mut store = ParamStore::new();
    let mut blocks = Vec::with_capacity(config.num_blocks());
    for (b, ((&k, c_in), &c_out)) in config
        .kernel_sizes
        .iter()
        .zip(config.block_inputs())
        .zip(&config.filters)
        .enumerate()
    {
        let kernel = glorot_uniform(&[k, c_in, c_out], k * c_in, k * c_out, &mut rng);
        let kernel = store.add(format!("block{b}.kernel"), kernel);
        let bias = store.add(format!("block{b}.bias"), ArrayF::zeros(&[c_out]));
        blocks.push(BlockParams { kernel, bias });
    }
    Ok(ModelParams {
        config: config.clone(),
        store,
        blocks,
        head: None,
        mask: FreezeMask::all_trainable(config.num_blocks()),
        seed,
    })
}

impl ModelParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn head(&self) -> Option<&HeadParams> {
        self.head.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Kernel and bias of block `b`.
    pub fn block_params(&self, b: usize) -> [ParamId; 2] {
        [self.blocks[b].kernel, self.blocks[b].bias]
    }

    fn encoder_store_len(&self) -> usize {
        2 * self.blocks.len()
    }

    /// Replaces any existing head with a freshly initialised one.
    pub fn attach_head(&mut self, config: &HeadConfig, seed: u64) -> Result<()> {
        config.validate()?;
        self.store.truncate(self.encoder_store_len());
        let mut rng = seeded(derive_seed(seed, "head-init"));
        let mut d_in = self.config.embedding_dim();
        let mut layers = Vec::with_capacity(config.units.len());
        for (i, &units) in config.units.iter().enumerate() {
            let w = glorot_uniform(&[d_in, units], d_in, units, &mut rng);
            let w = self.store.add(format!("head{i}.weight"), w);
            let b = self.store.add(format!("head{i}.bias"), ArrayF::zeros(&[units]));
            layers.push((w, b));
            d_in = units;
        }
        self.head = Some(HeadParams {
            config: config.clone(),
            layers,
        });
        Ok(())
    }

    pub fn detach_head(&mut self) {
        self.store.truncate(self.encoder_store_len());
        self.head = None;
    }

    /// Block `b` becomes trainable iff `mask[b]`; head parameters stay trainable.
    pub fn set_freeze_mask(&mut self, mask: &FreezeMask) -> Result<()> {
        if mask.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "mask has {} flags for {} encoder blocks",
                mask.len(),
                self.blocks.len()
            )));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            self.store.set_trainable(block.kernel, mask.is_trainable(b));
            self.store.set_trainable(block.bias, mask.is_trainable(b));
        }
        self.mask = mask.clone();
        Ok(())
    }

    /// Scalar count of trainable parameters, head included.
    pub fn count_trainable(&self) -> usize {
        self.store.count_trainable()
    }

    pub fn count_total(&self) -> usize {
        self.store.count_total()
    }

    /// Values of block `b`'s parameters, for before/after comparisons.
    pub fn block_values(&self, b: usize) -> [&ArrayF; 2] {
        let [k, bias] = self.block_params(b);
        [self.store.get(k).value(), self.store.get(bias).value()]
    }

    fn check_batch(&self, batch: &ArrayF) -> Result<()> {
        match *batch.shape() {
            [_, t, m] if t == self.config.timesteps && m == self.config.channels => Ok(()),
            ref s => Err(Error::Dimension(format!(
                "batch must be [B x {} x {}], got {s:?}",
                self.config.timesteps, self.config.channels
            ))),
        }
    }

    /// Records the encoder on `tape`.
    pub fn encode(&self, tape: &mut Tape, batch: &ArrayF, mode: Mode, rng: &mut Rng) -> Result<Encoded> {
        self.check_batch(batch)?;
        let mut x = tape.constant(batch.clone());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let k = tape.param(&self.store, block.kernel);
            let b = tape.param(&self.store, block.bias);
            let c = tape.conv1d(x, k, b)?;
            let a = tape.relu(c)?;
            blocks.push(a);
            x = tape.dropout(a, self.config.dropout_rate, mode == Mode::Train, rng)?;
        }
        let embedding = tape.global_max_pool(x)?;
        Ok(Encoded { embedding, blocks })
    }

    /// Records the head on `tape`: dense layers with ReLU between them and a
    /// linear output.
    pub fn apply_head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no head attached".into()))?;
        let mut x = h;
        let last = head.layers.len() - 1;
        for (i, &(w, b)) in head.layers.iter().enumerate() {
            let wv = tape.param(&self.store, w);
            let bv = tape.param(&self.store, b);
            x = tape.dense(x, wv, bv)?;
            if i < last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Evaluation-mode encoder activations, computed in chunks.
    pub fn activations(&self, x: &ArrayF) -> Result<Activations> {
        self.check_batch(x)?;
        let n = x.shape()[0];
        let mut rng = seeded(0);
        let mut emb: Vec<ArrayF> = Vec::new();
        let mut per_block: Vec<Vec<ArrayF>> = vec![Vec::new(); self.blocks.len()];
        for chunk in chunk_indices(n, 256) {
            let xb = x.select_rows(&chunk)?;
            let mut tape = Tape::new();
            let enc = self.encode(&mut tape, &xb, Mode::Eval, &mut rng)?;
            emb.push(tape.value(enc.embedding).clone());
            for (acc, v) in per_block.iter_mut().zip(&enc.blocks) {
                acc.push(tape.value(*v).clone());
            }
        }
        Ok(Activations {
            embedding: concat_rows(&emb, &[n, self.config.embedding_dim()])?,
            blocks: per_block
                .iter()
                .zip(self.config.block_steps())
                .zip(&self.config.filters)
                .map(|((parts, t), &c)| concat_rows(parts, &[n, t, c]))
                .collect::<Result<_>>()?,
        })
    }

    /// Evaluation-mode head outputs `[N x U_last]`.
    pub fn outputs(&self, x: &ArrayF) -> Result<ArrayF> {
        self.check_batch(x)?;
        let n = x.shape()[0];
        let width = self
            .head
            .as_ref()
            .map(|h| h.config.output_dim())
            .ok_or_else(|| Error::Contract("model has no head attached".into()))?;
        let mut rng = seeded(0);
        let mut parts = Vec::new();
        for chunk in chunk_indices(n, 256) {
            let xb = x.select_rows(&chunk)?;
            let mut tape = Tape::new();
            let enc = self.encode(&mut tape, &xb, Mode::Eval, &mut rng)?;
            let out = self.apply_head(&mut tape, enc.embedding)?;
            parts.push(tape.value(out).clone());
        }
        concat_rows(&parts, &[n, width])
    }

    /// Class-1 probability of a classification model.
    pub fn predict_proba(&self, x: &ArrayF) -> Result<Vec<f64>> {
        let logits = self.outputs(x)?;
        let p = softmax_rows(&logits)?;
        Ok(p.data().chunks_exact(2).map(|r| r[1]).collect())
    }
}

fn chunk_indices(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(size)
        .map(<[usize]>::to_vec)
        .collect()
}

fn concat_rows(parts: &[ArrayF], shape: &[usize]) -> Result<ArrayF> {
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    ArrayF::new(shape.to_vec(), data)
}

/// Global max pool over time of a `[N x T x C]` block map, giving `[N x C]`.
pub fn pool_block(map: &ArrayF) -> Result<ArrayF> {
    crate::tensorcore::global_max_pool(map)
}

/// Flattens a `[N x T x C]` block map to `[N x (T*C)]`.
pub fn flatten_block(map: &ArrayF) -> Result<ArrayF> {
    let n = map.shape().first().copied().unwrap_or(0);
    let w = map.row_len();
    map.clone().reshape(vec![n, w])
}
