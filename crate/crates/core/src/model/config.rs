use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolutional encoder shape: one (conv → ReLU → dropout) block per entry
/// of `kernel_sizes`/`filters`, followed by global max pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kernel_sizes: Vec<usize>,
    pub filters: Vec<usize>,
    pub dropout_rate: f64,
    pub timesteps: usize,
    pub channels: usize,
}

impl EncoderConfig {
    /// Three blocks with kernels 24/16/8 and 32/64/96 filters, dropout 0.1.
    pub fn standard(timesteps: usize, channels: usize) -> Self {
        Self {
            kernel_sizes: vec![24, 16, 8],
            filters: vec![32, 64, 96],
            dropout_rate: 0.1,
            timesteps,
            channels,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.filters.len()
    }

    /// Width of the pooled embedding.
    pub fn embedding_dim(&self) -> usize {
        self.filters.last().copied().unwrap_or(0)
    }

    /// Input channel count of every block.
    pub fn block_inputs(&self) -> Vec<usize> {
        std::iter::once(self.channels)
            .chain(self.filters.iter().copied())
            .take(self.num_blocks())
            .collect()
    }

    /// Sequence length after each block's valid convolution.
    pub fn block_steps(&self) -> Vec<usize> {
        let mut t = self.timesteps;
        self.kernel_sizes
            .iter()
            .map(|k| {
                t = t + 1 - k;
                t
            })
            .collect()
    }

    /// Closed-form parameter count of the encoder: Σ K·C_in·C_out + C_out.
    pub fn parameter_count(&self) -> usize {
        self.kernel_sizes
            .iter()
            .zip(self.block_inputs())
            .zip(&self.filters)
            .map(|((k, c_in), c_out)| k * c_in * c_out + c_out)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_blocks();
        if l == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.kernel_sizes.len() != l {
            return Err(Error::Config(format!(
                "{} kernel sizes for {l} filter entries",
                self.kernel_sizes.len()
            )));
        }
        if self.kernel_sizes.contains(&0) || self.filters.contains(&0) {
            return Err(Error::Config("kernel sizes and filters must be positive".into()));
        }
        if self.timesteps == 0 || self.channels == 0 {
            return Err(Error::Config("input shape must be non-empty".into()));
        }
        let shrink: usize = self.kernel_sizes.iter().map(|k| k - 1).sum();
        if shrink >= self.timesteps {
            return Err(Error::Config(format!(
                "kernels {:?} shrink the sequence by {shrink}, input has {} steps",
                self.kernel_sizes, self.timesteps
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Projection,
    Classification,
}

/// Fully connected head: ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub units: Vec<usize>,
}

impl HeadConfig {
    /// 256 → 128 → 50 projection head for the contrastive objective.
    pub fn projection() -> Self {
        Self {
            kind: HeadKind::Projection,
            units: vec![256, 128, 50],
        }
    }

    /// 128 → 2 classification head.
    pub fn classification() -> Self {
        Self {
            kind: HeadKind::Classification,
            units: vec![128, 2],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.units.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() || self.units.contains(&0) {
            return Err(Error::Config(format!("invalid head units {:?}", self.units)));
        }
        if self.kind == HeadKind::Classification && self.output_dim() != 2 {
            return Err(Error::Config(format!(
                "classification head must end in 2 units, got {:?}",
                self.units
            )));
        }
        Ok(())
    }
}

/// Per-block training status: `true` = trainable, `false` = frozen.
///
/// Serialized as a list of 0/1 flags, displayed with ● for trainable and ○
/// for frozen blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FreezeMask(Vec<bool>);

impl FreezeMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Config(format!("mask flag {b} is not 0/1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn all_frozen(blocks: usize) -> Self {
        Self(vec![false; blocks])
    }

    pub fn all_trainable(blocks: usize) -> Self {
        Self(vec![true; blocks])
    }

    /// Parses "011", "0,1,1" or "(0,1,1)".
    pub fn parse(s: &str) -> Result<Self> {
        let bits: Vec<u8> = s
            .chars()
            .filter(|c| !matches!(c, ',' | '(' | ')' | ' '))
            .map(|c| match c {
                '0' | '○' => Ok(0),
                '1' | '●' => Ok(1),
                _ => Err(Error::Config(format!("invalid mask {s:?}"))),
            })
            .collect::<Result<_>>()?;
        if bits.is_empty() {
            return Err(Error::Config("empty mask".into()));
        }
        Self::from_bits(&bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn is_trainable(&self, block: usize) -> bool {
        self.0[block]
    }

    pub fn trainable_blocks(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn frozen_blocks(&self) -> usize {
        self.len() - self.trainable_blocks()
    }

    pub fn bits(&self) -> Vec<u8> {
        self.0.iter().map(|&f| u8::from(f)).collect()
    }

    /// True when every trainable block here is trainable in `other` too.
    pub fn is_subset_of(&self, other: &FreezeMask) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| !a || *b)
    }

    /// Glyph form such as `1 (●○●)`: frozen-block count, then ● trainable / ○ frozen.
    pub fn glyphs(&self) -> String {
        let g: String = self.0.iter().map(|&f| if f { '●' } else { '○' }).collect();
        format!("{} ({g})", self.frozen_blocks())
    }
}

impl fmt::Display for FreezeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: Vec<String> = self.bits().iter().map(u8::to_string).collect();
        write!(f, "({})", bits.join(","))
    }
}

impl Serialize for FreezeMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.bits().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FreezeMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let bits = Vec::<u8>::deserialize(d)?;
        FreezeMask::from_bits(&bits).map_err(serde::de::Error::custom)
    }
}
