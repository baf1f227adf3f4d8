//! Analytic training-compute accounting.
//!
//! Two counting modes. `Param6wn` charges `6·W·L` per training sequence of
//! length `L`. `Full` counts forward matmul FLOPs per layer (projections,
//! attention scores and values, MLP) plus the output head, and charges three
//! forwards per training sequence for forward plus backward.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::curriculum::{PatchSchedule, Rational};
use crate::error::{NppError, Result};
use crate::transformer::{MlpKind, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    Param6wn,
    Full,
}

impl fmt::Display for CountMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountMode::Param6wn => "param6wn",
            CountMode::Full => "full",
        })
    }
}

impl FromStr for CountMode {
    type Err = NppError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "param6wn" => Ok(CountMode::Param6wn),
            "full" => Ok(CountMode::Full),
            _ => Err(NppError::Config(format!("unknown count mode {s:?} (param6wn|full)"))),
        }
    }
}

/// Sequence length at patch side `p`: `H·W/p²`, plus one for the condition token.
pub fn seq_len_at_level(grid: (usize, usize), side: usize, with_condition: bool) -> Result<usize> {
    let (h, w) = grid;
    if side == 0 || h % side != 0 || w % side != 0 {
        return Err(NppError::PatchSpec(format!(
            "patch side {side} does not divide grid {h}x{w}"
        )));
    }
    Ok(h * w / (side * side) + usize::from(with_condition))
}

pub fn train_flops_6wn(params: u128, seq_len: u128, steps: u128) -> u128 {
    6 * params * seq_len * steps
}

/// Forward FLOPs for one sequence of length `L`, two per multiply-add:
///
/// per layer `2·L·d·4d` (q, k, v, o) `+ 2·2·L²·d` (scores and values)
/// `+ m·2·L·d·h` (MLP, `m` = 3 for SwiGLU, 2 for plain), then `2·L·d·V` for the head.
pub fn forward_flops_full(config: &ModelConfig, seq_len: usize) -> u128 {
    let (l, d, h, v) = (
        seq_len as u128,
        config.d_model as u128,
        config.mlp_hidden() as u128,
        config.vocab_size as u128,
    );
    let mlp_mats = match config.mlp {
        MlpKind::Swiglu => 3,
        MlpKind::Plain => 2,
    };
    let per_layer = 2 * l * d * 4 * d + 4 * l * l * d + mlp_mats * 2 * l * d * h;
    config.n_layers as u128 * per_layer + 2 * l * d * v
}

/// Forward plus backward, taken as three forwards.
pub fn train_flops_full(config: &ModelConfig, seq_len: usize, steps: u64) -> u128 {
    3 * forward_flops_full(config, seq_len) * steps as u128
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentCost {
    pub side: usize,
    pub seq_len: usize,
    pub steps: u64,
    pub flops: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub mode: CountMode,
    pub with_condition: bool,
    pub segments: Vec<SegmentCost>,
    pub total: u128,
    /// Same step count, every step at patch side 1.
    pub baseline: u128,
    #[serde(skip)]
    pub exact_ratio: Rational,
    pub ratio: f64,
}

fn sequence_flops(config: &ModelConfig, mode: CountMode, seq_len: usize, steps: u64) -> u128 {
    match mode {
        CountMode::Param6wn => train_flops_6wn(config.param_count() as u128, seq_len as u128, steps as u128),
        CountMode::Full => train_flops_full(config, seq_len, steps),
    }
}

/// Per-sequence cost of a whole schedule against a side-1 baseline of equal length.
pub fn schedule_cost(
    config: &ModelConfig,
    grid: (usize, usize),
    schedule: &PatchSchedule,
    mode: CountMode,
    with_condition: bool,
) -> Result<CostReport> {
    config.validate()?;
    let segments = schedule
        .segments()
        .iter()
        .map(|s| {
            let seq_len = seq_len_at_level(grid, s.side, with_condition)?;
            Ok(SegmentCost {
                side: s.side,
                seq_len,
                steps: s.steps(),
                flops: sequence_flops(config, mode, seq_len, s.steps()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total: u128 = segments.iter().map(|s| s.flops).sum();
    let baseline = sequence_flops(
        config,
        mode,
        seq_len_at_level(grid, 1, with_condition)?,
        schedule.total_steps(),
    );
    let exact_ratio = Ratio::new(total as i128, baseline as i128);
    Ok(CostReport {
        mode,
        with_condition,
        segments,
        total,
        baseline,
        exact_ratio,
        ratio: total as f64 / baseline as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    B,
    L,
    XL,
    XXL,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::B, Preset::L, Preset::XL, Preset::XXL];

    /// Nominal parameter count.
    pub fn nominal_params(self) -> u64 {
        match self {
            Preset::B => 111_000_000,
            Preset::L => 343_000_000,
            Preset::XL => 775_000_000,
            Preset::XXL => 1_400_000_000,
        }
    }

    /// Guessed `(layers, width, heads)` split. Not authoritative; override freely.
    pub fn guess_shape(self) -> (usize, usize, usize) {
        match self {
            Preset::B => (12, 768, 12),
            Preset::L => (24, 1024, 16),
            Preset::XL => (36, 1280, 20),
            Preset::XXL => (48, 1536, 24),
        }
    }

    pub fn guess_config(self, vocab: usize, grid: (usize, usize), num_classes: usize) -> ModelConfig {
        let (layers, width, heads) = self.guess_shape();
        ModelConfig::new(layers, width, heads, vocab, grid, num_classes)
    }
}

impl FromStr for Preset {
    type Err = NppError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B" => Ok(Preset::B),
            "L" => Ok(Preset::L),
            "XL" => Ok(Preset::XL),
            "XXL" => Ok(Preset::XXL),
            _ => Err(NppError::Config(format!("unknown preset {s:?} (B|L|XL|XXL)"))),
        }
    }
}
