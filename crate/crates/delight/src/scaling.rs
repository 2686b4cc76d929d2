//! Block-wise scaling: allocate depth and width across the block stack.
//!
//! Instead of giving every block the same DExTra, the network grows
//! linearly from a shallow, narrow block near the input to a deep, wide
//! block near the output. Block `b` of `B` gets depth
//! `N^b = N_min + (N_max - N_min) * b/(B-1)` (rounded half-up) and width
//! multiplier `m_w^b = m_w + (N_max - N_min) * b / (N_min * (B-1))`
//! (kept exact). Setting `N_min = N_max` recovers uniform scaling, and
//! swapping the two inverts the allocation toward the input.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub n_min: usize,
    pub n_max: usize,
    #[serde(rename = "m_w")]
    pub width_mult: f64,
    /// Number of blocks; defaults to `n_max` when omitted.
    #[serde(default)]
    pub blocks: Option<usize>,
}

impl ScalingConfig {
    pub fn new(n_min: usize, n_max: usize, width_mult: f64) -> Self {
        Self { n_min, n_max, width_mult, blocks: None }
    }

    pub fn blocks(&self) -> usize {
        self.blocks.unwrap_or(self.n_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_min < 2 || self.n_max < 2 {
            return Err(Error::config(format!(
                "block depths must be at least 2, got N_min={} N_max={}",
                self.n_min, self.n_max
            )));
        }
        if self.blocks() == 0 {
            return Err(Error::config("number of blocks must be at least 1"));
        }
        if !self.width_mult.is_finite() || self.width_mult < 1.0 {
            return Err(Error::config(format!(
                "width multiplier must be at least 1, got {}",
                self.width_mult
            )));
        }
        Ok(())
    }
}

/// Depth and width multiplier assigned to one block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockScale {
    pub depth: usize,
    pub width_mult: f64,
}

/// Per-block (depth, width multiplier) schedule.
pub fn blockwise_plan(cfg: &ScalingConfig) -> Result<Vec<BlockScale>> {
    cfg.validate()?;
    let blocks = cfg.blocks();
    let span = cfg.n_max as f64 - cfg.n_min as f64;
    let mut plan = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let frac = if blocks == 1 { 0.0 } else { b as f64 / (blocks - 1) as f64 };
        let depth = (cfg.n_min as f64 + span * frac).round() as usize;
        let width_mult = cfg.width_mult + span * frac / cfg.n_min as f64;
        if width_mult < 1.0 {
            return Err(Error::config(format!(
                "block {b} width multiplier {width_mult} fell below 1; \
                 raise m_w or narrow the depth span"
            )));
        }
        plan.push(BlockScale { depth, width_mult });
    }
    Ok(plan)
}

/// Total layer depth of a block stack: each block contributes its DExTra
/// depth plus 4 (the QKV projections counted as one, the attention output
/// projection, and the two FFN layers). Decoder blocks add 2 more (the
/// parallel source-target projections counted as one, plus their output
/// projection).
pub fn network_depth(plan: &[BlockScale], decoder: bool) -> usize {
    let per_block_extra = if decoder { 6 } else { 4 };
    plan.iter().map(|b| b.depth + per_block_extra).sum()
}

/// Depth of a standard transformer stack with the same block count, for
/// comparison rows.
pub fn baseline_transformer_depth(blocks: usize) -> usize {
    4 * blocks
}
