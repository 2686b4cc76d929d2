//! Analytical parameter and MAC accounting.
//!
//! MACs follow the matmul-centric convention: one fused multiply-add is
//! one operation, and softmax, layer norm, activations, scaling, and
//! bias adds are free. Under that convention a group linear transform
//! costs `d_in * d_out / g` per token, a self-attention core costs
//! `2 * d_o * n^2` per sequence, and incrementally decoding `m` target
//! tokens against `n` source tokens costs `sum_k 2*k*n*d_o` in the
//! source-target core because every step re-runs the whole prefix.
//!
//! [`model_cost`] reports one teacher-forced forward pass at batch 1
//! (encoder over `n` tokens plus decoder over `m` for seq2seq, a causal
//! pass over `n` for language models); that is exactly what the tape's
//! counter measures on the same pass. [`decode_macs`] instead prices the
//! full greedy decode loop, whose cross-attention term is the
//! incremental sum above.

use crate::block::BlockConfig;
use crate::dextra::{group_schedule, width_schedule, LayerSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskKind};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Per-token MACs of one group linear transform.
pub fn glt_macs(d_in: usize, d_out: usize, g: usize) -> Result<u64> {
    if g == 0 || d_in % g != 0 || d_out % g != 0 {
        return Err(Error::invalid(format!(
            "group count {g} must divide both {d_in} and {d_out}"
        )));
    }
    Ok((d_in * d_out / g) as u64)
}

/// MACs of the scaled dot-product core over `n` positions.
pub fn self_attention_macs(n: usize, d_o: usize) -> u64 {
    2 * d_o as u64 * (n as u64).pow(2)
}

/// MACs of the source-target core while incrementally decoding `m`
/// target tokens over `n` source tokens, recomputing the prefix each
/// step: `sum_{k=1}^{m} 2*k*n*d_o`.
pub fn source_target_attention_macs(n: usize, m: usize, d_o: usize) -> u64 {
    n as u64 * d_o as u64 * m as u64 * (m as u64 + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub component: String,
    pub block: Option<usize>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub total_params: u64,
    pub total_macs: u64,
    pub source_tokens: usize,
    pub target_tokens: usize,
}

impl CostReport {
    /// CSV with the frozen column order `component,block,params,macs`
    /// and a trailing totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,block,params,macs\n");
        for e in &self.entries {
            let block = e.block.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", e.component, block, e.params, e.macs);
        }
        let _ = writeln!(out, "total,,{},{}", self.total_params, self.total_macs);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn dextra_layers(cfg: &BlockConfig) -> Result<Vec<LayerSpec>> {
    let dc = cfg.dextra_config();
    dc.validate()?;
    let groups = group_schedule(dc.depth, dc.g_max)?;
    width_schedule(&dc, &groups)
}

/// Parameters of one DExTra unit: per layer, grouped weights plus bias.
pub fn dextra_params(cfg: &BlockConfig) -> Result<u64> {
    let mut total = 0;
    for l in dextra_layers(cfg)? {
        total += glt_macs(l.in_dim, l.out_dim, l.groups)? + l.out_dim as u64;
    }
    Ok(total)
}

/// Per-token MACs of one DExTra unit.
pub fn dextra_macs_per_token(cfg: &BlockConfig) -> Result<u64> {
    let mut total = 0;
    for l in dextra_layers(cfg)? {
        total += glt_macs(l.in_dim, l.out_dim, l.groups)?;
    }
    Ok(total)
}

struct BlockCost {
    dex_params: u64,
    dex_mpt: u64,
    attn_params: u64,
    attn_linear_mpt: u64,
    ffn_params: u64,
    ffn_mpt: u64,
    cross_params: u64,
    d_o: u64,
    d_m: u64,
}

fn block_cost(cfg: &BlockConfig) -> Result<BlockCost> {
    let d_o = cfg.d_o as u64;
    let d_m = cfg.d_m as u64;
    let inner = cfg.ffn_inner()? as u64;
    Ok(BlockCost {
        dex_params: dextra_params(cfg)?,
        dex_mpt: dextra_macs_per_token(cfg)?,
        attn_params: 3 * (d_o * d_o + d_o) + (d_o * d_m + d_m),
        attn_linear_mpt: 3 * d_o * d_o + d_o * d_m,
        ffn_params: 2 * d_m * inner + inner + d_m,
        ffn_mpt: 2 * d_m * inner,
        cross_params: 3 * (d_m * d_o + d_o) + (d_o * d_m + d_m),
        d_o,
        d_m,
    })
}

/// Analytic cost of one teacher-forced forward pass at batch 1.
///
/// Seq2seq models process `n` source and `m` target tokens; language
/// models process `n` tokens and ignore `m` (reported as 0).
pub fn model_cost(cfg: &ModelConfig, n: usize, m: usize) -> Result<CostReport> {
    cfg.validate()?;
    let seq2seq = cfg.task == TaskKind::Seq2seq;
    if n == 0 || (seq2seq && m == 0) {
        return Err(Error::invalid("token counts must be positive"));
    }
    let m = if seq2seq { m } else { 0 };
    let (e, d_m, v) = (cfg.embed_dim as u64, cfg.d_m as u64, cfg.vocab as u64);
    let mut entries = vec![CostEntry {
        component: "embedding".into(),
        block: None,
        params: v * e,
        macs: 0,
    }];
    if cfg.embed_dim != cfg.d_m {
        entries.push(CostEntry {
            component: "embed_proj".into(),
            block: None,
            params: e * d_m + d_m,
            macs: (n + m) as u64 * e * d_m,
        });
    }
    let stack = if seq2seq { "encoder" } else { "block" };
    let blocks = cfg.block_configs()?;
    let costs: Vec<BlockCost> = blocks.iter().map(block_cost).collect::<Result<_>>()?;
    for (b, c) in costs.iter().enumerate() {
        let tokens = n as u64;
        entries.push(CostEntry {
            component: format!("{stack}.dextra"),
            block: Some(b),
            params: c.dex_params,
            macs: tokens * c.dex_mpt,
        });
        entries.push(CostEntry {
            component: format!("{stack}.attention"),
            block: Some(b),
            params: c.attn_params,
            macs: tokens * c.attn_linear_mpt + self_attention_macs(n, c.d_o as usize),
        });
        entries.push(CostEntry {
            component: format!("{stack}.ffn"),
            block: Some(b),
            params: c.ffn_params,
            macs: tokens * c.ffn_mpt,
        });
    }
    if seq2seq {
        for (b, c) in costs.iter().enumerate() {
            let tokens = m as u64;
            entries.push(CostEntry {
                component: "decoder.dextra".into(),
                block: Some(b),
                params: c.dex_params,
                macs: tokens * c.dex_mpt,
            });
            entries.push(CostEntry {
                component: "decoder.attention".into(),
                block: Some(b),
                params: c.attn_params,
                macs: tokens * c.attn_linear_mpt + self_attention_macs(m, c.d_o as usize),
            });
            entries.push(CostEntry {
                component: "decoder.cross_attention".into(),
                block: Some(b),
                params: c.cross_params,
                macs: tokens * (c.d_m * c.d_o) // queries
                    + n as u64 * 2 * c.d_m * c.d_o // keys and values
                    + 2 * n as u64 * tokens * c.d_o // core, teacher-forced
                    + tokens * (c.d_o * c.d_m), // output projection
            });
            entries.push(CostEntry {
                component: "decoder.ffn".into(),
                block: Some(b),
                params: c.ffn_params,
                macs: tokens * c.ffn_mpt,
            });
        }
    }
    let cls_tokens = if seq2seq { m } else { n } as u64;
    entries.push(CostEntry {
        component: "classifier".into(),
        block: None,
        params: d_m * v + v,
        macs: cls_tokens * d_m * v,
    });
    let total_params = entries.iter().map(|e| e.params).sum();
    let total_macs = entries.iter().map(|e| e.macs).sum();
    Ok(CostReport {
        entries,
        total_params,
        total_macs,
        source_tokens: n,
        target_tokens: m,
    })
}

/// Analytic cost of encoding `n` source tokens once and greedily
/// decoding `m` target tokens, recomputing the whole prefix (and the
/// source key/value projections) at every step.
pub fn decode_macs(cfg: &ModelConfig, n: usize, m: usize) -> Result<u64> {
    cfg.validate()?;
    if cfg.task != TaskKind::Seq2seq {
        return Err(Error::invalid("decode cost requires a seq2seq model"));
    }
    if n == 0 || m == 0 {
        return Err(Error::invalid("token counts must be positive"));
    }
    let (mu, nu) = (m as u64, n as u64);
    let sum_k = mu * (mu + 1) / 2;
    let sum_k2 = mu * (mu + 1) * (2 * mu + 1) / 6;
    let (e, d_m, v) = (cfg.embed_dim as u64, cfg.d_m as u64, cfg.vocab as u64);
    let proj_mpt = if cfg.embed_dim != cfg.d_m { e * d_m } else { 0 };
    let mut total = nu * proj_mpt;
    for bc in cfg.block_configs()? {
        let c = block_cost(&bc)?;
        total += nu * (c.dex_mpt + c.attn_linear_mpt + c.ffn_mpt);
        total += self_attention_macs(n, c.d_o as usize);
    }
    total += sum_k * proj_mpt;
    for bc in cfg.block_configs()? {
        let c = block_cost(&bc)?;
        let per_token =
            c.dex_mpt + c.attn_linear_mpt + c.ffn_mpt + c.d_m * c.d_o + c.d_o * c.d_m;
        total += sum_k * per_token;
        total += mu * 2 * c.d_m * c.d_o * nu;
        total += 2 * c.d_o * sum_k2;
        total += source_target_attention_macs(n, m, c.d_o as usize);
    }
    Ok(total + sum_k * d_m * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::Fwd;
    use crate::model::build_model;
    use crate::scaling::ScalingConfig;
    use crate::tape::Tape;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn formula_values_match_known_points() {
        assert_eq!(glt_macs(256, 256, 8).unwrap(), 8192);
        assert_eq!(glt_macs(256, 256, 1).unwrap(), 65536);
        assert!(glt_macs(256, 256, 3).is_err());
        assert_eq!(self_attention_macs(20, 128), 102_400);
        assert_eq!(self_attention_macs(1, 64), 128);
        assert_eq!(source_target_attention_macs(20, 20, 128), 1_075_200);
        assert_eq!(source_target_attention_macs(7, 1, 64), 2 * 7 * 64);
    }

    #[test]
    fn halving_attention_width_halves_the_core() {
        for n in [1usize, 5, 20, 33] {
            for d_m in [64usize, 128, 640] {
                assert_eq!(2 * self_attention_macs(n, d_m / 2), self_attention_macs(n, d_m));
            }
        }
    }

    fn toy_config(task: TaskKind, embed_dim: usize) -> ModelConfig {
        let mut scaling = ScalingConfig::new(2, 3, 2.0);
        scaling.blocks = Some(2);
        let mut cfg = ModelConfig::toy(12, 16, scaling, task);
        cfg.embed_dim = embed_dim;
        cfg.max_positions = 64;
        cfg
    }

    #[test]
    fn analytic_params_match_enumerated_store() {
        for task in [TaskKind::Lm, TaskKind::Seq2seq] {
            for embed in [16usize, 8] {
                let cfg = toy_config(task, embed);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (model, store) = build_model(&cfg, &mut rng).unwrap();
                let report = model_cost(&cfg, 5, 4).unwrap();
                assert_eq!(report.total_params, store.numel());
                assert_eq!(report.total_params, model.param_count());
            }
        }
    }

    #[test]
    fn analytic_macs_match_instrumented_forward() {
        let cfg = toy_config(TaskKind::Seq2seq, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (model, store) = build_model(&cfg, &mut rng).unwrap();
        let (n, m) = (6, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let mut frng = ChaCha8Rng::seed_from_u64(0);
        let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut frng };
        let src: Vec<usize> = (0..n).map(|i| 3 + i % 9).collect();
        let tgt: Vec<usize> = (0..m).map(|i| 3 + (i + 2) % 9).collect();
        model.forward_seq2seq(&mut fw, &src, &tgt, 1, n, m).unwrap();
        let report = model_cost(&cfg, n, m).unwrap();
        assert_eq!(tape.macs(), report.total_macs);

        let lm_cfg = toy_config(TaskKind::Lm, 16);
        let (lm, lm_store) = build_model(&lm_cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = lm_store.bind(&mut tape, false);
        let mut fw = Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut frng };
        lm.forward_lm(&mut fw, &src, 1, n).unwrap();
        let lm_report = model_cost(&lm_cfg, n, 0).unwrap();
        assert_eq!(tape.macs(), lm_report.total_macs);
        assert_eq!(lm_report.target_tokens, 0);
    }

    #[test]
    fn analytic_decode_macs_match_greedy_instrumentation() {
        let cfg = toy_config(TaskKind::Seq2seq, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (model, mut store) = build_model(&cfg, &mut rng).unwrap();
        // A zeroed classifier never emits EOS, so decoding runs exactly
        // max_len steps.
        for i in 0..store.len() {
            if store.name_at(i).starts_with("classifier") {
                let (data, _) = store.data_and_grad_mut(i);
                data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let (n, m) = (5, 4);
        let src: Vec<usize> = (0..n).map(|i| 3 + i % 9).collect();
        let out = model.greedy_decode(&store, &src, m).unwrap();
        assert!(out.truncated);
        assert_eq!(out.macs, decode_macs(&cfg, n, m).unwrap());
    }

    #[test]
    fn report_totals_and_formats_are_consistent() {
        let cfg = toy_config(TaskKind::Seq2seq, 8);
        let report = model_cost(&cfg, 5, 4).unwrap();
        assert_eq!(report.total_params, report.entries.iter().map(|e| e.params).sum::<u64>());
        assert_eq!(report.total_macs, report.entries.iter().map(|e| e.macs).sum::<u64>());
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("component,block,params,macs"));
        assert!(csv.lines().last().unwrap().starts_with("total,,"));
        assert_eq!(csv.lines().count(), report.entries.len() + 2);
        let json = report.to_json().unwrap();
        let back: CostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn random_small_models_match_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let d_m = 8 * rng.gen_range(1..4usize);
            let n_min = rng.gen_range(2..4usize);
            let n_max = n_min + rng.gen_range(0..3usize);
            let mut scaling = ScalingConfig::new(n_min, n_max, rng.gen_range(1..3usize) as f64);
            scaling.blocks = Some(rng.gen_range(1..3usize));
            let task = if trial % 2 == 0 { TaskKind::Lm } else { TaskKind::Seq2seq };
            let mut cfg = ModelConfig::toy(8 + rng.gen_range(0..9usize), d_m, scaling, task);
            if rng.gen_bool(0.5) {
                cfg.embed_dim = d_m / 2;
            }
            cfg.max_positions = 64;
            let (model, store) = build_model(&cfg, &mut rng).unwrap();
            let (n, m) = (rng.gen_range(1..8usize), rng.gen_range(1..8usize));
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let mut frng = ChaCha8Rng::seed_from_u64(0);
            let mut fw =
                Fwd { tape: &mut tape, bound: &bound, training: false, rng: &mut frng };
            let src = vec![3; n];
            match task {
                TaskKind::Lm => {
                    model.forward_lm(&mut fw, &src, 1, n).unwrap();
                }
                TaskKind::Seq2seq => {
                    model.forward_seq2seq(&mut fw, &src, &vec![3; m], 1, n, m).unwrap();
                }
            }
            let report = model_cost(&cfg, n, m).unwrap();
            assert_eq!(tape.macs(), report.total_macs, "trial {trial}");
            assert_eq!(report.total_params, store.numel(), "trial {trial}");
        }
    }
}
