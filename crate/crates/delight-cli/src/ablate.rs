//! Directional ablation sweeps at toy scale: feature shuffling on and
//! off, the FFN reduction factor, and uniform versus block-wise scaling
//! at a matched parameter budget.

use crate::config::RunConfig;
use crate::run::run_training;
use delight::accounting::model_cost;
use delight::error::{Error, Result};
use delight::scaling::ScalingConfig;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Shuffle,
    R,
    Scaling,
}

#[derive(Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: u64,
    pub macs: u64,
    pub final_loss: f64,
    pub validation_loss: f64,
}

#[derive(Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Frozen column order `variant,params,macs,final_loss,validation_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,params,macs,final_loss,validation_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant, r.params, r.macs, r.final_loss, r.validation_loss
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn total_params(cfg: &RunConfig) -> Result<u64> {
    let run = cfg.resolve()?;
    Ok(model_cost(&run.model, 1, 1)?.total_params)
}

fn run_variant(cfg: &RunConfig, variant: String) -> Result<AblationRow> {
    let run = cfg.resolve()?;
    let cost = model_cost(&run.model, 20, 20)?;
    log::info!("ablation variant {variant}: {} parameters", cost.total_params);
    let outcome = run_training(&run, None)?;
    Ok(AblationRow {
        variant,
        params: cost.total_params,
        macs: cost.total_macs,
        final_loss: outcome.final_loss,
        validation_loss: outcome.eval.validation_loss,
    })
}

/// Find a uniform plan whose total parameter count lands within 5% of
/// the base configuration's, scanning the width multiplier at the
/// midpoint depth.
pub fn matched_uniform(base: &RunConfig) -> Result<RunConfig> {
    let target = total_params(base)? as f64;
    let s = &base.scaling;
    let depth = ((s.n_min + s.n_max) as f64 / 2.0).round() as usize;
    let blocks = Some(s.blocks());
    let mut best: Option<(f64, RunConfig)> = None;
    for i in 0..=80 {
        let m_w = 1.0 + 0.05 * i as f64;
        let mut cand = base.clone();
        cand.scaling = ScalingConfig { n_min: depth, n_max: depth, width_mult: m_w, blocks };
        let Ok(params) = total_params(&cand) else { continue };
        let rel = (params as f64 - target).abs() / target;
        if best.as_ref().map_or(true, |(b, _)| rel < *b) {
            best = Some((rel, cand));
        }
    }
    let (rel, cand) =
        best.ok_or_else(|| Error::Config("no valid uniform candidate found".into()))?;
    if rel > 0.05 {
        return Err(Error::Verification(format!(
            "no uniform plan within 5% of {target} parameters (best off by {:.1}%)",
            rel * 100.0
        )));
    }
    Ok(cand)
}

/// Run every variant along one axis with the base task, seed, and step
/// budget, returning a comparison table.
pub fn ablate(base: &RunConfig, axis: Axis) -> Result<AblationTable> {
    let rows = match axis {
        Axis::Shuffle => {
            let mut on = base.clone();
            on.model.shuffle = true;
            let mut off = base.clone();
            off.model.shuffle = false;
            vec![
                run_variant(&on, "shuffle_on".into())?,
                run_variant(&off, "shuffle_off".into())?,
            ]
        }
        Axis::R => [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&r| {
                let mut cand = base.clone();
                cand.model.ffn_reduction = r;
                run_variant(&cand, format!("r{r}"))
            })
            .collect::<Result<_>>()?,
        Axis::Scaling => {
            let uniform = matched_uniform(base)?;
            let u = &uniform.scaling;
            vec![
                run_variant(
                    base,
                    format!("blockwise_n{}-{}", base.scaling.n_min, base.scaling.n_max),
                )?,
                run_variant(&uniform, format!("uniform_n{}_mw{:.2}", u.n_min, u.width_mult))?,
            ]
        }
    };
    let axis = match axis {
        Axis::Shuffle => "shuffle",
        Axis::R => "r",
        Axis::Scaling => "scaling",
    };
    Ok(AblationTable { axis: axis.to_string(), rows })
}
