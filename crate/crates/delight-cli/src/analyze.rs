//! Cost analysis report: block-wise plan, per-layer DExTra specs, the
//! component cost breakdown, and a depth summary with the baseline
//! transformer comparison.

use delight::accounting::{decode_macs, model_cost, CostReport};
use delight::dextra::{group_schedule, width_schedule};
use delight::error::Result;
use delight::model::{ModelConfig, TaskKind};
use delight::scaling::{baseline_transformer_depth, blockwise_plan, network_depth};
use serde::Serialize;

#[derive(Serialize)]
pub struct PlanRow {
    pub block: usize,
    pub depth: usize,
    pub width_mult: f64,
    pub params: u64,
    pub macs: u64,
}

#[derive(Serialize)]
pub struct LayerRow {
    pub block: usize,
    pub layer: usize,
    pub groups: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub mixer: bool,
}

#[derive(Serialize)]
pub struct SummaryRow {
    pub key: String,
    pub value: String,
}

#[derive(Serialize)]
pub struct AnalyzeReport {
    pub plan: Vec<PlanRow>,
    pub layers: Vec<LayerRow>,
    pub cost: CostReport,
    pub summary: Vec<SummaryRow>,
}

/// Price a configuration at `n` source and `m` target tokens. Per-block
/// rows aggregate every component the block owns (decoder rows included
/// for seq2seq models).
pub fn analyze(cfg: &ModelConfig, n: usize, m: usize) -> Result<AnalyzeReport> {
    let cost = model_cost(cfg, n, m)?;
    let plan_specs = blockwise_plan(&cfg.scaling)?;
    let plan = plan_specs
        .iter()
        .enumerate()
        .map(|(b, spec)| {
            let owned = cost.entries.iter().filter(|e| e.block == Some(b));
            PlanRow {
                block: b,
                depth: spec.depth,
                width_mult: spec.width_mult,
                params: owned.clone().map(|e| e.params).sum(),
                macs: owned.map(|e| e.macs).sum(),
            }
        })
        .collect();

    let mut layers = Vec::new();
    for (b, bc) in cfg.block_configs()?.iter().enumerate() {
        let dc = bc.dextra_config();
        let groups = group_schedule(dc.depth, dc.g_max)?;
        for spec in width_schedule(&dc, &groups)? {
            layers.push(LayerRow {
                block: b,
                layer: spec.index,
                groups: spec.groups,
                d_in: spec.in_dim,
                d_out: spec.out_dim,
                mixer: spec.mixer,
            });
        }
    }

    let decoder = cfg.task == TaskKind::Seq2seq;
    let mut summary = vec![
        ("task", if decoder { "seq2seq" } else { "lm" }.to_string()),
        ("vocab", cfg.vocab.to_string()),
        ("embed_dim", cfg.embed_dim.to_string()),
        ("d_m", cfg.d_m.to_string()),
        ("d_o", cfg.attention_dim().to_string()),
        ("blocks", cfg.scaling.blocks().to_string()),
        ("source_tokens", cost.source_tokens.to_string()),
        ("target_tokens", cost.target_tokens.to_string()),
    ];
    if decoder {
        summary.push(("encoder_depth", network_depth(&plan_specs, false).to_string()));
        summary.push(("decoder_depth", network_depth(&plan_specs, true).to_string()));
    } else {
        summary.push(("network_depth", network_depth(&plan_specs, false).to_string()));
    }
    summary.push((
        "baseline_transformer_depth",
        baseline_transformer_depth(cfg.scaling.blocks()).to_string(),
    ));
    summary.push(("total_params", cost.total_params.to_string()));
    summary.push(("total_macs", cost.total_macs.to_string()));
    if decoder {
        summary.push(("decode_macs", decode_macs(cfg, n, m)?.to_string()));
    }
    let summary = summary
        .into_iter()
        .map(|(key, value)| SummaryRow { key: key.to_string(), value })
        .collect();

    Ok(AnalyzeReport { plan, layers, cost, summary })
}

impl AnalyzeReport {
    /// Sectioned CSV; section headers are `#`-prefixed comment lines and
    /// column orders are frozen.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# plan\nblock,depth,width_mult,params,macs\n");
        for r in &self.plan {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.block, r.depth, r.width_mult, r.params, r.macs
            ));
        }
        out.push_str("# layers\nblock,layer,groups,d_in,d_out,mixer\n");
        for r in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.block, r.layer, r.groups, r.d_in, r.d_out, r.mixer
            ));
        }
        out.push_str("# cost\n");
        out.push_str(&self.cost.to_csv());
        out.push_str("# summary\nkey,value\n");
        for r in &self.summary {
            out.push_str(&format!("{},{}\n", r.key, r.value));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    #[cfg(test)]
    fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|r| r.key == key).map(|r| r.value.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use delight::scaling::ScalingConfig;
    use delight::model::TaskKind;

    fn mt_config() -> ModelConfig {
        let scaling = ScalingConfig::new(4, 8, 2.0);
        let mut cfg = ModelConfig::toy(24, 64, scaling, TaskKind::Seq2seq);
        cfg.embed_dim = 32;
        cfg
    }

    #[test]
    fn plan_endpoints_match_the_scaling_rule() {
        let report = analyze(&mt_config(), 20, 20).unwrap();
        assert_eq!(report.plan.len(), 8);
        assert_eq!(report.plan[0].depth, 4);
        assert_eq!(report.plan[7].depth, 8);
        assert_eq!(report.plan[7].width_mult, 3.0);
        assert_eq!(report.summary_value("encoder_depth"), Some("80"));
        assert_eq!(report.summary_value("baseline_transformer_depth"), Some("32"));
    }

    #[test]
    fn block_rows_sum_to_the_cost_total() {
        let report = analyze(&mt_config(), 20, 20).unwrap();
        let block_params: u64 = report.plan.iter().map(|r| r.params).sum();
        let shared: u64 = report
            .cost
            .entries
            .iter()
            .filter(|e| e.block.is_none())
            .map(|e| e.params)
            .sum();
        assert_eq!(block_params + shared, report.cost.total_params);
        let block_macs: u64 = report.plan.iter().map(|r| r.macs).sum();
        let shared_macs: u64 = report
            .cost
            .entries
            .iter()
            .filter(|e| e.block.is_none())
            .map(|e| e.macs)
            .sum();
        assert_eq!(block_macs + shared_macs, report.cost.total_macs);
    }

    #[test]
    fn layer_rows_cover_every_dextra_layer() {
        let report = analyze(&mt_config(), 4, 4).unwrap();
        let expected: usize = report.plan.iter().map(|r| r.depth).sum();
        assert_eq!(report.layers.len(), expected);
        assert!(report.layers.iter().all(|l| l.layer >= 1));
        assert!(report.layers.iter().filter(|l| l.layer == 1).all(|l| !l.mixer));
    }

    #[test]
    fn csv_sections_are_ordered_and_complete() {
        let report = analyze(&mt_config(), 4, 4).unwrap();
        let csv = report.to_csv();
        let plan_at = csv.find("# plan").unwrap();
        let layers_at = csv.find("# layers").unwrap();
        let cost_at = csv.find("# cost").unwrap();
        let summary_at = csv.find("# summary").unwrap();
        assert!(plan_at < layers_at && layers_at < cost_at && cost_at < summary_at);
        assert!(csv.contains("component,block,params,macs"));
        assert!(csv.contains("decode_macs,"));
    }

    #[test]
    fn lm_report_has_single_depth_row() {
        let scaling = ScalingConfig::new(2, 4, 2.0);
        let cfg = ModelConfig::toy(16, 64, scaling, TaskKind::Lm);
        let report = analyze(&cfg, 16, 0).unwrap();
        assert!(report.summary_value("network_depth").is_some());
        assert!(report.summary_value("decoder_depth").is_none());
        assert!(report.summary_value("decode_macs").is_none());
        assert_eq!(report.summary_value("target_tokens"), Some("0"));
    }
}
