use serde::Serialize;

use crate::error::Result;

use super::config::ModelConfig;
use super::model::Ranker;

/// Parameter and per-sample forward cost of a configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: usize,
    pub params_with_tables: usize,
    pub forward_flops_per_sample: usize,
    pub psrg_params: usize,
    pub pcrg_params: usize,
    pub attention_params: usize,
    pub head_params: usize,
    pub table_params: usize,
    pub psrg_flops: usize,
    pub pcrg_flops: usize,
    pub attention_flops: usize,
    pub head_flops: usize,
}

/// Closed-form counts. FLOPs are multiply-adds of every matrix product plus
/// one per elementwise operation; lookups and concatenations are free.
pub fn count_params_flops(config: &ModelConfig) -> Result<CostReport> {
    Ok(Ranker::new(config.clone())?.cost())
}

impl Ranker {
    pub fn cost(&self) -> CostReport {
        let t = self.config().seq_len;
        let psrg_params = self.psrg().map_or(0, |p| p.param_count());
        let pcrg_params = self.pcrg().map_or(0, |p| p.param_count());
        let attention_params = self.attention().param_count();
        let head_params: usize = self.head().iter().map(|l| l.param_count()).sum();
        let psrg_flops = self.psrg().map_or(0, |p| p.flops(t));
        let pcrg_flops = self.pcrg().map_or(0, |p| p.flops());
        let attention_flops = self.attention().flops();
        // Hidden ReLUs plus the output sigmoid.
        let head_flops = self.head().iter().map(|l| l.flops() + l.output).sum::<usize>();
        let params = psrg_params + pcrg_params + attention_params + head_params;
        let table_params = self.encoder().table_params();
        CostReport {
            params,
            params_with_tables: params + table_params,
            forward_flops_per_sample: psrg_flops + pcrg_flops + attention_flops + head_flops,
            psrg_params,
            pcrg_params,
            attention_params,
            head_params,
            table_params,
            psrg_flops,
            pcrg_flops,
            attention_flops,
            head_flops,
        }
    }
}
