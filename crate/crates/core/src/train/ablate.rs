//! One short pre-training run per setting of a single hyperparameter.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::config::TrainConfig;
use super::loops::{self, PretrainRow};
use crate::data::LoadedSample;
use crate::error::{Error, Result};
use crate::hal::{RowOp, Scoring};

pub const MIX_GRID: [f64; 5] = [0.2, 0.4, 0.5, 0.6, 0.8];
pub const FUSION_GRID: [usize; 5] = [1, 2, 3, 4, 5];
pub const ABLATION_HEADER: &str = "sweep\tsetting\tsteps\thal_global\thal_local\tstm\tlm\ttotal\tretrieval_top1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Alpha,
    Beta,
    Fusion,
    RowOp,
    Scoring,
}

impl Sweep {
    pub const ALL: [Sweep; 5] = [Sweep::Alpha, Sweep::Beta, Sweep::Fusion, Sweep::RowOp, Sweep::Scoring];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::Alpha => "alpha",
            Sweep::Beta => "beta",
            Sweep::Fusion => "fusion",
            Sweep::RowOp => "rowop",
            Sweep::Scoring => "scoring",
        }
    }

    /// Config key and the values it takes.
    pub fn settings(self) -> (&'static str, Vec<String>) {
        match self {
            Sweep::Alpha => ("alpha", MIX_GRID.iter().map(f64::to_string).collect()),
            Sweep::Beta => ("beta", MIX_GRID.iter().map(f64::to_string).collect()),
            Sweep::Fusion => ("fusion_layers", FUSION_GRID.iter().map(usize::to_string).collect()),
            Sweep::RowOp => ("row_op", RowOp::ALL.iter().map(|r| r.name().to_string()).collect()),
            Sweep::Scoring => ("scoring", Scoring::ALL.iter().map(|s| s.name().to_string()).collect()),
        }
    }
}

impl FromStr for Sweep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Sweep::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep {s:?}")))
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub sweep: Sweep,
    pub setting: String,
    pub steps: usize,
    pub last: PretrainRow,
    pub retrieval_top1: f64,
}

impl AblationRow {
    pub fn to_tsv(&self) -> String {
        let l = &self.last;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.sweep, self.setting, self.steps, l.hal_global, l.hal_local, l.stm, l.lm, l.total, self.retrieval_top1
        )
    }
}

/// Every setting is validated before any run starts.
pub fn ablate(base: &TrainConfig, sweep: Sweep, train: &[LoadedSample], glosses: &[String]) -> Result<Vec<AblationRow>> {
    let (key, values) = sweep.settings();
    let cfgs = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(key, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    cfgs.par_iter()
        .zip(values.par_iter())
        .map(|(cfg, v)| {
            let run = loops::pretrain(cfg, train, glosses, None, false)?;
            let ck = &run.checkpoint;
            let pairs = loops::prepare_pairs(train, &ck.vocab, cfg)?;
            let n = pairs.len().min(cfg.batch_size);
            let batch: Vec<_> = pairs[..n].iter().collect();
            let retrieval_top1 = loops::retrieval_top1(&ck.params, &cfg.model_config(ck.vocab.len()), &batch)?;
            let last = run.trace.last().cloned().ok_or_else(|| Error::invalid("ablation run took no steps"))?;
            Ok(AblationRow { sweep, setting: v.clone(), steps: run.trace.len(), last, retrieval_top1 })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    loops::trace_text(ABLATION_HEADER, rows, AblationRow::to_tsv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(Sweep::Alpha.settings().1, vec!["0.2", "0.4", "0.5", "0.6", "0.8"]);
        assert_eq!(Sweep::Fusion.settings().1.len(), 5);
        assert_eq!(Sweep::RowOp.settings().1.len(), 4);
        assert_eq!(Sweep::Scoring.settings().1.len(), 5);
        assert_eq!("rowop".parse::<Sweep>().unwrap(), Sweep::RowOp);
        assert!("gamma".parse::<Sweep>().is_err());
    }
}
