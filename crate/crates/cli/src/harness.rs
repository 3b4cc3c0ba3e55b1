//! Trains one model per label-ordering strategy on the same corpus and
//! compares their cumulative-gain curves per code kind.

use std::path::Path;

use ltricd_core::corpus::{CorpusSplits, Split};
use ltricd_core::icd::CodeKind;
use ltricd_core::metrics::cg_curve;
use ltricd_core::ordering::OrderingStrategy;
use ltricd_core::ranking::{merge, RankedPrediction};
use ltricd_core::training::{Trainer, TrainingData};
use serde::Serialize;

use crate::commands::{create_dir, predict_split, write_file};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::evaluate::pairs_for;

pub const ORDERING_CG: &str = "ordering_cg.csv";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CgRow {
    pub strategy: OrderingStrategy,
    /// `generative`, `classifier` or `merged`.
    pub system: &'static str,
    pub kind: CodeKind,
    pub k: usize,
    pub cg: f64,
}

pub fn rows_to_csv(rows: &[CgRow]) -> String {
    let mut out = String::from("strategy,system,kind,k,cg\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.6}\n", r.strategy.name(), r.system, r.kind, r.k, r.cg));
    }
    out
}

/// CG_k for one strategy, system and kind, in k order.
pub fn curve(rows: &[CgRow], strategy: OrderingStrategy, system: &str, kind: CodeKind) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.strategy == strategy && r.system == system && r.kind == kind)
        .map(|r| r.cg)
        .collect()
}

/// Test-split CG curves for k up to the largest configured K. Training
/// runs phase 1, then phase 2 when it has epochs, for every strategy.
pub fn compare_orderings(cfg: &RunConfig, splits: &CorpusSplits) -> Result<Vec<CgRow>, CliError> {
    cfg.validate()?;
    let max_k = cfg.k_list.iter().copied().max().unwrap_or(1);
    let rules = cfg.rules()?;
    let test = splits.get(Split::Test);
    let mut rows = Vec::new();
    for strategy in OrderingStrategy::ALL {
        let data = TrainingData::build(splits, &rules, cfg.min_token_count, cfg.model.max_input_len, strategy);
        let tcfg = cfg.train_config();
        let mut trainer = Trainer::new(tcfg.clone(), &data)?;
        let model = trainer.init_model(cfg.model.base())?;
        let mut ck = trainer.phase1(model)?;
        if tcfg.epochs_phase2 > 0 {
            ck = trainer.phase2(ck.model()?)?;
        }
        log::info!("{}: selected epoch {} (micro-F1 {:.4})", strategy.name(), ck.epoch, ck.best_micro_f1);
        let (_, preds) = predict_split(cfg, &ck, splits, Split::Test)?;
        let systems: [(&'static str, Vec<RankedPrediction>); 3] = [
            ("generative", preds.iter().map(|p| p.generative.clone()).collect()),
            ("classifier", preds.iter().map(|p| p.classifier.clone()).collect()),
            (
                "merged",
                preds
                    .iter()
                    .map(|p| RankedPrediction::new(p.classifier.id.clone(), merge(&p.generative.codes, &p.classifier.codes)))
                    .collect(),
            ),
        ];
        for (system, list) in &systems {
            for kind in CodeKind::ALL {
                let pairs = pairs_for(list, test, Some(kind))?;
                rows.extend(cg_curve(&pairs, max_k).into_iter().map(|(k, cg)| CgRow {
                    strategy,
                    system,
                    kind,
                    k,
                    cg,
                }));
            }
        }
    }
    Ok(rows)
}

pub fn compare_orderings_cmd(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<Vec<CgRow>, CliError> {
    let splits = CorpusSplits::load_dir(corpus)?;
    let rows = compare_orderings(cfg, &splits)?;
    create_dir(out)?;
    write_file(&out.join(ORDERING_CG), rows_to_csv(&rows))?;
    Ok(rows)
}
