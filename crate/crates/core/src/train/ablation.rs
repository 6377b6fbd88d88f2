use serde::Serialize;

use super::fit::{evaluate, train_model, EpochLog, TrainConfig};
use super::metrics::Metrics;
use super::prepare::PreparedSet;
use crate::error::Result;
use crate::model::{Ablation, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub metrics: Metrics,
    pub epochs: usize,
    pub best_val_loss: Option<f64>,
}

/// Trains and tests each variant with the same seed and data.
pub fn run_ablations(
    variants: &[Ablation],
    config: &ModelConfig,
    tc: &TrainConfig,
    train: &PreparedSet,
    val: &PreparedSet,
    test: &PreparedSet,
    sink: &mut dyn FnMut(Ablation, &EpochLog),
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            log::info!("training variant {variant}");
            let (ckpt, report) = train_model(config, variant, train, val, tc, &mut |e| sink(variant, e))?;
            Ok(AblationRow {
                variant,
                metrics: evaluate(&ckpt.model, test)?,
                epochs: report.epochs_run,
                best_val_loss: report.best_val_loss,
            })
        })
        .collect()
}

/// Aligned plain-text table, one row per variant.
pub fn render_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<14} {:>8} {:>9} {:>8} {:>8} {:>7}\n",
        "variant", "accuracy", "precision", "recall", "f1", "epochs"
    );
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{:<14} {:>8.3} {:>9.3} {:>8.3} {:>8.3} {:>7}\n",
            r.variant.name(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            r.epochs
        ));
    }
    out
}
