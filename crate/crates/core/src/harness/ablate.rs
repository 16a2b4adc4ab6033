//! Training and scoring several generator variants on the same data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AblationVariant, TrainConfig};
use super::evaluate::evaluate;
use super::train::train;
use crate::datagen::ImageTriplet;
use crate::error::{Error, Result};
use crate::metrics::{metric_fields, MetricReport, METRIC_COLUMNS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub masked_psnr: Option<f64>,
    pub dice: Option<f64>,
    /// `ok`, or the reason the run failed.
    pub status: String,
}

/// Train every `(variant, seed)` pair on `data` with otherwise identical
/// settings and score it on the same data. A failed run becomes a row with
/// its error as status; the remaining runs continue.
pub fn ablate(
    base: &TrainConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    data: &[ImageTriplet],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let config = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let dir = out_dir.join(format!("{}_seed{seed}", variant.id()));
            log::info!("ablation run {} seed {seed}", variant.id());
            let result = train(&config, data.to_vec(), &dir).and_then(|out| evaluate(&out.generator, data));
            rows.push(match result {
                Ok(eval) => AblationRow {
                    variant,
                    seed,
                    report: eval.report,
                    masked_psnr: eval.mean_masked_psnr,
                    dice: eval.mean_dice,
                    status: "ok".into(),
                },
                Err(e) => {
                    log::error!("variant {} seed {seed} failed: {e}", variant.id());
                    AblationRow {
                        variant,
                        seed,
                        report: None,
                        masked_psnr: None,
                        dice: None,
                        status: format!("failed: {e}"),
                    }
                }
            });
        }
    }
    Ok(rows)
}

pub fn ablation_header() -> Vec<&'static str> {
    let mut h = vec!["variant", "seed"];
    h.extend(METRIC_COLUMNS);
    h.extend(["masked_psnr", "dice", "status"]);
    h
}

/// One row per run: `variant`, `seed`, the six metrics, `masked_psnr`,
/// `dice`, `status`.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Config(format!("csv {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(ablation_header()).map_err(csv_err)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.variant.id().to_string(), r.seed.to_string()];
        match &r.report {
            Some(rep) => rec.extend(metric_fields(&rep.as_metrics())),
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        rec.extend([fmt(r.masked_psnr), fmt(r.dice), r.status.clone()]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
