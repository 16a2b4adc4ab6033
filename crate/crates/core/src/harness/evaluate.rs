//! Scoring a remover against ground truth.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::ImageTriplet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{image_metrics, masked_psnr, metric_fields, ImageMetrics, MetricReport, METRIC_COLUMNS};
use crate::model::{threshold_mask, Generator};

/// Threshold turning the confidence map into the predicted mask.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Generator output for one image at its own resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub output: Image,
    /// Text confidence bilinearly upsampled to the image size.
    pub confidence: Image,
    /// Confidence thresholded at [`MASK_THRESHOLD`].
    pub mask: Image,
}

/// Anything that maps a text image to a text-free image.
pub trait Remover {
    fn remove(&self, input: &Image) -> Result<Prediction>;
}

impl Remover for Generator {
    fn remove(&self, input: &Image) -> Result<Prediction> {
        let x = input.to_tensor(self.dtype(), self.device())?.unsqueeze(0)?;
        let out = self.forward(&x)?;
        let (h, w) = (input.height(), input.width());
        let first = |t: &Tensor| -> Result<Image> { Image::from_tensor(&t.get(0)?.to_dtype(DType::F32)?) };
        Ok(Prediction {
            output: first(&out.image)?,
            confidence: first(&out.confidence.at_size(h, w)?)?,
            mask: first(&threshold_mask(&out.confidence, MASK_THRESHOLD, (h, w))?)?,
        })
    }
}

/// Returns its input unchanged and predicts no text.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassThrough;

impl Remover for PassThrough {
    fn remove(&self, input: &Image) -> Result<Prediction> {
        let (h, w, _) = input.dims();
        Ok(Prediction {
            output: input.clone(),
            confidence: Image::new(h, w, 1),
            mask: Image::new(h, w, 1),
        })
    }
}

/// Dice loss between two binary (or soft) single-channel images.
pub fn dice_of_images(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (mut inter, mut sa, mut sb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        inter += x * y;
        sa += x * x;
        sb += y * y;
    }
    if sa + sb == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter / (sa + sb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub metrics: Option<ImageMetrics>,
    /// PSNR of the output over the text mask.
    pub masked_psnr: Option<f64>,
    /// PSNR of the unprocessed input over the text mask.
    pub masked_psnr_input: Option<f64>,
    pub dice: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub report: Option<MetricReport>,
    pub mean_masked_psnr: Option<f64>,
    pub mean_masked_psnr_input: Option<f64>,
    pub mean_dice: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Score every triplet. Triplets whose size is not a multiple of 16 are
/// skipped with a note in their row.
pub fn evaluate(remover: &dyn Remover, triplets: &[ImageTriplet]) -> Result<EvalOutcome> {
    let mut rows = Vec::with_capacity(triplets.len());
    for t in triplets {
        if t.height() % 16 != 0 || t.width() % 16 != 0 {
            log::warn!("skipping {}: {}x{} is not divisible by 16", t.id, t.height(), t.width());
            rows.push(EvalRow {
                id: t.id.clone(),
                metrics: None,
                masked_psnr: None,
                masked_psnr_input: None,
                dice: None,
                note: format!("skipped: {}x{} not divisible by 16", t.height(), t.width()),
            });
            continue;
        }
        let p = remover.remove(&t.input)?;
        let has_text = t.mask.count_nonzero() > 0;
        rows.push(EvalRow {
            id: t.id.clone(),
            metrics: Some(image_metrics(&p.output, &t.gt)?),
            masked_psnr: has_text.then(|| masked_psnr(&p.output, &t.gt, &t.mask)).transpose()?,
            masked_psnr_input: has_text.then(|| masked_psnr(&t.input, &t.gt, &t.mask)).transpose()?,
            dice: Some(dice_of_images(&p.mask, &t.mask)?),
            note: String::new(),
        });
    }
    let scored: Vec<ImageMetrics> = rows.iter().filter_map(|r| r.metrics).collect();
    let report = if scored.is_empty() {
        None
    } else {
        Some(MetricReport::from_rows(&scored)?)
    };
    Ok(EvalOutcome {
        report,
        mean_masked_psnr: mean(rows.iter().filter_map(|r| r.masked_psnr)),
        mean_masked_psnr_input: mean(rows.iter().filter_map(|r| r.masked_psnr_input)),
        mean_dice: mean(rows.iter().filter_map(|r| r.dice)),
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

/// Per-image rows and a `mean` row: `id`, the six metrics, `masked_psnr`,
/// `dice`, `note`.
pub fn write_eval_csv(path: &Path, outcome: &EvalOutcome) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Config(format!("csv {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id"];
    header.extend(METRIC_COLUMNS);
    header.extend(["masked_psnr", "dice", "note"]);
    w.write_record(&header).map_err(csv_err)?;
    for r in &outcome.rows {
        let mut rec = vec![r.id.clone()];
        match &r.metrics {
            Some(m) => rec.extend(metric_fields(m)),
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        rec.extend([opt(r.masked_psnr), opt(r.dice), r.note.clone()]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    if let Some(report) = &outcome.report {
        let mut rec = vec!["mean".to_string()];
        rec.extend(metric_fields(&report.as_metrics()));
        let note = if report.n_infinite_psnr > 0 {
            format!("{} infinite psnr excluded", report.n_infinite_psnr)
        } else {
            String::new()
        };
        rec.extend([opt(outcome.mean_masked_psnr), opt(outcome.mean_dice), note]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
