//! Image quality measures: PSNR, MSSIM, MSE, AGE, pEPs and pCEPs.
//!
//! MSE and PSNR use the `[0, 1]` scale over all channels. MSSIM, AGE, pEPs and
//! pCEPs use BT.601 luminance; AGE and the error-pixel threshold are in gray
//! levels (`0..=255`).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Default error-pixel threshold in gray levels.
pub const DEFAULT_TAU: f64 = 20.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / mse)`; infinite for identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR over the pixels where `mask` is 1 (all channels).
pub fn masked_psnr(a: &Image, b: &Image, mask: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (h, w, c) = a.dims();
    if mask.dims() != (h, w, 1) {
        return Err(param_err!("mask {:?} does not match image {:?}", mask.dims(), a.dims()));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x, 0) > 0.5 {
                for ch in 0..c {
                    let d = a.get(y, x, ch) as f64 - b.get(y, x, ch) as f64;
                    sum += d * d;
                }
                n += c;
            }
        }
    }
    if n == 0 {
        return Err(param_err!("masked PSNR over an empty mask"));
    }
    Ok(psnr_from_mse(sum / n as f64))
}

/// Normalized 1-D Gaussian of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode Gaussian filter of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM on luminance over every fully contained window, times 100.
pub fn mssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(param_err!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        ));
    }
    let x = a.luminance();
    let y = b.luminance();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let g = gaussian_window();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let sxx = filter_valid(&xx, h, w, &g);
    let syy = filter_valid(&yy, h, w, &g);
    let sxy = filter_valid(&xy, h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(100.0 * total / n as f64)
}

/// Average gray-level error, fraction of error pixels and fraction of
/// clustered error pixels. A pixel is an error pixel when its gray-level
/// difference exceeds `tau`; it is clustered when its four neighbours
/// (replicated at the border) are error pixels too.
pub fn age_peps_pceps(a: &Image, b: &Image, tau: f64) -> Result<(f64, f64, f64)> {
    a.ensure_same_dims(b)?;
    let (h, w, _) = a.dims();
    let diff: Vec<f64> = a
        .luminance()
        .iter()
        .zip(b.luminance())
        .map(|(p, q)| (255.0 * p - 255.0 * q).abs())
        .collect();
    let err: Vec<bool> = diff.iter().map(|&d| d > tau).collect();
    let n = (h * w) as f64;
    let age = diff.iter().sum::<f64>() / n;
    let peps = err.iter().filter(|&&e| e).count() as f64 / n;
    let mut clustered = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !err[y * w + x] {
                continue;
            }
            let up = err[y.saturating_sub(1) * w + x];
            let down = err[(y + 1).min(h - 1) * w + x];
            let left = err[y * w + x.saturating_sub(1)];
            let right = err[y * w + (x + 1).min(w - 1)];
            if up && down && left && right {
                clustered += 1;
            }
        }
    }
    Ok((age, peps, clustered as f64 / n))
}

/// The six measures for one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub mssim: f64,
    pub mse: f64,
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
}

pub fn image_metrics(output: &Image, target: &Image) -> Result<ImageMetrics> {
    let m = mse(output, target)?;
    let (age, peps, pceps) = age_peps_pceps(output, target, DEFAULT_TAU)?;
    Ok(ImageMetrics {
        psnr: psnr_from_mse(m),
        mssim: mssim(output, target)?,
        mse: m,
        age,
        peps,
        pceps,
    })
}

/// Unweighted corpus means. Infinite PSNR values are left out of the PSNR
/// mean and counted in `n_infinite_psnr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub mssim: f64,
    pub mse: f64,
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
    pub n_images: usize,
    pub n_infinite_psnr: usize,
}

impl MetricReport {
    pub fn from_rows(rows: &[ImageMetrics]) -> Result<Self> {
        if rows.is_empty() {
            return Err(param_err!("cannot aggregate an empty set of images"));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        let psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Ok(Self {
            psnr,
            mssim: mean(|r| r.mssim),
            mse: mean(|r| r.mse),
            age: mean(|r| r.age),
            peps: mean(|r| r.peps),
            pceps: mean(|r| r.pceps),
            n_images: rows.len(),
            n_infinite_psnr: rows.len() - finite.len(),
        })
    }

    pub fn as_metrics(&self) -> ImageMetrics {
        ImageMetrics {
            psnr: self.psnr,
            mssim: self.mssim,
            mse: self.mse,
            age: self.age,
            peps: self.peps,
            pceps: self.pceps,
        }
    }
}

/// Score every `(output, target)` pair and aggregate.
pub fn evaluate_corpus<'a, I>(pairs: I) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a Image, &'a Image)>,
{
    let rows = pairs
        .into_iter()
        .map(|(o, t)| image_metrics(o, t))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(&rows)
}

pub const METRIC_COLUMNS: [&str; 6] = ["psnr", "mssim", "mse", "age", "peps", "pceps"];

fn fmt_value(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn metric_fields(m: &ImageMetrics) -> [String; 6] {
    [m.psnr, m.mssim, m.mse, m.age, m.peps, m.pceps].map(fmt_value)
}

/// One row per labelled image followed by a `mean` summary row. The first
/// column holds the label, the remaining columns are [`METRIC_COLUMNS`].
pub fn write_metrics_csv<W: Write>(
    out: W,
    label: &str,
    rows: &[(String, ImageMetrics)],
    summary: Option<&MetricReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    let mut header = vec![label.to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (id, m) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(metric_fields(m));
        w.write_record(&rec).map_err(csv_err)?;
    }
    if let Some(s) = summary {
        let mut rec = vec!["mean".to_string()];
        rec.extend(metric_fields(&s.as_metrics()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(())
}

pub fn write_metrics_csv_file(
    path: &Path,
    label: &str,
    rows: &[(String, ImageMetrics)],
    summary: Option<&MetricReport>,
) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(f, label, rows, summary)
}
