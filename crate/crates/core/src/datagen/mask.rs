use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Threshold on the channel-mean absolute difference, `[0, 1]` scale.
    pub tau: f32,
    /// Number of 3x3 dilations applied after thresholding.
    pub dilate_iters: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            tau: 25.0 / 255.0,
            dilate_iters: 0,
        }
    }
}

/// Text mask from an image pair: 1 where the mean over channels of
/// `|input - gt|` exceeds `tau`, then dilated `dilate_iters` times.
pub fn derive_mask(input: &Image, gt: &Image, tau: f32, dilate_iters: usize) -> Result<Image> {
    input.ensure_same_dims(gt)?;
    let (h, w, c) = input.dims();
    let mut mask = Image::new(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let d: f32 = (0..c)
                .map(|ch| (input.get(y, x, ch) - gt.get(y, x, ch)).abs())
                .sum::<f32>()
                / c as f32;
            if d > tau {
                mask.set(y, x, 0, 1.0);
            }
        }
    }
    for _ in 0..dilate_iters {
        mask = dilate3x3(&mask);
    }
    Ok(mask)
}

pub fn derive_mask_with(input: &Image, gt: &Image, params: MaskParams) -> Result<Image> {
    derive_mask(input, gt, params.tau, params.dilate_iters)
}

fn dilate3x3(mask: &Image) -> Image {
    let (h, w, _) = mask.dims();
    let mut out = Image::new(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let hit = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| mask.get(yy, xx, 0) > 0.0));
            if hit {
                out.set(y, x, 0, 1.0);
            }
        }
    }
    out
}
