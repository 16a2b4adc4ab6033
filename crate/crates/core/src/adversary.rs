//! Global and local discriminator.
//!
//! A shared four-layer trunk halves the resolution at every layer. The global
//! head scores each `16 x 16` patch; the local head pools the trunk features
//! under the downsampled text mask and scores the text region as a whole.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::nn::{self, avg_pool, Conv2d, Linear, ParamStore};

pub const DISC_DOWNSCALE: usize = 16;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub widths: [usize; 4],
    /// Trunk kernel size; 4 with padding 1, or 1 with padding 0 for a
    /// one-pixel receptive field.
    pub kernel: usize,
}

impl DiscConfig {
    pub fn toy() -> Self {
        Self {
            widths: [16, 32, 64, 64],
            kernel: 4,
        }
    }

    pub fn full() -> Self {
        Self {
            widths: [64, 128, 256, 256],
            kernel: 4,
        }
    }

    /// Every trunk layer sees a single input position.
    pub fn pointwise(widths: [usize; 4]) -> Self {
        Self { widths, kernel: 1 }
    }

    fn pad(&self) -> Result<usize> {
        match self.kernel {
            4 => Ok(1),
            1 => Ok(0),
            k => Err(param_err!("unsupported discriminator kernel {k}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscOutput {
    /// Patch probabilities, `[batch, 1, h / 16, w / 16]`.
    pub global_scores: Tensor,
    /// Text-region probability per batch element, `[batch]`; 0 when the mask
    /// is empty.
    pub local_score: Tensor,
    /// Whether each batch element had any mask coverage.
    pub local_valid: Vec<bool>,
}

pub struct Discriminator {
    config: DiscConfig,
    store: ParamStore,
    trunk: Vec<Conv2d>,
    global_head: Conv2d,
    local_head: Linear,
}

impl Discriminator {
    pub fn new(config: DiscConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_store(config, ParamStore::new(seed, dtype, device))
    }

    pub fn with_store(config: DiscConfig, mut store: ParamStore) -> Result<Self> {
        let pad = config.pad()?;
        let mut trunk = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            trunk.push(Conv2d::with_padding(
                &mut store,
                &format!("disc.{i}"),
                cin,
                w,
                config.kernel,
                2,
                pad,
            )?);
            cin = w;
        }
        let global_head = Conv2d::new(&mut store, "disc.global", cin, 1, 1, 1)?;
        let local_head = Linear::new(&mut store, "disc.local", cin, 1)?;
        Ok(Self {
            config,
            store,
            trunk,
            global_head,
            local_head,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn discriminate(&self, image: &Tensor, mask: &Tensor) -> Result<DiscOutput> {
        let (b, c, h, w) = image.dims4()?;
        let (mb, mc, mh, mw) = mask.dims4()?;
        if c != 3 || (mb, mc, mh, mw) != (b, 1, h, w) {
            return Err(shape_err!(
                "discriminator needs a 3-channel image and matching mask, got {:?} and {:?}",
                image.dims(),
                mask.dims()
            ));
        }
        if h % DISC_DOWNSCALE != 0 || w % DISC_DOWNSCALE != 0 {
            return Err(shape_err!("discriminator input {h}x{w} is not divisible by 16"));
        }
        let mut x = image.clone();
        for conv in &self.trunk {
            x = nn::leaky_relu(&conv.forward(&x)?, LEAK)?;
        }
        let global_scores = nn::sigmoid(&self.global_head.forward(&x)?)?;

        let weights = avg_pool(mask, DISC_DOWNSCALE)?;
        let total = weights.sum((1, 2, 3))?;
        let valid = total.gt(0.0)?;
        let safe_total = valid.where_cond(&total, &total.ones_like()?)?;
        let pooled = x
            .broadcast_mul(&weights)?
            .sum((2, 3))?
            .broadcast_div(&safe_total.unsqueeze(1)?)?;
        let score = nn::sigmoid(&self.local_head.forward(&pooled)?)?.squeeze(1)?;
        let local_score = (score * valid.to_dtype(image.dtype())?)?;
        let local_valid = valid.to_vec1::<u8>()?.into_iter().map(|v| v != 0).collect();
        Ok(DiscOutput {
            global_scores,
            local_score,
            local_valid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor, GradCheckConfig};

    fn disc(config: DiscConfig, seed: u64) -> Discriminator {
        Discriminator::new(config, seed, DType::F64, &Device::Cpu).unwrap()
    }

    fn block_mask(b: usize, h: usize, w: usize, y0: usize, x0: usize, size: usize) -> Tensor {
        let mut v = vec![0.0f64; b * h * w];
        for n in 0..b {
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    v[(n * h + y) * w + x] = 1.0;
                }
            }
        }
        Tensor::from_vec(v, (b, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn global_map_is_one_sixteenth() {
        let d = disc(DiscConfig::toy(), 0);
        let x = random_tensor(&[2, 3, 64, 64], 0.0, 1.0, 1).unwrap();
        let m = block_mask(2, 64, 64, 10, 10, 8);
        let out = d.discriminate(&x, &m).unwrap();
        assert_eq!(out.global_scores.dims(), &[2, 1, 4, 4]);
        assert_eq!(out.local_score.dims(), &[2]);
        assert_eq!(out.local_valid, [true, true]);
        for v in out.global_scores.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn empty_mask_gives_sentinel() {
        let d = disc(DiscConfig::toy(), 0);
        let x = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, 2).unwrap();
        let m = Tensor::zeros((1, 1, 32, 32), DType::F64, &Device::Cpu).unwrap();
        let out = d.discriminate(&x, &m).unwrap();
        assert_eq!(out.local_score.to_vec1::<f64>().unwrap(), [0.0]);
        assert_eq!(out.local_valid, [false]);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let d = disc(DiscConfig::toy(), 0);
        let x = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, 2).unwrap();
        let m = Tensor::zeros((1, 1, 32, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(d.discriminate(&x, &m).is_err());
    }

    #[test]
    fn pointwise_local_score_ignores_unmasked_blocks() {
        let d = disc(DiscConfig::pointwise([4, 4, 4, 4]), 3);
        let x = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, 4).unwrap();
        let m = block_mask(1, 32, 32, 0, 0, 16);
        let base = d.discriminate(&x, &m).unwrap().local_score.to_vec1::<f64>().unwrap();
        let noise = random_tensor(&[1, 3, 32, 32], -0.5, 0.5, 5).unwrap();
        let outside = (block_mask(1, 32, 32, 0, 0, 16).affine(-1.0, 1.0).unwrap())
            .broadcast_mul(&noise)
            .unwrap();
        let perturbed = (&x + outside).unwrap();
        let after = d
            .discriminate(&perturbed, &m)
            .unwrap()
            .local_score
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(base, after);
        let inside = block_mask(1, 32, 32, 0, 0, 16).broadcast_mul(&noise).unwrap();
        let moved = d
            .discriminate(&(&x + inside).unwrap(), &m)
            .unwrap()
            .local_score
            .to_vec1::<f64>()
            .unwrap();
        assert_ne!(base, moved);
    }

    #[test]
    fn mean_score_gradient_matches_finite_differences() {
        let d = disc(
            DiscConfig {
                widths: [3, 4, 4, 4],
                kernel: 4,
            },
            6,
        );
        let x = random_tensor(&[1, 3, 16, 16], 0.0, 1.0, 7).unwrap();
        let m = block_mask(1, 16, 16, 2, 3, 6);
        let report = check_gradients(
            |t| {
                let out = d.discriminate(&t[0], &m)?;
                Ok((out.global_scores.mean_all()? + out.local_score.mean_all()?)?)
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
