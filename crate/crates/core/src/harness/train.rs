//! Alternating discriminator / generator optimization.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{DataConfig, OptimizerConfig, TrainConfig};
use crate::adversary::Discriminator;
use crate::datagen::{augment, generate_corpus, load_dataset, ImageTriplet};
use crate::error::{param_err, Error, Result};
use crate::image::Image;
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, compose, dice_loss, reconstruction_loss, ConvStackExtractor,
    FeatureExtractor, FeatureSet, LossParts, LossTerms,
};
use crate::model::Generator;

/// Seed of the frozen perceptual/style extractor.
pub const EXTRACTOR_SEED: u64 = 0x5eed;

pub fn load_training_data(data: &DataConfig, size: usize) -> Result<Vec<ImageTriplet>> {
    let triplets = match &data.dir {
        Some(dir) => load_dataset(dir)?,
        None => generate_corpus(data.seed, data.count, (size, size), data.n_texts)?,
    };
    if triplets.is_empty() {
        return Err(param_err!("training set is empty"));
    }
    Ok(triplets)
}

/// Input, ground truth and mask stacked as `[n, c, h, w]` tensors.
pub struct Batch {
    pub input: Tensor,
    pub gt: Tensor,
    pub mask: Tensor,
}

impl Batch {
    pub fn from_triplets(triplets: &[&ImageTriplet], dtype: DType, device: &Device) -> Result<Self> {
        let stack = |f: fn(&ImageTriplet) -> &Image| {
            let imgs: Vec<&Image> = triplets.iter().map(|t| f(t)).collect();
            Image::batch(&imgs, dtype, device)
        };
        Ok(Self {
            input: stack(|t| &t.input)?,
            gt: stack(|t| &t.gt)?,
            mask: stack(|t| &t.mask)?,
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
    /// Discriminator loss, when the adversarial term is active.
    pub d_loss: Option<f64>,
}

pub const LOG_HEADER: &str = "step,rec,style,perc,seg,adv,total,d_loss";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.step,
            p.rec,
            p.style,
            p.perc,
            p.seg,
            p.adv,
            self.total,
            self.d_loss.map(|d| format!("{d:e}")).unwrap_or_default()
        )
    }
}

fn adam(vars: Vec<candle_core::Var>, lr: f64, o: &OptimizerConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: 0.0,
        },
    )?)
}

pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    g_opt: AdamW,
    d_opt: AdamW,
    extractor: Box<dyn FeatureExtractor>,
    data: Vec<ImageTriplet>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    step: usize,
    dtype: DType,
    device: Device,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Vec<ImageTriplet>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(param_err!("training set is empty"));
        }
        if let Some(t) = data
            .iter()
            .find(|t| t.height() != config.image_size || t.width() != config.image_size)
        {
            return Err(param_err!(
                "triplet {} is {}x{}, expected {}x{}",
                t.id,
                t.height(),
                t.width(),
                config.image_size,
                config.image_size
            ));
        }
        let dtype = DType::F32;
        let device = Device::Cpu;
        let generator = Generator::new(config.generator_config(), config.seed, dtype, &device)?;
        let discriminator = Discriminator::new(config.disc_config(), config.seed.wrapping_add(1), dtype, &device)?;
        let g_opt = adam(generator.params().all_vars(), config.optimizer.g_lr, &config.optimizer)?;
        let d_opt = adam(
            discriminator.params().all_vars(),
            config.optimizer.d_lr,
            &config.optimizer,
        )?;
        let extractor: Box<dyn FeatureExtractor> = match &config.extractor {
            Some(path) => Box::new(ConvStackExtractor::load(path, dtype, &device)?),
            None => Box::new(ConvStackExtractor::random(EXTRACTOR_SEED, dtype, &device)?),
        };
        let data_seed = if config.deterministic {
            config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xda7a
        } else {
            rand::rngs::OsRng.next_u64()
        };
        Ok(Self {
            generator,
            discriminator,
            g_opt,
            d_opt,
            extractor,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(data_seed),
            step: 0,
            data,
            dtype,
            device,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn data(&self) -> &[ImageTriplet] {
        &self.data
    }

    /// Next batch in a reshuffled-every-epoch order.
    fn next_batch(&mut self) -> Result<Batch> {
        let bs = self.config.batch_size;
        let mut picked = Vec::with_capacity(bs);
        while picked.len() < bs {
            if self.cursor >= self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let triplets: Vec<ImageTriplet> = picked
            .iter()
            .map(|&i| {
                if self.config.data.augment {
                    augment(&self.data[i], self.rng.next_u64())
                } else {
                    self.data[i].clone()
                }
            })
            .collect();
        let refs: Vec<&ImageTriplet> = triplets.iter().collect();
        Batch::from_triplets(&refs, self.dtype, &self.device)
    }

    /// One discriminator update (when the adversarial weight is nonzero)
    /// followed by one generator update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let adversarial = self.config.weights.lambda_g > 0.0;
        let out = self.generator.forward(&batch.input)?;

        let d_loss = if adversarial {
            let real = self.discriminator.discriminate(&batch.gt, &batch.mask)?;
            let fake = self.discriminator.discriminate(&out.image.detach(), &batch.mask)?;
            let loss = adversarial_d_loss(&real, &fake)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: "discriminator".into(),
                    step: Some(self.step),
                });
            }
            self.d_opt.backward_step(&loss)?;
            Some(value)
        } else {
            None
        };

        let (_, _, h, w) = batch.input.dims4()?;
        let composite = compose(&batch.input, &out.image, &batch.mask)?;
        let features = FeatureSet::extract(self.extractor.as_ref(), &out.image, &composite, &batch.gt)?;
        let terms = LossTerms {
            rec: reconstruction_loss(&out.image, &batch.gt, &batch.mask, self.config.weights.lambda_t)?,
            style: features.style()?,
            perc: features.perceptual()?,
            seg: dice_loss(&out.confidence.at_size(h, w)?, &batch.mask)?,
            adv: if adversarial {
                Some(adversarial_g_loss(
                    &self.discriminator.discriminate(&out.image, &batch.mask)?,
                )?)
            } else {
                None
            },
        };
        let (total, parts) = terms.total(&self.config.weights, Some(self.step))?;
        let total_value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = total.backward()?;
        self.g_opt.step(&grads)?;
        let record = StepRecord {
            step: self.step,
            parts,
            total: total_value,
            d_loss,
        };
        self.step += 1;
        Ok(record)
    }

    pub fn into_generator(self) -> Generator {
        self.generator
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let cfg = serde_json::to_value(&self.config)?;
        save_checkpoint(
            path,
            &self.generator,
            Some(&self.discriminator),
            self.config.seed,
            self.step,
            Some(cfg),
        )
    }
}

/// Files written by [`train`] and the trained generator.
pub struct TrainOutcome {
    pub log_path: PathBuf,
    pub checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
    pub generator: Generator,
}

/// Run `config.steps` steps, logging every step to `out_dir/train_log.csv`
/// and checkpointing to `out_dir/checkpoints/`. On a non-finite loss the
/// parameters from before the failing step are saved as `last_good` and the
/// error is returned.
pub fn train(config: &TrainConfig, data: Vec<ImageTriplet>, out_dir: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    let mut records = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                trainer.save(&ckpt_dir.join("last_good.safetensors"))?;
                log::error!("training aborted: {e}");
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", record.csv_line()).map_err(|e| Error::io(&log_path, e))?;
        if record.step % 50 == 0 {
            log::info!(
                "step {} total {:.4} rec {:.4}",
                record.step,
                record.total,
                record.parts.rec
            );
        }
        records.push(record);
        let done = trainer.step_count();
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
            trainer.save(&ckpt_dir.join(format!("step_{done:06}.safetensors")))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = ckpt_dir.join("final.safetensors");
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome {
        log_path,
        checkpoint,
        records,
        generator: trainer.into_generator(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::toy();
        c.image_size = 32;
        c.batch_size = 2;
        c.steps = 3;
        c.data.count = 3;
        c
    }

    #[test]
    fn deterministic_runs_match() {
        let c = tiny_config();
        let data = load_training_data(&c.data, c.image_size).unwrap();
        let mut a = Trainer::new(c.clone(), data.clone()).unwrap();
        let mut b = Trainer::new(c, data).unwrap();
        for _ in 0..3 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            assert_eq!(ra.csv_line(), rb.csv_line());
        }
    }

    #[test]
    fn zero_adversarial_weight_leaves_discriminator_untouched() {
        let mut c = tiny_config();
        c.weights.lambda_g = 0.0;
        let data = load_training_data(&c.data, c.image_size).unwrap();
        let mut t = Trainer::new(c, data).unwrap();
        let before = t.discriminator().params().snapshot().unwrap();
        for _ in 0..2 {
            let r = t.step().unwrap();
            assert_eq!(r.parts.adv, 0.0);
            assert!(r.d_loss.is_none());
        }
        let after = t.discriminator().params().snapshot().unwrap();
        for (k, v) in &before {
            let d = (v - &after[k])
                .unwrap()
                .abs()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert_eq!(d, 0.0, "{k}");
        }
    }

    #[test]
    fn train_writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config();
        let data = load_training_data(&c.data, c.image_size).unwrap();
        let out = train(&c, data, dir.path()).unwrap();
        let text = std::fs::read_to_string(&out.log_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 4);
        let columns = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == columns));
        assert!(out.checkpoint.exists());
    }

    #[test]
    fn wrong_sized_data_is_rejected() {
        let c = tiny_config();
        let data = load_training_data(&c.data, 48).unwrap();
        assert!(Trainer::new(c.clone(), data).is_err());
        assert!(load_training_data(
            &DataConfig {
                dir: Some("/nonexistent".into()),
                ..c.data
            },
            32
        )
        .is_err());
    }
}
