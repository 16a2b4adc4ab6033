//! The generator: residual encoder, text segmentation branch, FET skip
//! connections and residual decoder.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::fet::{
    self, resize_confidence, texture_fet, CamParams, FetBlock, FetGuide, FetKind, FetSwitches, SamParams, StructureFet,
    TextureAggregator, TextureFet,
};
use crate::nn::{self, resize_bilinear, Conv2d, ConvTranspose2d, ParamStore, ResBlock};

/// Spatial scale of each encoder level relative to the input.
pub const LEVEL_SCALES: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];
/// Kernel size of each encoder level.
pub const ENCODER_KERNELS: [usize; 5] = [7, 5, 3, 3, 3];
/// Native scale of the text confidence map.
pub const CONFIDENCE_SCALE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub preset: Preset,
    /// Encoder width per level; the decoder mirrors it.
    pub widths: [usize; 5],
    /// Width of the aggregated texture features.
    pub aggregate_width: usize,
    /// Squeeze-and-excitation reduction ratio.
    pub se_reduction: usize,
    /// FET treatment of each skip connection.
    pub placement: [FetKind; 5],
    /// FET treatment of the aggregated texture features.
    pub aggregate: FetKind,
    pub switches: FetSwitches,
    /// When set, FET blocks see the confidence map thresholded at this value
    /// with the gradient blocked.
    pub hard_mask_threshold: Option<f64>,
    pub sam_blocks: usize,
    pub sam_kernel: usize,
    /// Largest number of positions the attention may span.
    pub max_attention_positions: usize,
    pub output_activation: OutputActivation,
}

impl GeneratorConfig {
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            widths: [8, 16, 32, 64, 64],
            aggregate_width: 32,
            se_reduction: 4,
            placement: [
                FetKind::Texture,
                FetKind::Texture,
                FetKind::Texture,
                FetKind::Structure,
                FetKind::Structure,
            ],
            aggregate: FetKind::Texture,
            switches: FetSwitches::default(),
            hard_mask_threshold: None,
            sam_blocks: 1,
            sam_kernel: 3,
            max_attention_positions: 4096,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            widths: [32, 64, 128, 256, 256],
            aggregate_width: 96,
            se_reduction: 16,
            ..Self::toy()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self::toy(),
            Preset::Full => Self::full(),
        }
    }

    /// Same layout with every skip connection copied directly.
    pub fn plain(mut self) -> Self {
        self.placement = [FetKind::Plain; 5];
        self.aggregate = FetKind::Plain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.aggregate_width < 3 {
            return Err(param_err!("widths must be positive and the aggregate width at least 3"));
        }
        if self.placement.contains(&FetKind::Texture) && self.aggregate != FetKind::Texture {
            return Err(param_err!("texture skip connections need the texture aggregate path"));
        }
        if self.sam_blocks == 0 || self.sam_kernel.is_multiple_of(2) {
            return Err(param_err!("SAM needs at least one block and an odd kernel"));
        }
        let gated = self
            .placement
            .iter()
            .zip(self.widths)
            .filter(|(k, _)| **k == FetKind::Structure)
            .map(|(_, w)| w)
            .chain((self.aggregate == FetKind::Structure).then_some(self.aggregate_width));
        for w in gated {
            if w < self.se_reduction || self.se_reduction == 0 {
                return Err(param_err!(
                    "channel gate over {w} channels is incompatible with reduction {}",
                    self.se_reduction
                ));
            }
        }
        if let Some(t) = self.hard_mask_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(param_err!("mask threshold {t} outside (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Encoder feature maps at scales 1, 1/2, 1/4, 1/8 and 1/16.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        self.levels
            .iter()
            .map(|l| {
                let (_, _, h, w) = l.dims4()?;
                Ok((h, w))
            })
            .collect()
    }
}

/// Per-pixel text probability.
#[derive(Debug, Clone)]
pub struct TextConfidenceMap {
    pub values: Tensor,
    pub native_scale: f64,
}

impl TextConfidenceMap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Bilinearly resized copy clamped to `[0, 1]`.
    pub fn at_size(&self, h: usize, w: usize) -> Result<Tensor> {
        resize_confidence(&self.values, h, w)
    }
}

/// Binary mask at `size` from a confidence map: upsample, then `c > theta`.
pub fn threshold_mask(ct: &TextConfidenceMap, theta: f64, size: (usize, usize)) -> Result<Tensor> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(param_err!("threshold {theta} outside (0, 1)"));
    }
    let up = ct.at_size(size.0, size.1)?;
    Ok(up.gt(theta)?.to_dtype(up.dtype())?)
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Replace the predicted confidence map (native scale) fed to the FET
    /// blocks.
    pub confidence_override: Option<Tensor>,
    /// Keep the input and output of every FET skip connection.
    pub record_features: bool,
}

#[derive(Debug, Clone)]
pub struct FetRecord {
    pub level: usize,
    pub kind: FetKind,
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub image: Tensor,
    pub confidence: TextConfidenceMap,
    pub records: Vec<FetRecord>,
}

#[derive(Debug, Clone)]
struct SegmentationHead {
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    head: ConvTranspose2d,
}

#[derive(Debug, Clone)]
struct Decoder {
    ups: Vec<ConvTranspose2d>,
    blocks: Vec<ResBlock>,
    head: Conv2d,
}

pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    encoder: Vec<ResBlock>,
    segmentation: SegmentationHead,
    aggregator: TextureAggregator,
    sam: Option<SamParams>,
    aggregate_cam: Option<CamParams>,
    skip_cams: Vec<Option<CamParams>>,
    decoder: Decoder,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_store(config, ParamStore::new(seed, dtype, device))
    }

    pub fn with_store(config: GeneratorConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let s = &mut store;

        let mut encoder = Vec::with_capacity(5);
        let mut cin = 3;
        for level in 0..5 {
            let stride = if level == 0 { 1 } else { 2 };
            encoder.push(ResBlock::new(
                s,
                &format!("encoder.{level}"),
                cin,
                w[level],
                ENCODER_KERNELS[level],
                stride,
            )?);
            cin = w[level];
        }

        let segmentation = SegmentationHead {
            up1: ConvTranspose2d::new(s, "segment.up1", w[4], w[3], 4, 2, 1)?,
            up2: ConvTranspose2d::new(s, "segment.up2", 2 * w[3], w[2], 4, 2, 1)?,
            head: ConvTranspose2d::new(s, "segment.head", 2 * w[2], 1, 3, 1, 1)?,
        };

        let aggregator = TextureAggregator::new(s, "aggregate", [w[0], w[1], w[2]], config.aggregate_width)?;
        let sam = if config.aggregate == FetKind::Texture && config.switches.similarity {
            Some(SamParams::new(
                s,
                "sam",
                config.aggregate_width,
                config.sam_kernel,
                config.sam_blocks,
            )?)
        } else {
            None
        };
        let aggregate_cam = if config.aggregate == FetKind::Structure {
            Some(CamParams::new(
                s,
                "aggregate_cam",
                config.aggregate_width,
                config.se_reduction,
            )?)
        } else {
            None
        };
        let skip_cams = (0..5)
            .map(|l| match config.placement[l] {
                FetKind::Structure => CamParams::new(s, &format!("cam.{l}"), w[l], config.se_reduction).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;

        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        blocks.push(ResBlock::new(
            s,
            "decoder.4",
            w[4] + config.aggregate_width,
            w[4],
            3,
            1,
        )?);
        for level in (0..4).rev() {
            ups.push(ConvTranspose2d::new(
                s,
                &format!("decoder.up{level}"),
                w[level + 1],
                w[level],
                4,
                2,
                1,
            )?);
            blocks.push(ResBlock::new(
                s,
                &format!("decoder.{level}"),
                2 * w[level],
                w[level],
                3,
                1,
            )?);
        }
        let head = Conv2d::new(s, "decoder.head", w[0], 3, 3, 1)?;

        Ok(Self {
            config,
            store,
            encoder,
            segmentation,
            aggregator,
            sam,
            aggregate_cam,
            skip_cams,
            decoder: Decoder { ups, blocks, head },
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn check_input(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(shape_err!("expected 3 input channels, got {c}"));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(shape_err!("input {h}x{w} is not divisible by 16"));
        }
        Ok((h, w))
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(image)?;
        let mut levels = Vec::with_capacity(5);
        let mut x = image.clone();
        for block in &self.encoder {
            x = block.forward(&x)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    /// Text confidence at 1/4 scale from the three deepest levels.
    pub fn segment(&self, pyramid: &FeaturePyramid) -> Result<TextConfidenceMap> {
        let seg = &self.segmentation;
        let x = seg.up1.forward(pyramid.level(4))?.relu()?;
        let x = Tensor::cat(&[&x, pyramid.level(3)], 1)?;
        let x = seg.up2.forward(&x)?.relu()?;
        let x = Tensor::cat(&[&x, pyramid.level(2)], 1)?;
        let values = nn::sigmoid(&seg.head.forward(&x)?)?;
        Ok(TextConfidenceMap {
            values,
            native_scale: CONFIDENCE_SCALE,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<GeneratorOutput> {
        self.forward_with(image, &ForwardOptions::default())
    }

    pub fn forward_with(&self, image: &Tensor, opts: &ForwardOptions) -> Result<GeneratorOutput> {
        let (h, w) = self.check_input(image)?;
        let pyramid = self.encode(image)?;
        let confidence = self.segment(&pyramid)?;
        let guide_map = match &opts.confidence_override {
            Some(c) => c.clone(),
            None => confidence.values.clone(),
        };
        let guide_map = match self.config.hard_mask_threshold {
            Some(theta) => fet::hard_mask(&guide_map, theta)?,
            None => guide_map,
        };
        let (ah, aw) = (h / 4, w / 4);
        let ct_agg = resize_confidence(&guide_map, ah, aw)?;
        let switches = self.config.switches;

        let f_at = fet::aggregate_texture(
            pyramid.level(0),
            pyramid.level(1),
            pyramid.level(2),
            &self.aggregator,
            (ah, aw),
        )?;
        let mut records = Vec::new();
        let (texture_out, attention) = match self.config.aggregate {
            FetKind::Texture => {
                let sam = match &self.sam {
                    Some(s) => s.clone(),
                    None => SamParams { blocks: Vec::new() },
                };
                let path = texture_fet(&f_at, &ct_agg, &sam, switches, self.config.max_attention_positions)?;
                (path.output, path.attention)
            }
            FetKind::Structure => {
                let cam = self.aggregate_cam.as_ref().expect("aggregate gate exists");
                (fet::structure_fet_on(&f_at, &ct_agg, cam, switches)?, None)
            }
            FetKind::Plain => (f_at.clone(), None),
        };
        let guide = FetGuide {
            confidence: guide_map,
            attention,
            switches,
        };
        let mut skips = Vec::with_capacity(5);
        for level in 0..5 {
            let f = pyramid.level(level);
            let out = match self.config.placement[level] {
                FetKind::Plain => f.clone(),
                FetKind::Texture => TextureFet.forward(f, &guide)?,
                FetKind::Structure => {
                    let cam = self.skip_cams[level].clone().expect("gate exists");
                    StructureFet { cam }.forward(f, &guide)?
                }
            };
            if opts.record_features && self.config.placement[level] != FetKind::Plain {
                records.push(FetRecord {
                    level,
                    kind: self.config.placement[level],
                    input: f.clone(),
                    output: out.clone(),
                });
            }
            skips.push(out);
        }

        let (_, _, h5, w5) = skips[4].dims4()?;
        let texture_small = resize_bilinear(&texture_out, h5, w5)?;
        let dec = &self.decoder;
        let mut x = dec.blocks[0].forward(&Tensor::cat(&[&skips[4], &texture_small], 1)?)?;
        for (i, level) in (0..4).rev().enumerate() {
            let up = dec.ups[i].forward(&x)?.relu()?;
            x = dec.blocks[i + 1].forward(&Tensor::cat(&[&up, &skips[level]], 1)?)?;
        }
        let image_out = match self.config.output_activation {
            OutputActivation::Sigmoid => nn::sigmoid(&dec.head.forward(&x)?)?,
        };
        Ok(GeneratorOutput {
            image: image_out,
            confidence,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn toy(seed: u64) -> Generator {
        Generator::new(GeneratorConfig::toy(), seed, DType::F32, &Device::Cpu).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        random_tensor(&[1, 3, 64, 64], 0.0, 1.0, seed)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap()
    }

    #[test]
    fn pyramid_has_the_five_scales() {
        let g = toy(0);
        let p = g.encode(&image(1)).unwrap();
        let sizes: Vec<usize> = p.spatial_sizes().unwrap().iter().map(|s| s.0).collect();
        assert_eq!(sizes, [64, 32, 16, 8, 4]);
        for (l, w) in p.levels.iter().zip(GeneratorConfig::toy().widths) {
            assert_eq!(l.dim(1).unwrap(), w);
        }
    }

    #[test]
    fn scale_contract_for_other_sizes() {
        let g = toy(0);
        let x = Tensor::zeros((2, 3, 48, 80), DType::F32, &Device::Cpu).unwrap();
        let sizes = g.encode(&x).unwrap().spatial_sizes().unwrap();
        assert_eq!(sizes, [(48, 80), (24, 40), (12, 20), (6, 10), (3, 5)]);
        let out = g.forward(&x).unwrap();
        assert_eq!(out.image.dims(), x.dims());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let g = toy(0);
        let x = Tensor::zeros((1, 3, 60, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(g.encode(&x).is_err());
    }

    #[test]
    fn zero_image_with_zero_biases_is_finite() {
        let store = ParamStore::new(3, DType::F32, &Device::Cpu);
        let g = Generator::with_store(GeneratorConfig::toy(), store).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        for l in g.encode(&x).unwrap().levels {
            let v = l.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let zeroed = Generator::with_store(
            GeneratorConfig::toy(),
            ParamStore::new(3, DType::F32, &Device::Cpu).with_zero_init(),
        )
        .unwrap();
        let out = zeroed.forward(&x).unwrap();
        let v = out.image.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encode_is_deterministic() {
        let a = toy(5).encode(&image(2)).unwrap();
        let b = toy(5).encode(&image(2)).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            let x = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn confidence_is_quarter_scale_and_bounded() {
        let g = toy(1);
        let out = g.forward(&image(3)).unwrap();
        assert_eq!(out.confidence.values.dims(), &[1, 1, 16, 16]);
        let full = out.confidence.at_size(64, 64).unwrap();
        assert_eq!(full.dims(), &[1, 1, 64, 64]);
        for v in full.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((0.0..=1.0).contains(&v));
        }
        let img = out.image.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.image.dims(), &[1, 3, 64, 64]);
    }

    #[test]
    fn threshold_mask_cases() {
        let map = |v: f32| TextConfidenceMap {
            values: Tensor::full(v, (1, 1, 4, 4), &Device::Cpu).unwrap(),
            native_scale: 0.25,
        };
        let ones = threshold_mask(&map(0.9), 0.5, (16, 16)).unwrap();
        assert_eq!(ones.sum_all().unwrap().to_scalar::<f32>().unwrap(), 256.0);
        let zeros = threshold_mask(&map(0.1), 0.5, (16, 16)).unwrap();
        assert_eq!(zeros.sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert!(threshold_mask(&map(0.1), 1.0, (16, 16)).is_err());
        assert!(threshold_mask(&map(0.1), 0.0, (16, 16)).is_err());
    }

    #[test]
    fn threshold_mask_matches_double_loop() {
        let values = random_tensor(&[1, 1, 16, 16], 0.0, 1.0, 9).unwrap();
        let map = TextConfidenceMap {
            values: values.clone(),
            native_scale: 1.0,
        };
        let m = threshold_mask(&map, 0.37, (16, 16)).unwrap();
        let raw = values.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut expected = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                if raw[i * 16 + j] > 0.37 {
                    expected += 1.0;
                }
            }
        }
        assert_eq!(m.sum_all().unwrap().to_scalar::<f64>().unwrap(), expected);
    }

    #[test]
    fn plain_config_runs_and_differs() {
        let x = image(4);
        let full = toy(7).forward(&x).unwrap().image;
        let plain = Generator::new(GeneratorConfig::toy().plain(), 7, DType::F32, &Device::Cpu)
            .unwrap()
            .forward(&x)
            .unwrap()
            .image;
        let d = (full - plain)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn records_cover_every_fet_layer() {
        let g = toy(2);
        let out = g
            .forward_with(
                &image(5),
                &ForwardOptions {
                    record_features: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let layers: Vec<usize> = out.records.iter().map(|r| r.level).collect();
        assert_eq!(layers, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = GeneratorConfig::toy();
        c.aggregate = FetKind::Plain;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.se_reduction = 128;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.hard_mask_threshold = Some(1.5);
        assert!(c.validate().is_err());
    }
}
