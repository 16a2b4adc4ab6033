//! Training objectives and their weighted combination.
//!
//! L1 norms are divided by the element count of the compared tensors.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adversary::DiscOutput;
use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::{self, Conv2d, ParamStore};

/// Lower bound on every logarithm argument in the adversarial losses.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub lambda_m: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 5.0,
            lambda_s: 60.0,
            lambda_p: 0.05,
            lambda_m: 1.5,
            lambda_g: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_t,
            self.lambda_s,
            self.lambda_p,
            self.lambda_m,
            self.lambda_g,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(param_err!("loss weights must be finite and nonnegative: {self:?}"));
        }
        Ok(())
    }
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn mask_matches(img: &Tensor, mask: &Tensor, what: &str) -> Result<()> {
    let (b, _, h, w) = img.dims4()?;
    if mask.dims4()? != (b, 1, h, w) {
        return Err(shape_err!("{what}: mask {:?} vs image {:?}", mask.dims(), img.dims()));
    }
    Ok(())
}

/// Background L1 plus `lambda_t` times text-region L1, both divided by the
/// total element count.
pub fn reconstruction_loss(i_o: &Tensor, i_gt: &Tensor, m_gt: &Tensor, lambda_t: f64) -> Result<Tensor> {
    same_dims(i_o, i_gt, "reconstruction_loss")?;
    mask_matches(i_o, m_gt, "reconstruction_loss")?;
    let n = i_o.elem_count() as f64;
    let diff = (i_o - i_gt)?.abs()?;
    let text = diff.broadcast_mul(m_gt)?.sum_all()?;
    let background = diff.broadcast_mul(&m_gt.affine(-1.0, 1.0)?)?.sum_all()?;
    Ok(((background + text.affine(lambda_t, 0.0)?)? / n)?)
}

/// `I_i` outside the mask, `I_o` inside it.
pub fn compose(i_i: &Tensor, i_o: &Tensor, m_gt: &Tensor) -> Result<Tensor> {
    same_dims(i_i, i_o, "compose")?;
    mask_matches(i_i, m_gt, "compose")?;
    Ok((i_i.broadcast_mul(&m_gt.affine(-1.0, 1.0)?)? + i_o.broadcast_mul(m_gt)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorProvenance {
    /// Fixed-seed random convolutions.
    RandomStandIn,
    /// Returns the input as the only stage.
    Identity,
    /// Weights read from a file.
    Loaded,
}

/// Frozen multi-stage feature extractor for the perceptual and style losses.
pub trait FeatureExtractor {
    fn stages(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    fn provenance(&self) -> ExtractorProvenance;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn stages(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }

    fn provenance(&self) -> ExtractorProvenance {
        ExtractorProvenance::Identity
    }
}

#[derive(Debug, Clone)]
struct FrozenStage {
    pool: bool,
    convs: Vec<Conv2d>,
}

impl FrozenStage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = if self.pool { nn::max_pool2(x)? } else { x.clone() };
        for c in &self.convs {
            x = c.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

/// A stack of frozen `conv + relu` stages. Stages after the first begin with
/// a 2x2 max pool.
#[derive(Debug, Clone)]
pub struct ConvStackExtractor {
    stages: Vec<FrozenStage>,
    provenance: ExtractorProvenance,
}

/// Weight and bias of one loaded convolution, filled in as keys are read.
type WeightBias = (Option<Tensor>, Option<Tensor>);

impl ConvStackExtractor {
    pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 32];

    /// Three stages of 3x3 convolutions with weights drawn from `seed`.
    pub fn random(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::random_with_widths(seed, &Self::DEFAULT_WIDTHS, dtype, device)
    }

    pub fn random_with_widths(seed: u64, widths: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        if widths.len() < 2 {
            return Err(param_err!("the extractor needs at least two stages"));
        }
        let mut store = ParamStore::new(seed, dtype, device);
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("stage{i}.conv0"), cin, w, 3, 1)?;
            stages.push(FrozenStage {
                pool: i > 0,
                convs: vec![freeze(conv)],
            });
            cin = w;
        }
        Ok(Self {
            stages,
            provenance: ExtractorProvenance::RandomStandIn,
        })
    }

    /// Load `stage{s}.conv{l}.weight` / `.bias` tensors from a safetensors
    /// file. Convolutions use stride 1 and same padding.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Checkpoint(format!("cannot read extractor weights {}: {e}", path.display())))?;
        let mut layout: BTreeMap<usize, BTreeMap<usize, WeightBias>> = BTreeMap::new();
        for (name, t) in tensors {
            let parts: Vec<&str> = name.split('.').collect();
            let parsed = match parts.as_slice() {
                [s, c, kind] => s
                    .strip_prefix("stage")
                    .and_then(|s| s.parse::<usize>().ok())
                    .zip(c.strip_prefix("conv").and_then(|c| c.parse::<usize>().ok()))
                    .map(|(s, c)| (s, c, *kind)),
                _ => None,
            };
            let (s, c, kind) =
                parsed.ok_or_else(|| Error::Checkpoint(format!("unexpected extractor tensor {name}")))?;
            let entry = layout.entry(s).or_default().entry(c).or_default();
            let t = t.to_dtype(dtype)?;
            match kind {
                "weight" => entry.0 = Some(t),
                "bias" => entry.1 = Some(t),
                _ => return Err(Error::Checkpoint(format!("unexpected extractor tensor {name}"))),
            }
        }
        let mut stages = Vec::new();
        for (i, (s, convs)) in layout.into_iter().enumerate() {
            if s != i {
                return Err(Error::Checkpoint(format!("extractor stage {i} is missing")));
            }
            let convs = convs
                .into_values()
                .map(|(w, b)| {
                    let w = w.ok_or_else(|| Error::Checkpoint("extractor conv without weight".into()))?;
                    let k = w.dim(2)?;
                    Ok(Conv2d::from_tensors(w, b, 1, (k - 1) / 2))
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(FrozenStage { pool: i > 0, convs });
        }
        if stages.len() < 2 {
            return Err(Error::Checkpoint("the extractor needs at least two stages".into()));
        }
        Ok(Self {
            stages,
            provenance: ExtractorProvenance::Loaded,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}

fn freeze(conv: Conv2d) -> Conv2d {
    Conv2d::from_tensors(
        conv.weight.detach(),
        conv.bias.map(|b| b.detach()),
        conv.stride,
        conv.pad,
    )
}

impl FeatureExtractor for ConvStackExtractor {
    fn stages(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = x.clone();
        for s in &self.stages {
            x = s.forward(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    fn provenance(&self) -> ExtractorProvenance {
        self.provenance
    }
}

/// Extractor activations for the output, the composite and the target.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub output: Vec<Tensor>,
    pub composite: Vec<Tensor>,
    pub target: Vec<Tensor>,
}

impl FeatureSet {
    pub fn extract(ext: &dyn FeatureExtractor, i_o: &Tensor, i_c: &Tensor, i_gt: &Tensor) -> Result<Self> {
        same_dims(i_o, i_gt, "feature set")?;
        same_dims(i_c, i_gt, "feature set")?;
        Ok(Self {
            output: ext.stages(i_o)?,
            composite: ext.stages(i_c)?,
            target: ext.stages(&i_gt.detach())?,
        })
    }

    pub fn perceptual(&self) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for ((o, c), t) in self.output.iter().zip(&self.composite).zip(&self.target) {
            let term = ((o - t)?.abs()?.mean_all()? + (c - t)?.abs()?.mean_all()?)?;
            total = Some(match total {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        total.ok_or_else(|| param_err!("extractor produced no stages"))
    }

    pub fn style(&self) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for ((o, c), t) in self.output.iter().zip(&self.composite).zip(&self.target) {
            let gt = gram(t)?;
            let term = ((gram(o)? - &gt)?.abs()?.mean_all()? + (gram(c)? - &gt)?.abs()?.mean_all()?)?;
            total = Some(match total {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        total.ok_or_else(|| param_err!("extractor produced no stages"))
    }
}

pub fn perceptual_loss(i_o: &Tensor, i_c: &Tensor, i_gt: &Tensor, ext: &dyn FeatureExtractor) -> Result<Tensor> {
    FeatureSet::extract(ext, i_o, i_c, i_gt)?.perceptual()
}

pub fn style_loss(i_o: &Tensor, i_c: &Tensor, i_gt: &Tensor, ext: &dyn FeatureExtractor) -> Result<Tensor> {
    FeatureSet::extract(ext, i_o, i_c, i_gt)?.style()
}

/// `[b, c, c]` channel inner products divided by `c * h * w`.
pub fn gram(phi: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = phi.dims4()?;
    let f = phi.reshape((b, c, h * w))?;
    let g = f.matmul(&f.transpose(1, 2)?.contiguous()?)?;
    Ok((g / (c * h * w) as f64)?)
}

/// `1 - 2 sum(a b) / (sum(a^2) + sum(b^2))`, and 0 when both maps are zero.
pub fn dice_loss(m_o: &Tensor, m_gt: &Tensor) -> Result<Tensor> {
    same_dims(m_o, m_gt, "dice_loss")?;
    let inter = (m_o * m_gt)?.sum_all()?;
    let denom = (m_o.sqr()?.sum_all()? + m_gt.sqr()?.sum_all()?)?;
    let empty = denom.le(0.0)?;
    let safe = empty.where_cond(&denom.ones_like()?, &denom)?;
    let loss = (inter.affine(-2.0, 0.0)? / safe)?.affine(1.0, 1.0)?;
    Ok(empty.where_cond(&loss.zeros_like()?, &loss)?)
}

fn clamped_log(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(LOG_CLAMP)?.log()?)
}

/// Mean of `f(local_score)` over the batch elements with mask coverage.
fn local_mean(out: &DiscOutput, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Option<Tensor>> {
    let idx: Vec<u32> = out
        .local_valid
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(i, _)| i as u32)
        .collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let n = idx.len();
    let keep = Tensor::from_vec(idx, n, out.local_score.device())?;
    let scores = out.local_score.index_select(&keep, 0)?;
    Ok(Some(f(&scores)?.mean_all()?))
}

fn average_heads(global: Tensor, local: Option<Tensor>) -> Result<Tensor> {
    Ok(match local {
        Some(l) => ((global + l)? * 0.5)?,
        None => global,
    })
}

/// `-E[log D(G(I_i))]`, global and local heads weighted equally.
pub fn adversarial_g_loss(fake: &DiscOutput) -> Result<Tensor> {
    let global = clamped_log(&fake.global_scores)?.mean_all()?.neg()?;
    let local = local_mean(fake, |s| Ok(clamped_log(s)?.neg()?))?;
    average_heads(global, local)
}

/// `-E[log D(real)] - E[log(1 - D(fake))]`, global and local heads weighted
/// equally. Zero at perfect discrimination.
pub fn adversarial_d_loss(real: &DiscOutput, fake: &DiscOutput) -> Result<Tensor> {
    let real_global = clamped_log(&real.global_scores)?.mean_all()?.neg()?;
    let fake_global = clamped_log(&fake.global_scores.affine(-1.0, 1.0)?)?.mean_all()?.neg()?;
    let global = (real_global + fake_global)?;
    let real_local = local_mean(real, |s| Ok(clamped_log(s)?.neg()?))?;
    let fake_local = local_mean(fake, |s| Ok(clamped_log(&s.affine(-1.0, 1.0)?)?.neg()?))?;
    let local = match (real_local, fake_local) {
        (Some(r), Some(f)) => Some((r + f)?),
        (Some(r), None) => Some(r),
        (None, Some(f)) => Some(f),
        (None, None) => None,
    };
    average_heads(global, local)
}

pub const COMPONENTS: [&str; 5] = ["rec", "style", "perc", "seg", "adv"];

/// Scalar values of the five loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub style: f64,
    pub perc: f64,
    pub seg: f64,
    pub adv: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 5] {
        [self.rec, self.style, self.perc, self.seg, self.adv]
    }

    /// The first non-finite component, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        COMPONENTS
            .iter()
            .zip(self.as_array())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

fn weight_vector(w: &LossWeights) -> [f64; 5] {
    [1.0, w.lambda_s, w.lambda_p, w.lambda_m, w.lambda_g]
}

/// Compensated sum, exact to the last bit for short well-scaled inputs.
fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// `rec + λ_s style + λ_p perc + λ_m seg + λ_g adv`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    if let Some(component) = parts.non_finite() {
        return Err(Error::NonFiniteLoss {
            component: component.to_string(),
            step: None,
        });
    }
    Ok(neumaier_sum(
        parts.as_array().iter().zip(weight_vector(weights)).map(|(p, w)| p * w),
    ))
}

/// Differentiable loss components of one generator step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub rec: Tensor,
    pub style: Tensor,
    pub perc: Tensor,
    pub seg: Tensor,
    pub adv: Option<Tensor>,
}

impl LossTerms {
    pub fn parts(&self) -> Result<LossParts> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossParts {
            rec: v(&self.rec)?,
            style: v(&self.style)?,
            perc: v(&self.perc)?,
            seg: v(&self.seg)?,
            adv: match &self.adv {
                Some(a) => v(a)?,
                None => 0.0,
            },
        })
    }

    /// Weighted total as a tensor, after checking every component is finite.
    pub fn total(&self, weights: &LossWeights, step: Option<usize>) -> Result<(Tensor, LossParts)> {
        let parts = self.parts()?;
        if let Some(component) = parts.non_finite() {
            return Err(Error::NonFiniteLoss {
                component: component.to_string(),
                step,
            });
        }
        let mut total = (&self.rec
            + self.style.affine(weights.lambda_s, 0.0)?
            + self.perc.affine(weights.lambda_p, 0.0)?
            + self.seg.affine(weights.lambda_m, 0.0)?)?;
        if let Some(adv) = &self.adv {
            if weights.lambda_g != 0.0 {
                total = (total + adv.affine(weights.lambda_g, 0.0)?)?;
            }
        }
        Ok((total, parts))
    }
}
