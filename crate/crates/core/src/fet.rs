//! Feature erasing and transferring.
//!
//! Feature maps are `[batch, channels, h, w]`; confidence maps are
//! `[batch, 1, h, w]` with values in `[0, 1]` (1 = text). Attention is stored
//! as `[batch, queries, keys]` where query/key index `i * w + j` is position
//! `(i, j)`; row `q` is the distribution over keys for that query.
//!
//! The texture path (FEM, SAM, FTM_t) erases text evidence, builds a
//! background-only similarity attention and copies background features into
//! the erased positions. The structure path (FEM, CAM, FTM_s) reweights
//! channels of the original features by a squeeze-and-excitation gate computed
//! on the erased ones.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::nn::{self, avg_pool, nearest_upsample, resize_bilinear, Conv2d, Linear, ParamStore};

/// Norm floor used when normalizing feature vectors for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Row-stochastic background attention.
#[derive(Debug, Clone)]
pub struct AttentionTensor {
    weights: Tensor,
    resolution: (usize, usize),
}

impl AttentionTensor {
    pub fn new(weights: Tensor, resolution: (usize, usize)) -> Result<Self> {
        let (_, q, k) = weights.dims3()?;
        let n = resolution.0 * resolution.1;
        if q != n || k != n {
            return Err(shape_err!(
                "attention {:?} does not match resolution {:?}",
                weights.dims(),
                resolution
            ));
        }
        Ok(Self { weights, resolution })
    }

    /// `[batch, queries, keys]`
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    /// `[batch, h, w, h * w]`: channel `i * w + j` of the last axis is the key
    /// weight at `(i, j)`, indexed by query position in the first two axes.
    pub fn as_query_maps(&self) -> Result<Tensor> {
        let (b, _, n) = self.weights.dims3()?;
        Ok(self.weights.reshape((b, self.resolution.0, self.resolution.1, n))?)
    }
}

/// Squeeze-and-excitation channel scores, `[batch, channels]`, in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    pub scores: Tensor,
}

fn check_map(f: &Tensor, map: &Tensor, what: &str) -> Result<()> {
    let (b, _, h, w) = f.dims4()?;
    let (mb, mc, mh, mw) = map.dims4()?;
    if mb != b || mc != 1 || mh != h || mw != w {
        return Err(shape_err!(
            "{what}: map {:?} does not match features {:?}",
            map.dims(),
            f.dims()
        ));
    }
    Ok(())
}

/// Feature erasing: `(1 - C_t) * f`, broadcast over channels.
pub fn fem(f: &Tensor, ct: &Tensor) -> Result<Tensor> {
    check_map(f, ct, "fem")?;
    let keep = ct.affine(-1.0, 1.0)?;
    Ok(f.broadcast_mul(&keep)?)
}

/// Gated convolution filters for the coarse fill.
#[derive(Debug, Clone)]
pub struct SamParams {
    /// `(gate, feature)` filter pairs, applied in sequence.
    pub blocks: Vec<(Conv2d, Conv2d)>,
}

impl SamParams {
    /// `blocks` gated convolutions mapping `channels + 1` inputs (features
    /// concatenated with the confidence map) to one gate and `channels`
    /// features.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, blocks: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(param_err!("at least one gated block is required"));
        }
        let blocks = (0..blocks)
            .map(|i| {
                let g = Conv2d::new(store, &format!("{name}.{i}.gate"), channels + 1, 1, kernel, 1)?;
                let f = Conv2d::new(store, &format!("{name}.{i}.feature"), channels + 1, channels, kernel, 1)?;
                Ok((g, f))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }
}

/// Soft gated fill: `relu(W_f * [f_e, C_t]) * sigmoid(W_g * [f_e, C_t])`.
pub fn sam_fill(f_e: &Tensor, ct: &Tensor, params: &SamParams) -> Result<Tensor> {
    check_map(f_e, ct, "sam_fill")?;
    let mut x = f_e.clone();
    for (gate, feature) in &params.blocks {
        let joined = Tensor::cat(&[&x, ct], 1)?;
        let g = nn::sigmoid(&gate.forward(&joined)?)?;
        let d = feature.forward(&joined)?.relu()?;
        x = d.broadcast_mul(&g)?;
    }
    Ok(x)
}

/// Pairwise cosine similarity between positions, `[batch, n, n]`.
///
/// Vectors are divided by `max(|v|, eps)`; the floor is applied to the squared
/// norm so the gradient stays finite at zero vectors.
pub fn cosine_similarity_map(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let v = f.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
    let sq = v.sqr()?.sum_keepdim(2)?;
    let norm = sq.maximum(COSINE_EPS * COSINE_EPS)?.sqrt()?;
    let u = v.broadcast_div(&norm)?;
    Ok(u.matmul(&u.transpose(1, 2)?.contiguous()?)?)
}

/// Flatten a confidence map to `[batch, n]`.
fn flatten_map(ct: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = ct.dims4()?;
    if c != 1 {
        return Err(shape_err!("confidence map must have one channel"));
    }
    Ok(ct.reshape((b, h * w))?)
}

/// Background co-occurrence weighting of a similarity map (before softmax):
/// `S_t[q, k] = (1 - c_q)(1 - c_k) S[q, k]`.
pub fn background_concurrency(s: &Tensor, ct: &Tensor) -> Result<Tensor> {
    let (b, n, n2) = s.dims3()?;
    let bg = flatten_map(ct)?.affine(-1.0, 1.0)?;
    if n != n2 || bg.dims() != [b, n] {
        return Err(shape_err!(
            "similarity {:?} does not match confidence map {:?}",
            s.dims(),
            ct.dims()
        ));
    }
    let outer = bg.unsqueeze(2)?.broadcast_mul(&bg.unsqueeze(1)?)?;
    Ok((outer * s)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxMode {
    /// Plain softmax over all keys of the masked similarity. Fully-text query
    /// rows are all zeros before softmax and become uniform.
    #[default]
    Literal,
    /// Softmax restricted to background keys: weights are scaled by
    /// `1 - c_k` and renormalized; a row with no background falls back to
    /// uniform.
    Masked,
}

/// Softmax-normalized background attention.
pub fn background_attention(s: &Tensor, ct: &Tensor, mode: SoftmaxMode) -> Result<AttentionTensor> {
    let (_, _, h, w) = ct.dims4()?;
    let st = background_concurrency(s, ct)?;
    let weights = match mode {
        SoftmaxMode::Literal => nn::softmax_last(&st)?,
        SoftmaxMode::Masked => {
            let bg = flatten_map(ct)?.affine(-1.0, 1.0)?.unsqueeze(1)?;
            let max = st.max_keepdim(D::Minus1)?.detach();
            let e = st.broadcast_sub(&max)?.exp()?.broadcast_mul(&bg)?;
            renormalize_rows(&e)?
        }
    };
    AttentionTensor::new(weights, (h, w))
}

/// Divide each row by its sum; rows summing to zero become uniform.
fn renormalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(D::Minus1)?;
    let sum = x.sum_keepdim(D::Minus1)?;
    let empty = sum.le(0.0)?;
    let safe = empty.where_cond(&sum.ones_like()?, &sum)?;
    let normed = x.broadcast_div(&safe)?;
    let uniform = (x.zeros_like()? + 1.0 / n as f64)?;
    Ok(empty.broadcast_as(x.shape())?.where_cond(&uniform, &normed)?)
}

/// Attention that ignores feature similarity: each query spreads its weight
/// over keys in proportion to their background probability `1 - c_k`.
pub fn uniform_background_attention(ct: &Tensor) -> Result<AttentionTensor> {
    let (b, _, h, w) = ct.dims4()?;
    let n = h * w;
    let bg = flatten_map(ct)?.affine(-1.0, 1.0)?.unsqueeze(1)?;
    let rows = bg.broadcast_as((b, n, n))?.contiguous()?;
    AttentionTensor::new(renormalize_rows(&rows)?, (h, w))
}

/// Texture transfer: `f_t(q) = sum_k a[q, k] f_e(k)` followed by
/// `f_t^t = C_t * f_t + f_e`.
pub fn ftm_t(f_e: &Tensor, attn: &AttentionTensor, ct: &Tensor) -> Result<Tensor> {
    check_map(f_e, ct, "ftm_t")?;
    let (b, c, h, w) = f_e.dims4()?;
    if attn.resolution() != (h, w) {
        return Err(shape_err!(
            "attention resolution {:?} does not match features {h}x{w}",
            attn.resolution()
        ));
    }
    let flat = f_e.reshape((b, c, h * w))?;
    let transferred = flat
        .matmul(&attn.weights().transpose(1, 2)?.contiguous()?)?
        .reshape((b, c, h, w))?;
    Ok((transferred.broadcast_mul(ct)? + f_e)?)
}

/// [`ftm_t`] with attention that was nearest-upscaled by an integer `factor`
/// from `attn`'s resolution, without materializing the large tensor.
///
/// Upscaling repeats every key `factor^2` times and renormalization divides
/// each weight by `factor^2`, so the transfer equals the coarse attention
/// applied to `factor x factor` average-pooled features, upsampled back.
pub fn ftm_t_upscaled(f_e: &Tensor, attn: &AttentionTensor, ct: &Tensor, factor: usize) -> Result<Tensor> {
    check_map(f_e, ct, "ftm_t")?;
    let (b, c, h, w) = f_e.dims4()?;
    let (ah, aw) = attn.resolution();
    if ah * factor != h || aw * factor != w {
        return Err(shape_err!(
            "features {h}x{w} are not a {factor}x upscale of attention {ah}x{aw}"
        ));
    }
    let pooled = avg_pool(f_e, factor)?.reshape((b, c, ah * aw))?;
    let coarse = pooled
        .matmul(&attn.weights().transpose(1, 2)?.contiguous()?)?
        .reshape((b, c, ah, aw))?;
    let transferred = nearest_upsample(&coarse, factor)?;
    Ok((transferred.broadcast_mul(ct)? + f_e)?)
}

/// Nearest source index for each of `out` positions over `input` positions.
fn nearest_indices(out: usize, input: usize) -> Vec<usize> {
    (0..out).map(|i| (i * input / out).min(input - 1)).collect()
}

/// Resize attention to another resolution with the same aspect ratio.
///
/// The tensor is treated as `(query_y, query_x, key_y, key_x)`; both position
/// pairs are resized with nearest-neighbour sampling and every query row is
/// renormalized to sum to one (uniform when it sums to zero).
pub fn rescale_attention(attn: &AttentionTensor, target: (usize, usize)) -> Result<AttentionTensor> {
    let (h, w) = attn.resolution();
    if target == (h, w) {
        return Ok(attn.clone());
    }
    if target.0 == 0 || target.1 == 0 || h * target.1 != w * target.0 {
        return Err(param_err!(
            "cannot rescale attention from {h}x{w} to {}x{} (aspect ratio differs)",
            target.0,
            target.1
        ));
    }
    let ys = nearest_indices(target.0, h);
    let xs = nearest_indices(target.1, w);
    let idx: Vec<u32> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y * w + x) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, target.0 * target.1, attn.weights().device())?;
    let gathered = attn.weights().index_select(&idx, 1)?.index_select(&idx, 2)?;
    AttentionTensor::new(renormalize_rows(&gathered)?, target)
}

/// The two fully connected layers of the channel gate.
#[derive(Debug, Clone)]
pub struct CamParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl CamParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(param_err!(
                "channel gate needs at least {reduction} channels, got {channels}"
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels)?,
        })
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.fc2.weight.dim(0)?)
    }
}

/// Squeeze-and-excitation: `sigmoid(fc2(relu(fc1(gap(f_e)))))`.
pub fn cam(f_e: &Tensor, params: &CamParams) -> Result<ChannelGate> {
    let (_, c, _, _) = f_e.dims4()?;
    if c != params.channels()? {
        return Err(shape_err!(
            "channel gate expects {} channels, got {c}",
            params.channels()?
        ));
    }
    let squeezed = f_e.mean(3)?.mean(2)?;
    let hidden = params.fc1.forward(&squeezed)?.relu()?;
    let scores = nn::sigmoid(&params.fc2.forward(&hidden)?)?;
    Ok(ChannelGate { scores })
}

/// Structure transfer: channel-wise product of the gate with the original
/// (unerased) features.
pub fn ftm_s(f_s: &Tensor, gate: &ChannelGate) -> Result<Tensor> {
    let (b, c, _, _) = f_s.dims4()?;
    let (gb, gc) = gate.scores.dims2()?;
    if gb != b || gc != c {
        return Err(shape_err!(
            "gate {:?} does not match features {:?}",
            gate.scores.dims(),
            f_s.dims()
        ));
    }
    Ok(f_s.broadcast_mul(&gate.scores.reshape((b, c, 1, 1))?)?)
}

/// Per-branch 1x1 transforms that bring the three shallow feature maps to a
/// common resolution and width before concatenation.
#[derive(Debug, Clone)]
pub struct TextureAggregator {
    transforms: Vec<Conv2d>,
}

/// Split `total` channels over `parts` branches as evenly as possible.
pub fn split_width(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

impl TextureAggregator {
    pub fn new(store: &mut ParamStore, name: &str, in_widths: [usize; 3], out_width: usize) -> Result<Self> {
        if out_width < 3 {
            return Err(param_err!("aggregate width {out_width} is below 3"));
        }
        let transforms = in_widths
            .iter()
            .zip(split_width(out_width, 3))
            .enumerate()
            .map(|(i, (&cin, cout))| Conv2d::new(store, &format!("{name}.{i}"), cin, cout, 1, 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { transforms })
    }

    pub fn from_transforms(transforms: Vec<Conv2d>) -> Self {
        Self { transforms }
    }

    pub fn out_width(&self) -> Result<usize> {
        self.transforms.iter().map(|t| Ok(t.weight.dim(0)?)).sum()
    }
}

/// Resize `f1, f2, f3` to `size`, transform each with its 1x1 convolution and
/// concatenate along channels.
pub fn aggregate_texture(
    f1: &Tensor,
    f2: &Tensor,
    f3: &Tensor,
    agg: &TextureAggregator,
    size: (usize, usize),
) -> Result<Tensor> {
    let b = f1.dim(0)?;
    if f2.dim(0)? != b || f3.dim(0)? != b {
        return Err(shape_err!("aggregate_texture: batch sizes differ"));
    }
    let parts = [f1, f2, f3]
        .iter()
        .zip(&agg.transforms)
        .map(|(f, t)| t.forward(&resize_bilinear(f, size.0, size.1)?).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 1)?)
}

/// Confidence map resized to `(h, w)` and clamped to `[0, 1]`.
pub fn resize_confidence(ct: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(resize_bilinear(ct, h, w)?.clamp(0.0, 1.0)?)
}

/// How a skip connection treats its features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetKind {
    /// Direct copy.
    Plain,
    /// Erase, then transfer background texture with shared attention.
    Texture,
    /// Erase, gate channels, reweight the original features.
    Structure,
}

/// Switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetSwitches {
    /// Apply the erasing step. When off, features pass through unchanged.
    pub erase: bool,
    /// Apply the transfer step. When off, the erased features are output.
    pub transfer: bool,
    /// Use feature similarity for attention; when off attention is uniform
    /// over background keys.
    pub similarity: bool,
    pub softmax: SoftmaxMode,
}

impl Default for FetSwitches {
    fn default() -> Self {
        Self {
            erase: true,
            transfer: true,
            similarity: true,
            softmax: SoftmaxMode::Literal,
        }
    }
}

/// Shared inputs of every FET block in one forward pass.
#[derive(Debug, Clone)]
pub struct FetGuide {
    /// Confidence map at its native resolution.
    pub confidence: Tensor,
    /// Attention computed once on the aggregated texture features.
    pub attention: Option<AttentionTensor>,
    pub switches: FetSwitches,
}

impl FetGuide {
    pub fn confidence_at(&self, h: usize, w: usize) -> Result<Tensor> {
        resize_confidence(&self.confidence, h, w)
    }
}

/// A feature-map-in, feature-map-out block that can be dropped into any
/// encoder-decoder skip connection.
pub trait FetBlock {
    fn forward(&self, features: &Tensor, guide: &FetGuide) -> Result<Tensor>;
}

/// Layer-wise texture FET: erase, then transfer with the shared attention
/// rescaled to this layer's resolution.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextureFet;

impl FetBlock for TextureFet {
    fn forward(&self, features: &Tensor, guide: &FetGuide) -> Result<Tensor> {
        let (_, _, h, w) = features.dims4()?;
        let ct = guide.confidence_at(h, w)?;
        let f_e = if guide.switches.erase {
            fem(features, &ct)?
        } else {
            features.clone()
        };
        if !guide.switches.transfer {
            return Ok(f_e);
        }
        let attn = guide
            .attention
            .as_ref()
            .ok_or_else(|| param_err!("texture FET needs shared attention"))?;
        let (ah, aw) = attn.resolution();
        if h % ah == 0 && w % aw == 0 && h / ah == w / aw && h > ah {
            ftm_t_upscaled(&f_e, attn, &ct, h / ah)
        } else {
            let scaled = rescale_attention(attn, (h, w))?;
            ftm_t(&f_e, &scaled, &ct)
        }
    }
}

/// Structure FET with its channel gate.
#[derive(Debug, Clone)]
pub struct StructureFet {
    pub cam: CamParams,
}

impl FetBlock for StructureFet {
    fn forward(&self, features: &Tensor, guide: &FetGuide) -> Result<Tensor> {
        let (_, _, h, w) = features.dims4()?;
        let ct = guide.confidence_at(h, w)?;
        let f_e = if guide.switches.erase {
            fem(features, &ct)?
        } else {
            features.clone()
        };
        if !guide.switches.transfer {
            return Ok(f_e);
        }
        let gate = cam(&f_e, &self.cam)?;
        ftm_s(features, &gate)
    }
}

/// Direct copy.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainSkip;

impl FetBlock for PlainSkip {
    fn forward(&self, features: &Tensor, _guide: &FetGuide) -> Result<Tensor> {
        Ok(features.clone())
    }
}

/// Intermediate tensors of the aggregated texture path, kept for inspection.
#[derive(Debug, Clone)]
pub struct TexturePath {
    pub aggregated: Tensor,
    pub erased: Tensor,
    pub filled: Option<Tensor>,
    pub attention: Option<AttentionTensor>,
    pub output: Tensor,
}

/// Full texture FET on aggregated features at the attention resolution:
/// erase, coarse fill, similarity attention, transfer.
pub fn texture_fet(
    f_at: &Tensor,
    ct: &Tensor,
    sam: &SamParams,
    switches: FetSwitches,
    max_positions: usize,
) -> Result<TexturePath> {
    let (_, _, h, w) = f_at.dims4()?;
    if h * w > max_positions {
        return Err(param_err!(
            "attention over {} positions exceeds the ceiling of {max_positions}",
            h * w
        ));
    }
    let erased = if switches.erase { fem(f_at, ct)? } else { f_at.clone() };
    let (filled, attention) = if switches.similarity {
        let filled = sam_fill(&erased, ct, sam)?;
        let s = cosine_similarity_map(&filled)?;
        (Some(filled), background_attention(&s, ct, switches.softmax)?)
    } else {
        (None, uniform_background_attention(ct)?)
    };
    let output = if switches.transfer {
        ftm_t(&erased, &attention, ct)?
    } else {
        erased.clone()
    };
    Ok(TexturePath {
        aggregated: f_at.clone(),
        erased,
        filled,
        attention: Some(attention),
        output,
    })
}

/// Structure FET applied to the aggregated features (used when the aggregate
/// path is configured as structure-only).
pub fn structure_fet_on(f: &Tensor, ct: &Tensor, cam_params: &CamParams, switches: FetSwitches) -> Result<Tensor> {
    let f_e = if switches.erase { fem(f, ct)? } else { f.clone() };
    if !switches.transfer {
        return Ok(f_e);
    }
    ftm_s(f, &cam(&f_e, cam_params)?)
}

/// Hard 0/1 version of a confidence map with the gradient blocked.
pub fn hard_mask(ct: &Tensor, theta: f64) -> Result<Tensor> {
    Ok(ct.ge(theta)?.to_dtype(ct.dtype())?.detach())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn t4(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    fn conv1x1(weights: &[f64], cout: usize, bias: &[f64]) -> Conv2d {
        let cin = weights.len() / cout;
        let w = Tensor::from_vec(weights.to_vec(), (cout, cin, 1, 1), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(bias.to_vec(), cout, &Device::Cpu).unwrap();
        Conv2d::from_tensors(w, Some(b), 1, 0)
    }

    #[test]
    fn fem_hand_example() {
        let f = t4(&[1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        let ct = t4(&[0.5, 0.0, 1.0, 0.25], (1, 1, 2, 2));
        assert_close(&flat(&fem(&f, &ct).unwrap()), &[0.5, 2.0, 0.0, 3.0], 1e-12);
    }

    #[test]
    fn fem_rejects_mismatched_map() {
        let f = t4(&[0.0; 8], (1, 2, 2, 2));
        let ct = t4(&[0.0; 2], (1, 1, 1, 2));
        assert!(fem(&f, &ct).is_err());
    }

    #[test]
    fn sam_hand_example() {
        let f_e = t4(&[1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        let ct = t4(&[0.0, 1.0, 0.5, 0.0], (1, 1, 2, 2));
        let params = SamParams {
            blocks: vec![(conv1x1(&[1.0, -2.0], 1, &[0.0]), conv1x1(&[2.0, 1.0], 1, &[-1.0]))],
        };
        let out = sam_fill(&f_e, &ct, &params).unwrap();
        assert_close(
            &flat(&out),
            &[0.7310585786300049, 2.0, 4.844383928878353, 6.874096530265359],
            1e-12,
        );
    }

    #[test]
    fn sam_zero_filters_give_zero() {
        let f_e = random_tensor(&[2, 3, 4, 4], -1.0, 1.0, 1).unwrap();
        let ct = random_tensor(&[2, 1, 4, 4], 0.0, 1.0, 2).unwrap();
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu).with_zero_init();
        let params = SamParams::new(&mut store, "sam", 3, 3, 2).unwrap();
        assert!(flat(&sam_fill(&f_e, &ct, &params).unwrap()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_hand_example() {
        // Positions (1, 1) and (1, 0) in a 2-channel, 1x2 map.
        let f = t4(&[1.0, 1.0, 1.0, 0.0], (1, 2, 1, 2));
        let s = flat(&cosine_similarity_map(&f).unwrap());
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_close(&s, &[1.0, r, r, 1.0], 1e-8);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero_and_finite() {
        let f = t4(&[0.0, 1.0, 0.0, 0.0], (1, 2, 1, 2));
        let s = flat(&cosine_similarity_map(&f).unwrap());
        assert_close(&s, &[0.0, 0.0, 0.0, 1.0], 1e-12);
    }

    #[test]
    fn two_position_attention_example() {
        let f = t4(&[1.0, 0.0], (1, 1, 1, 2));
        let ct = t4(&[0.0, 1.0], (1, 1, 1, 2));
        let s = cosine_similarity_map(&f).unwrap();
        let attn = background_attention(&s, &ct, SoftmaxMode::Literal).unwrap();
        let w = flat(attn.weights());
        let e = std::f64::consts::E;
        assert_close(&w, &[e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5], 1e-12);
        let masked = background_attention(&s, &ct, SoftmaxMode::Masked).unwrap();
        assert_close(&flat(masked.weights()), &[1.0, 0.0, 1.0, 0.0], 1e-12);
    }

    #[test]
    fn ftm_t_hand_example() {
        let f = t4(&[2.0, 0.0], (1, 1, 1, 2));
        let ct = t4(&[0.0, 1.0], (1, 1, 1, 2));
        let s = t4(&[1.0, 0.0, 0.0, 1.0], (1, 1, 2, 2)).reshape((1, 2, 2)).unwrap();
        let attn = background_attention(&s, &ct, SoftmaxMode::Literal).unwrap();
        let out = ftm_t(&f, &attn, &ct).unwrap();
        assert_close(&flat(&out), &[2.0, 1.0], 1e-12);
    }

    #[test]
    fn rescale_identity_and_delta_upscale() {
        let eye = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let attn = AttentionTensor::new(eye, (2, 2)).unwrap();
        let same = rescale_attention(&attn, (2, 2)).unwrap();
        assert_eq!(flat(same.weights()), flat(attn.weights()));

        let up = rescale_attention(&attn, (4, 4)).unwrap();
        let w = up.weights().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (q, row) in w.iter().enumerate() {
            let (qy, qx) = (q / 4, q % 4);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (k, &v) in row.iter().enumerate() {
                let (ky, kx) = (k / 4, k % 4);
                let same_block = ky / 2 == qy / 2 && kx / 2 == qx / 2;
                let expected = if same_block { 0.25 } else { 0.0 };
                assert_eq!(v, expected, "q={q} k={k}");
            }
        }
        assert!(rescale_attention(&attn, (4, 2)).is_err());
    }

    #[test]
    fn upscaled_transfer_equals_literal_rescale() {
        for &(h, w, factor) in &[(2, 2, 2), (2, 3, 4), (3, 2, 3)] {
            let coarse = random_tensor(&[2, h * w, h * w], 0.0, 1.0, 3).unwrap();
            let attn = AttentionTensor::new(renormalize_rows(&coarse).unwrap(), (h, w)).unwrap();
            let f = random_tensor(&[2, 3, h * factor, w * factor], -1.0, 1.0, 4).unwrap();
            let ct = random_tensor(&[2, 1, h * factor, w * factor], 0.0, 1.0, 5).unwrap();
            let fast = ftm_t_upscaled(&f, &attn, &ct, factor).unwrap();
            let scaled = rescale_attention(&attn, (h * factor, w * factor)).unwrap();
            let slow = ftm_t(&f, &scaled, &ct).unwrap();
            assert_close(&flat(&fast), &flat(&slow), 1e-12);
        }
    }

    #[test]
    fn cam_hand_example() {
        let f = t4(&[1.0, 2.0, 3.0, 6.0], (1, 1, 2, 2));
        let one = |v: f64| Tensor::from_vec(vec![v], 1, &Device::Cpu).unwrap();
        let mat = |v: f64| Tensor::from_vec(vec![v], (1, 1), &Device::Cpu).unwrap();
        let params = CamParams {
            fc1: Linear::from_tensors(mat(2.0), one(0.5)),
            fc2: Linear::from_tensors(mat(-1.0), one(0.25)),
        };
        let gate = cam(&f, &params).unwrap();
        assert_close(&flat(&gate.scores), &[0.0019267346633274757], 1e-12);
    }

    #[test]
    fn cam_with_zero_weights_is_one_half() {
        let f = random_tensor(&[2, 8, 3, 3], -1.0, 1.0, 6).unwrap();
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu).with_zero_init();
        let params = CamParams::new(&mut store, "cam", 8, 4).unwrap();
        let scores = flat(&cam(&f, &params).unwrap().scores);
        assert!(scores.iter().all(|&s| s == 0.5));
        assert!(CamParams::new(&mut store, "small", 3, 4).is_err());
    }

    #[test]
    fn ftm_s_scales_channels() {
        let f = random_tensor(&[1, 2, 3, 3], -1.0, 1.0, 7).unwrap();
        let ones = ChannelGate {
            scores: Tensor::ones((1, 2), DType::F64, &Device::Cpu).unwrap(),
        };
        assert_eq!(flat(&ftm_s(&f, &ones).unwrap()), flat(&f));
        let gate = ChannelGate {
            scores: Tensor::from_vec(vec![0.5, 0.25], (1, 2), &Device::Cpu).unwrap(),
        };
        let out = ftm_s(&f, &gate).unwrap();
        let fv = f.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let ov = out.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for c in 0..2 {
            let g = [0.5, 0.25][c];
            for i in 0..3 {
                for j in 0..3 {
                    assert!((ov[c][i][j] - g * fv[c][i][j]).abs() < 1e-15);
                }
            }
            let l1_in: f64 = fv[c].iter().flatten().map(|v| v.abs()).sum();
            let l1_out: f64 = ov[c].iter().flatten().map(|v| v.abs()).sum();
            assert!((l1_out - g * l1_in).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_shapes_and_zero_case() {
        let mut store = ParamStore::new(1, DType::F64, &Device::Cpu);
        let agg = TextureAggregator::new(&mut store, "agg", [8, 16, 32], 32).unwrap();
        assert_eq!(split_width(32, 3), [11, 11, 10]);
        let f1 = random_tensor(&[2, 8, 64, 64], -1.0, 1.0, 1).unwrap();
        let f2 = random_tensor(&[2, 16, 32, 32], -1.0, 1.0, 2).unwrap();
        let f3 = random_tensor(&[2, 32, 16, 16], -1.0, 1.0, 3).unwrap();
        let out = aggregate_texture(&f1, &f2, &f3, &agg, (16, 16)).unwrap();
        assert_eq!(out.dims(), &[2, 32, 16, 16]);
        let again = aggregate_texture(&f1, &f2, &f3, &agg, (16, 16)).unwrap();
        assert_eq!(flat(&out), flat(&again));

        let mut zero_store = ParamStore::new(1, DType::F64, &Device::Cpu).with_zero_init();
        let zero_agg = TextureAggregator::new(&mut zero_store, "agg", [8, 16, 32], 32).unwrap();
        let z = |s: &[usize]| Tensor::zeros(s, DType::F64, &Device::Cpu).unwrap();
        let out = aggregate_texture(
            &z(&[1, 8, 64, 64]),
            &z(&[1, 16, 32, 32]),
            &z(&[1, 32, 16, 16]),
            &zero_agg,
            (16, 16),
        )
        .unwrap();
        assert!(flat(&out).iter().all(|&v| v == 0.0));
        assert!(aggregate_texture(&f1, &z(&[1, 16, 32, 32]), &f3, &agg, (16, 16)).is_err());
    }

    #[test]
    fn attention_ceiling_is_enforced() {
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let sam = SamParams::new(&mut store, "sam", 2, 3, 1).unwrap();
        let f = random_tensor(&[1, 2, 8, 8], -1.0, 1.0, 1).unwrap();
        let ct = random_tensor(&[1, 1, 8, 8], 0.0, 1.0, 2).unwrap();
        let err = texture_fet(&f, &ct, &sam, FetSwitches::default(), 32).unwrap_err();
        assert!(err.to_string().contains("64"));
        assert!(texture_fet(&f, &ct, &sam, FetSwitches::default(), 64).is_ok());
    }

    #[test]
    fn query_maps_reshape_rows() {
        let w = random_tensor(&[1, 6, 6], 0.0, 1.0, 9).unwrap();
        let attn = AttentionTensor::new(w.clone(), (2, 3)).unwrap();
        let maps = attn.as_query_maps().unwrap();
        assert_eq!(maps.dims(), &[1, 2, 3, 6]);
        let row = flat(&maps.get(0).unwrap().get(1).unwrap().get(2).unwrap());
        assert_eq!(row, flat(&w.get(0).unwrap().get(5).unwrap()));
    }

    #[test]
    fn hard_mask_blocks_gradient() {
        let ct = candle_core::Var::from_tensor(&t4(&[0.2, 0.6, 0.5, 0.9], (1, 1, 2, 2))).unwrap();
        let m = hard_mask(&ct, 0.5).unwrap();
        assert_eq!(flat(&m), [0.0, 1.0, 1.0, 1.0]);
        let grads = (m * 3.0).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(&ct).is_none());
    }

    fn map_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..1.0], n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn erasure_zeroes_text_positions(
            f in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 4),
            ct in map_strategy(3 * 4),
        ) {
            let fe = fem(&t4(&f, (1, 2, 3, 4)), &t4(&ct, (1, 1, 3, 4))).unwrap();
            let fe = flat(&fe);
            for c in 0..2 {
                for p in 0..12 {
                    let v = fe[c * 12 + p];
                    if ct[p] == 1.0 {
                        prop_assert_eq!(v, 0.0);
                    } else if ct[p] == 0.0 {
                        prop_assert_eq!(v, f[c * 12 + p]);
                    }
                    prop_assert!(v.abs() <= f[c * 12 + p].abs() + 1e-12);
                }
            }
        }

        #[test]
        fn attention_rows_are_distributions_with_masked_text_keys(
            f in prop::collection::vec(-2.0f64..2.0, 3 * 9),
            ct in map_strategy(9),
        ) {
            let s = cosine_similarity_map(&t4(&f, (1, 3, 3, 3))).unwrap();
            let sv = s.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            for (q, row) in sv.iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    prop_assert!((v - sv[k][q]).abs() < 1e-12);
                    prop_assert!(v.abs() <= 1.0 + 1e-9);
                }
            }
            let ctt = t4(&ct, (1, 1, 3, 3));
            let st = background_concurrency(&s, &ctt).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            for q in 0..9 {
                for k in 0..9 {
                    if ct[q] == 1.0 || ct[k] == 1.0 {
                        prop_assert_eq!(st[q][k], 0.0);
                    }
                }
            }
            for mode in [SoftmaxMode::Literal, SoftmaxMode::Masked] {
                let a = background_attention(&s, &ctt, mode).unwrap();
                let w = a.weights().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
                for row in &w {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                if mode == SoftmaxMode::Masked && ct.iter().any(|&c| c < 1.0) {
                    for row in &w {
                        for k in 0..9 {
                            if ct[k] == 1.0 {
                                prop_assert_eq!(row[k], 0.0);
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn transfer_keeps_background_positions(
            f in prop::collection::vec(-2.0f64..2.0, 2 * 8),
            ct in map_strategy(8),
        ) {
            let ft = t4(&f, (1, 2, 2, 4));
            let ctt = t4(&ct, (1, 1, 2, 4));
            let fe = fem(&ft, &ctt).unwrap();
            let s = cosine_similarity_map(&fe).unwrap();
            let a = background_attention(&s, &ctt, SoftmaxMode::Literal).unwrap();
            let out = flat(&ftm_t(&fe, &a, &ctt).unwrap());
            let fe = flat(&fe);
            for c in 0..2 {
                for p in 0..8 {
                    if ct[p] == 0.0 {
                        prop_assert_eq!(out[c * 8 + p], fe[c * 8 + p]);
                    }
                }
            }
        }

        #[test]
        fn gate_preserves_sign_and_shrinks(
            f in prop::collection::vec(-3.0f64..3.0, 4 * 4),
            seed in 0u64..1000,
        ) {
            let ft = t4(&f, (1, 4, 2, 2));
            let mut store = ParamStore::new(seed, DType::F64, &Device::Cpu);
            let params = CamParams::new(&mut store, "cam", 4, 2).unwrap();
            let gate = cam(&ft, &params).unwrap();
            for s in flat(&gate.scores) {
                prop_assert!(s > 0.0 && s < 1.0);
            }
            let out = flat(&ftm_s(&ft, &gate).unwrap());
            for (o, i) in out.iter().zip(&f) {
                prop_assert!(o * i >= 0.0);
                prop_assert!(o.abs() <= i.abs());
            }
        }
    }
}
