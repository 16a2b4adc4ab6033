//! 2-D convolution and transposed convolution as custom ops.
//!
//! Convolutions are an unfold (im2col) followed by a matrix product, and
//! transposed convolutions a matrix product followed by a fold (col2im). The
//! fold and unfold are adjoint custom ops whose backward passes are each
//! other, so every path is differentiable to any order.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }

    /// Range of output positions whose tap `k` lands inside `[0, input)`.
    #[inline]
    fn valid_range(&self, k: usize, input: usize, output: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o * s + off >= 0  and  o * s + off <= input - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_num = input as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(output as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// Unfolds `[n, c, h, w]` into `[n, c * k * k, ho * wo]`; zero outside the
/// input.
fn im2col<T: Float>(x: &[T], (n, c, h, w): (usize, usize, usize, usize), k: usize, g: ConvGeom) -> Vec<T> {
    let ho = g.out_len(h, k);
    let wo = g.out_len(w, k);
    let l = ho * wo;
    let mut cols = vec![T::zero(); n * c * k * k * l];
    for b in 0..n {
        for ci in 0..c {
            let plane = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, h, ho);
                for kx in 0..k {
                    let (ox0, ox1) = g.valid_range(kx, w, wo);
                    let r = (b * c + ci) * k * k + ky * k + kx;
                    let row = &mut cols[r * l..(r + 1) * l];
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &plane[iy * w..(iy + 1) * w];
                        let dst = &mut row[oy * wo + ox0..oy * wo + ox1];
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[n, c, h, w]`.
fn col2im<T: Float + std::ops::AddAssign>(
    cols: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    g: ConvGeom,
) -> Vec<T> {
    let ho = g.out_len(h, k);
    let wo = g.out_len(w, k);
    let l = ho * wo;
    let mut x = vec![T::zero(); n * c * h * w];
    for b in 0..n {
        for ci in 0..c {
            let plane = &mut x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_range(ky, h, ho);
                for kx in 0..k {
                    let (ox0, ox1) = g.valid_range(kx, w, wo);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let r = (b * c + ci) * k * k + ky * k + kx;
                    let row = &cols[r * l..(r + 1) * l];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        let src = &row[oy * wo + ox0..oy * wo + ox1];
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            for (d, &s) in dst[ix0..ix0 + src.len()].iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (j, &s) in src.iter().enumerate() {
                                dst[ix0 + j * g.stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone, Copy)]
enum Direction {
    /// `[n, c, h, w] -> [n, c k k, ho wo]`
    Unfold,
    /// `[n, c k k, ho wo] -> [n, c, h, w]`
    Fold { c: usize, h: usize, w: usize },
}

#[derive(Debug, Clone, Copy)]
struct PatchOp {
    k: usize,
    geom: ConvGeom,
    dir: Direction,
}

fn slice<'a, T: candle_core::WithDType>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("patch op requires contiguous inputs"),
    }
}

impl PatchOp {
    fn run<T: Float + std::ops::AddAssign + candle_core::WithDType>(
        &self,
        a: &[T],
        la: &Layout,
    ) -> Result<(Vec<T>, Shape)> {
        let a = slice(a, la)?;
        let (k, g) = (self.k, self.geom);
        match self.dir {
            Direction::Unfold => {
                let (n, c, h, w) = la.shape().dims4()?;
                if h + 2 * g.pad < k || w + 2 * g.pad < k {
                    candle_core::bail!("conv: kernel {k} larger than padded input {h}x{w}");
                }
                let l = g.out_len(h, k) * g.out_len(w, k);
                Ok((im2col(a, (n, c, h, w), k, g), Shape::from((n, c * k * k, l))))
            }
            Direction::Fold { c, h, w } => {
                let (n, ckk, l) = la.shape().dims3()?;
                if ckk != c * k * k || l != g.out_len(h, k) * g.out_len(w, k) {
                    candle_core::bail!("fold: columns {:?} do not match {c}x{h}x{w} with k={k}", la.shape());
                }
                Ok((col2im(a, (n, c, h, w), k, g), Shape::from((n, c, h, w))))
            }
        }
    }
}

impl CustomOp1 for PatchOp {
    fn name(&self) -> &'static str {
        match self.dir {
            Direction::Unfold => "im2col",
            Direction::Fold { .. } => "col2im",
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(a) => {
                let (v, s) = self.run(a, l)?;
                Ok((CpuStorage::F32(v), s))
            }
            CpuStorage::F64(a) => {
                let (v, s) = self.run(a, l)?;
                Ok((CpuStorage::F64(v), s))
            }
            _ => candle_core::bail!("patch op supports f32 or f64 only"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let dir = match self.dir {
            Direction::Unfold => {
                let (_, c, h, w) = arg.dims4()?;
                Direction::Fold { c, h, w }
            }
            Direction::Fold { .. } => Direction::Unfold,
        };
        grad.contiguous()?.apply_op1(PatchOp { dir, ..*self }).map(Some)
    }
}

fn unfold(x: &Tensor, k: usize, geom: ConvGeom) -> Result<Tensor> {
    x.contiguous()?.apply_op1(PatchOp {
        k,
        geom,
        dir: Direction::Unfold,
    })
}

fn fold(cols: &Tensor, c: usize, h: usize, w: usize, k: usize, geom: ConvGeom) -> Result<Tensor> {
    cols.contiguous()?.apply_op1(PatchOp {
        k,
        geom,
        dir: Direction::Fold { c, h, w },
    })
}

/// Cross-correlation of `x: [n, ci, h, w]` with `w: [co, ci, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, wci, k, k2) = w.dims4()?;
    if wci != ci || k != k2 {
        candle_core::bail!("conv: kernel {:?} incompatible with input {:?}", w.shape(), x.shape());
    }
    let geom = ConvGeom { stride, pad };
    let cols = unfold(x, k, geom)?;
    let y = w.reshape((co, ci * k * k))?.broadcast_matmul(&cols)?;
    y.reshape((n, co, geom.out_len(h, k), geom.out_len(wd, k)))
}

/// Transposed convolution of `x: [n, ci, h, w]` with `w: [ci, co, k, k]`
/// (PyTorch weight layout). The output size is
/// `(h - 1) * stride - 2 * pad + k + output_pad`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize, output_pad: usize) -> Result<Tensor> {
    let (n, ci, h, wd) = x.dims4()?;
    let (wci, co, k, k2) = w.dims4()?;
    if wci != ci || k != k2 {
        candle_core::bail!(
            "conv transpose: kernel {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        );
    }
    if output_pad >= stride.max(1) && output_pad > 0 {
        candle_core::bail!("output padding {output_pad} must be smaller than the stride");
    }
    let oh = (h - 1) * stride + k + output_pad - 2 * pad;
    let ow = (wd - 1) * stride + k + output_pad - 2 * pad;
    let geom = ConvGeom { stride, pad };
    let wm = w.reshape((ci, co * k * k))?.t()?;
    let cols = wm.broadcast_matmul(&x.reshape((n, ci, h * wd))?)?;
    fold(&cols, co, oh, ow, k, geom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn forward_matches_candle_conv() {
        for &(ci, co, k, s, p, h) in &[
            (3, 4, 7, 1, 3, 9),
            (4, 5, 5, 2, 2, 10),
            (2, 3, 3, 2, 1, 7),
            (3, 2, 4, 2, 1, 8),
            (2, 2, 1, 2, 0, 8),
            (2, 3, 3, 1, 0, 6),
        ] {
            let x = rand(&[2, ci, h, h + 1], 1);
            let w = rand(&[co, ci, k, k], 2);
            let ours = conv2d(&x, &w, s, p).unwrap();
            let reference = x.conv2d(&w, p, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn transpose_matches_candle_conv_transpose() {
        for &(ci, co, k, s, p, op) in &[(3, 2, 4, 2, 1, 0), (2, 3, 3, 1, 1, 0), (2, 2, 3, 2, 1, 1)] {
            let x = rand(&[2, ci, 5, 4], 3);
            let w = rand(&[ci, co, k, k], 4);
            let ours = conv_transpose2d(&x, &w, s, p, op).unwrap();
            let reference = x.conv_transpose2d(&w, p, op, s, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-12);
        }
    }

    #[test]
    fn gradients_match_candle_autograd() {
        // candle's own backward mis-sizes odd inputs at stride 2, so compare on
        // even sizes and leave odd sizes to the finite-difference test below.
        let x = Var::from_tensor(&rand(&[2, 3, 8, 6], 5)).unwrap();
        let w = Var::from_tensor(&rand(&[4, 3, 3, 3], 6)).unwrap();
        let probe = rand(&[2, 4, 4, 3], 7);
        let ours = (conv2d(&x, &w, 2, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let theirs = (x.conv2d(&w, 1, 2, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let g1 = ours.backward().unwrap();
        let g2 = theirs.backward().unwrap();
        assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
        assert!(max_diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-12);
    }

    #[test]
    fn transpose_gradients_match_candle_autograd() {
        let x = Var::from_tensor(&rand(&[1, 3, 4, 4], 8)).unwrap();
        let w = Var::from_tensor(&rand(&[3, 2, 4, 4], 9)).unwrap();
        let probe = rand(&[1, 2, 8, 8], 10);
        let ours = (conv_transpose2d(&x, &w, 2, 1, 0).unwrap() * &probe)
            .unwrap()
            .sum_all()
            .unwrap();
        let g1 = ours.backward().unwrap();
        // Reference: the transposed conv is the adjoint of conv2d, so
        // <convT(x), p> = <x, conv(p)> and the gradient wrt x is conv(p).
        let dx_ref = probe.conv2d(&w, 1, 2, 1, 1).unwrap();
        assert!(max_diff(g1.get(&x).unwrap(), &dx_ref) < 1e-12);
        let _ = DType::F64;
    }

    #[test]
    fn odd_sizes_pass_finite_differences() {
        use crate::gradcheck::{check_gradients, GradCheckConfig};
        let x = rand(&[1, 2, 7, 5], 13);
        let w = rand(&[3, 2, 3, 3], 14);
        let r = check_gradients(
            |t| Ok(conv2d(&t[0], &t[1], 2, 1)?),
            &[x.clone(), w.clone()],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        let wt = rand(&[2, 3, 4, 4], 15);
        let r = check_gradients(
            |t| Ok(conv_transpose2d(&t[0], &t[1], 2, 1, 1)?),
            &[x, wt],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn f32_path_runs() {
        let x = rand(&[1, 2, 5, 5], 11).to_dtype(DType::F32).unwrap();
        let w = rand(&[2, 2, 3, 3], 12).to_dtype(DType::F32).unwrap();
        let ours = conv2d(&x, &w, 1, 1).unwrap();
        let reference = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let d = (ours - reference)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-5);
    }
}
