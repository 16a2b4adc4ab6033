use candle_core::{DType, Device, Result, Tensor};

/// Row-interpolation matrix `[out, in]` for half-pixel-centre bilinear
/// sampling (the `align_corners = false` convention).
fn interp_matrix(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

fn matrix(out: usize, input: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Tensor::from_vec(interp_matrix(out, input), (out, input), device)?.to_dtype(dtype)
}

/// Bilinear resize of `[n, c, h, w]` to `[n, c, height, width]`, implemented
/// as two matrix products so it is differentiable.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == height && w == width {
        return Ok(x.clone());
    }
    let rw = matrix(width, w, x.dtype(), x.device())?.t()?;
    let rh = matrix(height, h, x.dtype(), x.device())?;
    let y = x.broadcast_matmul(&rw)?;
    rh.broadcast_matmul(&y)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn nearest_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .contiguous()?
        .reshape((n, c, h * factor, w * factor))
}

/// Non-overlapping average pooling by an integer factor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    x.narrow(2, 0, 2 * h2)?
        .narrow(3, 0, 2 * w2)?
        .reshape((b, c, h2, 2, w2, 2))?
        .max(5)?
        .max(3)
}
