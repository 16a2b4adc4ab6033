//! Small neural network toolkit on top of candle: convolutions as custom ops,
//! named parameter storage with seeded initialization, basic layers and
//! differentiable resizing.

pub mod conv;
mod layers;
mod params;
mod resize;

pub use layers::{Conv2d, ConvTranspose2d, Linear, ResBlock};
pub use params::{Init, ParamStore};
pub use resize::{avg_pool, max_pool2, nearest_upsample, resize_bilinear};

use candle_core::{Result, Tensor};

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.maximum(&(x * slope)?)
}

/// Softmax over the last dimension. The max shift is detached so it adds no
/// gradient path.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(candle_core::D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(candle_core::D::Minus1)?;
    e.broadcast_div(&s)
}
