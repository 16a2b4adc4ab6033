use candle_core::{Result, Tensor};

use super::conv::{conv2d, conv_transpose2d};
use super::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding for odd kernels at stride 1.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_padding(store, name, cin, cout, k, stride, (k - 1) / 2)
    }

    pub fn with_padding(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = store.create(
            &format!("{name}.weight"),
            &[cout, cin, k, k],
            Init::KaimingUniform { fan_in, gain: 1.0 },
        )?;
        let bias = store.create(&format!("{name}.bias"), &[cout], Init::Bias { fan_in })?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            pad,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution; weight layout `[cin, cout, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = cin * k * k / (stride * stride);
        let weight = store.create(
            &format!("{name}.weight"),
            &[cin, cout, k, k],
            Init::KaimingUniform { fan_in, gain: 1.0 },
        )?;
        let bias = store.create(&format!("{name}.bias"), &[cout], Init::Bias { fan_in })?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, &self.weight, self.stride, self.pad, 0)?;
        y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let weight = store.create(
            &format!("{name}.weight"),
            &[cout, cin],
            Init::KaimingUniform { fan_in: cin, gain: 1.0 },
        )?;
        let bias = store.create(&format!("{name}.bias"), &[cout], Init::Bias { fan_in: cin })?;
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    /// `x: [batch, cin] -> [batch, cout]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Two convolutions with an identity shortcut, or a strided 1x1 projection
/// when the width or resolution changes. Downsampling happens in the first
/// convolution.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, k, stride)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, k, 1)?;
        let shortcut = if cin != cout || stride != 1 {
            Some(Conv2d::with_padding(
                store,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                stride,
                0,
            )?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        (h + skip)?.relu()
    }
}
