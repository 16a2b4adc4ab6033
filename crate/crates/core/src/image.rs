//! Interleaved floating point images in `[0, 1]`.
//!
//! Pixels are stored row-major with interleaved channels (`H x W x C`). Conversion
//! to and from 8-bit PNG happens only at file boundaries.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err!(
                "image dims {:?} differ from {:?}",
                self.dims(),
                other.dims()
            ));
        }
        Ok(())
    }

    /// Number of strictly positive entries (useful for binary masks).
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// BT.601 luminance in `[0, 1]`. Single-channel images are returned as is.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f64).collect(),
            _ => self
                .data
                .chunks_exact(self.channels)
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Crop to the top-left `height x width` region.
    pub fn crop(&self, height: usize, width: usize) -> Image {
        let mut out = Image::new(height, width, self.channels);
        for y in 0..height.min(self.height) {
            for x in 0..width.min(self.width) {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Pad on the bottom and right by edge replication.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Image {
        let mut out = Image::new(height, width, self.channels);
        for y in 0..height {
            for x in 0..width {
                let sy = y.min(self.height - 1);
                let sx = x.min(self.width - 1);
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(sy, sx, c));
                }
            }
        }
        out
    }

    /// `(C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`Image::to_tensor`]; accepts `(C, H, W)` or `(1, C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(shape_err!("expected a CHW tensor, got {:?}", t.dims())),
        };
        let (c, h, w) = t.dims3()?;
        let data = t
            .permute((1, 2, 0))?
            .contiguous()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Image::from_vec(h, w, c, data)
    }

    /// Stack images into an `(N, C, H, W)` batch.
    pub fn batch(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|im| im.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (channels, raw, w, h) = match dynimg.color().channel_count() {
            1 | 2 => {
                let g = dynimg.to_luma8();
                let (w, h) = g.dimensions();
                (1, g.into_raw(), w, h)
            }
            _ => {
                let rgb = dynimg.to_rgb8();
                let (w, h) = rgb.dimensions();
                (3, rgb.into_raw(), w, h)
            }
        };
        let data = raw.into_iter().map(|v| v as f32 / 255.0).collect();
        Image::from_vec(h as usize, w as usize, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let result = match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).map(|im| im.save(path)),
            3 => image::RgbImage::from_raw(w, h, bytes).map(|im| im.save(path)),
            c => return Err(shape_err!("cannot write {c}-channel image as PNG")),
        };
        match result {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
            None => Err(shape_err!("buffer size mismatch writing {}", path.display())),
        }
    }

    /// Quantize through 8 bits, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Image { data, ..self.clone() }
    }
}
