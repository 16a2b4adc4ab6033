//! Single-image inference with optional FET feature dumps.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use super::evaluate::MASK_THRESHOLD;
use crate::error::Result;
use crate::fet::FetKind;
use crate::image::Image;
use crate::model::{threshold_mask, ForwardOptions, Generator};

/// Channels shown per grid.
pub const MAX_GRID_CHANNELS: usize = 64;

#[derive(Debug, Clone)]
pub struct Inference {
    pub output: Image,
    pub confidence: Image,
    pub mask: Image,
    /// `(name, grid)` per FET-equipped skip connection.
    pub grids: Vec<(String, Image)>,
}

/// Run the generator on one image of any size. The image is padded by edge
/// replication to a multiple of 16 and every result is cropped back.
pub fn infer_image(generator: &Generator, image: &Image, dump_features: bool) -> Result<Inference> {
    let (h, w, _) = image.dims();
    let (ph, pw) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
    let padded = image.pad_replicate(ph, pw);
    let x = padded.to_tensor(generator.dtype(), generator.device())?.unsqueeze(0)?;
    let out = generator.forward_with(
        &x,
        &ForwardOptions {
            record_features: dump_features,
            ..Default::default()
        },
    )?;
    let first = |t: &Tensor| -> Result<Image> { Ok(Image::from_tensor(&t.get(0)?.to_dtype(DType::F32)?)?.crop(h, w)) };
    let grids = out
        .records
        .iter()
        .map(|r| {
            let kind = match r.kind {
                FetKind::Texture => "texture",
                FetKind::Structure => "structure",
                FetKind::Plain => "plain",
            };
            Ok((
                format!("fet_layer{}_{kind}", r.level + 1),
                feature_grid(&r.input, &r.output)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Inference {
        output: first(&out.image)?,
        confidence: first(&out.confidence.at_size(ph, pw)?)?,
        mask: first(&threshold_mask(&out.confidence, MASK_THRESHOLD, (ph, pw))?)?,
        grids,
    })
}

/// Channel maps of the first batch element, each min-max normalized, tiled
/// in a near-square grid.
fn tile(t: &Tensor) -> Result<Image> {
    let (_, c, h, w) = t.dims4()?;
    let n = c.min(MAX_GRID_CHANNELS);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let planes = t.get(0)?.to_dtype(DType::F32)?.to_vec3::<f32>()?;
    let mut img = Image::filled(rows * (h + 1) - 1, cols * (w + 1) - 1, 1, 1.0);
    for (i, plane) in planes.iter().take(n).enumerate() {
        let (lo, hi) = plane
            .iter()
            .flatten()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for (y, row) in plane.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                img.set(oy + y, ox + x, 0, (v - lo) / span);
            }
        }
    }
    Ok(img)
}

/// The input grid above the output grid, separated by a 2-pixel band.
pub fn feature_grid(input: &Tensor, output: &Tensor) -> Result<Image> {
    let a = tile(input)?;
    let b = tile(output)?;
    let width = a.width().max(b.width());
    let mut img = Image::filled(a.height() + 2 + b.height(), width, 1, 1.0);
    for (src, oy) in [(&a, 0), (&b, a.height() + 2)] {
        for y in 0..src.height() {
            for x in 0..src.width() {
                img.set(oy + y, x, 0, src.get(y, x, 0));
            }
        }
    }
    Ok(img)
}

/// Write `<stem>_output.png`, `<stem>_confidence.png`, `<stem>_mask.png` and
/// one PNG per feature grid into `dir`.
pub fn write_inference(dir: &Path, stem: &str, inf: &Inference) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut save = |name: String, img: &Image| -> Result<()> {
        let p = dir.join(name);
        img.save_png(&p)?;
        written.push(p);
        Ok(())
    };
    save(format!("{stem}_output.png"), &inf.output)?;
    save(format!("{stem}_confidence.png"), &inf.confidence)?;
    save(format!("{stem}_mask.png"), &inf.mask)?;
    for (name, grid) in &inf.grids {
        save(format!("{stem}_{name}.png"), grid)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::AblationVariant;
    use crate::model::GeneratorConfig;
    use candle_core::Device;

    #[test]
    fn outputs_match_input_size_after_padding() {
        let g = Generator::new(GeneratorConfig::toy(), 2, DType::F32, &Device::Cpu).unwrap();
        let img = Image::filled(37, 50, 3, 0.4);
        let inf = infer_image(&g, &img, false).unwrap();
        assert_eq!(inf.output.dims(), (37, 50, 3));
        assert_eq!(inf.confidence.dims(), (37, 50, 1));
        assert_eq!(inf.mask.dims(), (37, 50, 1));
        assert!(inf.mask.is_binary());
        assert!(inf.grids.is_empty());
    }

    #[test]
    fn one_grid_per_fet_layer() {
        let img = Image::filled(32, 32, 3, 0.4);
        let full = Generator::new(GeneratorConfig::toy(), 2, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(infer_image(&full, &img, true).unwrap().grids.len(), 5);
        let cfg = AblationVariant::NoFetS.apply(&GeneratorConfig::toy());
        let partial = Generator::new(cfg, 2, DType::F32, &Device::Cpu).unwrap();
        let grids = infer_image(&partial, &img, true).unwrap().grids;
        let names: Vec<&str> = grids.iter().map(|g| g.0.as_str()).collect();
        assert_eq!(
            names,
            ["fet_layer1_texture", "fet_layer2_texture", "fet_layer3_texture"]
        );
    }

    #[test]
    fn written_files_have_input_shape() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::new(GeneratorConfig::toy(), 2, DType::F32, &Device::Cpu).unwrap();
        let img = Image::filled(20, 24, 3, 0.6);
        let inf = infer_image(&g, &img, true).unwrap();
        let files = write_inference(dir.path(), "x", &inf).unwrap();
        assert_eq!(files.len(), 3 + 5);
        let out = Image::load_png(&files[0]).unwrap();
        assert_eq!(out.dims(), (20, 24, 3));
        let mask = Image::load_png(&files[2]).unwrap();
        assert_eq!(mask.dims(), (20, 24, 1));
    }
}
