//! Training data: synthetic scene triplets, subtraction-based masks, paired
//! augmentation and a directory loader.

mod augment;
mod dataset;
mod glyphs;
mod mask;
mod scene;

pub use augment::{augment, augment_with, Transform};
pub use dataset::{load_dataset, write_dataset, DatasetReader, Manifest, ManifestEntry};
pub use mask::{derive_mask, derive_mask_with, MaskParams};
pub use scene::{generate_corpus, generate_triplet, BackgroundKind, GlyphParams, SceneSpec};

use crate::error::{shape_err, Result};
use crate::image::Image;

/// A co-registered text image, its text-free ground truth and the binary
/// text mask (1 on text pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriplet {
    pub input: Image,
    pub gt: Image,
    pub mask: Image,
    pub id: String,
}

impl ImageTriplet {
    pub fn height(&self) -> usize {
        self.input.height()
    }

    pub fn width(&self) -> usize {
        self.input.width()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.input.same_size(&self.gt) || !self.input.same_size(&self.mask) {
            return Err(shape_err!(
                "triplet {}: planes have different sizes ({:?}, {:?}, {:?})",
                self.id,
                self.input.dims(),
                self.gt.dims(),
                self.mask.dims()
            ));
        }
        if self.input.channels() != 3 || self.gt.channels() != 3 || self.mask.channels() != 1 {
            return Err(shape_err!("triplet {}: expected 3/3/1 channels", self.id));
        }
        if !self.mask.is_binary() {
            return Err(shape_err!("triplet {}: mask is not binary", self.id));
        }
        Ok(())
    }

    /// Largest `|input - gt|` over pixels where the mask is 0.
    pub fn max_background_difference(&self) -> f32 {
        let mut worst = 0f32;
        for y in 0..self.height() {
            for x in 0..self.width() {
                if self.mask.get(y, x, 0) == 0.0 {
                    for c in 0..3 {
                        worst = worst.max((self.input.get(y, x, c) - self.gt.get(y, x, c)).abs());
                    }
                }
            }
        }
        worst
    }
}
