pub mod error;
pub mod image;
pub mod nn;

pub use error::{Error, Result};
pub use image::Image;
pub mod adversary;
pub mod datagen;
pub mod fet;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;

pub use candle_core::{DType, Device, Tensor};
pub use datagen::ImageTriplet;
pub use harness::{AblationVariant, TrainConfig};
pub use model::{Generator, GeneratorConfig, Preset};
