pub mod consensus;
pub mod error;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod noisegen;
pub mod rng;
pub mod split;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{
    cosine, softmax_foreground, top_k_indices, BinaryMask, FeatureMap, FeatureVector, Logits,
    PixelGrid, RgbImage, Size,
};
