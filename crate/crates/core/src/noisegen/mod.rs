//! Label-noise generators and the synthetic dataset.

pub mod contours;
pub mod inject;
pub mod stain;
pub mod synth;

pub use contours::{extract_contours, fill_contour, fill_contours, label_components, Contour};
pub use inject::{
    corrupt_label, inject_fp, remove_fn, Injection, NoiseAction, NoiseEvent, NoiseRecipe, NoisyLabel, Removal,
};
pub use stain::{color_deconvolve, threshold_mask, StainMatrix};
pub use synth::{synth_dataset, SynthDataset, SynthParams, SynthPatch, DEFAULT_CLASSES};
