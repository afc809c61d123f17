//! Shared fixtures for the benchmarks.

use casc_core::model::{encode_input, ModelState};
use casc_core::noisegen::{synth_dataset, SynthParams, SynthPatch};
use casc_core::{FeatureMap, Size};

/// One synthetic patch of the given side.
pub fn patch(side: usize, seed: u64) -> SynthPatch {
    let ds = synth_dataset(&SynthParams::new(Size::new(side, side), 1, 3, seed)).expect("valid synth params");
    ds.patches.into_iter().next().expect("one patch")
}

/// A freshly initialised model and an encoded input for `patch`.
pub fn model_and_input(p: &SynthPatch, channels: usize) -> (ModelState, FeatureMap) {
    let classes = 4;
    let model = ModelState::init(7, channels, classes).expect("valid architecture");
    let x = encode_input(&p.image, p.class_index, classes).expect("class in range");
    (model, x)
}
