//! Instagram-style filter pipeline: primitive effects, presets and corpus
//! generation.

mod corpus;
mod curve;
mod effect;
mod preset;

pub use corpus::{filter_dataset, generate_corpus, mini_plan, CorpusMode, CorpusOptions};
pub use curve::{CurvePoints, MonotoneSpline, ToneCurve};
pub use effect::{luma, BlendMode, Effect, LUMA};
pub use preset::{slug, FilterPreset, PresetRegistry};

use crate::error::Result;
use crate::image::Image;

pub fn apply_effect(img: &Image, effect: &Effect) -> Result<Image> {
    effect.apply(img)
}

pub fn apply_preset(img: &Image, preset: &FilterPreset) -> Result<Image> {
    preset.apply(img)
}

pub fn register_presets() -> PresetRegistry {
    PresetRegistry::builtin()
}
