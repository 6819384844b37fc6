//! Synthetic data, dataset files and augmentation.

pub mod augment;
pub mod dataset;
pub mod synth;

pub use augment::{augment, frame_difference_map, AugmentConfig, Mode};
pub use dataset::{Dataset, Entry};
pub use synth::{generate_sample, Primitive, Sample, Split, SynthSpec};
