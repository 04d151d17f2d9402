//! Shared fixtures for the criterion benchmarks in `benches/`.

use compseg_core::synthgrid::{generate_split, AmbiguousPair};
use compseg_core::{ModelShape, Sample, SceneConfig, SegModel};

pub const HIDDEN: usize = 8;

/// `images` 16x16 scenes with four classes and one ambiguous pair.
pub fn scenes(images: usize) -> Vec<Sample> {
    let cfg = SceneConfig {
        height: 16,
        width: 16,
        feature_dim: 8,
        num_classes: 4,
        num_regions: 8,
        ambiguous_pairs: vec![AmbiguousPair {
            class_a: 0,
            class_b: 1,
            similarity: 0.95,
        }],
        noise_std: 0.3,
        boundary_mix_width: 1,
        seed: 11,
    };
    generate_split(&cfg, 0, images).expect("valid scene config")
}

pub fn model() -> SegModel {
    SegModel::new(ModelShape::new(8, HIDDEN, 4), 0.0, 5).expect("valid shape")
}
