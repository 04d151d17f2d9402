//! Compensation learning for semantic segmentation on synthetic grids.
//!
//! A toy per-pixel network is trained with a learned, annotation-conditioned
//! logit bias (the compensation matrix) scaled by a per-pixel importance
//! from an uncertainty branch. The disagreement between compensated and
//! plain predictions yields a per-pixel error likelihood.

pub mod baselines;
pub mod compensation;
pub mod error;
pub mod evalkit;
pub mod inference;
pub mod netcore;
pub mod seed;
pub mod synthgrid;
pub mod table;
pub mod trainer;
pub mod uncertainty;

pub use compensation::{ClassMatrix, CompensationMatrix, CompensationMode, LossBreakdown};
pub use error::{Error, Result};
pub use netcore::{BetaGrid, LogitGrid, ModelShape, SegModel};
pub use synthgrid::{ClassPair, Dataset, FeatureGrid, LabelGrid, Sample, SceneConfig};
pub use trainer::{Head, Method, TrainConfig};
pub use uncertainty::{MapKind, UncertaintyMap};
