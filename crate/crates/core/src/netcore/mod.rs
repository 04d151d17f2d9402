//! Toy per-pixel segmentation network with an uncertainty branch, plus the
//! parameter plumbing shared by every trainable component.

mod checkpoint;
mod model;

pub use checkpoint::Checkpoint;
pub use model::{
    ForwardPass, Mode, ModelShape, SegModel, SegWeights, Upstream, BN_EPS, BN_MOMENTUM,
    BRANCH_WIDTH,
};

use crate::error::{Error, Result};

/// Named flat parameter tensors, visited in declaration order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// First non-finite entry, as `(tensor name, index)`.
    fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.tensors()
            .into_iter()
            .find_map(|(name, t)| t.iter().position(|v| !v.is_finite()).map(|i| (name, i)))
    }
}

/// Per-pixel class logits of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrid {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl LogitGrid {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * classes {
            return Err(Error::dim(format!(
                "logit grid {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            values,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.classes..(p + 1) * self.classes]
    }
}

/// Per-pixel local importance factors in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}
