//! Synthetic segmentation scenes, ambiguity label noise and the on-disk dataset format.

mod io;
mod noise;
mod scene;

pub use io::{default_class_names, read_dataset, write_dataset, write_label_set, Dataset, DatasetMeta};
pub use noise::{corrupt_labels, sample_pair_assignments, PairAssignment, PairOrientation};
pub use scene::{generate_scene, generate_split, AmbiguousPair, SceneConfig};

use crate::error::{Error, Result};

/// Per-pixel feature vectors of one image, row-major then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * dim {
            return Err(Error::dim(format!(
                "feature grid {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite feature value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            values: vec![0.0; height * width * dim],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Feature vector of the pixel at raster index `p`.
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.dim..(p + 1) * self.dim]
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }
}

/// Per-pixel class indices of one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "label grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            values: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn get(&self, p: usize) -> usize {
        usize::from(self.values[p])
    }

    pub fn at(&self, y: usize, x: usize) -> usize {
        self.get(y * self.width + x)
    }

    /// Fails if any label is outside `[0, num_classes)`.
    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self.values.iter().position(|&v| usize::from(v) >= num_classes) {
            Some(p) => Err(Error::data(format!(
                "label {} at pixel {p} is outside [0, {num_classes})",
                self.values[p]
            ))),
            None => Ok(()),
        }
    }
}

/// Two distinct classes that are considered mutually ambiguous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClassPair {
    class_a: usize,
    class_b: usize,
}

impl ClassPair {
    pub fn new(class_a: usize, class_b: usize) -> Result<Self> {
        if class_a == class_b {
            return Err(Error::config(format!(
                "class pair ({class_a}, {class_b}) must join two different classes"
            )));
        }
        Ok(Self { class_a, class_b })
    }

    pub fn class_a(&self) -> usize {
        self.class_a
    }

    pub fn class_b(&self) -> usize {
        self.class_b
    }
}

/// One training image: features plus (possibly corrupted) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: FeatureGrid,
    pub labels: LabelGrid,
}
