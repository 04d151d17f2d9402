//! Dataset directory: `manifest.json`, `features.bin` (LE f32, image-major, row-major,
//! channel-last) and `labels.bin` (one byte per pixel, same order).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureGrid, LabelGrid, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub image_count: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c}")).collect()
}

impl Dataset {
    /// Bundles samples that share one shape; fails on mixed shapes or bad labels.
    pub fn new(samples: Vec<Sample>, num_classes: usize, seed: u64, class_names: Vec<String>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::data("a dataset needs at least one image"))?;
        let (h, w, d) = (first.features.height(), first.features.width(), first.features.dim());
        if class_names.len() != num_classes {
            return Err(Error::data(format!(
                "{} class names given for {num_classes} classes",
                class_names.len()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            let f = &s.features;
            if (f.height(), f.width(), f.dim()) != (h, w, d)
                || (s.labels.height(), s.labels.width()) != (h, w)
            {
                return Err(Error::dim(format!("image {i} does not match the {h}x{w}x{d} layout")));
            }
            s.labels.check_range(num_classes)?;
        }
        let meta = DatasetMeta {
            height: h,
            width: w,
            feature_dim: d,
            num_classes,
            image_count: samples.len(),
            seed,
            class_names,
        };
        Ok(Self { meta, samples })
    }
}

fn staging_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes the dataset atomically: files are staged in a sibling directory and
/// moved into place only once complete.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let meta = &dataset.meta;
    let mut features = Vec::with_capacity(meta.image_count * meta.height * meta.width * meta.feature_dim * 4);
    let mut labels = Vec::with_capacity(meta.image_count * meta.height * meta.width);
    for s in &dataset.samples {
        for &v in s.features.values() {
            features.extend_from_slice(&(v as f32).to_le_bytes());
        }
        labels.extend_from_slice(s.labels.values());
    }
    let manifest = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::data(format!("cannot encode manifest: {e}")))?;

    let staging = staging_path(path);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let result = (|| -> Result<()> {
        fs::create_dir(&staging)?;
        fs::write(staging.join(MANIFEST_FILE), manifest + "\n")?;
        fs::write(staging.join(FEATURES_FILE), &features)?;
        fs::write(staging.join(LABELS_FILE), &labels)?;
        if path.exists() {
            fs::remove_dir_all(path)?;
        }
        fs::rename(&staging, path)?;
        Ok(())
    })();
    if result.is_err() && staging.exists() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path.join(MANIFEST_FILE))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("malformed manifest: {e}")))?;
    if meta.class_names.len() != meta.num_classes {
        return Err(Error::data(format!(
            "manifest lists {} class names for {} classes",
            meta.class_names.len(),
            meta.num_classes
        )));
    }
    let px = meta.height * meta.width;
    let fbytes = fs::read(path.join(FEATURES_FILE))?;
    let lbytes = fs::read(path.join(LABELS_FILE))?;
    let want_f = meta.image_count * px * meta.feature_dim * 4;
    if fbytes.len() != want_f {
        return Err(Error::data(format!(
            "{FEATURES_FILE} holds {} bytes, manifest implies {want_f}",
            fbytes.len()
        )));
    }
    if lbytes.len() != meta.image_count * px {
        return Err(Error::data(format!(
            "{LABELS_FILE} holds {} bytes, manifest implies {}",
            lbytes.len(),
            meta.image_count * px
        )));
    }
    let per_image = px * meta.feature_dim;
    let mut samples = Vec::with_capacity(meta.image_count);
    for i in 0..meta.image_count {
        let values = fbytes[i * per_image * 4..(i + 1) * per_image * 4]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let features = FeatureGrid::new(meta.height, meta.width, meta.feature_dim, values)?;
        let labels = LabelGrid::new(meta.height, meta.width, lbytes[i * px..(i + 1) * px].to_vec())?;
        labels
            .check_range(meta.num_classes)
            .map_err(|e| Error::data(format!("image {i}: {e}")))?;
        samples.push(Sample { features, labels });
    }
    Ok(Dataset { meta, samples })
}

/// Writes only a label payload plus manifest (prediction export).
pub fn write_label_set(path: &Path, meta: &DatasetMeta, labels: &[LabelGrid]) -> Result<()> {
    fs::create_dir_all(path)?;
    let mut meta = meta.clone();
    meta.image_count = labels.len();
    let manifest = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::data(format!("cannot encode manifest: {e}")))?;
    let mut bytes = Vec::with_capacity(labels.len() * meta.height * meta.width);
    for l in labels {
        bytes.extend_from_slice(l.values());
    }
    fs::write(path.join(MANIFEST_FILE), manifest + "\n")?;
    fs::write(path.join(LABELS_FILE), bytes)?;
    Ok(())
}
