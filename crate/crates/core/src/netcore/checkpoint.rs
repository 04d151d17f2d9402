//! Versioned binary checkpoint.
//!
//! Layout: 8-byte magic `CSEGCKPT`, `u32` LE version, `u32` LE header length,
//! UTF-8 header of `key=value` lines (including one `section=name:count` line
//! per tensor, in payload order), then every section as LE `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ModelShape, Parameters, SegModel, SegWeights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSEGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (name, data) in &self.sections {
            header.push_str(&format!("section={name}:{}\n", data.len()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, data) in &self.sections {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::data("checkpoint header truncated"))?;
        let header =
            std::str::from_utf8(header).map_err(|_| Error::data("checkpoint header is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        let mut layout = Vec::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad header line {line:?}")))?;
            if k == "section" {
                let (name, count) = v
                    .rsplit_once(':')
                    .ok_or_else(|| Error::data(format!("bad section line {line:?}")))?;
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::data(format!("bad section size in {line:?}")))?;
                layout.push((name.to_string(), count));
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let payload = &bytes[16 + hlen..];
        let total: usize = layout.iter().map(|(_, c)| c).sum();
        if payload.len() != total * 8 {
            return Err(Error::data(format!(
                "checkpoint payload holds {} bytes, header declares {}",
                payload.len(),
                total * 8
            )));
        }
        let mut sections = Vec::with_capacity(layout.len());
        let mut off = 0;
        for (name, count) in layout {
            let data = payload[off..off + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += count * 8;
            sections.push((name, data));
        }
        Ok(Self { meta, sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::data(format!("checkpoint lacks section {name}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::data(format!("checkpoint field {key} is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::data(format!("checkpoint field {key} is not a number")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::data(format!("checkpoint lacks field {key}")))
    }

    /// Appends the model's shape, weights and batchnorm buffers.
    pub fn put_model(&mut self, model: &SegModel) {
        let s = model.shape();
        self.meta.insert("model.in_dim".into(), s.in_dim.to_string());
        self.meta.insert("model.hidden".into(), s.hidden.to_string());
        self.meta.insert("model.classes".into(), s.classes.to_string());
        self.meta.insert("model.branch_width".into(), s.branch_width.to_string());
        // `{:?}` on f64 round-trips exactly.
        self.meta.insert("model.dropout".into(), format!("{:?}", model.dropout()));
        for (name, t) in model.weights.tensors() {
            self.sections.push((format!("model.{name}"), t.to_vec()));
        }
        self.sections.push(("model.running_mean".into(), model.running_mean.clone()));
        self.sections.push(("model.running_var".into(), model.running_var.clone()));
    }

    pub fn get_model(&self) -> Result<SegModel> {
        let shape = ModelShape {
            in_dim: self.meta_usize("model.in_dim")?,
            hidden: self.meta_usize("model.hidden")?,
            classes: self.meta_usize("model.classes")?,
            branch_width: self.meta_usize("model.branch_width")?,
        };
        let mut weights = SegWeights::zeros(shape);
        for (name, t) in weights.tensors_mut() {
            let src = self.section(&format!("model.{name}"))?;
            if src.len() != t.len() {
                return Err(Error::data(format!("checkpoint tensor {name} has the wrong size")));
            }
            t.copy_from_slice(src);
        }
        let mut model = SegModel::from_weights(shape, weights, self.meta_f64("model.dropout")?)?;
        model.running_mean = self.section("model.running_mean")?.to_vec();
        model.running_var = self.section("model.running_var")?.to_vec();
        if model.running_mean.len() != shape.branch_width || model.running_var.len() != shape.branch_width {
            return Err(Error::data("checkpoint batchnorm buffers have the wrong size"));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trips_bit_exactly() {
        let mut m = SegModel::new(ModelShape::new(4, 6, 3), 0.25, 8).unwrap();
        m.running_mean[3] = 0.1 + 0.2;
        let mut ck = Checkpoint::default();
        ck.put_model(&m);
        ck.meta.insert("note".into(), "x=y".into());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get_model().unwrap(), m);
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut ck = Checkpoint::default();
        ck.put_model(&SegModel::new(ModelShape::new(2, 2, 2), 0.0, 1).unwrap());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
