use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassPair, FeatureGrid, LabelGrid, Sample};
use crate::error::{Error, Result};
use crate::seed;

/// Upper bound on the cosine between prototypes of classes that are not a designated pair.
pub const UNRELATED_COSINE_BOUND: f64 = 0.3;

/// A designated pair of classes whose prototypes are pulled together.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousPair {
    pub class_a: usize,
    pub class_b: usize,
    /// Minimum cosine similarity between the two prototypes, in `[0, 1]`.
    pub similarity: f64,
}

impl AmbiguousPair {
    pub fn pair(&self) -> Result<ClassPair> {
        ClassPair::new(self.class_a, self.class_b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_regions: usize,
    #[serde(default)]
    pub ambiguous_pairs: Vec<AmbiguousPair>,
    pub noise_std: f64,
    pub boundary_mix_width: usize,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::config(format!(
                "num_classes must lie in [2, 256], got {}",
                self.num_classes
            )));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::config(format!(
                "feature_dim ({}) must be at least num_classes ({}) to place the prototypes",
                self.feature_dim, self.num_classes
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("scene height and width must be positive"));
        }
        if self.num_regions == 0 || self.num_regions > self.height * self.width {
            return Err(Error::config(format!(
                "num_regions must lie in [1, {}], got {}",
                self.height * self.width,
                self.num_regions
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::config(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        for p in &self.ambiguous_pairs {
            p.pair()?;
            if p.class_a >= self.num_classes || p.class_b >= self.num_classes {
                return Err(Error::config(format!(
                    "ambiguous pair ({}, {}) references a class >= {}",
                    p.class_a, p.class_b, self.num_classes
                )));
            }
            if !(0.0..=1.0).contains(&p.similarity) {
                return Err(Error::config(format!(
                    "prototype similarity {} is outside [0, 1]",
                    p.similarity
                )));
            }
        }
        Ok(())
    }

    /// Unit-norm class prototypes, shared by every image of the scene family.
    ///
    /// Each class starts on its own orthonormal direction; for every designated
    /// pair `(a, b)` the prototype of `b` is rotated towards `a` until their
    /// cosine equals the requested similarity.
    pub fn prototypes(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let k = self.num_classes;
        let d = self.feature_dim;
        let mut rng = seed::rng(self.seed, "prototypes", 0);

        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let dot = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }

        let mut protos = basis.clone();
        let mut derived = vec![false; k];
        for p in &self.ambiguous_pairs {
            if derived[p.class_b] {
                return Err(Error::config(format!(
                    "class {} appears as the second member of more than one ambiguous pair",
                    p.class_b
                )));
            }
            derived[p.class_b] = true;
            // Nudged so the evaluated cosine never rounds below the requested bound.
            let s = (p.similarity + 1e-12).min(1.0);
            let c = (1.0 - s * s).max(0.0).sqrt();
            let anchor = protos[p.class_a].clone();
            let mut v: Vec<f64> = anchor
                .iter()
                .zip(&basis[p.class_b])
                .map(|(a, e)| s * a + c * e)
                .collect();
            let norm = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            protos[p.class_b] = v;
        }

        for i in 0..k {
            for j in (i + 1)..k {
                let cos = dot(&protos[i], &protos[j]);
                let designated = self.ambiguous_pairs.iter().find(|p| {
                    (p.class_a == i && p.class_b == j) || (p.class_a == j && p.class_b == i)
                });
                match designated {
                    Some(p) if cos < p.similarity => {
                        return Err(Error::config(format!(
                            "ambiguous pairs form a cycle: cosine({i}, {j}) = {cos:.4} < {}",
                            p.similarity
                        )))
                    }
                    None if cos > UNRELATED_COSINE_BOUND => {
                        return Err(Error::config(format!(
                            "chained ambiguous pairs push cosine({i}, {j}) to {cos:.4} > {UNRELATED_COSINE_BOUND}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(protos)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Grows `num_regions` contiguous regions from random seed pixels and returns the
/// region index of every pixel.
fn grow_regions(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<usize> {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut region = vec![usize::MAX; n];
    let mut frontier: Vec<(usize, usize)> = index::sample(rng, n, cfg.num_regions)
        .into_iter()
        .enumerate()
        .map(|(r, p)| (p, r))
        .collect();
    while !frontier.is_empty() {
        let i = rng.random_range(0..frontier.len());
        let (p, r) = frontier.swap_remove(i);
        if region[p] != usize::MAX {
            continue;
        }
        region[p] = r;
        let (y, x) = (p / w, p % w);
        if y > 0 && region[p - w] == usize::MAX {
            frontier.push((p - w, r));
        }
        if y + 1 < h && region[p + w] == usize::MAX {
            frontier.push((p + w, r));
        }
        if x > 0 && region[p - 1] == usize::MAX {
            frontier.push((p - 1, r));
        }
        if x + 1 < w && region[p + 1] == usize::MAX {
            frontier.push((p + 1, r));
        }
    }
    region
}

/// Nearest pixel of a different class within Chebyshev radius `radius`
/// (ties broken by raster order): returns `(distance, class)`.
fn nearest_other_class(labels: &LabelGrid, p: usize, radius: usize) -> Option<(usize, usize)> {
    let (h, w) = (labels.height(), labels.width());
    let (y, x) = (p / w, p % w);
    let own = labels.get(p);
    let mut best: Option<(usize, usize, usize)> = None;
    let y0 = y.saturating_sub(radius);
    let x0 = x.saturating_sub(radius);
    for yy in y0..(y + radius + 1).min(h) {
        for xx in x0..(x + radius + 1).min(w) {
            let q = yy * w + xx;
            let c = labels.get(q);
            if c == own {
                continue;
            }
            let d = yy.abs_diff(y).max(xx.abs_diff(x));
            if best.is_none_or(|(bd, bq, _)| (d, q) < (bd, bq)) {
                best = Some((d, q, c));
            }
        }
    }
    best.map(|(d, _, c)| (d, c))
}

/// Generates image `image_index` of the scene family described by `cfg`.
///
/// Features are rounded to 32-bit precision so the dataset file format stores
/// them exactly.
pub fn generate_scene(cfg: &SceneConfig, image_index: usize) -> Result<(FeatureGrid, LabelGrid)> {
    let protos = cfg.prototypes()?;
    let mut rng = seed::rng(cfg.seed, "scene", image_index as u64);

    let region = grow_regions(cfg, &mut rng);
    let mut region_class: Vec<u8> = (0..cfg.num_regions)
        .map(|r| (r % cfg.num_classes) as u8)
        .collect();
    region_class.shuffle(&mut rng);
    let labels = LabelGrid::new(
        cfg.height,
        cfg.width,
        region.iter().map(|&r| region_class[r]).collect(),
    )?;

    let d = cfg.feature_dim;
    let mw = cfg.boundary_mix_width;
    let mut values = Vec::with_capacity(labels.num_pixels() * d);
    for p in 0..labels.num_pixels() {
        let own = &protos[labels.get(p)];
        let mix = if mw > 0 {
            nearest_other_class(&labels, p, mw)
        } else {
            None
        };
        for (ch, &base) in own.iter().enumerate() {
            let mean = match mix {
                Some((dist, other)) => {
                    let lambda = 0.5 * (mw + 1 - dist) as f64 / mw as f64;
                    (1.0 - lambda) * base + lambda * protos[other][ch]
                }
                None => base,
            };
            let z: f64 = rng.sample(StandardNormal);
            values.push((mean + cfg.noise_std * z) as f32 as f64);
        }
    }
    let features = FeatureGrid::new(cfg.height, cfg.width, d, values)?;
    Ok((features, labels))
}

/// Images `first..first + count` of the scene family.
pub fn generate_split(cfg: &SceneConfig, first: usize, count: usize) -> Result<Vec<Sample>> {
    (first..first + count)
        .map(|i| generate_scene(cfg, i).map(|(features, labels)| Sample { features, labels }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cfg() -> SceneConfig {
        SceneConfig {
            height: 12,
            width: 10,
            feature_dim: 6,
            num_classes: 4,
            num_regions: 6,
            ambiguous_pairs: vec![AmbiguousPair {
                class_a: 0,
                class_b: 1,
                similarity: 0.95,
            }],
            noise_std: 0.3,
            boundary_mix_width: 1,
            seed: 17,
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let c = cfg();
        assert_eq!(generate_scene(&c, 3).unwrap(), generate_scene(&c, 3).unwrap());
        assert_ne!(generate_scene(&c, 3).unwrap().1, generate_scene(&c, 4).unwrap().1);
    }

    #[test]
    fn degenerate_noise_reproduces_prototypes() {
        let mut c = cfg();
        c.noise_std = 0.0;
        c.boundary_mix_width = 0;
        let protos = c.prototypes().unwrap();
        let (f, l) = generate_scene(&c, 0).unwrap();
        for p in 0..l.num_pixels() {
            let expect: Vec<f64> = protos[l.get(p)].iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(f.pixel(p), expect.as_slice());
        }
    }

    #[test]
    fn prototype_cosines() {
        let c = cfg();
        let protos = c.prototypes().unwrap();
        for (i, a) in protos.iter().enumerate() {
            assert!((dot(a, a) - 1.0).abs() < 1e-12);
            for (j, b) in protos.iter().enumerate().skip(i + 1) {
                let cos = dot(a, b);
                if (i, j) == (0, 1) {
                    assert!(cos >= 0.95, "cos = {cos}");
                } else {
                    assert!(cos <= UNRELATED_COSINE_BOUND, "cos({i},{j}) = {cos}");
                }
            }
        }
    }

    #[test]
    fn regions_are_contiguous_and_cover_grid() {
        let c = cfg();
        let mut rng = seed::rng(5, "t", 0);
        let region = grow_regions(&c, &mut rng);
        assert!(region.iter().all(|&r| r < c.num_regions));
        // Every region is 4-connected: flood fill from one member reaches all members.
        for r in 0..c.num_regions {
            let members: Vec<usize> = (0..region.len()).filter(|&p| region[p] == r).collect();
            let mut seen = vec![false; region.len()];
            let mut stack = vec![members[0]];
            seen[members[0]] = true;
            let mut reached = 0;
            while let Some(p) = stack.pop() {
                reached += 1;
                let (y, x) = (p / c.width, p % c.width);
                let mut nb = Vec::new();
                if y > 0 {
                    nb.push(p - c.width);
                }
                if y + 1 < c.height {
                    nb.push(p + c.width);
                }
                if x > 0 {
                    nb.push(p - 1);
                }
                if x + 1 < c.width {
                    nb.push(p + 1);
                }
                for q in nb {
                    if region[q] == r && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            assert_eq!(reached, members.len());
        }
    }

    #[test]
    fn labels_in_range_and_features_finite() {
        let c = cfg();
        for i in 0..5 {
            let (f, l) = generate_scene(&c, i).unwrap();
            l.check_range(c.num_classes).unwrap();
            assert!(f.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg();
        c.num_classes = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg();
        c.noise_std = f64::NAN;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg();
        c.ambiguous_pairs[0].similarity = 1.5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.ambiguous_pairs[0].class_b = 0;
        assert!(c.validate().is_err());
    }
}
