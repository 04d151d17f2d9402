//! Per-pixel error likelihood from the disagreement between compensated and
//! plain predictions, and its sensitivity to the top-k set size.

use std::fmt;

use crate::compensation::{softmax_into, ClassMatrix};
use crate::error::{Error, Result};
use crate::inference::{self, argmax};
use crate::netcore::SegModel;
use crate::synthgrid::FeatureGrid;
use crate::table;

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_PHI: f64 = 1.0;

/// The `k` most probable classes under `p`, most probable first; ties go to
/// the lower class index.
pub fn top_k_classes(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::config(format!("k must lie in [1, {}], got {k}", p.len())));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx.truncate(k);
    Ok(idx)
}

fn check_inputs(l: &[f64], b: &ClassMatrix, beta: f64) -> Result<()> {
    if b.size() != l.len() {
        return Err(Error::dim(format!("{} logits against a {1}x{1} matrix", l.len(), b.size())));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta must lie in [0, 1], got {beta}")));
    }
    if let Some(i) = l.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("logits[{i}]"), "non-finite logit"));
    }
    Ok(())
}

/// Mean squared shift of the top class probability when each top-k class is
/// assumed to be the annotation. `p` is the plain softmax of `l`.
fn sigma_sq_with(l: &[f64], p: &[f64], b: &ClassMatrix, beta: f64, top: &[usize], z: &mut [f64], q: &mut [f64]) -> f64 {
    let o = top[0];
    let mut acc = 0.0;
    for &c in top {
        for i in 0..l.len() {
            z[i] = l[i] + beta * b.get(i, c);
        }
        softmax_into(z, q);
        let d = q[o] - p[o];
        acc += d * d;
    }
    acc / top.len() as f64
}

pub fn sigma_sq(l: &[f64], b: &ClassMatrix, beta: f64, k: usize) -> Result<f64> {
    check_inputs(l, b, beta)?;
    let mut p = vec![0.0; l.len()];
    softmax_into(l, &mut p);
    let top = top_k_classes(&p, k)?;
    let (mut z, mut q) = (vec![0.0; l.len()], vec![0.0; l.len()]);
    Ok(sigma_sq_with(l, &p, b, beta, &top, &mut z, &mut q))
}

/// `1 - max_i P(i)`.
pub fn model_uncertainty(p: &[f64]) -> f64 {
    1.0 - p[argmax(p)]
}

fn check_phi(phi: f64) -> Result<()> {
    if phi > 0.0 && phi.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("phi must be positive, got {phi}")))
    }
}

/// `(sigma^2 * u)^phi`.
pub fn error_likelihood(l: &[f64], b: &ClassMatrix, beta: f64, k: usize, phi: f64) -> Result<f64> {
    check_phi(phi)?;
    let s = sigma_sq(l, b, beta, k)?;
    let mut p = vec![0.0; l.len()];
    softmax_into(l, &mut p);
    Ok((s * model_uncertainty(&p)).powf(phi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Beta,
    Sigma2,
    U,
    E,
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapKind::Beta => "beta",
            MapKind::Sigma2 => "sigma2",
            MapKind::U => "u",
            MapKind::E => "e",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub kind: MapKind,
    pub values: Vec<f64>,
}

impl UncertaintyMap {
    /// 8-bit binary PGM with `round(255 * clamp(v, 0, 1))` per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
        out
    }

    pub fn file_name(&self, phi: f64) -> String {
        format!("{}_phi{}.pgm", self.kind, table::sig6(phi))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMaps {
    pub beta: UncertaintyMap,
    pub sigma2: UncertaintyMap,
    pub u: UncertaintyMap,
    pub e: UncertaintyMap,
}

impl UncertaintyMaps {
    pub fn all(&self) -> [&UncertaintyMap; 4] {
        [&self.beta, &self.sigma2, &self.u, &self.e]
    }
}

/// Eval-mode maps of `beta`, `sigma^2`, `u` and `e` for one image.
pub fn uncertainty_maps(
    model: &SegModel,
    b: &ClassMatrix,
    features: &FeatureGrid,
    k: usize,
    phi: f64,
) -> Result<UncertaintyMaps> {
    check_phi(phi)?;
    let pred = inference::predict(model, features)?;
    let kc = pred.classes;
    if b.size() != kc {
        return Err(Error::dim("compensation matrix does not match the model's classes"));
    }
    let n = pred.betas.len();
    let (mut z, mut q) = (vec![0.0; kc], vec![0.0; kc]);
    let (mut s2, mut u, mut e) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for px in 0..n {
        let l = &pred.logits[px * kc..(px + 1) * kc];
        let p = pred.pixel_probabilities(px);
        let top = top_k_classes(p, k)?;
        s2[px] = sigma_sq_with(l, p, b, pred.betas[px], &top, &mut z, &mut q);
        u[px] = model_uncertainty(p);
        e[px] = (s2[px] * u[px]).powf(phi);
    }
    let (h, w) = (features.height(), features.width());
    let map = |kind, values| UncertaintyMap {
        height: h,
        width: w,
        kind,
        values,
    };
    Ok(UncertaintyMaps {
        beta: map(MapKind::Beta, pred.betas.clone()),
        sigma2: map(MapKind::Sigma2, s2),
        u: map(MapKind::U, u),
        e: map(MapKind::E, e),
    })
}

/// For each `k`, the mean over all pixels of `|e(k) - e(K)|` with `phi = 1`.
pub fn k_sensitivity(model: &SegModel, b: &ClassMatrix, images: &[&FeatureGrid], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let kc = model.shape().classes;
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > kc) {
        return Err(Error::config(format!("k = {bad} outside [1, {kc}]")));
    }
    let mut sums = vec![0.0; ks.len()];
    let mut n = 0usize;
    for f in images {
        let full = uncertainty_maps(model, b, f, kc, 1.0)?;
        for (s, &k) in sums.iter_mut().zip(ks) {
            let m = uncertainty_maps(model, b, f, k, 1.0)?;
            *s += m.e.values.iter().zip(&full.e.values).map(|(a, c)| (a - c).abs()).sum::<f64>();
        }
        n += f.num_pixels();
    }
    if n == 0 {
        return Err(Error::data("k sensitivity over zero pixels"));
    }
    Ok(ks.iter().zip(sums).map(|(&k, s)| (k, s / n as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{ModelShape, SegWeights};
    use proptest::prelude::*;

    fn pair_b() -> ClassMatrix {
        ClassMatrix::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap()
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_classes(&[0.5, 0.3, 0.2], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_classes(&[0.25; 4], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_classes(&[0.1, 0.6, 0.3], 3).unwrap(), vec![1, 2, 0]);
        assert!(top_k_classes(&[0.5, 0.5], 0).is_err());
        assert!(top_k_classes(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn sigma_and_error_examples() {
        let s = sigma_sq(&[0.0, 0.0], &pair_b(), 1.0, 2).unwrap();
        // Independent evaluation: logistic(1) - 0.5.
        let d = 1.0 / (1.0 + (-1.0f64).exp()) - 0.5;
        assert!((s - d * d).abs() < 1e-15);
        // Published to four digits from rounded intermediates.
        assert!((s - 0.05341).abs() < 5e-5);
        let e = error_likelihood(&[0.0, 0.0], &pair_b(), 1.0, 2, 1.0).unwrap();
        assert!((e - 0.5 * d * d).abs() < 1e-15);
        assert!((e - 0.02670).abs() < 5e-5);
        assert_eq!(sigma_sq(&[0.3, -0.1], &ClassMatrix::zeros(2), 0.7, 2).unwrap(), 0.0);
        assert_eq!(sigma_sq(&[0.3, -0.1], &pair_b(), 0.0, 2).unwrap(), 0.0);
        let near = error_likelihood(&[50.0, 0.0, 0.0], &ClassMatrix::zeros(3), 1.0, 2, 1.0).unwrap();
        assert!(near < 1e-12);
        assert!(matches!(error_likelihood(&[0.0, 0.0], &pair_b(), 1.0, 2, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_model_maps() {
        let s = ModelShape::new(4, 3, 3);
        let m = SegModel::from_weights(s, SegWeights::zeros(s), 0.0).unwrap();
        let f = FeatureGrid::new(2, 2, 4, vec![0.3; 16]).unwrap();
        let maps = uncertainty_maps(&m, &ClassMatrix::zeros(3), &f, 3, 1.0).unwrap();
        assert!(maps.e.values.iter().all(|&v| v == 0.0));
        assert_eq!(maps.e.file_name(1.0), "e_phi1.pgm");
        assert_eq!(&maps.u.to_pgm()[..11], b"P5\n2 2\n255\n");
        assert_eq!(maps.u.to_pgm()[11], 170);
        let ks = k_sensitivity(&m, &ClassMatrix::zeros(3), &[&f], &[1, 2, 3]).unwrap();
        assert!(ks.iter().all(|&(_, v)| v == 0.0));
    }

    #[test]
    fn phi_preserves_ranking() {
        let m = SegModel::new(ModelShape::new(4, 6, 3), 0.0, 11).unwrap();
        let b = ClassMatrix::from_rows(&[vec![0.0, -2.0, 0.5], vec![-1.5, 0.0, 0.0], vec![0.3, 0.0, 0.0]]).unwrap();
        let f = FeatureGrid::new(4, 4, 4, (0..64).map(|i| (i as f64 * 0.71).sin()).collect()).unwrap();
        let e1 = uncertainty_maps(&m, &b, &f, 2, 1.0).unwrap().e.values;
        let e2 = uncertainty_maps(&m, &b, &f, 2, 2.0).unwrap().e.values;
        for i in 0..e1.len() {
            for j in 0..e1.len() {
                assert_eq!(e1[i].partial_cmp(&e1[j]), e2[i].partial_cmp(&e2[j]));
            }
        }
        let full = k_sensitivity(&m, &b, &[&f], &[3]).unwrap();
        assert_eq!(full, vec![(3, 0.0)]);
    }

    proptest! {
        #[test]
        fn e_in_unit_interval(
            l in prop::collection::vec(-8.0f64..8.0, 4),
            entries in prop::collection::vec(-10.0f64..10.0, 16),
            beta in 0.0f64..=1.0,
            k in 1usize..=4,
            phi in 0.1f64..4.0,
        ) {
            let b = ClassMatrix::from_flat(4, entries).unwrap();
            let s = sigma_sq(&l, &b, beta, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            let e = error_likelihood(&l, &b, beta, k, phi).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }

        #[test]
        fn permutation_equivariance(
            l in prop::collection::vec(-4.0f64..4.0, 4),
            entries in prop::collection::vec(-5.0f64..5.0, 16),
            beta in 0.0f64..=1.0,
            k in 1usize..=4,
            perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            // Distinct logits keep the top-k set free of index tie-breaks.
            let mut sorted = l.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-6));
            let b = ClassMatrix::from_flat(4, entries).unwrap();
            let mut lp = vec![0.0; 4];
            let mut bp = ClassMatrix::zeros(4);
            for i in 0..4 {
                lp[perm[i]] = l[i];
                for j in 0..4 {
                    bp.set(perm[i], perm[j], b.get(i, j));
                }
            }
            let a = sigma_sq(&l, &b, beta, k).unwrap();
            let c = sigma_sq(&lp, &bp, beta, k).unwrap();
            prop_assert!((a - c).abs() <= 1e-12);
        }
    }
}
