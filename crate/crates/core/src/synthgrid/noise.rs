use rand::Rng;

use super::{ClassPair, LabelGrid};
use crate::error::{Error, Result};
use crate::seed;

/// Which class of a pair dilates into the other in a given image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairOrientation {
    pub superior: usize,
    pub inferior: usize,
}

/// Fixed superior/inferior choice for every (image, pair).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairAssignment {
    pairs: Vec<ClassPair>,
    num_images: usize,
    entries: Vec<PairOrientation>,
}

impl PairAssignment {
    pub fn pairs(&self) -> &[ClassPair] {
        &self.pairs
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn get(&self, image: usize, pair: usize) -> PairOrientation {
        self.entries[image * self.pairs.len() + pair]
    }

    /// Orientations of every pair for one image, in pair order.
    pub fn for_image(&self, image: usize) -> &[PairOrientation] {
        let n = self.pairs.len();
        &self.entries[image * n..(image + 1) * n]
    }
}

pub fn sample_pair_assignments(
    pairs: &[ClassPair],
    num_images: usize,
    seed: u64,
) -> Result<PairAssignment> {
    if pairs.is_empty() {
        return Err(Error::config("noise induction needs at least one class pair"));
    }
    let mut rng = seed::rng(seed, "pair-assignment", 0);
    let mut entries = Vec::with_capacity(num_images * pairs.len());
    for _ in 0..num_images {
        for p in pairs {
            let (superior, inferior) = if rng.random_bool(0.5) {
                (p.class_a(), p.class_b())
            } else {
                (p.class_b(), p.class_a())
            };
            entries.push(PairOrientation { superior, inferior });
        }
    }
    Ok(PairAssignment {
        pairs: pairs.to_vec(),
        num_images,
        entries,
    })
}

/// Relabels inferior pixels within Chebyshev distance `radius` of a superior pixel.
///
/// Every pair is evaluated against the original grid. A pixel claimed by more
/// than one pair takes the pair listed first.
pub fn corrupt_labels(
    labels: &LabelGrid,
    orientations: &[PairOrientation],
    radius: usize,
    num_classes: usize,
) -> Result<LabelGrid> {
    labels.check_range(num_classes)?;
    for o in orientations {
        if o.superior >= num_classes || o.inferior >= num_classes || o.superior == o.inferior {
            return Err(Error::data(format!(
                "invalid pair orientation {} -> {} for {num_classes} classes",
                o.superior, o.inferior
            )));
        }
    }
    let mut out = labels.clone();
    if radius == 0 {
        return Ok(out);
    }
    let (h, w) = (labels.height(), labels.width());
    let src = labels.values();
    let mut claimed = vec![false; src.len()];
    // Summed-area table of the superior mask, (h+1) x (w+1).
    let mut table = vec![0u32; (h + 1) * (w + 1)];
    for o in orientations {
        let sup = o.superior as u8;
        let inf = o.inferior as u8;
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += u32::from(src[y * w + x] == sup);
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        for y in 0..h {
            let y0 = y.saturating_sub(radius);
            let y1 = (y + radius + 1).min(h);
            for x in 0..w {
                let p = y * w + x;
                if src[p] != inf || claimed[p] {
                    continue;
                }
                let x0 = x.saturating_sub(radius);
                let x1 = (x + radius + 1).min(w);
                let count = table[y1 * (w + 1) + x1] + table[y0 * (w + 1) + x0]
                    - table[y0 * (w + 1) + x1]
                    - table[y1 * (w + 1) + x0];
                if count > 0 {
                    claimed[p] = true;
                    out.values_mut()[p] = sup;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orient(superior: usize, inferior: usize) -> PairOrientation {
        PairOrientation { superior, inferior }
    }

    #[test]
    fn zero_radius_is_identity() {
        let g = LabelGrid::new(2, 3, vec![0, 1, 2, 1, 0, 2]).unwrap();
        assert_eq!(corrupt_labels(&g, &[orient(0, 1)], 0, 3).unwrap(), g);
    }

    #[test]
    fn strip_example() {
        let g = LabelGrid::new(1, 4, vec![0, 1, 1, 1]).unwrap();
        let out = corrupt_labels(&g, &[orient(0, 1)], 1, 2).unwrap();
        assert_eq!(out.values(), &[0, 0, 1, 1]);
    }

    #[test]
    fn large_radius_swallows_inferior_class() {
        let g = LabelGrid::new(3, 3, vec![2, 1, 1, 1, 2, 1, 0, 1, 1]).unwrap();
        let out = corrupt_labels(&g, &[orient(0, 1)], 5, 3).unwrap();
        assert_eq!(out.values(), &[2, 0, 0, 0, 2, 0, 0, 0, 0]);
    }

    #[test]
    fn first_pair_wins_on_collision() {
        // Pixel 1 (class 1) neighbours both a class-0 and a class-2 pixel.
        let g = LabelGrid::new(1, 3, vec![0, 1, 2]).unwrap();
        let out = corrupt_labels(&g, &[orient(2, 1), orient(0, 1)], 1, 3).unwrap();
        assert_eq!(out.values(), &[0, 2, 2]);
        let out = corrupt_labels(&g, &[orient(0, 1), orient(2, 1)], 1, 3).unwrap();
        assert_eq!(out.values(), &[0, 0, 2]);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let g = LabelGrid::new(1, 2, vec![0, 5]).unwrap();
        assert!(matches!(
            corrupt_labels(&g, &[orient(0, 1)], 1, 3),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn assignments_are_seeded_and_balanced() {
        let pair = ClassPair::new(0, 1).unwrap();
        let a = sample_pair_assignments(&[pair], 10_000, 9).unwrap();
        assert_eq!(a, sample_pair_assignments(&[pair], 10_000, 9).unwrap());
        let zero_sup = (0..10_000).filter(|&i| a.get(i, 0).superior == 0).count();
        let freq = zero_sup as f64 / 10_000.0;
        assert!((0.45..=0.55).contains(&freq), "freq = {freq}");
        for i in 0..10_000 {
            let o = a.get(i, 0);
            let mut s = [o.superior, o.inferior];
            s.sort();
            assert_eq!(s, [0, 1]);
        }
    }

    #[test]
    fn degenerate_pairs_rejected() {
        assert!(ClassPair::new(3, 3).is_err());
        assert!(sample_pair_assignments(&[], 3, 0).is_err());
    }
}
