use crate::error::{Error, Result};
use crate::synthgrid::LabelGrid;
use crate::table;

/// Upper end of the integrated correction range.
pub const AUC_RANGE: f64 = 0.5;
pub const R_STEP: f64 = 0.01;

/// `0, 0.01, ..., 0.5`.
pub fn default_r_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 * R_STEP).collect()
}

/// Overall accuracy after replacing the most uncertain fraction of pixels
/// with ground truth, sampled at increasing fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionCurve {
    pub points: Vec<(f64, f64)>,
}

impl CorrectionCurve {
    pub fn to_csv(&self) -> String {
        let mut rows = vec![vec!["r_area".to_string(), "acc_a".to_string()]];
        rows.extend(self.points.iter().map(|&(r, a)| vec![table::sig6(r), table::sig6(a)]));
        table::render(rows)
    }
}

fn check_grid(r_grid: &[f64]) -> Result<()> {
    if r_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::config("correction fractions must lie in [0, 1]"));
    }
    if r_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("correction fractions must be strictly increasing"));
    }
    Ok(())
}

/// Replaces the top `floor(r N)` pixels (uncertainty descending, ties in
/// raster order over the concatenated images) by their ground truth.
pub fn correction_curve(
    preds: &[LabelGrid],
    gts: &[LabelGrid],
    uncertainty: &[Vec<f64>],
    r_grid: &[f64],
) -> Result<CorrectionCurve> {
    check_grid(r_grid)?;
    if preds.len() != gts.len() || preds.len() != uncertainty.len() {
        return Err(Error::dim("predictions, ground truth and uncertainty differ in image count"));
    }
    let mut wrong = Vec::new();
    let mut score = Vec::new();
    for ((p, g), u) in preds.iter().zip(gts).zip(uncertainty) {
        if (p.height(), p.width()) != (g.height(), g.width()) || u.len() != p.num_pixels() {
            return Err(Error::dim("prediction, ground truth and uncertainty differ in shape"));
        }
        if u.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("correction ranking", "NaN uncertainty"));
        }
        wrong.extend(p.values().iter().zip(g.values()).map(|(a, b)| a != b));
        score.extend_from_slice(u);
    }
    let n = wrong.len();
    if n == 0 {
        return Err(Error::UndefinedMetric("correction curve over zero pixels".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps raster order among ties.
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]));
    let mut fixed_prefix = Vec::with_capacity(n + 1);
    fixed_prefix.push(0usize);
    for &i in &order {
        let last = *fixed_prefix.last().expect("non-empty");
        fixed_prefix.push(last + usize::from(wrong[i]));
    }
    let correct = wrong.iter().filter(|w| !**w).count();
    let nf = n as f64;
    let points = r_grid
        .iter()
        .map(|&r| {
            // The epsilon absorbs products like 0.29 * 100 = 28.999999999999996.
            let m = ((r * nf + 1e-9).floor() as usize).min(n);
            (r, (correct + fixed_prefix[m]) as f64 / nf)
        })
        .collect();
    Ok(CorrectionCurve { points })
}

/// Errors-first ranking: the best any uncertainty estimate can do.
pub fn oracle_curve(preds: &[LabelGrid], gts: &[LabelGrid], r_grid: &[f64]) -> Result<CorrectionCurve> {
    let indicator: Vec<Vec<f64>> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            p.values()
                .iter()
                .zip(g.values())
                .map(|(a, b)| if a != b { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    correction_curve(preds, gts, &indicator, r_grid)
}

/// Continuous oracle `min(base + r, 1)`.
pub fn oracle_curve_continuous(base: f64, r_grid: &[f64]) -> Result<CorrectionCurve> {
    check_grid(r_grid)?;
    if !(0.0..=1.0).contains(&base) {
        return Err(Error::config(format!("base accuracy must lie in [0, 1], got {base}")));
    }
    Ok(CorrectionCurve {
        points: r_grid.iter().map(|&r| (r, (base + r).min(1.0))).collect(),
    })
}

/// Trapezoid area over `r in [0, 0.5]`, normalised by the range length.
pub fn auc(curve: &CorrectionCurve) -> Result<f64> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .copied()
        .filter(|&(r, _)| r <= AUC_RANGE + 1e-12)
        .collect();
    let covers = pts.first().is_some_and(|&(r, _)| r.abs() <= 1e-12)
        && pts.last().is_some_and(|&(r, _)| (r - AUC_RANGE).abs() <= 1e-12);
    if !covers {
        return Err(Error::config("AUC needs a curve sampled from r = 0 to r = 0.5"));
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / AUC_RANGE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[u8]) -> LabelGrid {
        LabelGrid::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn four_pixel_example() {
        let gt = [grid(&[0, 1, 1, 0])];
        let pred = [grid(&[1, 1, 0, 0])];
        let u = [vec![0.9, 0.1, 0.8, 0.2]];
        let c = correction_curve(&pred, &gt, &u, &[0.0, 0.25, 0.5]).unwrap();
        assert_eq!(c.points, vec![(0.0, 0.5), (0.25, 0.75), (0.5, 1.0)]);
        assert_eq!(oracle_curve(&pred, &gt, &[0.0, 0.25, 0.5]).unwrap(), c);
    }

    #[test]
    fn ties_follow_raster_order() {
        let gt = [grid(&[0, 0]), grid(&[0, 0])];
        let pred = [grid(&[0, 0]), grid(&[1, 0])];
        let u = [vec![0.5, 0.5], vec![0.5, 0.5]];
        let c = correction_curve(&pred, &gt, &u, &[0.5, 0.75]).unwrap();
        assert_eq!(c.points, vec![(0.5, 0.75), (0.75, 1.0)]);
    }

    #[test]
    fn perfect_predictions_and_constant_auc() {
        let g = [grid(&[2, 1, 0])];
        let c = correction_curve(&g, &g, &[vec![0.3, 0.1, 0.2]], &default_r_grid()).unwrap();
        assert!(c.points.iter().all(|&(_, a)| a == 1.0));
        assert_eq!(auc(&c).unwrap(), 1.0);
        let flat = CorrectionCurve {
            points: default_r_grid().into_iter().map(|r| (r, 0.8125)).collect(),
        };
        assert!((auc(&flat).unwrap() - 0.8125).abs() < 1e-15);
        let short = CorrectionCurve {
            points: vec![(0.0, 1.0), (0.25, 1.0)],
        };
        assert!(auc(&short).is_err());
    }

    #[test]
    fn continuous_oracle() {
        let c = oracle_curve_continuous(0.964, &[0.0, 0.036, 0.1]).unwrap();
        assert_eq!(c.points[0].1, 0.964);
        assert!((c.points[1].1 - 1.0).abs() < 1e-15);
        assert_eq!(c.points[2].1, 1.0);
    }
}
