use crate::error::{Error, Result};
use crate::synthgrid::LabelGrid;
use crate::table;

/// Pixel counts indexed `(ground truth, prediction)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Pixels annotated `c`.
    pub fn gt_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    /// Pixels predicted `c`.
    pub fn pred_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// Adds one image; both grids must share a shape.
    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::dim("prediction and ground truth differ in shape"));
        }
        pred.check_range(self.classes)?;
        gt.check_range(self.classes)?;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            self.counts[usize::from(g) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        if class_names.len() != self.classes {
            return Err(Error::dim("class name count does not match the confusion matrix"));
        }
        let mut rows = vec![std::iter::once("gt\\pred".to_string())
            .chain(class_names.iter().cloned())
            .collect::<Vec<_>>()];
        for (g, name) in class_names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend((0..self.classes).map(|p| self.get(g, p).to_string()));
            rows.push(row);
        }
        Ok(table::render(rows))
    }
}

pub fn confusion(preds: &[LabelGrid], gts: &[LabelGrid], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != gts.len() {
        return Err(Error::dim("prediction and ground-truth lists differ in length"));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        m.accumulate(p, g)?;
    }
    Ok(m)
}

/// Per-class IoU; `None` where the union is empty.
pub fn class_iou(conf: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..conf.classes())
        .map(|c| {
            let inter = conf.get(c, c);
            let union = conf.gt_count(c) + conf.pred_count(c) - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

/// Mean IoU over classes with a non-empty union.
pub fn miou(conf: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = class_iou(conf).into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric("mIoU over an empty confusion matrix".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracies {
    /// Recall of class `c` (correct pixels over pixels annotated `c`);
    /// `None` where `c` does not occur in the ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Fraction of correctly labelled pixels.
    pub overall: f64,
}

pub fn accuracies(conf: &ConfusionMatrix) -> Result<Accuracies> {
    let total = conf.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy over zero pixels".into()));
    }
    let per_class = (0..conf.classes())
        .map(|c| {
            let denom = conf.gt_count(c);
            (denom > 0).then(|| conf.get(c, c) as f64 / denom as f64)
        })
        .collect();
    Ok(Accuracies {
        per_class,
        overall: conf.trace() as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[u8]) -> LabelGrid {
        LabelGrid::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counts() {
        let m = confusion(&[grid(&[1, 1])], &[grid(&[0, 1])], 2).unwrap();
        assert_eq!((m.get(0, 1), m.get(1, 1), m.get(0, 0), m.get(1, 0)), (1, 1, 0, 0));

        let m = confusion(&[grid(&[0, 1, 1, 1])], &[grid(&[0, 0, 1, 1])], 2).unwrap();
        assert!((miou(&m).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        let a = accuracies(&m).unwrap();
        assert_eq!(a.per_class, vec![Some(0.5), Some(1.0)]);
        assert_eq!(a.overall, 0.75);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let g = grid(&[0, 1, 1, 0]);
        let m = confusion(&[g.clone()], &[g], 3).unwrap();
        assert_eq!(miou(&m).unwrap(), 1.0);
        assert_eq!(class_iou(&m)[2], None);
        let a = accuracies(&m).unwrap();
        assert_eq!(a.overall, 1.0);
        assert_eq!(a.per_class[2], None);
        assert!(matches!(miou(&ConfusionMatrix::new(2)), Err(Error::UndefinedMetric(_))));
        assert!(confusion(&[grid(&[3])], &[grid(&[0])], 3).is_err());
    }
}
