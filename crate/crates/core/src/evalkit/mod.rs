//! Segmentation metrics, label-correction curves and the experiment drivers.

mod curves;
mod metrics;

pub use curves::{
    auc, correction_curve, default_r_grid, oracle_curve, oracle_curve_continuous, CorrectionCurve, AUC_RANGE,
    R_STEP,
};
pub use metrics::{accuracies, class_iou, confusion, miou, Accuracies, ConfusionMatrix};

pub mod experiments;
