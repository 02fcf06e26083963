//! Metrics, heatmaps and result tables.

pub mod heatmap;
pub mod metrics;
pub mod table;

pub use heatmap::{export_heatmap, heatmap_pgm, heatmap_pixels};
pub use metrics::{
    accuracy_from_logits, evaluate_accuracy, intra_class_discrepancy, logits_for, mean_off_diagonal, pairwise_l2,
    predict,
};
pub use table::{DeviceSummary, ResultRow, ResultTable, RESULTS_HEADER};
