//! Single-stage grid detector: anchor clustering, target encoding, the
//! sum-squared loss, decoding with non-maximum suppression, and training.

mod anchors;
mod grid;
mod net;
mod train;

pub use anchors::{compute_anchors, shape_iou, AnchorSet};
pub use grid::{activate, decode_grid, decode_predictions, detection_loss, encode_targets, nms, DetLossConfig, GridTarget};
pub use net::{BackboneConfig, DetectorNet, OBJECTNESS_PRIOR, STRIDE};
pub use train::{ground_truth, load_detector, train_detector, DetectorConfig, TrainedDetector};

pub use crate::metrics::Detection;
