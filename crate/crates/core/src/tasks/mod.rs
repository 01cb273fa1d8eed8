//! Synthetic dense-prediction datasets, the analytic soft-label teacher and
//! the task metrics.

mod metrics;
mod restore;
mod shapes;

pub use metrics::{argmax_channels, miou, rmse, Confusion};
pub use restore::{gaussian_blur, gen_restore, gen_restore_sample, RestoreParams, RestoreSample};
pub use shapes::{
    gen_shapes, gen_shapes_sample, soft_targets, LabelMap, ShapesParams, ShapesSample,
};
