pub mod diffusion;
pub mod error;
pub mod gae;
pub mod grouping;
pub mod hsi;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
pub use gae::{Gae, GaeConfig, GaeTrainer, LatentList};
pub use grouping::{GroupList, GroupingConfig};
pub use hsi::{HsiCube, ImagePair, PatchSpec};
pub use loss::{LossBreakdown, LossConfig};
pub use metrics::MetricsReport;
pub use train::TrainConfig;
