//! Interaction logs, popularity index, leave-one-out splits, gap features.

pub mod gaps;
pub mod log;
pub mod popularity;
pub mod split;

pub use gaps::{normalize_gaps, GapNormalizer, GAP_SLACK};
pub use log::{load_log, Column, DatasetStats, Interaction, InteractionLog, LogFormat};
pub use popularity::PopularityIndex;
pub use split::{make_splits, SplitSpec, TimedItem, UserSplit};
