//! Configuration and the tracking/mapping orchestration.
//!
//! Single-thread mode runs `track -> (map -> semantics -> publish)` per frame
//! in order and is fully deterministic. Dual-thread mode hands keyframes to a
//! mapping thread through a bounded queue; the tracker keeps working on
//! whatever map snapshot was last published.

mod config;
mod run;
mod snapshot;

pub use config::{DatasetConfig, DatasetKind, PipelineConfig};
pub use run::{
    load_sequence, predicted_labels, run, run_sequence, synthetic_label_names, write_outputs, KeyframeReport,
    RunMetrics, RunReport, Sequence,
};
pub use snapshot::{MapSnapshot, Published};
