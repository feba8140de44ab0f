//! Domain types, run configuration and the JSON-Lines manifest.

mod config;
pub mod manifest;
mod types;
mod view;

pub use config::{load_config, DecodeConfig, PerturbMode, PipelineConfig};
pub use manifest::{
    read_manifest, Baseline, Clock, ErrorRecord, LogicalClock, ManifestContents, ManifestReader,
    ManifestRecord, ManifestWriter, Payload, RunStart, SampleDone, SystemClock, SCHEMA_VERSION,
};
pub use types::{record_id, PerturbationType, TestSample, TestSuite};
pub use view::RunView;
