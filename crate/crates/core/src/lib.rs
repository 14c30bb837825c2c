pub mod config;
pub mod eval;
pub mod faultclass;
pub mod fusion;
pub mod fuzzyhealth;
pub mod grouping;
pub mod pipeline;
pub mod scorer;
pub mod simulator;
pub mod telemetry;

pub use config::PipelineConfig;
pub use faultclass::{FaultClass, FaultRecord};
pub use fusion::{AnomalyRegion, BnModel, EvidenceState};
pub use fuzzyhealth::{HealthRecord, RuleBase};
pub use grouping::{GroupSpec, Verdict, VoteResult};
pub use pipeline::{run_detect, DetectOutput, PipelineError, Resources};
pub use scorer::{AnomalyScoreSeries, ScoreRecord};
pub use telemetry::{AlignedTable, Label, LabeledTrace, SensorMeta, SensorReading};
