//! The closed adaptation loop: confidence monitoring, gated label
//! collection, fine-tuning and weight redistribution.

mod collect;
mod eval;
mod orchestrator;
mod policy;
mod state;

pub use collect::{collect_labeled, Collection, CollectionConfig, StageTimings};
pub use eval::{evaluate, AccuracyTable};
pub use orchestrator::{AbortReason, CycleOutcome, CycleReport, GatedTeacher, Orchestrator};
pub use policy::{AdaptationPolicy, Monitor, Trigger};
pub use state::{write_events, AdaptationEvent, EventKind, LoopState, Phase};
