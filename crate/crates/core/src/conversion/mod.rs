//! Replacement mappings, schedules, stage masks and the staged conversion
//! driver.

mod driver;
mod mapping;
mod schedule;

pub(crate) use driver::{guarded_stage, prepare_stage};
pub use driver::{route_inputs, run_conversion, ConversionConfig, ConversionOutcome, StageAudit};
pub use mapping::{MappingEntry, MappingSpec, Replacement, ReplacementMapping};
pub use schedule::{make_schedule, trainable_parameters, Schedule, ScheduleKind};
