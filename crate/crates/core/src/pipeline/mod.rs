//! Raw measurements to model inputs: hourly aggregation, Monday-aligned week
//! grids with masks, wear and cohort filters, subject splits and z-scoring.

mod aggregate;
mod dataset;
mod filters;
mod grid;
mod norm;
pub mod registry;
mod split;

pub use aggregate::{aggregate_hourly, AggregationReport};
pub use dataset::{prepare, PipelineConfig, PreparedData};
pub use filters::{
    cohort_filter, usable_weeks, wear_filter, MIN_ENROLLMENT_SPAN_WEEKS, MIN_USABLE_WEEKS,
    MIN_WEAR_DAYS,
};
pub use grid::{
    build_week_grids, grid_from_tuple_stream, hour_of_week, to_dense_features, to_tuple_stream,
    week_index_of, week_start_hour, ObservedTuple, WeekGrid, DENSE_WIDTH,
};
pub use norm::{apply_norm, fit_norm_stats, NormStats, DEFAULT_CLIP};
pub use registry::{
    Aggregation, Category, Registry, SamplingClass, VariableSpec, HEART_RATE, HOURS_PER_DAY,
    HOURS_PER_WEEK, N_VARS,
};
pub use split::{split_subjects, Split, SubjectSplits};

use serde::{Deserialize, Serialize};

/// One observation: `(subject, hour, variable, value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementTuple {
    pub subject_id: u64,
    /// Hours since 1970-01-01 00:00.
    pub absolute_hour: i64,
    pub variable_id: u32,
    pub value: f64,
}
