use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_hourly, AggregationReport};
use super::filters::usable_weeks;
use super::grid::{build_week_grids, WeekGrid};
use super::norm::{apply_norm, fit_norm_stats, NormStats, DEFAULT_CLIP};
use super::registry::Registry;
use super::split::{split_subjects, Split, SubjectSplits};
use super::MeasurementTuple;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Skip the wear and cohort filters.
    pub keep_all_weeks: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            clip_lo: -DEFAULT_CLIP,
            clip_hi: DEFAULT_CLIP,
            keep_all_weeks: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::config(
                "pipeline.clip_lo",
                "must be below pipeline.clip_hi",
            ));
        }
        Ok(())
    }
}

/// Usable weeks, raw and z-scored, with the subject split and the
/// training-split statistics. Both week lists are sorted by
/// `(subject, week)` and aligned.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub raw: Vec<WeekGrid>,
    pub normalized: Vec<WeekGrid>,
    pub splits: SubjectSplits,
    pub stats: NormStats,
    pub report: AggregationReport,
}

impl PreparedData {
    /// Positions of the weeks belonging to `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.raw.len())
            .filter(|&i| self.splits.split_of(self.raw[i].subject_id) == Some(split))
            .collect()
    }

    pub fn normalized_in(&self, split: Split) -> Vec<WeekGrid> {
        self.indices(split)
            .into_iter()
            .map(|i| self.normalized[i].clone())
            .collect()
    }
}

/// Aggregate, grid, filter, split subjects and z-score with statistics
/// fitted on the training subjects only.
pub fn prepare(raw: &[MeasurementTuple], cfg: &PipelineConfig, seed: u64) -> Result<PreparedData> {
    cfg.validate()?;
    let registry = Registry::standard();
    let (hourly, report) = aggregate_hourly(raw, &registry);
    let grids = build_week_grids(&hourly, &registry);
    let mut weeks = if cfg.keep_all_weeks {
        grids
    } else {
        usable_weeks(grids)
    };
    weeks.sort_by_key(|w| w.key());
    let mut subjects: Vec<u64> = weeks.iter().map(|w| w.subject_id).collect();
    subjects.dedup();
    let splits = split_subjects(&subjects, seed)?;
    let train: Vec<WeekGrid> = weeks
        .iter()
        .filter(|w| splits.split_of(w.subject_id) == Some(Split::Train))
        .cloned()
        .collect();
    let stats = fit_norm_stats(&train, cfg.clip_lo, cfg.clip_hi)?;
    let normalized = weeks.iter().map(|w| apply_norm(w, &stats)).collect();
    Ok(PreparedData {
        raw: weeks,
        normalized,
        splits,
        stats,
        report,
    })
}
