use std::collections::BTreeMap;

use super::grid::WeekGrid;
use super::registry::{HEART_RATE, HOURS_PER_DAY, HOURS_PER_WEEK};

pub const MIN_WEAR_DAYS: usize = 5;
pub const MIN_USABLE_WEEKS: usize = 5;
/// Weekly analog of a 90-day enrollment.
pub const MIN_ENROLLMENT_SPAN_WEEKS: u32 = 13;

/// A week is worn if heart rate appears on at least five distinct days.
pub fn wear_filter(grid: &WeekGrid) -> bool {
    let var = HEART_RATE as usize;
    let days = (0..HOURS_PER_WEEK / HOURS_PER_DAY)
        .filter(|d| (d * HOURS_PER_DAY..(d + 1) * HOURS_PER_DAY).any(|h| grid.observed(h, var)))
        .count();
    days >= MIN_WEAR_DAYS
}

/// Subject-level filter over the subject's wear-filtered weeks.
pub fn cohort_filter(weeks: &[WeekGrid]) -> bool {
    if weeks.len() < MIN_USABLE_WEEKS {
        return false;
    }
    let first = weeks.iter().map(|w| w.week_index).min().unwrap_or(0);
    let last = weeks.iter().map(|w| w.week_index).max().unwrap_or(0);
    last - first >= MIN_ENROLLMENT_SPAN_WEEKS
}

/// Apply the wear filter to every week, then the cohort filter per subject.
/// Returns surviving grids in the input order.
pub fn usable_weeks(grids: Vec<WeekGrid>) -> Vec<WeekGrid> {
    let mut by_subject: BTreeMap<u64, Vec<WeekGrid>> = BTreeMap::new();
    for g in grids.into_iter().filter(wear_filter) {
        by_subject.entry(g.subject_id).or_default().push(g);
    }
    by_subject
        .into_values()
        .filter(|weeks| cohort_filter(weeks))
        .flatten()
        .collect()
}
