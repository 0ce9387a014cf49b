use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::registry::{Registry, HOURS_PER_WEEK, N_VARS};
use super::MeasurementTuple;
use crate::nn::Matrix;

/// 1970-01-05 00:00 was the first Monday after the epoch.
const FIRST_MONDAY_HOUR: i64 = 96;

/// Values block plus mask block.
pub const DENSE_WIDTH: usize = 2 * N_VARS;

/// Index of the Monday-aligned week containing `absolute_hour`.
pub fn week_index_of(absolute_hour: i64) -> i64 {
    (absolute_hour - FIRST_MONDAY_HOUR).div_euclid(HOURS_PER_WEEK as i64)
}

/// Row of `absolute_hour` inside its week; Monday 00:00 is 0.
pub fn hour_of_week(absolute_hour: i64) -> usize {
    (absolute_hour - FIRST_MONDAY_HOUR).rem_euclid(HOURS_PER_WEEK as i64) as usize
}

/// Absolute hour of Monday 00:00 of week `week_index`.
pub fn week_start_hour(week_index: u32) -> i64 {
    FIRST_MONDAY_HOUR + week_index as i64 * HOURS_PER_WEEK as i64
}

/// Dense 168 x 27 subject-week with its observation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekGrid {
    pub subject_id: u64,
    pub week_index: u32,
    /// Row-major, `values[hour * 27 + variable]`.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

/// One observed cell of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedTuple {
    pub hour: u16,
    pub variable_id: u16,
    pub value: f64,
}

impl WeekGrid {
    pub fn empty(subject_id: u64, week_index: u32) -> Self {
        WeekGrid {
            subject_id,
            week_index,
            values: vec![0.0; HOURS_PER_WEEK * N_VARS],
            mask: vec![false; HOURS_PER_WEEK * N_VARS],
        }
    }

    #[inline]
    pub fn idx(hour: usize, var: usize) -> usize {
        hour * N_VARS + var
    }

    pub fn value(&self, hour: usize, var: usize) -> f64 {
        self.values[Self::idx(hour, var)]
    }

    pub fn observed(&self, hour: usize, var: usize) -> bool {
        self.mask[Self::idx(hour, var)]
    }

    pub fn set(&mut self, hour: usize, var: usize, value: f64) {
        let i = Self::idx(hour, var);
        self.values[i] = value;
        self.mask[i] = true;
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn key(&self) -> (u64, u32) {
        (self.subject_id, self.week_index)
    }

    /// Observed values of one variable in hour order.
    pub fn variable_values(&self, var: usize) -> impl Iterator<Item = f64> + '_ {
        (0..HOURS_PER_WEEK)
            .filter(move |&h| self.observed(h, var))
            .map(move |h| self.value(h, var))
    }
}

/// Place hourly tuples into Monday-aligned week grids.
///
/// Tuples must already be hourly-aggregated; if a cell is hit twice the later
/// tuple wins. Tuples before the first epoch Monday or with unknown variables
/// are skipped. Output is sorted by `(subject, week)`.
pub fn build_week_grids(hourly: &[MeasurementTuple], registry: &Registry) -> Vec<WeekGrid> {
    let mut grids: BTreeMap<(u64, u32), WeekGrid> = BTreeMap::new();
    let mut skipped = 0usize;
    for t in hourly {
        let week = week_index_of(t.absolute_hour);
        if week < 0 || week > u32::MAX as i64 || registry.get(t.variable_id).is_none() {
            skipped += 1;
            continue;
        }
        let week = week as u32;
        let grid = grids
            .entry((t.subject_id, week))
            .or_insert_with(|| WeekGrid::empty(t.subject_id, week));
        grid.set(
            hour_of_week(t.absolute_hour),
            t.variable_id as usize,
            t.value,
        );
    }
    if skipped > 0 {
        log::warn!("week grid construction skipped {skipped} tuple(s)");
    }
    grids.into_values().collect()
}

/// `168 x 54` model input: columns 0-26 are values, 27-53 the mask.
pub fn to_dense_features(grid: &WeekGrid) -> Matrix<f64> {
    let mut m = Matrix::zeros(HOURS_PER_WEEK, DENSE_WIDTH);
    for h in 0..HOURS_PER_WEEK {
        let row = m.row_mut(h);
        for v in 0..N_VARS {
            if grid.observed(h, v) {
                row[v] = grid.value(h, v);
                row[N_VARS + v] = 1.0;
            }
        }
    }
    m
}

/// Observed cells ordered by hour, ties broken by variable id.
pub fn to_tuple_stream(grid: &WeekGrid) -> Vec<ObservedTuple> {
    let mut out = Vec::with_capacity(grid.observed_count());
    for h in 0..HOURS_PER_WEEK {
        for v in 0..N_VARS {
            if grid.observed(h, v) {
                out.push(ObservedTuple {
                    hour: h as u16,
                    variable_id: v as u16,
                    value: grid.value(h, v),
                });
            }
        }
    }
    out
}

/// Inverse of [`to_tuple_stream`].
pub fn grid_from_tuple_stream(
    subject_id: u64,
    week_index: u32,
    stream: &[ObservedTuple],
) -> WeekGrid {
    let mut g = WeekGrid::empty(subject_id, week_index);
    for t in stream {
        g.set(t.hour as usize, t.variable_id as usize, t.value);
    }
    g
}
