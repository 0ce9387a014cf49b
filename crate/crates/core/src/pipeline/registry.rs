//! The fixed registry of 27 behavioral variables.

use serde::{Deserialize, Serialize};

pub const N_VARS: usize = 27;
pub const HOURS_PER_WEEK: usize = 168;
pub const HOURS_PER_DAY: usize = 24;

/// Variable used as the watch-wear proxy.
pub const HEART_RATE: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    Activity,
    Cardiovascular,
    Vitals,
    Mobility,
    Body,
    Fitness,
}

/// How repeated observations inside one hour are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingClass {
    SubHourly,
    Daily,
    FewHourly,
    Weekly,
    Opportunistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableSpec {
    pub variable_id: u32,
    pub name: &'static str,
    pub category: Category,
    pub hourly_aggregation: Aggregation,
    pub sampling_class: SamplingClass,
    /// Fraction of participant-weeks with at least one value.
    pub week_rate: f64,
    /// Only ever recorded during the night (hours 0-6).
    pub overnight_only: bool,
}

use Aggregation::{Mean, Sum};
use Category::*;
use SamplingClass::*;

macro_rules! var {
    ($id:expr, $name:expr, $cat:expr, $samp:expr, $agg:expr, $rate:expr, $night:expr) => {
        VariableSpec {
            variable_id: $id,
            name: $name,
            category: $cat,
            hourly_aggregation: $agg,
            sampling_class: $samp,
            week_rate: $rate / 100.0,
            overnight_only: $night,
        }
    };
}

fn standard_specs() -> Vec<VariableSpec> {
    vec![
        var!(
            0,
            "flights_climbed_phone",
            Activity,
            SubHourly,
            Sum,
            68.28,
            false
        ),
        var!(
            1,
            "flights_climbed_watch",
            Activity,
            SubHourly,
            Sum,
            65.06,
            false
        ),
        var!(
            2,
            "active_energy_burned",
            Activity,
            SubHourly,
            Sum,
            93.11,
            false
        ),
        var!(
            3,
            "basal_energy_burned",
            Activity,
            SubHourly,
            Sum,
            95.21,
            false
        ),
        var!(
            4,
            "step_count_phone",
            Activity,
            SubHourly,
            Sum,
            98.34,
            false
        ),
        var!(
            5,
            "step_count_watch",
            Activity,
            SubHourly,
            Sum,
            90.67,
            false
        ),
        var!(
            6,
            "exercise_minutes",
            Activity,
            SubHourly,
            Sum,
            86.35,
            false
        ),
        var!(7, "stand_time", Activity, SubHourly, Sum, 90.42, false),
        var!(
            8,
            "resting_heart_rate",
            Cardiovascular,
            Daily,
            Mean,
            88.45,
            false
        ),
        var!(
            9,
            "walking_heart_rate",
            Cardiovascular,
            Daily,
            Mean,
            84.27,
            false
        ),
        var!(
            10,
            "heart_rate",
            Cardiovascular,
            SubHourly,
            Mean,
            91.76,
            false
        ),
        var!(
            11,
            "heart_rate_variability",
            Cardiovascular,
            FewHourly,
            Mean,
            88.56,
            false
        ),
        var!(12, "respiratory_rate", Vitals, SubHourly, Mean, 35.21, true),
        var!(
            13,
            "blood_oxygen_saturation",
            Vitals,
            FewHourly,
            Mean,
            44.31,
            false
        ),
        var!(14, "wrist_temperature", Vitals, Daily, Mean, 3.12, true),
        var!(15, "walking_speed", Mobility, SubHourly, Mean, 84.59, false),
        var!(
            16,
            "walking_step_length",
            Mobility,
            SubHourly,
            Mean,
            84.53,
            false
        ),
        var!(
            17,
            "walking_double_support",
            Mobility,
            SubHourly,
            Mean,
            83.23,
            false
        ),
        var!(
            18,
            "walking_asymmetry",
            Mobility,
            SubHourly,
            Mean,
            69.78,
            false
        ),
        var!(
            19,
            "stair_ascent_speed",
            Mobility,
            SubHourly,
            Mean,
            41.64,
            false
        ),
        var!(
            20,
            "stair_descent_speed",
            Mobility,
            SubHourly,
            Mean,
            41.72,
            false
        ),
        var!(21, "fall_count", Mobility, Opportunistic, Sum, 0.04, false),
        var!(
            22,
            "walking_steadiness",
            Mobility,
            Weekly,
            Mean,
            9.64,
            false
        ),
        var!(23, "body_mass", Body, Opportunistic, Mean, 10.93, false),
        var!(
            24,
            "body_mass_index",
            Body,
            Opportunistic,
            Mean,
            7.97,
            false
        ),
        var!(25, "vo2max", Fitness, Opportunistic, Mean, 16.07, false),
        var!(
            26,
            "six_minute_walk_distance",
            Fitness,
            Weekly,
            Mean,
            8.93,
            false
        ),
    ]
}

/// Ordered, dense registry of the variable set.
#[derive(Debug, Clone)]
pub struct Registry {
    specs: Vec<VariableSpec>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::standard()
    }
}

impl Registry {
    pub fn standard() -> Self {
        Registry {
            specs: standard_specs(),
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&VariableSpec> {
        self.specs.get(id as usize)
    }

    pub fn specs(&self) -> &[VariableSpec] {
        &self.specs
    }

    pub fn by_name(&self, name: &str) -> Option<&VariableSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_dense_and_complete() {
        let reg = Registry::standard();
        assert_eq!(reg.len(), N_VARS);
        for (i, s) in reg.specs().iter().enumerate() {
            assert_eq!(s.variable_id as usize, i);
            assert!((0.0..=1.0).contains(&s.week_rate));
        }
        assert_eq!(reg.get(HEART_RATE).unwrap().name, "heart_rate");
        assert!((reg.by_name("wrist_temperature").unwrap().week_rate - 0.0312).abs() < 1e-12);
    }

    #[test]
    fn cumulative_variables_sum_and_momentary_average() {
        let reg = Registry::standard();
        for s in reg.specs() {
            let cumulative = s.name.contains("flights")
                || s.name.contains("energy")
                || s.name.contains("step_count")
                || s.name == "exercise_minutes"
                || s.name == "stand_time"
                || s.name == "fall_count";
            let expected = if cumulative { Sum } else { Mean };
            assert_eq!(s.hourly_aggregation, expected, "{}", s.name);
        }
    }
}
