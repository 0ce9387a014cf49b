//! Deterministic synthetic cohorts with planted ground truth.
//!
//! Each subject carries latent traits (age, sex, fitness, activity level)
//! that shift the means of the registry variables through configurable
//! linear effects, plus a per-variable random intercept. Some subjects
//! experience a contiguous block of "event" weeks during which activity is
//! depressed and vitals are elevated. Observation follows the sampling
//! class of each variable: a week is active for a variable with its
//! configured weekly rate, and an active week yields at least one sample.

mod model;
mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use oracle::{planted_effect_oracle, EffectEstimate, EventRatio, OracleTable};

use crate::io::LabelRow;
use crate::pipeline::{week_start_hour, MeasurementTuple, Registry, HOURS_PER_DAY, N_VARS};
use crate::{Error, Result};
use model::{activity_profile, sample_hours, sample_values, MODELS};

/// Latent ground truth of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectLatent {
    pub subject_id: u64,
    pub age: f64,
    pub sex: u8,
    pub fitness: f64,
    pub activity_level: f64,
    /// Generated week indices, ascending.
    pub weeks: Vec<u32>,
    pub event_weeks: BTreeSet<u32>,
}

/// Per-trait linear effects keyed by variable name. Age effects are per
/// year relative to age 50; sex effects apply to `sex = 1`; fitness and
/// activity effects are per unit; event shifts are additive and event
/// multipliers multiply the whole mean during event weeks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EffectConfig {
    pub age: BTreeMap<String, f64>,
    pub sex: BTreeMap<String, f64>,
    pub fitness: BTreeMap<String, f64>,
    pub activity: BTreeMap<String, f64>,
    pub event_shift: BTreeMap<String, f64>,
    pub event_multiplier: BTreeMap<String, f64>,
}

fn table(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
    entries.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

impl Default for EffectConfig {
    fn default() -> Self {
        EffectConfig {
            age: table(&[
                ("resting_heart_rate", 0.05),
                ("heart_rate_variability", -0.5),
                ("walking_speed", -0.006),
                ("walking_step_length", -0.003),
                ("walking_double_support", 0.12),
                ("vo2max", -0.3),
                ("six_minute_walk_distance", -3.0),
                ("step_count_phone", -3.0),
                ("step_count_watch", -3.0),
                ("active_energy_burned", -0.15),
                ("stair_ascent_speed", -0.003),
                ("stair_descent_speed", -0.003),
                ("walking_steadiness", -0.3),
                ("walking_heart_rate", -0.2),
                ("walking_asymmetry", 0.03),
            ]),
            sex: table(&[
                ("body_mass", 12.0),
                ("body_mass_index", 1.0),
                ("vo2max", 6.0),
                ("walking_step_length", 0.08),
                ("heart_rate", -3.0),
                ("resting_heart_rate", -2.0),
                ("basal_energy_burned", 15.0),
            ]),
            fitness: table(&[
                ("resting_heart_rate", -3.0),
                ("vo2max", 5.0),
                ("heart_rate_variability", 8.0),
                ("walking_heart_rate", -5.0),
                ("heart_rate", -3.0),
                ("six_minute_walk_distance", 40.0),
            ]),
            activity: table(&[
                ("step_count_phone", 150.0),
                ("step_count_watch", 150.0),
                ("active_energy_burned", 10.0),
                ("exercise_minutes", 2.0),
                ("stand_time", 1.5),
                ("flights_climbed_phone", 0.5),
                ("flights_climbed_watch", 0.5),
            ]),
            event_shift: table(&[
                ("resting_heart_rate", 6.0),
                ("heart_rate", 5.0),
                ("heart_rate_variability", -10.0),
                ("respiratory_rate", 2.0),
                ("wrist_temperature", 0.6),
                ("walking_speed", -0.1),
            ]),
            event_multiplier: table(&[
                ("step_count_phone", 0.6),
                ("step_count_watch", 0.6),
                ("active_energy_burned", 0.7),
                ("exercise_minutes", 0.5),
                ("flights_climbed_phone", 0.6),
                ("flights_climbed_watch", 0.6),
                ("stand_time", 0.8),
            ]),
        }
    }
}

impl EffectConfig {
    /// All effects zero and multipliers one.
    pub fn none() -> Self {
        EffectConfig {
            age: BTreeMap::new(),
            sex: BTreeMap::new(),
            fitness: BTreeMap::new(),
            activity: BTreeMap::new(),
            event_shift: BTreeMap::new(),
            event_multiplier: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub weeks_per_subject: usize,
    /// Calendar span (in weeks) over which a subject's weeks are spread;
    /// first and last week of the span are always generated.
    pub enrollment_span_weeks: usize,
    pub seed: u64,
    /// Variables to emit; all when absent.
    pub variables: Option<Vec<String>>,
    /// Weekly observation-rate overrides by variable name.
    pub observation_rates: BTreeMap<String, f64>,
    pub effects: EffectConfig,
    pub event_probability: f64,
    pub event_max_weeks: usize,
    /// Probability that the watch is worn on a given day.
    pub wear_day_probability: f64,
    /// Multiplies every between-subject random-intercept standard deviation.
    pub subject_sd_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_subjects: 200,
            weeks_per_subject: 8,
            enrollment_span_weeks: 20,
            seed: 0,
            variables: None,
            observation_rates: BTreeMap::new(),
            effects: EffectConfig::default(),
            event_probability: 0.35,
            event_max_weeks: 3,
            wear_day_probability: 0.92,
            subject_sd_scale: 1.0,
        }
    }
}

/// Variable-indexed view of a validated configuration.
#[derive(Debug, Clone)]
pub(crate) struct Resolved {
    pub rate: [f64; N_VARS],
    pub enabled: [bool; N_VARS],
    pub age: [f64; N_VARS],
    pub sex: [f64; N_VARS],
    pub fitness: [f64; N_VARS],
    pub activity: [f64; N_VARS],
    pub shift: [f64; N_VARS],
    pub mult: [f64; N_VARS],
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    pub(crate) fn resolve(&self) -> Result<Resolved> {
        if self.n_subjects == 0 {
            return Err(Error::config("generator.n_subjects", "must be positive"));
        }
        if self.weeks_per_subject < 5 {
            return Err(Error::config(
                "generator.weeks_per_subject",
                "must be at least 5",
            ));
        }
        if self.enrollment_span_weeks < self.weeks_per_subject {
            return Err(Error::config(
                "generator.enrollment_span_weeks",
                "must be at least weeks_per_subject",
            ));
        }
        if !(0.0..=1.0).contains(&self.event_probability) {
            return Err(Error::config(
                "generator.event_probability",
                "must lie in [0, 1]",
            ));
        }
        if self.event_max_weeks == 0 || self.event_max_weeks > self.weeks_per_subject {
            return Err(Error::config(
                "generator.event_max_weeks",
                "must lie in [1, weeks_per_subject]",
            ));
        }
        if !(self.wear_day_probability > 0.0 && self.wear_day_probability <= 1.0) {
            return Err(Error::config(
                "generator.wear_day_probability",
                "must lie in (0, 1]",
            ));
        }
        if !(self.subject_sd_scale >= 0.0 && self.subject_sd_scale.is_finite()) {
            return Err(Error::config(
                "generator.subject_sd_scale",
                "must be non-negative",
            ));
        }
        let reg = Registry::standard();
        let lookup = |section: &str, name: &str| -> Result<usize> {
            reg.by_name(name)
                .map(|s| s.variable_id as usize)
                .ok_or_else(|| {
                    Error::config(format!("generator.{section}.{name}"), "unknown variable")
                })
        };
        let mut rate = [0.0; N_VARS];
        for s in reg.specs() {
            rate[s.variable_id as usize] = s.week_rate;
        }
        for (name, &r) in &self.observation_rates {
            let id = lookup("observation_rates", name)?;
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(
                    format!("generator.observation_rates.{name}"),
                    format!("rate {r} outside [0, 1]"),
                ));
            }
            rate[id] = r;
        }
        let mut enabled = [true; N_VARS];
        if let Some(vars) = &self.variables {
            enabled = [false; N_VARS];
            for name in vars {
                enabled[lookup("variables", name)?] = true;
            }
        }
        let fill =
            |section: &str, map: &BTreeMap<String, f64>, default: f64| -> Result<[f64; N_VARS]> {
                let mut out = [default; N_VARS];
                for (name, &v) in map {
                    if !v.is_finite() {
                        return Err(Error::config(
                            format!("generator.effects.{section}.{name}"),
                            "must be finite",
                        ));
                    }
                    out[lookup(&format!("effects.{section}"), name)?] = v;
                }
                Ok(out)
            };
        let e = &self.effects;
        let mult = fill("event_multiplier", &e.event_multiplier, 1.0)?;
        if let Some((name, _)) = e.event_multiplier.iter().find(|(_, &v)| v < 0.0) {
            return Err(Error::config(
                format!("generator.effects.event_multiplier.{name}"),
                "must be non-negative",
            ));
        }
        Ok(Resolved {
            rate,
            enabled,
            age: fill("age", &e.age, 0.0)?,
            sex: fill("sex", &e.sex, 0.0)?,
            fitness: fill("fitness", &e.fitness, 0.0)?,
            activity: fill("activity", &e.activity, 0.0)?,
            shift: fill("event_shift", &e.event_shift, 0.0)?,
            mult,
        })
    }
}

/// Generated cohort: latents, raw measurements sorted by subject and hour,
/// and one label row per generated subject-week.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub latents: Vec<SubjectLatent>,
    pub measurements: Vec<MeasurementTuple>,
    pub labels: Vec<LabelRow>,
}

pub(crate) const REFERENCE_AGE: f64 = 50.0;

/// Expected hourly aggregate (sums: per waking hour on average) of
/// variable `v` for a subject-week before diurnal shaping.
pub(crate) fn expected_mean(
    r: &Resolved,
    lat: &SubjectLatent,
    intercept: f64,
    event: bool,
    v: usize,
) -> f64 {
    let mdl = &MODELS[v];
    let mut mean = mdl.base
        + r.age[v] * (lat.age - REFERENCE_AGE)
        + r.sex[v] * lat.sex as f64
        + r.fitness[v] * lat.fitness
        + r.activity[v] * lat.activity_level
        + intercept;
    if event {
        mean = (mean + r.shift[v]) * r.mult[v];
    }
    mean.clamp(mdl.lo, mdl.hi)
}

fn generate_subject(
    cfg: &GeneratorConfig,
    r: &Resolved,
    reg: &Registry,
    id: u64,
) -> (SubjectLatent, Vec<MeasurementTuple>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id);
    let trait_dist = Normal::new(0.0f64, 0.7).unwrap();
    let age = rng.random_range(18.0..90.0);
    let sex = rng.random_bool(0.5) as u8;
    let fitness = trait_dist.sample(&mut rng).clamp(-2.0, 2.0);
    let activity_level = trait_dist.sample(&mut rng).clamp(-2.0, 2.0);
    let intercepts: Vec<f64> = MODELS
        .iter()
        .map(|m| {
            let sd = m.subject_sd * cfg.subject_sd_scale;
            if sd > 0.0 {
                Normal::new(0.0, sd).unwrap().sample(&mut rng)
            } else {
                0.0
            }
        })
        .collect();

    let span = cfg.enrollment_span_weeks;
    let n = cfg.weeks_per_subject;
    let start = 2800 + rng.random_range(0..52u32);
    let mut offsets: Vec<usize> = vec![0, span - 1];
    if n > 2 {
        offsets.extend(sample(&mut rng, span - 2, n - 2).into_iter().map(|o| o + 1));
    }
    offsets.sort_unstable();
    offsets.dedup();
    let weeks: Vec<u32> = offsets.iter().map(|&o| start + o as u32).collect();

    let mut event_weeks = BTreeSet::new();
    if rng.random_bool(cfg.event_probability) {
        let len = rng.random_range(1..=cfg.event_max_weeks);
        let first = rng.random_range(0..=weeks.len() - len);
        event_weeks.extend(weeks[first..first + len].iter().copied());
    }
    let lat = SubjectLatent {
        subject_id: id,
        age,
        sex,
        fitness,
        activity_level,
        weeks: weeks.clone(),
        event_weeks,
    };

    let mut out = Vec::new();
    for &w in &weeks {
        let event = lat.event_weeks.contains(&w);
        let mut worn = [false; 7];
        for d in worn.iter_mut() {
            *d = rng.random_bool(cfg.wear_day_probability);
        }
        if !worn.iter().any(|&d| d) {
            worn[rng.random_range(0..7)] = true;
        }
        let base_hour = week_start_hour(w);
        for spec in reg.specs() {
            let v = spec.variable_id as usize;
            // draw activation for every variable so enabling a subset does
            // not shift the random stream of the others
            let active = rng.random_bool(r.rate[v]);
            if !active || !r.enabled[v] {
                continue;
            }
            let days = if matches!(v, 0 | 4) { [true; 7] } else { worn };
            let mean = expected_mean(r, &lat, intercepts[v], event, v);
            for h in sample_hours(spec, &mut rng, &days) {
                let shaped = match spec.hourly_aggregation {
                    crate::pipeline::Aggregation::Sum if v != 3 && v != 21 => {
                        mean * activity_profile(h % HOURS_PER_DAY)
                    }
                    _ => mean,
                };
                for value in sample_values(&MODELS[v], spec.hourly_aggregation, shaped, &mut rng) {
                    out.push(MeasurementTuple {
                        subject_id: id,
                        absolute_hour: base_hour + h as i64,
                        variable_id: spec.variable_id,
                        value,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        a.absolute_hour
            .cmp(&b.absolute_hour)
            .then(a.variable_id.cmp(&b.variable_id))
    });
    (lat, out)
}

/// Generates the cohort; subject `i` has id `i` and draws from its own
/// random stream, so results do not depend on thread count.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<Cohort> {
    let resolved = cfg.resolve()?;
    let reg = Registry::standard();
    let per_subject: Vec<(SubjectLatent, Vec<MeasurementTuple>)> = (0..cfg.n_subjects as u64)
        .into_par_iter()
        .map(|id| generate_subject(cfg, &resolved, &reg, id))
        .collect();
    let mut latents = Vec::with_capacity(per_subject.len());
    let mut measurements = Vec::new();
    let mut labels = Vec::new();
    for (lat, rows) in per_subject {
        for &w in &lat.weeks {
            labels.push(LabelRow {
                subject_id: lat.subject_id,
                age: lat.age,
                sex: lat.sex,
                week_index: w,
                event_flag: lat.event_weeks.contains(&w) as u8,
            });
        }
        measurements.extend(rows);
        latents.push(lat);
    }
    Ok(Cohort {
        latents,
        measurements,
        labels,
    })
}
