//! Empirical recovery of the planted effects from a generated cohort.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Cohort, GeneratorConfig, REFERENCE_AGE};
use crate::pipeline::{aggregate_hourly, week_index_of, Registry, N_VARS};
use crate::Result;

pub const TRAITS: [&str; 4] = ["age", "sex", "fitness", "activity"];

/// Least-squares estimate of one trait's effect on one variable's weekly
/// mean, alongside the configured value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub variable: String,
    pub trait_name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub configured: f64,
    pub subjects: usize,
}

/// Mean over event weeks divided by mean over other weeks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRatio {
    pub variable: String,
    pub ratio: f64,
    pub configured_multiplier: f64,
    pub configured_shift: f64,
    pub event_weeks: usize,
    pub other_weeks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub effects: Vec<EffectEstimate>,
    pub event_ratios: Vec<EventRatio>,
}

impl OracleTable {
    pub fn effect(&self, variable: &str, trait_name: &str) -> Option<&EffectEstimate> {
        self.effects
            .iter()
            .find(|e| e.variable == variable && e.trait_name == trait_name)
    }

    pub fn event_ratio(&self, variable: &str) -> Option<&EventRatio> {
        self.event_ratios.iter().find(|e| e.variable == variable)
    }
}

/// Observed weekly means of the hourly aggregates, keyed by
/// (subject, week, variable).
pub fn weekly_means(cohort: &Cohort) -> BTreeMap<(u64, u32, usize), f64> {
    let reg = Registry::standard();
    let (hourly, _) = aggregate_hourly(&cohort.measurements, &reg);
    let mut acc: BTreeMap<(u64, u32, usize), (f64, usize)> = BTreeMap::new();
    for m in hourly {
        let key = (
            m.subject_id,
            week_index_of(m.absolute_hour) as u32,
            m.variable_id as usize,
        );
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += m.value;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

/// Regresses each subject's mean over non-event weeks on the latent traits
/// (one row per subject, so residuals are independent), and compares event
/// and non-event week means per variable.
pub fn planted_effect_oracle(cfg: &GeneratorConfig, cohort: &Cohort) -> Result<OracleTable> {
    let resolved = cfg.resolve()?;
    let reg = Registry::standard();
    let means = weekly_means(cohort);
    let latents: BTreeMap<u64, _> = cohort.latents.iter().map(|l| (l.subject_id, l)).collect();
    let mut effects = Vec::new();
    let mut event_ratios = Vec::new();
    for spec in reg.specs() {
        let v = spec.variable_id as usize;
        let mut per_subject: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        let (mut ev, mut other) = ((0.0, 0usize), (0.0, 0usize));
        for (&(s, w, var), &value) in &means {
            if var != v {
                continue;
            }
            if latents[&s].event_weeks.contains(&w) {
                ev.0 += value;
                ev.1 += 1;
            } else {
                other.0 += value;
                other.1 += 1;
                let e = per_subject.entry(s).or_insert((0.0, 0));
                e.0 += value;
                e.1 += 1;
            }
        }
        if ev.1 > 0 && other.1 > 0 {
            event_ratios.push(EventRatio {
                variable: spec.name.to_string(),
                ratio: (ev.0 / ev.1 as f64) / (other.0 / other.1 as f64),
                configured_multiplier: resolved.mult[v],
                configured_shift: resolved.shift[v],
                event_weeks: ev.1,
                other_weeks: other.1,
            });
        }
        let n = per_subject.len();
        let p = 1 + TRAITS.len();
        if n <= p + 1 {
            continue;
        }
        let mut x = DMatrix::<f64>::zeros(n, p);
        let mut y = DVector::<f64>::zeros(n);
        for (i, (s, (sum, cnt))) in per_subject.iter().enumerate() {
            let l = latents[s];
            let row = [
                1.0,
                l.age - REFERENCE_AGE,
                l.sex as f64,
                l.fitness,
                l.activity_level,
            ];
            for (j, &val) in row.iter().enumerate() {
                x[(i, j)] = val;
            }
            y[i] = sum / *cnt as f64;
        }
        let xtx = x.transpose() * &x;
        let Some(inv) = xtx.try_inverse() else {
            continue;
        };
        let beta = &inv * x.transpose() * &y;
        let resid = &y - &x * &beta;
        let sigma2 = resid.norm_squared() / (n - p) as f64;
        let configured = [
            resolved.age[v],
            resolved.sex[v],
            resolved.fitness[v],
            resolved.activity[v],
        ];
        for (j, name) in TRAITS.iter().enumerate() {
            effects.push(EffectEstimate {
                variable: spec.name.to_string(),
                trait_name: name.to_string(),
                estimate: beta[j + 1],
                std_error: (sigma2 * inv[(j + 1, j + 1)]).sqrt(),
                configured: configured[j],
                subjects: n,
            });
        }
    }
    debug_assert!(event_ratios.len() <= N_VARS);
    Ok(OracleTable {
        effects,
        event_ratios,
    })
}
