//! Per-variable generative parameters and within-week sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

use crate::pipeline::{Aggregation, SamplingClass, VariableSpec, HOURS_PER_DAY};

/// How hourly values are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Noise {
    /// Over-dispersed Poisson counts.
    Count,
    /// Positive continuous totals.
    Amount,
    /// Gaussian momentary readings.
    Reading,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct VarModel {
    /// Mean hourly value (sums) or reading (means) for the reference
    /// subject: age 50, sex 0, fitness 0, activity 0.
    pub base: f64,
    /// Within-hour reading noise (readings) or unused.
    pub sd: f64,
    /// Between-subject standard deviation of the random intercept.
    pub subject_sd: f64,
    pub lo: f64,
    pub hi: f64,
    pub noise: Noise,
}

const fn m(base: f64, sd: f64, subject_sd: f64, lo: f64, hi: f64, noise: Noise) -> VarModel {
    VarModel {
        base,
        sd,
        subject_sd,
        lo,
        hi,
        noise,
    }
}

const INF: f64 = f64::INFINITY;

/// Indexed by variable id.
pub(crate) const MODELS: [VarModel; 27] = [
    m(0.8, 0.0, 0.2, 0.0, INF, Noise::Count),
    m(0.8, 0.0, 0.2, 0.0, INF, Noise::Count),
    m(25.0, 0.0, 5.0, 0.0, INF, Noise::Amount),
    m(65.0, 0.0, 4.0, 0.0, INF, Noise::Amount),
    m(400.0, 0.0, 80.0, 0.0, INF, Noise::Count),
    m(450.0, 0.0, 80.0, 0.0, INF, Noise::Count),
    m(3.0, 0.0, 0.8, 0.0, 60.0, Noise::Count),
    m(8.0, 0.0, 1.5, 0.0, 60.0, Noise::Count),
    m(62.0, 1.5, 3.0, 35.0, 120.0, Noise::Reading),
    m(100.0, 5.0, 5.0, 50.0, 190.0, Noise::Reading),
    m(75.0, 8.0, 4.0, 35.0, 200.0, Noise::Reading),
    m(45.0, 10.0, 8.0, 5.0, 200.0, Noise::Reading),
    m(15.0, 1.0, 1.0, 6.0, 35.0, Noise::Reading),
    m(96.5, 1.0, 0.5, 80.0, 100.0, Noise::Reading),
    m(0.0, 0.2, 0.15, -3.0, 3.0, Noise::Reading),
    m(1.3, 0.12, 0.08, 0.2, 2.5, Noise::Reading),
    m(0.7, 0.05, 0.04, 0.2, 1.2, Noise::Reading),
    m(28.0, 2.5, 2.0, 15.0, 50.0, Noise::Reading),
    m(3.0, 2.0, 1.5, 0.0, 40.0, Noise::Reading),
    m(0.35, 0.05, 0.04, 0.05, 1.0, Noise::Reading),
    m(0.4, 0.06, 0.04, 0.05, 1.2, Noise::Reading),
    m(1.0, 0.0, 0.0, 1.0, INF, Noise::Count),
    m(85.0, 6.0, 6.0, 0.0, 100.0, Noise::Reading),
    m(75.0, 0.4, 12.0, 35.0, 200.0, Noise::Reading),
    m(26.0, 0.15, 3.5, 14.0, 50.0, Noise::Reading),
    m(38.0, 1.2, 4.0, 12.0, 75.0, Noise::Reading),
    m(500.0, 15.0, 35.0, 100.0, 900.0, Noise::Reading),
];

/// First and last waking hour of the day (inclusive).
pub(crate) const WAKE: (usize, usize) = (7, 22);
/// Overnight hours carrying sleep-time vitals.
pub(crate) const NIGHT: (usize, usize) = (0, 6);

/// Relative activity over waking hours, normalised to mean 1.
pub(crate) fn activity_profile(hour_of_day: usize) -> f64 {
    if !(WAKE.0..=WAKE.1).contains(&hour_of_day) {
        return 0.0;
    }
    let x = (hour_of_day - WAKE.0) as f64 / (WAKE.1 - WAKE.0) as f64;
    let raw = 1.0 + 0.5 * (std::f64::consts::PI * x).sin();
    // mean of 1 + 0.5 sin(pi x) over the 16 evenly spaced waking hours
    let n = (WAKE.1 - WAKE.0 + 1) as f64;
    let mean = (0..=(WAKE.1 - WAKE.0))
        .map(|i| 1.0 + 0.5 * (std::f64::consts::PI * i as f64 / (n - 1.0)).sin())
        .sum::<f64>()
        / n;
    raw / mean
}

/// Hour-of-week cells at which a variable may be sampled in one week, and
/// the sampling plan for an active week. Returns hours (0-167) at which at
/// least one raw sample is emitted; never empty.
pub(crate) fn sample_hours(
    spec: &VariableSpec,
    rng: &mut ChaCha8Rng,
    worn_days: &[bool; 7],
) -> Vec<usize> {
    let mut hours = Vec::new();
    let awake = |d: usize| (WAKE.0..=WAKE.1).map(move |h| d * HOURS_PER_DAY + h);
    let night = |d: usize| (NIGHT.0..=NIGHT.1).map(move |h| d * HOURS_PER_DAY + h);
    let days: Vec<usize> = (0..7).filter(|&d| worn_days[d]).collect();
    let pick_awake =
        |rng: &mut ChaCha8Rng, d: usize| d * HOURS_PER_DAY + rng.random_range(WAKE.0..=WAKE.1);
    match (spec.sampling_class, spec.overnight_only) {
        (SamplingClass::SubHourly, true) => {
            for &d in &days {
                hours.extend(night(d).filter(|_| rng.random_bool(0.5)));
            }
        }
        (SamplingClass::SubHourly, false) => {
            let (p, all_day) = match spec.variable_id {
                10 => (0.75, true),
                4 => (0.6, false),
                0..=7 => (0.7, false),
                _ => (0.25, false),
            };
            for &d in &days {
                if all_day {
                    hours.extend(
                        (0..HOURS_PER_DAY)
                            .map(|h| d * HOURS_PER_DAY + h)
                            .filter(|_| rng.random_bool(p)),
                    );
                } else {
                    hours.extend(awake(d).filter(|_| rng.random_bool(p)));
                }
            }
        }
        (SamplingClass::Daily, overnight) => {
            for &d in &days {
                if rng.random_bool(0.85) {
                    hours.push(if overnight {
                        d * HOURS_PER_DAY + rng.random_range(NIGHT.0..=NIGHT.1)
                    } else {
                        pick_awake(rng, d)
                    });
                }
            }
        }
        (SamplingClass::FewHourly, _) => {
            let per_day = Poisson::new(3.0).unwrap();
            for &d in &days {
                let k = per_day.sample(rng) as usize;
                for _ in 0..k {
                    hours.push(d * HOURS_PER_DAY + rng.random_range(0..HOURS_PER_DAY));
                }
            }
        }
        (SamplingClass::Weekly, _) => {
            let d = days[rng.random_range(0..days.len())];
            hours.push(pick_awake(rng, d));
        }
        (SamplingClass::Opportunistic, _) => {
            let extra = Poisson::new(0.3).unwrap().sample(rng) as usize;
            for _ in 0..=extra {
                let d = days[rng.random_range(0..days.len())];
                hours.push(pick_awake(rng, d));
            }
        }
    }
    if hours.is_empty() {
        let d = days[rng.random_range(0..days.len())];
        hours.push(if spec.overnight_only {
            d * HOURS_PER_DAY + rng.random_range(NIGHT.0..=NIGHT.1)
        } else {
            pick_awake(rng, d)
        });
    }
    hours.sort_unstable();
    hours.dedup();
    hours
}

/// Raw samples for one observed hour whose expected hourly aggregate is
/// `mean`.
pub(crate) fn sample_values(
    model: &VarModel,
    agg: Aggregation,
    mean: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let parts = if rng.random_bool(0.3) { 2 } else { 1 };
    let clamp = |v: f64| v.clamp(model.lo, model.hi);
    match (model.noise, agg) {
        (Noise::Count, _) => {
            let share = mean.max(0.0) / parts as f64;
            (0..parts)
                .map(|_| {
                    if share <= 0.0 {
                        return 0.0;
                    }
                    let lambda = Gamma::new(2.0, share / 2.0).unwrap().sample(rng);
                    let c = if lambda > 0.0 {
                        Poisson::new(lambda).unwrap().sample(rng)
                    } else {
                        0.0
                    };
                    clamp(c)
                })
                .collect()
        }
        (Noise::Amount, _) => {
            let share = mean.max(1e-6) / parts as f64;
            (0..parts)
                .map(|_| clamp(Gamma::new(4.0, share / 4.0).unwrap().sample(rng)))
                .collect()
        }
        (Noise::Reading, _) => {
            let n = Normal::new(mean, model.sd.max(1e-9)).unwrap();
            (0..parts).map(|_| clamp(n.sample(rng))).collect()
        }
    }
}
