use std::collections::{BTreeMap, BTreeSet};

use wbm_core::pipeline::{week_index_of, Registry};
use wbm_core::synthgen::{generate_cohort, planted_effect_oracle, EffectConfig, GeneratorConfig};

fn weeks_with_value(cfg: &GeneratorConfig, var: u32) -> usize {
    let c = generate_cohort(cfg).unwrap();
    let weeks: BTreeSet<(u64, i64)> = c
        .measurements
        .iter()
        .filter(|m| m.variable_id == var)
        .map(|m| (m.subject_id, week_index_of(m.absolute_hour)))
        .collect();
    weeks.len()
}

#[test]
fn observation_rates_match_configuration() {
    let reg = Registry::standard();
    let subjects = 3000;
    let total = (subjects * 8) as f64;
    for spec in reg.specs() {
        let cfg = GeneratorConfig {
            n_subjects: subjects,
            seed: 5,
            variables: Some(vec![spec.name.to_string()]),
            ..Default::default()
        };
        let frac = weeks_with_value(&cfg, spec.variable_id) as f64 / total;
        assert!(
            (frac - spec.week_rate).abs() < 0.01,
            "{}: observed {frac:.4} vs configured {:.4}",
            spec.name,
            spec.week_rate
        );
    }
}

#[test]
fn wrist_temperature_rate_override() {
    let mut cfg = GeneratorConfig {
        n_subjects: 1500,
        seed: 6,
        variables: Some(vec!["wrist_temperature".into()]),
        ..Default::default()
    };
    cfg.observation_rates
        .insert("wrist_temperature".into(), 0.0312);
    let frac = weeks_with_value(&cfg, 14) as f64 / 12_000.0;
    assert!((frac - 0.0312).abs() < 0.01, "{frac}");
}

#[test]
fn same_seed_gives_identical_streams() {
    let cfg = GeneratorConfig {
        n_subjects: 15,
        seed: 42,
        ..Default::default()
    };
    assert_eq!(
        generate_cohort(&cfg).unwrap(),
        generate_cohort(&cfg).unwrap()
    );
    let other = GeneratorConfig {
        seed: 43,
        ..cfg.clone()
    };
    assert_ne!(
        generate_cohort(&cfg).unwrap().measurements,
        generate_cohort(&other).unwrap().measurements
    );
}

#[test]
fn oracle_recovers_planted_effects() {
    let cfg = GeneratorConfig {
        n_subjects: 600,
        seed: 8,
        variables: Some(
            [
                "resting_heart_rate",
                "step_count_watch",
                "vo2max",
                "walking_speed",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ),
        ..Default::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let table = planted_effect_oracle(&cfg, &cohort).unwrap();

    let fit = table.effect("resting_heart_rate", "fitness").unwrap();
    assert_eq!(fit.configured, -3.0);
    assert!(
        (fit.estimate + 3.0).abs() < 2.0 * fit.std_error.max(0.05),
        "{fit:?}"
    );

    for (var, coef) in [
        ("vo2max", -0.3),
        ("walking_speed", -0.006),
        ("resting_heart_rate", 0.05),
    ] {
        let e = table.effect(var, "age").unwrap();
        assert_eq!(e.configured, coef);
        assert!((e.estimate - coef).abs() < 2.0 * e.std_error, "{e:?}");
    }

    let steps = table.event_ratio("step_count_watch").unwrap();
    assert!((steps.ratio - 0.6).abs() < 0.05, "{steps:?}");
}

#[test]
fn zero_effects_give_zero_oracle() {
    let cfg = GeneratorConfig {
        n_subjects: 300,
        seed: 9,
        effects: EffectConfig::none(),
        variables: Some(vec!["heart_rate".into(), "vo2max".into()]),
        ..Default::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let table = planted_effect_oracle(&cfg, &cohort).unwrap();
    assert!(!table.effects.is_empty());
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for e in &table.effects {
        assert_eq!(e.configured, 0.0);
        let z = (e.estimate / e.std_error).abs();
        worst.insert(format!("{}.{}", e.variable, e.trait_name), z);
        assert!(z < 4.0, "{e:?}");
    }
    for r in &table.event_ratios {
        assert_eq!(r.configured_multiplier, 1.0);
        assert!((r.ratio - 1.0).abs() < 0.05, "{r:?}");
    }
}
