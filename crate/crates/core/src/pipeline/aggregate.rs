use std::collections::BTreeMap;

use super::registry::{Aggregation, Registry};
use super::MeasurementTuple;

/// Bookkeeping for records dropped during aggregation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregationReport {
    pub input_records: usize,
    pub output_records: usize,
    pub unknown_variable: usize,
    pub non_finite: usize,
}

impl AggregationReport {
    pub fn rejected(&self) -> usize {
        self.unknown_variable + self.non_finite
    }
}

/// Collapse raw tuples to at most one per `(subject, hour, variable)`.
///
/// Cumulative variables are summed within the hour, momentary variables are
/// averaged. Output is sorted by subject, hour, then variable id.
pub fn aggregate_hourly(
    raw: &[MeasurementTuple],
    registry: &Registry,
) -> (Vec<MeasurementTuple>, AggregationReport) {
    let mut report = AggregationReport {
        input_records: raw.len(),
        ..Default::default()
    };
    // (sum, count) per key
    let mut cells: BTreeMap<(u64, i64, u32), (f64, usize)> = BTreeMap::new();
    for t in raw {
        if registry.get(t.variable_id).is_none() {
            report.unknown_variable += 1;
            continue;
        }
        if !t.value.is_finite() {
            report.non_finite += 1;
            continue;
        }
        let cell = cells
            .entry((t.subject_id, t.absolute_hour, t.variable_id))
            .or_insert((0.0, 0));
        cell.0 += t.value;
        cell.1 += 1;
    }
    let out: Vec<MeasurementTuple> = cells
        .into_iter()
        .map(|((subject_id, absolute_hour, variable_id), (sum, n))| {
            let value = match registry.get(variable_id).map(|s| s.hourly_aggregation) {
                Some(Aggregation::Sum) => sum,
                _ => sum / n as f64,
            };
            MeasurementTuple {
                subject_id,
                absolute_hour,
                variable_id,
                value,
            }
        })
        .collect();
    report.output_records = out.len();
    if report.rejected() > 0 {
        log::warn!(
            "hourly aggregation rejected {} record(s) ({} unknown variable, {} non-finite)",
            report.rejected(),
            report.unknown_variable,
            report.non_finite
        );
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(hour: i64, var: u32, value: f64) -> MeasurementTuple {
        MeasurementTuple {
            subject_id: 1,
            absolute_hour: hour,
            variable_id: var,
            value,
        }
    }

    #[test]
    fn sums_cumulative_and_averages_momentary() {
        let reg = Registry::standard();
        let raw = vec![
            t(100, 5, 120.0),
            t(100, 5, 80.0),
            t(100, 10, 60.0),
            t(100, 10, 70.0),
        ];
        let (out, rep) = aggregate_hourly(&raw, &reg);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].variable_id, 5);
        assert_eq!(out[0].value, 200.0);
        assert_eq!(out[1].value, 65.0);
        assert_eq!(rep.rejected(), 0);
    }

    #[test]
    fn single_observation_is_unchanged() {
        let reg = Registry::standard();
        for var in 0..27 {
            let (out, _) = aggregate_hourly(&[t(7, var, 3.25)], &reg);
            assert_eq!(out, vec![t(7, var, 3.25)]);
        }
    }

    #[test]
    fn unknown_variables_are_counted() {
        let reg = Registry::standard();
        let (out, rep) = aggregate_hourly(
            &[
                t(1, 27, 1.0),
                t(1, 99, 1.0),
                t(1, 3, f64::NAN),
                t(1, 3, 2.0),
            ],
            &reg,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(rep.unknown_variable, 2);
        assert_eq!(rep.non_finite, 1);
    }

    #[test]
    fn distinct_hours_stay_distinct() {
        let reg = Registry::standard();
        let (out, _) = aggregate_hourly(&[t(2, 10, 1.0), t(1, 10, 3.0)], &reg);
        assert_eq!(
            out.iter().map(|x| x.absolute_hour).collect::<Vec<_>>(),
            vec![1, 2]
        );
    }
}
