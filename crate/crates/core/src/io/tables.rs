use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::pipeline::MeasurementTuple;
use crate::{Error, Result};

/// One row of the labels table; subject-level fields repeat per week.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub subject_id: u64,
    pub age: f64,
    pub sex: u8,
    pub week_index: u32,
    pub event_flag: u8,
}

fn to_csv<S: Serialize>(rows: &[S]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn from_csv<D: serde::de::DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<D>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Format(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            found.join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub const MEASUREMENT_HEADER: [&str; 4] = ["subject_id", "absolute_hour", "variable_id", "value"];
pub const LABEL_HEADER: [&str; 5] = ["subject_id", "age", "sex", "week_index", "event_flag"];

pub fn write_measurements(path: &Path, rows: &[MeasurementTuple]) -> Result<()> {
    let bytes = if rows.is_empty() {
        format!("{}\n", MEASUREMENT_HEADER.join(",")).into_bytes()
    } else {
        to_csv(rows)?
    };
    atomic_write(path, &bytes)
}

pub fn read_measurements(path: &Path) -> Result<Vec<MeasurementTuple>> {
    from_csv(path, &MEASUREMENT_HEADER)
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let bytes = if rows.is_empty() {
        format!("{}\n", LABEL_HEADER.join(",")).into_bytes()
    } else {
        to_csv(rows)?
    };
    atomic_write(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    from_csv(path, &LABEL_HEADER)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurements_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            MeasurementTuple {
                subject_id: 1,
                absolute_hour: 470_000,
                variable_id: 10,
                value: 61.25,
            },
            MeasurementTuple {
                subject_id: 2,
                absolute_hour: -5,
                variable_id: 0,
                value: 0.1 + 0.2,
            },
        ];
        write_measurements(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("subject_id,absolute_hour,variable_id,value\n"));
        assert_eq!(read_measurements(&p).unwrap(), rows);
    }

    #[test]
    fn empty_tables_still_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_labels(&p, &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "subject_id,age,sex,week_index,event_flag\n"
        );
        assert!(read_labels(&p).unwrap().is_empty());
    }
}
