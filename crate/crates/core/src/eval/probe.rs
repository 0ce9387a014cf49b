use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, bootstrap_ci, mae, r2};
use super::ridge::{default_penalties, ridge_fit_cv, RidgeModel};
use super::{subject_aggregate, WeekKey};
use crate::io::LabelRow;
use crate::pipeline::{SubjectSplits, WeekGrid, N_VARS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Week,
    Subject,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Week => "week",
            Level::Subject => "subject",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Age,
    Sex,
    Event,
}

impl Task {
    pub fn kind(self) -> TaskKind {
        match self {
            Task::Age => TaskKind::Regression,
            Task::Sex | Task::Event => TaskKind::Binary,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Age => "age",
            Task::Sex => "sex",
            Task::Event => "event",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: TaskKind,
    pub level: Level,
    pub penalties: Vec<f64>,
    pub folds: usize,
    pub resamples: usize,
    pub seed: u64,
}

/// Probe settings shared by all tasks of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub tasks: Vec<Task>,
    pub levels: Vec<Level>,
    pub penalties: Vec<f64>,
    pub folds: usize,
    pub resamples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            tasks: vec![Task::Age, Task::Sex, Task::Event],
            levels: vec![Level::Week, Level::Subject],
            penalties: default_penalties(),
            folds: 5,
            resamples: 1000,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.penalties.is_empty() || self.penalties.iter().any(|p| !(*p >= 0.0 && p.is_finite()))
        {
            return Err(Error::config(
                "probe.penalties",
                "must be a non-empty list of non-negative values",
            ));
        }
        if self.folds < 2 {
            return Err(Error::config("probe.folds", "must be at least 2"));
        }
        if self.resamples < 100 {
            return Err(Error::config("probe.resamples", "must be at least 100"));
        }
        Ok(())
    }

    pub fn spec(&self, kind: TaskKind, level: Level, seed: u64) -> ProbeSpec {
        ProbeSpec {
            kind,
            level,
            penalties: self.penalties.clone(),
            folds: self.folds,
            resamples: self.resamples,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub metric: String,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    pub penalty: f64,
    pub skipped_resamples: usize,
}

/// Rows of one probe side: the subject of every row, features and target.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeSet {
    pub groups: Vec<u64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl ProbeSet {
    pub fn push(&mut self, group: u64, x: Vec<f64>, y: f64) {
        self.groups.push(group);
        self.x.push(x);
        self.y.push(y);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Fails with the shared subjects when a training subject also appears in
/// the evaluation rows.
pub fn assert_disjoint(train: &[u64], test: &[u64]) -> Result<()> {
    let a: BTreeSet<u64> = train.iter().copied().collect();
    let shared: Vec<u64> = test
        .iter()
        .copied()
        .filter(|s| a.contains(s))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(shared))
    }
}

fn fit(train: &ProbeSet, spec: &ProbeSpec) -> Result<RidgeModel> {
    let y: Vec<f64> = match spec.kind {
        TaskKind::Regression => train.y.clone(),
        TaskKind::Binary => train
            .y
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { -1.0 })
            .collect(),
    };
    ridge_fit_cv(
        &train.x,
        &y,
        &train.groups,
        &spec.penalties,
        spec.folds,
        spec.seed,
    )
}

/// Fits on `train` with grouped CV and scores `test` with bootstrap
/// intervals: MAE and R² for regression, AUROC for binary tasks.
pub fn run_probe(train: &ProbeSet, test: &ProbeSet, spec: &ProbeSpec) -> Result<Vec<ProbeReport>> {
    assert_disjoint(&train.groups, &test.groups)?;
    if test.is_empty() {
        return Err(Error::contract("probe evaluation set is empty"));
    }
    let model = fit(train, spec)?;
    let pred = model.predict(&test.x);
    let y = &test.y;
    let pick = |idx: &[usize], v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let mut out = Vec::new();
    let metrics: Vec<(&str, fn(&[f64], &[f64]) -> Result<f64>)> = match spec.kind {
        TaskKind::Regression => vec![("mae", mae), ("r2", r2)],
        TaskKind::Binary => vec![("auroc", |p, y| auroc(p, y))],
    };
    for (name, f) in metrics {
        let point = match f(&pred, y) {
            Ok(v) => v,
            Err(Error::UndefinedMetric(m)) => {
                warn!("{name} undefined on the evaluation rows: {m}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let ci = bootstrap_ci(y.len(), spec.resamples, spec.seed, |idx| {
            f(&pick(idx, &pred), &pick(idx, y))
        })?;
        if ci.skipped > 0 {
            info!("{name}: {} bootstrap resamples skipped", ci.skipped);
        }
        out.push(ProbeReport {
            metric: name.to_string(),
            point,
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            n: y.len(),
            penalty: model.penalty,
            skipped_resamples: ci.skipped,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub task: Task,
    pub features: String,
    pub level: Level,
    pub report: ProbeReport,
}

struct LabelIndex {
    subject: BTreeMap<u64, (f64, f64)>,
    event: BTreeMap<WeekKey, f64>,
}

fn index_labels(labels: &[LabelRow]) -> LabelIndex {
    let mut subject = BTreeMap::new();
    let mut event = BTreeMap::new();
    for l in labels {
        subject.insert(l.subject_id, (l.age, l.sex as f64));
        event.insert((l.subject_id, l.week_index), l.event_flag as f64);
    }
    LabelIndex { subject, event }
}

/// Probe training rows come from the pretraining train subjects; validation
/// and test subjects are merged into the evaluation side.
pub fn probe_tasks(
    features_name: &str,
    table: &[(WeekKey, Vec<f64>)],
    labels: &[LabelRow],
    splits: &SubjectSplits,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    let held_out: Vec<u64> = splits.val.iter().chain(&splits.test).copied().collect();
    assert_disjoint(&splits.train, &held_out)?;
    let idx = index_labels(labels);
    let is_train = |s: u64| splits.split_of(s) == Some(crate::pipeline::Split::Train);
    let mut rows = Vec::new();
    for &level in &cfg.levels {
        let subject_rows = if level == Level::Subject {
            subject_aggregate(table)
        } else {
            Vec::new()
        };
        for &task in &cfg.tasks {
            if task == Task::Event && level == Level::Subject {
                info!("event task is defined per week; subject level skipped");
                continue;
            }
            let (mut train, mut test) = (ProbeSet::default(), ProbeSet::default());
            let mut add = |s: u64, x: &Vec<f64>, y: Option<f64>| {
                let Some(y) = y else { return };
                if splits.split_of(s).is_none() {
                    return;
                }
                if is_train(s) {
                    train.push(s, x.clone(), y);
                } else {
                    test.push(s, x.clone(), y);
                }
            };
            let target = |s: u64, key: Option<WeekKey>| -> Option<f64> {
                match task {
                    Task::Age => idx.subject.get(&s).map(|t| t.0),
                    Task::Sex => idx.subject.get(&s).map(|t| t.1),
                    Task::Event => key.and_then(|k| idx.event.get(&k).copied()),
                }
            };
            match level {
                Level::Week => {
                    for (k, x) in table {
                        add(k.0, x, target(k.0, Some(*k)));
                    }
                }
                Level::Subject => {
                    for (s, x) in &subject_rows {
                        add(*s, x, target(*s, None));
                    }
                }
            }
            let spec = cfg.spec(task.kind(), level, seed);
            match run_probe(&train, &test, &spec) {
                Ok(reports) => rows.extend(reports.into_iter().map(|report| ProbeRow {
                    task,
                    features: features_name.to_string(),
                    level,
                    report,
                })),
                Err(e @ Error::Leakage(_)) => return Err(e),
                Err(e) => warn!("{} {} probe skipped: {e}", task.as_str(), level.as_str()),
            }
        }
    }
    Ok(rows)
}

/// Held-out R² per variable for predicting the weekly raw mean from the
/// embedding, restricted to weeks where the variable is observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconTable {
    pub r2: Vec<Option<f64>>,
    /// Variables without enough observed weeks, with their counts.
    pub skipped: Vec<(usize, usize)>,
}

pub fn reconstruction_probe(
    embeddings: &[Vec<f64>],
    grids: &[WeekGrid],
    train_subjects: &BTreeSet<u64>,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ReconTable> {
    if embeddings.len() != grids.len() {
        return Err(Error::contract("embeddings and grids are not aligned"));
    }
    let mut table = ReconTable {
        r2: vec![None; N_VARS],
        skipped: Vec::new(),
    };
    for v in 0..N_VARS {
        let (mut train, mut test) = (ProbeSet::default(), ProbeSet::default());
        for (e, g) in embeddings.iter().zip(grids) {
            let vals: Vec<f64> = g.variable_values(v).collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let side = if train_subjects.contains(&g.subject_id) {
                &mut train
            } else {
                &mut test
            };
            side.push(g.subject_id, e.clone(), mean);
        }
        let groups: BTreeSet<u64> = train.groups.iter().copied().collect();
        if train.len() < 2 * cfg.folds || groups.len() < cfg.folds || test.len() < 2 {
            table.skipped.push((v, train.len() + test.len()));
            continue;
        }
        assert_disjoint(&train.groups, &test.groups)?;
        let model = ridge_fit_cv(
            &train.x,
            &train.y,
            &train.groups,
            &cfg.penalties,
            cfg.folds,
            seed,
        )?;
        match r2(&model.predict(&test.x), &test.y) {
            Ok(r) => table.r2[v] = Some(r),
            Err(Error::UndefinedMetric(_)) => table.skipped.push((v, train.len() + test.len())),
            Err(e) => return Err(e),
        }
    }
    Ok(table)
}
