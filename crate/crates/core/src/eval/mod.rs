//! Frozen-embedding evaluation: extraction, baseline statistics, ridge
//! probes with bootstrap intervals, reconstruction probes and the
//! tokenizer x backbone ablation grid.

mod ablation;
pub mod metrics;
mod probe;
pub mod ridge;

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::io::EmbeddingRecord;
use crate::nn::{checkpoint, ParameterTree};
use crate::pipeline::{WeekGrid, HOURS_PER_WEEK, N_VARS};
use crate::pretrain::{check_compatible, embed_weeks, ModelConfig};
use crate::{Error, Result};

pub use ablation::{run_ablation_grid, AblationConfig, AblationRow};
pub use metrics::{auroc, bootstrap_ci, mae, r2, BootstrapCi};
pub use probe::{
    assert_disjoint, probe_tasks, reconstruction_probe, run_probe, Level, ProbeConfig, ProbeReport,
    ProbeRow, ProbeSet, ProbeSpec, ReconTable, Task, TaskKind,
};
pub use ridge::{default_penalties, ridge_fit, ridge_fit_cv, RidgeModel};

/// Weeks encoded per forward pass during extraction.
pub const EMBED_BATCH: usize = 32;

/// Loads a checkpoint and the model configuration stored with it.
pub fn load_model(path: &Path) -> Result<(ParameterTree<f32>, ModelConfig)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    let (params, config_json) = checkpoint::load(path)?;
    let v: serde_json::Value = serde_json::from_str(&config_json)?;
    let model = v
        .get("model")
        .ok_or_else(|| Error::contract("checkpoint configuration has no model section"))?;
    let cfg: ModelConfig = serde_json::from_value(model.clone())?;
    check_compatible(&cfg, &params)?;
    Ok((params, cfg))
}

/// One deterministic embedding per week (no dropout, no token drop).
pub fn extract_embeddings(
    params: &ParameterTree<f32>,
    cfg: &ModelConfig,
    weeks: &[WeekGrid],
) -> Result<Vec<EmbeddingRecord>> {
    check_compatible(cfg, params)?;
    let chunks: Vec<Result<Vec<EmbeddingRecord>>> = weeks
        .par_chunks(EMBED_BATCH)
        .map(|chunk| {
            let refs: Vec<&WeekGrid> = chunk.iter().collect();
            let emb = embed_weeks(params, cfg, &refs)?;
            if !emb.is_finite() {
                return Err(Error::numeric("embedding", "non-finite embedding"));
            }
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, w)| EmbeddingRecord {
                    subject_id: w.subject_id,
                    week_index: w.week_index,
                    vector: emb.row(i).to_vec(),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(weeks.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub type WeekKey = (u64, u32);

pub fn keyed(records: &[EmbeddingRecord]) -> Vec<(WeekKey, Vec<f64>)> {
    records
        .iter()
        .map(|r| {
            (
                (r.subject_id, r.week_index),
                r.vector.iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

/// Mean of each subject's week vectors, sorted by subject.
pub fn subject_aggregate(rows: &[(WeekKey, Vec<f64>)]) -> Vec<(u64, Vec<f64>)> {
    let mut acc: BTreeMap<u64, (Vec<f64>, usize)> = BTreeMap::new();
    for ((s, _), v) in rows {
        let e = acc.entry(*s).or_insert_with(|| (vec![0.0; v.len()], 0));
        if e.0.len() != v.len() {
            warn!("subject {s}: inconsistent embedding width, week skipped");
            continue;
        }
        e.0.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    acc.into_iter()
        .filter(|(s, (_, n))| {
            if *n == 0 {
                warn!("subject {s} has no weeks; excluded");
            }
            *n > 0
        })
        .map(|(s, (sum, n))| (s, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Joins two keyed tables, `a` columns first. Keys present in only one side
/// are reported in a join error.
pub fn concat_embeddings<K: Ord + Clone + Debug>(
    a: &[(K, Vec<f64>)],
    b: &[(K, Vec<f64>)],
) -> Result<Vec<(K, Vec<f64>)>> {
    let bm: BTreeMap<&K, &Vec<f64>> = b.iter().map(|(k, v)| (k, v)).collect();
    let am: BTreeMap<&K, &Vec<f64>> = a.iter().map(|(k, v)| (k, v)).collect();
    let mut missing: Vec<String> = a
        .iter()
        .filter(|(k, _)| !bm.contains_key(k))
        .map(|(k, _)| format!("{k:?} missing from second table"))
        .collect();
    missing.extend(
        b.iter()
            .filter(|(k, _)| !am.contains_key(k))
            .map(|(k, _)| format!("{k:?} missing from first table")),
    );
    if !missing.is_empty() {
        return Err(Error::Join(missing));
    }
    Ok(a.iter()
        .map(|(k, v)| {
            let mut row = v.clone();
            row.extend_from_slice(bm[k]);
            (k.clone(), row)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Demographics {
    pub age: f64,
    pub sex: f64,
    pub bmi: Option<f64>,
}

/// Per-variable mean (slots 0-26) and population std (27-53) over observed
/// raw cells; unobserved variables give zeros. Demographics are appended as
/// age, sex and, when known, BMI.
pub fn baseline_features(grid: &WeekGrid, demographics: Option<&Demographics>) -> Vec<f64> {
    let mut out = vec![0.0; 2 * N_VARS];
    for v in 0..N_VARS {
        let vals: Vec<f64> = (0..HOURS_PER_WEEK)
            .filter(|&h| grid.observed(h, v))
            .map(|h| grid.value(h, v))
            .collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        out[v] = mean;
        out[N_VARS + v] = var.sqrt();
    }
    if let Some(d) = demographics {
        out.push(d.age);
        out.push(d.sex);
        if let Some(b) = d.bmi {
            out.push(b);
        }
    }
    out
}

pub fn baseline_table(raw: &[WeekGrid]) -> Vec<(WeekKey, Vec<f64>)> {
    raw.iter()
        .map(|w| (w.key(), baseline_features(w, None)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_layout() {
        let mut w = WeekGrid::empty(1, 1);
        w.set(3, 5, 2.0);
        w.set(9, 5, 4.0);
        let f = baseline_features(
            &w,
            Some(&Demographics {
                age: 40.0,
                sex: 1.0,
                bmi: Some(22.0),
            }),
        );
        assert_eq!(f.len(), 57);
        assert_eq!((f[5], f[27 + 5]), (3.0, 1.0));
        assert_eq!((f[6], f[27 + 6]), (0.0, 0.0));
        assert_eq!(&f[54..], &[40.0, 1.0, 22.0]);
        assert_eq!(baseline_features(&w, None).len(), 54);
    }

    #[test]
    fn aggregation_examples() {
        let u = vec![1.0, -2.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        let rows = vec![
            ((1, 10), u.clone()),
            ((2, 10), u.clone()),
            ((2, 11), u.clone()),
            ((3, 4), u.clone()),
            ((3, 5), neg),
        ];
        let agg = subject_aggregate(&rows);
        assert_eq!(agg[0], (1, u.clone()));
        assert_eq!(agg[1], (2, u.clone()));
        assert_eq!(agg[2], (3, vec![0.0, 0.0]));
    }

    #[test]
    fn concat_rules() {
        let a = vec![(1u64, vec![1.0; 256]), (2, vec![2.0; 256])];
        let b = vec![(2u64, vec![0.5; 64]), (1, vec![0.25; 64])];
        let c = concat_embeddings(&a, &b).unwrap();
        assert_eq!(c[0].1.len(), 320);
        assert_eq!(c[0].1[256], 0.25);
        let empty = vec![(1u64, vec![]), (2, vec![])];
        assert_eq!(concat_embeddings(&a, &empty).unwrap(), a);
        let bad = vec![(1u64, vec![0.0]), (3, vec![0.0])];
        match concat_embeddings(&a, &bad) {
            Err(Error::Join(m)) => assert_eq!(m.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn aggregation_commutes_with_concat() {
        let a = vec![
            ((1, 1), vec![1.0, 2.0]),
            ((1, 2), vec![3.0, 5.0]),
            ((2, 1), vec![0.5, 0.25]),
        ];
        let b = vec![
            ((1, 1), vec![7.0]),
            ((1, 2), vec![-1.0]),
            ((2, 1), vec![2.0]),
        ];
        let left = concat_embeddings(&subject_aggregate(&a), &subject_aggregate(&b)).unwrap();
        let right = subject_aggregate(&concat_embeddings(&a, &b).unwrap());
        assert_eq!(left, right);
    }
}
