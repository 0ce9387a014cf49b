//! The `wbm` command: datagen, pretrain, embed, probe and ablate.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::eval::{
    baseline_table, concat_embeddings, extract_embeddings, keyed, load_model, probe_tasks,
    reconstruction_probe, run_ablation_grid, ProbeRow, WeekKey,
};
use crate::io::{
    atomic_write, read_embeddings, read_grids, read_labels, read_measurements, write_embeddings,
    write_grids,
};
use crate::pipeline::{prepare, PreparedData, Registry, Split};
use crate::pretrain::{mae_pretrain, pretrain, Objective};
use crate::synthgen::generate_cohort;
use crate::{Error, Result};

pub const LOG_ENV: &str = "WBM_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "wbm",
    version,
    about = "Wearable behavioral foundation-model toolkit"
)]
pub struct Cli {
    /// TOML run configuration; defaults are used for absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data.seed` and `generator.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort: measurements.csv and labels.csv.
    Datagen,
    /// Prepare grids and pretrain an encoder.
    Pretrain,
    /// Encode every usable week with a checkpoint.
    Embed,
    /// Linear probes and reconstruction probes on stored embeddings.
    Probe,
    /// Train and rank the configured ablation grid.
    Ablate,
}

/// Exit status for an error: 3 for numeric failures, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric { .. } => 3,
        _ => 2,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ =
        env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Numeric { .. }) {
                match last_checkpoint(&cli.out) {
                    Some(p) => eprintln!("last checkpoint: {}", p.display()),
                    None => eprintln!("last checkpoint: none"),
                }
            }
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be positive"));
        }
        // Fails only when a pool already exists, e.g. on repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.seed);
    cfg.validate()?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    atomic_write(&out.join("resolved.toml"), cfg.to_toml()?.as_bytes())?;
    match cli.command {
        Command::Datagen => cmd_datagen(&cfg, out),
        Command::Pretrain => cmd_pretrain(&cfg, out),
        Command::Embed => cmd_embed(&cfg, out),
        Command::Probe => cmd_probe(&cfg, out),
        Command::Ablate => cmd_ablate(&cfg, out),
    }
}

fn last_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(out)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            (name.starts_with("epoch-") && name.ends_with(".wbmc")) || name == "mae.wbmc"
        })
        .collect();
    found.sort();
    found.pop()
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.display().to_string()))
    }
}

fn write_csv<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

fn prepared(cfg: &RunConfig, out: &Path) -> Result<PreparedData> {
    let path = cfg.measurements_path(out);
    require(&path)?;
    let raw = read_measurements(&path)?;
    prepare(&raw, &cfg.pipeline, cfg.data.seed)
}

pub fn cmd_datagen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let cohort = generate_cohort(&cfg.generator)?;
    info!(
        "generated {} subjects, {} measurements",
        cohort.latents.len(),
        cohort.measurements.len()
    );
    crate::io::write_measurements(&out.join("measurements.csv"), &cohort.measurements)?;
    crate::io::write_labels(&out.join("labels.csv"), &cohort.labels)
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = prepared(cfg, out)?;
    write_grids(&out.join("grids.wbmg"), &data.normalized)?;
    let rows: Vec<(u64, &str)> = data
        .splits
        .assignments()
        .into_iter()
        .map(|(s, sp)| (s, sp.as_str()))
        .collect();
    write_csv(&out.join("splits.csv"), &["subject_id", "split"], &rows)?;
    let mut stats = serde_json::to_string_pretty(&data.stats)?;
    stats.push('\n');
    atomic_write(&out.join("norm_stats.json"), stats.as_bytes())?;
    let train = data.normalized_in(Split::Train);
    info!("pretraining on {} weeks", train.len());
    match cfg.train.objective {
        Objective::Contrastive => {
            pretrain(&train, &cfg.pretrain_config(), cfg.data.seed, Some(out)).map(|_| ())
        }
        Objective::Mae => mae_pretrain(
            &train,
            &cfg.model,
            &cfg.mae,
            &cfg.optimizer,
            &cfg.train,
            cfg.data.seed,
            Some(out),
        )
        .map(|_| ()),
    }
}

pub fn cmd_embed(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt = cfg.checkpoint_path(out);
    let (params, model) = load_model(&ckpt)?;
    if model != cfg.model {
        return Err(Error::contract(format!(
            "checkpoint {} was trained with a different model configuration",
            ckpt.display()
        )));
    }
    let grids_path = out.join("grids.wbmg");
    require(&grids_path)?;
    let weeks = read_grids(&grids_path)?;
    let records = extract_embeddings(&params, &model, &weeks)?;
    write_embeddings(&cfg.embeddings_path(out), model.dim, &records)
}

#[derive(Serialize)]
struct ProbeCsvRow<'a> {
    task: &'a str,
    features: &'a str,
    level: &'a str,
    metric: &'a str,
    point: f64,
    ci_lo: f64,
    ci_hi: f64,
    n: usize,
    penalty: f64,
}

fn load_table(path: &Path) -> Result<Vec<(WeekKey, Vec<f64>)>> {
    require(path)?;
    let (_, records) = read_embeddings(path)?;
    Ok(keyed(&records))
}

pub fn cmd_probe(cfg: &RunConfig, out: &Path) -> Result<()> {
    let labels_path = cfg.labels_path(out);
    require(&labels_path)?;
    let labels = read_labels(&labels_path)?;
    let data = prepared(cfg, out)?;
    let emb = load_table(&cfg.embeddings_path(out))?;
    let base = baseline_table(&data.raw);

    let mut sets = vec![
        ("embedding".to_string(), emb.clone()),
        ("baseline".to_string(), base.clone()),
        (
            "embedding+baseline".to_string(),
            concat_embeddings(&emb, &base)?,
        ),
    ];
    if let Some(extra) = &cfg.data.extra_embeddings {
        let ext = load_table(extra)?;
        sets.push((
            "extra+embedding".to_string(),
            concat_embeddings(&ext, &emb)?,
        ));
        sets.push(("extra".to_string(), ext));
    }
    let mut rows: Vec<ProbeRow> = Vec::new();
    for (name, table) in &sets {
        rows.extend(probe_tasks(
            name,
            table,
            &labels,
            &data.splits,
            &cfg.probe,
            cfg.data.seed,
        )?);
    }
    let csv_rows: Vec<ProbeCsvRow> = rows
        .iter()
        .map(|r| ProbeCsvRow {
            task: r.task.as_str(),
            features: &r.features,
            level: r.level.as_str(),
            metric: &r.report.metric,
            point: r.report.point,
            ci_lo: r.report.ci_lo,
            ci_hi: r.report.ci_hi,
            n: r.report.n,
            penalty: r.report.penalty,
        })
        .collect();
    write_csv(
        &out.join("probe.csv"),
        &[
            "task", "features", "level", "metric", "point", "ci_lo", "ci_hi", "n", "penalty",
        ],
        &csv_rows,
    )?;

    let lookup: std::collections::BTreeMap<WeekKey, &Vec<f64>> =
        emb.iter().map(|(k, v)| (*k, v)).collect();
    let mut aligned = Vec::new();
    let mut grids = Vec::new();
    for g in &data.raw {
        if let Some(e) = lookup.get(&g.key()) {
            aligned.push((*e).clone());
            grids.push(g.clone());
        }
    }
    let train: BTreeSet<u64> = data.splits.train.iter().copied().collect();
    let recon = reconstruction_probe(&aligned, &grids, &train, &cfg.probe, cfg.data.seed)?;
    let reg = Registry::standard();
    let recon_rows: Vec<(u32, &str, Option<f64>)> = reg
        .specs()
        .iter()
        .map(|s| (s.variable_id, s.name, recon.r2[s.variable_id as usize]))
        .collect();
    write_csv(
        &out.join("reconstruction.csv"),
        &["variable_id", "variable", "r2"],
        &recon_rows,
    )
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let labels_path = cfg.labels_path(out);
    require(&labels_path)?;
    let labels = read_labels(&labels_path)?;
    let data = prepared(cfg, out)?;
    let rows = run_ablation_grid(
        &data,
        &labels,
        &cfg.ablation,
        &cfg.pretrain_config(),
        cfg.data.seed,
    )?;
    write_csv(
        &out.join("ablation.csv"),
        &[
            "rank",
            "tokenizer",
            "backbone",
            "batch_size",
            "layers",
            "weight_decay",
            "koleo_weight",
            "val_age_mae",
            "final_loss",
            "status",
        ],
        &rows,
    )
}
