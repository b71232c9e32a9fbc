use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use collab_core::checkpoint::{load_checkpoint, save_checkpoint};
use collab_core::metrics::{attach_bis, bis_table, emit_report, read_table_csv, BisCell, MetricsRecord, ReportFormat};
use collab_core::model::Model;
use collab_core::rng::{substream, SELECTION};
use collab_core::scenario::{build_split, load_split, save_split, Split};
use collab_core::train::{evaluate, forward_infer, init_model, train, History};
use collab_core::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliResult;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const LEDGER_FILE: &str = "ledger.csv";

pub fn report_file(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "report.csv",
        ReportFormat::Json => "report.json",
    }
}

/// Loads `dataset` when given, otherwise generates the split the config
/// describes.
pub fn dataset_for(cfg: &RunConfig, dataset: Option<&Path>) -> CliResult<Split> {
    let split = match dataset {
        Some(p) => load_split(p)?,
        None => build_split(&cfg.scenario, cfg.setting, &cfg.split.seeds, &cfg.split.sizes)?,
    };
    Ok(split)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn record_for(model: &Model, split: &Split, seed: u64) -> CliResult<MetricsRecord> {
    let ev = evaluate(model, &split.test, seed)?;
    Ok(MetricsRecord {
        method: model.config.method.slug().to_string(),
        overall_acc: ev.accuracy,
        kbpf: ev.kbpf,
        bis: None,
        selection_acc: ev.selection_accuracy,
        episodes: ev.episodes,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub report: PathBuf,
    pub ledger: PathBuf,
    pub config: PathBuf,
    pub record: MetricsRecord,
    pub log: History,
}

/// Trains the configured method and writes checkpoint, history, a test
/// report, the ledger of the first test episode and the frozen config.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>) -> CliResult<TrainOutputs> {
    let split = dataset_for(cfg, dataset)?;
    check_split(cfg, &split)?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let config = cfg.freeze(dir)?;

    let mut model = init_model(cfg.model, cfg.seed)?;
    let log = train(&mut model, &cfg.train, &cfg.scenario, &split)?;
    let record = record_for(&model, &split, cfg.seed)?;

    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &checkpoint)?;
    let history = dir.join(HISTORY_FILE);
    log.save_csv(&history)?;
    let report = dir.join(report_file(cfg.metrics.format));
    emit_report(std::slice::from_ref(&record), &report, cfg.metrics.format)?;
    let ledger = dir.join(LEDGER_FILE);
    let inf = forward_infer(&split.test[0], &model, &mut substream(cfg.seed, SELECTION))?;
    inf.ledger.save_csv(&ledger)?;
    Ok(TrainOutputs {
        checkpoint,
        history,
        report,
        ledger,
        config,
        record,
        log,
    })
}

fn check_split(cfg: &RunConfig, split: &Split) -> CliResult<()> {
    if split.setting != cfg.setting {
        return Err(Error::Config(format!(
            "dataset holds `{}` episodes but the config asks for `{}`",
            split.setting, cfg.setting
        ))
        .into());
    }
    Ok(())
}

/// Checks that `model` can consume the episodes of `split`.
pub fn check_compatible(model: &Model, split: &Split) -> CliResult<()> {
    let Some(ep) = split.test.first() else {
        return Err(Error::Format("dataset has no test episodes".into()).into());
    };
    let c = &model.config;
    let classes = ep.labels.iter().max().map_or(0, |&m| m + 1);
    let mismatch = |field: &str, expected: usize, found: usize| Error::Shape {
        field: format!("model.{field}"),
        expected: expected.to_string(),
        found: found.to_string(),
    };
    if c.agents != ep.agents() {
        return Err(mismatch("agents", ep.agents(), c.agents).into());
    }
    if c.obs_size != ep.target.size() {
        return Err(mismatch("obs_size", ep.target.size(), c.obs_size).into());
    }
    if c.obs_channels != ep.target.channels() {
        return Err(mismatch("obs_channels", ep.target.channels(), c.obs_channels).into());
    }
    if c.classes < classes {
        return Err(mismatch("classes", classes, c.classes).into());
    }
    Ok(())
}

/// Evaluates each checkpoint on the test episodes. BIS is attached when
/// both single-agent bounds are among the checkpoints.
pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf], dataset: Option<&Path>, out: &Path) -> CliResult<Vec<MetricsRecord>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints to evaluate".into()).into());
    }
    let split = dataset_for(cfg, dataset)?;
    let mut records = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let model = load_checkpoint(path)?;
        check_compatible(&model, &split)?;
        records.push(record_for(&model, &split, cfg.seed)?);
    }
    let has = |k: collab_core::model::BaselineKind| records.iter().any(|r| r.method == k.slug());
    if has(collab_core::model::BaselineKind::SingleNormal) && has(collab_core::model::BaselineKind::SingleDegraded) {
        attach_bis(&mut records)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    emit_report(&records, out, cfg.metrics.format)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: usize,
    pub k: usize,
    pub selection_acc: Option<f64>,
    pub overall_acc: Option<f64>,
    pub error: String,
}

/// Trains and evaluates one model per `(m, k)` grid point, in ascending
/// order. A grid point the attention variant cannot realise, or whose
/// training diverges, gets an error row instead of metrics.
pub fn cmd_sweep(cfg: &RunConfig, dataset: Option<&Path>, out: &Path) -> CliResult<Vec<SweepRow>> {
    if !cfg.model.method.uses_matching() {
        return Err(Error::Config(format!("method `{}` has no message/key to sweep", cfg.model.method)).into());
    }
    let split = dataset_for(cfg, dataset)?;
    check_split(cfg, &split)?;
    let ms: BTreeSet<usize> = cfg.sweep.message_sizes.iter().copied().collect();
    let ks: BTreeSet<usize> = cfg.sweep.key_sizes.iter().copied().collect();
    let mut train_cfg = cfg.train.clone();
    if cfg.sweep.iterations > 0 {
        train_cfg.iterations = cfg.sweep.iterations;
        if !train_cfg.iterations.is_multiple_of(train_cfg.eval_every) {
            train_cfg.eval_every = train_cfg.iterations;
        }
    }
    let mut rows = Vec::new();
    for &m in &ms {
        for &k in &ks {
            let outcome = cfg.sweep_point(m, k).and_then(|mc| {
                let mut model = init_model(mc, cfg.seed)?;
                train(&mut model, &train_cfg, &cfg.scenario, &split)?;
                evaluate(&model, &split.test, cfg.seed)
            });
            rows.push(match outcome {
                Ok(ev) => SweepRow {
                    m,
                    k,
                    selection_acc: ev.selection_accuracy,
                    overall_acc: Some(ev.accuracy),
                    error: String::new(),
                },
                Err(e @ (Error::Config(_) | Error::Divergence { .. })) => SweepRow {
                    m,
                    k,
                    selection_acc: None,
                    overall_acc: None,
                    error: e.to_string(),
                },
                Err(e) => return Err(e.into()),
            });
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(out).map_err(Error::from)?;
    for r in &rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(rows)
}

/// Reads `method,setting,accuracy,kbpf` rows and computes BIS for every
/// row that is not a bound. Cells whose BIS is undefined keep their error.
pub fn cmd_bis_table(input: &Path) -> CliResult<Vec<BisCell>> {
    let rows = read_table_csv(input)?;
    Ok(bis_table(&rows)?)
}

pub fn write_bis_table<W: Write>(cells: &[BisCell], out: W) -> CliResult<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        method: &'a str,
        setting: &'a str,
        accuracy: f64,
        kbpf: f64,
        #[serde(rename = "BIS")]
        bis: Option<f64>,
        error: String,
    }
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(Row {
            method: &c.method,
            setting: &c.setting,
            accuracy: c.accuracy,
            kbpf: c.kbpf,
            bis: c.bis.as_ref().ok().copied(),
            error: c.bis.as_ref().err().map(|e| e.to_string()).unwrap_or_default(),
        })
        .map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

/// Writes the configured split to a dataset container.
pub fn cmd_export(cfg: &RunConfig, out: &Path) -> CliResult<Split> {
    let split = dataset_for(cfg, None)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_split(&split, out)?;
    Ok(split)
}

/// Reads and validates a dataset container, optionally re-encoding it.
pub fn cmd_import(input: &Path, out: Option<&Path>) -> CliResult<Split> {
    let split = load_split(input)?;
    if let Some(out) = out {
        save_split(&split, out)?;
    }
    Ok(split)
}
