//! File-level pipeline: preprocessed dataset directories, training runs,
//! checkpoint evaluation and comparison tables.
//!
//! A dataset directory holds `records.jsonl`, `meta.json` and
//! `preprocess_report.json`. A run directory holds `metrics.jsonl` and
//! `model.ckpt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{to_sequences, DatasetMeta, InteractionRecord, StudentSequence, Task};
use crate::error::{KtError, Result};
use crate::ingest::{
    ingest, read_max_score_table, read_records_jsonl, split, write_records_jsonl, CleanReport,
    Schema,
};
use crate::models::{AnyModel, KtModel, ModelKind, StoredConfig};
use crate::train::{build_model, evaluate, train, MetricsReport, Split, TrainConfig};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const META_FILE: &str = "meta.json";
pub const PREPROCESS_REPORT_FILE: &str = "preprocess_report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn with_path(path: &Path, e: io::Error) -> KtError {
    KtError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| with_path(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| with_path(path, e))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| with_path(path, e))
}

/// Per-student interaction counts after cleaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub schema: Schema,
    pub raw_rows: usize,
    pub removed: CleanReport,
    pub records: usize,
    pub n_students: usize,
    pub n_skills: usize,
    pub interactions_per_student: SequenceStats,
}

fn sequence_stats(records: &[InteractionRecord], n_students: usize) -> SequenceStats {
    let mut counts = vec![0usize; n_students];
    for r in records {
        counts[r.student] += 1;
    }
    SequenceStats {
        min: counts.iter().copied().min().unwrap_or(0),
        max: counts.iter().copied().max().unwrap_or(0),
        mean: if n_students == 0 {
            0.0
        } else {
            records.len() as f64 / n_students as f64
        },
    }
}

/// Ingests `input` and writes a dataset directory under `out_dir`.
pub fn preprocess(
    input: &Path,
    schema: Schema,
    out_dir: &Path,
    max_score_table: Option<&Path>,
) -> Result<PreprocessReport> {
    let table = max_score_table.map(read_max_score_table).transpose()?;
    let ingested = ingest(BufReader::new(open(input)?), schema, table.as_ref())?;
    fs::create_dir_all(out_dir).map_err(|e| with_path(out_dir, e))?;
    let recs_path = out_dir.join(RECORDS_FILE);
    write_records_jsonl(&ingested.records, create(&recs_path)?)?;
    write_json(&out_dir.join(META_FILE), &ingested.meta)?;
    let report = PreprocessReport {
        schema,
        raw_rows: ingested.raw_rows,
        removed: ingested.report,
        records: ingested.records.len(),
        n_students: ingested.meta.n_students,
        n_skills: ingested.meta.n_skills,
        interactions_per_student: sequence_stats(&ingested.records, ingested.meta.n_students),
    };
    write_json(&out_dir.join(PREPROCESS_REPORT_FILE), &report)?;
    Ok(report)
}

/// Records and metadata of a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<InteractionRecord>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(open(&meta_path)?))
            .map_err(|e| KtError::Corrupt(format!("{}: {e}", meta_path.display())))?;
        let records = read_records_jsonl(BufReader::new(open(&dir.join(RECORDS_FILE))?))?;
        Ok(Dataset {
            name: dataset_name(dir),
            records,
            meta,
        })
    }

    /// Sequences cut to `max_seq_len`, split into (train, test) at student level.
    pub fn split(
        &self,
        config: &TrainConfig,
    ) -> Result<(Vec<StudentSequence>, Vec<StudentSequence>)> {
        let seqs = to_sequences(&self.records, &self.meta, config.max_seq_len)?;
        split(&seqs, config.test_fraction, config.seed)
    }
}

/// Final path component, used as the dataset label in reports.
pub fn dataset_name(dir: &Path) -> String {
    let canonical = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
    canonical
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Settings of a training run kept inside its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub dataset: String,
    pub train: TrainConfig,
}

/// Outcome of [`run_training`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub reports: Vec<MetricsReport>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains on `dataset`, writing `metrics.jsonl` as epochs finish and
/// `model.ckpt` at the end.
pub fn run_training(dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    let (train_seqs, test_seqs) = dataset.split(config)?;
    let mut model = build_model::<f64>(config, &dataset.meta, &train_seqs)?;
    fs::create_dir_all(out_dir).map_err(|e| with_path(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(create(&metrics_path)?);
    let mut write_err: Option<io::Error> = None;
    let result = train(
        &mut model,
        &train_seqs,
        &test_seqs,
        &dataset.meta,
        config,
        &dataset.name,
        |r| {
            if write_err.is_some() {
                return;
            }
            let line = serde_json::to_string(r).expect("report serializes");
            if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
                write_err = Some(e);
            }
        },
    );
    if let Some(e) = write_err {
        return Err(with_path(&metrics_path, e));
    }
    let reports = result?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let ck = with_run_info(
        model.to_checkpoint(),
        &RunInfo {
            dataset: dataset.name.clone(),
            train: config.clone(),
        },
    )?;
    ck.write_to(BufWriter::new(create(&checkpoint_path)?))?;
    Ok(RunOutput {
        reports,
        metrics_path,
        checkpoint_path,
    })
}

fn with_run_info(mut ck: Checkpoint, run: &RunInfo) -> Result<Checkpoint> {
    let mut stored = StoredConfig::parse(&ck)?;
    stored.run = Some(serde_json::to_value(run)?);
    ck.config = serde_json::to_string(&stored)?;
    Ok(ck)
}

/// Model and run settings recovered from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(AnyModel<f64>, RunInfo)> {
    let ck = Checkpoint::read_from(BufReader::new(open(path)?))?;
    let model = AnyModel::from_checkpoint(&ck)?;
    let run = StoredConfig::parse(&ck)?
        .run
        .ok_or_else(|| KtError::Checkpoint("no run settings stored".into()))?;
    let run: RunInfo = serde_json::from_value(run)
        .map_err(|e| KtError::Checkpoint(format!("run settings: {e}")))?;
    Ok((model, run))
}

/// Test-split metrics of a stored model, using the split settings it was trained with.
pub fn evaluate_checkpoint(checkpoint: &Path, data_dir: &Path) -> Result<MetricsReport> {
    let (model, run) = load_checkpoint(checkpoint)?;
    let dataset = Dataset::load(data_dir)?;
    if model.task() != dataset.meta.task {
        return Err(KtError::Config(format!(
            "checkpoint holds a {} {} model but the data is {}",
            model.task(),
            model.kind(),
            dataset.meta.task
        )));
    }
    if model.n_skills() != dataset.meta.n_skills {
        return Err(KtError::Config(format!(
            "checkpoint expects {} skills but the data has {}",
            model.n_skills(),
            dataset.meta.n_skills
        )));
    }
    let (_, test) = dataset.split(&run.train)?;
    evaluate(
        &model,
        &test,
        &dataset.meta,
        &run.dataset,
        run.train.batch_size,
        run.train.epochs,
        Split::Test,
    )
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| KtError::Row {
                line: i as u64 + 1,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

/// One table row per (dataset, model, task): the test report of the latest epoch.
pub fn final_test_rows(reports: &[MetricsReport]) -> Vec<MetricsReport> {
    let mut rows: BTreeMap<(String, &'static str, Task), MetricsReport> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.split == Split::Test) {
        let key = (r.dataset.clone(), r.model.as_str(), r.task);
        match rows.get(&key) {
            Some(prev) if prev.epoch > r.epoch => {}
            _ => {
                rows.insert(key, r.clone());
            }
        }
    }
    rows.into_values().collect()
}

fn model_label(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Dkt => "DKT",
        ModelKind::Dkvmn => "DKVMN",
        ModelKind::Gkt => "GKT",
    }
}

/// Plain-text comparison table of final test metrics, sorted by dataset then model.
///
/// The loss column is BCE for objective rows and MSE for subjective rows.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let rows = final_test_rows(reports);
    let header = [
        "Dataset", "Model", "Task", "Epoch", "Loss", "RMSE", "MAE", "ACC", "AUC",
    ];
    let cells: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                model_label(r.model).to_string(),
                r.task.to_string(),
                r.epoch.to_string(),
                format!("{:.4}", r.loss),
                format!("{:.4}", r.rmse),
                format!("{:.4}", r.mae),
                format!("{:.4}", r.acc),
                r.auc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}")),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        let mut s = String::new();
        for (i, (c, w)) in row.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < 3 {
                write!(s, "{c:<w$}").unwrap();
            } else {
                write!(s, "{c:>w$}").unwrap();
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(
        &mut out,
        &rule.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    for row in &cells {
        line(
            &mut out,
            &row.iter().map(String::as_str).collect::<Vec<_>>(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, write_csv, SynthConfig};

    fn synth_dir(root: &Path, task: Task) -> PathBuf {
        let cfg = SynthConfig {
            n_students: 30,
            n_skills: 4,
            seq_len: 10,
            task,
            ..SynthConfig::default()
        };
        let data = generate(&cfg, 5).unwrap();
        fs::create_dir_all(root).unwrap();
        let csv = root.join("raw.csv");
        write_csv(&data, &cfg, File::create(&csv).unwrap()).unwrap();
        let schema = if task == Task::Objective {
            Schema::Assist09
        } else {
            Schema::Scored
        };
        let out = root.join("synth");
        preprocess(&csv, schema, &out, None).unwrap();
        out
    }

    fn quick(model: ModelKind, task: Task) -> TrainConfig {
        let mut c = TrainConfig::new(model, task);
        c.epochs = 2;
        c.batch_size = 8;
        c.dims.hidden = Some(6);
        c.dims.key_dim = Some(6);
        c.dims.value_dim = Some(6);
        c.dims.memory_slots = Some(3);
        c.dims.embed_dim = Some(4);
        c
    }

    #[test]
    fn preprocess_writes_all_artifacts_deterministically() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = synth_dir(tmp.path(), Task::Subjective);
        let read = |f: &str| fs::read(dir.join(f)).unwrap();
        let first: Vec<Vec<u8>> = [RECORDS_FILE, META_FILE, PREPROCESS_REPORT_FILE]
            .iter()
            .map(|f| read(f))
            .collect();
        preprocess(&tmp.path().join("raw.csv"), Schema::Scored, &dir, None).unwrap();
        for (f, bytes) in [RECORDS_FILE, META_FILE, PREPROCESS_REPORT_FILE]
            .iter()
            .zip(first)
        {
            assert_eq!(read(f), bytes, "{f}");
        }
        let ds = Dataset::load(&dir).unwrap();
        assert_eq!(ds.name, "synth");
        assert!(ds.records.iter().all(|r| (0.0..=1.0).contains(&r.outcome)));
    }

    #[test]
    fn evaluate_matches_final_test_report() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = synth_dir(tmp.path(), Task::Objective);
        let ds = Dataset::load(&dir).unwrap();
        for kind in [ModelKind::Dkt, ModelKind::Dkvmn, ModelKind::Gkt] {
            let run_dir = tmp.path().join(kind.as_str());
            let out = run_training(&ds, &quick(kind, Task::Objective), &run_dir).unwrap();
            let last = out.reports.last().unwrap();
            assert_eq!(last.split, Split::Test);
            let eval = evaluate_checkpoint(&out.checkpoint_path, &dir).unwrap();
            assert_eq!(&eval, last);
            assert_eq!(read_metrics(&out.metrics_path).unwrap(), out.reports);
        }
    }

    #[test]
    fn task_mismatch_on_evaluate_is_explicit() {
        let tmp = tempfile::tempdir().unwrap();
        let obj = synth_dir(&tmp.path().join("o"), Task::Objective);
        let sub = synth_dir(&tmp.path().join("s"), Task::Subjective);
        let ds = Dataset::load(&obj).unwrap();
        let out = run_training(
            &ds,
            &quick(ModelKind::Dkt, Task::Objective),
            &tmp.path().join("r"),
        )
        .unwrap();
        let err = evaluate_checkpoint(&out.checkpoint_path, &sub).unwrap_err();
        assert!(
            matches!(err, KtError::Config(ref m) if m.contains("subjective")),
            "{err}"
        );
    }

    fn row(
        dataset: &str,
        model: ModelKind,
        epoch: usize,
        split: Split,
        auc: Option<f64>,
    ) -> MetricsReport {
        MetricsReport {
            dataset: dataset.into(),
            model,
            task: if auc.is_some() {
                Task::Objective
            } else {
                Task::Subjective
            },
            epoch,
            split,
            loss: 0.5,
            rmse: 0.4,
            mae: 0.3,
            acc: 0.7,
            auc,
            count: 10,
        }
    }

    #[test]
    fn table_keeps_latest_test_row_sorted() {
        let reports = vec![
            row("b", ModelKind::Gkt, 1, Split::Test, Some(0.6)),
            row("b", ModelKind::Gkt, 2, Split::Test, Some(0.7)),
            row("b", ModelKind::Gkt, 2, Split::Train, Some(0.9)),
            row("a", ModelKind::Dkvmn, 1, Split::Test, None),
            row("b", ModelKind::Dkt, 1, Split::Test, Some(0.8)),
        ];
        let table = render_table(&reports);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("a") && lines[2].contains("DKVMN") && lines[2].ends_with('-'));
        assert!(lines[3].contains("DKT ") && lines[3].ends_with("0.8000"));
        assert!(lines[4].contains("GKT") && lines[4].ends_with("0.7000"));
    }
}
