//! Training loop, evaluation and per-epoch reports.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pad_batch, DatasetMeta, StudentSequence, Task};
use crate::encoding::MAX_BINS;
use crate::error::{KtError, Result};
use crate::metrics::{auc, classification_metrics, regression_metrics};
use crate::models::{
    build_dense_graph, AnyModel, Cell, Dkt, DktConfig, Dkvmn, DkvmnConfig, Gkt, GktConfig, KtModel,
    ModelKind,
};
use crate::numerics::{AdamConfig, AdamState, Scalar, Tape};

/// Optional overrides of each model's default sizes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub hidden: Option<usize>,
    pub cell: Option<Cell>,
    pub memory_slots: Option<usize>,
    pub key_dim: Option<usize>,
    pub value_dim: Option<usize>,
    pub summary_dim: Option<usize>,
    pub embed_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub task: Task,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Sequences per optimizer step.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub dims: ModelDims,
    /// Memory-network score bins; derived from the data when absent.
    #[serde(default)]
    pub bins: Option<usize>,
    /// Count repeated skills in the graph's row denominators.
    #[serde(default)]
    pub graph_self_in_denominator: bool,
}

mod defaults {
    pub fn epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn max_seq_len() -> usize {
        50
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
}

impl TrainConfig {
    pub fn new(model: ModelKind, task: Task) -> Self {
        TrainConfig {
            model,
            task,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            max_seq_len: defaults::max_seq_len(),
            seed: 0,
            test_fraction: defaults::test_fraction(),
            optimizer: AdamConfig::default(),
            dims: ModelDims::default(),
            bins: None,
            graph_self_in_denominator: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(KtError::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_seq_len < 2 {
            return fail(format!(
                "max_seq_len must be at least 2, got {}",
                self.max_seq_len
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            ));
        }
        let d = &self.dims;
        for (name, v) in [
            ("hidden", d.hidden),
            ("memory_slots", d.memory_slots),
            ("key_dim", d.key_dim),
            ("value_dim", d.value_dim),
            ("summary_dim", d.summary_dim),
            ("embed_dim", d.embed_dim),
        ] {
            if v == Some(0) {
                return fail(format!("{name} must be positive"));
            }
        }
        if let Some(b) = self.bins {
            if !(2..=MAX_BINS).contains(&b) {
                return fail(format!("bins {b} outside 2..={MAX_BINS}"));
            }
        }
        self.optimizer.validate()
    }

    /// Score bins for the memory network: two for objective data, otherwise
    /// the largest per-skill level count, capped.
    pub fn resolve_bins(&self, meta: &DatasetMeta) -> usize {
        match self.task {
            Task::Objective => 2,
            Task::Subjective => self.bins.unwrap_or_else(|| {
                (0..meta.n_skills)
                    .map(|s| meta.levels_of(s))
                    .max()
                    .unwrap_or(2)
                    .clamp(2, MAX_BINS)
            }),
        }
    }
}

/// Builds a freshly initialized model; the graph model counts its graph on `train`.
pub fn build_model<T: Scalar>(
    config: &TrainConfig,
    meta: &DatasetMeta,
    train: &[StudentSequence],
) -> Result<AnyModel<T>> {
    config.validate()?;
    if config.task != meta.task {
        return Err(KtError::Config(format!(
            "config task {} does not match {} data",
            config.task, meta.task
        )));
    }
    let n = meta.n_skills;
    let d = &config.dims;
    Ok(match config.model {
        ModelKind::Dkt => {
            let base = DktConfig::new(n, config.task);
            let cfg = DktConfig {
                hidden: d.hidden.unwrap_or(base.hidden),
                cell: d.cell.unwrap_or(base.cell),
                ..base
            };
            AnyModel::Dkt(Dkt::new(cfg, config.seed)?)
        }
        ModelKind::Dkvmn => {
            let base = DkvmnConfig::new(n, config.task);
            let cfg = DkvmnConfig {
                memory_slots: d.memory_slots.unwrap_or(base.memory_slots),
                key_dim: d.key_dim.unwrap_or(base.key_dim),
                value_dim: d.value_dim.unwrap_or(base.value_dim),
                summary_dim: d.summary_dim.or(d.hidden).unwrap_or(base.summary_dim),
                bins: config.resolve_bins(meta),
                ..base
            };
            AnyModel::Dkvmn(Dkvmn::new(cfg, config.seed)?)
        }
        ModelKind::Gkt => {
            let base = GktConfig::new(n, config.task);
            let cfg = GktConfig {
                hidden: d.hidden.unwrap_or(base.hidden),
                embed_dim: d.embed_dim.unwrap_or(base.embed_dim),
                self_in_denominator: config.graph_self_in_denominator,
                ..base
            };
            let graph = build_dense_graph(train, n, config.graph_self_in_denominator)?;
            AnyModel::Gkt(Gkt::new(cfg, graph, config.seed)?)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Metrics of one split after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: ModelKind,
    pub task: Task,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub rmse: f64,
    pub mae: f64,
    pub acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub count: usize,
}

/// Flattened predictions over a set of sequences, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub preds: Vec<f64>,
    pub targets: Vec<f64>,
    pub skills: Vec<usize>,
}

/// Forward passes over `sequences` in chunks of `batch_size`, chunks in parallel.
pub fn predict_all<T: Scalar, M: KtModel<T>>(
    model: &M,
    sequences: &[StudentSequence],
    batch_size: usize,
) -> Result<Evaluation> {
    let parts: Vec<Result<Evaluation>> = sequences
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let batch = pad_batch(chunk);
            let tape = Tape::new();
            let bound = model.params().bind(&tape);
            let p = match model.predict(&tape, &bound, &batch) {
                Ok(p) => p,
                Err(KtError::Contract(_)) => return Ok(Evaluation::default()),
                Err(e) => return Err(e),
            };
            Ok(Evaluation {
                preds: p.values.values().into_iter().map(Scalar::as_f64).collect(),
                targets: p.targets.into_iter().map(Scalar::as_f64).collect(),
                skills: p.skills,
            })
        })
        .collect();
    let mut out = Evaluation::default();
    for part in parts {
        let part = part?;
        out.preds.extend(part.preds);
        out.targets.extend(part.targets);
        out.skills.extend(part.skills);
    }
    Ok(out)
}

/// Metrics of `eval` under the loss of `task`.
pub fn report(
    eval: &Evaluation,
    meta: &DatasetMeta,
    dataset: &str,
    model: ModelKind,
    epoch: usize,
    split: Split,
) -> Result<MetricsReport> {
    let binary_labels = eval.targets.iter().all(|&t| t == 0.0 || t == 1.0);
    let auc = if binary_labels {
        match auc(&eval.preds, &eval.targets) {
            Ok(a) => Some(a),
            Err(KtError::UndefinedAuc(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let (loss, rmse, mae, acc) = match meta.task {
        Task::Objective => {
            let m = classification_metrics(&eval.preds, &eval.targets, 0.5)?;
            (m.bce, m.rmse, m.mae, m.acc)
        }
        Task::Subjective => {
            let levels: Vec<usize> = eval.skills.iter().map(|&s| meta.levels_of(s)).collect();
            let m = regression_metrics(&eval.preds, &eval.targets, &levels)?;
            (m.mse, m.rmse, m.mae, m.acc)
        }
    };
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        model,
        task: meta.task,
        epoch,
        split,
        loss,
        rmse,
        mae,
        acc,
        auc,
        count: eval.preds.len(),
    })
}

pub fn evaluate<T: Scalar, M: KtModel<T>>(
    model: &M,
    sequences: &[StudentSequence],
    meta: &DatasetMeta,
    dataset: &str,
    batch_size: usize,
    epoch: usize,
    split: Split,
) -> Result<MetricsReport> {
    let eval = predict_all(model, sequences, batch_size)?;
    report(&eval, meta, dataset, model.kind(), epoch, split)
}

/// Trains `model` in place and returns one train and one test report per epoch.
///
/// `on_report` sees each report as soon as it is computed.
pub fn train<T: Scalar, M: KtModel<T>>(
    model: &mut M,
    train_seqs: &[StudentSequence],
    test_seqs: &[StudentSequence],
    meta: &DatasetMeta,
    config: &TrainConfig,
    dataset: &str,
    mut on_report: impl FnMut(&MetricsReport),
) -> Result<Vec<MetricsReport>> {
    config.validate()?;
    if train_seqs.is_empty() {
        return Err(KtError::Config("no training sequences".into()));
    }
    let mut adam = AdamState::new(config.optimizer, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut reports = Vec::with_capacity(2 * config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let chunk: Vec<StudentSequence> = idx.iter().map(|&i| train_seqs[i].clone()).collect();
            let batch = pad_batch(&chunk);
            let diverged = |e: KtError| KtError::Diverged {
                epoch,
                step,
                source: Box::new(e),
            };
            let grads = {
                let tape = Tape::new();
                let bound = model.params().bind(&tape);
                let loss = match model.loss(&tape, &bound, &batch) {
                    Ok(l) => l,
                    Err(KtError::Contract(_)) => continue,
                    Err(e) => return Err(diverged(e)),
                };
                tape.backward(loss).map_err(diverged)?
            };
            let params = model.params_mut();
            params.zero_grad();
            grads.accumulate_into(params)?;
            adam.step(params).map_err(diverged)?;
        }
        for (split, seqs) in [(Split::Train, train_seqs), (Split::Test, test_seqs)] {
            if seqs.is_empty() {
                continue;
            }
            let r = evaluate(
                &*model,
                seqs,
                meta,
                dataset,
                config.batch_size,
                epoch,
                split,
            )?;
            on_report(&r);
            reports.push(r);
        }
    }
    Ok(reports)
}
