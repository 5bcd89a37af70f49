//! Knowledge tracing models and their shared prediction interface.

mod dkt;
mod dkvmn;
mod gkt;
mod graph;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{StudentSequence, Task};
use crate::error::{KtError, Result};
use crate::numerics::{Bound, ParamSet, Scalar, Tape, Var};

pub use dkt::{Cell, Dkt, DktConfig};
pub use dkvmn::{Dkvmn, DkvmnConfig};
pub use gkt::{Gkt, GktConfig};
pub use graph::{build_dense_graph, DenseGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dkt,
    Dkvmn,
    Gkt,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dkt => "dkt",
            ModelKind::Dkvmn => "dkvmn",
            ModelKind::Gkt => "gkt",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = KtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dkt" => Ok(ModelKind::Dkt),
            "dkvmn" => Ok(ModelKind::Dkvmn),
            "gkt" => Ok(ModelKind::Gkt),
            other => Err(KtError::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Predictions for every valid next-step target of a batch, flattened into a
/// `1 x K` row, with the matching targets and target skills.
#[derive(Clone, Debug)]
pub struct Predictions<'t, T> {
    pub values: Var<'t, T>,
    pub targets: Vec<T>,
    pub skills: Vec<usize>,
}

impl<'t, T: Scalar> Predictions<'t, T> {
    /// Binary cross-entropy for objective data, squared error for scores.
    pub fn loss(&self, task: Task) -> Result<Var<'t, T>> {
        match task {
            Task::Objective => self.values.bce_mean(&self.targets),
            Task::Subjective => self.values.mse_mean(&self.targets),
        }
    }
}

/// Reads the prediction for step `t + 1` of sequence `b` out of
/// `outputs[t]`, row `b`, column `skill[b][t + 1]`.
///
/// Only that coordinate enters the result; every other output is ignored.
pub fn select_next<'t, T: Scalar>(
    outputs: &[Var<'t, T>],
    batch: &[StudentSequence],
) -> Result<Predictions<'t, T>> {
    let mut parts = Vec::with_capacity(outputs.len());
    let mut targets = Vec::new();
    let mut skills = Vec::new();
    for (t, out) in outputs.iter().enumerate() {
        let mut coords = Vec::new();
        for (b, seq) in batch.iter().enumerate() {
            if seq.mask.get(t + 1).copied().unwrap_or(false) && seq.mask[t] {
                let step = seq.steps[t + 1];
                coords.push((b, step.skill));
                targets.push(T::of(step.outcome));
                skills.push(step.skill);
            }
        }
        if !coords.is_empty() {
            parts.push(out.pick(&coords)?);
        }
    }
    if parts.is_empty() {
        return Err(KtError::Contract(
            "batch has no valid next-step targets".into(),
        ));
    }
    Ok(Predictions {
        values: Var::concat_cols(&parts)?,
        targets,
        skills,
    })
}

/// Common interface of the three models.
pub trait KtModel<T: Scalar>: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn task(&self) -> Task;
    fn n_skills(&self) -> usize;
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Next-step predictions for every valid target in `batch`.
    fn predict<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        batch: &[StudentSequence],
    ) -> Result<Predictions<'t, T>>;

    /// JSON of the hyperparameters needed to rebuild the model.
    fn config_json(&self) -> String;

    fn loss<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        batch: &[StudentSequence],
    ) -> Result<Var<'t, T>> {
        self.predict(tape, bound, batch)?.loss(self.task())
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.kind().as_str(), stored_config(&self.config_json()));
        ck.push_params(self.params());
        ck
    }
}

/// Layout of a checkpoint's config string: the model hyperparameters plus
/// optional settings of the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredConfig {
    pub model: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

impl StoredConfig {
    pub fn parse(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_str(&ck.config)
            .map_err(|e| KtError::Checkpoint(format!("config block: {e}")))
    }
}

pub(crate) fn stored_config(model_json: &str) -> String {
    let model = serde_json::from_str(model_json).expect("model config is JSON");
    serde_json::to_string(&StoredConfig { model, run: None }).expect("config serializes")
}

/// Any of the three models behind one type.
#[derive(Clone, Debug)]
pub enum AnyModel<T: Scalar> {
    Dkt(Dkt<T>),
    Dkvmn(Dkvmn<T>),
    Gkt(Gkt<T>),
}

impl<T: Scalar> AnyModel<T> {
    fn inner(&self) -> &dyn KtModel<T> {
        match self {
            AnyModel::Dkt(m) => m,
            AnyModel::Dkvmn(m) => m,
            AnyModel::Gkt(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn KtModel<T> {
        match self {
            AnyModel::Dkt(m) => m,
            AnyModel::Dkvmn(m) => m,
            AnyModel::Gkt(m) => m,
        }
    }

    /// Rebuilds a model from a checkpoint, checking every tensor shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ck.model_kind.parse()?;
        let stored = StoredConfig::parse(ck)?;
        let bad = |e: serde_json::Error| KtError::Checkpoint(format!("model config: {e}"));
        let cfg = stored.model;
        let mut model = match kind {
            ModelKind::Dkt => {
                AnyModel::Dkt(Dkt::new(serde_json::from_value(cfg).map_err(bad)?, 0)?)
            }
            ModelKind::Dkvmn => {
                AnyModel::Dkvmn(Dkvmn::new(serde_json::from_value(cfg).map_err(bad)?, 0)?)
            }
            ModelKind::Gkt => {
                let graph = DenseGraph::from_checkpoint(ck)?;
                AnyModel::Gkt(Gkt::new(
                    serde_json::from_value(cfg).map_err(bad)?,
                    graph,
                    0,
                )?)
            }
        };
        ck.load_params(model.params_mut())?;
        Ok(model)
    }
}

impl<T: Scalar> KtModel<T> for AnyModel<T> {
    fn kind(&self) -> ModelKind {
        self.inner().kind()
    }

    fn task(&self) -> Task {
        self.inner().task()
    }

    fn n_skills(&self) -> usize {
        self.inner().n_skills()
    }

    fn params(&self) -> &ParamSet<T> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.inner_mut().params_mut()
    }

    fn predict<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        batch: &[StudentSequence],
    ) -> Result<Predictions<'t, T>> {
        self.inner().predict(tape, bound, batch)
    }

    fn config_json(&self) -> String {
        self.inner().config_json()
    }

    fn to_checkpoint(&self) -> Checkpoint {
        self.inner().to_checkpoint()
    }
}

pub(crate) fn check_batch(batch: &[StudentSequence], n_skills: usize) -> Result<usize> {
    if batch.is_empty() {
        return Err(KtError::Contract("empty batch".into()));
    }
    let len = batch[0].steps.len();
    for s in batch {
        if s.steps.len() != len || s.mask.len() != len {
            return Err(KtError::Contract(
                "batch sequences must be padded to one length".into(),
            ));
        }
        if let Some(bad) = s.steps.iter().find(|st| st.skill >= n_skills) {
            return Err(KtError::Range(format!(
                "skill {} outside 0..{n_skills}",
                bad.skill
            )));
        }
    }
    Ok(len)
}

pub(crate) fn to_json<C: Serialize>(config: &C) -> String {
    serde_json::to_string(config).expect("model configs serialize")
}
