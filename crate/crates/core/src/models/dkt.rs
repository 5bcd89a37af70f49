//! Deep knowledge tracing: a recurrent state over encoded interactions with a
//! per-skill sigmoid head.

use serde::{Deserialize, Serialize};

use super::layers::{Linear, LstmCell, RnnCell};
use super::{check_batch, select_next, to_json, KtModel, ModelKind, Predictions};
use crate::data::{StudentSequence, Task};
use crate::encoding::{encode_dkt, EncodedStep};
use crate::error::{KtError, Result};
use crate::numerics::{Bound, Init, ParamSet, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    #[default]
    Lstm,
    RnnTanh,
}

fn default_hidden() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DktConfig {
    pub n_skills: usize,
    pub task: Task,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub cell: Cell,
}

impl DktConfig {
    pub fn new(n_skills: usize, task: Task) -> Self {
        DktConfig {
            n_skills,
            task,
            hidden: default_hidden(),
            cell: Cell::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_skills == 0 || self.hidden == 0 {
            return Err(KtError::Config(format!(
                "dkt needs n_skills and hidden > 0, got {} and {}",
                self.n_skills, self.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Recurrence {
    Lstm(LstmCell),
    Rnn(RnnCell),
}

#[derive(Clone, Debug)]
pub struct Dkt<T: Scalar> {
    config: DktConfig,
    params: ParamSet<T>,
    cell: Recurrence,
    head: Linear,
}

impl<T: Scalar> Dkt<T> {
    pub fn new(config: DktConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init = Init::new(seed);
        let (n, h) = (config.n_skills, config.hidden);
        let cell = match config.cell {
            Cell::Lstm => Recurrence::Lstm(LstmCell::new(&mut params, &mut init, "lstm", 2 * n, h)),
            Cell::RnnTanh => Recurrence::Rnn(RnnCell::new(&mut params, &mut init, "rnn", 2 * n, h)),
        };
        // Scores get their own sigmoid branch in place of the correctness head.
        let head_name = match config.task {
            Task::Objective => "head",
            Task::Subjective => "score_head",
        };
        let head = Linear::new(&mut params, &mut init, head_name, h, n);
        Ok(Dkt {
            config,
            params,
            cell,
            head,
        })
    }

    pub fn config(&self) -> &DktConfig {
        &self.config
    }

    /// Encoded inputs of step `t` for every sequence, as a `B x 2N` matrix.
    pub fn encode_step(&self, batch: &[StudentSequence], t: usize) -> Result<Tensor<T>> {
        let n = self.config.n_skills;
        let mut data = Vec::with_capacity(batch.len() * 2 * n);
        for seq in batch {
            let step = seq.steps[t];
            let outcome = if seq.mask[t] { step.outcome } else { 0.0 };
            match encode_dkt(step.skill, outcome, n, self.config.task)? {
                EncodedStep::DktDense(x) => data.extend(x.into_iter().map(T::of)),
                other => return Err(KtError::Contract(format!("dkt cannot consume {other:?}"))),
            }
        }
        Tensor::new(vec![batch.len(), 2 * n], data)
    }

    /// Per-skill outputs `y_t` (`B x N`) after each of the first `L - 1` steps.
    pub fn step_outputs<'t>(
        &self,
        tape: &'t Tape<T>,
        b: &Bound<'t, T>,
        batch: &[StudentSequence],
    ) -> Result<Vec<Var<'t, T>>> {
        let len = check_batch(batch, self.config.n_skills)?;
        let rows = batch.len();
        let mut h = tape.zeros(rows, self.config.hidden);
        let mut c = h;
        let mut out = Vec::with_capacity(len.saturating_sub(1));
        for t in 0..len.saturating_sub(1) {
            let x = tape.constant(&self.encode_step(batch, t)?);
            match self.cell {
                Recurrence::Lstm(cell) => (h, c) = cell.step(b, x, h, c)?,
                Recurrence::Rnn(cell) => h = cell.step(b, x, h)?,
            }
            out.push(self.head.apply(b, h)?.sigmoid()?);
        }
        Ok(out)
    }
}

impl<T: Scalar> KtModel<T> for Dkt<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Dkt
    }

    fn task(&self) -> Task {
        self.config.task
    }

    fn n_skills(&self) -> usize {
        self.config.n_skills
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn predict<'t>(
        &self,
        tape: &'t Tape<T>,
        bound: &Bound<'t, T>,
        batch: &[StudentSequence],
    ) -> Result<Predictions<'t, T>> {
        let outputs = self.step_outputs(tape, bound, batch)?;
        select_next(&outputs, batch)
    }

    fn config_json(&self) -> String {
        to_json(&self.config)
    }
}
