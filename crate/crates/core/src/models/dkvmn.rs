//! Dynamic key-value memory network.
//!
//! A static key matrix addresses memory slots; a per-sequence value matrix
//! holds the student's state. Each step reads with the current question's
//! attention, predicts, then erases and adds with the interaction embedding.

use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::{check_batch, to_json, KtModel, ModelKind, Predictions};
use crate::data::{StudentSequence, Task};
use crate::encoding::{encode_dkvmn, EncodedStep, MAX_BINS};
use crate::error::{KtError, Result};
use crate::numerics::{Bound, Init, ParamId, ParamSet, Scalar, Tape, Var};

fn default_slots() -> usize {
    10
}

fn default_dim() -> usize {
    32
}

fn default_bins() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DkvmnConfig {
    pub n_skills: usize,
    pub task: Task,
    #[serde(default = "default_slots")]
    pub memory_slots: usize,
    #[serde(default = "default_dim")]
    pub key_dim: usize,
    #[serde(default = "default_dim")]
    pub value_dim: usize,
    /// Width of the summary layer `f_t`.
    #[serde(default = "default_dim")]
    pub summary_dim: usize,
    /// Score levels of the interaction table; 2 for objective data.
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl DkvmnConfig {
    pub fn new(n_skills: usize, task: Task) -> Self {
        DkvmnConfig {
            n_skills,
            task,
            memory_slots: default_slots(),
            key_dim: default_dim(),
            value_dim: default_dim(),
            summary_dim: default_dim(),
            bins: default_bins(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_skills,
            self.memory_slots,
            self.key_dim,
            self.value_dim,
            self.summary_dim,
        ];
        if dims.contains(&0) {
            return Err(KtError::Config(format!(
                "dkvmn dimensions must be positive: {self:?}"
            )));
        }
        if !(2..=MAX_BINS).contains(&self.bins) || (self.task == Task::Objective && self.bins != 2)
        {
            return Err(KtError::Config(format!(
                "dkvmn bins {} invalid for {} task",
                self.bins, self.task
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dkvmn<T: Scalar> {
    config: DkvmnConfig,
    params: ParamSet<T>,
    key_memory: ParamId,
    value_init: ParamId,
    question_embed: ParamId,
    interaction_embed: ParamId,
    summary: Linear,
    head: Linear,
    erase: Linear,
    add: Linear,
}

impl<T: Scalar> Dkvmn<T> {
    pub fn new(config: DkvmnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let mut init = Init::new(seed);
        let c = &config;
        let (s, dk, dv) = (c.memory_slots, c.key_dim, c.value_dim);
        let key_memory = p.add("memory.key", init.uniform(&[s, dk], dk));
        let value_init = p.add("memory.value0", init.uniform(&[s, dv], dv));
        let question_embed = p.add("embed.question", init.uniform(&[c.n_skills, dk], dk));
        let interaction_embed = p.add(
            "embed.interaction",
            init.uniform(&[c.bins * c.n_skills, dv], dv),
        );
        let summary = Linear::new(&mut p, &mut init, "summary", dv + dk, c.summary_dim);
        let head_name = match c.task {
            Task::Objective => "head",
            Task::Subjective => "score_head",
        };
        let head = Linear::new(&mut p, &mut init, head_name, c.summary_dim, 1);
        let erase = Linear::new(&mut p, &mut init, "erase", dv, dv);
        let add = Linear::new(&mut p, &mut init, "add", dv, dv);
        Ok(Dkvmn {
            config,
            params: p,
            key_memory,
            value_init,
            question_embed,
            interaction_embed,
            summary,
            head,
            erase,
            add,
        })
    }

    pub fn config(&self) -> &DkvmnConfig {
        &self.config
    }

    /// `softmax(m_t . M^k(i))` over slots, as a `1 x slots` row.
    pub fn attention_weights<'t>(&self, b: &Bound<'t, T>, query: Var<'t, T>) -> Result<Var<'t, T>> {
        query.matmul_t(b[self.key_memory])?.softmax_rows()
    }

    /// `sum_i w(i) M^v(i)`.
    pub fn read<'t>(&self, memory: Var<'t, T>, weights: Var<'t, T>) -> Result<Var<'t, T>> {
        weights.matmul(memory)
    }

    /// `sigmoid(W_2 tanh(W_1 [r, m] + b_1) + b_2)`.
    pub fn predict_step<'t>(
        &self,
        b: &Bound<'t, T>,
        read: Var<'t, T>,
        query: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let f = self
            .summary
            .apply(b, Var::concat_cols(&[read, query])?)?
            .tanh()?;
        self.head.apply(b, f)?.sigmoid()
    }

    /// Erase vector `sigmoid(E s + b_e)` and add vector `tanh(D s + b_d)`.
    pub fn erase_add_vectors<'t>(
        &self,
        b: &Bound<'t, T>,
        interaction: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let e = self.erase.apply(b, interaction)?.sigmoid()?;
        let a = self.add.apply(b, interaction)?.tanh()?;
        Ok((e, a))
    }

    /// `M(i) * (1 - w(i) e) + w(i) a` for every slot `i`.
    pub fn write<'t>(
        memory: Var<'t, T>,
        weights: Var<'t, T>,
        erase: Var<'t, T>,
        add: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w_col = weights.transpose()?;
        let keep = w_col.matmul(erase)?.one_minus()?;
        memory.mul(keep)?.add(w_col.matmul(add)?)
    }

    fn encode(&self, skill: usize, outcome: f64) -> Result<(usize, usize)> {
        let c = &self.config;
        match encode_dkvmn(skill, outcome, c.n_skills, c.task, c.bins)? {
            EncodedStep::Index {
                question,
                interaction,
            } => Ok((question, interaction)),
            other => Err(KtError::Contract(format!("dkvmn cannot consume {other:?}"))),
        }
    }

    /// Predictions for steps `1..len` of one unpadded sequence.
    pub fn sequence_predictions<'t>(
        &self,
        tape: &'t Tape<T>,
        b: &Bound<'t, T>,
        seq: &StudentSequence,
    ) -> Result<Option<Var<'t, T>>> {
        let _ = tape;
        let steps = seq.valid_steps();
        let mut memory = b[self.value_init];
        let mut preds = Vec::with_capacity(steps.len());
        for (t, step) in steps.iter().enumerate() {
            let (question, interaction) = self.encode(step.skill, step.outcome)?;
            let query = b[self.question_embed].gather_rows(&[question])?;
            let w = self.attention_weights(b, query)?;
            if t > 0 {
                let r = self.read(memory, w)?;
                preds.push(self.predict_step(b, r, query)?);
            }
            if t + 1 < steps.len() {
                let s = b[self.interaction_embed].gather_rows(&[interaction])?;
                let (e, a) = self.erase_add_vectors(b, s)?;
                memory = Self::write(memory, w, e, a)?;
            }
        }
        if preds.is_empty() {
            return Ok(None);
        }
        Var::concat_cols(&preds).map(Some)
    }
}

impl<T: Scalar> KtModel<T> for Dkvmn<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Dkvmn
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
        check_batch(batch, self.config.n_skills)?;
        let mut parts = Vec::new();
        let mut targets = Vec::new();
        let mut skills = Vec::new();
        for seq in batch {
            if let Some(p) = self.sequence_predictions(tape, bound, seq)? {
                parts.push(p);
                for step in &seq.valid_steps()[1..] {
                    targets.push(T::of(step.outcome));
                    skills.push(step.skill);
                }
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

    fn config_json(&self) -> String {
        to_json(&self.config)
    }
}
