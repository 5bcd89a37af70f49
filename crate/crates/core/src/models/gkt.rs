//! Graph-based knowledge tracing over a fixed transition graph.
//!
//! Every skill keeps its own hidden state. An answered skill sends a message
//! to itself through `f_self` and to every neighbour through the outgoing and
//! incoming MLPs, weighted by the graph. Messages pass an erase-add gate and
//! update each state with a shared GRU.

use serde::{Deserialize, Serialize};

use super::graph::DenseGraph;
use super::layers::{GruCell, Linear, Mlp};
use super::{check_batch, select_next, stored_config, to_json, KtModel, ModelKind, Predictions};
use crate::checkpoint::Checkpoint;
use crate::data::{StudentSequence, Task};
use crate::encoding::{encode_gkt, gkt_row_weights, EncodedStep};
use crate::error::{KtError, Result};
use crate::numerics::{Bound, Init, ParamId, ParamSet, Scalar, Tape, Var};

fn default_dim() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GktConfig {
    pub n_skills: usize,
    pub task: Task,
    #[serde(default = "default_dim")]
    pub hidden: usize,
    #[serde(default = "default_dim")]
    pub embed_dim: usize,
    /// Whether the graph counted repeated skills in its row denominators.
    #[serde(default)]
    pub self_in_denominator: bool,
}

impl GktConfig {
    pub fn new(n_skills: usize, task: Task) -> Self {
        GktConfig {
            n_skills,
            task,
            hidden: default_dim(),
            embed_dim: default_dim(),
            self_in_denominator: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_skills == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(KtError::Config(format!(
                "gkt dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Gkt<T: Scalar> {
    config: GktConfig,
    graph: DenseGraph,
    params: ParamSet<T>,
    answer_embed: ParamId,
    skill_embed: ParamId,
    f_self: Mlp,
    f_outgo: Mlp,
    f_income: Mlp,
    erase: Linear,
    add: Linear,
    gru: GruCell,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Scalar> Gkt<T> {
    pub fn new(config: GktConfig, graph: DenseGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n, h, e) = (config.n_skills, config.hidden, config.embed_dim);
        if graph.n != n {
            return Err(KtError::Config(format!(
                "graph has {} skills, model expects {n}",
                graph.n
            )));
        }
        let mut p = ParamSet::new();
        let mut init = Init::new(seed);
        let answer_embed = p.add("embed.answer", init.uniform(&[2 * n, e], e));
        let skill_embed = p.add("embed.skill", init.uniform(&[n, e], e));
        let d = h + e;
        let f_self = Mlp::new(&mut p, &mut init, "f_self", d, h, h);
        let f_outgo = Mlp::new(&mut p, &mut init, "f_outgo", 2 * d, h, h);
        let f_income = Mlp::new(&mut p, &mut init, "f_income", 2 * d, h, h);
        let erase = Linear::new(&mut p, &mut init, "erase_add.erase", h, h);
        let add = Linear::new(&mut p, &mut init, "erase_add.add", h, h);
        let gru = GruCell::new(&mut p, &mut init, "gru", h, h);
        let head = match config.task {
            Task::Objective => "head",
            Task::Subjective => "score_head",
        };
        let head_w = p.add(format!("{head}.w"), init.uniform(&[h, 1], h));
        // One bias per concept.
        let head_b = p.add(format!("{head}.b"), init.zeros(&[n, 1]));
        Ok(Gkt {
            config,
            graph,
            params: p,
            answer_embed,
            skill_embed,
            f_self,
            f_outgo,
            f_income,
            erase,
            add,
            gru,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &GktConfig {
        &self.config
    }

    pub fn graph(&self) -> &DenseGraph {
        &self.graph
    }

    /// Answer embedding of one interaction, `1 x e`.
    pub fn embed_answer<'t>(
        &self,
        tape: &'t Tape<T>,
        b: &Bound<'t, T>,
        skill: usize,
        outcome: f64,
    ) -> Result<Var<'t, T>> {
        let n = self.config.n_skills;
        match encode_gkt(skill, outcome, n, self.config.task)? {
            EncodedStep::GktPair { skill, outcome } => {
                let w = gkt_row_weights(skill, outcome, n)
                    .into_iter()
                    .map(T::of)
                    .collect();
                tape.row(w)?.matmul(b[self.answer_embed])
            }
            other => Err(KtError::Contract(format!("gkt cannot consume {other:?}"))),
        }
    }

    /// `[h_k, x E_x]` for the answered skill, `[h_k, E_c(k)]` elsewhere.
    pub fn aggregate<'t>(
        &self,
        b: &Bound<'t, T>,
        h: Var<'t, T>,
        skill: usize,
        answer: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let emb = b[self.skill_embed].with_row(skill, answer)?;
        Var::concat_cols(&[h, emb])
    }

    /// Self message on row `skill`; graph-weighted neighbour messages elsewhere.
    pub fn message<'t>(
        &self,
        b: &Bound<'t, T>,
        agg: Var<'t, T>,
        skill: usize,
    ) -> Result<Var<'t, T>> {
        let n = self.config.n_skills;
        let own = agg.gather_rows(&[skill])?;
        let pair = Var::concat_cols(&[own.broadcast_rows(n)?, agg])?;
        let out_w: Vec<T> = self.graph.row(skill).iter().map(|&v| T::of(v)).collect();
        let in_w: Vec<T> = self.graph.column(skill).into_iter().map(T::of).collect();
        let outgo = self.f_outgo.apply(b, pair)?.scale_rows(&out_w)?;
        let income = self.f_income.apply(b, pair)?.scale_rows(&in_w)?;
        let own_msg = self.f_self.apply(b, own)?;
        outgo.add(income)?.with_row(skill, own_msg)
    }

    /// `m * (1 - sigmoid(m W_e + b_e)) + tanh(m W_a + b_a)`, row by row.
    pub fn erase_add<'t>(&self, b: &Bound<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
        let keep = self.erase.apply(b, m)?.sigmoid()?.one_minus()?;
        m.mul(keep)?.add(self.add.apply(b, m)?.tanh()?)
    }

    /// Per-concept probabilities `sigmoid(h_k W_out + b_k)` as a `1 x N` row.
    pub fn predict_concepts<'t>(&self, b: &Bound<'t, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        h.matmul(b[self.head_w])?
            .add(b[self.head_b])?
            .sigmoid()?
            .transpose()
    }

    /// One full update of the `N x hidden` state.
    pub fn step<'t>(
        &self,
        tape: &'t Tape<T>,
        b: &Bound<'t, T>,
        h: Var<'t, T>,
        skill: usize,
        outcome: f64,
    ) -> Result<Var<'t, T>> {
        let answer = self.embed_answer(tape, b, skill, outcome)?;
        let agg = self.aggregate(b, h, skill, answer)?;
        let m = self.message(b, agg, skill)?;
        let m = self.erase_add(b, m)?;
        self.gru.step(b, m, h)
    }

    /// Outputs after each of the first `len - 1` valid steps of one sequence.
    pub fn step_outputs<'t>(
        &self,
        tape: &'t Tape<T>,
        b: &Bound<'t, T>,
        seq: &StudentSequence,
    ) -> Result<Vec<Var<'t, T>>> {
        let steps = seq.valid_steps();
        let mut h = tape.zeros(self.config.n_skills, self.config.hidden);
        let mut out = Vec::with_capacity(steps.len().saturating_sub(1));
        for step in steps.iter().take(steps.len().saturating_sub(1)) {
            h = self.step(tape, b, h, step.skill, step.outcome)?;
            out.push(self.predict_concepts(b, h)?);
        }
        Ok(out)
    }
}

impl<T: Scalar> KtModel<T> for Gkt<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Gkt
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
            let outputs = self.step_outputs(tape, bound, seq)?;
            if outputs.is_empty() {
                continue;
            }
            let p = select_next(&outputs, std::slice::from_ref(seq))?;
            parts.push(p.values);
            targets.extend(p.targets);
            skills.extend(p.skills);
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

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.kind().as_str(), stored_config(&self.config_json()));
        ck.push_params(&self.params);
        self.graph.push_to(&mut ck);
        ck
    }
}
