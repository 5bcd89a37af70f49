//! Per-step input encodings for each model and task.

use crate::data::Task;
use crate::error::{KtError, Result};

/// Largest number of score bins used by the memory-network interaction table.
pub const MAX_BINS: usize = 11;

/// One encoded interaction.
#[derive(Clone, Debug, PartialEq)]
pub enum EncodedStep {
    /// Dense vector of length `2N`.
    DktDense(Vec<f64>),
    /// Question index and interaction index into a `B * N` table.
    Index { question: usize, interaction: usize },
    /// Skill and outcome; outcome interpolates between two embedding rows.
    GktPair { skill: usize, outcome: f64 },
}

fn check_skill(skill: usize, n_skills: usize) -> Result<()> {
    if skill >= n_skills {
        return Err(KtError::Range(format!(
            "skill {skill} outside 0..{n_skills}"
        )));
    }
    Ok(())
}

fn check_outcome(outcome: f64, task: Task) -> Result<()> {
    let ok = match task {
        Task::Objective => outcome == 0.0 || outcome == 1.0,
        Task::Subjective => (0.0..=1.0).contains(&outcome),
    };
    if ok {
        Ok(())
    } else {
        Err(KtError::Range(format!(
            "outcome {outcome} invalid for {task} task"
        )))
    }
}

/// One-hot of length `2N` at `skill + correct * N`.
pub fn encode_dkt_objective(skill: usize, correct: f64, n_skills: usize) -> Result<EncodedStep> {
    check_skill(skill, n_skills)?;
    check_outcome(correct, Task::Objective)?;
    let mut x = vec![0.0; 2 * n_skills];
    x[skill + if correct == 1.0 { n_skills } else { 0 }] = 1.0;
    Ok(EncodedStep::DktDense(x))
}

/// Attempt marker at `skill` and the normalized score at `skill + N`.
pub fn encode_dkt_subjective(skill: usize, score: f64, n_skills: usize) -> Result<EncodedStep> {
    check_skill(skill, n_skills)?;
    check_outcome(score, Task::Subjective)?;
    let mut x = vec![0.0; 2 * n_skills];
    x[skill] = 1.0;
    x[skill + n_skills] = score;
    Ok(EncodedStep::DktDense(x))
}

pub fn encode_dkt(skill: usize, outcome: f64, n_skills: usize, task: Task) -> Result<EncodedStep> {
    match task {
        Task::Objective => encode_dkt_objective(skill, outcome, n_skills),
        Task::Subjective => encode_dkt_subjective(skill, outcome, n_skills),
    }
}

/// Score level `round(a * (bins - 1))`.
pub fn quantize(outcome: f64, bins: usize) -> usize {
    (outcome * (bins - 1) as f64).round() as usize
}

/// Question index `skill` and interaction index `skill + level * N`.
///
/// Objective outcomes use two levels; subjective scores are quantized to
/// `bins` levels.
pub fn encode_dkvmn(
    skill: usize,
    outcome: f64,
    n_skills: usize,
    task: Task,
    bins: usize,
) -> Result<EncodedStep> {
    check_skill(skill, n_skills)?;
    check_outcome(outcome, task)?;
    let level = match task {
        Task::Objective => outcome as usize,
        Task::Subjective => {
            if !(2..=MAX_BINS).contains(&bins) {
                return Err(KtError::Range(format!(
                    "bins {bins} outside 2..={MAX_BINS}"
                )));
            }
            quantize(outcome, bins)
        }
    };
    Ok(EncodedStep::Index {
        question: skill,
        interaction: skill + level * n_skills,
    })
}

/// Inverse of the interaction index: `(skill, level)`.
pub fn decode_dkvmn(interaction: usize, n_skills: usize) -> (usize, usize) {
    (interaction % n_skills, interaction / n_skills)
}

pub fn encode_gkt(skill: usize, outcome: f64, n_skills: usize, task: Task) -> Result<EncodedStep> {
    check_skill(skill, n_skills)?;
    check_outcome(outcome, task)?;
    Ok(EncodedStep::GktPair { skill, outcome })
}

/// Mixing weights over the `2N` rows of the answer embedding:
/// `1 - a` on row `skill` and `a` on row `skill + N`.
pub fn gkt_row_weights(skill: usize, outcome: f64, n_skills: usize) -> Vec<f64> {
    let mut w = vec![0.0; 2 * n_skills];
    if outcome == 1.0 {
        w[skill + n_skills] = 1.0;
    } else if outcome == 0.0 {
        w[skill] = 1.0;
    } else {
        w[skill] = 1.0 - outcome;
        w[skill + n_skills] = outcome;
    }
    w
}
