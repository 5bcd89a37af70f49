//! In-memory interactions, per-student sequences and dataset metadata.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{KtError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Right/wrong items; outcomes in {0, 1}.
    Objective,
    /// Multi-level scored items; outcomes are normalized scores in [0, 1].
    Subjective,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Objective => "objective",
            Task::Subjective => "subjective",
        })
    }
}

/// One student-item event after id remapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub student: usize,
    pub skill: usize,
    pub item: Option<String>,
    pub outcome: f64,
    pub order: i64,
}

/// Raw id to dense index table; indices are contiguous from 0 in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        IdMap::default()
    }

    /// Index of `raw`, assigning the next free one on first sight.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len();
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn index_of(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw_of(&self, index: usize) -> Option<&str> {
        self.raw.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }
}

impl From<Vec<String>> for IdMap {
    fn from(raw: Vec<String>) -> Self {
        let mut map = IdMap::new();
        for r in &raw {
            map.intern(r);
        }
        map
    }
}

impl From<IdMap> for Vec<String> {
    fn from(map: IdMap) -> Self {
        map.raw
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdMaps {
    pub skills: IdMap,
    pub students: IdMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n_skills: usize,
    pub n_students: usize,
    pub task: Task,
    /// Per-skill count of distinct raw score values (scored data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_levels: Option<Vec<usize>>,
    pub id_maps: IdMaps,
}

impl DatasetMeta {
    /// Score level count used to discretize outcomes of `skill` (2 for binary data).
    pub fn levels_of(&self, skill: usize) -> usize {
        self.score_levels
            .as_ref()
            .and_then(|l| l.get(skill).copied())
            .unwrap_or(2)
            .max(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub skill: usize,
    pub outcome: f64,
}

/// Time-ordered steps of one student, with a validity mask for padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSequence {
    pub student: usize,
    pub steps: Vec<Step>,
    pub mask: Vec<bool>,
}

impl StudentSequence {
    pub fn new(student: usize, steps: Vec<Step>) -> Self {
        let mask = vec![true; steps.len()];
        StudentSequence {
            student,
            steps,
            mask,
        }
    }

    /// Number of leading valid steps.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn valid_steps(&self) -> &[Step] {
        &self.steps[..self.valid_len()]
    }

    /// Copy padded with masked-out steps up to `len`.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        while out.steps.len() < len {
            out.steps.push(Step {
                skill: 0,
                outcome: 0.0,
            });
            out.mask.push(false);
        }
        out
    }
}

/// Pads every sequence of a batch to the longest one.
pub fn pad_batch(batch: &[StudentSequence]) -> Vec<StudentSequence> {
    let len = batch.iter().map(|s| s.steps.len()).max().unwrap_or(0);
    batch.iter().map(|s| s.padded(len)).collect()
}

/// Groups records per student, orders them by `order`, and cuts them into
/// chunks of at most `max_seq_len` steps.
///
/// Chunks shorter than two steps carry no next-step target and are dropped.
pub fn to_sequences(
    records: &[InteractionRecord],
    meta: &DatasetMeta,
    max_seq_len: usize,
) -> Result<Vec<StudentSequence>> {
    if max_seq_len < 2 {
        return Err(KtError::Config(format!(
            "max_seq_len must be at least 2, got {max_seq_len}"
        )));
    }
    let mut per_student: BTreeMap<usize, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        if r.skill >= meta.n_skills {
            return Err(KtError::Corrupt(format!(
                "skill index {} out of range for {} skills",
                r.skill, meta.n_skills
            )));
        }
        if !(0.0..=1.0).contains(&r.outcome) {
            return Err(KtError::Corrupt(format!(
                "outcome {} of student {} outside [0, 1]",
                r.outcome, r.student
            )));
        }
        per_student.entry(r.student).or_default().push(r);
    }
    let mut out = Vec::new();
    for (student, mut recs) in per_student {
        recs.sort_by_key(|r| r.order);
        for chunk in recs.chunks(max_seq_len) {
            if chunk.len() < 2 {
                continue;
            }
            let steps = chunk
                .iter()
                .map(|r| Step {
                    skill: r.skill,
                    outcome: r.outcome,
                })
                .collect();
            out.push(StudentSequence::new(student, steps));
        }
    }
    Ok(out)
}
