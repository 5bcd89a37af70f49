//! Seeded two-state mastery simulator used as a ground-truth fixture.
//!
//! Each student starts with every skill mastered independently with
//! probability `p_init`. At every step a skill is drawn uniformly, an outcome
//! is produced from the current mastery, and an unmastered skill then becomes
//! mastered with probability `p_learn`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{InteractionRecord, Task};
use crate::error::{KtError, Result};
use crate::ingest::Schema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_skills: usize,
    pub seq_len: usize,
    pub p_init: f64,
    pub p_learn: f64,
    pub slip: f64,
    pub guess: f64,
    pub task: Task,
    /// Standard deviation of the gaussian noise added to subjective scores.
    pub score_noise_sd: f64,
    /// Number of evenly spaced score levels for subjective outcomes.
    pub score_levels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_students: 500,
            n_skills: 10,
            seq_len: 50,
            p_init: 0.2,
            p_learn: 0.3,
            slip: 0.1,
            guess: 0.2,
            task: Task::Objective,
            score_noise_sd: 0.1,
            score_levels: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_skills == 0 || self.n_students == 0 || self.seq_len == 0 {
            return Err(KtError::Config(format!(
                "synth needs positive n_students, n_skills and seq_len: {self:?}"
            )));
        }
        for (name, p) in [
            ("p_init", self.p_init),
            ("p_learn", self.p_learn),
            ("slip", self.slip),
            ("guess", self.guess),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(KtError::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.score_noise_sd >= 0.0 && self.score_noise_sd.is_finite()) {
            return Err(KtError::Config(format!(
                "score_noise_sd = {} must be a non-negative number",
                self.score_noise_sd
            )));
        }
        if self.task == Task::Subjective && self.score_levels < 2 {
            return Err(KtError::Config("score_levels must be at least 2".into()));
        }
        Ok(())
    }

    /// Probability that the skill practised at step `t` (0-based) is mastered.
    pub fn mastery_probability(&self, t: usize) -> f64 {
        let stay = 1.0 - self.p_learn / self.n_skills as f64;
        1.0 - (1.0 - self.p_init) * stay.powi(t as i32)
    }

    /// Expected objective correct rate over steps `0..seq_len`.
    pub fn expected_correct_rate(&self) -> f64 {
        let total: f64 = (0..self.seq_len)
            .map(|t| {
                let m = self.mastery_probability(t);
                m * (1.0 - self.slip) + (1.0 - m) * self.guess
            })
            .sum();
        total / self.seq_len as f64
    }
}

/// Generated records with the latent mastery behind every outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub records: Vec<InteractionRecord>,
    /// `mastery[s][t]`: whether student `s` had mastered the skill drawn at step `t`.
    pub mastery: Vec<Vec<bool>>,
    /// Raw integer score level behind each subjective record.
    pub score_points: Vec<usize>,
}

pub fn generate(config: &SynthConfig, seed: u64) -> Result<SynthData> {
    config.validate()?;
    let noise = Normal::new(0.0, config.score_noise_sd)
        .map_err(|e| KtError::Config(format!("score noise: {e}")))?;
    let top = config.score_levels.max(2) - 1;
    let mut data = SynthData {
        records: Vec::with_capacity(config.n_students * config.seq_len),
        mastery: Vec::with_capacity(config.n_students),
        score_points: Vec::new(),
    };
    for student in 0..config.n_students {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(student as u64);
        let mut mastered: Vec<bool> = (0..config.n_skills)
            .map(|_| rng.random_bool(config.p_init))
            .collect();
        let mut flags = Vec::with_capacity(config.seq_len);
        for t in 0..config.seq_len {
            let skill = rng.random_range(0..config.n_skills);
            let m = mastered[skill];
            let outcome = match config.task {
                Task::Objective => {
                    let p = if m { 1.0 - config.slip } else { config.guess };
                    rng.random_bool(p) as u8 as f64
                }
                Task::Subjective => {
                    let level = if m { 1.0 - config.slip } else { config.guess };
                    let noisy = (level + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    let point = (noisy * top as f64).round() as usize;
                    data.score_points.push(point);
                    point as f64 / top as f64
                }
            };
            flags.push(m);
            data.records.push(InteractionRecord {
                student,
                skill,
                item: None,
                outcome,
                order: (student * config.seq_len + t) as i64,
            });
            if !m && rng.random_bool(config.p_learn) {
                mastered[skill] = true;
            }
        }
        data.mastery.push(flags);
    }
    Ok(data)
}

/// Writes the records in the CSV layout that [`crate::ingest`] reads back.
/// Subjective outcomes are written as integer score points.
pub fn write_csv<W: Write>(data: &SynthData, config: &SynthConfig, out: W) -> Result<()> {
    let schema = match config.task {
        Task::Objective => Schema::Assist09,
        Task::Subjective => Schema::Scored,
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(schema.columns())?;
    for (k, r) in data.records.iter().enumerate() {
        let outcome = match config.task {
            Task::Objective => (r.outcome as u8).to_string(),
            Task::Subjective => data.score_points[k].to_string(),
        };
        w.write_record([
            r.order.to_string(),
            format!("u{}", r.student),
            format!("k{}", r.skill),
            outcome,
        ])?;
    }
    w.flush()?;
    Ok(())
}
