//! Transition-frequency graph between skills.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::StudentSequence;
use crate::error::{KtError, Result};
use crate::numerics::Tensor;

/// Row-normalized counts of consecutive skill transitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseGraph {
    pub n: usize,
    /// `counts[i][j]`: times skill `j` directly followed skill `i`, self-transitions included.
    pub counts: Vec<Vec<u64>>,
    /// Transition weights with a zero diagonal.
    pub adjacency: Vec<Vec<f64>>,
}

pub const ADJACENCY_TENSOR: &str = "graph.adjacency";
pub const COUNTS_TENSOR: &str = "graph.counts";

/// Counts transitions over the valid steps of `sequences` and normalizes each row.
///
/// Self-transitions never enter `A`. They are left out of the row denominator
/// as well unless `self_in_denominator` is set, in which case rows with
/// repeated skills sum to less than one.
pub fn build_dense_graph(
    sequences: &[StudentSequence],
    n: usize,
    self_in_denominator: bool,
) -> Result<DenseGraph> {
    if n == 0 {
        return Err(KtError::Config("dense graph over zero skills".into()));
    }
    let mut counts = vec![vec![0u64; n]; n];
    for seq in sequences {
        for pair in seq.valid_steps().windows(2) {
            let (i, j) = (pair[0].skill, pair[1].skill);
            if i >= n || j >= n {
                return Err(KtError::Range(format!(
                    "transition {i}->{j} outside {n} skills"
                )));
            }
            counts[i][j] += 1;
        }
    }
    let adjacency = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| self_in_denominator || j != i)
                .map(|(_, &c)| c)
                .sum();
            row.iter()
                .enumerate()
                .map(|(j, &c)| {
                    if j == i || total == 0 {
                        0.0
                    } else {
                        c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(DenseGraph {
        n,
        counts,
        adjacency,
    })
}

impl DenseGraph {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.adjacency[i]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.adjacency.iter().map(|r| r[j]).collect()
    }

    pub fn push_to(&self, ck: &mut Checkpoint) {
        let flat: Vec<f64> = self.adjacency.iter().flatten().copied().collect();
        let counts: Vec<f64> = self.counts.iter().flatten().map(|&c| c as f64).collect();
        let shape = vec![self.n, self.n];
        ck.push(
            ADJACENCY_TENSOR,
            &Tensor::new(shape.clone(), flat).expect("finite graph"),
        );
        ck.push(
            COUNTS_TENSOR,
            &Tensor::new(shape, counts).expect("finite counts"),
        );
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let a: Tensor<f64> = ck.tensor(ADJACENCY_TENSOR)?;
        let c: Tensor<f64> = ck.tensor(COUNTS_TENSOR)?;
        let (n, m) = a.dims2()?;
        if n != m || c.shape() != a.shape() {
            return Err(KtError::Checkpoint(
                "graph tensors are not square and aligned".into(),
            ));
        }
        Ok(DenseGraph {
            n,
            counts: (0..n)
                .map(|i| c.row(i).iter().map(|&v| v as u64).collect())
                .collect(),
            adjacency: (0..n).map(|i| a.row(i).to_vec()).collect(),
        })
    }
}
