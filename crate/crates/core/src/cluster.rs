//! Groups subword token features into word-level cluster features.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Grouping {
    /// One cluster per whitespace word.
    #[default]
    Word,
    /// Consecutive runs of `n` non-special tokens.
    Chunk(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub offsets: Vec<i64>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.offsets.iter().enumerate().filter(|(_, &o)| o == j as i64).map(|(i, _)| i).collect()
    }
}

pub fn compute_offsets(word_ids: &[i64]) -> Result<ClusterAssignment> {
    compute_offsets_with(word_ids, Grouping::Word)
}

pub fn compute_offsets_with(word_ids: &[i64], grouping: Grouping) -> Result<ClusterAssignment> {
    let n = word_ids.iter().filter(|&&w| w >= 0).count();
    if n == 0 {
        return Err(Error::invalid("no non-special tokens to cluster"));
    }
    let offsets: Vec<i64> = match grouping {
        Grouping::Word => word_ids.to_vec(),
        Grouping::Chunk(0) => return Err(Error::invalid("chunk size must be positive")),
        Grouping::Chunk(size) => {
            let mut seen = 0i64;
            word_ids
                .iter()
                .map(|&w| {
                    if w < 0 {
                        -1
                    } else {
                        seen += 1;
                        (seen - 1) / size as i64
                    }
                })
                .collect()
        }
    };
    let mut expected = 0i64;
    for &o in offsets.iter().filter(|&&o| o >= 0) {
        if o == expected {
            expected += 1;
        } else if o != expected - 1 {
            return Err(Error::invalid(format!("cluster offsets not contiguous at {o}")));
        }
    }
    Ok(ClusterAssignment { offsets, k: expected as usize })
}

/// Mean of token rows per cluster: `[T, D] -> [k, D]`.
pub fn aggregate(tape: &mut Tape, token_feats: Var, assignment: &ClusterAssignment) -> Result<Var> {
    tape.segment_mean(token_feats, &assignment.offsets, assignment.k)
}
