use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PairLabel;

pub const MIN_VOTES: usize = 3;
pub const MAX_VOTES: usize = 9;
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Annotator votes for one pair; 1 means "same instance".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub pair_id: String,
    pub votes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedVote {
    pub pair_id: String,
    pub label: f64,
    pub agreement: f64,
    pub binary: bool,
}

impl AggregatedVote {
    /// Pair label record; `pair_id` is split at the first `|` into reference and candidate.
    pub fn to_pair_label(&self, binary: bool) -> Result<PairLabel> {
        let (r, c) = self
            .pair_id
            .split_once('|')
            .ok_or_else(|| Error::invalid(format!("pair id {} has no '|' separator", self.pair_id)))?;
        Ok(PairLabel::new(r, c, if binary { self.binary as u8 as f64 } else { self.label }))
    }
}

/// Fraction of positive votes, majority agreement, and `label > threshold`.
pub fn aggregate_votes(records: &[VoteRecord], threshold: f64) -> Result<Vec<AggregatedVote>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    records
        .iter()
        .map(|r| {
            if !(MIN_VOTES..=MAX_VOTES).contains(&r.votes.len()) {
                return Err(Error::invalid(format!(
                    "pair {} has {} votes, expected {MIN_VOTES}..={MAX_VOTES}",
                    r.pair_id,
                    r.votes.len()
                )));
            }
            if r.votes.iter().any(|&v| v > 1) {
                return Err(Error::invalid(format!("pair {} has a non-binary vote", r.pair_id)));
            }
            let yes = r.votes.iter().filter(|&&v| v == 1).count();
            let label = yes as f64 / r.votes.len() as f64;
            Ok(AggregatedVote {
                pair_id: r.pair_id.clone(),
                label,
                agreement: label.max(1.0 - label),
                binary: label > threshold,
            })
        })
        .collect()
}
