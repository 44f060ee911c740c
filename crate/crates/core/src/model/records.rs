//! Triplet and pair-label records, stored as JSON lines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{ManifestIndex, Subset};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NegativeKind {
    MinedReal,
    IdentityEdit,
}

/// Which mixture component a triplet was drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TripletKind {
    RealOnly,
    S2aPositive,
    S2bNegative,
}

impl TripletKind {
    pub const ALL: [TripletKind; 3] = [
        TripletKind::RealOnly,
        TripletKind::S2aPositive,
        TripletKind::S2bNegative,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub hard_negative: String,
    pub hard_negative_kind: NegativeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<TripletKind>,
    /// Ask an image pipeline to add mild generative noise to the non-edited
    /// members, so identity edits cannot be spotted from generation artifacts.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub generative_noise: bool,
}

impl Triplet {
    pub fn new(
        anchor: impl Into<String>,
        positive: impl Into<String>,
        hard_negative: impl Into<String>,
        hard_negative_kind: NegativeKind,
    ) -> Self {
        Self {
            anchor: anchor.into(),
            positive: positive.into(),
            hard_negative: hard_negative.into(),
            hard_negative_kind,
            kind: None,
            generative_noise: false,
        }
    }

    /// Check the triplet against the manifest.
    pub fn validate(&self, manifest: &ManifestIndex) -> Result<()> {
        let a = manifest.require(&self.anchor)?;
        let p = manifest.require(&self.positive)?;
        let n = manifest.require(&self.hard_negative)?;
        if self.anchor == self.positive {
            return Err(Error::invalid(format!("triplet anchor {} is its own positive", a.image_id)));
        }
        if a.instance_id != p.instance_id {
            return Err(Error::invalid(format!(
                "anchor {} and positive {} are different instances",
                a.image_id, p.image_id
            )));
        }
        if n.instance_id == a.instance_id {
            return Err(Error::invalid(format!(
                "hard negative {} shares instance {} with the anchor",
                n.image_id, a.instance_id
            )));
        }
        if a.subset == Subset::S2b || p.subset == Subset::S2b {
            return Err(Error::invalid(format!(
                "S2b image used as anchor/positive in ({}, {})",
                a.image_id, p.image_id
            )));
        }
        if self.hard_negative_kind == NegativeKind::IdentityEdit && n.subset != Subset::S2b {
            return Err(Error::invalid(format!(
                "identity-edit negative {} is not an S2b image",
                n.image_id
            )));
        }
        Ok(())
    }
}

/// A scored pair: binary 0/1 for verification, a rating in [0, 4] for correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLabel {
    pub ref_id: String,
    pub cand_id: String,
    pub label: f64,
}

impl PairLabel {
    pub fn new(ref_id: impl Into<String>, cand_id: impl Into<String>, label: f64) -> Self {
        Self {
            ref_id: ref_id.into(),
            cand_id: cand_id.into(),
            label,
        }
    }

    pub fn binary(&self) -> Result<bool> {
        match self.label {
            l if l == 0.0 => Ok(false),
            l if l == 1.0 => Ok(true),
            l => Err(Error::invalid(format!(
                "pair ({}, {}) has non-binary label {l}",
                self.ref_id, self.cand_id
            ))),
        }
    }

    pub fn rating(&self) -> Result<f64> {
        if self.label.is_finite() && (0.0..=4.0).contains(&self.label) {
            Ok(self.label)
        } else {
            Err(Error::invalid(format!(
                "pair ({}, {}) rating {} outside [0, 4]",
                self.ref_id, self.cand_id, self.label
            )))
        }
    }
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    jsonl::read_jsonl(path)
}

pub fn save_triplets(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    jsonl::write_jsonl(path, triplets)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PairLabel>> {
    jsonl::read_jsonl(path)
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[PairLabel]) -> Result<()> {
    jsonl::write_jsonl(path, pairs)
}
