//! Instance selection, hard-negative mining, triplet construction and vote aggregation.

mod allocate;
mod filter;
mod mining;
mod sample;
mod triplets;
mod votes;

use serde::{Deserialize, Serialize};

pub use allocate::{balanced_allocate, Allocation, Inventory};
pub use filter::{DatasetRule, FilterConfig};
pub use mining::{load_mined, mine_hard_negatives, save_mined, MinedNegatives, MinedRecord, Neighbor};
pub use sample::{
    apply_split, inventory_from_manifest, sample_instances, split_train_val, SelectedInstance,
    Selection,
};
pub use triplets::{build_triplets, TripletBuild, TripletMix};
pub use votes::{aggregate_votes, AggregatedVote, VoteRecord, DEFAULT_THRESHOLD, MAX_VOTES, MIN_VOTES};

use crate::error::Result;
use crate::model::{ImageManifest, ManifestIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateConfig {
    pub budget: u64,
    /// Train instances per validation instance.
    pub train_val_ratio: u32,
    #[serde(default)]
    pub filter: FilterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curation {
    pub inventory: Inventory,
    pub allocation: Allocation,
    pub selection: Selection,
}

/// Filter, allocate, sample and split in one go.
///
/// Returns the curation summary and the manifest with split assignments for
/// the selected instances.
pub fn curate(
    records: &[ImageManifest],
    cfg: &CurateConfig,
    seed: u64,
) -> Result<(Curation, Vec<ImageManifest>)> {
    let kept = cfg.filter.filter_manifest(records);
    let index = ManifestIndex::new(kept.iter().cloned())?;
    let inventory = inventory_from_manifest(&index);
    let allocation = balanced_allocate(&inventory, cfg.budget)?;
    let mut selection = sample_instances(&allocation, &index, seed);
    split_train_val(&mut selection, cfg.train_val_ratio, seed);
    let manifest = apply_split(&kept, &selection);
    Ok((
        Curation {
            inventory,
            allocation,
            selection,
        },
        manifest,
    ))
}
