//! Data model shared by every stage, and its on-disk formats.
//!
//! - `.idse` embedding bundles ([`bundle`]), little-endian with a version field.
//! - `.jsonl` image manifests ([`manifest`]).
//! - `.jsonl` triplet and pair-label files ([`records`]).

pub mod bundle;
pub mod manifest;
pub mod records;

pub use bundle::{read_bundle, write_bundle, BundleSummary, EmbeddingBundle, EmbeddingItem, TokenKind};
pub use manifest::{
    load_manifest, save_manifest, DatasetStats, ImageManifest, ManifestIndex, ManifestStats, Split,
    Subset,
};
pub use records::{
    load_pairs, load_triplets, save_pairs, save_triplets, NegativeKind, PairLabel, Triplet,
    TripletKind,
};
