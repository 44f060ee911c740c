//! Per-image identity and provenance records, stored as JSON lines.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Which part of the training pool an image belongs to.
///
/// `S1` are real images, `S2a` identity-preserving contextual edits, `S2b`
/// identity-altering edits (usable only as negatives).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    S1,
    S2a,
    S2b,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub image_id: String,
    pub instance_id: String,
    pub dataset_id: String,
    pub subset: Subset,
    pub split: Split,
    /// Factor name -> ordinal level (e.g. `identity_strength`, `background_index`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_meta: Option<BTreeMap<String, f64>>,
    /// For edited images: the image the edit was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image_id: Option<String>,
    /// Dataset-level category label, used by curation filters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ImageManifest {
    pub fn new(
        image_id: impl Into<String>,
        instance_id: impl Into<String>,
        dataset_id: impl Into<String>,
        subset: Subset,
        split: Split,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            instance_id: instance_id.into(),
            dataset_id: dataset_id.into(),
            subset,
            split,
            edit_meta: None,
            source_image_id: None,
            category: None,
        }
    }

    pub fn edit_level(&self, factor: &str) -> Option<f64> {
        self.edit_meta.as_ref().and_then(|m| m.get(factor).copied())
    }
}

/// Read a manifest file; duplicate image ids and unknown enum tags are errors.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageManifest>> {
    let records: Vec<ImageManifest> = jsonl::read_jsonl(path)?;
    check_unique(&records)?;
    Ok(records)
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[ImageManifest]) -> Result<()> {
    jsonl::write_jsonl(path, records)
}

fn check_unique(records: &[ImageManifest]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::DuplicateId(r.image_id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: u64,
    pub instances: u64,
    pub by_subset: BTreeMap<Subset, u64>,
    pub by_split: BTreeMap<Split, u64>,
}

/// Image and instance counts per dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub images: u64,
    pub instances: u64,
    pub datasets: BTreeMap<String, DatasetStats>,
}

/// Order-independent view of a manifest keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManifestIndex {
    by_id: BTreeMap<String, ImageManifest>,
}

impl ManifestIndex {
    pub fn new(records: impl IntoIterator<Item = ImageManifest>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for r in records {
            if by_id.contains_key(&r.image_id) {
                return Err(Error::DuplicateId(r.image_id));
            }
            by_id.insert(r.image_id.clone(), r);
        }
        Ok(Self { by_id })
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageManifest> {
        self.by_id.get(image_id)
    }

    pub fn require(&self, image_id: &str) -> Result<&ImageManifest> {
        self.get(image_id)
            .ok_or_else(|| Error::MissingItem(format!("image {image_id} not in manifest")))
    }

    /// Records in ascending image id order.
    pub fn iter(&self) -> impl Iterator<Item = &ImageManifest> {
        self.by_id.values()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn stats(&self) -> ManifestStats {
        let mut out = ManifestStats::default();
        let mut instances: BTreeMap<&str, HashSet<&str>> = BTreeMap::new();
        for r in self.iter() {
            let d = out.datasets.entry(r.dataset_id.clone()).or_default();
            d.images += 1;
            *d.by_subset.entry(r.subset).or_default() += 1;
            *d.by_split.entry(r.split).or_default() += 1;
            instances.entry(&r.dataset_id).or_default().insert(&r.instance_id);
        }
        for (ds, set) in instances {
            out.datasets.get_mut(ds).unwrap().instances = set.len() as u64;
        }
        out.images = self.len() as u64;
        out.instances = self
            .iter()
            .map(|r| r.instance_id.as_str())
            .collect::<HashSet<_>>()
            .len() as u64;
        out
    }

    /// instance id -> image ids (ascending), optionally restricted to one subset.
    pub fn images_by_instance(&self, subset: Option<Subset>) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for r in self.iter() {
            if subset.is_none_or(|s| s == r.subset) {
                out.entry(r.instance_id.as_str())
                    .or_default()
                    .push(r.image_id.as_str());
            }
        }
        out
    }
}
