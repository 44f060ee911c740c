use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{Allocation, Inventory};
use crate::model::{ImageManifest, ManifestIndex, Split, Subset};
use crate::rng;

/// One drawn instance with its two real images.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SelectedInstance {
    pub dataset_id: String,
    pub instance_id: String,
    pub anchor: String,
    pub positive: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Selection {
    pub instances: Vec<SelectedInstance>,
    /// dataset id -> instances allocated but not available.
    pub shortfall: BTreeMap<String, u64>,
}

/// Number of distinct real instances per dataset.
pub fn inventory_from_manifest(index: &ManifestIndex) -> Inventory {
    let mut seen: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in index.iter().filter(|r| r.subset == Subset::S1) {
        seen.entry(&r.dataset_id).or_default().insert(&r.instance_id);
    }
    seen.into_iter()
        .map(|(d, s)| (d.to_string(), s.len() as u64))
        .collect()
}

/// dataset -> instance -> real image ids (ascending), for instances with at least two.
fn eligible(index: &ManifestIndex) -> BTreeMap<&str, BTreeMap<&str, Vec<&str>>> {
    let mut out: BTreeMap<&str, BTreeMap<&str, Vec<&str>>> = BTreeMap::new();
    for r in index.iter().filter(|r| r.subset == Subset::S1) {
        out.entry(r.dataset_id.as_str())
            .or_default()
            .entry(r.instance_id.as_str())
            .or_default()
            .push(r.image_id.as_str());
    }
    for per in out.values_mut() {
        per.retain(|_, imgs| imgs.len() >= 2);
    }
    out
}

/// Draw `alloc[d]` instances from each dataset and two distinct real images per instance.
///
/// Instances with fewer than two real images are never drawn. Picks start
/// in the training split; see [`split_train_val`].
pub fn sample_instances(alloc: &Allocation, index: &ManifestIndex, seed: u64) -> Selection {
    let pool = eligible(index);
    let mut sel = Selection::default();
    for (ds, &want) in alloc {
        let empty = BTreeMap::new();
        let insts = pool.get(ds.as_str()).unwrap_or(&empty);
        let mut rng = rng::stream(seed, rng::label_stream(&format!("sample:{ds}")));
        let mut ids: Vec<&str> = insts.keys().copied().collect();
        ids.shuffle(&mut rng);
        let take = (want as usize).min(ids.len());
        if take < want as usize {
            sel.shortfall.insert(ds.clone(), want - take as u64);
        }
        for inst in &ids[..take] {
            let imgs = &insts[inst];
            let pick = index::sample(&mut rng, imgs.len(), 2);
            sel.instances.push(SelectedInstance {
                dataset_id: ds.clone(),
                instance_id: inst.to_string(),
                anchor: imgs[pick.index(0)].to_string(),
                positive: imgs[pick.index(1)].to_string(),
                split: Split::Train,
            });
        }
    }
    sel.instances.sort();
    sel
}

/// Hold out `round(n / (ratio + 1))` instances per dataset for validation.
pub fn split_train_val(sel: &mut Selection, ratio: u32, seed: u64) {
    let mut by_ds: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in sel.instances.iter().enumerate() {
        by_ds.entry(s.dataset_id.clone()).or_default().push(i);
    }
    for (ds, mut idx) in by_ds {
        idx.sort_by(|&a, &b| sel.instances[a].instance_id.cmp(&sel.instances[b].instance_id));
        let mut rng = rng::stream(seed, rng::label_stream(&format!("split:{ds}")));
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 / (ratio as f64 + 1.0)).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            sel.instances[i].split = if k < n_val { Split::Val } else { Split::Train };
        }
    }
}

/// Copy selection splits onto the manifest.
///
/// Every image of a selected instance takes that instance's split; an
/// identity edit follows the instance of its source image.
pub fn apply_split(records: &[ImageManifest], sel: &Selection) -> Vec<ImageManifest> {
    let split: BTreeMap<&str, Split> = sel
        .instances
        .iter()
        .map(|s| (s.instance_id.as_str(), s.split))
        .collect();
    let instance_of: BTreeMap<&str, &str> = records
        .iter()
        .map(|r| (r.image_id.as_str(), r.instance_id.as_str()))
        .collect();
    records
        .iter()
        .map(|r| {
            let owner = match (&r.subset, &r.source_image_id) {
                (Subset::S2b, Some(src)) => instance_of.get(src.as_str()).copied(),
                _ => Some(r.instance_id.as_str()),
            };
            let mut r = r.clone();
            if let Some(s) = owner.and_then(|o| split.get(o)) {
                r.split = *s;
            }
            r
        })
        .collect()
}
