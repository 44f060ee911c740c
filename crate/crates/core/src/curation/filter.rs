use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Inventory;
use crate::error::Result;
use crate::jsonl;
use crate::model::ImageManifest;

/// Per-dataset inclusion rule. Datasets without a rule pass unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRule {
    #[serde(default)]
    pub drop: bool,
    /// When set, only images whose category is listed survive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drop_categories: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub datasets: BTreeMap<String, DatasetRule>,
}

impl FilterConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        jsonl::read_json(path)
    }

    pub fn keeps_dataset(&self, dataset_id: &str) -> bool {
        self.datasets.get(dataset_id).is_none_or(|r| !r.drop)
    }

    pub fn keeps(&self, record: &ImageManifest) -> bool {
        let Some(rule) = self.datasets.get(&record.dataset_id) else {
            return true;
        };
        if rule.drop {
            return false;
        }
        let cat = record.category.as_deref();
        if let Some(keep) = &rule.keep_categories {
            if !cat.is_some_and(|c| keep.iter().any(|k| k == c)) {
                return false;
            }
        }
        !cat.is_some_and(|c| rule.drop_categories.iter().any(|k| k == c))
    }

    /// Dataset-level view: removes dropped datasets from an inventory.
    pub fn filter_inventory(&self, inv: &Inventory) -> Inventory {
        inv.iter()
            .filter(|(d, _)| self.keeps_dataset(d))
            .map(|(d, n)| (d.clone(), *n))
            .collect()
    }

    pub fn filter_manifest<'a>(
        &self,
        records: impl IntoIterator<Item = &'a ImageManifest>,
    ) -> Vec<ImageManifest> {
        records.into_iter().filter(|r| self.keeps(r)).cloned().collect()
    }
}
