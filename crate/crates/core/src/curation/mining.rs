use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::linalg;
use crate::model::{EmbeddingBundle, ManifestIndex, Subset, TokenKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub image_id: String,
    pub similarity: f64,
}

/// Mined neighbours of one anchor, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedRecord {
    pub anchor: String,
    pub negatives: Vec<Neighbor>,
}

pub type MinedNegatives = BTreeMap<String, Vec<Neighbor>>;

pub fn save_mined(path: impl AsRef<Path>, mined: &MinedNegatives) -> Result<()> {
    let recs: Vec<MinedRecord> = mined
        .iter()
        .map(|(a, n)| MinedRecord {
            anchor: a.clone(),
            negatives: n.clone(),
        })
        .collect();
    jsonl::write_jsonl(path, &recs)
}

pub fn load_mined(path: impl AsRef<Path>) -> Result<MinedNegatives> {
    let recs: Vec<MinedRecord> = jsonl::read_jsonl(path)?;
    let mut out = MinedNegatives::new();
    for r in recs {
        if out.insert(r.anchor.clone(), r.negatives).is_some() {
            return Err(Error::DuplicateId(r.anchor));
        }
    }
    Ok(out)
}

/// Exact top-`k` cosine neighbours of every query among real pool images of
/// other instances. Ties go to the smaller image id.
pub fn mine_hard_negatives(
    queries: &EmbeddingBundle,
    pool: &EmbeddingBundle,
    manifest: &ManifestIndex,
    k: usize,
) -> Result<MinedNegatives> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    for b in [queries, pool] {
        if b.token_kind != TokenKind::Cls {
            return Err(Error::invalid("mining needs CLS bundles"));
        }
    }
    if queries.dim != pool.dim {
        return Err(Error::Shape(format!(
            "query dim {} differs from pool dim {}",
            queries.dim, pool.dim
        )));
    }
    let mut candidates: Vec<(&str, &str, Array1<f64>)> = Vec::new();
    for it in &pool.items {
        let rec = manifest.require(&it.id)?;
        if rec.subset == Subset::S1 {
            candidates.push((it.id.as_str(), rec.instance_id.as_str(), it.vector()));
        }
    }
    queries
        .items
        .par_iter()
        .map(|q| {
            let inst = manifest.require(&q.id)?.instance_id.as_str();
            let qv = q.vector();
            let mut scored = candidates
                .iter()
                .filter(|(_, ci, _)| *ci != inst)
                .map(|(id, _, v)| Ok((linalg::cosine(qv.view(), v.view())?, *id)))
                .collect::<Result<Vec<_>>>()?;
            if scored.is_empty() {
                return Err(Error::NoCandidates(q.id.clone()));
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            scored.truncate(k);
            let negs = scored
                .into_iter()
                .map(|(s, id)| Neighbor {
                    image_id: id.to_string(),
                    similarity: s,
                })
                .collect();
            Ok((q.id.clone(), negs))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}
