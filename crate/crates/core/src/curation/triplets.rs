use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MinedNegatives, SelectedInstance};
use crate::error::{Error, Result};
use crate::model::{ManifestIndex, NegativeKind, Subset, Triplet, TripletKind};
use crate::rng;

/// Relative weights of the three triplet kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletMix {
    pub real_only: f64,
    pub s2a_positive: f64,
    pub s2b_negative: f64,
}

impl Default for TripletMix {
    fn default() -> Self {
        Self {
            real_only: 1.0,
            s2a_positive: 1.0,
            s2b_negative: 1.0,
        }
    }
}

impl TripletMix {
    fn weights(&self) -> [f64; 3] {
        [self.real_only, self.s2a_positive, self.s2b_negative]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(format!("bad triplet mix {w:?}")));
        }
        Ok(())
    }

    /// Per-kind counts summing to `total`, by largest remainder (ties to the earlier kind).
    pub fn quotas(&self, total: u64) -> [u64; 3] {
        let w = self.weights();
        let sum: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| total as f64 * x / sum).collect();
        let mut q: [u64; 3] = [0; 3];
        for k in 0..3 {
            q[k] = exact[k].floor() as u64;
        }
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut left = total - q.iter().sum::<u64>();
        for k in order {
            if left == 0 {
                break;
            }
            if w[k] > 0.0 {
                q[k] += 1;
                left -= 1;
            }
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletBuild {
    pub triplets: Vec<Triplet>,
    pub requested: BTreeMap<TripletKind, u64>,
    pub produced: BTreeMap<TripletKind, u64>,
    /// Requested minus produced, only for kinds that fell short.
    pub shortfall: BTreeMap<TripletKind, u64>,
}

struct Material<'a> {
    sel: &'a SelectedInstance,
    negatives: Vec<&'a str>,
    edits: Vec<&'a str>,
    altered: Vec<&'a str>,
}

fn gather<'a>(
    selected: &'a [SelectedInstance],
    mined: &'a MinedNegatives,
    manifest: &'a ManifestIndex,
) -> Vec<Material<'a>> {
    let real = manifest.images_by_instance(Some(Subset::S1));
    let edits = manifest.images_by_instance(Some(Subset::S2a));
    let mut altered: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in manifest.iter().filter(|r| r.subset == Subset::S2b) {
        let Some(src) = r.source_image_id.as_deref() else { continue };
        if let Some(s) = manifest.get(src) {
            if s.instance_id != r.instance_id {
                altered.entry(s.instance_id.as_str()).or_default().push(&r.image_id);
            }
        }
    }
    selected
        .iter()
        .map(|s| {
            let inst = s.instance_id.as_str();
            let mut lookup = vec![s.anchor.as_str(), s.positive.as_str()];
            lookup.extend(real.get(inst).into_iter().flatten().copied());
            let negatives = lookup
                .into_iter()
                .find_map(|img| mined.get(img).filter(|n| !n.is_empty()))
                .map(|n| {
                    n.iter()
                        .map(|x| x.image_id.as_str())
                        .filter(|id| manifest.get(id).is_some_and(|r| r.instance_id != inst))
                        .collect()
                })
                .unwrap_or_default();
            Material {
                sel: s,
                negatives,
                edits: edits.get(inst).cloned().unwrap_or_default(),
                altered: altered.get(inst).cloned().unwrap_or_default(),
            }
        })
        .collect()
}

fn eligible(kind: TripletKind, m: &Material) -> bool {
    match kind {
        TripletKind::RealOnly => !m.negatives.is_empty(),
        TripletKind::S2aPositive => !m.negatives.is_empty() && !m.edits.is_empty(),
        TripletKind::S2bNegative => !m.altered.is_empty(),
    }
}

fn make(kind: TripletKind, m: &Material, cycle: usize, rng: &mut impl Rng) -> Triplet {
    let (a, p) = if cycle % 2 == 0 {
        (m.sel.anchor.as_str(), m.sel.positive.as_str())
    } else {
        (m.sel.positive.as_str(), m.sel.anchor.as_str())
    };
    let mut t = match kind {
        TripletKind::RealOnly => {
            let n = m.negatives[(cycle / 2) % m.negatives.len()];
            Triplet::new(a, p, n, NegativeKind::MinedReal)
        }
        TripletKind::S2aPositive => {
            // pairing modes: original+edit, edit+original, edit+edit
            let modes = if m.edits.len() >= 2 { 3 } else { 2 };
            let (a, p) = match rng.random_range(0..modes) {
                0 => (m.sel.anchor.as_str(), *m.edits.choose(rng).unwrap()),
                1 => (*m.edits.choose(rng).unwrap(), m.sel.positive.as_str()),
                _ => {
                    let ix = index::sample(rng, m.edits.len(), 2);
                    (m.edits[ix.index(0)], m.edits[ix.index(1)])
                }
            };
            let n = *m.negatives.choose(rng).unwrap();
            Triplet::new(a, p, n, NegativeKind::MinedReal)
        }
        TripletKind::S2bNegative => {
            let n = *m.altered.choose(rng).unwrap();
            let mut t = Triplet::new(a, p, n, NegativeKind::IdentityEdit);
            t.generative_noise = true;
            t
        }
    };
    t.kind = Some(kind);
    t
}

/// Build `total` triplets split across kinds by `mix`.
///
/// Each kind cycles through its own shuffled list of usable instances. Kinds
/// with no usable instance are reported in `shortfall`.
pub fn build_triplets(
    selected: &[SelectedInstance],
    mined: &MinedNegatives,
    manifest: &ManifestIndex,
    mix: &TripletMix,
    total: u64,
    seed: u64,
) -> Result<TripletBuild> {
    mix.validate()?;
    let mut sorted: Vec<SelectedInstance> = selected.to_vec();
    sorted.sort();
    let material = gather(&sorted, mined, manifest);
    let quotas = mix.quotas(total);
    let mut out = TripletBuild::default();
    for (kind, want) in TripletKind::ALL.into_iter().zip(quotas) {
        out.requested.insert(kind, want);
        let mut rng = rng::stream(seed, rng::label_stream(&format!("triplets:{kind:?}")));
        let mut pool: Vec<&Material> = material.iter().filter(|m| eligible(kind, m)).collect();
        pool.shuffle(&mut rng);
        let made = if pool.is_empty() { 0 } else { want };
        for i in 0..made as usize {
            let t = make(kind, pool[i % pool.len()], i / pool.len(), &mut rng);
            t.validate(manifest)?;
            out.triplets.push(t);
        }
        out.produced.insert(kind, made);
        if made < want {
            out.shortfall.insert(kind, want - made);
        }
    }
    Ok(out)
}
