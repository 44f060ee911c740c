//! Retrieval, verification, triplet and correlation protocols.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{self, ScoredItem};
use super::Scorer;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::model::PairLabel;
use crate::runinfo::RunInfo;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One query with its own gallery; `relevant` must be a non-empty subset of `gallery`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub query: String,
    pub gallery: Vec<String>,
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalTask {
    pub queries: Vec<RetrievalQuery>,
}

impl RetrievalTask {
    /// All queries ranked against one shared gallery.
    pub fn shared(
        queries: &[String],
        gallery: &[String],
        relevance: &BTreeMap<String, Vec<String>>,
    ) -> Self {
        Self {
            queries: queries
                .iter()
                .map(|q| RetrievalQuery {
                    query: q.clone(),
                    gallery: gallery.iter().filter(|g| *g != q).cloned().collect(),
                    relevant: relevance.get(q).cloned().unwrap_or_default(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::invalid("retrieval task has no queries"));
        }
        for q in &self.queries {
            let gallery: HashSet<&str> = q.gallery.iter().map(String::as_str).collect();
            if gallery.len() != q.gallery.len() {
                return Err(Error::invalid(format!("query {} has duplicate gallery ids", q.query)));
            }
            if q.relevant.is_empty() {
                return Err(Error::invalid(format!("query {} has no relevant gallery item", q.query)));
            }
            if let Some(r) = q.relevant.iter().find(|r| !gallery.contains(r.as_str())) {
                return Err(Error::invalid(format!(
                    "relevant item {r} of query {} is not in its gallery",
                    q.query
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let task = Self {
            queries: jsonl::read_jsonl(path)?,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        jsonl::write_jsonl(path, &self.queries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TripletMode {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTriplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    pub mode: TripletMode,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TripletTask {
    pub triplets: Vec<EvalTriplet>,
}

impl TripletTask {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            triplets: jsonl::read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        jsonl::write_jsonl(path, &self.triplets)
    }
}

/// Per-query (or per-pair / per-triplet) metric breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDetail {
    pub id: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub metrics: BTreeMap<String, f64>,
    pub per_query: Vec<QueryDetail>,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        jsonl::write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Retrieval,
    Verification,
    Triplet,
    Correlation,
}

pub enum ProtocolInputs<'a> {
    Retrieval(&'a RetrievalTask),
    Pairs(&'a [PairLabel]),
    Triplets(&'a TripletTask),
}

fn score_gallery(q: &RetrievalQuery, scorer: &Scorer) -> Result<Vec<ScoredItem>> {
    let relevant: HashSet<&str> = q.relevant.iter().map(String::as_str).collect();
    q.gallery
        .iter()
        .filter(|g| **g != q.query)
        .map(|g| {
            Ok(ScoredItem::new(
                g.clone(),
                scorer.similarity(&q.query, g)?,
                relevant.contains(g.as_str()),
            ))
        })
        .collect()
}

/// AP, nDCG and (when both classes occur) ROC-AUC for every query, in query-id order.
pub fn per_query_metrics(task: &RetrievalTask, scorer: &Scorer) -> Result<Vec<QueryDetail>> {
    task.validate()?;
    let mut details = task
        .queries
        .par_iter()
        .map(|q| {
            let items = score_gallery(q, scorer)?;
            let mut m = BTreeMap::new();
            m.insert("ap".to_string(), metrics::average_precision(&items)?);
            m.insert("ndcg".to_string(), metrics::ndcg(&items)?);
            let scores: Vec<f64> = items.iter().map(|i| i.score).collect();
            let labels: Vec<bool> = items.iter().map(|i| i.relevant).collect();
            match metrics::roc_auc(&scores, &labels) {
                Ok(auc) => {
                    m.insert("auc".to_string(), auc);
                }
                Err(Error::Undefined(_)) => {}
                Err(e) => return Err(e),
            }
            Ok(QueryDetail {
                id: q.query.clone(),
                metrics: m,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    details.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(details)
}

fn macro_mean(details: &[QueryDetail], key: &str) -> Option<f64> {
    let vals: Vec<f64> = details.iter().filter_map(|d| d.metrics.get(key).copied()).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Unweighted mean of per-query average precision.
pub fn mean_average_precision(task: &RetrievalTask, scorer: &Scorer) -> Result<f64> {
    let d = per_query_metrics(task, scorer)?;
    Ok(macro_mean(&d, "ap").expect("validated task has queries"))
}

/// Unweighted mean of per-query nDCG.
pub fn mean_ndcg(task: &RetrievalTask, scorer: &Scorer) -> Result<f64> {
    let d = per_query_metrics(task, scorer)?;
    Ok(macro_mean(&d, "ndcg").expect("validated task has queries"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletAccuracy {
    pub overall: f64,
    pub easy: Option<f64>,
    pub hard: Option<f64>,
    pub outcomes: Vec<bool>,
}

/// Fraction of triplets whose positive is strictly more similar to the anchor.
pub fn triplet_accuracy(task: &TripletTask, scorer: &Scorer) -> Result<TripletAccuracy> {
    if task.triplets.is_empty() {
        return Err(Error::invalid("triplet task is empty"));
    }
    let outcomes = task
        .triplets
        .par_iter()
        .map(|t| {
            let sp = scorer.similarity(&t.anchor, &t.positive)?;
            let sn = scorer.similarity(&t.anchor, &t.negative)?;
            Ok(metrics::triplet_correct(sp, sn))
        })
        .collect::<Result<Vec<bool>>>()?;
    let frac = |mode: Option<TripletMode>| -> Option<f64> {
        let sel: Vec<bool> = task
            .triplets
            .iter()
            .zip(&outcomes)
            .filter(|(t, _)| mode.is_none_or(|m| t.mode == m))
            .map(|(_, &o)| o)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().filter(|&&o| o).count() as f64 / sel.len() as f64)
    };
    Ok(TripletAccuracy {
        overall: frac(None).expect("non-empty"),
        easy: frac(Some(TripletMode::Easy)),
        hard: frac(Some(TripletMode::Hard)),
        outcomes,
    })
}

/// `(Spearman ρ, Kendall τ_b)` between predicted scores and human ratings.
pub fn rank_correlations(pred: &[f64], human: &[f64]) -> Result<(f64, f64)> {
    Ok((metrics::spearman(pred, human)?, metrics::kendall_tau_b(pred, human)?))
}

fn pair_scores(pairs: &[PairLabel], scorer: &Scorer) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs given"));
    }
    pairs
        .par_iter()
        .map(|p| scorer.similarity(&p.ref_id, &p.cand_id))
        .collect()
}

fn pair_details(pairs: &[PairLabel], scores: &[f64]) -> Vec<QueryDetail> {
    let mut d: Vec<QueryDetail> = pairs
        .iter()
        .zip(scores)
        .map(|(p, &s)| QueryDetail {
            id: format!("{}|{}", p.ref_id, p.cand_id),
            metrics: BTreeMap::from([("label".to_string(), p.label), ("similarity".to_string(), s)]),
        })
        .collect();
    d.sort_by(|a, b| a.id.cmp(&b.id));
    d
}

/// Run one protocol end to end.
pub fn run_protocol(
    protocol: Protocol,
    inputs: ProtocolInputs,
    scorer: &Scorer,
    run: &RunInfo,
) -> Result<EvalReport> {
    let mut metrics = BTreeMap::new();
    let per_query = match (protocol, inputs) {
        (Protocol::Retrieval, ProtocolInputs::Retrieval(task)) => {
            let details = per_query_metrics(task, scorer)?;
            for key in ["ap", "ndcg", "auc"] {
                if let Some(v) = macro_mean(&details, key) {
                    let name = match key {
                        "ap" => "map",
                        other => other,
                    };
                    metrics.insert(name.to_string(), v);
                }
            }
            details
        }
        (Protocol::Verification, ProtocolInputs::Pairs(pairs)) => {
            let labels = pairs.iter().map(|p| p.binary()).collect::<Result<Vec<_>>>()?;
            let scores = pair_scores(pairs, scorer)?;
            let items: Vec<ScoredItem> = pairs
                .iter()
                .zip(&scores)
                .zip(&labels)
                .map(|((p, &s), &l)| ScoredItem::new(format!("{}|{}", p.ref_id, p.cand_id), s, l))
                .collect();
            metrics.insert("ap".to_string(), metrics::average_precision(&items)?);
            metrics.insert("auc".to_string(), metrics::roc_auc(&scores, &labels)?);
            pair_details(pairs, &scores)
        }
        (Protocol::Correlation, ProtocolInputs::Pairs(pairs)) => {
            let ratings = pairs.iter().map(|p| p.rating()).collect::<Result<Vec<_>>>()?;
            let scores = pair_scores(pairs, scorer)?;
            let (rho, tau) = rank_correlations(&scores, &ratings)?;
            metrics.insert("spearman".to_string(), rho);
            metrics.insert("kendall_tau_b".to_string(), tau);
            pair_details(pairs, &scores)
        }
        (Protocol::Triplet, ProtocolInputs::Triplets(task)) => {
            let acc = triplet_accuracy(task, scorer)?;
            metrics.insert("accuracy".to_string(), acc.overall);
            if let Some(e) = acc.easy {
                metrics.insert("accuracy_easy".to_string(), e);
            }
            if let Some(h) = acc.hard {
                metrics.insert("accuracy_hard".to_string(), h);
            }
            task.triplets
                .iter()
                .zip(&acc.outcomes)
                .enumerate()
                .map(|(i, (t, &ok))| QueryDetail {
                    id: format!("{i:06}|{}|{}|{}", t.anchor, t.positive, t.negative),
                    metrics: BTreeMap::from([("correct".to_string(), if ok { 1.0 } else { 0.0 })]),
                })
                .collect()
        }
        (p, _) => {
            return Err(Error::invalid(format!(
                "inputs do not match the {p:?} protocol"
            )))
        }
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        protocol,
        metrics,
        per_query,
        config_hash: run.config_hash.clone(),
        seed: run.seed,
        tool_version: run.tool_version.clone(),
    })
}
