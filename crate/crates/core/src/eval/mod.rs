//! Image similarity and the evaluation protocols built on it.
//!
//! Similarity between two images is the cosine of their CLS vectors, and the
//! distance is `1 − similarity`. Patch bundles are compared with the
//! Sinkhorn patch similarity instead.

pub mod metrics;
pub mod protocol;

use std::collections::HashMap;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{EmbeddingBundle, TokenKind};
use crate::ot::{self, SinkhornConfig};

pub use metrics::{
    average_precision, kendall_tau_b, ndcg, rank, roc_auc, spearman, triplet_correct, ScoredItem,
};
pub use protocol::{
    mean_average_precision, mean_ndcg, rank_correlations, run_protocol, triplet_accuracy,
    EvalReport, EvalTriplet, Protocol, ProtocolInputs, QueryDetail, RetrievalQuery,
    RetrievalTask, TripletAccuracy, TripletMode, TripletTask,
};

/// Cosine similarity of two vectors. This is the one similarity used by
/// evaluation, validation during training and sensitivity analysis.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    linalg::cosine(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub similarity: f64,
    /// `1 − similarity`.
    pub distance: f64,
}

impl Similarity {
    fn of(similarity: f64) -> Self {
        Self {
            similarity,
            distance: 1.0 - similarity,
        }
    }
}

/// Scores image pairs from one bundle.
pub struct Scorer<'a> {
    bundle: &'a EmbeddingBundle,
    index: HashMap<&'a str, usize>,
    sinkhorn: SinkhornConfig,
}

impl<'a> Scorer<'a> {
    pub fn new(bundle: &'a EmbeddingBundle) -> Self {
        Self::with_sinkhorn(bundle, SinkhornConfig::default())
    }

    pub fn with_sinkhorn(bundle: &'a EmbeddingBundle, sinkhorn: SinkhornConfig) -> Self {
        Self {
            bundle,
            index: bundle.index(),
            sinkhorn,
        }
    }

    pub fn bundle(&self) -> &EmbeddingBundle {
        self.bundle
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn item(&self, id: &str) -> Result<&'a crate::model::EmbeddingItem> {
        self.index
            .get(id)
            .map(|&i| &self.bundle.items[i])
            .ok_or_else(|| Error::MissingItem(format!("{id} not in bundle")))
    }

    pub fn similarity(&self, x: &str, y: &str) -> Result<f64> {
        let (a, b) = (self.item(x)?, self.item(y)?);
        match self.bundle.token_kind {
            TokenKind::Cls => cosine_similarity(a.vector().view(), b.vector().view()),
            TokenKind::Patch => ot::sim_patch(a.matrix().view(), b.matrix().view(), &self.sinkhorn),
        }
    }

    pub fn score(&self, x: &str, y: &str) -> Result<Similarity> {
        self.similarity(x, y).map(Similarity::of)
    }
}

/// Similarity and distance of two images in `bundle`.
pub fn similarity(x: &str, y: &str, bundle: &EmbeddingBundle) -> Result<Similarity> {
    let a = bundle
        .get(x)
        .ok_or_else(|| Error::MissingItem(format!("{x} not in bundle")))?;
    let b = bundle
        .get(y)
        .ok_or_else(|| Error::MissingItem(format!("{y} not in bundle")))?;
    let s = match bundle.token_kind {
        TokenKind::Cls => cosine_similarity(a.vector().view(), b.vector().view())?,
        TokenKind::Patch => ot::sim_patch(a.matrix().view(), b.matrix().view(), &SinkhornConfig::default())?,
    };
    Ok(Similarity::of(s))
}
