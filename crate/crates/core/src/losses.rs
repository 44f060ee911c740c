//! Contrastive objectives over one positive and `N >= 1` negatives.
//!
//! Scores are logits (similarity / τ). Every objective returns its value
//! together with the analytic gradient w.r.t. the logits; [`cls_loss`] and
//! [`patch_loss`] chain those through cosine similarity and the Sinkhorn
//! divergence respectively.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::ot::{self, SinkhornConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Objective {
    InfoNce,
    Hinge,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PatchMetric {
    Sinkhorn,
    CosineMeanpool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature dividing every similarity.
    pub tau: f64,
    /// Weight of the patch term in the joint loss.
    pub lambda: f64,
    /// InfoNCE: subtracted from the positive similarity before the softmax
    /// (as `margin / tau` on the logit). Hinge: the margin on logit gaps.
    pub margin: f64,
    pub objective: Objective,
    pub patch_metric: PatchMetric,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 1.0,
            margin: 0.1,
            objective: Objective::InfoNce,
            patch_metric: PatchMetric::Sinkhorn,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::invalid("lambda and margin must be non-negative"));
        }
        Ok(())
    }
}

/// Positive logit `s⁺` and negative logits `s₁⁻ … s_N⁻`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    pub pos: f64,
    pub neg: Vec<f64>,
}

impl BatchScores {
    pub fn new(pos: f64, neg: Vec<f64>) -> Self {
        Self { pos, neg }
    }

    fn check(&self) -> Result<()> {
        if self.neg.is_empty() {
            return Err(Error::invalid("at least one negative score is required"));
        }
        if !self.pos.is_finite() || self.neg.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(())
    }
}

/// Gradient of a loss w.r.t. the logits in a [`BatchScores`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrad {
    pub pos: f64,
    pub neg: Vec<f64>,
}

/// InfoNCE with the positive logit shifted down by `margin_logit`.
pub fn infonce(scores: &BatchScores, margin_logit: f64) -> Result<(f64, ScoreGrad)> {
    scores.check()?;
    let z0 = scores.pos - margin_logit;
    let d: Vec<f64> = scores.neg.iter().map(|&s| s - z0).collect();
    let m = d.iter().copied().fold(0.0, f64::max);
    let en: Vec<f64> = d.iter().map(|&v| (v - m).exp()).collect();
    let rest: f64 = en.iter().sum();
    let (loss, total) = if m == 0.0 {
        (rest.ln_1p(), 1.0 + rest)
    } else {
        let total = (-m).exp() + rest;
        (m + total.ln(), total)
    };
    let grad = ScoreGrad {
        pos: -rest / total,
        neg: en.iter().map(|e| e / total).collect(),
    };
    Ok((loss, grad))
}

pub fn infonce_loss(scores: &BatchScores, margin_logit: f64) -> Result<f64> {
    infonce(scores, margin_logit).map(|(l, _)| l)
}

pub fn infonce_grad(scores: &BatchScores, margin_logit: f64) -> Result<ScoreGrad> {
    infonce(scores, margin_logit).map(|(_, g)| g)
}

/// `Σᵢ max(0, margin − (s⁺ − sᵢ⁻))`.
pub fn hinge_loss(scores: &BatchScores, margin: f64) -> Result<(f64, ScoreGrad)> {
    scores.check()?;
    let mut loss = 0.0;
    let mut gpos = 0.0;
    let mut gneg = vec![0.0; scores.neg.len()];
    for (i, &s) in scores.neg.iter().enumerate() {
        let v = margin - (scores.pos - s);
        if v > 0.0 {
            loss += v;
            gpos -= 1.0;
            gneg[i] = 1.0;
        }
    }
    Ok((loss, ScoreGrad { pos: gpos, neg: gneg }))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(s⁺) − Σᵢ log(1 − σ(sᵢ⁻))`.
pub fn bce_loss(scores: &BatchScores) -> Result<(f64, ScoreGrad)> {
    scores.check()?;
    let loss = softplus(-scores.pos) + scores.neg.iter().map(|&s| softplus(s)).sum::<f64>();
    let grad = ScoreGrad {
        pos: -sigmoid(-scores.pos),
        neg: scores.neg.iter().map(|&s| sigmoid(s)).collect(),
    };
    Ok((loss, grad))
}

/// Dispatch on `cfg.objective`.
pub fn objective_loss(scores: &BatchScores, cfg: &LossConfig) -> Result<(f64, ScoreGrad)> {
    match cfg.objective {
        Objective::InfoNce => infonce(scores, cfg.margin / cfg.tau),
        Objective::Hinge => hinge_loss(scores, cfg.margin),
        Objective::Bce => bce_loss(scores),
    }
}

pub fn total_loss(cls_part: f64, patch_part: f64, cfg: &LossConfig) -> f64 {
    if cfg.lambda == 0.0 {
        cls_part
    } else {
        cls_part + cfg.lambda * patch_part
    }
}

/// Loss over vector embeddings and its gradient w.r.t. each input vector.
#[derive(Debug, Clone)]
pub struct VectorLoss {
    pub loss: f64,
    pub scores: BatchScores,
    pub grad_anchor: Array1<f64>,
    pub grad_positive: Array1<f64>,
    pub grad_negatives: Vec<Array1<f64>>,
}

/// `∂cos(a, b)/∂a = b / (|a||b|) − cos · a / |a|²`.
fn cosine_grad_a(a: ArrayView1<f64>, b: ArrayView1<f64>, cos: f64) -> Array1<f64> {
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    let mut g = b.to_owned() / (na * nb);
    g.scaled_add(-cos / (na * na), &a);
    g
}

fn raw_cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::invalid("zero-norm or non-finite embedding vector"));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Global loss on projected CLS vectors: cosine similarity / τ into the configured objective.
pub fn cls_loss(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negatives: &[ArrayView1<f64>],
    cfg: &LossConfig,
) -> Result<VectorLoss> {
    cfg.validate()?;
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::Shape("cls_loss vectors differ in length".into()));
    }
    let cos_pos = raw_cosine(anchor, positive)?;
    let cos_neg = negatives
        .iter()
        .map(|n| raw_cosine(anchor, *n))
        .collect::<Result<Vec<_>>>()?;
    let scores = BatchScores::new(
        cos_pos / cfg.tau,
        cos_neg.iter().map(|c| c / cfg.tau).collect(),
    );
    let (loss, g) = objective_loss(&scores, cfg)?;

    let w_pos = g.pos / cfg.tau;
    let mut grad_anchor = cosine_grad_a(anchor, positive, cos_pos) * w_pos;
    let grad_positive = cosine_grad_a(positive, anchor, cos_pos) * w_pos;
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for ((n, &c), &gn) in negatives.iter().zip(&cos_neg).zip(&g.neg) {
        let w = gn / cfg.tau;
        grad_anchor.scaled_add(w, &cosine_grad_a(anchor, *n, c));
        grad_negatives.push(cosine_grad_a(*n, anchor, c) * w);
    }
    Ok(VectorLoss {
        loss,
        scores,
        grad_anchor,
        grad_positive,
        grad_negatives,
    })
}

/// Loss over patch matrices and its gradient w.r.t. each matrix.
#[derive(Debug, Clone)]
pub struct MatrixLoss {
    pub loss: f64,
    pub scores: BatchScores,
    pub grad_anchor: Array2<f64>,
    pub grad_positive: Array2<f64>,
    pub grad_negatives: Vec<Array2<f64>>,
    /// False if any Sinkhorn solve stopped at `max_iters`.
    pub converged: bool,
}

/// Local loss on projected patch tokens.
///
/// With [`PatchMetric::Sinkhorn`] the logits are `sim_patch / τ`; with
/// [`PatchMetric::CosineMeanpool`] rows are mean-pooled and scored as in [`cls_loss`].
pub fn patch_loss(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negatives: &[ArrayView2<f64>],
    cfg: &LossConfig,
    sink: &SinkhornConfig,
) -> Result<MatrixLoss> {
    cfg.validate()?;
    match cfg.patch_metric {
        PatchMetric::CosineMeanpool => meanpool_loss(anchor, positive, negatives, cfg),
        PatchMetric::Sinkhorn => sinkhorn_loss(anchor, positive, negatives, cfg, sink),
    }
}

fn sinkhorn_loss(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negatives: &[ArrayView2<f64>],
    cfg: &LossConfig,
    sink: &SinkhornConfig,
) -> Result<MatrixLoss> {
    let pos = ot::sinkhorn_divergence_grad(anchor, positive, sink)?;
    let negs = negatives
        .iter()
        .map(|n| ot::sinkhorn_divergence_grad(anchor, *n, sink))
        .collect::<Result<Vec<_>>>()?;
    let scores = BatchScores::new(
        -pos.divergence.value / cfg.tau,
        negs.iter().map(|d| -d.divergence.value / cfg.tau).collect(),
    );
    let (loss, g) = objective_loss(&scores, cfg)?;

    // d(logit)/d(divergence) = -1/τ
    let w_pos = -g.pos / cfg.tau;
    let mut grad_anchor = &pos.grad_a * w_pos;
    let grad_positive = &pos.grad_b * w_pos;
    let mut grad_negatives = Vec::with_capacity(negs.len());
    let mut converged = pos.divergence.converged;
    for (d, &gn) in negs.iter().zip(&g.neg) {
        let w = -gn / cfg.tau;
        grad_anchor.scaled_add(w, &d.grad_a);
        grad_negatives.push(&d.grad_b * w);
        converged &= d.divergence.converged;
    }
    Ok(MatrixLoss {
        loss,
        scores,
        grad_anchor,
        grad_positive,
        grad_negatives,
        converged,
    })
}

fn mean_rows(m: ArrayView2<f64>) -> Result<Array1<f64>> {
    m.mean_axis(Axis(0))
        .ok_or_else(|| Error::invalid("empty patch matrix"))
}

fn spread_rows(grad: &Array1<f64>, rows: usize) -> Array2<f64> {
    let g = grad / rows as f64;
    let mut out = Array2::zeros((rows, g.len()));
    for mut r in out.axis_iter_mut(Axis(0)) {
        r.assign(&g);
    }
    out
}

fn meanpool_loss(
    anchor: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negatives: &[ArrayView2<f64>],
    cfg: &LossConfig,
) -> Result<MatrixLoss> {
    let a = mean_rows(anchor)?;
    let p = mean_rows(positive)?;
    let ns = negatives
        .iter()
        .map(|n| mean_rows(*n))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = ns.iter().map(|n| n.view()).collect();
    let v = cls_loss(a.view(), p.view(), &views, cfg)?;
    Ok(MatrixLoss {
        loss: v.loss,
        scores: v.scores,
        grad_anchor: spread_rows(&v.grad_anchor, anchor.nrows()),
        grad_positive: spread_rows(&v.grad_positive, positive.nrows()),
        grad_negatives: v
            .grad_negatives
            .iter()
            .zip(negatives)
            .map(|(g, n)| spread_rows(g, n.nrows()))
            .collect(),
        converged: true,
    })
}
