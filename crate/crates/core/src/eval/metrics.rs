//! Rank-based metrics.
//!
//! Tie policy: rankings order by descending score, then ascending item id;
//! ROC-AUC counts tied positive/negative pairs as ½; Spearman uses average
//! ranks; Kendall is τ_b.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One gallery item as seen by a single query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub score: f64,
    pub relevant: bool,
}

impl ScoredItem {
    pub fn new(id: impl Into<String>, score: f64, relevant: bool) -> Self {
        Self {
            id: id.into(),
            score,
            relevant,
        }
    }
}

fn check_scores(items: &[ScoredItem]) -> Result<()> {
    if items.iter().any(|it| !it.score.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

/// Descending score, ties by ascending id.
pub fn ranking_order(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

/// Items sorted into ranking order.
pub fn rank(items: &[ScoredItem]) -> Result<Vec<&ScoredItem>> {
    check_scores(items)?;
    let mut v: Vec<&ScoredItem> = items.iter().collect();
    v.sort_by(|a, b| ranking_order(a, b));
    Ok(v)
}

/// Mean over relevant items of precision at that item's rank.
pub fn average_precision(items: &[ScoredItem]) -> Result<f64> {
    let ranked = rank(items)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, it) in ranked.iter().enumerate() {
        if it.relevant {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Undefined("average precision with no relevant items".into()));
    }
    Ok(sum / hits as f64)
}

/// Mann–Whitney ROC-AUC: `P(score⁺ > score⁻) + ½ P(score⁺ = score⁻)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("ROC-AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let n_pos_f = n_pos as f64;
    Ok((r_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// nDCG over the full ranking with binary gains and `1 / log2(rank + 1)` discount.
pub fn ndcg(items: &[ScoredItem]) -> Result<f64> {
    let ranked = rank(items)?;
    let n_rel = items.iter().filter(|it| it.relevant).count();
    if n_rel == 0 {
        return Err(Error::Undefined("nDCG with no relevant items".into()));
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .enumerate()
        .filter(|(_, it)| it.relevant)
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=n_rel).map(discount).sum();
    Ok(dcg / ideal)
}

/// A triplet counts as correct only when the positive is strictly more similar.
pub fn triplet_correct(sim_pos: f64, sim_neg: f64) -> bool {
    sim_pos > sim_neg
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // positions i..j (0-based) share ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn check_pairs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape("correlation inputs differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two observations"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("correlation inputs must be finite"));
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall's τ_b in O(n log n) (Knight's merge-sort algorithm).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    let n = x.len();
    let pairs = |t: u64| t * (t.saturating_sub(1)) / 2;

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .unwrap_or(Ordering::Equal)
            .then(y[a].partial_cmp(&y[b]).unwrap_or(Ordering::Equal))
    });

    // ties in x, and joint ties in (x, y)
    let (mut tx, mut txy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in 1..n {
        let (a, b) = (idx[w - 1], idx[w]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                txy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            tx += pairs(run_x);
            txy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    tx += pairs(run_x);
    txy += pairs(run_xy);

    // sort by y counting inversions (discordant pairs)
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys);

    let mut ty = 0u64;
    let mut run_y = 1u64;
    for w in 1..n {
        if ys[w] == ys[w - 1] {
            run_y += 1;
        } else {
            ty += pairs(run_y);
            run_y = 1;
        }
    }
    ty += pairs(run_y);

    let n0 = pairs(n as u64);
    let denom = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Undefined("Kendall tau with zero variance".into()));
    }
    let num = n0 as f64 - tx as f64 - ty as f64 + txy as f64 - 2.0 * swaps as f64;
    Ok((num / denom).clamp(-1.0, 1.0))
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}
