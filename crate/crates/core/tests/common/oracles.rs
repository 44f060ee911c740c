//! Quadratic-time reference implementations, written independently of the library.

/// 1-based rank under descending score, ties to the smaller id.
fn ranks_desc(scores: &[f64], ids: &[String]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            1 + (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
                .count()
        })
        .collect()
}

pub fn average_precision(scores: &[f64], labels: &[bool], ids: &[String]) -> f64 {
    let r = ranks_desc(scores, ids);
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    let mut total = 0.0;
    for &i in &pos {
        let hits = pos.iter().filter(|&&j| r[j] <= r[i]).count();
        total += hits as f64 / r[i] as f64;
    }
    total / pos.len() as f64
}

pub fn ndcg(scores: &[f64], labels: &[bool], ids: &[String]) -> f64 {
    let r = ranks_desc(scores, ids);
    let dcg: f64 = (0..scores.len())
        .filter(|&i| labels[i])
        .map(|i| 1.0 / ((r[i] + 1) as f64).log2())
        .sum();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let ideal: f64 = (1..=n_pos).map(|k| 1.0 / ((k + 1) as f64).log2()).sum();
    dcg / ideal
}

pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    acc += 1.0;
                } else if scores[i] == scores[j] {
                    acc += 0.5;
                }
            }
        }
    }
    acc / pairs as f64
}

fn mid_ranks(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let less = x.iter().filter(|&&v| v < x[i]).count();
            let same = x.iter().filter(|&&v| v == x[i]).count();
            less as f64 + (same as f64 + 1.0) / 2.0
        })
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&mid_ranks(x), &mid_ranks(y))
}

pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1;
            }
            if dy == 0.0 {
                ty += 1;
            }
            if dx * dy > 0.0 {
                c += 1;
            } else if dx * dy < 0.0 {
                d += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    (c - d) as f64 / (((n0 - tx) * (n0 - ty)) as f64).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Unregularised OT between equal-size uniform point sets, cost ½‖x − y‖².
/// With equal uniform weights an optimal plan is a permutation.
pub fn exact_ot(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let cost = |i: usize, j: usize| -> f64 {
        0.5 * x[i].iter().zip(&y[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}
