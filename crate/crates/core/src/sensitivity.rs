//! Per-instance linear fits of anchor similarity over edit grids, with
//! bootstrap aggregation across instances.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::jsonl;
use crate::linalg;
use crate::model::ManifestIndex;
use crate::rng;
use crate::runinfo::RunInfo;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_N_BOOT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub image_id: String,
    pub identity_change: f64,
    pub factor_change: f64,
    pub factor_name: String,
}

/// Edited images of one anchor, varying identity jointly with one other factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditGrid {
    pub anchor: String,
    pub points: Vec<GridPoint>,
}

impl EditGrid {
    pub fn factor_name(&self) -> Result<&str> {
        let first = self
            .points
            .first()
            .ok_or_else(|| Error::invalid(format!("grid of {} is empty", self.anchor)))?;
        if let Some(p) = self.points.iter().find(|p| p.factor_name != first.factor_name) {
            return Err(Error::invalid(format!(
                "grid of {} mixes factors {} and {}",
                self.anchor, first.factor_name, p.factor_name
            )));
        }
        Ok(&first.factor_name)
    }
}

pub fn load_grids(path: impl AsRef<Path>) -> Result<Vec<EditGrid>> {
    jsonl::read_jsonl(path)
}

pub fn save_grids(path: impl AsRef<Path>, grids: &[EditGrid]) -> Result<()> {
    jsonl::write_jsonl(path, grids)
}

/// Grids read off manifest edit metadata.
///
/// Every image with a `source_image_id` and an `edit_meta` entry for
/// `identity_key` or `factor_key` becomes a point of its source's grid. The
/// identity level is used as is; factor levels are divided by their largest
/// value over the whole manifest so they land in [0, 1]. Missing keys read as 0.
pub fn grids_from_manifest(
    manifest: &ManifestIndex,
    identity_key: &str,
    factor_key: &str,
) -> Vec<EditGrid> {
    let edited: Vec<_> = manifest
        .iter()
        .filter(|r| r.source_image_id.is_some())
        .filter(|r| r.edit_level(identity_key).is_some() || r.edit_level(factor_key).is_some())
        .collect();
    let max_factor = edited
        .iter()
        .filter_map(|r| r.edit_level(factor_key))
        .fold(0.0f64, f64::max);
    let mut by_anchor: BTreeMap<&str, Vec<GridPoint>> = BTreeMap::new();
    for r in edited {
        let f = r.edit_level(factor_key).unwrap_or(0.0);
        by_anchor
            .entry(r.source_image_id.as_deref().unwrap())
            .or_default()
            .push(GridPoint {
                image_id: r.image_id.clone(),
                identity_change: r.edit_level(identity_key).unwrap_or(0.0),
                factor_change: if max_factor > 0.0 { f / max_factor } else { f },
                factor_name: factor_key.to_string(),
            });
    }
    by_anchor
        .into_iter()
        .map(|(a, points)| EditGrid {
            anchor: a.to_string(),
            points,
        })
        .collect()
}

/// `sim = beta0 + beta1 * factor + beta2 * identity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub r2: f64,
}

impl LinearFit {
    pub fn factor_sensitivity(&self) -> f64 {
        -self.beta1
    }

    pub fn identity_sensitivity(&self) -> f64 {
        -self.beta2
    }
}

/// Ordinary least squares with intercept over `(identity, factor, sim)` triples.
///
/// R² is 0 when the similarities have no variance.
pub fn fit_points(points: &[(f64, f64, f64)]) -> Result<LinearFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::SingularDesign(format!("{n} points for 3 coefficients")));
    }
    let x = Array2::from_shape_fn((n, 3), |(i, j)| match j {
        0 => 1.0,
        1 => points[i].1,
        _ => points[i].0,
    });
    let y: Array1<f64> = points.iter().map(|p| p.2).collect();
    let b = linalg::least_squares(x.view(), y.view())?;
    let mean = y.sum() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let resid = &y - &x.dot(&b);
    let ssr = resid.dot(&resid);
    let r2 = if sst == 0.0 {
        0.0
    } else {
        (1.0 - ssr / sst).clamp(0.0, 1.0)
    };
    Ok(LinearFit {
        beta0: b[0],
        beta1: b[1],
        beta2: b[2],
        r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFit {
    pub anchor: String,
    pub factor_name: String,
    pub n_points: usize,
    #[serde(flatten)]
    pub fit: LinearFit,
}

/// Fit one grid against its anchor. The anchor itself enters as the point
/// (0, 0) unless the grid already has one there.
pub fn fit_instance(grid: &EditGrid, scorer: &Scorer) -> Result<InstanceFit> {
    let factor = grid.factor_name()?;
    let mut pts = grid
        .points
        .iter()
        .map(|p| {
            Ok((
                p.identity_change,
                p.factor_change,
                scorer.similarity(&grid.anchor, &p.image_id)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    if !pts.iter().any(|p| p.0 == 0.0 && p.1 == 0.0) {
        pts.push((0.0, 0.0, scorer.similarity(&grid.anchor, &grid.anchor)?));
    }
    let fit = fit_points(&pts).map_err(|e| match e {
        Error::SingularDesign(m) => Error::SingularDesign(format!("grid of {}: {m}", grid.anchor)),
        other => other,
    })?;
    Ok(InstanceFit {
        anchor: grid.anchor.clone(),
        factor_name: factor.to_string(),
        n_points: pts.len(),
        fit,
    })
}

pub fn fit_all(grids: &[EditGrid], scorer: &Scorer) -> Result<Vec<InstanceFit>> {
    grids.par_iter().map(|g| fit_instance(g, scorer)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapStat {
    /// Plain mean over instances.
    pub mean: f64,
    pub boot_mean: f64,
    pub boot_std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorAggregate {
    pub n_instances: usize,
    pub factor: BootstrapStat,
    pub identity: BootstrapStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub schema_version: u32,
    pub n_boot: usize,
    pub seed: u64,
    pub instances: Vec<InstanceFit>,
    pub factors: BTreeMap<String, FactorAggregate>,
    pub config_hash: String,
    pub tool_version: String,
}

impl SensitivityReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(values: &[f64], draws: &[Vec<usize>]) -> BootstrapStat {
    let means: Vec<f64> = draws
        .iter()
        .map(|d| d.iter().map(|&i| values[i]).sum::<f64>() / d.len() as f64)
        .collect();
    let k = means.len() as f64;
    let c = means[0];
    let d_mean = means.iter().map(|m| m - c).sum::<f64>() / k;
    let boot_mean = c + d_mean;
    let var = (means.iter().map(|m| (m - c - d_mean).powi(2)).sum::<f64>() / k).max(0.0);
    let mut sorted = means;
    sorted.sort_by(f64::total_cmp);
    BootstrapStat {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        boot_mean,
        boot_std: var.sqrt(),
        ci_low: percentile(&sorted, 0.025),
        ci_high: percentile(&sorted, 0.975),
    }
}

/// Bootstrap the mean sensitivity of each factor over instances.
///
/// Instances are sorted by anchor before resampling, and resample `b` draws
/// from its own random stream, so the result depends only on the seed.
pub fn bootstrap_aggregate(
    fits: &[InstanceFit],
    n_boot: usize,
    seed: u64,
    run: &RunInfo,
) -> Result<SensitivityReport> {
    if n_boot == 0 {
        return Err(Error::invalid("n_boot must be positive"));
    }
    let mut instances = fits.to_vec();
    instances.sort_by(|a, b| {
        (&a.factor_name, &a.anchor)
            .cmp(&(&b.factor_name, &b.anchor))
            .then(a.fit.beta0.total_cmp(&b.fit.beta0))
    });
    let mut groups: BTreeMap<&str, Vec<&InstanceFit>> = BTreeMap::new();
    for f in &instances {
        groups.entry(&f.factor_name).or_default().push(f);
    }
    if groups.is_empty() {
        return Err(Error::invalid("no instance fits to aggregate"));
    }
    let mut factors = BTreeMap::new();
    for (name, group) in &groups {
        let n = group.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "factor {name} has {n} instance(s), bootstrap needs at least 2"
            )));
        }
        let base = rng::label_stream(&format!("bootstrap:{seed}:{name}"));
        let draws: Vec<Vec<usize>> = (0..n_boot as u64)
            .into_par_iter()
            .map(|b| {
                let mut r = rng::stream(base, b);
                (0..n).map(|_| r.random_range(0..n)).collect()
            })
            .collect();
        let fac: Vec<f64> = group.iter().map(|f| f.fit.factor_sensitivity()).collect();
        let idn: Vec<f64> = group.iter().map(|f| f.fit.identity_sensitivity()).collect();
        factors.insert(
            name.to_string(),
            FactorAggregate {
                n_instances: n,
                factor: summarize(&fac, &draws),
                identity: summarize(&idn, &draws),
            },
        );
    }
    Ok(SensitivityReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_boot,
        seed,
        instances,
        factors,
        config_hash: run.config_hash.clone(),
        tool_version: run.tool_version.clone(),
    })
}

/// Fit every grid, then bootstrap per factor.
pub fn analyze(
    grids: &[EditGrid],
    scorer: &Scorer,
    n_boot: usize,
    seed: u64,
    run: &RunInfo,
) -> Result<SensitivityReport> {
    bootstrap_aggregate(&fit_all(grids, scorer)?, n_boot, seed, run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendAxis {
    Factor,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub level: f64,
    pub mean_similarity: f64,
    pub count: usize,
}

/// Mean anchor similarity at each level of one axis, over grids of `factor_name`.
pub fn similarity_trend(
    grids: &[EditGrid],
    scorer: &Scorer,
    factor_name: &str,
    axis: TrendAxis,
) -> Result<Vec<TrendPoint>> {
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for g in grids {
        for p in g.points.iter().filter(|p| p.factor_name == factor_name) {
            let level = match axis {
                TrendAxis::Factor => p.factor_change,
                TrendAxis::Identity => p.identity_change,
            };
            samples.push((level, scorer.similarity(&g.anchor, &p.image_id)?));
        }
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!("no grid points for factor {factor_name}")));
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<TrendPoint> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for (level, s) in samples {
        match out.last_mut() {
            Some(t) if t.level == level => {
                t.count += 1;
                *sums.last_mut().unwrap() += s;
            }
            _ => {
                out.push(TrendPoint {
                    level,
                    mean_similarity: 0.0,
                    count: 1,
                });
                sums.push(s);
            }
        }
    }
    for (t, s) in out.iter_mut().zip(sums) {
        t.mean_similarity = s / t.count as f64;
    }
    Ok(out)
}

pub fn trend_csv(points: &[TrendPoint]) -> String {
    let mut s = String::from("level,mean_similarity,count\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.level, p.mean_similarity, p.count));
    }
    s
}
