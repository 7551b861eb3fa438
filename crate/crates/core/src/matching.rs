//! Nearest neighbor matching on the linearized propensity score.
//!
//! Each treated unit is matched to its `ratio` nearest controls by absolute
//! distance on the linearized scale (ties to the lower unit index). Effects
//! are the mean over treated units of the treated outcome minus the mean of
//! its matched control outcomes; standard errors come from a seeded paired
//! bootstrap over treated units.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::propensity::PropensityModel;
use crate::seed::stream_rng;
use rand::Rng;

/// Matched controls for one treated unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Index of the treated unit.
    pub treated: usize,
    /// Indices of matched control units, nearest first.
    pub controls: Vec<usize>,
}

/// Treated-to-control match assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub ratio: usize,
    pub with_replacement: bool,
    pub caliper: Option<f64>,
    pub assignments: Vec<Assignment>,
    /// Treated units left with fewer than `ratio` controls by the caliper.
    pub short_matches: Vec<usize>,
}

impl MatchSet {
    /// How many times each unit appears as a matched control.
    pub fn control_multiplicity(&self, n_units: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_units];
        for a in &self.assignments {
            for &c in &a.controls {
                counts[c] += 1;
            }
        }
        counts
    }
}

/// Match each treated unit to its `ratio` nearest controls on the linearized
/// score. `scores` and `treatment` are per-unit and aligned; assignments use
/// unit positions.
pub fn nn_match(
    scores: &[f64],
    treatment: &[u8],
    ratio: usize,
    with_replacement: bool,
    caliper: Option<f64>,
) -> Result<MatchSet> {
    assert_eq!(scores.len(), treatment.len());
    if ratio == 0 {
        return Err(Error::InvalidConfig("matching ratio must be >= 1".into()));
    }
    let treated: Vec<usize> = (0..treatment.len()).filter(|&i| treatment[i] == 1).collect();
    let controls: Vec<usize> = (0..treatment.len()).filter(|&i| treatment[i] == 0).collect();
    if treated.is_empty() {
        return Err(Error::EmptyGroup {
            group: "treated",
            context: " in matching".into(),
        });
    }
    let needed = if with_replacement {
        ratio
    } else {
        ratio * treated.len()
    };
    if controls.len() < needed {
        return Err(Error::InsufficientControls {
            needed,
            available: controls.len(),
        });
    }

    let assignments = if with_replacement {
        match_with_replacement(scores, &treated, &controls, ratio, caliper)
    } else {
        match_without_replacement(scores, &treated, &controls, ratio, caliper)
    };
    let short_matches = assignments
        .iter()
        .filter(|a| a.controls.len() < ratio)
        .map(|a| a.treated)
        .collect();
    Ok(MatchSet {
        ratio,
        with_replacement,
        caliper,
        assignments,
        short_matches,
    })
}

fn match_with_replacement(
    scores: &[f64],
    treated: &[usize],
    controls: &[usize],
    ratio: usize,
    caliper: Option<f64>,
) -> Vec<Assignment> {
    // controls sorted by (score, index); ties in distance resolve by index
    let mut by_score: Vec<usize> = controls.to_vec();
    by_score.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let sorted_scores: Vec<f64> = by_score.iter().map(|&c| scores[c]).collect();

    treated
        .iter()
        .map(|&t| {
            let target = scores[t];
            // two-pointer walk outward from the insertion point
            let start = sorted_scores.partition_point(|&s| s < target);
            let mut left = start;
            let mut right = start;
            let m = by_score.len();
            let mut picked: Vec<usize> = Vec::with_capacity(ratio + 4);
            while picked.len() < ratio && (left > 0 || right < m) {
                let dl = if left > 0 {
                    (target - sorted_scores[left - 1]).abs()
                } else {
                    f64::INFINITY
                };
                let dr = if right < m {
                    (sorted_scores[right] - target).abs()
                } else {
                    f64::INFINITY
                };
                if dl <= dr {
                    left -= 1;
                    picked.push(left);
                } else {
                    picked.push(right);
                    right += 1;
                }
            }
            if picked.is_empty() {
                return Assignment {
                    treated: t,
                    controls: Vec::new(),
                };
            }
            // boundary distance of the provisional pick, then gather every
            // control at that distance so index ties break deterministically
            let dmax = picked
                .iter()
                .map(|&p| (sorted_scores[p] - target).abs())
                .fold(0.0f64, f64::max);
            let bound = caliper.map_or(dmax, |c| dmax.min(c));
            let lo = sorted_scores.partition_point(|&s| s < target - bound);
            let hi = sorted_scores.partition_point(|&s| s <= target + bound);
            let mut candidates: Vec<(f64, usize)> = (lo..hi)
                .map(|p| ((sorted_scores[p] - target).abs(), by_score[p]))
                .filter(|&(d, _)| caliper.map_or(true, |c| d <= c))
                .collect();
            candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            candidates.truncate(ratio);
            Assignment {
                treated: t,
                controls: candidates.into_iter().map(|(_, c)| c).collect(),
            }
        })
        .collect()
}

fn match_without_replacement(
    scores: &[f64],
    treated: &[usize],
    controls: &[usize],
    ratio: usize,
    caliper: Option<f64>,
) -> Vec<Assignment> {
    // greedy in treated index order over the shrinking control pool
    let mut available: Vec<usize> = controls.to_vec();
    treated
        .iter()
        .map(|&t| {
            let target = scores[t];
            let mut cand: Vec<(f64, usize)> = available
                .iter()
                .map(|&c| ((scores[c] - target).abs(), c))
                .filter(|&(d, _)| caliper.map_or(true, |cal| d <= cal))
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cand.truncate(ratio);
            let picked: Vec<usize> = cand.into_iter().map(|(_, c)| c).collect();
            available.retain(|c| !picked.contains(c));
            Assignment {
                treated: t,
                controls: picked,
            }
        })
        .collect()
}

/// Matched CATE with its paired-bootstrap standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CateEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Treated units contributing (those with at least one matched control).
    pub n_treated: usize,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

/// Bootstrap configuration for [`estimate_cate`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            seed: 0,
        }
    }
}

/// Effect estimate from a matched set: mean over treated units of
/// (own outcome - mean matched control outcome). The standard error is the
/// spread of that mean under resampling of treated units (paired bootstrap,
/// per-replicate seed streams, deterministic under any thread count).
pub fn estimate_cate(ds: &Dataset, ms: &MatchSet, boot: BootstrapConfig) -> Result<CateEstimate> {
    let diffs: Vec<f64> = ms
        .assignments
        .iter()
        .filter(|a| !a.controls.is_empty())
        .map(|a| {
            let control_mean =
                a.controls.iter().map(|&c| ds.outcome[c]).sum::<f64>() / a.controls.len() as f64;
            ds.outcome[a.treated] - control_mean
        })
        .collect();
    if diffs.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    let estimate = diffs.iter().sum::<f64>() / diffs.len() as f64;

    let means: Vec<f64> = (0..boot.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(boot.seed, rep as u64);
            let mut s = 0.0;
            for _ in 0..diffs.len() {
                s += diffs[rng.gen_range(0..diffs.len())];
            }
            s / diffs.len() as f64
        })
        .collect();
    let std_error = if means.len() > 1 {
        let m = means.iter().sum::<f64>() / means.len() as f64;
        (means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(CateEstimate {
        estimate,
        std_error,
        n_treated: diffs.len(),
        bootstrap_replicates: boot.replicates,
        seed: boot.seed,
    })
}

/// Normalized difference: (mean_t - mean_c) / sqrt((var_t + var_c) / 2),
/// with sample variances. The convention is recorded in report output.
pub const NORMALIZED_DIFF_FORMULA: &str =
    "(mean_treated - mean_control) / sqrt((var_treated + var_control) / 2)";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub name: String,
    /// None when the pooled variance is zero (metric undefined).
    pub before: Option<f64>,
    /// None when no match set was supplied or the metric is undefined.
    pub after: Option<f64>,
}

/// Covariate and propensity balance, before and (optionally) after matching.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceReport {
    pub formula: String,
    pub matched: bool,
    pub entries: Vec<BalanceEntry>,
}

fn mean_var(values: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64)> {
    // frequency-weighted mean and sample variance
    let pairs: Vec<(f64, f64)> = values.collect();
    let wsum: f64 = pairs.iter().map(|(_, w)| w).sum();
    if wsum <= 1.0 {
        return None;
    }
    let mean = pairs.iter().map(|(x, w)| x * w).sum::<f64>() / wsum;
    let var = pairs
        .iter()
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / (wsum - 1.0);
    Some((mean, var))
}

fn normalized_difference(
    values: &[f64],
    treated: &[usize],
    controls: &[usize],
    control_weight: Option<&[usize]>,
) -> Option<f64> {
    let (mt, vt) = mean_var(treated.iter().map(|&i| (values[i], 1.0)))?;
    let (mc, vc) = match control_weight {
        None => mean_var(controls.iter().map(|&i| (values[i], 1.0)))?,
        Some(w) => mean_var(
            controls
                .iter()
                .filter(|&&i| w[i] > 0)
                .map(|&i| (values[i], w[i] as f64)),
        )?,
    };
    let pooled = ((vt + vc) / 2.0).sqrt();
    if pooled == 0.0 {
        return None;
    }
    Some((mt - mc) / pooled)
}

/// Balance for every covariate and the linearized score. After-matching
/// metrics use the matched treated units against matched controls counted
/// with their match multiplicity.
pub fn balance(ds: &Dataset, model: &PropensityModel, ms: Option<&MatchSet>) -> BalanceReport {
    let treated = ds.treated_indices();
    let controls = ds.control_indices();
    let (matched_treated, multiplicity) = match ms {
        Some(ms) => {
            let mt: Vec<usize> = ms
                .assignments
                .iter()
                .filter(|a| !a.controls.is_empty())
                .map(|a| a.treated)
                .collect();
            (Some(mt), Some(ms.control_multiplicity(ds.n_units())))
        }
        None => (None, None),
    };

    let mut entries = Vec::with_capacity(ds.n_covariates() + 1);
    let mut push = |name: &str, values: &[f64]| {
        let before = normalized_difference(values, &treated, &controls, None);
        let after = match (&matched_treated, &multiplicity) {
            (Some(mt), Some(mult)) => normalized_difference(values, mt, &controls, Some(mult)),
            _ => None,
        };
        entries.push(BalanceEntry {
            name: name.to_string(),
            before,
            after,
        });
    };
    for col in &ds.covariates {
        push(&col.name, &col.values);
    }
    push("linearized_score", &model.linearized);

    BalanceReport {
        formula: NORMALIZED_DIFF_FORMULA.to_string(),
        matched: ms.is_some(),
        entries,
    }
}
