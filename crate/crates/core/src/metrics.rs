//! Balance and simulation diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Which standard deviation divides the covariate mean differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdKind {
    /// Treated-group SD on the original sample.
    #[default]
    Treated,
    /// sqrt((s_t^2 + s_c^2) / 2) on the original sample.
    Pooled,
}

/// Per-covariate standardisation SDs, fixed from the original sample so that
/// every bootstrap replicate is measured on the same scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceScale {
    pub sd: Vec<f64>,
}

impl BalanceScale {
    pub fn from_sample(d: &Dataset, kind: SdKind) -> Self {
        let (t, c) = crate::data::split_by_treatment(d);
        let sd = (0..d.n_covariates())
            .map(|j| {
                let st = sample_sd(t.iter().map(|&i| d.covariate(i, j)));
                match kind {
                    SdKind::Treated => st,
                    SdKind::Pooled => {
                        let sc = sample_sd(c.iter().map(|&i| d.covariate(i, j)));
                        ((st * st + sc * sc) / 2.0).sqrt()
                    }
                }
            })
            .collect();
        Self { sd }
    }

    /// Covariates whose SD is zero; MASMD is undefined for these and they are
    /// left out of the maximum.
    pub fn undefined_covariates(&self) -> Vec<usize> {
        self.sd
            .iter()
            .enumerate()
            .filter(|(_, s)| !(**s > 0.0 && s.is_finite()))
            .map(|(j, _)| j)
            .collect()
    }
}

fn sample_sd(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let ss: f64 = xs.map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Maximum absolute standardised mean difference between the treated
/// occurrences and the matched controls.
pub fn masmd(d: &Dataset, treated: &[usize], controls: &[usize], scale: &BalanceScale) -> Result<f64> {
    if treated.is_empty() {
        return Err(Error::NoTreated);
    }
    if controls.is_empty() {
        return Err(Error::NoControls);
    }
    if scale.sd.len() != d.n_covariates() {
        return Err(Error::DimensionMismatch {
            expected: d.n_covariates(),
            got: scale.sd.len(),
        });
    }
    let p = d.n_covariates();
    let mut mt = vec![0.0; p];
    let mut mc = vec![0.0; p];
    for &i in treated {
        for (m, x) in mt.iter_mut().zip(d.row(i)) {
            *m += x;
        }
    }
    for &i in controls {
        for (m, x) in mc.iter_mut().zip(d.row(i)) {
            *m += x;
        }
    }
    let (nt, nc) = (treated.len() as f64, controls.len() as f64);
    Ok((0..p)
        .filter(|&j| scale.sd[j] > 0.0 && scale.sd[j].is_finite())
        .map(|j| (mt[j] / nt - mc[j] / nc).abs() / scale.sd[j])
        .fold(0.0, f64::max))
}

/// Fraction of intervals with `low <= truth <= high`. NaN for an empty list.
pub fn coverage(intervals: &[(f64, f64)], truth: f64) -> f64 {
    if intervals.is_empty() {
        return f64::NAN;
    }
    let hits = intervals
        .iter()
        .filter(|(lo, hi)| *lo <= truth && truth <= *hi)
        .count();
    hits as f64 / intervals.len() as f64
}

fn range(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Length of the common score range over the length of the combined range.
pub fn overlap_size(treated: &[f64], controls: &[f64]) -> f64 {
    if treated.is_empty() || controls.is_empty() {
        return 0.0;
    }
    let (tl, th) = range(treated);
    let (cl, ch) = range(controls);
    let lo = tl.max(cl).max(0.0);
    let hi = th.min(ch).min(1.0);
    if hi < lo {
        return 0.0;
    }
    let span = th.max(ch) - tl.min(cl);
    if span <= 0.0 {
        return 1.0;
    }
    ((hi - lo) / span).clamp(0.0, 1.0)
}

/// Mean number of controls within `caliper` of each treated score.
pub fn avg_potential_matches(treated: &[f64], controls: &[f64], caliper: f64) -> f64 {
    if treated.is_empty() {
        return 0.0;
    }
    let mut sorted = controls.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: usize = treated
        .iter()
        .map(|&s| {
            let lo = sorted.partition_point(|&c| c < s - caliper);
            let hi = sorted.partition_point(|&c| c <= s + caliper);
            (lo.saturating_sub(1)..(hi + 1).min(sorted.len()))
                .filter(|&k| (s - sorted[k]).abs() <= caliper)
                .count()
        })
        .sum();
    total as f64 / treated.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub coverage_rate: f64,
    pub avg_se: f64,
    pub avg_masmd: f64,
    pub avg_overlap: f64,
    pub avg_potential_matches: f64,
    pub n_replications: usize,
}

/// Streaming accumulator over Monte Carlo replications.
#[derive(Debug, Clone, Default)]
pub struct SummaryAccumulator {
    n: usize,
    covered: usize,
    se: f64,
    masmd: f64,
    overlap: f64,
    potential: f64,
}

impl SummaryAccumulator {
    pub fn push(&mut self, ci: (f64, f64), truth: f64, se: f64, masmd: f64, overlap: f64, potential: f64) {
        self.n += 1;
        if ci.0 <= truth && truth <= ci.1 {
            self.covered += 1;
        }
        self.se += se;
        self.masmd += masmd;
        self.overlap += overlap;
        self.potential += potential;
    }

    pub fn finish(&self) -> ScenarioSummary {
        let n = self.n.max(1) as f64;
        ScenarioSummary {
            coverage_rate: self.covered as f64 / n,
            avg_se: self.se / n,
            avg_masmd: self.masmd / n,
            avg_overlap: self.overlap / n,
            avg_potential_matches: self.potential / n,
            n_replications: self.n,
        }
    }
}
