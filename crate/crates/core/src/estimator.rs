//! Matched-sample treatment effect estimates.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matching::MatchedSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttEstimate {
    pub value: f64,
    pub n_pairs: usize,
    pub n_dropped: usize,
}

/// Mean within-pair outcome difference, treated minus control.
///
/// A treated unit listed several times (bootstrap resamples) counts once per
/// occurrence.
pub fn att_estimate(d: &Dataset, m: &MatchedSample) -> Result<AttEstimate> {
    if m.pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let y = d.outcome();
    for p in &m.pairs {
        for i in [p.treated.0, p.control.0] {
            if i >= d.len() {
                return Err(Error::InvalidDataset(format!(
                    "unit index {i} out of range for {} rows",
                    d.len()
                )));
            }
        }
    }
    let sum: f64 = m.pairs.iter().map(|p| y[p.treated.0] - y[p.control.0]).sum();
    Ok(AttEstimate {
        value: sum / m.pairs.len() as f64,
        n_pairs: m.pairs.len(),
        n_dropped: m.dropped_treated.len(),
    })
}

/// Effect on the controls. `m` must be built with roles exchanged: its
/// `treated` side holds control units and its `control` side holds the
/// treated units they were matched to. The sign stays treated minus control.
pub fn atc_estimate(d: &Dataset, m: &MatchedSample) -> Result<AttEstimate> {
    let est = att_estimate(d, m)?;
    Ok(AttEstimate {
        value: -est.value,
        ..est
    })
}
