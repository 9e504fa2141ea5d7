//! Bootstrap uncertainty for propensity-score matched treatment effects.
//!
//! The pipeline fits a logit propensity model, pair-matches controls to
//! treated units without replacement, and estimates the effect on the treated
//! as the mean within-pair outcome difference. [`bootstrap`] implements four
//! resampling schemes for its standard error, including resampling the
//! treated group alone and rematching every resample against the full control
//! group. [`dgp`], [`metrics`] and [`runner`] reproduce coverage experiments
//! on simulated and placebo data.

pub mod bootstrap;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimator;
pub mod matching;
pub mod metrics;
pub mod propensity;
pub mod rng;
pub mod runner;

pub use bootstrap::{
    paired_bootstrap, run_bootstrap, separate_bootstrap, summarize, treatment_bootstrap,
    whole_sample_bootstrap, BootstrapConfig, BootstrapMethod, BootstrapResult, Estimand,
};
pub use data::{load_dataset, split_by_treatment, Dataset, Manifest, UnitIndex};
pub use dgp::{draw_sample, generate_superpopulation, DgpConfig, SuperPopulation};
pub use error::{Error, Result};
pub use estimator::{atc_estimate, att_estimate, AttEstimate};
pub use matching::{match_pairs, match_resample, MatchAlgorithm, MatchSpec, MatchedSample, ScoredUnit};
pub use metrics::{avg_potential_matches, coverage, masmd, overlap_size, ScenarioSummary};
pub use propensity::{fit_propensity, FitOptions, PropensityModel};
