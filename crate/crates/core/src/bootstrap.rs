//! Bootstrap standard errors for matched ATT estimates.
//!
//! Four resampling schemes share one pipeline: fit the propensity model on the
//! sample, match, estimate, then repeat the match-and-estimate step on
//! resamples drawn according to [`BootstrapMethod`]:
//!
//! * `Treatment` resamples only the treated group (same size, with
//!   replacement) and rematches every resample against the full control
//!   group.
//! * `Separate` resamples treated and control groups independently and
//!   rematches within the replicate.
//! * `Paired` resamples the pairs matched once on the sample; there is no
//!   rematching.
//! * `WholeSample` resamples all rows together, so group sizes float.
//!
//! Replicate `b` draws from its own counter-addressed stream, so results are
//! bit-identical for any number of worker threads.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_by_treatment, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{att_estimate, AttEstimate};
use crate::matching::{match_pairs, match_resample, scored, MatchSpec, MatchedSample, ScoredUnit};
use crate::metrics::{masmd, BalanceScale, SdKind};
use crate::propensity::{fit_propensity_with, FitOptions, PropensityModel};
use crate::rng::{derive_seed, label, stream_rng};

/// Normal quantile used for the 95% interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMethod {
    #[default]
    Treatment,
    Separate,
    Paired,
    WholeSample,
}

impl BootstrapMethod {
    pub const ALL: [BootstrapMethod; 4] = [
        BootstrapMethod::Treatment,
        BootstrapMethod::Separate,
        BootstrapMethod::Paired,
        BootstrapMethod::WholeSample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BootstrapMethod::Treatment => "treatment",
            BootstrapMethod::Separate => "separate",
            BootstrapMethod::Paired => "paired",
            BootstrapMethod::WholeSample => "whole_sample",
        }
    }

    fn stream_label(self) -> u64 {
        match self {
            BootstrapMethod::Treatment => 0,
            BootstrapMethod::Separate => 1,
            BootstrapMethod::Paired => 2,
            BootstrapMethod::WholeSample => 3,
        }
    }
}

impl std::str::FromStr for BootstrapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "treatment" => Ok(BootstrapMethod::Treatment),
            "separate" => Ok(BootstrapMethod::Separate),
            "paired" => Ok(BootstrapMethod::Paired),
            "whole_sample" | "whole" | "sample" => Ok(BootstrapMethod::WholeSample),
            other => Err(Error::Config(format!("unknown bootstrap method '{other}'"))),
        }
    }
}

impl std::fmt::Display for BootstrapMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Effect on the treated, or on the controls (resampling the control group).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    #[default]
    Att,
    Atc,
}

fn default_replicates() -> usize {
    500
}

fn default_failure_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    #[serde(default)]
    pub method: BootstrapMethod,
    #[serde(default = "default_replicates", rename = "B", alias = "replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub refit_propensity: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub match_spec: MatchSpec,
    /// Abort when more than this fraction of replicates fail.
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
    #[serde(default)]
    pub sd_kind: SdKind,
    #[serde(default)]
    pub estimand: Estimand,
    #[serde(default)]
    pub fit: FitOptions,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            method: BootstrapMethod::Treatment,
            replicates: default_replicates(),
            refit_propensity: false,
            seed: 0,
            match_spec: MatchSpec::default(),
            max_failure_fraction: default_failure_fraction(),
            sd_kind: SdKind::Treated,
            estimand: Estimand::Att,
            fit: FitOptions::default(),
        }
    }
}

impl BootstrapConfig {
    pub fn new(method: BootstrapMethod, replicates: usize, seed: u64) -> Self {
        Self {
            method,
            replicates,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("B must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config(format!(
                "max_failure_fraction must lie in [0, 1], got {}",
                self.max_failure_fraction
            )));
        }
        self.match_spec.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub method: BootstrapMethod,
    /// One value per successful replicate, in replicate order.
    pub replicate_atts: Vec<f64>,
    pub point_estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub replicate_masmd: Vec<f64>,
    pub n_failed: usize,
    pub n_pairs: usize,
    pub n_dropped: usize,
}

impl BootstrapResult {
    pub fn mean_masmd(&self) -> f64 {
        if self.replicate_masmd.is_empty() {
            return f64::NAN;
        }
        self.replicate_masmd.iter().sum::<f64>() / self.replicate_masmd.len() as f64
    }

    pub fn traps(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// Single-column CSV of the replicate estimates.
    pub fn write_replicates_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<replicates>", e);
        writeln!(w, "replicate_att").map_err(io)?;
        for v in &self.replicate_atts {
            writeln!(w, "{v:?}").map_err(io)?;
        }
        Ok(())
    }
}

/// Standard error and normal 95% interval of replicate estimates around
/// the sample estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// `se = sqrt(mean((t_b - point)^2))`, interval `point ± 1.96 se`.
pub fn summarize(replicates: &[f64], point: f64) -> Result<Interval> {
    if replicates.len() < 2 {
        return Err(Error::TooFew {
            what: "successful replicates",
            needed: 2,
            got: replicates.len(),
        });
    }
    let ss: f64 = replicates.iter().map(|t| (t - point) * (t - point)).sum();
    let se = (ss / replicates.len() as f64).sqrt();
    Ok(Interval {
        se,
        ci_low: point - Z_95 * se,
        ci_high: point + Z_95 * se,
    })
}

/// Sample-level state shared by every bootstrap method: the fitted
/// propensity model, the sample matching and its estimate.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    data: Dataset,
    pub model: PropensityModel,
    pub treated: Vec<usize>,
    pub controls: Vec<usize>,
    pub matched: MatchedSample,
    pub point: AttEstimate,
    pub scale: BalanceScale,
    /// MASMD of `matched`.
    pub matched_masmd: f64,
    negate: bool,
}

/// Fits the propensity model, matches the sample and computes its estimate.
pub fn prepare(d: &Dataset, cfg: &BootstrapConfig) -> Result<PreparedSample> {
    cfg.validate()?;
    let (data, negate) = match cfg.estimand {
        Estimand::Att => (d.clone(), false),
        Estimand::Atc => (
            d.with_treatment(d.treatment().iter().map(|z| !z).collect())?,
            true,
        ),
    };
    let model = fit_propensity_with(&data, &cfg.fit)?;
    prepare_with_model(data, model, cfg, negate)
}

/// Like [`prepare`] but reuses an already fitted model (ATT only).
pub fn prepare_with(d: &Dataset, model: PropensityModel, cfg: &BootstrapConfig) -> Result<PreparedSample> {
    cfg.validate()?;
    if model.scores.len() != d.len() {
        return Err(Error::DimensionMismatch {
            expected: d.len(),
            got: model.scores.len(),
        });
    }
    prepare_with_model(d.clone(), model, cfg, false)
}

fn prepare_with_model(
    data: Dataset,
    model: PropensityModel,
    cfg: &BootstrapConfig,
    negate: bool,
) -> Result<PreparedSample> {
    data.require_both_groups()?;
    let (treated, controls) = split_by_treatment(&data);
    let matched = match_pairs(
        &scored(&treated, &model.scores),
        &scored(&controls, &model.scores),
        &cfg.match_spec,
    )?;
    let point = att_estimate(&data, &matched)?;
    let scale = BalanceScale::from_sample(&data, cfg.sd_kind);
    let matched_masmd = masmd(
        &data,
        &matched.treated_units().collect::<Vec<_>>(),
        &matched.control_units().collect::<Vec<_>>(),
        &scale,
    )?;
    Ok(PreparedSample {
        data,
        model,
        treated,
        controls,
        matched,
        point,
        scale,
        matched_masmd,
        negate,
    })
}

struct Replicate {
    att: f64,
    masmd: f64,
}

fn is_replicate_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NoFeasibleMatches | Error::NoTreated | Error::NoControls | Error::EmptyPairs
    )
}

impl PreparedSample {
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Point estimate on the sample, in the configured estimand's sign.
    pub fn point_estimate(&self) -> f64 {
        if self.negate {
            -self.point.value
        } else {
            self.point.value
        }
    }

    pub fn treated_scores(&self) -> Vec<f64> {
        self.treated.iter().map(|&i| self.model.scores[i]).collect()
    }

    pub fn control_scores(&self) -> Vec<f64> {
        self.controls.iter().map(|&i| self.model.scores[i]).collect()
    }

    /// MASMD of the sample matching.
    pub fn sample_masmd(&self) -> f64 {
        self.matched_masmd
    }

    pub fn run(&self, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
        cfg.validate()?;
        if cfg.method == BootstrapMethod::Paired && self.matched.n_pairs() < 2 {
            return Err(Error::TooFew {
                what: "matched pairs",
                needed: 2,
                got: self.matched.n_pairs(),
            });
        }
        let base = derive_seed(cfg.seed, &[label::BOOTSTRAP, cfg.method.stream_label()]);
        let outcomes: Vec<Result<Option<Replicate>>> = (0..cfg.replicates)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream_rng(base, b as u64);
                match self.replicate(cfg, &mut rng) {
                    Ok(r) => Ok(Some(r)),
                    Err(e) if is_replicate_failure(&e) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();

        let mut atts = Vec::with_capacity(cfg.replicates);
        let mut masmds = Vec::with_capacity(cfg.replicates);
        let mut n_failed = 0;
        for r in outcomes {
            match r? {
                Some(rep) => {
                    atts.push(if self.negate { -rep.att } else { rep.att });
                    masmds.push(rep.masmd);
                }
                None => n_failed += 1,
            }
        }
        let limit = (cfg.max_failure_fraction * cfg.replicates as f64).floor() as usize;
        if n_failed > limit {
            return Err(Error::TooManyFailures {
                failed: n_failed,
                total: cfg.replicates,
                limit,
            });
        }
        let point = self.point_estimate();
        let iv = summarize(&atts, point)?;
        Ok(BootstrapResult {
            method: cfg.method,
            replicate_atts: atts,
            point_estimate: point,
            se: iv.se,
            ci_low: iv.ci_low,
            ci_high: iv.ci_high,
            replicate_masmd: masmds,
            n_failed,
            n_pairs: self.point.n_pairs,
            n_dropped: self.point.n_dropped,
        })
    }

    fn replicate<R: Rng>(&self, cfg: &BootstrapConfig, rng: &mut R) -> Result<Replicate> {
        match cfg.method {
            BootstrapMethod::Treatment => {
                let t = draw(&self.treated, self.treated.len(), rng);
                self.rematch(cfg, &t, &self.controls)
            }
            BootstrapMethod::Separate => {
                let t = draw(&self.treated, self.treated.len(), rng);
                let c = draw(&self.controls, self.controls.len(), rng);
                self.rematch(cfg, &t, &c)
            }
            BootstrapMethod::WholeSample => {
                let n = self.data.len();
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let (t, c): (Vec<usize>, Vec<usize>) =
                    rows.into_iter().partition(|&i| self.data.is_treated(i));
                if t.is_empty() {
                    return Err(Error::NoTreated);
                }
                if c.is_empty() {
                    return Err(Error::NoControls);
                }
                self.rematch(cfg, &t, &c)
            }
            // No rematching: every replicate reuses the sample matching, so
            // its balance is that matching's balance.
            BootstrapMethod::Paired => {
                let pairs = &self.matched.pairs;
                let k = pairs.len();
                let y = self.data.outcome();
                let sum: f64 = (0..k)
                    .map(|_| {
                        let p = pairs[rng.random_range(0..k)];
                        y[p.treated.0] - y[p.control.0]
                    })
                    .sum();
                Ok(Replicate {
                    att: sum / k as f64,
                    masmd: self.matched_masmd,
                })
            }
        }
    }

    /// Matches resampled treated occurrences `t` against control occurrences `c`.
    fn rematch(&self, cfg: &BootstrapConfig, t: &[usize], c: &[usize]) -> Result<Replicate> {
        let (tu, cu): (Vec<ScoredUnit>, Vec<ScoredUnit>) = if cfg.refit_propensity {
            let rows: Vec<usize> = t.iter().chain(c).copied().collect();
            let sub = self.data.subset(&rows)?;
            let model = fit_propensity_with(&sub, &cfg.fit)?;
            let units = |ids: &[usize], offset: usize| -> Vec<ScoredUnit> {
                ids.iter()
                    .enumerate()
                    .map(|(k, &i)| ScoredUnit::new(i, model.scores[offset + k]))
                    .collect()
            };
            (units(t, 0), units(c, t.len()))
        } else {
            (scored(t, &self.model.scores), scored(c, &self.model.scores))
        };
        let m = match_resample(&tu, &cu, &cfg.match_spec)?;
        let att = att_estimate(&self.data, &m)?.value;
        let mt: Vec<usize> = m.treated_units().collect();
        let mc: Vec<usize> = m.control_units().collect();
        Ok(Replicate {
            att,
            masmd: masmd(&self.data, &mt, &mc, &self.scale)?,
        })
    }
}

fn draw<R: Rng>(from: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| from[rng.random_range(0..from.len())]).collect()
}

/// Runs the configured bootstrap method end to end.
pub fn run_bootstrap(d: &Dataset, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    prepare(d, cfg)?.run(cfg)
}

fn with_method(cfg: &BootstrapConfig, method: BootstrapMethod) -> BootstrapConfig {
    BootstrapConfig {
        method,
        ..cfg.clone()
    }
}

/// Resample the treated group only; rematch each resample to the full
/// control group.
pub fn treatment_bootstrap(d: &Dataset, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    run_bootstrap(d, &with_method(cfg, BootstrapMethod::Treatment))
}

pub fn separate_bootstrap(d: &Dataset, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    run_bootstrap(d, &with_method(cfg, BootstrapMethod::Separate))
}

pub fn paired_bootstrap(d: &Dataset, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    run_bootstrap(d, &with_method(cfg, BootstrapMethod::Paired))
}

pub fn whole_sample_bootstrap(d: &Dataset, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    run_bootstrap(d, &with_method(cfg, BootstrapMethod::WholeSample))
}
