//! Experiment orchestration: the Monte Carlo scenario grid, the placebo
//! experiment and single-dataset runs.
//!
//! Every random draw is addressed by a seed derived from the plan seed and
//! the task's coordinates (scenario, replication, method), so outputs are a
//! pure function of the plan regardless of the worker count. Replications are
//! processed in fixed-size chunks and folded into running aggregates, which
//! keeps memory independent of the number of replications.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::{prepare, prepare_with, BootstrapConfig, BootstrapMethod, BootstrapResult};
use crate::data::{load_dataset, Dataset, Manifest};
use crate::dgp::{draw_sample, load_or_generate, DgpConfig};
use crate::error::{Error, Result};
use crate::estimator::att_estimate;
use crate::matching::{match_pairs, scored, MatchSpec};
use crate::metrics::{avg_potential_matches, overlap_size, ScenarioSummary, SummaryAccumulator};
use crate::propensity::{fit_propensity_with, FitOptions};
use crate::rng::{derive_seed, label, stream_rng};

/// Environment variable holding the worker-thread count for the CLI.
pub const WORKERS_ENV: &str = "TREATBOOT_WORKERS";

/// Replications evaluated concurrently before their rows are flushed.
const REPLICATION_CHUNK: usize = 32;

fn default_methods() -> Vec<BootstrapMethod> {
    BootstrapMethod::ALL.to_vec()
}

fn default_mc() -> usize {
    500
}

fn default_b() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub prevalences: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<BootstrapMethod>,
    #[serde(default = "default_mc")]
    pub mc_replications: usize,
    #[serde(default = "default_b", rename = "B", alias = "replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Base data-generating configuration; `target_prevalence` is replaced
    /// by each scenario's prevalence.
    #[serde(default)]
    pub dgp: DgpConfig,
    #[serde(default)]
    pub match_spec: MatchSpec,
    #[serde(default)]
    pub refit_propensity: bool,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.prevalences.is_empty() || self.sample_sizes.is_empty() || self.methods.is_empty() {
            return Err(Error::Config(
                "prevalences, sample_sizes and methods must be non-empty".into(),
            ));
        }
        if self.mc_replications == 0 {
            return Err(Error::Config("mc_replications must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("B must be at least 1".into()));
        }
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n > self.dgp.superpop_size) {
            return Err(Error::Config(format!(
                "sample size {n} exceeds super population size {}",
                self.dgp.superpop_size
            )));
        }
        self.match_spec.validate()
    }

    /// Digest of every field that influences results.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("plan serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            o.remove("cache_dir");
        }
        hex_digest(v.to_string().as_bytes())
    }

    fn bootstrap_config(&self, method: BootstrapMethod, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            method,
            replicates: self.replicates,
            refit_propensity: self.refit_propensity,
            seed,
            match_spec: self.match_spec,
            ..Default::default()
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(12)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: BootstrapMethod,
    pub prevalence: f64,
    pub n: usize,
    #[serde(flatten)]
    pub summary: ScenarioSummary,
}

/// Per-replication record for one method.
#[derive(Debug, Clone, PartialEq)]
struct ReplicationRow {
    replication: usize,
    outcome: std::result::Result<RepValues, &'static str>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RepValues {
    point: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
    masmd: f64,
    overlap: f64,
    potential: f64,
    n_failed: usize,
    n_pairs: usize,
    n_dropped: usize,
}

const REPLICATION_HEADER: &str =
    "replication,point_estimate,se,ci_low,ci_high,covered,avg_masmd,overlap,potential_matches,n_failed_replicates,n_pairs,n_dropped,error\n";

impl ReplicationRow {
    fn csv_line(&self, truth: f64) -> String {
        match &self.outcome {
            Ok(v) => format!(
                "{},{:?},{:?},{:?},{:?},{},{:?},{:?},{:?},{},{},{},\n",
                self.replication,
                v.point,
                v.se,
                v.ci_low,
                v.ci_high,
                u8::from(v.ci_low <= truth && truth <= v.ci_high),
                v.masmd,
                v.overlap,
                v.potential,
                v.n_failed,
                v.n_pairs,
                v.n_dropped
            ),
            Err(kind) => format!("{},,,,,,,,,,,,{kind}\n", self.replication),
        }
    }
}

fn scenario_tag(prevalence: f64, n: usize) -> String {
    format!("p{prevalence}_n{n}")
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioMarker {
    plan_digest: String,
    rows: Vec<SummaryRow>,
}

/// Runs every replication of one scenario for all plan methods, one
/// replication per task. Returns rows per method in plan order.
fn run_replication(
    plan: &ExperimentPlan,
    sp: &crate::dgp::SuperPopulation,
    n: usize,
    scenario_seed: u64,
    replication: usize,
) -> Vec<ReplicationRow> {
    let rep_seed = derive_seed(scenario_seed, &[replication as u64]);
    let fail = |kind: &'static str| {
        plan.methods
            .iter()
            .map(|_| ReplicationRow {
                replication,
                outcome: Err(kind),
            })
            .collect::<Vec<_>>()
    };
    let sample = match draw_sample(sp, n, rep_seed) {
        Ok(s) => s,
        Err(e) => return fail(e.kind()),
    };
    let model = match sample
        .require_both_groups()
        .and_then(|_| fit_propensity_with(&sample, &FitOptions::default()))
    {
        Ok(m) => m,
        Err(e) => return fail(e.kind()),
    };
    let base_cfg = plan.bootstrap_config(BootstrapMethod::Treatment, rep_seed);
    let prepared = match prepare_with(&sample, model, &base_cfg) {
        Ok(p) => p,
        Err(e) => return fail(e.kind()),
    };
    let ts = prepared.treated_scores();
    let cs = prepared.control_scores();
    let overlap = overlap_size(&ts, &cs);
    let potential = avg_potential_matches(&ts, &cs, plan.match_spec.caliper);

    plan.methods
        .iter()
        .map(|&method| {
            let cfg = plan.bootstrap_config(method, rep_seed);
            let outcome = prepared
                .run(&cfg)
                .map(|r| RepValues {
                    point: r.point_estimate,
                    se: r.se,
                    ci_low: r.ci_low,
                    ci_high: r.ci_high,
                    masmd: r.mean_masmd(),
                    overlap,
                    potential,
                    n_failed: r.n_failed,
                    n_pairs: r.n_pairs,
                    n_dropped: r.n_dropped,
                })
                .map_err(|e| e.kind());
            ReplicationRow {
                replication,
                outcome,
            }
        })
        .collect()
}

/// Runs the scenario grid, writing
///
/// * `scenarios/<method>_p<prev>_n<size>.csv`: one row per replication,
/// * `scenarios/p<prev>_n<size>.done`: resume marker with the scenario summary,
/// * `summary.csv`, `plot_data.csv` and `manifest.json`.
///
/// Scenarios with a marker from the same plan are not recomputed.
pub fn run_grid(plan: &ExperimentPlan) -> Result<Vec<SummaryRow>> {
    plan.validate()?;
    let scen_dir = plan.output_dir.join("scenarios");
    fs::create_dir_all(&scen_dir).map_err(|e| Error::io(&scen_dir, e))?;
    let digest = plan.digest();
    let truth = plan.dgp.true_effect;

    let mut all_rows = Vec::new();
    for (pi, &prevalence) in plan.prevalences.iter().enumerate() {
        let mut pending = Vec::new();
        for &n in &plan.sample_sizes {
            let marker = scen_dir.join(format!("{}.done", scenario_tag(prevalence, n)));
            match read_json::<ScenarioMarker>(&marker) {
                Ok(m) if m.plan_digest == digest => all_rows.push((pi, n, m.rows)),
                _ => pending.push(n),
            }
        }
        if pending.is_empty() {
            continue;
        }
        let dgp = DgpConfig {
            target_prevalence: prevalence,
            ..plan.dgp.clone()
        };
        let sp = load_or_generate(&dgp, plan.cache_dir.as_deref())?;

        for n in pending {
            let tag = scenario_tag(prevalence, n);
            let scenario_seed = derive_seed(plan.seed, &[label::GRID, prevalence.to_bits(), n as u64]);
            let mut writers = plan
                .methods
                .iter()
                .map(|m| {
                    let path = scen_dir.join(format!("{}_{tag}.csv", m.name()));
                    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    let mut w = BufWriter::new(f);
                    w.write_all(REPLICATION_HEADER.as_bytes())
                        .map_err(|e| Error::io(&path, e))?;
                    Ok((path, w))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut accs = vec![SummaryAccumulator::default(); plan.methods.len()];

            let mut start = 0;
            while start < plan.mc_replications {
                let end = (start + REPLICATION_CHUNK).min(plan.mc_replications);
                let chunk: Vec<Vec<ReplicationRow>> = (start..end)
                    .into_par_iter()
                    .map(|r| run_replication(plan, &sp, n, scenario_seed, r))
                    .collect();
                for rows in chunk {
                    for (k, row) in rows.into_iter().enumerate() {
                        let (path, w) = &mut writers[k];
                        w.write_all(row.csv_line(truth).as_bytes())
                            .map_err(|e| Error::io(&*path, e))?;
                        if let Ok(v) = row.outcome {
                            accs[k].push((v.ci_low, v.ci_high), truth, v.se, v.masmd, v.overlap, v.potential);
                        }
                    }
                }
                for (path, w) in &mut writers {
                    w.flush().map_err(|e| Error::io(&*path, e))?;
                }
                start = end;
            }

            let rows: Vec<SummaryRow> = plan
                .methods
                .iter()
                .zip(&accs)
                .map(|(&method, acc)| SummaryRow {
                    method,
                    prevalence,
                    n,
                    summary: acc.finish(),
                })
                .collect();
            let marker = ScenarioMarker {
                plan_digest: digest.clone(),
                rows: rows.clone(),
            };
            write_atomic(
                &scen_dir.join(format!("{tag}.done")),
                &serde_json::to_vec_pretty(&marker)?,
            )?;
            all_rows.push((pi, n, rows));
        }
    }

    // Plan order: prevalence, then sample size, then method.
    let size_pos = |n: usize| plan.sample_sizes.iter().position(|&s| s == n).unwrap_or(usize::MAX);
    all_rows.sort_by_key(|(pi, n, _)| (*pi, size_pos(*n)));
    let summary: Vec<SummaryRow> = all_rows.into_iter().flat_map(|(_, _, r)| r).collect();

    write_atomic(&plan.output_dir.join("summary.csv"), summary_csv(&summary).as_bytes())?;
    write_atomic(&plan.output_dir.join("plot_data.csv"), plot_data_csv(&summary).as_bytes())?;
    let manifest = serde_json::json!({
        "plan": plan,
        "plan_digest": digest,
        "seed": plan.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "scenarios": plan.prevalences.iter().flat_map(|&p| plan.sample_sizes.iter().map(move |&n| {
            serde_json::json!({
                "prevalence": p,
                "n": n,
                "seed": derive_seed(plan.seed, &[label::GRID, p.to_bits(), n as u64]),
            })
        })).collect::<Vec<_>>(),
    });
    write_atomic(
        &plan.output_dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(summary)
}

/// Summary table with columns
/// `method,prevalence,n,coverage,avg_se,avg_masmd,avg_overlap,avg_potential_matches,n_replications`.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method,prevalence,n,coverage,avg_se,avg_masmd,avg_overlap,avg_potential_matches,n_replications\n",
    );
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{:?},{},{:?},{:?},{:?},{:?},{:?},{}",
            r.method,
            r.prevalence,
            r.n,
            s.coverage_rate,
            s.avg_se,
            s.avg_masmd,
            s.avg_overlap,
            s.avg_potential_matches,
            s.n_replications
        );
    }
    out
}

/// Long-format table: one row per (method, scenario, metric).
pub fn plot_data_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method,prevalence,n,metric,value\n");
    for r in rows {
        let s = &r.summary;
        for (metric, value) in [
            ("coverage", s.coverage_rate),
            ("avg_se", s.avg_se),
            ("avg_masmd", s.avg_masmd),
            ("avg_overlap", s.avg_overlap),
            ("avg_potential_matches", s.avg_potential_matches),
        ] {
            let _ = writeln!(out, "{},{:?},{},{metric},{value:?}", r.method, r.prevalence, r.n);
        }
    }
    out
}

fn default_n_treated() -> usize {
    175
}

fn default_assignments() -> usize {
    1000
}

fn default_runs() -> usize {
    100
}

/// Column manifest given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestSource {
    Inline(Manifest),
    Path(PathBuf),
}

impl ManifestSource {
    pub fn resolve(&self) -> Result<Manifest> {
        match self {
            ManifestSource::Inline(m) => Ok(m.clone()),
            ManifestSource::Path(p) => Manifest::from_path(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboPlan {
    pub dataset: PathBuf,
    pub manifest: ManifestSource,
    #[serde(default = "default_n_treated")]
    pub n_treated: usize,
    #[serde(default = "default_assignments")]
    pub n_assignments: usize,
    #[serde(default = "default_runs")]
    pub n_bootstrap_runs: usize,
    #[serde(default = "default_b", rename = "B", alias = "replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub match_spec: MatchSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl PlaceboPlan {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRun {
    pub assignment: usize,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub traps_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboReport {
    pub n_rows: usize,
    pub n_treated: usize,
    pub n_assignments: usize,
    /// Assignments whose sample matching failed.
    pub n_failed_assignments: usize,
    pub att_mean: f64,
    pub att_sd: f64,
    /// `att_sd / sqrt(successful assignments)`
    pub att_mean_se: f64,
    pub n_bootstrap_runs: usize,
    pub n_trapped: usize,
    pub runs: Vec<PlaceboRun>,
    /// Placebo estimate per assignment (NaN when matching failed).
    #[serde(skip)]
    pub atts: Vec<f64>,
}

impl PlaceboReport {
    pub fn trap_rate(&self) -> f64 {
        self.n_trapped as f64 / self.runs.len().max(1) as f64
    }
}

/// Loads the plan's dataset and runs [`run_placebo_on`].
pub fn run_placebo(plan: &PlaceboPlan) -> Result<PlaceboReport> {
    let d = load_dataset(&plan.dataset, &plan.manifest.resolve()?)?;
    let report = run_placebo_on(&d, plan)?;
    if let Some(dir) = &plan.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("placebo_report.json"), &serde_json::to_vec_pretty(&report)?)?;
        let mut atts = String::from("assignment,att\n");
        for (a, v) in report.atts.iter().enumerate() {
            let _ = writeln!(atts, "{a},{v:?}");
        }
        write_atomic(&dir.join("placebo_atts.csv"), atts.as_bytes())?;
        let mut runs = String::from("assignment,estimate,se,ci_low,ci_high,traps_zero\n");
        for r in &report.runs {
            let _ = writeln!(
                runs,
                "{},{:?},{:?},{:?},{:?},{}",
                r.assignment,
                r.estimate,
                r.se,
                r.ci_low,
                r.ci_high,
                u8::from(r.traps_zero)
            );
        }
        write_atomic(&dir.join("placebo_runs.csv"), runs.as_bytes())?;
    }
    Ok(report)
}

fn placebo_assignment(d: &Dataset, plan: &PlaceboPlan, a: usize) -> Result<Dataset> {
    let mut rng = stream_rng(derive_seed(plan.seed, &[label::PLACEBO, 0]), a as u64);
    let mut z = vec![false; d.len()];
    for i in index::sample(&mut rng, d.len(), plan.n_treated) {
        z[i] = true;
    }
    d.with_treatment(z)
}

/// Placebo experiment on control-only data: randomly label `n_treated` rows
/// as treated `n_assignments` times, estimate the (null) effect on each, and
/// run the treatment-group bootstrap on `n_bootstrap_runs` of them chosen at
/// random, recording whether each interval covers zero. Any treatment column
/// in `d` is ignored.
pub fn run_placebo_on(d: &Dataset, plan: &PlaceboPlan) -> Result<PlaceboReport> {
    if plan.n_treated == 0 || plan.n_treated >= d.len() {
        return Err(Error::Config(format!(
            "n_treated must lie in [1, {}), got {}",
            d.len(),
            plan.n_treated
        )));
    }
    if plan.n_assignments == 0 || plan.n_bootstrap_runs > plan.n_assignments {
        return Err(Error::Config(
            "need n_assignments >= 1 and n_bootstrap_runs <= n_assignments".into(),
        ));
    }
    plan.match_spec.validate()?;

    let atts: Vec<f64> = (0..plan.n_assignments)
        .into_par_iter()
        .map(|a| -> Result<f64> {
            let da = placebo_assignment(d, plan, a)?;
            let model = fit_propensity_with(&da, &FitOptions::default())?;
            let (t, c) = crate::data::split_by_treatment(&da);
            match match_pairs(&scored(&t, &model.scores), &scored(&c, &model.scores), &plan.match_spec) {
                Ok(m) => Ok(att_estimate(&da, &m)?.value),
                Err(Error::NoFeasibleMatches) => Ok(f64::NAN),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let ok: Vec<f64> = atts.iter().copied().filter(|v| v.is_finite()).collect();
    let k = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / k;
    let sd = if ok.len() > 1 {
        (ok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };

    let mut pick_rng = stream_rng(derive_seed(plan.seed, &[label::PLACEBO, 1]), 0);
    let mut chosen = index::sample(&mut pick_rng, plan.n_assignments, plan.n_bootstrap_runs).into_vec();
    chosen.sort_unstable();

    let runs: Vec<PlaceboRun> = chosen
        .into_iter()
        .map(|a| -> Result<PlaceboRun> {
            let da = placebo_assignment(d, plan, a)?;
            let cfg = BootstrapConfig {
                method: BootstrapMethod::Treatment,
                replicates: plan.replicates,
                seed: derive_seed(plan.seed, &[label::PLACEBO, 2, a as u64]),
                match_spec: plan.match_spec,
                ..Default::default()
            };
            let r = prepare(&da, &cfg)?.run(&cfg)?;
            Ok(PlaceboRun {
                assignment: a,
                estimate: r.point_estimate,
                se: r.se,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
                traps_zero: r.traps(0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PlaceboReport {
        n_rows: d.len(),
        n_treated: plan.n_treated,
        n_assignments: plan.n_assignments,
        n_failed_assignments: atts.len() - ok.len(),
        att_mean: mean,
        att_sd: sd,
        att_mean_se: sd / k.sqrt(),
        n_bootstrap_runs: runs.len(),
        n_trapped: runs.iter().filter(|r| r.traps_zero).count(),
        runs,
        atts,
    })
}

/// Full pipeline on one dataset file.
pub fn run_single(
    data: impl AsRef<Path>,
    manifest: &Manifest,
    method: BootstrapMethod,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let d = load_dataset(data, manifest)?;
    let cfg = BootstrapConfig::new(method, replicates, seed);
    prepare(&d, &cfg)?.run(&cfg)
}

/// Runs `f` on a dedicated pool of `workers` threads (the global pool when
/// `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Worker count from [`WORKERS_ENV`], if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan(dir: &Path) -> ExperimentPlan {
        ExperimentPlan {
            prevalences: vec![0.2],
            sample_sizes: vec![300],
            methods: vec![BootstrapMethod::Treatment],
            mc_replications: 2,
            replicates: 20,
            seed: 5,
            output_dir: dir.to_path_buf(),
            dgp: DgpConfig {
                superpop_size: 20_000,
                ..Default::default()
            },
            match_spec: MatchSpec::default(),
            refit_propensity: false,
            cache_dir: None,
        }
    }

    #[test]
    fn minimal_plan_gives_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let rows = run_grid(&tiny_plan(dir.path())).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].summary.n_replications, 2);
        for f in ["summary.csv", "plot_data.csv", "manifest.json", "scenarios/treatment_p0.2_n300.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let per_rep = fs::read_to_string(dir.path().join("scenarios/treatment_p0.2_n300.csv")).unwrap();
        assert_eq!(per_rep.lines().count(), 3);
    }

    #[test]
    fn rerun_is_byte_identical_and_resume_matches() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(a.path());
        plan.sample_sizes = vec![200, 300];
        run_grid(&plan).unwrap();
        let first = fs::read(a.path().join("summary.csv")).unwrap();

        // Fresh directory, different worker count.
        let plan_b = ExperimentPlan {
            output_dir: b.path().to_path_buf(),
            ..plan.clone()
        };
        with_workers(Some(3), || run_grid(&plan_b)).unwrap().unwrap();
        assert_eq!(first, fs::read(b.path().join("summary.csv")).unwrap());

        // Simulate an interruption after the first scenario.
        fs::remove_file(b.path().join("scenarios/p0.2_n300.done")).unwrap();
        fs::remove_file(b.path().join("summary.csv")).unwrap();
        run_grid(&plan_b).unwrap();
        assert_eq!(first, fs::read(b.path().join("summary.csv")).unwrap());
        assert_eq!(
            fs::read(a.path().join("scenarios/treatment_p0.2_n300.csv")).unwrap(),
            fs::read(b.path().join("scenarios/treatment_p0.2_n300.csv")).unwrap()
        );
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(dir.path());
        plan.methods.clear();
        assert!(run_grid(&plan).is_err());
        let mut plan = tiny_plan(dir.path());
        plan.mc_replications = 0;
        assert!(run_grid(&plan).is_err());
    }

    #[test]
    fn plan_json_defaults() {
        let plan: ExperimentPlan = serde_json::from_str(
            r#"{"prevalences":[0.1],"sample_sizes":[500],"output_dir":"out","B":50}"#,
        )
        .unwrap();
        assert_eq!(plan.methods.len(), 4);
        assert_eq!(plan.mc_replications, 500);
        assert_eq!(plan.replicates, 50);
        assert_eq!(plan.dgp.superpop_size, 1_000_000);
    }

    fn constant_outcome_data(n: usize) -> Dataset {
        let cov: Vec<f64> = (0..n).map(|i| (i % 17) as f64 / 17.0).collect();
        Dataset::new(cov, 1, vec![false; n], vec![2.0; n]).unwrap()
    }

    fn placebo_plan() -> PlaceboPlan {
        PlaceboPlan {
            dataset: PathBuf::new(),
            manifest: ManifestSource::Inline(Manifest {
                treatment: None,
                outcome: "y".into(),
                covariates: vec!["x".into()],
            }),
            n_treated: 20,
            n_assignments: 10,
            n_bootstrap_runs: 3,
            replicates: 20,
            seed: 1,
            match_spec: MatchSpec::default(),
            output_dir: None,
        }
    }

    #[test]
    fn placebo_constant_outcomes() {
        let d = constant_outcome_data(400);
        let r = run_placebo_on(&d, &placebo_plan()).unwrap();
        assert!(r.atts.iter().all(|&v| v == 0.0));
        assert_eq!(r.n_trapped, 3);
        assert_eq!(r.runs.len(), 3);
    }

    #[test]
    fn placebo_manifest_inline_or_path() {
        let p: PlaceboPlan = serde_json::from_str(
            r#"{"dataset":"d.csv","manifest":{"outcome":"y","covariates":["a"]}}"#,
        )
        .unwrap();
        assert!(matches!(p.manifest, ManifestSource::Inline(_)));
        assert_eq!(p.n_treated, 175);
        let p: PlaceboPlan = serde_json::from_str(r#"{"dataset":"d.csv","manifest":"m.json"}"#).unwrap();
        assert_eq!(p.manifest, ManifestSource::Path("m.json".into()));
    }

    #[test]
    fn placebo_rejects_bad_sizes() {
        let d = constant_outcome_data(20);
        assert!(run_placebo_on(&d, &placebo_plan()).is_err());
    }
}
