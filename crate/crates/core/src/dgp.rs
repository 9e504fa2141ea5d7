//! Synthetic super-population for Monte Carlo evaluation.
//!
//! Ten independent standard-normal covariates. Treatment follows a logit
//! model on `x1..x7`, the outcome is linear in the treatment and `x4..x10`
//! with Gaussian noise:
//!
//! ```text
//! logit(p) = a0 + w*x1 + m*x2 + s*x3 + w*x4 + m*x5 + s*x6 + vs*x7
//! y        = effect*z + w*x4 + m*x5 + s*x6 + vs*x7 + w*x8 + m*x9 + s*x10 + e,  e ~ N(0, sigma)
//! ```
//!
//! The intercept `a0` is found by bisection so the mean treatment probability
//! over the generated covariates hits the requested prevalence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::propensity::logistic;
use crate::rng::{derive_seed, label, stream_rng};

pub const N_COVARIATES: usize = 10;
const CHUNK_ROWS: usize = 1 << 14;
const CACHE_MAGIC: &[u8; 8] = b"TBSPOP01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub superpop_size: usize,
    pub alpha_w: f64,
    pub alpha_m: f64,
    pub alpha_s: f64,
    pub alpha_vs: f64,
    pub sigma: f64,
    pub true_effect: f64,
    pub target_prevalence: f64,
    pub seed: u64,
    /// Bisection stops once the mean treatment probability is this close to
    /// the target.
    pub calibration_tolerance: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            superpop_size: 1_000_000,
            alpha_w: 1.25f64.ln(),
            alpha_m: 1.5f64.ln(),
            alpha_s: 1.75f64.ln(),
            alpha_vs: 2f64.ln(),
            sigma: 3.0,
            true_effect: 1.0,
            target_prevalence: 0.2,
            seed: 20_240_501,
            calibration_tolerance: 1e-3,
        }
    }
}

impl DgpConfig {
    pub fn with_prevalence(target_prevalence: f64) -> Self {
        Self {
            target_prevalence,
            ..Default::default()
        }
    }

    /// All effect coefficients set to zero.
    pub fn null(target_prevalence: f64) -> Self {
        Self {
            alpha_w: 0.0,
            alpha_m: 0.0,
            alpha_s: 0.0,
            alpha_vs: 0.0,
            target_prevalence,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 1.0) {
            return Err(Error::Config(format!(
                "target prevalence must lie in (0, 1), got {}",
                self.target_prevalence
            )));
        }
        if self.superpop_size < 2 {
            return Err(Error::Config("super population needs at least 2 rows".into()));
        }
        Ok(())
    }

    fn treatment_weights(&self) -> [f64; N_COVARIATES] {
        let (w, m, s, vs) = (self.alpha_w, self.alpha_m, self.alpha_s, self.alpha_vs);
        [w, m, s, w, m, s, vs, 0.0, 0.0, 0.0]
    }

    fn outcome_weights(&self) -> [f64; N_COVARIATES] {
        let (w, m, s, vs) = (self.alpha_w, self.alpha_m, self.alpha_s, self.alpha_vs);
        [0.0, 0.0, 0.0, w, m, s, vs, w, m, s]
    }

    /// Stable hex digest of the configuration, used as the cache key.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(12)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SuperPopulation {
    pub data: Dataset,
    pub intercept: f64,
    pub realized_prevalence: f64,
}

fn dot(w: &[f64; N_COVARIATES], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Mean of logistic(a + lp) with a fixed chunked summation order.
fn mean_probability(lp: &[f64], a: f64) -> f64 {
    let partial: Vec<f64> = lp
        .par_chunks(CHUNK_ROWS)
        .map(|c| c.iter().map(|&v| logistic(a + v)).sum::<f64>())
        .collect();
    partial.iter().sum::<f64>() / lp.len() as f64
}

/// Bisection for the intercept giving mean probability `target`.
pub fn calibrate_intercept(lp: &[f64], target: f64, tolerance: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    let mut achieved = f64::NAN;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        achieved = mean_probability(lp, mid);
        if (achieved - target).abs() <= tolerance {
            return Ok(mid);
        }
        if achieved < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration { target, achieved })
}

pub fn generate_superpopulation(cfg: &DgpConfig) -> Result<SuperPopulation> {
    cfg.validate()?;
    let n = cfg.superpop_size;
    let p = N_COVARIATES;
    let cov_seed = derive_seed(cfg.seed, &[label::DGP_COVARIATES]);
    let treat_seed = derive_seed(cfg.seed, &[label::DGP_TREATMENT]);

    let mut cov = vec![0.0; n * p];
    let mut noise = vec![0.0; n];
    cov.par_chunks_mut(CHUNK_ROWS * p)
        .zip(noise.par_chunks_mut(CHUNK_ROWS))
        .enumerate()
        .for_each(|(k, (c, e))| {
            let mut rng = stream_rng(cov_seed, k as u64);
            for (row, eps) in c.chunks_mut(p).zip(e.iter_mut()) {
                for x in row.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
                *eps = rng.sample(StandardNormal);
            }
        });

    let tw = cfg.treatment_weights();
    let lp: Vec<f64> = cov.par_chunks(p).map(|x| dot(&tw, x)).collect();
    let intercept = calibrate_intercept(&lp, cfg.target_prevalence, cfg.calibration_tolerance)?;

    let mut treatment = vec![false; n];
    treatment
        .par_chunks_mut(CHUNK_ROWS)
        .zip(lp.par_chunks(CHUNK_ROWS))
        .enumerate()
        .for_each(|(k, (z, l))| {
            let mut rng = stream_rng(treat_seed, k as u64);
            for (zi, &li) in z.iter_mut().zip(l) {
                *zi = rng.random::<f64>() < logistic(intercept + li);
            }
        });

    let ow = cfg.outcome_weights();
    let outcome: Vec<f64> = cov
        .par_chunks(p)
        .zip(treatment.par_iter())
        .zip(noise.par_iter())
        .map(|((x, &z), &e)| {
            let effect = if z { cfg.true_effect } else { 0.0 };
            effect + dot(&ow, x) + cfg.sigma * e
        })
        .collect();

    let realized = treatment.iter().filter(|&&z| z).count() as f64 / n as f64;
    Ok(SuperPopulation {
        data: Dataset::new(cov, p, treatment, outcome)?,
        intercept,
        realized_prevalence: realized,
    })
}

/// Simple random sample of `n` rows without replacement, in random order.
pub fn draw_sample(sp: &SuperPopulation, n: usize, seed: u64) -> Result<Dataset> {
    let size = sp.data.len();
    if n < 2 || n > size {
        return Err(Error::Config(format!(
            "sample size {n} out of range [2, {size}]"
        )));
    }
    let mut rng = stream_rng(derive_seed(seed, &[label::DGP_SAMPLE]), 0);
    let idx = rand::seq::index::sample(&mut rng, size, n).into_vec();
    sp.data.subset(&idx)
}

impl SuperPopulation {
    /// Binary columnar dump: header, covariate columns, treatment, outcome.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let d = &self.data;
        let (n, p) = (d.len(), d.n_covariates());
        w.write_all(CACHE_MAGIC).map_err(io)?;
        for v in [n as u64, p as u64] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in [self.intercept, self.realized_prevalence] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for j in 0..p {
            for i in 0..n {
                w.write_all(&d.covariate(i, j).to_le_bytes()).map_err(io)?;
            }
        }
        let z: Vec<u8> = d.treatment().iter().map(|&t| u8::from(t)).collect();
        w.write_all(&z).map_err(io)?;
        for y in d.outcome() {
            w.write_all(&y.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::InvalidDataset(format!(
                "{} is not a super-population cache",
                path.display()
            )));
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(b8)
        };
        let n = u64::from_le_bytes(next(&mut r)?) as usize;
        let p = u64::from_le_bytes(next(&mut r)?) as usize;
        let intercept = f64::from_le_bytes(next(&mut r)?);
        let realized = f64::from_le_bytes(next(&mut r)?);

        let mut buf = vec![0u8; n * p * 8];
        r.read_exact(&mut buf).map_err(io)?;
        let mut cov = vec![0.0; n * p];
        for (k, chunk) in buf.chunks_exact(8).enumerate() {
            let (j, i) = (k / n, k % n);
            cov[i * p + j] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        let mut z = vec![0u8; n];
        r.read_exact(&mut z).map_err(io)?;
        let mut ybuf = vec![0u8; n * 8];
        r.read_exact(&mut ybuf).map_err(io)?;
        let y = ybuf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            data: Dataset::new(cov, p, z.into_iter().map(|v| v == 1).collect(), y)?,
            intercept,
            realized_prevalence: realized,
        })
    }
}

pub fn cache_path(dir: impl AsRef<Path>, cfg: &DgpConfig) -> PathBuf {
    dir.as_ref().join(format!("superpop-{}.bin", cfg.digest()))
}

/// Loads the population from `cache_dir` when present, otherwise generates
/// and stores it.
pub fn load_or_generate(cfg: &DgpConfig, cache_dir: Option<&Path>) -> Result<SuperPopulation> {
    let Some(dir) = cache_dir else {
        return generate_superpopulation(cfg);
    };
    let path = cache_path(dir, cfg);
    if path.exists() {
        return SuperPopulation::read_cache(&path);
    }
    let sp = generate_superpopulation(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    sp.write_cache(&tmp)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(sp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(prevalence: f64) -> DgpConfig {
        DgpConfig {
            superpop_size: 50_000,
            ..DgpConfig::with_prevalence(prevalence)
        }
    }

    #[test]
    fn null_coefficients() {
        let cfg = DgpConfig {
            superpop_size: 50_000,
            ..DgpConfig::null(0.5)
        };
        let sp = generate_superpopulation(&cfg).unwrap();
        assert!(sp.intercept.abs() < 0.01);
        assert!((sp.realized_prevalence - 0.5).abs() < 0.01);
        // with no covariate effects the outcome is effect*z + noise
        let d = &sp.data;
        let (t, c) = crate::data::split_by_treatment(d);
        let mean = |ix: &[usize]| ix.iter().map(|&i| d.outcome()[i]).sum::<f64>() / ix.len() as f64;
        assert!((mean(&t) - mean(&c) - 1.0).abs() < 0.1);
    }

    #[test]
    fn prevalence_is_calibrated() {
        let sp = generate_superpopulation(&small(0.05)).unwrap();
        assert!((sp.realized_prevalence - 0.05).abs() <= 0.005);
    }

    #[test]
    fn generation_is_deterministic_across_threads() {
        let cfg = small(0.2);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| generate_superpopulation(&cfg)).unwrap();
        let b = three.install(|| generate_superpopulation(&cfg)).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.intercept, b.intercept);
    }

    #[test]
    fn draw_sample_boundaries_and_determinism() {
        let cfg = DgpConfig {
            superpop_size: 1000,
            ..DgpConfig::default()
        };
        let sp = generate_superpopulation(&cfg).unwrap();
        let all = draw_sample(&sp, 1000, 1).unwrap();
        let mut a: Vec<f64> = all.outcome().to_vec();
        let mut b: Vec<f64> = sp.data.outcome().to_vec();
        assert_ne!(a, b, "expected a permutation");
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);

        assert_eq!(draw_sample(&sp, 100, 9).unwrap(), draw_sample(&sp, 100, 9).unwrap());
        assert_ne!(draw_sample(&sp, 100, 9).unwrap(), draw_sample(&sp, 100, 10).unwrap());
        assert!(draw_sample(&sp, 1001, 1).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_superpopulation(&DgpConfig { sigma: 0.0, ..small(0.2) }).is_err());
        assert!(generate_superpopulation(&small(1.0)).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let cfg = DgpConfig {
            superpop_size: 3000,
            ..DgpConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let sp = load_or_generate(&cfg, Some(dir.path())).unwrap();
        assert!(cache_path(dir.path(), &cfg).exists());
        let again = load_or_generate(&cfg, Some(dir.path())).unwrap();
        assert_eq!(sp.data, again.data);
        assert_eq!(sp.intercept, again.intercept);
        let other = DgpConfig { seed: 1, ..cfg.clone() };
        assert_ne!(cache_path(dir.path(), &cfg), cache_path(dir.path(), &other));
    }
}
