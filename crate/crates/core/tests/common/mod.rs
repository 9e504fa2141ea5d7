//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use treatboot::matching::quantized_distance;
use treatboot::Dataset;

/// Exhaustive optimum: (max number of pairs, min total quantized cost among
/// assignments of that size). Every treated unit is either dropped or gets a
/// distinct control within the caliper.
pub fn brute_force_matching(t: &[f64], c: &[f64], caliper: f64) -> (usize, i64) {
    #[allow(clippy::too_many_arguments)]
    fn rec(k: usize, t: &[f64], c: &[f64], caliper: f64, used: &mut [bool], pairs: usize, cost: i64, best: &mut (usize, i64)) {
        if k == t.len() {
            if pairs > best.0 || (pairs == best.0 && cost < best.1) {
                *best = (pairs, cost);
            }
            return;
        }
        rec(k + 1, t, c, caliper, used, pairs, cost, best);
        for j in 0..c.len() {
            if !used[j] && (t[k] - c[j]).abs() <= caliper {
                used[j] = true;
                rec(k + 1, t, c, caliper, used, pairs + 1, cost + quantized_distance(t[k], c[j]), best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, i64::MAX);
    rec(0, t, c, caliper, &mut vec![false; c.len()], 0, 0, &mut best);
    if best.0 == 0 {
        best.1 = 0;
    }
    best
}

/// Bernoulli log-likelihood of a logit model, written out directly.
pub fn logit_loglik(x: &[Vec<f64>], z: &[bool], beta: &[f64]) -> f64 {
    x.iter()
        .zip(z)
        .map(|(row, &zi)| {
            let eta = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-eta).exp());
            if zi {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

/// Coarse-to-fine grid search over the parameter box [-8, 8]^k.
pub fn grid_search_loglik(x: &[Vec<f64>], z: &[bool]) -> (f64, Vec<f64>) {
    let k = x[0].len() + 1;
    let mut center = vec![0.0; k];
    let mut half = 8.0;
    let steps = 16i64;
    let mut best = (logit_loglik(x, z, &center), center.clone());
    for _ in 0..12 {
        let total = (2 * steps + 1).pow(k as u32);
        for idx in 0..total {
            let mut rem = idx;
            let beta: Vec<f64> = (0..k)
                .map(|j| {
                    let s = rem % (2 * steps + 1) - steps;
                    rem /= 2 * steps + 1;
                    center[j] + half * s as f64 / steps as f64
                })
                .collect();
            let ll = logit_loglik(x, z, &beta);
            if ll > best.0 {
                best = (ll, beta);
            }
        }
        center = best.1.clone();
        half /= 4.0;
    }
    best
}

/// Central finite-difference gradient of `f` at `at`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|j| {
            let mut up = at.to_vec();
            let mut dn = at.to_vec();
            up[j] += h;
            dn[j] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Small logit dataset with `n` rows and `p` standard-normal covariates.
pub fn random_logit_data(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let beta: Vec<f64> = (0..=p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let z: Vec<bool> = x
            .iter()
            .map(|r| {
                let eta = beta[0] + r.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
                rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())
            })
            .collect();
        let nt = z.iter().filter(|&&t| t).count();
        if nt >= 2 && nt <= n - 2 {
            return (x, z);
        }
    }
}

pub fn to_dataset(x: &[Vec<f64>], z: &[bool]) -> Dataset {
    Dataset::from_rows(x, z.to_vec(), vec![0.0; x.len()]).unwrap()
}

/// Ordinary least squares with an intercept; returns [intercept, slopes...]
/// and the residual standard deviation.
pub fn ols(columns: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let n = y.len();
    let k = columns.len() + 1;
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        row[0] = 1.0;
        for (j, c) in columns.iter().enumerate() {
            row[j + 1] = c[i];
        }
        for a in 0..k {
            xty[a] += row[a] * y[i];
            for b in 0..k {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    let beta = xtx.cholesky().expect("full rank design").solve(&xty);
    let rss: f64 = (0..n)
        .map(|i| {
            let fit = beta[0] + columns.iter().enumerate().map(|(j, c)| beta[j + 1] * c[i]).sum::<f64>();
            (y[i] - fit).powi(2)
        })
        .sum();
    (beta.iter().copied().collect(), (rss / (n - k) as f64).sqrt())
}

/// Control-only data whose outcome is a linear covariate signal plus noise.
pub fn placebo_population(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 3;
    let mut cov = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        y.push(1.5 * x[0] - 0.8 * x[1] + 0.3 * x[2] + 2.0 * noise);
        cov.extend(x);
    }
    Dataset::new(cov, p, vec![false; n], y).unwrap()
}
