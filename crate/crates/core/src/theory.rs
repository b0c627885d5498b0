//! Monte-Carlo checks of majority voting with correlated voter errors.
//!
//! Voters err with probability `epsilon` and pairwise latent correlation
//! `rho` through the same copula as the transcriber simulator. For `N`
//! voters with Bernoulli error correlation `r`, the mean error rate has
//! variance `epsilon (1 - epsilon) / N * (1 + (N - 1) r)`, which makes the
//! ensemble equivalent to `N / (1 + (N - 1) r)` independent voters.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::par::*;
use crate::rng;
use crate::transcriber::Copula;

/// Trials per independently seeded chunk.
const CHUNK: usize = 4096;
const TAG_TRIALS: u64 = 0x7415;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VoteModel {
    pub epsilon: f64,
    pub rho: f64,
    pub n_voters: usize,
    pub trials: usize,
    pub seed: u64,
}

impl VoteModel {
    pub fn new(epsilon: f64, rho: f64, n_voters: usize, trials: usize, seed: u64) -> Self {
        Self {
            epsilon,
            rho,
            n_voters,
            trials,
            seed,
        }
    }

    /// Distance of the error rate below one half.
    pub fn margin(&self) -> f64 {
        0.5 - self.epsilon
    }
}

pub fn effective_sample_size(n: usize, rho: f64) -> f64 {
    n as f64 / (1.0 + (n as f64 - 1.0) * rho)
}

/// Closed-form variance of the mean error indicator.
pub fn variance_of_mean(epsilon: f64, rho: f64, n: usize) -> f64 {
    epsilon * (1.0 - epsilon) / n as f64 * (1.0 + (n as f64 - 1.0) * rho)
}

pub fn analytic_variance(model: &VoteModel) -> f64 {
    variance_of_mean(model.epsilon, model.rho, model.n_voters)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Pearson correlation of two copula error indicators, by quadrature over
/// the shared latent.
pub fn copula_bernoulli_correlation(epsilon: f64, rho: f64) -> f64 {
    if epsilon <= 0.0 || epsilon >= 1.0 {
        return 0.0;
    }
    if rho >= 1.0 {
        return 1.0;
    }
    let threshold = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * epsilon);
    let (a, b, intervals) = (-10.0, 10.0, 4000);
    let h = (b - a) / intervals as f64;
    let integrand = |z: f64| {
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let p = std_normal_cdf((threshold - rho.sqrt() * z) / (1.0 - rho).sqrt());
        density * p * p
    };
    let mut sum = integrand(a) + integrand(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * integrand(a + i as f64 * h);
    }
    let both = sum * h / 3.0;
    (both - epsilon * epsilon) / (epsilon * (1.0 - epsilon))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MajorityStats {
    /// Sample variance of the per-trial mean error.
    pub var_empirical: f64,
    /// Monte-Carlo standard error of `var_empirical`.
    pub var_se: f64,
    /// Fraction of trials where at least half the voters erred.
    pub failure_rate: f64,
    pub failure_se: f64,
    pub eps_empirical: f64,
    /// Pooled pairwise correlation of the error indicators; `None` when
    /// undefined (one voter, or no variation).
    pub rho_empirical: Option<f64>,
    /// `histogram[s]` = number of trials with exactly `s` erring voters.
    pub histogram: Vec<u64>,
}

fn chunk_histogram(model: &VoteModel, copula: &Copula, chunk: usize) -> Vec<u64> {
    let start = chunk * CHUNK;
    let len = CHUNK.min(model.trials - start);
    let mut stream = rng::stream(&[model.seed, TAG_TRIALS, chunk as u64]);
    let mut hist = vec![0u64; model.n_voters + 1];
    for _ in 0..len {
        let common: f64 = StandardNormal.sample(&mut stream);
        let mut errors = 0;
        for _ in 0..model.n_voters {
            let own: f64 = StandardNormal.sample(&mut stream);
            errors += usize::from(copula.is_error(common, own));
        }
        hist[errors] += 1;
    }
    hist
}

/// Empirical variance of the mean error and majority failure rate.
///
/// Ties (exactly half the voters wrong) count as failures. Trials are split
/// into fixed chunks with their own streams, so the result does not depend
/// on the number of worker threads.
pub fn simulate_majority_error(model: &VoteModel) -> MajorityStats {
    assert!(
        model.trials >= 1 && model.n_voters >= 1,
        "need at least one trial and one voter"
    );
    let copula = Copula::new(model.epsilon, model.rho);
    let chunks = model.trials.div_ceil(CHUNK);
    let partial: Vec<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|c| chunk_histogram(model, &copula, c))
        .collect();
    let mut histogram = vec![0u64; model.n_voters + 1];
    for h in &partial {
        for (acc, v) in histogram.iter_mut().zip(h) {
            *acc += v;
        }
    }
    stats_from_histogram(&histogram)
}

fn stats_from_histogram(histogram: &[u64]) -> MajorityStats {
    let n = (histogram.len() - 1) as f64;
    let trials: u64 = histogram.iter().sum();
    let t = trials as f64;
    let weighted = |f: &dyn Fn(f64) -> f64| -> f64 {
        histogram
            .iter()
            .enumerate()
            .map(|(s, &c)| c as f64 * f(s as f64))
            .sum::<f64>()
    };
    let mean = weighted(&|s| s / n) / t;
    let m2 = weighted(&|s| (s / n - mean).powi(2)) / t;
    let m4 = weighted(&|s| (s / n - mean).powi(4)) / t;
    let var_empirical = if trials > 1 { m2 * t / (t - 1.0) } else { 0.0 };
    let var_se = ((m4 - m2 * m2).max(0.0) / t).sqrt();

    let failures: u64 = histogram
        .iter()
        .enumerate()
        .filter(|(s, _)| 2 * s >= histogram.len() - 1)
        .map(|(_, &c)| c)
        .sum();
    let failure_rate = failures as f64 / t;
    let failure_se = (failure_rate * (1.0 - failure_rate) / t).sqrt();

    let rho_empirical = if n >= 2.0 && mean > 0.0 && mean < 1.0 {
        let both = weighted(&|s| s * (s - 1.0)) / (t * n * (n - 1.0));
        Some((both - mean * mean) / (mean * (1.0 - mean)))
    } else {
        None
    };
    MajorityStats {
        var_empirical,
        var_se,
        failure_rate,
        failure_se,
        eps_empirical: mean,
        rho_empirical,
        histogram: histogram.to_vec(),
    }
}

/// One row of the `simulate` sweep output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub rho_param: f64,
    pub rho_empirical: Option<f64>,
    pub n: usize,
    pub n_eff: f64,
    pub var_analytic: f64,
    pub var_empirical: f64,
    pub failure_rate: f64,
}

/// Runs every (epsilon, rho, N) combination. The analytic columns use the
/// measured Bernoulli correlation when it is defined.
pub fn sweep(epsilons: &[f64], rhos: &[f64], ns: &[usize], trials: usize, seed: u64) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &epsilon in epsilons {
        for &rho in rhos {
            for &n in ns {
                let cell_seed = rng::key(&[seed, epsilon.to_bits(), rho.to_bits(), n as u64]);
                let stats = simulate_majority_error(&VoteModel::new(epsilon, rho, n, trials, cell_seed));
                let r = stats.rho_empirical.unwrap_or(rho);
                rows.push(SweepRow {
                    epsilon,
                    rho_param: rho,
                    rho_empirical: stats.rho_empirical,
                    n,
                    n_eff: effective_sample_size(n, r),
                    var_analytic: variance_of_mean(epsilon, r, n),
                    var_empirical: stats.var_empirical,
                    failure_rate: stats.failure_rate,
                });
            }
        }
    }
    rows
}
