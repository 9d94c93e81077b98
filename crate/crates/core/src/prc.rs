//! Probability of a random correspondence (PRC).
//!
//! Conditional on the finger effects and on the number `Y00` of the `w`
//! observed matches that pair genuine minutiae on both prints, the PRC is
//! the Poisson tail `P(S >= Y00)` with `S ~ Poisson(m1 m2 exp(2 beta0 + b1 + b2))`.
//! The unconditional PRC averages that tail over `b1, b2 ~ N(0, sigma^2)`
//! and `Y00 ~ Binomial(w, p00)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::bayes::PosteriorSamples;
use crate::model::{type_probs_unchecked, QualityScheme, Tau};
use crate::rng::stream;
use crate::{par, Error, Result};

pub const DEFAULT_MC_DRAWS: usize = 100_000;
pub const DEFAULT_ALPHA: f64 = 0.001;
/// Poisson rates above this are outside the model's regime.
pub const MAX_RATE: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrcQuery {
    pub w: u32,
    pub m1: u32,
    pub m2: u32,
    pub q1: f64,
    pub q2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrcReport {
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub mc_draws: usize,
    pub r_samples: usize,
}

/// Monte Carlo estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrcEstimate {
    pub value: f64,
    pub se: f64,
}

/// `P(S >= k)` for `S ~ Poisson(lambda)`.
pub fn poisson_upper_tail(k: u64, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Numerical(format!("invalid Poisson rate {lambda}")));
    }
    if lambda > MAX_RATE {
        return Err(Error::Numerical(format!("Poisson rate {lambda:.3e} exceeds {MAX_RATE:e}")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let ln_lambda = lambda.ln();
    let log_pmf = |j: u64| -lambda + j as f64 * ln_lambda - ln_gamma(j as f64 + 1.0);
    if (k as f64) <= lambda {
        // The tail is at least about one half here, so the complement is safe.
        let mut below = 0.0;
        for j in 0..k {
            below += log_pmf(j).exp();
        }
        Ok((1.0 - below).clamp(0.0, 1.0))
    } else {
        let mut term = log_pmf(k).exp();
        let mut sum = term;
        let mut j = k;
        loop {
            let ratio = lambda / (j + 1) as f64;
            term *= ratio;
            sum += term;
            j += 1;
            // Terms fall geometrically beyond the mode, which bounds the rest.
            if term * ratio / (1.0 - ratio) <= 1e-16 * sum || term == 0.0 {
                break;
            }
        }
        Ok(sum.min(1.0))
    }
}

/// Conditional PRC `P(S >= y00)` with rate `m1 m2 exp(2 beta0 + b1 + b2)`.
pub fn prc_star(y00: u64, b1: f64, b2: f64, m1: u32, m2: u32, beta0: f64) -> Result<f64> {
    if m1 == 0 || m2 == 0 {
        return Err(Error::input("minutia counts must be positive"));
    }
    let lambda = m1 as f64 * m2 as f64 * (2.0 * beta0 + b1 + b2).exp();
    poisson_upper_tail(y00, lambda)
}

fn check_query(q: &PrcQuery, tau: &Tau, scheme: &QualityScheme) -> Result<()> {
    tau.check(scheme)?;
    scheme.check_quality(q.q1)?;
    scheme.check_quality(q.q2)?;
    if q.m1 == 0 || q.m2 == 0 {
        return Err(Error::input("minutia counts must be positive"));
    }
    Ok(())
}

/// `p00` for the query, identical for `(q1, q2)` and `(q2, q1)`.
pub fn genuine_fraction(tau: &Tau, q1: f64, q2: f64, scheme: &QualityScheme) -> f64 {
    type_probs_unchecked(&tau.fixed.theta, tau.fixed.beta0, q1, q2, scheme)[0]
}

/// Binomial CDF table `P(Y00 <= k)`, `k = 0..=w`.
fn binomial_cdf(w: u32, p: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(w as usize + 1);
    let mut acc = 0.0;
    for k in 0..=w {
        acc += binomial_pmf(k, w, p);
        out.push(acc);
    }
    out
}

fn binomial_pmf(k: u32, w: u32, p: f64) -> f64 {
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == w { 1.0 } else { 0.0 };
    }
    let (k, n) = (k as f64, w as f64);
    (ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0) + k * p.ln() + (n - k) * (1.0 - p).ln()).exp()
}

/// Draws per work chunk; each chunk is summed in order before the chunks
/// are combined.
const CHUNK: usize = 4096;

/// Monte Carlo estimate of the unconditional PRC at `tau`.
///
/// Draw `j` uses its own stream `(seed, j)`: two normals for the finger
/// effects, then one uniform mapped through the `Binomial(w, p00)` inverse
/// CDF. The same draws are therefore shared across `w`, across `(q1, q2)`
/// and `(q2, q1)`, and across parameter values, which makes the estimate
/// exactly nonincreasing in `w`.
pub fn prc_unconditional(query: &PrcQuery, tau: &Tau, scheme: &QualityScheme, mc_draws: usize, seed: u64) -> Result<PrcEstimate> {
    check_query(query, tau, scheme)?;
    if mc_draws == 0 {
        return Err(Error::Config("Monte Carlo draws must be positive".into()));
    }
    if query.w == 0 {
        return Ok(PrcEstimate { value: 1.0, se: 0.0 });
    }
    let p00 = genuine_fraction(tau, query.q1, query.q2, scheme);
    let cdf = binomial_cdf(query.w, p00);
    let sigma = tau.sigma2().sqrt();
    let beta0 = tau.fixed.beta0;
    let n_chunks = mc_draws.div_ceil(CHUNK);
    let chunks = par::map_range(n_chunks, |c| -> Result<(f64, f64)> {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(mc_draws);
        let mut s = 0.0;
        let mut s2 = 0.0;
        for j in lo..hi {
            let mut rng = stream(seed, j as u64);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let k = cdf.partition_point(|c| *c < u).min(query.w as usize) as u64;
            let v = prc_star(k, sigma * z1, sigma * z2, query.m1, query.m2, beta0)?;
            s += v;
            s2 += v * v;
        }
        Ok((s, s2))
    });
    let mut s = 0.0;
    let mut s2 = 0.0;
    for c in chunks {
        let (a, b) = c?;
        s += a;
        s2 += b;
    }
    let n = mc_draws as f64;
    let mean = s / n;
    let var = if mc_draws > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    // The (q1,q2) and (q2,q1) evaluations share p00 and every random
    // number, so their average is the single evaluation above.
    Ok(PrcEstimate { value: mean, se: (var / n).sqrt() })
}

/// Gauss–Hermite nodes and weights (physicists' convention) by the
/// Golub–Welsch eigenvalue method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { ((i.max(j)) as f64 / 2.0).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|k| (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Unconditional PRC by quadrature: exact sum over `Y00` and Gauss–Hermite
/// integration over `b1 + b2 ~ N(0, 2 sigma^2)`.
pub fn prc_quadrature(query: &PrcQuery, tau: &Tau, scheme: &QualityScheme, nodes: usize) -> Result<f64> {
    check_query(query, tau, scheme)?;
    if query.w == 0 {
        return Ok(1.0);
    }
    let p00 = genuine_fraction(tau, query.q1, query.q2, scheme);
    let pmf: Vec<f64> = (0..=query.w).map(|k| binomial_pmf(k, query.w, p00)).collect();
    let sd_sum = (2.0 * tau.sigma2()).sqrt();
    let (x, wts) = gauss_hermite(nodes.max(1));
    let mut total = 0.0;
    for (xi, wi) in x.iter().zip(&wts) {
        let s = std::f64::consts::SQRT_2 * sd_sum * xi;
        let mut inner = 0.0;
        for (k, pk) in pmf.iter().enumerate() {
            inner += pk * prc_star(k as u64, s, 0.0, query.m1, query.m2, tau.fixed.beta0)?;
        }
        total += wi * inner;
    }
    Ok(total / std::f64::consts::PI.sqrt())
}

/// PRC with the finger effects fixed at zero, by exact enumeration over `Y00`.
pub fn prc_no_random_effect(query: &PrcQuery, tau: &Tau, scheme: &QualityScheme) -> Result<f64> {
    check_query(query, tau, scheme)?;
    let p00 = genuine_fraction(tau, query.q1, query.q2, scheme);
    let mut total = 0.0;
    for k in 0..=query.w {
        total += binomial_pmf(k, query.w, p00) * prc_star(k as u64, 0.0, 0.0, query.m1, query.m2, tau.fixed.beta0)?;
    }
    Ok(total.min(1.0))
}

/// Two-sided normal quantile `z_{1 - alpha/2}`.
pub fn z_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// PRC at each posterior draw. Every draw reuses the Monte Carlo streams
/// of `seed`, so the spread of the values reflects the posterior and not
/// sampling noise, and identical draws give identical values.
pub fn prc_values(query: &PrcQuery, samples: &PosteriorSamples, mc_draws: usize, seed: u64) -> Result<Vec<f64>> {
    let taus = samples.taus()?;
    let vals = par::map_range(taus.len(), |r| prc_unconditional(query, &taus[r], &samples.scheme, mc_draws, seed).map(|e| e.value));
    vals.into_iter().collect()
}

/// Mean, SD and `mean +- z sd` interval (clamped to `[0, 1]`) of a set of
/// posterior values.
pub fn summarize_values(values: &[f64], alpha: f64, mc_draws: usize) -> Result<PrcReport> {
    if values.is_empty() {
        return Err(Error::input("no posterior values"));
    }
    let z = z_quantile(alpha)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(PrcReport {
        mean,
        sd,
        ci_low: (mean - z * sd).clamp(0.0, 1.0),
        ci_high: (mean + z * sd).clamp(0.0, 1.0),
        alpha,
        mc_draws,
        r_samples: values.len(),
    })
}

/// Posterior mean, SD and credible interval of the PRC.
pub fn prc_posterior(query: &PrcQuery, samples: &PosteriorSamples, mc_draws: usize, alpha: f64, seed: u64) -> Result<PrcReport> {
    let vals = prc_values(query, samples, mc_draws, seed)?;
    summarize_values(&vals, alpha, mc_draws)
}

/// Smallest `w` in `0..=min(m1, m2)` whose posterior-mean PRC is at most
/// `target`, or `None` when no such `w` exists. Uses bisection, which is
/// valid because the estimator is nonincreasing in `w`.
#[allow(clippy::too_many_arguments)]
pub fn design_w(
    m1: u32,
    m2: u32,
    q1: f64,
    q2: f64,
    samples: &PosteriorSamples,
    target: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<Option<u32>> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Config(format!("target must lie in (0, 1], got {target}")));
    }
    let mean_at = |w: u32| -> Result<f64> {
        let q = PrcQuery { w, m1, m2, q1, q2 };
        let vals = prc_values(&q, samples, mc_draws, seed)?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let top = m1.min(m2);
    if mean_at(top)? > target {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0u32, top);
    // Invariant: PRC(hi) <= target; PRC(w) > target for w < lo.
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if mean_at(mid)? <= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(Some(lo))
}

/// Minimal `w` for every `(q1, q2)` cell of a label grid; `None` marks
/// cells where no `w` reaches the target.
pub fn design_table(
    m1: u32,
    m2: u32,
    labels: &[f64],
    samples: &PosteriorSamples,
    target: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<Vec<Vec<Option<u32>>>> {
    labels.iter().map(|&q1| labels.iter().map(|&q2| design_w(m1, m2, q1, q2, samples, target, mc_draws, seed)).collect()).collect()
}

/// Cell text for a design table: the minimal `w`, or `*` when none exists.
pub fn design_cell(w: Option<u32>) -> String {
    w.map_or_else(|| "*".to_string(), |w| w.to_string())
}

/// Aligned text rendering of a label grid, rows `q1` and columns `q2`.
pub fn format_grid(labels: &[f64], cells: &[Vec<String>]) -> String {
    let head: Vec<String> = labels.iter().map(|q| format!("q2={q}")).collect();
    let rows: Vec<String> = labels.iter().map(|q| format!("q1={q}")).collect();
    let width = cells.iter().flatten().chain(&head).map(String::len).max().unwrap_or(1);
    let lead = rows.iter().map(String::len).max().unwrap_or(0);
    let mut out = format!("{:lead$}", "");
    for h in &head {
        out.push_str(&format!("  {h:>width$}"));
    }
    out.push('\n');
    for (r, row) in rows.iter().zip(cells) {
        out.push_str(&format!("{r:lead$}"));
        for c in row {
            out.push_str(&format!("  {c:>width$}"));
        }
        out.push('\n');
    }
    out
}
