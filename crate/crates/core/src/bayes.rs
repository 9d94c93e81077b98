//! Posterior draws of `tau` by importance resampling from a Gaussian
//! proposal centred at the fitted value.
//!
//! The prior is flat in `theta` and `beta0` and proportional to
//! `1/sigma^2`, which is flat in `log sigma^2`, so the target density in
//! the sampling coordinates is the Laplace likelihood itself.

use std::io::{BufRead, Write};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::MatchDataset;
use crate::em::FitResult;
use crate::likelihood::laplace_loglik;
use crate::model::{QualityScheme, Tau};
use crate::numfmt::f17;
use crate::rng::stream;
use crate::{par, Error, Result};

pub const DEFAULT_H: usize = 2000;
pub const DEFAULT_R: usize = 200;

/// Gaussian proposal `N(mean, curvature^{-1})` over the free coordinates;
/// held coordinates stay at their mean.
#[derive(Debug, Clone)]
pub struct ProposalSpec {
    pub mean: Vec<f64>,
    /// Full covariance, with zero rows and columns for held coordinates.
    pub covariance: DMatrix<f64>,
    /// Indices of the coordinates that vary.
    pub free: Vec<usize>,
    /// Lower Cholesky factor of the free block of the curvature.
    precision_l: DMatrix<f64>,
    /// Ridge added to the curvature diagonal, 0 when none was needed.
    pub ridge: f64,
}

impl ProposalSpec {
    /// Builds the proposal from a mean and a curvature matrix. A
    /// curvature that is not positive definite gets a ridge of
    /// `1e-8 * trace / p` on its diagonal (with a warning).
    pub fn from_curvature(mean: Vec<f64>, curvature: &DMatrix<f64>) -> Result<Self> {
        let free = (0..mean.len()).collect();
        Self::from_curvature_free(mean, curvature, free)
    }

    /// As [`ProposalSpec::from_curvature`], varying only the coordinates in `free`.
    pub fn from_curvature_free(mean: Vec<f64>, curvature: &DMatrix<f64>, free: Vec<usize>) -> Result<Self> {
        let n = mean.len();
        if curvature.nrows() != n || curvature.ncols() != n {
            return Err(Error::Config(format!("curvature is {}x{}, mean has length {n}", curvature.nrows(), curvature.ncols())));
        }
        if free.is_empty() || free.iter().any(|&i| i >= n) || free.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("free coordinates must be a nonempty increasing list of valid indices".into()));
        }
        let p = free.len();
        let block = DMatrix::from_fn(p, p, |r, c| curvature[(free[r], free[c])]);
        let sym = 0.5 * (&block + block.transpose());
        let (chol, ridge) = match Cholesky::new(sym.clone()) {
            Some(c) => (c, 0.0),
            None => {
                let ridge = 1e-8 * sym.trace().abs() / p as f64;
                log::warn!("curvature matrix is not positive definite; adding ridge {ridge:.3e} to its diagonal");
                let ridged = &sym + DMatrix::from_diagonal_element(p, p, ridge);
                let c = Cholesky::new(ridged).ok_or_else(|| {
                    Error::Numerical(
                        "curvature matrix is not positive definite even after ridge regularization; re-fit from another start".into(),
                    )
                })?;
                (c, ridge)
            }
        };
        let cov_free = chol.inverse();
        let mut covariance = DMatrix::zeros(n, n);
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                covariance[(i, j)] = cov_free[(r, c)];
            }
        }
        Ok(Self { mean, covariance, free, precision_l: chol.l(), ridge })
    }

    /// Number of varying coordinates.
    pub fn dim(&self) -> usize {
        self.free.len()
    }

    pub fn sds(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    /// `tau = mean + L^{-T} z` for standard normal `z` of length [`ProposalSpec::dim`].
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let zv = DVector::from_column_slice(z);
        let x = self.precision_l.transpose().solve_upper_triangular(&zv).expect("Cholesky factor has a positive diagonal");
        let mut tau = self.mean.clone();
        for (k, &i) in self.free.iter().enumerate() {
            tau[i] += x[k];
        }
        tau
    }

    /// Log proposal density over the free coordinates, up to its normalising constant.
    pub fn log_density(&self, tau: &[f64]) -> f64 {
        let d = DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| tau[i] - self.mean[i]));
        let y = self.precision_l.transpose() * d;
        -0.5 * y.dot(&y)
    }
}

/// Proposal centred at the fitted value with covariance equal to the
/// inverse of the profile curvature. Coordinates held during the fit are
/// held here too.
pub fn build_proposal(fit: &FitResult) -> Result<ProposalSpec> {
    let free = (0..fit.tau_hat.to_vec().len()).filter(|&i| !fit.fixed.get(i).copied().unwrap_or(false)).collect();
    ProposalSpec::from_curvature_free(fit.tau_hat.to_vec(), &fit.tau_hessian, free)
}

/// `log l_a(tau) + log prior` in the `(theta, beta0, log sigma^2)` parametrisation.
pub fn log_unnormalized_posterior(tau: &Tau, data: &MatchDataset) -> Result<f64> {
    Ok(laplace_loglik(tau, data)?.total)
}

#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub scheme: QualityScheme,
    /// `R` stacked `tau` vectors.
    pub draws: Vec<Vec<f64>>,
    /// Normalised importance weights of the `H` proposals (empty when the
    /// samples were read back from a file without a weights sidecar).
    pub weights: Vec<f64>,
    pub ess: f64,
    pub h: usize,
    pub seed: u64,
}

impl PosteriorSamples {
    pub fn r(&self) -> usize {
        self.draws.len()
    }

    pub fn taus(&self) -> Result<Vec<Tau>> {
        self.draws.iter().map(|d| Tau::from_slice(d, &self.scheme)).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.draws.len() as f64;
        let p = self.draws.first().map_or(0, |d| d.len());
        (0..p).map(|i| self.draws.iter().map(|d| d[i]).sum::<f64>() / n).collect()
    }

    pub fn sd(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.draws.len();
        mean.iter()
            .enumerate()
            .map(|(i, m)| if n < 2 { 0.0 } else { (self.draws.iter().map(|d| (d[i] - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() })
            .collect()
    }
}

/// Importance resampling against the Laplace posterior of `data`.
pub fn importance_resample(data: &MatchDataset, proposal: &ProposalSpec, h: usize, r: usize, seed: u64) -> Result<PosteriorSamples> {
    let scheme = data.scheme();
    importance_resample_with(proposal, scheme, h, r, seed, |v| {
        let tau = Tau::from_slice(v, &scheme)?;
        log_unnormalized_posterior(&tau, data)
    })
}

/// Importance resampling against an arbitrary log target. Draw `k` uses
/// its own random stream, so results do not depend on scheduling.
pub fn importance_resample_with<F>(
    proposal: &ProposalSpec,
    scheme: QualityScheme,
    h: usize,
    r: usize,
    seed: u64,
    log_target: F,
) -> Result<PosteriorSamples>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if r < 1 || h < r {
        return Err(Error::Config(format!("importance resampling needs H >= R >= 1 (H = {h}, R = {r})")));
    }
    let p = proposal.dim();
    let evaluated = par::map_range(h, |k| {
        let mut rng = stream(seed, k as u64);
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let tau = proposal.transform(&z);
        let lw = match log_target(&tau) {
            Ok(lt) => lt - proposal.log_density(&tau),
            Err(_) => f64::NEG_INFINITY,
        };
        (tau, lw)
    });
    let failed = evaluated.iter().filter(|(_, lw)| !lw.is_finite()).count();
    if failed > 0 {
        log::warn!("{failed} of {h} proposal draws could not be evaluated and get zero weight");
    }
    let top = evaluated.iter().map(|(_, lw)| *lw).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Numerical("all importance weights are zero or undefined".into()));
    }
    let raw: Vec<f64> = evaluated.iter().map(|(_, lw)| if lw.is_finite() { (lw - top).exp() } else { 0.0 }).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    if ess < 0.1 * h as f64 {
        log::warn!("effective sample size {ess:.1} is below 10% of H = {h}; the proposal may not match the posterior");
    }

    let mut cumulative = Vec::with_capacity(h);
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut rng = stream(seed, u64::MAX);
    let draws = (0..r)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let idx = cumulative.partition_point(|c| *c <= u).min(h - 1);
            evaluated[idx].0.clone()
        })
        .collect();
    Ok(PosteriorSamples { scheme, draws, weights, ess, h, seed })
}

/// Writes draws as CSV (`#` metadata lines, header of parameter names, one
/// row per draw, 17 significant digits).
pub fn write_samples<W: Write>(mut out: W, samples: &PosteriorSamples, extra_meta: &[String]) -> Result<()> {
    writeln!(out, "# scheme: {}", samples.scheme)?;
    writeln!(out, "# proposals_h: {}", samples.h)?;
    writeln!(out, "# draws_r: {}", samples.r())?;
    writeln!(out, "# ess: {}", f17(samples.ess))?;
    writeln!(out, "# seed: {}", samples.seed)?;
    for m in extra_meta {
        writeln!(out, "# {m}")?;
    }
    writeln!(out, "{}", samples.scheme.param_names().join(","))?;
    for d in &samples.draws {
        let row: Vec<String> = d.iter().map(|v| f17(*v)).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes the importance weights, one per line with a `weight` header.
pub fn write_weights<W: Write>(mut out: W, samples: &PosteriorSamples) -> Result<()> {
    writeln!(out, "weight")?;
    for w in &samples.weights {
        writeln!(out, "{}", f17(*w))?;
    }
    Ok(())
}

/// Reads a samples file produced by [`write_samples`].
pub fn read_samples<R: BufRead>(input: R) -> Result<PosteriorSamples> {
    let mut scheme = None;
    let mut h = 0usize;
    let mut ess = f64::NAN;
    let mut seed = 0u64;
    let mut header: Option<Vec<String>> = None;
    let mut draws = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(meta) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = meta.split_once(':') {
                let value = value.trim();
                let bad = || Error::input_at(lineno, format!("bad metadata value '{value}'"));
                match key.trim() {
                    "scheme" => scheme = Some(QualityScheme::parse(value)?),
                    "proposals_h" => h = value.parse().map_err(|_| bad())?,
                    "ess" => ess = value.parse().map_err(|_| bad())?,
                    "seed" => seed = value.parse().map_err(|_| bad())?,
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        match &header {
            None => header = Some(fields.iter().map(|s| s.to_string()).collect()),
            Some(hd) => {
                if fields.len() != hd.len() {
                    return Err(Error::input_at(lineno, format!("expected {} values, found {}", hd.len(), fields.len())));
                }
                let row = fields
                    .iter()
                    .map(|f| f.parse::<f64>().map_err(|_| Error::input_at(lineno, format!("cannot parse '{f}'"))))
                    .collect::<Result<Vec<f64>>>()?;
                draws.push(row);
            }
        }
    }
    let scheme = scheme.ok_or_else(|| Error::input("samples file lacks a '# scheme:' line"))?;
    let header = header.ok_or_else(|| Error::input("samples file has no header"))?;
    if header != scheme.param_names() {
        return Err(Error::input(format!(
            "header {} does not match scheme {scheme} ({})",
            header.join(","),
            scheme.param_names().join(",")
        )));
    }
    if draws.is_empty() {
        return Err(Error::input("samples file has no draws"));
    }
    Ok(PosteriorSamples { scheme, draws, weights: Vec::new(), ess, h, seed })
}
