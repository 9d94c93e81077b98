//! Synthetic match-count data from the model, and the coverage experiment
//! (simulate, fit, sample, check whether intervals contain the truth).

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::bayes::{build_proposal, importance_resample, DEFAULT_H, DEFAULT_R};
use crate::data::{enumerate_impostor_pairs, MatchDataset, MatchRecord};
use crate::em::{default_init, fit, EmControls};
use crate::model::{etas, QualityScheme, Tau};
use crate::numfmt::f17;
use crate::prc::{prc_posterior, prc_unconditional, z_quantile, PrcQuery};
use crate::rng::{derive_seed, stream};
use crate::{par, Error, Result};

/// Redraws allowed when a simulated count exceeds `min(m_a, m_b)`.
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum QualityAssignment {
    /// Label drawn uniformly from `1..=qmax` per impression.
    UniformLabels { qmax: u32 },
    /// Continuous quality drawn uniformly from `[lo, hi]` per impression.
    UniformRange { lo: f64, hi: f64 },
    /// Explicit values in finger-major order (`finger * L + impression`).
    Table(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MinutiaAssignment {
    Fixed(u32),
    /// `m = 1 + Poisson(mean - 1)` with the mean indexed by label (`means[q - 1]`).
    PerLabel(Vec<f64>),
    /// `m = 1 + Poisson(mean - 1)` with mean `lo + (hi - lo)(q - q_lo)/(q_hi - q_lo)`.
    Linear {
        q_lo: f64,
        q_hi: f64,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub scheme: QualityScheme,
    pub tau_true: Tau,
    pub f: usize,
    pub l: usize,
    pub quality: QualityAssignment,
    pub minutiae: MinutiaAssignment,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        self.tau_true.check(&self.scheme)?;
        if self.f < 2 || self.l < 1 {
            return Err(Error::Config(format!("need F >= 2 and L >= 1 (F = {}, L = {})", self.f, self.l)));
        }
        match &self.quality {
            QualityAssignment::Table(v) if v.len() != self.f * self.l => {
                return Err(Error::Config(format!("quality table has {} entries, need F*L = {}", v.len(), self.f * self.l)))
            }
            QualityAssignment::UniformLabels { qmax } if !matches!(self.scheme, QualityScheme::Categorical { qmax: q } if q == *qmax) => {
                return Err(Error::Config("uniform labels need the matching categorical scheme".into()))
            }
            QualityAssignment::UniformRange { lo, hi } if !(0.0 <= *lo && lo <= hi && *hi <= 1.0) => {
                return Err(Error::Config(format!("quality range [{lo}, {hi}] not inside [0, 1]")))
            }
            _ => {}
        }
        if let MinutiaAssignment::PerLabel(means) = &self.minutiae {
            if means.len() != self.scheme.n_theta() || !matches!(self.scheme, QualityScheme::Categorical { .. }) {
                return Err(Error::Config("per-label minutia means need one mean per categorical label".into()));
            }
        }
        Ok(())
    }
}

/// Named configurations at the published fitted values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Db1Categorical,
    Db1Continuous,
    Db2Categorical,
    Db2Continuous,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Db1Categorical, Preset::Db1Continuous, Preset::Db2Categorical, Preset::Db2Continuous];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Db1Categorical => "db1-cat",
            Preset::Db1Continuous => "db1-cont",
            Preset::Db2Categorical => "db2-cat",
            Preset::Db2Continuous => "db2-cont",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::input(format!("unknown preset '{s}' (expected db1-cat, db1-cont, db2-cat or db2-cont)")))
    }

    pub fn scheme(&self) -> QualityScheme {
        match self {
            Preset::Db1Categorical => QualityScheme::Categorical { qmax: 3 },
            Preset::Db2Categorical => QualityScheme::Categorical { qmax: 4 },
            _ => QualityScheme::Continuous,
        }
    }

    pub fn tau(&self) -> Tau {
        match self {
            Preset::Db1Categorical => Tau::new(vec![-3.4857, -0.7429, -1.6144], -2.7297, -4.9537),
            Preset::Db1Continuous => Tau::new(vec![-1.2801, -5.8520], -2.9047, -4.9518),
            Preset::Db2Categorical => Tau::new(vec![-2.9255, -1.1496, -0.9676, -4.2827], -2.8810, -4.7817),
            Preset::Db2Continuous => Tau::new(vec![-0.6346, -9.2982], -2.8721, -4.2974),
        }
    }

    /// Mean minutia counts per label (square roots of the diagonal mean
    /// `m1 m2` cells of the published summaries).
    fn label_means(&self) -> Vec<f64> {
        match self {
            Preset::Db1Categorical | Preset::Db1Continuous => vec![357f64.sqrt(), 594f64.sqrt(), 1459f64.sqrt()],
            Preset::Db2Categorical | Preset::Db2Continuous => vec![177f64.sqrt(), 684f64.sqrt(), 1036f64.sqrt(), 2546f64.sqrt()],
        }
    }

    pub fn config(&self, f: usize, l: usize, seed: u64) -> SimConfig {
        let scheme = self.scheme();
        let means = self.label_means();
        let (quality, minutiae) = match scheme {
            QualityScheme::Categorical { qmax } => (QualityAssignment::UniformLabels { qmax }, MinutiaAssignment::PerLabel(means)),
            QualityScheme::Continuous => (
                QualityAssignment::UniformRange { lo: 0.2, hi: 0.7 },
                MinutiaAssignment::Linear { q_lo: 0.2, q_hi: 0.7, lo: means[0], hi: *means.last().unwrap() },
            ),
        };
        SimConfig { scheme, tau_true: self.tau(), f, l, quality, minutiae, seed }
    }
}

/// A simulated dataset with the hidden quantities that generated it.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: MatchDataset,
    pub b: Vec<f64>,
    /// Four-way counts per pair, aligned with `data.pairs()`.
    pub type_counts: Vec<[u32; 4]>,
}

fn draw_m<R: Rng>(rng: &mut R, mean: f64) -> u32 {
    let extra = (mean - 1.0).max(1e-9);
    let pois = Poisson::new(extra).expect("positive mean");
    1 + pois.sample(rng) as u32
}

/// Draws `b_f ~ N(0, sigma^2)` and four-way Poisson counts per pair.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<Simulated> {
    cfg.validate()?;
    let scheme = cfg.scheme;
    let (f, l) = (cfg.f, cfg.l);
    let mut rng = stream(cfg.seed, 0);

    let mut quality = Vec::with_capacity(f * l);
    let mut m = Vec::with_capacity(f * l);
    for idx in 0..f * l {
        let q = match &cfg.quality {
            QualityAssignment::UniformLabels { qmax } => rng.random_range(1..=*qmax) as f64,
            QualityAssignment::UniformRange { lo, hi } => {
                if hi > lo {
                    rng.random_range(*lo..=*hi)
                } else {
                    *lo
                }
            }
            QualityAssignment::Table(v) => v[idx],
        };
        scheme.check_quality(q)?;
        let mi = match &cfg.minutiae {
            MinutiaAssignment::Fixed(v) => *v,
            MinutiaAssignment::PerLabel(means) => draw_m(&mut rng, means[q as usize - 1]),
            MinutiaAssignment::Linear { q_lo, q_hi, lo, hi } => {
                let t = if q_hi > q_lo { (q - q_lo) / (q_hi - q_lo) } else { 0.0 };
                draw_m(&mut rng, lo + (hi - lo) * t)
            }
        };
        if mi == 0 {
            return Err(Error::Config("minutia counts must be positive".into()));
        }
        quality.push(q);
        m.push(mi);
    }

    let sigma = cfg.tau_true.sigma2().sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let b: Vec<f64> = (0..f).map(|_| normal.sample(&mut rng)).collect();

    let pairs = enumerate_impostor_pairs(f, l);
    let fx = &cfg.tau_true.fixed;
    let drawn = par::map_range(pairs.len(), |k| -> Result<[u32; 4]> {
        let p = pairs[k];
        let ia = p.finger_a * l + p.impr_a;
        let ib = p.finger_b * l + p.impr_b;
        let e = etas(&fx.theta, fx.beta0, quality[ia], quality[ib], &scheme);
        let off = (m[ia] as f64 * m[ib] as f64).ln() + b[p.finger_a] + b[p.finger_b];
        let mut rng = stream(cfg.seed, 1 + k as u64);
        let cap = m[ia].min(m[ib]);
        for _ in 0..MAX_REDRAWS {
            let mut counts = [0u32; 4];
            for (c, eta) in counts.iter_mut().zip(e) {
                let rate = (eta + off).exp();
                *c = if rate > 0.0 {
                    Poisson::new(rate).map_err(|err| Error::Numerical(err.to_string()))?.sample(&mut rng) as u32
                } else {
                    0
                };
            }
            if counts.iter().sum::<u32>() <= cap {
                return Ok(counts);
            }
        }
        Err(Error::Numerical(format!("could not draw a count within min(m_a, m_b) = {cap} for pair {k}")))
    });
    let type_counts: Vec<[u32; 4]> = drawn.into_iter().collect::<Result<_>>()?;

    let records: Vec<MatchRecord> = pairs
        .iter()
        .zip(&type_counts)
        .map(|(p, c)| {
            let ia = p.finger_a * l + p.impr_a;
            let ib = p.finger_b * l + p.impr_b;
            MatchRecord {
                finger_a: p.finger_a as u32,
                impr_a: p.impr_a as u32,
                finger_b: p.finger_b as u32,
                impr_b: p.impr_b as u32,
                m_a: m[ia],
                m_b: m[ib],
                q_a: quality[ia],
                q_b: quality[ib],
                y: c.iter().sum(),
            }
        })
        .collect();
    let data = MatchDataset::from_records(records, scheme)?;
    // Enumeration order already matches the dataset's canonical order.
    debug_assert!(data.pairs().iter().zip(&type_counts).all(|(p, c)| p.y == c.iter().sum::<u32>() as f64));
    Ok(Simulated { data, b, type_counts })
}

/// Writes the hidden truth as `kind,key,value` rows: parameter values,
/// finger effects and four-way counts (`<fa>.<ia>-<fb>.<ib>/<uv>`).
pub fn write_truth<W: Write>(mut out: W, cfg: &SimConfig, sim: &Simulated, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "kind,key,value")?;
    for (name, v) in cfg.scheme.param_names().iter().zip(cfg.tau_true.to_vec()) {
        writeln!(out, "tau,{name},{}", f17(v))?;
    }
    for (fi, b) in sim.b.iter().enumerate() {
        writeln!(out, "b,{},{}", sim.data.finger_ids()[fi], f17(*b))?;
    }
    let labels = ["00", "01", "10", "11"];
    for (p, c) in sim.data.pairs().iter().zip(&sim.type_counts) {
        let ids = sim.data.finger_ids();
        for (lab, v) in labels.iter().zip(c) {
            writeln!(out, "count,{}.{}-{}.{}/{lab},{v}", ids[p.cov.finger_a], p.impr_a, ids[p.cov.finger_b], p.impr_b)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CoverageConfig {
    pub sim: SimConfig,
    pub runs: usize,
    pub alpha: f64,
    pub queries: Vec<PrcQuery>,
    pub h: usize,
    pub r: usize,
    /// Monte Carlo draws per posterior draw for PRC intervals.
    pub mc_draws: usize,
    /// Monte Carlo draws for the true PRC.
    pub truth_mc_draws: usize,
    pub em: EmControls,
    /// Parameter coordinates held at their true values in every fit;
    /// they are left out of the coverage tallies.
    pub hold_at_truth: Vec<bool>,
}

impl CoverageConfig {
    fn is_held(&self, i: usize) -> bool {
        self.hold_at_truth.get(i).copied().unwrap_or(false)
    }

    pub fn new(sim: SimConfig, runs: usize) -> Self {
        Self {
            sim,
            runs,
            alpha: crate::prc::DEFAULT_ALPHA,
            queries: Vec::new(),
            h: DEFAULT_H,
            r: DEFAULT_R,
            mc_draws: 20_000,
            truth_mc_draws: 1_000_000,
            em: EmControls::default(),
            hold_at_truth: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantityCoverage {
    pub name: String,
    pub truth: f64,
    /// Standard error of `truth` when it is a Monte Carlo value.
    pub truth_se: f64,
    pub covered: usize,
    pub evaluated: usize,
}

impl QuantityCoverage {
    pub fn fraction(&self) -> f64 {
        if self.evaluated == 0 {
            f64::NAN
        } else {
            self.covered as f64 / self.evaluated as f64
        }
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run: usize,
    pub tau_hat: Vec<f64>,
    pub proposal_sd: Vec<f64>,
    pub ess: f64,
    /// Per quantity: `(low, high, covered)`.
    pub intervals: Vec<(f64, f64, bool)>,
}

#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub quantities: Vec<QuantityCoverage>,
    pub outcomes: Vec<RunOutcome>,
    /// `(run, error message)` for replicates that failed.
    pub failures: Vec<(usize, String)>,
    pub runs: usize,
}

impl CoverageReport {
    /// Mean coverage over the evaluated parameter components.
    pub fn mean_parameter_coverage(&self, n_params: usize) -> f64 {
        let fr: Vec<f64> = self.quantities.iter().take(n_params).filter(|q| q.evaluated > 0).map(|q| q.fraction()).collect();
        fr.iter().sum::<f64>() / fr.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "quantity,truth,truth_se,covered,evaluated,coverage")?;
        for q in &self.quantities {
            writeln!(out, "{},{},{},{},{},{}", q.name, f17(q.truth), f17(q.truth_se), q.covered, q.evaluated, f17(q.fraction()))?;
        }
        Ok(())
    }
}

pub fn query_label(q: &PrcQuery) -> String {
    format!("prc(w={}|m={},{};q={},{})", q.w, q.m1, q.m2, q.q1, q.q2)
}

/// True PRC at the simulation parameters by Monte Carlo.
pub fn true_prc(cfg: &CoverageConfig, q: &PrcQuery, seed: u64) -> Result<(f64, f64)> {
    let e = prc_unconditional(q, &cfg.sim.tau_true, &cfg.sim.scheme, cfg.truth_mc_draws, seed)?;
    Ok((e.value, e.se))
}

fn one_run(cfg: &CoverageConfig, run: usize, truths: &[f64], z: f64) -> Result<RunOutcome> {
    let run_seed = derive_seed(cfg.sim.seed, run as u64);
    let sim_cfg = SimConfig { seed: derive_seed(run_seed, 0), ..cfg.sim.clone() };
    let sim = simulate_dataset(&sim_cfg)?;
    let fitted = if cfg.hold_at_truth.iter().any(|h| *h) {
        let truth = cfg.sim.tau_true.to_vec();
        let mut init = default_init(&sim.data)?.to_vec();
        for (i, v) in init.iter_mut().enumerate() {
            if cfg.is_held(i) {
                *v = truth[i];
            }
        }
        let controls = EmControls { fixed: (0..truth.len()).map(|i| cfg.is_held(i)).collect(), ..cfg.em.clone() };
        fit(&sim.data, Some(Tau::from_slice(&init, &cfg.sim.scheme)?), &controls)?
    } else {
        fit(&sim.data, None, &cfg.em)?
    };
    let proposal = build_proposal(&fitted)?;
    let samples = importance_resample(&sim.data, &proposal, cfg.h, cfg.r, derive_seed(run_seed, 1))?;
    let mean = samples.mean();
    let sd = samples.sd();
    let mut intervals = Vec::with_capacity(truths.len());
    for i in 0..mean.len() {
        let lo = mean[i] - z * sd[i];
        let hi = mean[i] + z * sd[i];
        intervals.push((lo, hi, lo <= truths[i] && truths[i] <= hi));
    }
    for (k, q) in cfg.queries.iter().enumerate() {
        let rep = prc_posterior(q, &samples, cfg.mc_draws, cfg.alpha, derive_seed(run_seed, 2 + k as u64))?;
        let t = truths[mean.len() + k];
        intervals.push((rep.ci_low, rep.ci_high, rep.ci_low <= t && t <= rep.ci_high));
    }
    Ok(RunOutcome { run, tau_hat: fitted.tau_hat.to_vec(), proposal_sd: proposal.sds(), ess: samples.ess, intervals })
}

/// Simulate, fit, sample and record interval coverage over `runs`
/// replicates. Failed replicates are listed and excluded.
pub fn run_coverage(cfg: &CoverageConfig) -> Result<CoverageReport> {
    if cfg.runs < 2 {
        return Err(Error::Config("coverage needs at least two runs".into()));
    }
    cfg.sim.validate()?;
    let z = z_quantile(cfg.alpha)?;
    let mut quantities: Vec<QuantityCoverage> = cfg
        .sim
        .scheme
        .param_names()
        .into_iter()
        .zip(cfg.sim.tau_true.to_vec())
        .map(|(name, truth)| QuantityCoverage { name, truth, truth_se: 0.0, covered: 0, evaluated: 0 })
        .collect();
    for (k, q) in cfg.queries.iter().enumerate() {
        let (truth, se) = true_prc(cfg, q, derive_seed(cfg.sim.seed, u64::MAX - k as u64))?;
        quantities.push(QuantityCoverage { name: query_label(q), truth, truth_se: se, covered: 0, evaluated: 0 });
    }
    let truths: Vec<f64> = quantities.iter().map(|q| q.truth).collect();

    let results = par::map_range(cfg.runs, |run| one_run(cfg, run, &truths, z));
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (run, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => {
                for (i, (q, iv)) in quantities.iter_mut().zip(&o.intervals).enumerate() {
                    if cfg.is_held(i) {
                        continue;
                    }
                    q.evaluated += 1;
                    q.covered += iv.2 as usize;
                }
                outcomes.push(o);
            }
            Err(e) => {
                log::warn!("coverage run {run} failed: {e}");
                failures.push((run, e.to_string()));
            }
        }
    }
    Ok(CoverageReport { quantities, outcomes, failures, runs: cfg.runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for p in Preset::ALL {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
            p.config(5, 2, 1).validate().unwrap();
        }
        assert!(Preset::parse("db3").is_err());
    }

    #[test]
    fn hidden_counts_sum_to_y() {
        let cfg = Preset::Db1Categorical.config(6, 2, 11);
        let sim = simulate_dataset(&cfg).unwrap();
        assert_eq!(sim.data.len(), 6 * 5 * 4 / 2);
        assert!(sim.data.is_complete());
        for (p, c) in sim.data.pairs().iter().zip(&sim.type_counts) {
            assert_eq!(p.y, c.iter().sum::<u32>() as f64);
        }
    }
}
