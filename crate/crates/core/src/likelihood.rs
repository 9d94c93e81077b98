//! Complete-data, observed-data and Laplace-approximated likelihoods, the
//! random-effects mode, and a tensor-grid quadrature reference for tiny `F`.
//!
//! Every pair between fingers `f` and `f'` shares the random-effect sum
//! `s = b_f + b_f'`, so the pairs are aggregated per finger pair ("block"):
//! `C = sum exp(H + K)` and `Y = sum y`. In terms of blocks
//!
//! ```text
//! h(theta, b) = sum_blk [C e^s - Y s] - sum_p (H_p + K_p) y_p + sum_p ln y_p!
//! g(tau, b)   = h + b'b / (2 sigma^2) + (F / 2)(ln sigma^2 + ln 2 pi)
//! ```

use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::data::MatchDataset;
use crate::model::{etas, log_sum4, FixedEffects, QualityScheme, Tau};
use crate::{par, Error, Result};

/// Floor applied to `log sigma^2` inside the solvers.
pub const MIN_LOG_SIGMA2: f64 = -30.0;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

pub(crate) fn clamp_log_sigma2(ls2: f64) -> f64 {
    if ls2 < MIN_LOG_SIGMA2 {
        if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("log sigma^2 = {ls2} clamped to {MIN_LOG_SIGMA2}");
        }
        MIN_LOG_SIGMA2
    } else {
        ls2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeOptions {
    /// Sup-norm gradient tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub b_hat: Vec<f64>,
    /// `d^2 g / db^2` at the mode.
    pub hessian: DMatrix<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct LaplaceResult {
    /// `termA + termB`.
    pub total: f64,
    /// `-g(tau, b_hat)`.
    pub term_a: f64,
    /// `-1/2 log det(Hessian / 2 pi)`.
    pub term_b: f64,
    pub mode: ModeResult,
}

/// Per-block rate sums at fixed effects `fixed` and `b = 0`, together with
/// `sum_p H_p y_p`.
#[derive(Debug, Clone)]
pub(crate) struct BlockRates {
    pub c: Vec<f64>,
    pub hy: f64,
}

pub(crate) fn block_rates(fixed: &FixedEffects, data: &MatchDataset) -> BlockRates {
    let lay = data.layout();
    let scheme = data.scheme();
    let pairs = data.pairs();
    let per_block = par::map_range(lay.blocks.len(), |k| {
        let mut c = 0.0;
        let mut hy = 0.0;
        for &i in &lay.order[lay.block_start[k]..lay.block_start[k + 1]] {
            let p = &pairs[i];
            let h = log_sum4(&etas(&fixed.theta, fixed.beta0, p.cov.q_a, p.cov.q_b, &scheme));
            c += (h + lay.log_mm[i]).exp();
            hy += h * p.y;
        }
        (c, hy)
    });
    let mut hy = 0.0;
    let c = per_block
        .into_iter()
        .map(|(c, h)| {
            hy += h;
            c
        })
        .collect();
    BlockRates { c, hy }
}

fn check_b(b: &[f64], data: &MatchDataset) -> Result<()> {
    if b.len() != data.f() {
        return Err(Error::input(format!("random effects have length {}, dataset has {} fingers", b.len(), data.f())));
    }
    Ok(())
}

fn block_shift(data: &MatchDataset, b: &[f64], k: usize) -> f64 {
    let (fa, fb) = data.layout().blocks[k];
    b[fa] + b[fb]
}

/// `sum_blk [C e^s - Y s]`, the `b`-dependent part of `h`.
fn block_part(c: &[f64], yb: &[f64], data: &MatchDataset, b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..c.len() {
        let s = block_shift(data, b, k);
        acc += c[k] * s.exp() - yb[k] * s;
    }
    acc
}

/// Complete-data negative log-likelihood with four-way counts per pair in
/// `(0,0), (0,1), (1,0), (1,1)` order.
pub fn neg_log_complete(fixed: &FixedEffects, b: &[f64], counts: &[[f64; 4]], data: &MatchDataset) -> Result<f64> {
    fixed.check(&data.scheme())?;
    check_b(b, data)?;
    if counts.len() != data.len() {
        return Err(Error::input(format!("{} count rows for {} pairs", counts.len(), data.len())));
    }
    let scheme = data.scheme();
    let mut total = 0.0;
    for (p, cnt) in data.pairs().iter().zip(counts) {
        if cnt.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::input("four-way counts must be nonnegative"));
        }
        let off = b[p.cov.finger_a] + b[p.cov.finger_b] + p.cov.log_mm();
        let e = etas(&fixed.theta, fixed.beta0, p.cov.q_a, p.cov.q_b, &scheme);
        for (eta, y) in e.iter().zip(cnt) {
            let lin = eta + off;
            total += lin.exp() - lin * y + ln_gamma(y + 1.0);
        }
    }
    Ok(total)
}

/// Observed-data negative log-likelihood `h(theta, b)`.
pub fn neg_log_observed(fixed: &FixedEffects, b: &[f64], data: &MatchDataset) -> Result<f64> {
    fixed.check(&data.scheme())?;
    check_b(b, data)?;
    let rates = block_rates(fixed, data);
    Ok(h_from_rates(&rates, data, b))
}

fn h_from_rates(rates: &BlockRates, data: &MatchDataset, b: &[f64]) -> f64 {
    let lay = data.layout();
    block_part(&rates.c, &lay.y_block, data, b) - rates.hy - lay.y_log_mm + lay.lgamma_y
}

fn prior_part(b: &[f64], log_sigma2: f64) -> f64 {
    let f = b.len() as f64;
    let bb: f64 = b.iter().map(|x| x * x).sum();
    bb / (2.0 * log_sigma2.exp()) + 0.5 * f * (log_sigma2 + (2.0 * PI).ln())
}

/// `g(tau, b) = h(theta, b) + b'b/(2 sigma^2) + (F/2)(ln sigma^2 + ln 2pi)`.
pub fn g_objective(tau: &Tau, b: &[f64], data: &MatchDataset) -> Result<f64> {
    let h = neg_log_observed(&tau.fixed, b, data)?;
    Ok(h + prior_part(b, clamp_log_sigma2(tau.log_sigma2)))
}

fn grad_from(c: &[f64], yb: &[f64], data: &MatchDataset, b: &[f64], inv_s2: f64) -> DVector<f64> {
    let lay = data.layout();
    let mut g = DVector::from_iterator(b.len(), b.iter().map(|x| x * inv_s2));
    for (k, &(fa, fb)) in lay.blocks.iter().enumerate() {
        let r = c[k] * (b[fa] + b[fb]).exp() - yb[k];
        g[fa] += r;
        g[fb] += r;
    }
    g
}

fn hess_from(c: &[f64], data: &MatchDataset, b: &[f64], inv_s2: f64) -> DMatrix<f64> {
    let lay = data.layout();
    let n = b.len();
    let mut h = DMatrix::from_diagonal_element(n, n, inv_s2);
    for (k, &(fa, fb)) in lay.blocks.iter().enumerate() {
        let r = c[k] * (b[fa] + b[fb]).exp();
        h[(fa, fa)] += r;
        h[(fb, fb)] += r;
        h[(fa, fb)] += r;
        h[(fb, fa)] += r;
    }
    h
}

/// Analytic gradient of `g` in `b`.
pub fn g_grad_b(tau: &Tau, b: &[f64], data: &MatchDataset) -> Result<Vec<f64>> {
    tau.fixed.check(&data.scheme())?;
    check_b(b, data)?;
    let rates = block_rates(&tau.fixed, data);
    let inv = (-clamp_log_sigma2(tau.log_sigma2)).exp();
    Ok(grad_from(&rates.c, &data.layout().y_block, data, b, inv).as_slice().to_vec())
}

/// Analytic Hessian of `g` in `b`.
pub fn g_hess_b(tau: &Tau, b: &[f64], data: &MatchDataset) -> Result<DMatrix<f64>> {
    tau.fixed.check(&data.scheme())?;
    check_b(b, data)?;
    let rates = block_rates(&tau.fixed, data);
    let inv = (-clamp_log_sigma2(tau.log_sigma2)).exp();
    Ok(hess_from(&rates.c, data, b, inv))
}

/// Newton iteration for `argmin_b sum_blk [C e^s - Y s] + b'b/(2 sigma^2)`
/// with the block rates `c` and block totals `yb` given.
pub(crate) fn solve_mode(
    c: &[f64],
    yb: &[f64],
    data: &MatchDataset,
    log_sigma2: f64,
    start: Option<&[f64]>,
    opts: &ModeOptions,
) -> Result<ModeResult> {
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::Config("mode tolerance must be positive".into()));
    }
    let n = data.f();
    let ls2 = clamp_log_sigma2(log_sigma2);
    let inv_s2 = (-ls2).exp();
    let objective = |b: &[f64]| block_part(c, yb, data, b) + b.iter().map(|x| x * x).sum::<f64>() * 0.5 * inv_s2;

    let mut b: Vec<f64> = match start {
        Some(s) if s.len() == n => s.to_vec(),
        _ => vec![0.0; n],
    };
    let mut f_cur = objective(&b);
    let mut grad = grad_from(c, yb, data, &b, inv_s2);
    let mut gnorm = grad.amax();
    let mut iterations = 0;
    while gnorm > opts.tol {
        if iterations == opts.max_iter {
            return Err(Error::Solver { context: "random-effects mode".into(), iterations, grad_norm: gnorm, last_iterate: b });
        }
        iterations += 1;
        let hess = hess_from(c, data, &b, inv_s2);
        let chol = Cholesky::new(hess).ok_or_else(|| Error::Numerical("random-effects Hessian is not positive definite".into()))?;
        let step = chol.solve(&(-&grad));
        let slope = grad.dot(&step);
        let slack = 1e-14 * (1.0 + f_cur.abs());
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = b.iter().zip(step.iter()).map(|(x, d)| x + alpha * d).collect();
            let f_trial = objective(&trial);
            if f_trial.is_finite() && f_trial <= f_cur + 1e-4 * alpha * slope + slack {
                accepted = Some((trial, f_trial));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, f_trial)) = accepted else {
            return Err(Error::Solver { context: "random-effects mode line search".into(), iterations, grad_norm: gnorm, last_iterate: b });
        };
        b = trial;
        f_cur = f_trial;
        grad = grad_from(c, yb, data, &b, inv_s2);
        gnorm = grad.amax();
    }
    let hessian = hess_from(c, data, &b, inv_s2);
    Ok(ModeResult { b_hat: b, hessian, grad_norm: gnorm, iterations })
}

fn check_tau(tau: &Tau, data: &MatchDataset) -> Result<()> {
    tau.check(&data.scheme())?;
    if data.f() < 2 || data.is_empty() {
        return Err(Error::input("dataset has no impostor pairs"));
    }
    Ok(())
}

/// Mode `b_hat(tau)` of `g(tau, .)`, Newton from `b = 0`.
pub fn find_mode(tau: &Tau, data: &MatchDataset, opts: &ModeOptions) -> Result<ModeResult> {
    find_mode_from(tau, data, None, opts)
}

/// As [`find_mode`] but starting from `start` when given.
pub fn find_mode_from(tau: &Tau, data: &MatchDataset, start: Option<&[f64]>, opts: &ModeOptions) -> Result<ModeResult> {
    check_tau(tau, data)?;
    let rates = block_rates(&tau.fixed, data);
    solve_mode(&rates.c, &data.layout().y_block, data, tau.log_sigma2, start, opts)
}

fn log_det_chol(h: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(h.clone()).ok_or_else(|| {
        let diag_min = h.diagonal().min();
        Error::Numerical(format!("Hessian at the mode is not positive definite (smallest diagonal {diag_min:.3e})"))
    })?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Laplace approximation of the marginal log-likelihood.
pub fn laplace_loglik(tau: &Tau, data: &MatchDataset) -> Result<LaplaceResult> {
    laplace_loglik_from(tau, data, None)
}

pub(crate) fn laplace_loglik_from(tau: &Tau, data: &MatchDataset, start: Option<&[f64]>) -> Result<LaplaceResult> {
    check_tau(tau, data)?;
    let rates = block_rates(&tau.fixed, data);
    let mode = solve_mode(&rates.c, &data.layout().y_block, data, tau.log_sigma2, start, &ModeOptions::default())?;
    let g = h_from_rates(&rates, data, &mode.b_hat) + prior_part(&mode.b_hat, clamp_log_sigma2(tau.log_sigma2));
    let f = data.f() as f64;
    let term_b = -0.5 * (log_det_chol(&mode.hessian)? - f * (2.0 * PI).ln());
    let term_a = -g;
    Ok(LaplaceResult { total: term_a + term_b, term_a, term_b, mode })
}

/// Largest finger count accepted by [`quadrature_loglik`].
pub const QUADRATURE_MAX_F: usize = 4;

/// `log int exp(-g(tau, b)) db` on a tensor grid in whitened coordinates
/// `b = b_hat + L^{-T} z` (with `L L'` the mode Hessian), `z` spanning
/// `[-8, 8]` per axis with `nodes` points (trapezoid rule).
pub fn quadrature_loglik(tau: &Tau, data: &MatchDataset, nodes: usize) -> Result<f64> {
    check_tau(tau, data)?;
    let f = data.f();
    if f > QUADRATURE_MAX_F {
        return Err(Error::Refused(format!("quadrature needs F <= {QUADRATURE_MAX_F}, dataset has F = {f}")));
    }
    if nodes < 3 {
        return Err(Error::Config("quadrature needs at least 3 nodes per axis".into()));
    }
    let rates = block_rates(&tau.fixed, data);
    let yb = &data.layout().y_block;
    let mode = solve_mode(&rates.c, yb, data, tau.log_sigma2, None, &ModeOptions::default())?;
    let ls2 = clamp_log_sigma2(tau.log_sigma2);
    let inv_s2 = (-ls2).exp();
    let g_hat = h_from_rates(&rates, data, &mode.b_hat) + prior_part(&mode.b_hat, ls2);
    let chol = Cholesky::new(mode.hessian.clone()).ok_or_else(|| Error::Numerical("mode Hessian not positive definite".into()))?;
    // Columns of L^{-T} map whitened coordinates to b.
    let l_inv_t = chol.l().try_inverse().ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?.transpose();
    let log_det_l: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();

    let span = 8.0;
    let step = 2.0 * span / (nodes - 1) as f64;
    let z_axis: Vec<f64> = (0..nodes).map(|k| -span + k as f64 * step).collect();
    let trap = |k: usize| if k == 0 || k == nodes - 1 { 0.5 } else { 1.0 };
    let inner_hat = block_part(&rates.c, yb, data, &mode.b_hat) + 0.5 * inv_s2 * mode.b_hat.iter().map(|x| x * x).sum::<f64>();
    let total = nodes.pow(f as u32);

    // Each outer index sums its slab; slabs are then added in index order.
    let inner = nodes.pow(f as u32 - 1);
    let slabs = par::map_range(nodes, |outer| {
        let mut acc = 0.0;
        let mut b = vec![0.0; f];
        let mut idx = vec![0usize; f];
        for flat in 0..inner {
            let mut rest = flat;
            idx[0] = outer;
            for slot in idx.iter_mut().skip(1) {
                *slot = rest % nodes;
                rest /= nodes;
            }
            let mut weight = 1.0;
            for r in 0..f {
                let mut v = mode.b_hat[r];
                for (col, &k) in idx.iter().enumerate() {
                    v += l_inv_t[(r, col)] * z_axis[k];
                }
                b[r] = v;
            }
            for &k in &idx {
                weight *= trap(k);
            }
            let inner_val = block_part(&rates.c, yb, data, &b) + 0.5 * inv_s2 * b.iter().map(|x| x * x).sum::<f64>();
            acc += weight * (-(inner_val - inner_hat)).exp();
        }
        acc
    });
    debug_assert_eq!(inner * nodes, total);
    let sum: f64 = slabs.iter().sum();
    Ok(-g_hat + sum.ln() + f as f64 * step.ln() - log_det_l)
}

/// Exhaustive sum over all four-way splits of every pair's count, for
/// checking the multinomial collapse on tiny datasets.
pub fn neg_log_observed_by_enumeration(fixed: &FixedEffects, b: &[f64], data: &MatchDataset) -> Result<f64> {
    fixed.check(&data.scheme())?;
    check_b(b, data)?;
    let scheme: QualityScheme = data.scheme();
    let mut total = 0.0;
    for p in data.pairs() {
        let y = p.y;
        if y.fract() != 0.0 || y > 12.0 {
            return Err(Error::Refused("enumeration needs small integer counts".into()));
        }
        let n = y as u32;
        let off = b[p.cov.finger_a] + b[p.cov.finger_b] + p.cov.log_mm();
        let e = etas(&fixed.theta, fixed.beta0, p.cov.q_a, p.cov.q_b, &scheme);
        let mut terms = Vec::new();
        for a in 0..=n {
            for bb in 0..=n - a {
                for c in 0..=n - a - bb {
                    let d = n - a - bb - c;
                    let split = [a, bb, c, d];
                    let mut nl = 0.0;
                    for (eta, k) in e.iter().zip(split) {
                        let lin = eta + off;
                        let k = k as f64;
                        nl += lin.exp() - lin * k + ln_gamma(k + 1.0);
                    }
                    terms.push(-nl);
                }
            }
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        total += -(m + s.ln());
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MatchRecord;
    use approx::assert_abs_diff_eq;

    fn one_pair(y: u32) -> MatchDataset {
        MatchDataset::from_records(
            vec![MatchRecord { finger_a: 0, impr_a: 0, finger_b: 1, impr_b: 0, m_a: 1, m_b: 1, q_a: 0.5, q_b: 0.5, y }],
            QualityScheme::Continuous,
        )
        .unwrap()
    }

    fn zero_fx() -> FixedEffects {
        FixedEffects::new(vec![0.0, 0.0], 0.0)
    }

    #[test]
    fn complete_single_pair() {
        let d = one_pair(1);
        let h = neg_log_complete(&zero_fx(), &[0.0, 0.0], &[[1.0, 0.0, 0.0, 0.0]], &d).unwrap();
        assert_abs_diff_eq!(h, 4.0, epsilon = 1e-14);
    }

    #[test]
    fn observed_single_pair() {
        let d = one_pair(1);
        let h = neg_log_observed(&zero_fx(), &[0.0, 0.0], &d).unwrap();
        assert_abs_diff_eq!(h, 4.0 - 4f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!((-h).exp(), 4.0 * (-4f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn zero_counts_give_rate_mass() {
        let d = one_pair(0);
        let fx = FixedEffects::new(vec![-1.0, -2.0], -3.0);
        let h = neg_log_observed(&fx, &[0.1, -0.2], &d).unwrap();
        let e = etas(&fx.theta, fx.beta0, 0.5, 0.5, &QualityScheme::Continuous);
        let mass: f64 = e.iter().map(|x| (x - 0.1).exp()).sum();
        assert_abs_diff_eq!(h, mass, epsilon = 1e-14);
    }

    #[test]
    fn prior_terms() {
        let d = one_pair(1);
        let tau = Tau::new(vec![0.0, 0.0], 0.0, 0.0);
        let h0 = neg_log_observed(&tau.fixed, &[0.0, 0.0], &d).unwrap();
        let g0 = g_objective(&tau, &[0.0, 0.0], &d).unwrap();
        assert_abs_diff_eq!(g0, h0 + (2.0 * PI).ln(), epsilon = 1e-14);
        let h1 = neg_log_observed(&tau.fixed, &[1.0, 0.0], &d).unwrap();
        let g1 = g_objective(&tau, &[1.0, 0.0], &d).unwrap();
        assert_abs_diff_eq!(g1 - h1 - (g0 - h0), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn degenerate_dataset_rejected() {
        let empty = MatchDataset::from_records(vec![], QualityScheme::Continuous).unwrap();
        let tau = Tau::new(vec![0.0, 0.0], 0.0, 0.0);
        assert!(matches!(laplace_loglik(&tau, &empty), Err(Error::Input { .. })));
    }
}
