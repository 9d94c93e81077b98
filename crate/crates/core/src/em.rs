//! Maximum-likelihood fitting of `tau` by EM.
//!
//! The E-step splits every observed count over the four match types with
//! the multinomial probabilities at the current `theta`. The M-step
//! minimises the complete-data objective along the random-effects mode,
//! `G_c(tau) = g_c(tau, b_hat(tau))`, by safeguarded Newton iterations.
//! Derivatives of `b_hat` are taken by central differences with warm
//! starts.
//!
//! With expected counts `Y^{uv}` the complete-data objective is
//!
//! ```text
//! g_c(tau, b) = sum_blk C e^s - phi'T - sum_blk Y s - sum_p K_p y_p
//!             + sum_{p,uv} ln Y^{uv}! + b'b/(2 sigma^2) + (F/2)(ln sigma^2 + ln 2pi)
//! ```
//!
//! with `T = sum_p sum_uv x_uv Y^{uv}`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use statrs::function::gamma::ln_gamma;

use crate::data::MatchDataset;
use crate::likelihood::{self, block_rates, clamp_log_sigma2, solve_mode, ModeOptions, MIN_LOG_SIGMA2};
use crate::model::{design_row_unchecked, etas, log_sum4, type_probs_unchecked, FixedEffects, Tau};
use crate::{par, Error, Result};

/// Fitted `beta0` below this is treated as running off to the boundary.
pub const BETA0_FLOOR: f64 = -50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EmControls {
    pub max_iter: usize,
    /// Relative change of the objective between EM iterations.
    pub rel_tol: f64,
    /// Sup-norm change of `tau` between EM iterations.
    pub step_tol: f64,
    /// M-step gradient tolerance, relative to the size of the sufficient statistics.
    pub mstep_tol: f64,
    pub mstep_max_iter: usize,
    pub max_halvings: usize,
    /// Largest Newton move per M-step iteration (sup-norm).
    pub max_step: f64,
    /// Relative step for differences of `b_hat`.
    pub fd_step: f64,
    /// `true` entries are held at their initial values.
    pub fixed: Vec<bool>,
    /// Squared-extrapolation acceleration between pairs of EM steps. An
    /// extrapolated point is kept only if it improves on the plain EM step.
    pub accelerate: bool,
    /// Newton iterations on the observed profile after EM stops.
    pub refine_max_iter: usize,
    /// Newton decrement (objective units) below which the fit is stationary.
    pub refine_tol: f64,
    pub mode: ModeOptions,
}

impl Default for EmControls {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-8,
            step_tol: 1e-6,
            mstep_tol: 1e-10,
            mstep_max_iter: 50,
            max_halvings: 30,
            max_step: 2.0,
            fd_step: 1e-4,
            fixed: Vec::new(),
            accelerate: true,
            refine_max_iter: 50,
            refine_tol: 1e-10,
            mode: ModeOptions::default(),
        }
    }
}

impl EmControls {
    fn is_free(&self, i: usize) -> bool {
        !self.fixed.get(i).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub tau_k: Tau,
    /// Four-way split of each pair's count, `(0,0), (0,1), (1,0), (1,1)`.
    pub expected_counts: Vec<[f64; 4]>,
    /// `-g(tau_k, b_hat(tau_k))`.
    pub objective_k: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub tau_hat: Tau,
    /// `d^2 g(tau, b_hat(tau)) / d tau^2` at `tau_hat`.
    pub tau_hessian: DMatrix<f64>,
    pub em_iterations: usize,
    pub converged: bool,
    /// `-g(tau_k, b_hat(tau_k))` for every iterate, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub b_hat: Vec<f64>,
    /// Newton iterations taken after EM.
    pub refine_iterations: usize,
    /// Coordinates held at their initial values.
    pub fixed: Vec<bool>,
}

/// E-step: expected four-way counts `Y * p^{uv}(theta_k)`.
pub fn e_step(tau_k: &Tau, data: &MatchDataset) -> Result<Vec<[f64; 4]>> {
    tau_k.check(&data.scheme())?;
    let scheme = data.scheme();
    let fx = &tau_k.fixed;
    Ok(par::map_slice(data.pairs(), |p| {
        let pr = type_probs_unchecked(&fx.theta, fx.beta0, p.cov.q_a, p.cov.q_b, &scheme);
        [p.y * pr[0], p.y * pr[1], p.y * pr[2], p.y * pr[3]]
    }))
}

/// Sufficient statistics of a four-way count table.
#[derive(Debug, Clone)]
struct CompleteStats {
    t: DVector<f64>,
    y_block: Vec<f64>,
    /// `-sum K y + sum ln Y^{uv}!`.
    konst: f64,
}

fn complete_stats(counts: &[[f64; 4]], data: &MatchDataset) -> Result<CompleteStats> {
    if counts.len() != data.len() {
        return Err(Error::input(format!("{} count rows for {} pairs", counts.len(), data.len())));
    }
    let scheme = data.scheme();
    let p = scheme.n_fixed();
    let lay = data.layout();
    let mut t = DVector::zeros(p);
    let mut konst = 0.0;
    for (i, (pair, cnt)) in data.pairs().iter().zip(counts).enumerate() {
        let total: f64 = cnt.iter().sum();
        konst -= lay.log_mm[i] * total;
        for (uv, &y) in cnt.iter().enumerate() {
            let row = design_row_unchecked(pair.cov.q_a, pair.cov.q_b, (uv >> 1) as u8, (uv & 1) as u8, &scheme);
            for (tk, x) in t.iter_mut().zip(row) {
                *tk += x * y;
            }
            konst += ln_gamma(y + 1.0);
        }
    }
    let mut y_block = vec![0.0; lay.blocks.len()];
    for (k, yb) in y_block.iter_mut().enumerate() {
        for &i in &lay.order[lay.block_start[k]..lay.block_start[k + 1]] {
            *yb += counts[i].iter().sum::<f64>();
        }
    }
    Ok(CompleteStats { t, y_block, konst })
}

/// Per-block rate sums and their derivatives in `phi`.
struct BlockDerivs {
    c: Vec<f64>,
    /// `sum_p e^K sum_uv e^eta x_uv`.
    cx: Vec<DVector<f64>>,
    /// `sum_p e^K sum_uv e^eta x_uv x_uv'`.
    cxx: Vec<DMatrix<f64>>,
    /// `sum_p y_p xbar_p` with `xbar = sum_uv p^{uv} x_uv` (observed counts).
    yx: DVector<f64>,
    /// `sum_p y_p Cov_p(x)` under the type probabilities; filled with `cxx`.
    yvar: DMatrix<f64>,
}

fn block_derivs(fixed: &FixedEffects, data: &MatchDataset, second: bool) -> BlockDerivs {
    let lay = data.layout();
    let scheme = data.scheme();
    let pairs = data.pairs();
    let p = scheme.n_fixed();
    let per_block = par::map_range(lay.blocks.len(), |k| {
        let mut c = 0.0;
        let mut cx = DVector::zeros(p);
        let mut cxx = if second { DMatrix::zeros(p, p) } else { DMatrix::zeros(0, 0) };
        let mut yx = DVector::zeros(p);
        let mut yvar = if second { DMatrix::zeros(p, p) } else { DMatrix::zeros(0, 0) };
        for &i in &lay.order[lay.block_start[k]..lay.block_start[k + 1]] {
            let pr = &pairs[i];
            let e = etas(&fixed.theta, fixed.beta0, pr.cov.q_a, pr.cov.q_b, &scheme);
            let h = log_sum4(&e);
            c += (h + lay.log_mm[i]).exp();
            let mut xbar = DVector::zeros(p);
            for (uv, eta) in e.iter().enumerate() {
                let row = DVector::from_vec(design_row_unchecked(pr.cov.q_a, pr.cov.q_b, (uv >> 1) as u8, (uv & 1) as u8, &scheme));
                let w = (eta + lay.log_mm[i]).exp();
                let prob = (eta - h).exp();
                cx.axpy(w, &row, 1.0);
                xbar.axpy(prob, &row, 1.0);
                if second {
                    cxx.ger(w, &row, &row, 1.0);
                    yvar.ger(pr.y * prob, &row, &row, 1.0);
                }
            }
            yx.axpy(pr.y, &xbar, 1.0);
            if second {
                yvar.ger(-pr.y, &xbar, &xbar, 1.0);
            }
        }
        (c, cx, cxx, yx, yvar)
    });
    let mut out = BlockDerivs {
        c: Vec::with_capacity(per_block.len()),
        cx: Vec::with_capacity(per_block.len()),
        cxx: Vec::with_capacity(per_block.len()),
        yx: DVector::zeros(p),
        yvar: if second { DMatrix::zeros(p, p) } else { DMatrix::zeros(0, 0) },
    };
    for (c, cx, cxx, yx, yvar) in per_block {
        out.c.push(c);
        out.cx.push(cx);
        out.cxx.push(cxx);
        out.yx += yx;
        if second {
            out.yvar += yvar;
        }
    }
    out
}

fn shifts(data: &MatchDataset, b: &[f64]) -> Vec<f64> {
    data.layout().blocks.iter().map(|&(fa, fb)| (b[fa] + b[fb]).exp()).collect()
}

fn prior_value(b: &[f64], ls2: f64) -> f64 {
    let bb: f64 = b.iter().map(|x| x * x).sum();
    bb / (2.0 * ls2.exp()) + 0.5 * b.len() as f64 * (ls2 + (2.0 * std::f64::consts::PI).ln())
}

fn g_complete_with(tau: &Tau, b: &[f64], stats: &CompleteStats, data: &MatchDataset) -> f64 {
    let rates = block_rates(&tau.fixed, data);
    let lay = data.layout();
    let phi = DVector::from_vec(tau.fixed.to_vec());
    let mut acc = 0.0;
    for (k, &(fa, fb)) in lay.blocks.iter().enumerate() {
        let s = b[fa] + b[fb];
        acc += rates.c[k] * s.exp() - stats.y_block[k] * s;
    }
    acc - phi.dot(&stats.t) + stats.konst + prior_value(b, clamp_log_sigma2(tau.log_sigma2))
}

fn check_point(tau: &Tau, b: &[f64], data: &MatchDataset) -> Result<()> {
    tau.check(&data.scheme())?;
    if b.len() != data.f() {
        return Err(Error::input(format!("random effects have length {}, dataset has {} fingers", b.len(), data.f())));
    }
    Ok(())
}

/// Complete-data objective `g_c(tau, b)` for the given four-way counts.
pub fn g_complete(tau: &Tau, b: &[f64], counts: &[[f64; 4]], data: &MatchDataset) -> Result<f64> {
    check_point(tau, b, data)?;
    let stats = complete_stats(counts, data)?;
    Ok(g_complete_with(tau, b, &stats, data))
}

fn partial_grad(tau: &Tau, b: &[f64], t: &DVector<f64>, derivs: &BlockDerivs, data: &MatchDataset) -> DVector<f64> {
    let p = t.len();
    let es = shifts(data, b);
    let mut g = DVector::zeros(p + 1);
    for (k, cx) in derivs.cx.iter().enumerate() {
        g.rows_mut(0, p).axpy(es[k], cx, 1.0);
    }
    for i in 0..p {
        g[i] -= t[i];
    }
    let ls2 = clamp_log_sigma2(tau.log_sigma2);
    let bb: f64 = b.iter().map(|x| x * x).sum();
    g[p] = -bb / (2.0 * ls2.exp()) + 0.5 * b.len() as f64;
    g
}

/// Partial gradient of `g_c` in `tau` at fixed `b`.
pub fn g_complete_grad_tau(tau: &Tau, b: &[f64], counts: &[[f64; 4]], data: &MatchDataset) -> Result<Vec<f64>> {
    check_point(tau, b, data)?;
    let stats = complete_stats(counts, data)?;
    let derivs = block_derivs(&tau.fixed, data, false);
    Ok(partial_grad(tau, b, &stats.t, &derivs, data).as_slice().to_vec())
}

/// Gradient of the observed profile `g(tau, b_hat(tau))`. By the envelope
/// theorem this equals the partial gradient at `b = b_hat(tau)`.
pub fn profile_gradient(tau: &Tau, data: &MatchDataset) -> Result<Vec<f64>> {
    let mode = likelihood::find_mode(tau, data, &ModeOptions::default())?;
    Ok(profile_gradient_at(tau, &mode.b_hat, data).as_slice().to_vec())
}

fn profile_gradient_at(tau: &Tau, b: &[f64], data: &MatchDataset) -> DVector<f64> {
    let derivs = block_derivs(&tau.fixed, data, false);
    partial_grad(tau, b, &derivs.yx, &derivs, data)
}

/// Value of the observed profile `g(tau, b_hat(tau))` and its mode.
fn profile_value(tau: &Tau, data: &MatchDataset, start: Option<&[f64]>, opts: &ModeOptions) -> Result<(f64, Vec<f64>)> {
    let mode = likelihood::find_mode_from(tau, data, start, opts)?;
    let g = likelihood::g_objective(tau, &mode.b_hat, data)?;
    Ok((g, mode.b_hat))
}

#[derive(Debug, Clone)]
pub struct Sensitivities {
    /// `d b_hat / d tau`, `F x (p + 1)`.
    pub first: DMatrix<f64>,
    /// `d^2 b_hat / d tau_i^2` per coordinate, `F x (p + 1)`.
    pub second: DMatrix<f64>,
}

fn mode_with(tau: &Tau, data: &MatchDataset, yb: &[f64], start: &[f64], opts: &ModeOptions) -> Result<Vec<f64>> {
    let rates = block_rates(&tau.fixed, data);
    Ok(solve_mode(&rates.c, yb, data, tau.log_sigma2, Some(start), opts)?.b_hat)
}

fn sensitivities_with(
    tau: &Tau,
    data: &MatchDataset,
    yb: &[f64],
    b0: &[f64],
    rel_step: f64,
    opts: &ModeOptions,
    coords: &[usize],
) -> Result<Sensitivities> {
    let scheme = data.scheme();
    let base = tau.to_vec();
    let n = data.f();
    let np = base.len();
    let mut first = DMatrix::zeros(n, np);
    let mut second = DMatrix::zeros(n, np);
    let names = scheme.param_names();
    for &i in coords {
        let h = rel_step * (1.0 + base[i].abs());
        let eval = |delta: f64| -> Result<Vec<f64>> {
            let mut v = base.clone();
            v[i] += delta;
            let t = Tau::from_slice(&v, &scheme)?;
            mode_with(&t, data, yb, b0, opts).map_err(|e| Error::Numerical(format!("mode failed when perturbing {}: {e}", names[i])))
        };
        let up = eval(h)?;
        let down = eval(-h)?;
        for f in 0..n {
            first[(f, i)] = (up[f] - down[f]) / (2.0 * h);
            second[(f, i)] = (up[f] - 2.0 * b0[f] + down[f]) / (h * h);
        }
    }
    Ok(Sensitivities { first, second })
}

/// Central-difference derivatives of `b_hat(tau)` (relative step `1e-4`),
/// each perturbed solve warm-started from `b_hat(tau)`.
pub fn bhat_sensitivities(tau: &Tau, data: &MatchDataset) -> Result<Sensitivities> {
    bhat_sensitivities_step(tau, data, 1e-4)
}

pub fn bhat_sensitivities_step(tau: &Tau, data: &MatchDataset, rel_step: f64) -> Result<Sensitivities> {
    let opts = ModeOptions { tol: 1e-12, max_iter: 100 };
    let mode = likelihood::find_mode(tau, data, &opts)?;
    let coords: Vec<usize> = (0..tau.to_vec().len()).collect();
    sensitivities_with(tau, data, &data.layout().y_block, &mode.b_hat, rel_step, &opts, &coords)
}

/// `d b_hat / d tau` from the implicit-function theorem,
/// `-(d^2 g/db^2)^{-1} d^2 g/(db dtau)`.
pub fn bhat_jacobian_implicit(tau: &Tau, data: &MatchDataset) -> Result<DMatrix<f64>> {
    let opts = ModeOptions { tol: 1e-12, max_iter: 100 };
    let mode = likelihood::find_mode(tau, data, &opts)?;
    let derivs = block_derivs(&tau.fixed, data, false);
    let cross = cross_b_tau(tau, &mode.b_hat, &derivs, data);
    let chol = Cholesky::new(mode.hessian).ok_or_else(|| Error::Numerical("mode Hessian not positive definite".into()))?;
    Ok(-chol.solve(&cross))
}

/// `d^2 g / (db dtau)`, `F x (p + 1)`.
fn cross_b_tau(tau: &Tau, b: &[f64], derivs: &BlockDerivs, data: &MatchDataset) -> DMatrix<f64> {
    let lay = data.layout();
    let p = tau.fixed.to_vec().len();
    let n = b.len();
    let es = shifts(data, b);
    let mut m = DMatrix::zeros(n, p + 1);
    for (k, &(fa, fb)) in lay.blocks.iter().enumerate() {
        for j in 0..p {
            let v = es[k] * derivs.cx[k][j];
            m[(fa, j)] += v;
            m[(fb, j)] += v;
        }
    }
    let inv_s2 = (-clamp_log_sigma2(tau.log_sigma2)).exp();
    for f in 0..n {
        m[(f, p)] = -b[f] * inv_s2;
    }
    m
}

/// `d^2 g / dtau^2` at fixed `b` (partial).
fn partial_hessian(tau: &Tau, b: &[f64], derivs: &BlockDerivs, data: &MatchDataset) -> DMatrix<f64> {
    let p = tau.fixed.to_vec().len();
    let es = shifts(data, b);
    let mut h = DMatrix::zeros(p + 1, p + 1);
    for (k, cxx) in derivs.cxx.iter().enumerate() {
        let mut view = h.view_mut((0, 0), (p, p));
        view += cxx * es[k];
    }
    let bb: f64 = b.iter().map(|x| x * x).sum();
    h[(p, p)] = bb / (2.0 * clamp_log_sigma2(tau.log_sigma2).exp());
    h
}

/// Everything the M-step needs at one `tau`.
struct MPoint {
    tau: Tau,
    value: f64,
    b: Vec<f64>,
    grad: DVector<f64>,
}

fn m_point(tau: Tau, stats: &CompleteStats, data: &MatchDataset, start: &[f64], opts: &ModeOptions) -> Result<MPoint> {
    let b = mode_with(&tau, data, &stats.y_block, start, opts)?;
    let value = g_complete_with(&tau, &b, stats, data);
    let derivs = block_derivs(&tau.fixed, data, false);
    let grad = partial_grad(&tau, &b, &stats.t, &derivs, data);
    Ok(MPoint { tau, value, b, grad })
}

/// Hessian of `G_c(tau) = g_c(tau, b_hat(tau))`:
/// `g_tt + g_tb J + J' g_bt + J' g_bb J` with `J` by central differences.
fn m_hessian(pt: &MPoint, stats: &CompleteStats, data: &MatchDataset, controls: &EmControls, free: &[usize]) -> Result<DMatrix<f64>> {
    let derivs = block_derivs(&pt.tau.fixed, data, true);
    let g_tt = partial_hessian(&pt.tau, &pt.b, &derivs, data);
    let g_bt = cross_b_tau(&pt.tau, &pt.b, &derivs, data);
    let rates = block_rates(&pt.tau.fixed, data);
    let inv_s2 = (-clamp_log_sigma2(pt.tau.log_sigma2)).exp();
    let g_bb = {
        let lay = data.layout();
        let n = pt.b.len();
        let mut h = DMatrix::from_diagonal_element(n, n, inv_s2);
        for (k, &(fa, fb)) in lay.blocks.iter().enumerate() {
            let r = rates.c[k] * (pt.b[fa] + pt.b[fb]).exp();
            h[(fa, fa)] += r;
            h[(fb, fb)] += r;
            h[(fa, fb)] += r;
            h[(fb, fa)] += r;
        }
        h
    };
    let sens = sensitivities_with(&pt.tau, data, &stats.y_block, &pt.b, controls.fd_step, &controls.mode, free)?;
    let j = &sens.first;
    let cross = g_bt.transpose() * j;
    let full = &g_tt + &cross + cross.transpose() + j.transpose() * &g_bb * j;
    Ok(0.5 * (&full + full.transpose()))
}

/// Newton direction on the free coordinates; falls back to an eigenvalue
/// floor when the Hessian is not positive definite.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, rel_floor: f64) -> DVector<f64> {
    if let Some(chol) = Cholesky::new(h.clone()) {
        let d = chol.solve(&(-g));
        if d.iter().all(|x| x.is_finite()) {
            return d;
        }
    }
    let eig = SymmetricEigen::new(h.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let floor = rel_floor * top;
    let qtg = eig.eigenvectors.transpose() * g;
    let scaled = DVector::from_iterator(qtg.len(), qtg.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| -c / l.abs().max(floor)));
    &eig.eigenvectors * scaled
}

fn free_coords(n: usize, controls: &EmControls) -> Vec<usize> {
    (0..n).filter(|&i| controls.is_free(i)).collect()
}

/// `free` without `log sigma^2` when it sits on the solver floor and the
/// gradient pushes it further down.
fn active_free(free: &[usize], tau: &[f64], grad: &[f64]) -> Vec<usize> {
    let ls = tau.len() - 1;
    free.iter().copied().filter(|&i| !(i == ls && tau[ls] <= MIN_LOG_SIGMA2 && grad[ls] > 0.0)).collect()
}

/// Keeps `log sigma^2` on or above the solver floor, below which the
/// objective is flat.
fn project(v: &mut [f64]) {
    let ls = v.len() - 1;
    v[ls] = v[ls].max(MIN_LOG_SIGMA2);
}

/// `grad . (v - base)` over `coords`.
fn directional(grad: &[f64], v: &[f64], base: &[f64], coords: &[usize]) -> f64 {
    coords.iter().map(|&i| grad[i] * (v[i] - base[i])).sum()
}

/// One M-step: Newton iterations on `G_c` from `state.tau_k`.
pub fn m_step(state: &EmState, data: &MatchDataset, controls: &EmControls) -> Result<Tau> {
    let scheme = data.scheme();
    state.tau_k.check(&scheme)?;
    if state.expected_counts.iter().flatten().sum::<f64>() <= 0.0 {
        return Err(Error::Boundary("all expected counts are zero; no finite MLE".into()));
    }
    let stats = complete_stats(&state.expected_counts, data)?;
    let zero = vec![0.0; data.f()];
    let mut pt = m_point(state.tau_k.clone(), &stats, data, &zero, &controls.mode)?;
    let free = free_coords(pt.tau.to_vec().len(), controls);
    if free.is_empty() {
        return Ok(pt.tau);
    }
    let scale = 1.0 + stats.t.amax();
    for _ in 0..controls.mstep_max_iter {
        let free = active_free(&free, &pt.tau.to_vec(), pt.grad.as_slice());
        if free.is_empty() {
            break;
        }
        let g_free = DVector::from_iterator(free.len(), free.iter().map(|&i| pt.grad[i]));
        if g_free.amax() <= controls.mstep_tol * scale {
            break;
        }
        let h_full = m_hessian(&pt, &stats, data, controls, &free)?;
        let h_free = DMatrix::from_fn(free.len(), free.len(), |r, c| h_full[(free[r], free[c])]);
        let mut dir = newton_direction(&h_free, &g_free, 1e-8);
        let biggest = dir.amax();
        if biggest > controls.max_step {
            dir *= controls.max_step / biggest;
        }
        let slope = g_free.dot(&dir);
        // Rounding floor on the objective, below which no decrease is measurable.
        let noise = 1e-13 * (1.0 + pt.value.abs());
        if -slope <= noise {
            break;
        }
        let base = pt.tau.to_vec();
        let mut alpha = 1.0;
        let mut next = None;
        for _ in 0..=controls.max_halvings {
            let mut v = base.clone();
            for (k, &i) in free.iter().enumerate() {
                v[i] += alpha * dir[k];
            }
            project(&mut v);
            let moved = directional(pt.grad.as_slice(), &v, &base, &free);
            let trial_tau = Tau::from_slice(&v, &scheme)?;
            if let Ok(trial) = m_point(trial_tau, &stats, data, &pt.b, &controls.mode) {
                if moved < 0.0 && trial.value.is_finite() && trial.value <= pt.value + 1e-4 * moved + noise {
                    next = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match next {
            Some(n) => pt = n,
            None => {
                return Err(Error::Numerical(format!(
                    "M-step could not decrease the objective after {} step halvings (gradient sup-norm {:.3e})",
                    controls.max_halvings,
                    g_free.amax()
                )))
            }
        }
        if pt.tau.fixed.beta0 < BETA0_FLOOR {
            return Err(Error::Boundary(format!("beta0 = {:.3} is running off to -infinity; no finite MLE", pt.tau.fixed.beta0)));
        }
    }
    Ok(pt.tau)
}

/// Moment-matched starting point: `beta0 = 1/2 ln(mean y / mean m_a m_b)`,
/// every theta component `-0.5`, `ln sigma^2 = -4`.
pub fn default_init(data: &MatchDataset) -> Result<Tau> {
    if data.is_empty() {
        return Err(Error::input("dataset has no impostor pairs"));
    }
    let n = data.len() as f64;
    let y_mean = data.total_matches() / n;
    let mm_mean = data.pairs().iter().map(|p| p.cov.m_a as f64 * p.cov.m_b as f64).sum::<f64>() / n;
    if y_mean <= 0.0 {
        return Err(Error::Boundary("all match counts are zero; no finite MLE".into()));
    }
    let scheme = data.scheme();
    Ok(Tau::new(vec![-0.5; scheme.n_theta()], 0.5 * (y_mean / mm_mean).ln(), -4.0))
}

/// Runs EM from `init` (or [`default_init`]) to convergence.
pub fn fit(data: &MatchDataset, init: Option<Tau>, controls: &EmControls) -> Result<FitResult> {
    let scheme = data.scheme();
    if data.f() < 2 || data.is_empty() {
        return Err(Error::input("fitting needs at least two fingers and one impostor pair"));
    }
    if data.total_matches() <= 0.0 {
        return Err(Error::Boundary("all match counts are zero; no finite MLE".into()));
    }
    let mut tau = match init {
        Some(t) => t,
        None => default_init(data)?,
    };
    tau.check(&scheme)?;
    if controls.is_free(scheme.n_params() - 1) {
        tau.log_sigma2 = tau.log_sigma2.max(MIN_LOG_SIGMA2);
    }

    let (g0, mut b) = profile_value(&tau, data, None, &controls.mode)?;
    let mut obj = -g0;
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let em_map = |t: &Tau, objective: f64, iteration: usize| -> Result<Tau> {
        let state = EmState { tau_k: t.clone(), expected_counts: e_step(t, data)?, objective_k: objective, iteration };
        m_step(&state, data, controls)
    };
    let has_converged = |t0: &Tau, o0: f64, t1: &Tau, o1: f64| {
        let step = t1.to_vec().iter().zip(t0.to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rel = (o1 - o0).abs() / o0.abs().max(1e-300);
        rel <= controls.rel_tol && step <= controls.step_tol
    };
    let warn_if_descent = |prev: f64, next: f64, it: usize| {
        if next < prev - 1e-8 * (1.0 + prev.abs()) {
            log::warn!("EM objective decreased at iteration {it}: {prev} -> {next}");
        }
    };
    while iterations < controls.max_iter {
        let t1 = em_map(&tau, obj, iterations)?;
        iterations += 1;
        let (g1, b1) = profile_value(&t1, data, Some(&b), &controls.mode)?;
        warn_if_descent(obj, -g1, iterations);
        trace.push(-g1);
        if has_converged(&tau, obj, &t1, -g1) {
            (tau, b) = (t1, b1);
            converged = true;
            break;
        }
        if !controls.accelerate || iterations >= controls.max_iter {
            (tau, obj, b) = (t1, -g1, b1);
            continue;
        }
        let t2 = em_map(&t1, -g1, iterations)?;
        iterations += 1;
        let (g2, b2) = profile_value(&t2, data, Some(&b1), &controls.mode)?;
        warn_if_descent(-g1, -g2, iterations);
        let mut best = (t2, -g2, b2);
        if let Some(ext) = extrapolate(&tau, &t1, &best.0, best.1, data, &best.2, controls) {
            best = ext;
            // One plain EM step from the extrapolated point keeps the
            // sequence close to the EM path.
            if iterations < controls.max_iter {
                let t3 = em_map(&best.0, best.1, iterations)?;
                iterations += 1;
                let (g3, b3) = profile_value(&t3, data, Some(&best.2), &controls.mode)?;
                warn_if_descent(best.1, -g3, iterations);
                best = (t3, -g3, b3);
            }
        }
        trace.push(best.1);
        let done = has_converged(&t1, -g1, &best.0, best.1);
        (tau, obj, b) = best;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped after {iterations} iterations without meeting the convergence criteria");
    }
    let refined = refine(tau, b, obj, data, controls, &mut trace)?;
    (tau, b) = (refined.tau, refined.b);
    converged = refined.stationary;
    if !converged {
        log::warn!("fit did not reach a stationary point (Newton decrement {:.3e})", refined.decrement);
    }
    if tau.log_sigma2 <= MIN_LOG_SIGMA2 {
        log::warn!("log sigma^2 stopped at the solver floor {MIN_LOG_SIGMA2}: the data favour no finger effect (sigma^2 = 0)");
    }
    let nonneg: Vec<String> =
        scheme.param_names().into_iter().zip(tau.fixed.to_vec()).filter(|(_, v)| *v >= 0.0).map(|(n, v)| format!("{n} = {v:.4}")).collect();
    if !nonneg.is_empty() {
        log::warn!("fitted fixed effects are not negative: {}", nonneg.join(", "));
    }
    let tau_hessian = profile_hessian(&tau, data)?;
    Ok(FitResult {
        tau_hat: tau,
        tau_hessian,
        em_iterations: iterations,
        converged,
        refine_iterations: refined.iterations,
        objective_trace: trace,
        b_hat: b,
        fixed: (0..scheme.n_params()).map(|i| !controls.is_free(i)).collect(),
    })
}

struct Refined {
    tau: Tau,
    b: Vec<f64>,
    iterations: usize,
    decrement: f64,
    stationary: bool,
}

/// Safeguarded Newton on the observed profile `g(tau, b_hat(tau))`, the
/// objective EM ascends, from the point where EM stopped. Accepted
/// iterates are appended to `trace`.
fn refine(tau: Tau, b: Vec<f64>, obj: f64, data: &MatchDataset, controls: &EmControls, trace: &mut Vec<f64>) -> Result<Refined> {
    let scheme = data.scheme();
    let free = free_coords(scheme.n_params(), controls);
    let mut cur = Refined { tau, b, iterations: 0, decrement: f64::INFINITY, stationary: false };
    let mut g_cur = -obj;
    if free.is_empty() {
        cur.decrement = 0.0;
        cur.stationary = true;
        return Ok(cur);
    }
    loop {
        let grad = profile_gradient_at(&cur.tau, &cur.b, data);
        let hess = profile_hessian(&cur.tau, data)?;
        let free = active_free(&free, &cur.tau.to_vec(), grad.as_slice());
        if free.is_empty() {
            cur.decrement = 0.0;
            cur.stationary = true;
            return Ok(cur);
        }
        let g_free = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
        let h_free = DMatrix::from_fn(free.len(), free.len(), |r, c| hess[(free[r], free[c])]);
        let mut dir = newton_direction(&h_free, &g_free, 1e-6);
        let biggest = dir.amax();
        if biggest > controls.max_step {
            dir *= controls.max_step / biggest;
        }
        let slope = g_free.dot(&dir);
        cur.decrement = -0.5 * slope;
        if cur.decrement <= controls.refine_tol {
            cur.stationary = true;
            return Ok(cur);
        }
        if cur.iterations >= controls.refine_max_iter {
            return Ok(cur);
        }
        let noise = 1e-13 * (1.0 + g_cur.abs());
        let base = cur.tau.to_vec();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=controls.max_halvings {
            let mut v = base.clone();
            for (k, &i) in free.iter().enumerate() {
                v[i] += alpha * dir[k];
            }
            project(&mut v);
            let moved = directional(grad.as_slice(), &v, &base, &free);
            if let Ok(t) = Tau::from_slice(&v, &scheme) {
                if let Ok((g, b)) = profile_value(&t, data, Some(&cur.b), &controls.mode) {
                    if moved < 0.0 && g.is_finite() && g <= g_cur + 1e-4 * moved + noise {
                        accepted = Some((t, g, b));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((t, g, b)) = accepted else {
            // No measurable decrease along a descent direction: the
            // remaining decrement is below rounding.
            cur.stationary = cur.decrement <= (1e3 * controls.refine_tol).max(100.0 * noise);
            return Ok(cur);
        };
        if t.fixed.beta0 < BETA0_FLOOR {
            return Err(Error::Boundary(format!("beta0 = {:.3} is running off to -infinity; no finite MLE", t.fixed.beta0)));
        }
        cur.iterations += 1;
        trace.push(-g);
        (cur.tau, cur.b, g_cur) = (t, b, g);
    }
}

/// Squared extrapolation from `t0 -> t1 -> t2`, returning a point that
/// beats `obj2` if one is found within a few backtracks.
fn extrapolate(
    t0: &Tau,
    t1: &Tau,
    t2: &Tau,
    obj2: f64,
    data: &MatchDataset,
    b2: &[f64],
    controls: &EmControls,
) -> Option<(Tau, f64, Vec<f64>)> {
    let (v0, v1, v2) = (DVector::from_vec(t0.to_vec()), DVector::from_vec(t1.to_vec()), DVector::from_vec(t2.to_vec()));
    let r = &v1 - &v0;
    let v = &v2 - &v1 - &r;
    if v.norm() <= 1e-14 * (1.0 + r.norm()) {
        return None;
    }
    let mut alpha = -(r.norm() / v.norm());
    for _ in 0..6 {
        if alpha > -1.0 {
            return None;
        }
        let mut cand = &v0 - 2.0 * alpha * &r + alpha * alpha * &v;
        project(cand.as_mut_slice());
        let accepted = Tau::from_slice(cand.as_slice(), &data.scheme())
            .ok()
            .filter(|t| t.fixed.beta0 >= BETA0_FLOOR)
            .and_then(|t| profile_value(&t, data, Some(b2), &controls.mode).ok().map(|(g, b)| (t, -g, b)))
            .filter(|(_, o, _)| o.is_finite() && *o > obj2);
        if accepted.is_some() {
            return accepted;
        }
        alpha = 0.5 * (alpha - 1.0);
    }
    None
}

/// Curvature of the observed profile `g(tau, b_hat(tau))` in closed form,
/// `G_tt - G_tb G_bb^{-1} G_bt` with the second partials of `g` taken at
/// the mode.
pub fn profile_hessian(tau: &Tau, data: &MatchDataset) -> Result<DMatrix<f64>> {
    let opts = ModeOptions { tol: 1e-12, max_iter: 100 };
    let mode = likelihood::find_mode(tau, data, &opts)?;
    let derivs = block_derivs(&tau.fixed, data, true);
    let p = derivs.yx.len();
    let n = data.f();
    let b = &mode.b_hat;
    let es = shifts(data, b);
    let mut g_tt = DMatrix::zeros(p + 1, p + 1);
    let mut g_tb = DMatrix::zeros(p + 1, n);
    for (k, &(fa, fb)) in data.layout().blocks.iter().enumerate() {
        for i in 0..p {
            for j in 0..p {
                g_tt[(i, j)] += es[k] * derivs.cxx[k][(i, j)];
            }
            let v = es[k] * derivs.cx[k][i];
            g_tb[(i, fa)] += v;
            g_tb[(i, fb)] += v;
        }
    }
    for i in 0..p {
        for j in 0..p {
            g_tt[(i, j)] -= derivs.yvar[(i, j)];
        }
    }
    let s2 = clamp_log_sigma2(tau.log_sigma2).exp();
    g_tt[(p, p)] = b.iter().map(|x| x * x).sum::<f64>() / (2.0 * s2);
    for (f, bf) in b.iter().enumerate() {
        g_tb[(p, f)] = -bf / s2;
    }
    let chol =
        Cholesky::new(mode.hessian.clone()).ok_or_else(|| Error::Numerical("random-effects Hessian is not positive definite".into()))?;
    let m = g_tt - &g_tb * chol.solve(&g_tb.transpose());
    Ok(0.5 * (&m + m.transpose()))
}

/// Central differences of the profile gradient; an independent route to
/// [`profile_hessian`].
pub fn profile_hessian_fd(tau: &Tau, data: &MatchDataset) -> Result<DMatrix<f64>> {
    let scheme = data.scheme();
    let base = tau.to_vec();
    let np = base.len();
    let opts = ModeOptions { tol: 1e-12, max_iter: 100 };
    let centre = likelihood::find_mode(tau, data, &opts)?;
    let cols = par::map_range(np, |i| -> Result<DVector<f64>> {
        let h = 1e-5 * (1.0 + base[i].abs());
        let grad_at = |delta: f64| -> Result<DVector<f64>> {
            let mut v = base.clone();
            v[i] += delta;
            let t = Tau::from_slice(&v, &scheme)?;
            let mode = likelihood::find_mode_from(&t, data, Some(&centre.b_hat), &opts)?;
            Ok(profile_gradient_at(&t, &mode.b_hat, data))
        };
        Ok((grad_at(h)? - grad_at(-h)?) / (2.0 * h))
    });
    let mut m = DMatrix::zeros(np, np);
    for (i, col) in cols.into_iter().enumerate() {
        m.set_column(i, &col?);
    }
    Ok(0.5 * (&m + m.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MatchRecord;
    use crate::model::QualityScheme;

    fn tiny() -> MatchDataset {
        let mut recs = Vec::new();
        let q = [1.0, 2.0, 3.0];
        let m = [18, 25, 38];
        for fa in 0..3u32 {
            for fb in fa + 1..3 {
                for ia in 0..2u32 {
                    for ib in 0..2u32 {
                        let qa = ((fa + 2 * ia) % 3) as usize;
                        let qb = ((fb + 2 * ib) % 3) as usize;
                        recs.push(MatchRecord {
                            finger_a: fa,
                            impr_a: ia,
                            finger_b: fb,
                            impr_b: ib,
                            m_a: m[qa],
                            m_b: m[qb],
                            q_a: q[qa],
                            q_b: q[qb],
                            y: (fa + fb + ia + ib) % 4 + 1,
                        });
                    }
                }
            }
        }
        MatchDataset::from_records(recs, QualityScheme::Categorical { qmax: 3 }).unwrap()
    }

    #[test]
    fn e_step_uniform_split() {
        let data = MatchDataset::from_records(
            vec![MatchRecord { finger_a: 0, impr_a: 0, finger_b: 1, impr_b: 0, m_a: 10, m_b: 10, q_a: 0.0, q_b: 0.0, y: 8 }],
            QualityScheme::Continuous,
        )
        .unwrap();
        let tau = Tau::new(vec![0.0, 0.0], 0.0, -4.0);
        assert_eq!(e_step(&tau, &data).unwrap(), vec![[2.0, 2.0, 2.0, 2.0]]);
    }

    #[test]
    fn complete_objective_matches_direct_sum() {
        let data = tiny();
        let tau = Tau::new(vec![-3.0, -0.7, -1.5], -2.7, -1.0);
        let counts = e_step(&tau, &data).unwrap();
        let b = [0.1, -0.2, 0.05];
        let direct = likelihood::neg_log_complete(&tau.fixed, &b, &counts, &data).unwrap() + prior_value(&b, tau.log_sigma2);
        let via_stats = g_complete(&tau, &b, &counts, &data).unwrap();
        assert!((direct - via_stats).abs() <= 1e-10 * direct.abs());
    }

    #[test]
    fn zero_total_is_boundary() {
        let data = MatchDataset::from_records(
            vec![MatchRecord { finger_a: 0, impr_a: 0, finger_b: 1, impr_b: 0, m_a: 10, m_b: 10, q_a: 0.5, q_b: 0.5, y: 0 }],
            QualityScheme::Continuous,
        )
        .unwrap();
        assert!(matches!(fit(&data, None, &EmControls::default()), Err(Error::Boundary(_))));
    }
}
