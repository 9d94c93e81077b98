//! Parameter types, design vectors and per-pair probability formulas.
//!
//! For an impostor pair `(i, j)` the four match types `(u, v)` (0 = genuine,
//! 1 = spurious minutia on print i / print j) have linear predictors
//!
//! ```text
//! eta(0,0) = 2 beta0
//! eta(0,1) = beta0 + theta0 + s(Q_j)
//! eta(1,0) = beta0 + theta0 + s(Q_i)
//! eta(1,1) = 2 theta0 + s(Q_i) + s(Q_j)
//! ```
//!
//! where `s(Q) = theta1 * Q` for continuous quality and
//! `s(Q) = theta1 + ... + theta_{Q-1}` for categorical labels (empty sum for
//! `Q = 1`). The stacked fixed-effect vector is `[theta..., beta0]` and the
//! full parameter vector appends `log sigma^2`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How image quality enters the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QualityScheme {
    /// Quality in `[0, 1]`, one slope `theta1`.
    Continuous,
    /// Labels `1..=qmax` (higher is better), increments `theta1..theta_{qmax-1}`.
    Categorical { qmax: u32 },
}

impl QualityScheme {
    /// Length of `theta` (including `theta0`).
    pub fn n_theta(&self) -> usize {
        match *self {
            QualityScheme::Continuous => 2,
            QualityScheme::Categorical { qmax } => qmax as usize,
        }
    }

    /// Fixed-effect dimension `p` (theta plus beta0).
    pub fn n_fixed(&self) -> usize {
        self.n_theta() + 1
    }

    /// Full parameter dimension `p + 1` (adds `log sigma^2`).
    pub fn n_params(&self) -> usize {
        self.n_fixed() + 1
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            QualityScheme::Categorical { qmax } if qmax < 1 => Err(Error::Config("categorical scheme needs qmax >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn check_quality(&self, q: f64) -> Result<()> {
        match *self {
            QualityScheme::Continuous => {
                if (0.0..=1.0).contains(&q) {
                    Ok(())
                } else {
                    Err(Error::input(format!("continuous quality {q} outside [0, 1]")))
                }
            }
            QualityScheme::Categorical { qmax } => {
                if q.fract() == 0.0 && q >= 1.0 && q <= qmax as f64 {
                    Ok(())
                } else {
                    Err(Error::input(format!("categorical label {q} outside 1..={qmax}")))
                }
            }
        }
    }

    /// Names of the stacked parameters, in order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.n_theta()).map(|k| format!("theta{k}")).collect();
        names.push("beta0".into());
        names.push("log_sigma2".into());
        names
    }

    /// Parses `continuous` or `categorical:<qmax>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("continuous") {
            return Ok(QualityScheme::Continuous);
        }
        if let Some(rest) = s.strip_prefix("categorical:") {
            let qmax: u32 = rest.trim().parse().map_err(|_| Error::input(format!("bad qmax in scheme '{s}'")))?;
            let scheme = QualityScheme::Categorical { qmax };
            scheme.validate()?;
            return Ok(scheme);
        }
        Err(Error::input(format!("unknown quality scheme '{s}' (expected 'continuous' or 'categorical:<qmax>')")))
    }
}

impl std::fmt::Display for QualityScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QualityScheme::Continuous => write!(f, "continuous"),
            QualityScheme::Categorical { qmax } => write!(f, "categorical:{qmax}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub theta: Vec<f64>,
    pub beta0: f64,
}

impl FixedEffects {
    pub fn new(theta: Vec<f64>, beta0: f64) -> Self {
        Self { theta, beta0 }
    }

    pub fn check(&self, scheme: &QualityScheme) -> Result<()> {
        if self.theta.len() != scheme.n_theta() {
            return Err(Error::Config(format!("scheme {scheme} needs {} theta components, got {}", scheme.n_theta(), self.theta.len())));
        }
        Ok(())
    }

    /// Stacked `[theta..., beta0]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.push(self.beta0);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let (beta0, theta) = v.split_last().expect("non-empty fixed-effect vector");
        Self { theta: theta.to_vec(), beta0: *beta0 }
    }
}

/// Full fixed-parameter vector: fixed effects plus `log sigma^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tau {
    pub fixed: FixedEffects,
    pub log_sigma2: f64,
}

impl Tau {
    pub fn new(theta: Vec<f64>, beta0: f64, log_sigma2: f64) -> Self {
        Self { fixed: FixedEffects::new(theta, beta0), log_sigma2 }
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    /// Stacked `[theta..., beta0, log_sigma2]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.fixed.to_vec();
        v.push(self.log_sigma2);
        v
    }

    pub fn from_slice(v: &[f64], scheme: &QualityScheme) -> Result<Self> {
        if v.len() != scheme.n_params() {
            return Err(Error::Config(format!("scheme {scheme} needs {} parameters, got {}", scheme.n_params(), v.len())));
        }
        let (ls2, fixed) = v.split_last().unwrap();
        Ok(Self { fixed: FixedEffects::from_slice(fixed), log_sigma2: *ls2 })
    }

    pub fn check(&self, scheme: &QualityScheme) -> Result<()> {
        self.fixed.check(scheme)?;
        if !self.log_sigma2.is_finite() || self.to_vec().iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Covariates of one impostor pair. Finger indices are dense `0..F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCovariates {
    pub finger_a: usize,
    pub finger_b: usize,
    pub m_a: u32,
    pub m_b: u32,
    pub q_a: f64,
    pub q_b: f64,
}

impl PairCovariates {
    /// `K = log(m_a m_b)`.
    pub fn log_mm(&self) -> f64 {
        (self.m_a as f64 * self.m_b as f64).ln()
    }
}

/// Quality contribution `s(Q)` shared by the spurious-type predictors.
fn quality_shift(theta: &[f64], q: f64, scheme: &QualityScheme) -> f64 {
    match scheme {
        QualityScheme::Continuous => theta[1] * q,
        QualityScheme::Categorical { .. } => {
            let upto = q as usize;
            theta[1..upto.max(1)].iter().sum()
        }
    }
}

fn check_inputs(fixed: &FixedEffects, q_a: f64, q_b: f64, scheme: &QualityScheme) -> Result<()> {
    fixed.check(scheme)?;
    scheme.check_quality(q_a)?;
    scheme.check_quality(q_b)
}

/// Linear predictor `eta^{(u,v)}` for one pair.
pub fn eta_component(fixed: &FixedEffects, q_a: f64, q_b: f64, u: u8, v: u8, scheme: &QualityScheme) -> Result<f64> {
    check_inputs(fixed, q_a, q_b, scheme)?;
    Ok(eta_unchecked(&fixed.theta, fixed.beta0, q_a, q_b, u, v, scheme))
}

pub(crate) fn eta_unchecked(theta: &[f64], beta0: f64, q_a: f64, q_b: f64, u: u8, v: u8, scheme: &QualityScheme) -> f64 {
    let theta0 = theta[0];
    match (u, v) {
        (0, 0) => 2.0 * beta0,
        (0, 1) => beta0 + theta0 + quality_shift(theta, q_b, scheme),
        (1, 0) => beta0 + theta0 + quality_shift(theta, q_a, scheme),
        _ => 2.0 * theta0 + (quality_shift(theta, q_a, scheme) + quality_shift(theta, q_b, scheme)),
    }
}

/// The four predictors in `(0,0), (0,1), (1,0), (1,1)` order.
pub(crate) fn etas(theta: &[f64], beta0: f64, q_a: f64, q_b: f64, scheme: &QualityScheme) -> [f64; 4] {
    let sa = quality_shift(theta, q_a, scheme);
    let sb = quality_shift(theta, q_b, scheme);
    let t0 = theta[0];
    [2.0 * beta0, beta0 + t0 + sb, beta0 + t0 + sa, 2.0 * t0 + (sa + sb)]
}

/// Row `x'(u,v)` with `x'(u,v) . [theta..., beta0] = eta^{(u,v)}`.
pub fn design_row(q_a: f64, q_b: f64, u: u8, v: u8, scheme: &QualityScheme) -> Result<Vec<f64>> {
    scheme.check_quality(q_a)?;
    scheme.check_quality(q_b)?;
    Ok(design_row_unchecked(q_a, q_b, u, v, scheme))
}

pub(crate) fn design_row_unchecked(q_a: f64, q_b: f64, u: u8, v: u8, scheme: &QualityScheme) -> Vec<f64> {
    let p = scheme.n_fixed();
    let beta = p - 1;
    let mut row = vec![0.0; p];
    let add_shift = |row: &mut Vec<f64>, q: f64| match scheme {
        QualityScheme::Continuous => row[1] += q,
        QualityScheme::Categorical { .. } => {
            for slot in row.iter_mut().take(q as usize).skip(1) {
                *slot += 1.0;
            }
        }
    };
    match (u, v) {
        (0, 0) => row[beta] = 2.0,
        (0, 1) => {
            row[0] = 1.0;
            row[beta] = 1.0;
            add_shift(&mut row, q_b);
        }
        (1, 0) => {
            row[0] = 1.0;
            row[beta] = 1.0;
            add_shift(&mut row, q_a);
        }
        _ => {
            row[0] = 2.0;
            add_shift(&mut row, q_a);
            add_shift(&mut row, q_b);
        }
    }
    row
}

/// Overflow-safe `log sum exp` of the four predictors. The summation
/// pairs `(0,1)` with `(1,0)` so the result is bitwise symmetric under
/// swapping the two prints.
pub(crate) fn log_sum4(e: &[f64; 4]) -> f64 {
    let m = e[0].max(e[3]).max(e[1].max(e[2]));
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s = ((e[0] - m).exp() + (e[3] - m).exp()) + ((e[1] - m).exp() + (e[2] - m).exp());
    m + s.ln()
}

/// `H_ij(theta) = log sum_{u,v} exp(eta^{(u,v)})`.
pub fn log_sum_eta(fixed: &FixedEffects, q_a: f64, q_b: f64, scheme: &QualityScheme) -> Result<f64> {
    check_inputs(fixed, q_a, q_b, scheme)?;
    Ok(log_sum4(&etas(&fixed.theta, fixed.beta0, q_a, q_b, scheme)))
}

/// Multinomial split probabilities `p^{(u,v)} / p` in `(0,0), (0,1), (1,0), (1,1)` order.
pub fn match_type_probs(fixed: &FixedEffects, q_a: f64, q_b: f64, scheme: &QualityScheme) -> Result<[f64; 4]> {
    check_inputs(fixed, q_a, q_b, scheme)?;
    Ok(type_probs_unchecked(&fixed.theta, fixed.beta0, q_a, q_b, scheme))
}

pub(crate) fn type_probs_unchecked(theta: &[f64], beta0: f64, q_a: f64, q_b: f64, scheme: &QualityScheme) -> [f64; 4] {
    let e = etas(theta, beta0, q_a, q_b, scheme);
    let h = log_sum4(&e);
    [(e[0] - h).exp(), (e[1] - h).exp(), (e[2] - h).exp(), (e[3] - h).exp()]
}

/// Poisson rate `lambda^{(u,v)} = m_a m_b exp(b_a + b_b + eta^{(u,v)})`.
pub fn pair_rate(tau: &Tau, pair: &PairCovariates, b_a: f64, b_b: f64, u: u8, v: u8, scheme: &QualityScheme) -> Result<f64> {
    if pair.m_a == 0 || pair.m_b == 0 {
        return Err(Error::input("minutia counts must be positive"));
    }
    let eta = eta_component(&tau.fixed, pair.q_a, pair.q_b, u, v, scheme)?;
    let x = b_a + b_b + eta;
    let mm = pair.m_a as f64 * pair.m_b as f64;
    let scaled = mm * x.exp();
    if scaled.is_finite() {
        Ok(scaled)
    } else {
        let log_rate = mm.ln() + x;
        let r = log_rate.exp();
        if r.is_finite() {
            Ok(r)
        } else {
            Err(Error::Numerical(format!("rate overflow (log rate {log_rate})")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const CAT3: QualityScheme = QualityScheme::Categorical { qmax: 3 };

    fn db1_cat() -> FixedEffects {
        FixedEffects::new(vec![-3.4857, -0.7429, -1.6144], -2.7297)
    }

    fn cont() -> FixedEffects {
        FixedEffects::new(vec![-1.0, -2.0], -3.0)
    }

    #[test]
    fn eta_continuous_examples() {
        let s = QualityScheme::Continuous;
        assert_eq!(eta_component(&cont(), 0.5, 0.5, 0, 0, &s).unwrap(), -6.0);
        assert_eq!(eta_component(&cont(), 0.5, 0.5, 0, 1, &s).unwrap(), -5.0);
    }

    #[test]
    fn eta_categorical_db1() {
        let e = eta_component(&db1_cat(), 3.0, 3.0, 0, 0, &CAT3).unwrap();
        assert_abs_diff_eq!(e, -5.4594, epsilon = 1e-12);
        let e01 = eta_component(&db1_cat(), 3.0, 3.0, 0, 1, &CAT3).unwrap();
        assert_abs_diff_eq!(e01, -8.5727, epsilon = 1e-12);
        let e11 = eta_component(&db1_cat(), 3.0, 3.0, 1, 1, &CAT3).unwrap();
        assert_abs_diff_eq!(e11, -11.686, epsilon = 1e-12);
    }

    #[test]
    fn label_one_has_empty_increment_sum() {
        let fx = db1_cat();
        let e = eta_component(&fx, 2.0, 1.0, 0, 1, &CAT3).unwrap();
        assert_eq!(e, fx.beta0 + fx.theta[0]);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let err = eta_component(&cont(), 1.0, 1.0, 0, 0, &CAT3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn invalid_quality_rejected() {
        assert!(eta_component(&cont(), 1.2, 0.5, 0, 0, &QualityScheme::Continuous).is_err());
        assert!(eta_component(&db1_cat(), 4.0, 1.0, 0, 0, &CAT3).is_err());
        assert!(eta_component(&db1_cat(), 1.5, 1.0, 0, 0, &CAT3).is_err());
    }

    #[test]
    fn design_row_examples() {
        let s = QualityScheme::Continuous;
        assert_eq!(design_row(0.1, 0.9, 0, 0, &s).unwrap(), vec![0.0, 0.0, 2.0]);
        assert_eq!(design_row(0.3, 0.7, 1, 1, &s).unwrap(), vec![2.0, 1.0, 0.0]);
        assert_eq!(design_row(2.0, 3.0, 1, 1, &CAT3).unwrap(), vec![2.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn log_sum_eta_examples() {
        let zero = FixedEffects::new(vec![0.0, 0.0], 0.0);
        let h = log_sum_eta(&zero, 0.4, 0.6, &QualityScheme::Continuous).unwrap();
        assert_abs_diff_eq!(h, 4f64.ln(), epsilon = 1e-15);
        let h = log_sum_eta(&db1_cat(), 3.0, 3.0, &CAT3).unwrap();
        let oracle = [-5.4594f64, -8.5727, -8.5727, -11.686].iter().map(|e| e.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(h, oracle, epsilon = 1e-13);
        assert_abs_diff_eq!(h, -5.3719, epsilon = 1e-3);
    }

    #[test]
    fn log_sum_shift_identity() {
        let e = [-3.0, -1.5, 0.25, 7.0];
        let c = 123.5;
        let shifted = [e[0] + c, e[1] + c, e[2] + c, e[3] + c];
        assert_abs_diff_eq!(log_sum4(&shifted), log_sum4(&e) + c, epsilon = 1e-12);
        // no overflow for large arguments
        assert!(log_sum4(&[800.0, 799.0, 1.0, 0.0]).is_finite());
    }

    #[test]
    fn probs_examples() {
        let zero = FixedEffects::new(vec![0.0, 0.0], 0.0);
        let p = match_type_probs(&zero, 0.2, 0.2, &QualityScheme::Continuous).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 0.25, epsilon = 1e-15);
        }
        let p = match_type_probs(&db1_cat(), 3.0, 3.0, &CAT3).unwrap();
        let ex = [-5.4594f64, -8.5727, -8.5727, -11.686].map(f64::exp);
        let oracle = ex[0] / ex.iter().sum::<f64>();
        assert_abs_diff_eq!(p[0], oracle, epsilon = 1e-13);
        assert_abs_diff_eq!(p[0], 0.9165, epsilon = 5e-4);
    }

    #[test]
    fn pair_rate_examples() {
        let tau = Tau::new(vec![0.0, 0.0], 0.0, -4.0);
        let pair = PairCovariates { finger_a: 0, finger_b: 1, m_a: 1, m_b: 1, q_a: 0.5, q_b: 0.5 };
        assert_eq!(pair_rate(&tau, &pair, 0.0, 0.0, 0, 0, &QualityScheme::Continuous).unwrap(), 1.0);

        let tau = Tau::new(db1_cat().theta, db1_cat().beta0, -4.9537);
        let pair = PairCovariates { finger_a: 0, finger_b: 1, m_a: 38, m_b: 38, q_a: 3.0, q_b: 3.0 };
        let r = pair_rate(&tau, &pair, 0.0, 0.0, 0, 0, &CAT3).unwrap();
        assert_abs_diff_eq!(r, 1444.0 * (-5.4594f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 6.147, epsilon = 2e-3);

        let doubled = PairCovariates { m_a: 76, ..pair };
        let r2 = pair_rate(&tau, &doubled, 0.1, -0.2, 1, 0, &CAT3).unwrap();
        let r1 = pair_rate(&tau, &pair, 0.1, -0.2, 1, 0, &CAT3).unwrap();
        assert_eq!(r2, 2.0 * r1);
    }

    fn arb_case() -> impl Strategy<Value = (QualityScheme, Vec<f64>, f64, f64, u8, u8)> {
        (1u32..6, any::<bool>()).prop_flat_map(|(qmax, continuous)| {
            let scheme = if continuous { QualityScheme::Continuous } else { QualityScheme::Categorical { qmax } };
            let quality = move || -> BoxedStrategy<f64> {
                if continuous {
                    (0.0..=1.0f64).boxed()
                } else {
                    (1..=qmax).prop_map(|q| q as f64).boxed()
                }
            };
            (Just(scheme), proptest::collection::vec(-6.0..2.0f64, scheme.n_fixed()), quality(), quality(), 0u8..2, 0u8..2)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn design_row_reproduces_eta((scheme, phi, qa, qb, u, v) in arb_case()) {
            let fx = FixedEffects::from_slice(&phi);
            let row = design_row(qa, qb, u, v, &scheme).unwrap();
            let dot: f64 = row.iter().zip(&phi).map(|(x, t)| x * t).sum();
            let eta = eta_component(&fx, qa, qb, u, v, &scheme).unwrap();
            prop_assert!((dot - eta).abs() <= 1e-14 * (1.0 + eta.abs()));
        }

        #[test]
        fn probs_sum_to_one_with_unit_odds_ratio((scheme, phi, qa, qb, _u, _v) in arb_case()) {
            let fx = FixedEffects::from_slice(&phi);
            let p = match_type_probs(&fx, qa, qb, &scheme).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for x in p {
                prop_assert!(x > 0.0 && x < 1.0);
            }
            let lhs = p[3] * p[0];
            let rhs = p[1] * p[2];
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(rhs).max(1e-300));
        }

        #[test]
        fn swapping_prints_leaves_eta_unchanged((scheme, phi, qa, qb, u, v) in arb_case()) {
            let fx = FixedEffects::from_slice(&phi);
            let a = eta_component(&fx, qa, qb, u, v, &scheme).unwrap();
            let b = eta_component(&fx, qb, qa, v, u, &scheme).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn spurious_odds_fall_with_quality(qmax in 2u32..6, incs in proptest::collection::vec(-3.0..-0.01f64, 5), t0 in -5.0..-1.0f64, b0 in -5.0..-1.0f64, qa in 1u32..6, u in 0u8..2) {
            let scheme = QualityScheme::Categorical { qmax };
            let qa = qa.min(qmax) as f64;
            let mut theta = vec![t0];
            theta.extend_from_slice(&incs[..qmax as usize - 1]);
            let fx = FixedEffects::new(theta, b0);
            let odds = |qj: f64| {
                let p = match_type_probs(&fx, qa, qj, &scheme).unwrap();
                if u == 0 { p[1] / p[0] } else { p[3] / p[2] }
            };
            for q in 1..qmax {
                prop_assert!(odds(q as f64 + 1.0) < odds(q as f64));
            }
        }
    }
}
