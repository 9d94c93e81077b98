//! Minutia geometry and alignment-based correspondence counting.

use std::f64::consts::{PI, TAU};

use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minutia {
    pub x: f64,
    pub y: f64,
    /// Radians in `(0, 2pi]`.
    pub direction: f64,
}

impl Minutia {
    /// Builds a minutia, normalizing the direction into `(0, 2pi]`.
    pub fn new(x: f64, y: f64, direction: f64) -> Self {
        Self { x, y, direction: normalize_angle(direction) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Distance tolerance in pixels.
    pub r0: f64,
    /// Direction tolerance in radians.
    pub u0: f64,
    /// Align on every anchor pair before counting; otherwise compare raw coordinates.
    pub anchor_search: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { r0: 15.0, u0: PI / 8.0, anchor_search: true }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(Error::Config(format!("r0 must be positive, got {}", self.r0)));
        }
        if !(self.u0 > 0.0 && self.u0 <= PI) {
            return Err(Error::Config(format!("u0 must lie in (0, pi], got {}", self.u0)));
        }
        Ok(())
    }
}

/// Maps any finite angle into `(0, 2pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r == 0.0 {
        TAU
    } else {
        r
    }
}

/// `min(|u - v|, 2pi - |u - v|)` for directions in `(0, 2pi]`.
pub fn angular_distance(u: f64, v: f64) -> Result<f64> {
    for a in [u, v] {
        if !(a > 0.0 && a <= TAU) {
            return Err(Error::input(format!("direction {a} outside (0, 2pi]")));
        }
    }
    Ok(angle_gap(u, v))
}

fn angle_gap(u: f64, v: f64) -> f64 {
    let d = (u - v).abs();
    d.min(TAU - d)
}

pub fn is_match(a: &Minutia, b: &Minutia, cfg: &MatchConfig) -> bool {
    let d = (a.x - b.x).hypot(a.y - b.y);
    d < cfg.r0 && angle_gap(a.direction, b.direction) < cfg.u0
}

/// Rigid motion taking `from` onto `to` (location and direction).
fn align(set: &[Minutia], from: &Minutia, to: &Minutia) -> Vec<Minutia> {
    let rot = to.direction - from.direction;
    let (s, c) = rot.sin_cos();
    set.iter()
        .map(|m| {
            let dx = m.x - from.x;
            let dy = m.y - from.y;
            Minutia { x: to.x + c * dx - s * dy, y: to.y + s * dx + c * dy, direction: normalize_angle(m.direction + rot) }
        })
        .collect()
}

/// Size of a maximum one-to-one matching between `a` and `b` under the
/// match predicate (augmenting paths).
pub fn max_matching(a: &[Minutia], b: &[Minutia], cfg: &MatchConfig) -> usize {
    let adj: Vec<Vec<usize>> = a.iter().map(|ma| (0..b.len()).filter(|&k| is_match(ma, &b[k], cfg)).collect()).collect();
    let mut owner: Vec<Option<usize>> = vec![None; b.len()];
    let mut count = 0;
    for i in 0..a.len() {
        let mut seen = vec![false; b.len()];
        if augment(i, &adj, &mut owner, &mut seen) {
            count += 1;
        }
    }
    count
}

fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &k in &adj[i] {
        if seen[k] {
            continue;
        }
        seen[k] = true;
        let free = match owner[k] {
            None => true,
            Some(j) => augment(j, adj, owner, seen),
        };
        if free {
            owner[k] = Some(i);
            return true;
        }
    }
    false
}

/// Number of minutia correspondences `w` between two impressions: the best
/// one-to-one matching over all anchor alignments.
pub fn count_matches(a: &[Minutia], b: &[Minutia], cfg: &MatchConfig) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if !cfg.anchor_search {
        return max_matching(a, b, cfg);
    }
    let nb = b.len();
    par::map_range(a.len() * nb, |idx| {
        let (i, k) = (idx / nb, idx % nb);
        let moved = align(b, &b[k], &a[i]);
        max_matching(a, &moved, cfg)
    })
    .into_iter()
    .max()
    .unwrap_or(0)
}
