#![allow(dead_code)]

use fpglmm::data::{MatchDataset, MatchRecord};
use fpglmm::rng::stream;
use fpglmm::QualityScheme;
use rand::Rng;

/// Full cross-finger design with per-impression quality and minutia counts
/// given by closures of `(finger, impression)` and responses by a closure of
/// the pair index.
pub fn design(
    f: u32,
    l: u32,
    scheme: QualityScheme,
    q: impl Fn(u32, u32) -> f64,
    m: impl Fn(u32, u32) -> u32,
    y: impl Fn(usize) -> u32,
) -> MatchDataset {
    let mut recs = Vec::new();
    for fa in 0..f {
        for fb in fa + 1..f {
            for ia in 0..l {
                for ib in 0..l {
                    let k = recs.len();
                    recs.push(MatchRecord {
                        finger_a: fa,
                        impr_a: ia,
                        finger_b: fb,
                        impr_b: ib,
                        m_a: m(fa, ia),
                        m_b: m(fb, ib),
                        q_a: q(fa, ia),
                        q_b: q(fb, ib),
                        y: y(k),
                    });
                }
            }
        }
    }
    MatchDataset::from_records(recs, scheme).unwrap()
}

/// Random small categorical dataset (labels 1..=3) with counts below `ymax`.
pub fn random_categorical(f: u32, l: u32, ymax: u32, seed: u64) -> MatchDataset {
    let mut rng = stream(seed, 0);
    let quals: Vec<f64> = (0..f * l).map(|_| rng.random_range(1..=3) as f64).collect();
    let ms: Vec<u32> = (0..f * l).map(|_| rng.random_range(ymax.max(5)..=40)).collect();
    let ys: Vec<u32> = (0..f * (f - 1) * l * l / 2).map(|_| rng.random_range(0..=ymax)).collect();
    design(
        f,
        l,
        QualityScheme::Categorical { qmax: 3 },
        |fi, ii| quals[(fi * l + ii) as usize],
        |fi, ii| ms[(fi * l + ii) as usize],
        |k| ys[k],
    )
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
