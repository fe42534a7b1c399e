//! Slow, obviously-correct reference implementations used by the
//! integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reference CART node.
pub enum OracleTree {
    Leaf { p: f64 },
    Split { feature: usize, threshold: f64, left: Box<OracleTree>, right: Box<OracleTree> },
}

impl OracleTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            OracleTree::Leaf { p } => *p,
            OracleTree::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

fn gini(rows: &[(&[f64], u8)]) -> f64 {
    let n = rows.len() as f64;
    let p1 = rows.iter().filter(|r| r.1 == 1).count() as f64 / n;
    1.0 - p1 * p1 - (1.0 - p1) * (1.0 - p1)
}

/// Exhaustive CART: at every node try every feature and every midpoint
/// between consecutive distinct values, keep the lowest weighted Gini
/// (first found on near-ties, scanning features then thresholds upward),
/// and recurse until nodes are pure or cannot be split.
pub fn cart(rows: &[(&[f64], u8)]) -> OracleTree {
    let ones = rows.iter().filter(|r| r.1 == 1).count();
    let p = ones as f64 / rows.len() as f64;
    if ones == 0 || ones == rows.len() {
        return OracleTree::Leaf { p };
    }
    let dims = rows[0].0.len();
    let n = rows.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..dims {
        let mut values: Vec<f64> = rows.iter().map(|r| r.0[f]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        for w in values.windows(2) {
            let t = w[0] + (w[1] - w[0]) / 2.0;
            let (l, r): (Vec<_>, Vec<_>) = rows.iter().copied().partition(|row| row.0[f] <= t);
            let score = gini(&l) * l.len() as f64 / n + gini(&r) * r.len() as f64 / n;
            if best.is_none_or(|(s, _, _)| score < s - 1e-12) {
                best = Some((score, f, t));
            }
        }
    }
    match best {
        None => OracleTree::Leaf { p },
        Some((_, feature, threshold)) => {
            let (l, r): (Vec<_>, Vec<_>) = rows.iter().copied().partition(|row| row.0[feature] <= threshold);
            OracleTree::Split { feature, threshold, left: Box::new(cart(&l)), right: Box::new(cart(&r)) }
        }
    }
}

/// Winding number of `ring` (closed or open) around `(x, y)`.
pub fn winding_number(ring: &[(f64, f64)], x: f64, y: f64) -> i32 {
    let mut wn = 0;
    let n = ring.len();
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        let cross = (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0);
        if y0 <= y {
            if y1 > y && cross > 0.0 {
                wn += 1;
            }
        } else if y1 <= y && cross < 0.0 {
            wn -= 1;
        }
    }
    wn
}

/// Inside when an odd number of rings wind around the point.
pub fn in_polygon(rings: &[Vec<(f64, f64)>], x: f64, y: f64) -> bool {
    rings.iter().filter(|r| winding_number(r, x, y) != 0).count() % 2 == 1
}

/// Random simple polygon, star-shaped around `(cx, cy)`.
pub fn star_polygon(rng: &mut ChaCha8Rng, cx: f64, cy: f64, vertices: usize, r_min: f64, r_max: f64) -> Vec<(f64, f64)> {
    let mut angles: Vec<f64> = (0..vertices).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles.dedup();
    angles
        .into_iter()
        .map(|a| {
            let r = rng.random_range(r_min..r_max);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

/// Brute-force confusion counts `(tp, fp, fn, tn)`.
pub fn recount(pairs: &[(bool, bool)]) -> (u64, u64, u64, u64) {
    let c = |p: bool, a: bool| pairs.iter().filter(|&&(x, y)| x == p && y == a).count() as u64;
    (c(true, true), c(true, false), c(false, true), c(false, false))
}

/// Random CART fixture: up to 50 rows, up to 3 features. Even seeds draw
/// values from a coarse grid so ties between rows are common.
pub fn cart_fixture(rng: &mut ChaCha8Rng, seed: u64) -> (usize, Vec<Vec<f64>>, Vec<u8>) {
    let dims = rng.random_range(1..=3);
    let n = rng.random_range(2..=50);
    let coarse = seed.is_multiple_of(2);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dims).map(|_| if coarse { rng.random_range(0..6) as f64 * 0.5 } else { rng.random_range(-10.0..10.0) }).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    (dims, rows, labels)
}

/// 100 probe points on a regular grid spanning the rows' bounding box,
/// padded by one unit on every side.
pub fn probe_grid(rows: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
    let per_axis: &[usize] = match dims {
        1 => &[100],
        2 => &[10, 10],
        _ => &[5, 5, 4],
    };
    let lo: Vec<f64> = (0..dims).map(|d| rows.iter().map(|r| r[d]).fold(f64::INFINITY, f64::min) - 1.0).collect();
    let hi: Vec<f64> = (0..dims).map(|d| rows.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max) + 1.0).collect();
    let total: usize = per_axis.iter().product();
    (0..total)
        .map(|mut k| {
            (0..dims)
                .map(|d| {
                    let steps = per_axis[d];
                    let i = k % steps;
                    k /= steps;
                    lo[d] + (hi[d] - lo[d]) * i as f64 / (steps - 1) as f64
                })
                .collect()
        })
        .collect()
}
