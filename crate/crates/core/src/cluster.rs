//! K-means clustering of embedding vectors.
//!
//! Lloyd's algorithm seeded with greedy k-means++, squared Euclidean distance.
//! Clusters that end up empty are moved onto the points currently farthest
//! from their centroids, so `k` never shrinks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{keyed_rng, Purpose};
use crate::tilestore::{ClassMap, EmbeddingTile, MapKind, TileError, CLASS_NODATA};

pub const DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no samples to cluster")]
    NoSamples,
    #[error("k = {k} exceeds the {distinct} distinct samples")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: model has {expected} dims, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot map {k} clusters into a class map (max 254)")]
    TooManyClusters { k: usize },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    pub seed: u64,
    /// Lloyd update steps performed.
    pub iterations_run: usize,
    /// Sum of squared distances from each training sample to its centroid.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dims(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, v: &[f64]) -> Result<usize, ClusterError> {
        if v.len() != self.dims() {
            return Err(ClusterError::DimensionMismatch { expected: self.dims(), found: v.len() });
        }
        Ok(nearest(&self.centroids, v).0)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "k={}", self.k());
        let _ = writeln!(out, "dims={}", self.dims());
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "inertia={:?}", self.inertia);
        let _ = writeln!(out, "iterations={}", self.iterations_run);
        out.push('\n');
        for c in &self.centroids {
            let row: Vec<String> = c.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ClusterError> {
        let bad = |m: &str| ClusterError::Malformed(m.to_string());
        let (head, body) = text.split_once("\n\n").ok_or_else(|| bad("missing blank line after header"))?;
        let mut k = None;
        let mut dims = None;
        let mut seed = None;
        let mut inertia = None;
        let mut iterations = None;
        for line in head.lines() {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(&format!("header line `{line}`")))?;
            let value = value.trim();
            let num = |v: &str| v.parse::<u64>().map_err(|e| bad(&format!("{key}: {e}")));
            match key.trim() {
                "k" => k = Some(num(value)? as usize),
                "dims" => dims = Some(num(value)? as usize),
                "seed" => seed = Some(num(value)?),
                "iterations" => iterations = Some(num(value)? as usize),
                "inertia" => inertia = Some(value.parse::<f64>().map_err(|e| bad(&format!("inertia: {e}")))?),
                other => return Err(bad(&format!("unknown header key `{other}`"))),
            }
        }
        let (k, dims) = (k.ok_or_else(|| bad("missing k"))?, dims.ok_or_else(|| bad("missing dims"))?);
        let centroids = body
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| bad(&e.to_string()))).collect())
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        if centroids.len() != k || k == 0 || centroids.iter().any(|c| c.len() != dims || c.iter().any(|x| !x.is_finite())) {
            return Err(bad("centroid rows disagree with header"));
        }
        Ok(KMeansModel {
            centroids,
            seed: seed.ok_or_else(|| bad("missing seed"))?,
            iterations_run: iterations.unwrap_or(0),
            inertia: inertia.ok_or_else(|| bad("missing inertia"))?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ClusterError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ClusterError> {
        KMeansModel::parse(&fs::read_to_string(path)?)
    }
}

fn distinct_count(samples: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = samples.iter().map(|s| s.iter().map(|x| (x + 0.0).to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

pub fn fit_kmeans(samples: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansModel, ClusterError> {
    fit_kmeans_traced(samples, k, seed, max_iter).map(|(m, _)| m)
}

/// Fits and also returns the inertia after every assignment step, starting
/// with the k-means++ seeding. The trace is non-increasing.
pub fn fit_kmeans_traced(samples: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<(KMeansModel, Vec<f64>), ClusterError> {
    let first = samples.first().ok_or(ClusterError::NoSamples)?;
    let dims = first.len();
    if dims == 0 || samples.iter().any(|s| s.len() != dims || s.iter().any(|x| !x.is_finite())) {
        return Err(ClusterError::InvalidParams("samples must be finite and share one nonzero dimension".into()));
    }
    if k == 0 || max_iter == 0 {
        return Err(ClusterError::InvalidParams(format!("k = {k}, max_iter = {max_iter}; both must be at least 1")));
    }
    let distinct = distinct_count(samples);
    if k > distinct {
        return Err(ClusterError::TooFewDistinct { k, distinct });
    }

    let mut centroids = plus_plus_init(samples, k, seed);
    let mut assignment: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut updates = 0;
    loop {
        let scored: Vec<(usize, f64)> = samples.par_iter().map(|s| nearest(&centroids, s)).collect();
        let inertia: f64 = scored.iter().map(|s| s.1).sum();
        if let Some(&prev) = trace.last() {
            debug_assert!(inertia <= prev + 1e-9 * f64::max(prev, 1.0), "inertia rose from {prev} to {inertia}");
        }
        trace.push(inertia);
        let next: Vec<usize> = scored.iter().map(|s| s.0).collect();
        let stable = next == assignment;
        assignment = next;
        if stable || updates == max_iter {
            let model = KMeansModel { centroids, seed, iterations_run: updates, inertia };
            return Ok((model, trace));
        }
        centroids = update_centroids(samples, &assignment, &scored, k, dims);
        updates += 1;
    }
}

/// Index drawn with probability proportional to `d2`.
fn draw(d2: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = d2.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in d2.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        if acc > target {
            return i;
        }
    }
    // Rounding can leave `target` just past the final sum.
    d2.iter().rposition(|&w| w > 0.0).expect("k <= distinct samples")
}

/// Greedy k-means++: each new centroid is the best of `2 + ln k` D²-weighted
/// candidates, judged by the resulting potential.
fn plus_plus_init(samples: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = keyed_rng(seed, Purpose::KMeansInit, 0);
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let c = draw(&d2, &mut rng);
            let updated: Vec<f64> = d2.iter().zip(samples).map(|(&d, s)| d.min(sq_dist(s, &samples[c]))).collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, c, updated));
            }
        }
        let (_, c, updated) = best.expect("at least one trial");
        centroids.push(samples[c].clone());
        d2 = updated;
    }
    centroids
}

/// Means of the assigned samples, summed in sample order. Empty clusters
/// take the farthest remaining samples.
fn update_centroids(samples: &[Vec<f64>], assignment: &[usize], scored: &[(usize, f64)], k: usize, dims: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dims]; k];
    let mut counts = vec![0usize; k];
    for (s, &a) in samples.iter().zip(assignment) {
        counts[a] += 1;
        for (acc, x) in sums[a].iter_mut().zip(s) {
            *acc += x;
        }
    }
    let mut taken = vec![false; samples.len()];
    for c in 0..k {
        if counts[c] > 0 {
            for x in sums[c].iter_mut() {
                *x /= counts[c] as f64;
            }
            continue;
        }
        let far = (0..samples.len())
            .filter(|&i| !taken[i])
            .fold(None::<usize>, |best, i| match best {
                Some(b) if scored[b].1 >= scored[i].1 => Some(b),
                _ => Some(i),
            })
            .expect("more samples than clusters");
        taken[far] = true;
        sums[c] = samples[far].clone();
    }
    sums
}

/// Uniformly draws up to `n` valid pixels' vectors without replacement.
pub fn sample_pixels(tile: &EmbeddingTile, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let valid: Vec<usize> = (0..tile.pixel_count()).filter(|&i| tile.is_valid(i)).collect();
    let take = n.min(valid.len());
    let mut rng = keyed_rng(seed, Purpose::PixelSample, 0);
    let mut picks = index::sample(&mut rng, valid.len(), take).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| tile.vector(valid[i])).collect()
}

/// Cluster id of every valid pixel; masked pixels become nodata.
pub fn cluster_map(model: &KMeansModel, tile: &EmbeddingTile) -> Result<ClassMap, ClusterError> {
    if tile.dims() != model.dims() {
        return Err(ClusterError::DimensionMismatch { expected: model.dims(), found: tile.dims() });
    }
    if model.k() >= CLASS_NODATA as usize {
        return Err(ClusterError::TooManyClusters { k: model.k() });
    }
    let values: Vec<u8> = (0..tile.pixel_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; tile.dims()],
            |buf, p| {
                if !tile.is_valid(p) {
                    return CLASS_NODATA;
                }
                tile.read_vector(p, buf);
                nearest(&model.centroids, buf).0 as u8
            },
        )
        .collect();
    Ok(ClassMap::classes(tile.width(), tile.height(), *tile.geo(), MapKind::Cluster, values)?)
}

/// Adjusted Rand Index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
