//! Random forest for binary crop / non-crop classification with
//! probability output.
//!
//! Trees are grown greedily (CART) on bootstrap resamples, minimizing Gini
//! impurity over a random subset of features at each node. A tree's output
//! for a point is the positive-class fraction of the leaf it lands in; the
//! forest averages that over trees.
//!
//! Split scores are compared as exact rationals over integer (bootstrap
//! weighted) class counts, so equal-impurity candidates really tie and the
//! tie rule (lowest feature index, then lowest threshold) is deterministic.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{keyed_rng, Purpose};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training set: {0}")]
    InvalidTrainingSet(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: model expects {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("out-of-bag scoring needs a model trained with bootstrap")]
    BootstrapDisabled,
    #[error("training set has {found} rows but the model was trained on {expected}")]
    TrainingSetMismatch { expected: usize, found: usize },
    #[error("no row is out-of-bag for any tree")]
    NoOobRows,
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("bad magic in model file")]
    BadMagic,
    #[error("unsupported model version {0}")]
    VersionMismatch(u16),
    #[error("truncated model file")]
    Truncated,
    #[error("model checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rows of `dims` features with a 0/1 label each.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    dims: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl TrainingSet {
    /// `features` is row-major, `labels.len()` rows of `dims` values.
    pub fn new(dims: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self, ForestError> {
        if labels.is_empty() {
            return Err(ForestError::EmptyTrainingSet);
        }
        if dims == 0 || features.len() != dims * labels.len() {
            return Err(ForestError::InvalidTrainingSet(format!("{} feature values for {} rows of {dims}", features.len(), labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(ForestError::InvalidTrainingSet(format!("label {l} is not 0 or 1")));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(ForestError::InvalidTrainingSet("non-finite feature value".into()));
        }
        Ok(TrainingSet { dims, features, labels })
    }

    pub fn from_rows(rows: &[(Vec<f64>, u8)]) -> Result<Self, ForestError> {
        let dims = rows.first().map(|r| r.0.len()).ok_or(ForestError::EmptyTrainingSet)?;
        if rows.iter().any(|r| r.0.len() != dims) {
            return Err(ForestError::InvalidTrainingSet("rows have differing lengths".into()));
        }
        let features = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
        TrainingSet::new(dims, features, rows.iter().map(|r| r.1).collect())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }
    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Features considered per split; `None` means `ceil(sqrt(dims))`.
    pub features_per_split: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { features_per_split: None, min_leaf: 1, max_depth: None, bootstrap: true }
    }
}

impl Hyperparams {
    /// One deterministic tree: every feature at every split, no bagging.
    pub fn exhaustive() -> Self {
        Hyperparams { features_per_split: Some(usize::MAX), bootstrap: false, ..Default::default() }
    }

    pub fn features_for(&self, dims: usize) -> usize {
        match self.features_per_split {
            Some(m) => m.clamp(1, dims),
            None => ((dims as f64).sqrt().ceil() as usize).clamp(1, dims),
        }
    }

    fn validate(&self) -> Result<(), ForestError> {
        if self.min_leaf == 0 {
            return Err(ForestError::InvalidParams("min_leaf must be at least 1".into()));
        }
        if self.features_per_split == Some(0) {
            return Err(ForestError::InvalidParams("features_per_split must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        count0: u32,
        count1: u32,
    },
}

/// Nodes in preorder; the root is node 0 and children always follow their parent.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self, ForestError> {
        if nodes.is_empty() {
            return Err(ForestError::InvalidTree("no nodes".into()));
        }
        let mut parents = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                Node::Split { threshold, left, right, .. } => {
                    if !threshold.is_finite() {
                        return Err(ForestError::InvalidTree(format!("node {i} has non-finite threshold")));
                    }
                    for child in [left, right] {
                        if child <= i || child >= nodes.len() {
                            return Err(ForestError::InvalidTree(format!("node {i} has child {child}")));
                        }
                        parents[child] += 1;
                    }
                    if left == right {
                        return Err(ForestError::InvalidTree(format!("node {i} has identical children")));
                    }
                }
                Node::Leaf { count0, count1 } => {
                    if count0 as u64 + count1 as u64 == 0 {
                        return Err(ForestError::InvalidTree(format!("leaf {i} is empty")));
                    }
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(ForestError::InvalidTree("nodes do not form a single tree".into()));
        }
        Ok(DecisionTree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf(&self, v: &[f64]) -> (u32, u32) {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Split { feature, threshold, left, right } => {
                    at = if v[feature] <= threshold { left } else { right };
                }
                Node::Leaf { count0, count1 } => return (count0, count1),
            }
        }
    }

    /// Positive-class fraction of the leaf `v` falls into.
    pub fn predict_proba(&self, v: &[f64]) -> f64 {
        let (c0, c1) = self.leaf(v);
        c1 as f64 / (c0 as f64 + c1 as f64)
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestModel {
    trees: Vec<DecisionTree>,
    dims: usize,
    seed: u64,
    hyperparams: Hyperparams,
    train_rows: usize,
}

impl ForestModel {
    pub fn from_trees(
        trees: Vec<DecisionTree>,
        dims: usize,
        seed: u64,
        hyperparams: Hyperparams,
        train_rows: usize,
    ) -> Result<Self, ForestError> {
        if trees.is_empty() {
            return Err(ForestError::InvalidParams("a forest needs at least one tree".into()));
        }
        for (t, tree) in trees.iter().enumerate() {
            for node in tree.nodes() {
                if let Node::Split { feature, .. } = node {
                    if *feature >= dims {
                        return Err(ForestError::InvalidTree(format!("tree {t} splits on feature {feature} of {dims}")));
                    }
                }
            }
        }
        Ok(ForestModel { trees, dims, seed, hyperparams, train_rows })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
    pub fn dims(&self) -> usize {
        self.dims
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }
    pub fn train_rows(&self) -> usize {
        self.train_rows
    }

    /// Mean over trees of the leaf positive-class fraction.
    pub fn predict_proba(&self, v: &[f64]) -> Result<f64, ForestError> {
        if v.len() != self.dims {
            return Err(ForestError::DimensionMismatch { expected: self.dims, found: v.len() });
        }
        Ok(self.predict_proba_unchecked(v))
    }

    pub(crate) fn predict_proba_unchecked(&self, v: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| t.predict_proba(v)).sum();
        total / self.trees.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_model(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ForestError> {
        decode_model(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), ForestError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ForestError> {
        ForestModel::from_bytes(&fs::read(path)?)
    }
}

/// Per-row multiplicities of tree `tree`'s bootstrap resample of `n` rows.
fn bootstrap_counts(n: usize, seed: u64, tree: usize) -> Vec<u32> {
    let mut rng = keyed_rng(seed, Purpose::Bootstrap, tree as u64);
    let mut counts = vec![0u32; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    counts
}

fn row_weights(n: usize, seed: u64, tree: usize, hp: &Hyperparams) -> Vec<u32> {
    if hp.bootstrap {
        bootstrap_counts(n, seed, tree)
    } else {
        vec![1; n]
    }
}

pub fn train_forest(ts: &TrainingSet, n_trees: usize, seed: u64, hp: Hyperparams) -> Result<ForestModel, ForestError> {
    hp.validate()?;
    if n_trees == 0 {
        return Err(ForestError::InvalidParams("n_trees must be at least 1".into()));
    }
    if ts.is_empty() {
        return Err(ForestError::EmptyTrainingSet);
    }
    let positives = ts.labels().iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == ts.len() {
        warn!("training set has a single label ({}); the forest will predict it everywhere", ts.label(0));
    }
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let weights = row_weights(ts.len(), seed, t, &hp);
            let mut rng = keyed_rng(seed, Purpose::TreeGrowth, t as u64);
            grow_tree(ts, &weights, &hp, &mut rng)
        })
        .collect();
    ForestModel::from_trees(trees, ts.dims(), seed, hp, ts.len())
}

/// Grows one tree on `ts` with integer row weights (bootstrap multiplicities).
pub fn grow_tree(ts: &TrainingSet, weights: &[u32], hp: &Hyperparams, rng: &mut ChaCha8Rng) -> DecisionTree {
    let rows: Vec<usize> = (0..ts.len()).filter(|&i| weights[i] > 0).collect();
    let mut grower = Grower { ts, weights, hp, m: hp.features_for(ts.dims()), rng, nodes: Vec::new() };
    grower.grow(rows, 0);
    DecisionTree { nodes: grower.nodes }
}

struct Grower<'a> {
    ts: &'a TrainingSet,
    weights: &'a [u32],
    hp: &'a Hyperparams,
    m: usize,
    rng: &'a mut ChaCha8Rng,
    nodes: Vec<Node>,
}

/// Candidate split scored by `sum over sides of (c0^2 + c1^2) / n_side`,
/// held as the exact fraction `num / den`. Larger is purer.
#[derive(Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    num: u128,
    den: u128,
}

impl Candidate {
    fn beats(&self, other: &Candidate) -> bool {
        self.num * other.den > other.num * self.den
    }
}

impl Grower<'_> {
    fn counts(&self, rows: &[usize]) -> (u64, u64) {
        rows.iter().fold((0, 0), |(c0, c1), &r| {
            let w = self.weights[r] as u64;
            if self.ts.label(r) == 1 {
                (c0, c1 + w)
            } else {
                (c0 + w, c1)
            }
        })
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let (c0, c1) = self.counts(&rows);
        let leaf = Node::Leaf { count0: c0 as u32, count1: c1 as u32 };
        self.nodes.push(leaf);

        let total = c0 + c1;
        let stop = c0 == 0 || c1 == 0 || self.hp.max_depth.is_some_and(|d| depth >= d) || total < 2 * self.hp.min_leaf as u64;
        if stop {
            return id;
        }
        let Some(best) = self.best_split(&rows, c0, c1) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| self.ts.row(r)[best.feature] <= best.threshold);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id] = Node::Split { feature: best.feature, threshold: best.threshold, left, right };
        id
    }

    fn best_split(&mut self, rows: &[usize], c0: u64, c1: u64) -> Option<Candidate> {
        let dims = self.ts.dims();
        let mut features: Vec<usize> = if self.m >= dims { (0..dims).collect() } else { index::sample(self.rng, dims, self.m).into_vec() };
        features.sort_unstable();

        let min_leaf = self.hp.min_leaf as u64;
        let total = c0 + c1;
        let mut best: Option<Candidate> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for &f in &features {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (self.ts.row(r)[f], r)));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (mut l0, mut l1) = (0u64, 0u64);
            for i in 0..sorted.len() - 1 {
                let (value, r) = sorted[i];
                let w = self.weights[r] as u64;
                if self.ts.label(r) == 1 {
                    l1 += w;
                } else {
                    l0 += w;
                }
                let next = sorted[i + 1].0;
                if value == next {
                    continue;
                }
                let nl = l0 + l1;
                let nr = total - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (r0, r1) = (c0 - l0, c1 - l1);
                let a = (l0 * l0 + l1 * l1) as u128;
                let b = (r0 * r0 + r1 * r1) as u128;
                let cand = Candidate {
                    feature: f,
                    threshold: midpoint(value, next),
                    num: a * nr as u128 + b * nl as u128,
                    den: nl as u128 * nr as u128,
                };
                if best.as_ref().is_none_or(|b| cand.beats(b)) {
                    best = Some(cand);
                }
            }
        }
        best
    }
}

/// Midpoint of `lo < hi` that still separates them under `x <= t`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi || !mid.is_finite() {
        lo
    } else {
        mid
    }
}

/// Accuracy of out-of-bag predictions: each row is scored by the trees whose
/// bootstrap resample missed it, predicting crop when their mean probability
/// is at least 0.5. Rows no tree left out are skipped.
pub fn oob_score(model: &ForestModel, ts: &TrainingSet) -> Result<f64, ForestError> {
    if !model.hyperparams.bootstrap {
        return Err(ForestError::BootstrapDisabled);
    }
    if ts.len() != model.train_rows || ts.dims() != model.dims {
        return Err(ForestError::TrainingSetMismatch { expected: model.train_rows, found: ts.len() });
    }
    let in_bag: Vec<Vec<u32>> = (0..model.n_trees()).map(|t| bootstrap_counts(ts.len(), model.seed, t)).collect();
    let (mut scored, mut correct) = (0usize, 0usize);
    for row in 0..ts.len() {
        let (mut sum, mut votes) = (0.0, 0usize);
        for (tree, bag) in model.trees.iter().zip(&in_bag) {
            if bag[row] == 0 {
                sum += tree.predict_proba(ts.row(row));
                votes += 1;
            }
        }
        if votes == 0 {
            continue;
        }
        scored += 1;
        let predicted = (sum / votes as f64 >= 0.5) as u8;
        correct += (predicted == ts.label(row)) as usize;
    }
    if scored == 0 {
        return Err(ForestError::NoOobRows);
    }
    Ok(correct as f64 / scored as f64)
}

// Model file: "RFMD", version u16, reserved u16, n_trees u32, dims u32,
// seed u64, features_per_split u32 (0 = sqrt rule), min_leaf u32,
// max_depth u32 (u32::MAX = unlimited), bootstrap u8, 3 reserved bytes,
// train_rows u64; then per tree a u32 node count and the nodes
// (tag 0 leaf: count0 u32, count1 u32; tag 1 split: feature u32,
// threshold f64, left u32, right u32); then CRC32 of all preceding bytes.
const MODEL_MAGIC: [u8; 4] = *b"RFMD";
const MODEL_VERSION: u16 = 1;

fn encode_model(m: &ForestModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(m.trees.len() as u32).to_le_bytes());
    out.extend_from_slice(&(m.dims as u32).to_le_bytes());
    out.extend_from_slice(&m.seed.to_le_bytes());
    let fps = m.hyperparams.features_per_split.map_or(0, |f| f.min(u32::MAX as usize) as u32);
    out.extend_from_slice(&fps.to_le_bytes());
    out.extend_from_slice(&(m.hyperparams.min_leaf as u32).to_le_bytes());
    let depth = m.hyperparams.max_depth.map_or(u32::MAX, |d| d.min(u32::MAX as usize - 1) as u32);
    out.extend_from_slice(&depth.to_le_bytes());
    out.extend_from_slice(&[m.hyperparams.bootstrap as u8, 0, 0, 0]);
    out.extend_from_slice(&(m.train_rows as u64).to_le_bytes());
    for tree in &m.trees {
        out.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
        for node in &tree.nodes {
            match *node {
                Node::Leaf { count0, count1 } => {
                    out.push(0);
                    out.extend_from_slice(&count0.to_le_bytes());
                    out.extend_from_slice(&count1.to_le_bytes());
                }
                Node::Split { feature, threshold, left, right } => {
                    out.push(1);
                    out.extend_from_slice(&(feature as u32).to_le_bytes());
                    out.extend_from_slice(&threshold.to_le_bytes());
                    out.extend_from_slice(&(left as u32).to_le_bytes());
                    out.extend_from_slice(&(right as u32).to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ForestError> {
        let end = self.at.checked_add(n).ok_or(ForestError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(ForestError::Truncated)?;
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ForestError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ForestError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ForestError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ForestError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_model(bytes: &[u8]) -> Result<ForestModel, ForestError> {
    if bytes.len() < 4 {
        return Err(ForestError::Truncated);
    }
    if bytes[..4] != MODEL_MAGIC {
        return Err(ForestError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(ForestError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return Err(ForestError::VersionMismatch(version));
    }
    let body_len = bytes.len().checked_sub(4).ok_or(ForestError::Truncated)?;
    let mut c = Cursor { bytes: &bytes[..body_len], at: 8 };
    let n_trees = c.u32()? as usize;
    let dims = c.u32()? as usize;
    let seed = c.u64()?;
    let fps = c.u32()?;
    let min_leaf = c.u32()? as usize;
    let depth = c.u32()?;
    let flags = c.take(4)?;
    let train_rows = c.u64()? as usize;
    let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
    for _ in 0..n_trees {
        let n_nodes = c.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
        for _ in 0..n_nodes {
            nodes.push(match c.u8()? {
                0 => Node::Leaf { count0: c.u32()?, count1: c.u32()? },
                1 => Node::Split { feature: c.u32()? as usize, threshold: c.f64()?, left: c.u32()? as usize, right: c.u32()? as usize },
                tag => return Err(ForestError::Malformed(format!("node tag {tag}"))),
            });
        }
        trees.push(nodes);
    }
    if c.at != body_len {
        return Err(ForestError::Malformed(format!("{} unexpected bytes before checksum", body_len - c.at)));
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(ForestError::ChecksumMismatch { stored, computed });
    }
    let hyperparams = Hyperparams {
        features_per_split: (fps != 0).then_some(fps as usize),
        min_leaf,
        max_depth: (depth != u32::MAX).then_some(depth as usize),
        bootstrap: flags[0] == 1,
    };
    hyperparams.validate()?;
    let trees = trees.into_iter().map(DecisionTree::from_nodes).collect::<Result<Vec<_>, _>>()?;
    ForestModel::from_trees(trees, dims, seed, hyperparams, train_rows)
}
