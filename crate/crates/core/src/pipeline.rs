//! End-to-end run: synthesize a scene, verify it by clustering, train the
//! forest on labeled points, map crop probability, threshold, and assess.
//!
//! Every artifact is written into one run directory together with a
//! manifest recording seeds and the SHA-256 of each step's inputs and
//! outputs. Each step's `chain` hash covers the previous step's chain, so
//! the manifest ties the final metrics back to the configuration.
//! Nothing time- or machine-dependent goes into the artifacts, so two runs
//! of the same configuration produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assess::{build_confusion, compute_metrics, AssessError, Confusion, MetricsReport};
use crate::cluster::{cluster_map, fit_kmeans, sample_pixels, ClusterError};
use crate::config::Config;
use crate::forest::{oob_score, train_forest, ForestError};
use crate::geometry::{GeometryError, Roi};
use crate::mapping::{classify_map, png_bytes, render, threshold_map, MappingError, Palette};
use crate::synth::{generate_scene, sample_labels, write_points, LabeledPoint, Subset, SynthError};
use crate::tilestore::{sample_at_points, TileError};

pub const TOOL_NAME: &str = "cropmap";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Assess(#[from] AssessError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub chain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub steps: Vec<StepRecord>,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Recomputes every chain hash; true when the manifest is internally consistent.
    pub fn chain_is_consistent(&self) -> bool {
        let mut prev = self.config_sha256.clone();
        for step in &self.steps {
            if chain_hash(&prev, &step.name, &step.inputs, &step.outputs) != step.chain {
                return false;
            }
            prev = step.chain.clone();
        }
        true
    }
}

fn chain_hash(prev: &str, name: &str, inputs: &BTreeMap<String, String>, outputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(b"\n");
    h.update(name.as_bytes());
    for (tag, map) in [("in", inputs), ("out", outputs)] {
        for (k, v) in map {
            h.update(format!("\n{tag} {k} {v}").as_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Writes artifacts into the run directory and remembers their hashes.
struct Recorder {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
    steps: Vec<StepRecord>,
    chain: String,
}

impl Recorder {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|source| PipelineError::Io { path, source })?;
        self.hashes.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn step(&mut self, name: &str, inputs: &[&str], external: &[(String, String)], outputs: &[&str]) {
        let mut ins: BTreeMap<String, String> = inputs.iter().map(|i| (i.to_string(), self.hashes[*i].clone())).collect();
        ins.extend(external.iter().cloned());
        let outs = outputs.iter().map(|o| (o.to_string(), self.hashes[*o].clone())).collect();
        let chain = chain_hash(&self.chain, name, &ins, &outs);
        self.chain = chain.clone();
        self.steps.push(StepRecord { name: name.to_string(), inputs: ins, outputs: outs, chain });
    }
}

#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub out_dir: PathBuf,
    pub confusion: Confusion,
    pub metrics: MetricsReport,
    pub oob: Option<f64>,
    pub training_rows: usize,
    pub training_dropped: usize,
    pub crop_fraction: f64,
}

/// Hash of the effective (defaults filled in) configuration.
pub fn config_hash(cfg: &Config) -> String {
    sha256_hex(cfg.to_toml().as_bytes())
}

/// `<UTC timestamp>-<first 12 hex digits of the config hash>`.
pub fn run_dir_name(cfg: &Config) -> String {
    format!("{}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"), &config_hash(cfg)[..12])
}

pub fn metrics_text(c: &Confusion, m: &MetricsReport, oob: Option<f64>, threshold: Option<f64>) -> String {
    let mut s = format!("Test points used     {:>10}\nTest points dropped  {:>10}\n", c.matrix.total(), c.dropped);
    if let Some(t) = threshold {
        s.push_str(&format!("Threshold            {t:>10}\n"));
    }
    s.push_str(&format!(
        "True positives       {:>10}\nFalse positives      {:>10}\nFalse negatives      {:>10}\nTrue negatives       {:>10}\n",
        c.matrix.tp, c.matrix.fp, c.matrix.fn_, c.matrix.tn
    ));
    s.push_str(&m.to_string());
    if let Some(oob) = oob {
        s.push_str(&format!("Out-of-bag accuracy  {oob:>10.4}\n"));
    }
    s
}

/// Runs every stage into `out_dir` (created if missing).
pub fn run_pipeline(cfg: &Config, config_dir: Option<&Path>, out_dir: &Path) -> Result<PipelineSummary, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io { path: out_dir.to_path_buf(), source })?;
    let config_text = cfg.to_toml();
    let config_sha = sha256_hex(config_text.as_bytes());
    let mut rec = Recorder { dir: out_dir.to_path_buf(), hashes: BTreeMap::new(), steps: Vec::new(), chain: config_sha.clone() };
    rec.write("config.toml", config_text.as_bytes())?;

    // synth
    let mut external = Vec::new();
    let roi = match cfg.roi_path(config_dir) {
        Some(path) => {
            let bytes = fs::read(&path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
            let shown = cfg.grid.roi.as_deref().unwrap_or(&path).display().to_string();
            external.push((format!("roi:{shown}"), sha256_hex(&bytes)));
            Some(Roi::parse(&String::from_utf8_lossy(&bytes))?)
        }
        None => None,
    };
    let spec = cfg.scene_spec().map_err(PipelineError::Config)?;
    let (mut tile, mut truth) = generate_scene(&spec)?;
    if let Some(roi) = &roi {
        tile = tile.clip(roi);
        truth = truth.masked(tile.mask());
    }
    let points = sample_labels(&truth, &cfg.labels.crop_classes, cfg.labels.n, cfg.labels.train_fraction, cfg.label_seed())?;
    let mut csv = Vec::new();
    write_points(&points, &mut csv)?;
    rec.write("scene.embt", &tile.to_bytes())?;
    rec.write("truth.embt", &truth.to_bytes())?;
    rec.write("points.csv", &csv)?;
    rec.step("synth", &["config.toml"], &external, &["scene.embt", "truth.embt", "points.csv"]);

    // cluster
    if cfg.cluster.enabled {
        let samples = sample_pixels(&tile, cfg.cluster.samples, cfg.cluster_seed());
        let km = fit_kmeans(&samples, cfg.cluster.k, cfg.cluster_seed(), cfg.cluster.max_iter)?;
        let clusters = cluster_map(&km, &tile)?;
        rec.write("kmeans.txt", km.to_text().as_bytes())?;
        rec.write("clusters.embt", &clusters.to_bytes())?;
        let mut outs = vec!["kmeans.txt", "clusters.embt"];
        if cfg.mapping.render {
            let img = render(&clusters, &Palette::random(km.k(), cfg.cluster_seed()), None)?;
            rec.write("clusters.png", &png_bytes(&img)?)?;
            outs.push("clusters.png");
        }
        rec.step("cluster", &["scene.embt"], &[], &outs);
    }

    // train
    let (train, test): (Vec<LabeledPoint>, Vec<LabeledPoint>) = points.into_iter().partition(|p| p.subset == Subset::Training);
    let sampled = sample_at_points(std::slice::from_ref(&tile), &train)?;
    let model = train_forest(&sampled.set, cfg.forest.n_trees, cfg.forest_seed(), cfg.hyperparams())?;
    let oob = if cfg.forest.bootstrap { oob_score(&model, &sampled.set).ok() } else { None };
    rec.write("model.rf", &model.to_bytes())?;
    rec.step("train", &["scene.embt", "points.csv"], &[], &["model.rf"]);

    // classify
    let probability = classify_map(&model, &tile)?;
    rec.write("probability.embt", &probability.to_bytes())?;
    rec.step("classify", &["model.rf", "scene.embt"], &[], &["probability.embt"]);

    // threshold
    let cropland = threshold_map(&probability, cfg.mapping.threshold)?;
    rec.write("cropland.embt", &cropland.to_bytes())?;
    let mut outs = vec!["cropland.embt"];
    if cfg.mapping.render {
        rec.write("cropland.png", &png_bytes(&render(&cropland, &Palette::binary(), None)?)?)?;
        outs.push("cropland.png");
    }
    rec.step("threshold", &["probability.embt"], &[], &outs);

    // assess
    let confusion = build_confusion(&cropland, &test)?;
    let metrics = compute_metrics(&confusion.matrix);
    rec.write("metrics.txt", metrics_text(&confusion, &metrics, oob, Some(cfg.mapping.threshold)).as_bytes())?;
    rec.write("metrics.csv", metrics.to_csv().as_bytes())?;
    rec.write("confusion.csv", confusion.matrix.to_csv().as_bytes())?;
    rec.step("assess", &["cropland.embt", "points.csv"], &[], &["metrics.txt", "metrics.csv", "confusion.csv"]);

    let valid: Vec<usize> = (0..cropland.pixel_count()).filter(|&p| cropland.is_valid(p)).collect();
    let crop = valid.iter().filter(|&&p| cropland.class_at(p) == Some(1)).count();

    let manifest = Manifest {
        tool: TOOL_NAME.to_string(),
        version: TOOL_VERSION.to_string(),
        config_sha256: config_sha,
        seeds: BTreeMap::from([
            ("synth".to_string(), cfg.synth_seed()),
            ("labels".to_string(), cfg.label_seed()),
            ("cluster".to_string(), cfg.cluster_seed()),
            ("forest".to_string(), cfg.forest_seed()),
        ]),
        steps: rec.steps.clone(),
    };
    rec.write("manifest.toml", manifest.to_toml().as_bytes())?;

    Ok(PipelineSummary {
        out_dir: out_dir.to_path_buf(),
        confusion,
        metrics,
        oob,
        training_rows: sampled.set.len(),
        training_dropped: sampled.dropped,
        crop_fraction: if valid.is_empty() { 0.0 } else { crop as f64 / valid.len() as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        Config::parse("[synth]\nwidth = 48\nheight = 48\n[labels]\nn = 300\n[forest]\nn_trees = 10\n[cluster]\nk = 4\nsamples = 200\n")
            .unwrap()
    }

    #[test]
    fn small_run_writes_consistent_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_pipeline(&small(), None, dir.path()).unwrap();
        assert!(s.metrics.oa.unwrap() > 0.9);
        let manifest = Manifest::parse(&fs::read_to_string(dir.path().join("manifest.toml")).unwrap()).unwrap();
        assert!(manifest.chain_is_consistent());
        assert_eq!(
            manifest.steps.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
            ["synth", "cluster", "train", "classify", "threshold", "assess"]
        );
        for step in &manifest.steps {
            for (name, hash) in &step.outputs {
                assert_eq!(&sha256_hex(&fs::read(dir.path().join(name)).unwrap()), hash);
            }
        }
        let mut tampered = manifest.clone();
        tampered.steps[2].outputs.insert("model.rf".into(), "00".into());
        assert!(!tampered.chain_is_consistent());
    }

    #[test]
    fn roi_clips_scene() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        let roi = dir.path().join("roi.txt");
        let geo = cfg.geo().unwrap();
        let (lon, lat) = geo.pixel_to_lonlat(24, 24);
        let r = 20.0 * geo.pixel_size;
        Roi::rectangle(lon - r, lat - r, lon + r, lat + r).unwrap().write(&roi).unwrap();
        cfg.grid.roi = Some(PathBuf::from("roi.txt"));
        let out = dir.path().join("run");
        run_pipeline(&cfg, Some(dir.path()), &out).unwrap();
        let tile = crate::tilestore::read_tile(&out.join("scene.embt")).unwrap();
        let valid = tile.mask().iter().filter(|&&m| m).count();
        assert!(valid > 1000 && valid < 48 * 48);
        let manifest = Manifest::parse(&fs::read_to_string(out.join("manifest.toml")).unwrap()).unwrap();
        assert!(manifest.steps[0].inputs.keys().any(|k| k.starts_with("roi:")));
    }

    #[test]
    fn run_dir_name_has_hash_suffix() {
        let cfg = small();
        let name = run_dir_name(&cfg);
        assert!(name.ends_with(&config_hash(&cfg)[..12]));
        assert_eq!(name.len(), "20260101T000000Z-".len() + 12);
    }
}
