//! Run configuration: a TOML file with one table per pipeline stage.
//!
//! Every key is optional. Missing keys take the defaults below: 7 clusters
//! fitted on 1000 samples, 100 trees, threshold 0.7 and 10 m pixels on the
//! built-in demo scene.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::forest::Hyperparams;
use crate::geometry::GeoTransform;
use crate::mapping::DEFAULT_THRESHOLD;
use crate::synth::{ClassSpec, SceneSpec};
use crate::tilestore::Dtype;

/// Metres per degree of longitude at the equator.
pub const METRES_PER_DEGREE: f64 = 111_320.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    pub grid: GridConfig,
    pub synth: SynthConfig,
    pub labels: LabelConfig,
    pub cluster: ClusterConfig,
    pub forest: ForestConfig,
    pub mapping: MappingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every stage that does not set its own.
    pub seed: u64,
    /// Parent directory for timestamped run directories.
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub origin_lon: f64,
    pub origin_lat: f64,
    /// Nominal pixel size in metres, converted to degrees at the equator.
    pub scale_m: f64,
    /// Optional ROI file (relative paths resolve against the config file).
    pub roi: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub dims: usize,
    pub patch_size: usize,
    pub dtype: Dtype,
    pub seed: Option<u64>,
    pub classes: Vec<ClassSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub crop_classes: Vec<u8>,
    pub n: usize,
    pub train_fraction: f64,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub enabled: bool,
    pub k: usize,
    pub samples: usize,
    pub max_iter: usize,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Omit for `ceil(sqrt(dims))`.
    pub features_per_split: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub threshold: f64,
    pub render: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 42, out_dir: PathBuf::from("runs") }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { origin_lon: 0.8, origin_lat: 6.5, scale_m: 10.0, roi: None }
    }
}

/// Four classes over `dims` bands. Class `c` sits 3 units above a common
/// baseline on every band `d` with `d % 4 == c`, with unit noise everywhere,
/// so any two class means are at least `3 * sqrt(2 * (dims / 4))` standard
/// deviations apart (8.5 sigma at 16 bands).
pub fn demo_classes(dims: usize) -> Vec<ClassSpec> {
    ["cereal", "legume", "woodland", "built_up"]
        .iter()
        .enumerate()
        .map(|(c, name)| ClassSpec {
            name: name.to_string(),
            prior: 0.25,
            mean: (0..dims).map(|d| if d % 4 == c { 13.0 } else { 10.0 }).collect(),
            stddev: vec![1.0; dims],
        })
        .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { width: 256, height: 256, dims: 16, patch_size: 8, dtype: Dtype::U16, seed: None, classes: demo_classes(16) }
    }
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig { crop_classes: vec![0, 1], n: 1500, train_fraction: 0.8, seed: None }
    }
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { enabled: true, k: 7, samples: 1000, max_iter: crate::cluster::DEFAULT_MAX_ITER, seed: None }
    }
}

impl Default for ForestConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        ForestConfig {
            n_trees: 100,
            features_per_split: hp.features_per_split,
            min_leaf: hp.min_leaf,
            max_depth: hp.max_depth,
            bootstrap: hp.bootstrap,
            seed: None,
        }
    }
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig { threshold: DEFAULT_THRESHOLD, render: true }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.mapping.threshold) {
            return Err(format!("mapping.threshold {} outside [0, 1]", self.mapping.threshold));
        }
        if self.forest.n_trees == 0 {
            return Err("forest.n_trees must be at least 1".into());
        }
        if self.labels.crop_classes.iter().any(|&c| c as usize >= self.synth.classes.len()) {
            return Err("labels.crop_classes names a class the scene does not have".into());
        }
        self.scene_spec()?.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn pixel_size_deg(&self) -> f64 {
        self.grid.scale_m / METRES_PER_DEGREE
    }

    pub fn geo(&self) -> Result<GeoTransform, String> {
        GeoTransform::new(self.grid.origin_lon, self.grid.origin_lat, self.pixel_size_deg()).map_err(|e| e.to_string())
    }

    pub fn scene_spec(&self) -> Result<SceneSpec, String> {
        Ok(SceneSpec {
            width: self.synth.width,
            height: self.synth.height,
            dims: self.synth.dims,
            classes: self.synth.classes.clone(),
            patch_size: self.synth.patch_size,
            seed: self.synth_seed(),
            geo: self.geo()?,
            dtype: self.synth.dtype,
        })
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            features_per_split: self.forest.features_per_split,
            min_leaf: self.forest.min_leaf,
            max_depth: self.forest.max_depth,
            bootstrap: self.forest.bootstrap,
        }
    }

    pub fn synth_seed(&self) -> u64 {
        self.synth.seed.unwrap_or(self.run.seed)
    }
    pub fn label_seed(&self) -> u64 {
        self.labels.seed.unwrap_or(self.run.seed)
    }
    pub fn cluster_seed(&self) -> u64 {
        self.cluster.seed.unwrap_or(self.run.seed)
    }
    pub fn forest_seed(&self) -> u64 {
        self.forest.seed.unwrap_or(self.run.seed)
    }

    /// ROI path resolved against the directory holding the config file.
    pub fn roi_path(&self, config_dir: Option<&Path>) -> Option<PathBuf> {
        self.grid.roi.as_ref().map(|p| match config_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_constants() {
        let c = Config::default();
        assert_eq!(c.cluster.k, 7);
        assert_eq!(c.cluster.samples, 1000);
        assert_eq!(c.forest.n_trees, 100);
        assert_eq!(c.mapping.threshold, 0.7);
        assert_eq!(c.grid.scale_m, 10.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn demo_classes_are_well_separated() {
        let classes = demo_classes(16);
        for a in &classes {
            for b in &classes {
                if a.name == b.name {
                    continue;
                }
                let d: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                assert!(d >= 4.0 * a.stddev[0], "{} vs {}: {d}", a.name, b.name);
            }
        }
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = Config::parse("[forest]\nn_trees = 10\n[mapping]\nthreshold = 0.5\n").unwrap();
        assert_eq!(c.forest.n_trees, 10);
        assert_eq!(c.mapping.threshold, 0.5);
        assert_eq!(c.cluster.k, 7);
    }

    #[test]
    fn rejects_typos_and_bad_values() {
        assert!(Config::parse("[forest]\nntrees = 10\n").is_err());
        assert!(Config::parse("[mapping]\nthreshold = 1.5\n").is_err());
        assert!(Config::parse("[labels]\ncrop_classes = [9]\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn stage_seeds_fall_back_to_run_seed() {
        let c = Config::parse("[run]\nseed = 5\n[forest]\nseed = 9\n").unwrap();
        assert_eq!(c.synth_seed(), 5);
        assert_eq!(c.forest_seed(), 9);
    }
}
