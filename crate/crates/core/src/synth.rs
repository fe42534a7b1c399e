//! Synthetic embedding scenes with known land cover.
//!
//! A scene is tiled into square patches; each patch draws one class from the
//! class priors, and each pixel draws its embedding from that class's
//! diagonal Gaussian. Every draw comes from a stream keyed by the scene seed
//! and the patch or pixel index, so output is identical for any thread count.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeoTransform;
use crate::rng::{keyed_rng, Purpose};
use crate::tilestore::{ClassMap, Dtype, EmbeddingTile, MapKind, QuantizationParams, TileError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid label sampling request: {0}")]
    InvalidRequest(String),
    #[error("requested {requested} points but only {available} valid pixels")]
    NotEnoughPixels { requested: usize, available: usize },
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error("points file: {0}")]
    BadPoints(String),
    #[error("points csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub prior: f64,
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub dims: usize,
    pub classes: Vec<ClassSpec>,
    /// Side length in pixels of the square patches that share one class.
    pub patch_size: usize,
    pub seed: u64,
    pub geo: GeoTransform,
    pub dtype: Dtype,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("scene is {}x{}", self.width, self.height));
        }
        if self.dims == 0 {
            return bad("dims must be at least 1".into());
        }
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1".into());
        }
        if self.classes.is_empty() || self.classes.len() > 255 {
            return bad(format!("{} classes (need 1..=255)", self.classes.len()));
        }
        for c in &self.classes {
            if !(c.prior.is_finite() && c.prior > 0.0) {
                return bad(format!("class {} has prior {}", c.name, c.prior));
            }
            if c.mean.len() != self.dims || c.stddev.len() != self.dims {
                return bad(format!("class {} mean/stddev length differs from dims {}", c.name, self.dims));
            }
            if c.mean.iter().any(|m| !m.is_finite()) || c.stddev.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return bad(format!("class {} has non-finite mean or negative stddev", c.name));
            }
        }
        let total: f64 = self.classes.iter().map(|c| c.prior).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("priors sum to {total}, not 1"));
        }
        self.geo.validate().map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    fn patches_across(&self) -> usize {
        self.width.div_ceil(self.patch_size)
    }
}

/// Class ids of every patch, row-major over the patch grid.
fn patch_classes(spec: &SceneSpec) -> Vec<u8> {
    let across = spec.patches_across();
    let down = spec.height.div_ceil(spec.patch_size);
    let cumulative: Vec<f64> = spec
        .classes
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.prior;
            Some(*acc)
        })
        .collect();
    (0..across * down)
        .map(|p| {
            let u: f64 = keyed_rng(spec.seed, Purpose::ScenePatch, p as u64).random();
            let u = u * cumulative[cumulative.len() - 1];
            cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1) as u8
        })
        .collect()
}

/// Builds the embedding tile and its exact ground-truth class map.
///
/// Integer dtypes are quantized over the scene's full value range
/// (`offset = min`, `scale = (max - min) / dtype max`).
pub fn generate_scene(spec: &SceneSpec) -> Result<(EmbeddingTile, ClassMap), SynthError> {
    spec.validate()?;
    let (w, h, d) = (spec.width, spec.height, spec.dims);
    let patches = patch_classes(spec);
    let across = spec.patches_across();
    let truth: Vec<u8> = (0..w * h)
        .map(|i| {
            let (row, col) = (i / w, i % w);
            patches[(row / spec.patch_size) * across + col / spec.patch_size]
        })
        .collect();

    let mut values = vec![0.0; w * h * d];
    values.par_chunks_mut(d).enumerate().for_each(|(pixel, out)| {
        let class = &spec.classes[truth[pixel] as usize];
        let mut rng = keyed_rng(spec.seed, Purpose::PixelNoise, pixel as u64);
        for (k, v) in out.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = class.mean[k] + class.stddev[k] * z;
        }
    });

    let quant = match spec.dtype {
        Dtype::F64 => QuantizationParams::identity(),
        dtype => {
            let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            QuantizationParams::fit_range(dtype, min, max)?
        }
    };
    let (tile, _saturated) = EmbeddingTile::from_values(w, h, d, spec.geo, quant, &values, vec![true; w * h])?;
    let gt = ClassMap::classes(w, h, spec.geo, MapKind::Cluster, truth)?;
    Ok((tile, gt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Training,
    Testing,
}

/// A labeled location, one row of the points CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub lon: f64,
    pub lat: f64,
    pub is_crop: u8,
    pub subset: Subset,
}

/// Draws `n` distinct valid pixels of `gt` uniformly without replacement and
/// labels them crop when their class is in `crop_classes`. After a seeded
/// shuffle the first `ceil(n * train_fraction)` points are training points.
/// Points sit at pixel centers.
pub fn sample_labels(
    gt: &ClassMap,
    crop_classes: &[u8],
    n: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<LabeledPoint>, SynthError> {
    if n < 2 {
        return Err(SynthError::InvalidRequest(format!("n = {n}, need at least 2")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SynthError::InvalidRequest(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    let valid: Vec<usize> = (0..gt.pixel_count()).filter(|&i| gt.is_valid(i)).collect();
    if n > valid.len() {
        return Err(SynthError::NotEnoughPixels { requested: n, available: valid.len() });
    }
    let mut rng = keyed_rng(seed, Purpose::LabelSample, 0);
    let mut chosen = index::sample(&mut rng, valid.len(), n).into_vec();
    chosen.shuffle(&mut rng);
    // The epsilon absorbs representation error, e.g. 1500 * 0.8.
    let n_train = ((n as f64 * train_fraction) - 1e-9).ceil() as usize;
    let w = gt.width();
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(rank, k)| {
            let pixel = valid[k];
            let (lon, lat) = gt.geo().pixel_to_lonlat((pixel % w) as i64, (pixel / w) as i64);
            let class = match gt.value_at(pixel) {
                Some(v) => v as u8,
                None => unreachable!("valid pixel"),
            };
            LabeledPoint {
                lon,
                lat,
                is_crop: crop_classes.contains(&class) as u8,
                subset: if rank < n_train { Subset::Training } else { Subset::Testing },
            }
        })
        .collect())
}

pub fn write_points<W: Write>(points: &[LabeledPoint], out: W) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points<R: Read>(input: R) -> Result<Vec<LabeledPoint>, SynthError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["lon", "lat", "is_crop", "subset"] {
        return Err(SynthError::BadPoints(format!(
            "points header must be lon,lat,is_crop,subset, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut points = Vec::new();
    for rec in r.deserialize() {
        let p: LabeledPoint = rec?;
        if p.is_crop > 1 {
            return Err(SynthError::BadPoints(format!("is_crop = {} (expected 0 or 1)", p.is_crop)));
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_points_file(points: &[LabeledPoint], path: &Path) -> Result<(), SynthError> {
    write_points(points, File::create(path)?)
}

pub fn read_points_file(path: &Path) -> Result<Vec<LabeledPoint>, SynthError> {
    read_points(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(name: &str, prior: f64, mean: Vec<f64>, sd: f64) -> ClassSpec {
        let d = mean.len();
        ClassSpec { name: name.into(), prior, mean, stddev: vec![sd; d] }
    }

    fn spec(classes: Vec<ClassSpec>, size: usize, patch: usize, dtype: Dtype) -> SceneSpec {
        SceneSpec {
            width: size,
            height: size,
            dims: classes[0].mean.len(),
            classes,
            patch_size: patch,
            seed: 11,
            geo: GeoTransform::new(0.8, 6.5, 9e-5).unwrap(),
            dtype,
        }
    }

    #[test]
    fn zero_noise_single_class_is_constant() {
        let s = spec(vec![class("only", 1.0, vec![1.5, -2.0, 7.25], 0.0)], 16, 4, Dtype::F64);
        let (tile, gt) = generate_scene(&s).unwrap();
        for p in 0..tile.pixel_count() {
            assert_eq!(tile.vector(p), vec![1.5, -2.0, 7.25]);
            assert_eq!(gt.class_at(p), Some(0));
        }
        let s = SceneSpec { dtype: Dtype::U16, ..s };
        let (tile, _) = generate_scene(&s).unwrap();
        let q = *tile.quant();
        for p in 0..tile.pixel_count() {
            assert_eq!(tile.vector(p), tile.vector(0));
            for (got, want) in tile.vector(p).iter().zip([1.5, -2.0, 7.25]) {
                assert!((got - want).abs() <= q.scale / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn two_class_patch_fraction() {
        let s = spec(vec![class("a", 0.5, vec![0.0], 1.0), class("b", 0.5, vec![5.0], 1.0)], 64, 8, Dtype::U16);
        let (_, gt) = generate_scene(&s).unwrap();
        let zeros = (0..64).filter(|&p| gt.class_at((p / 8) * 8 * 64 + (p % 8) * 8) == Some(0)).count();
        let frac = zeros as f64 / 64.0;
        assert!((frac - 0.5).abs() <= 0.15, "class-0 patch fraction {frac}");
    }

    #[test]
    fn patches_are_uniform_blocks() {
        let s = spec(vec![class("a", 0.3, vec![0.0], 1.0), class("b", 0.7, vec![5.0], 1.0)], 20, 6, Dtype::F64);
        let (_, gt) = generate_scene(&s).unwrap();
        for row in 0..20 {
            for col in 0..20 {
                let anchor = (row / 6 * 6) * 20 + col / 6 * 6;
                assert_eq!(gt.class_at(row * 20 + col), gt.class_at(anchor));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = spec(vec![class("a", 0.4, vec![0.0, 1.0], 1.0), class("b", 0.6, vec![3.0, 3.0], 0.5)], 32, 4, Dtype::U16);
        let (t1, g1) = generate_scene(&s).unwrap();
        let (t2, g2) = generate_scene(&s).unwrap();
        assert_eq!(t1.to_bytes(), t2.to_bytes());
        assert_eq!(g1.to_bytes(), g2.to_bytes());
        let other = SceneSpec { seed: 12, ..s };
        assert_ne!(generate_scene(&other).unwrap().0.to_bytes(), t1.to_bytes());
    }

    #[test]
    fn thread_count_does_not_matter() {
        let s = spec(vec![class("a", 0.5, vec![0.0; 4], 1.0), class("b", 0.5, vec![2.0; 4], 1.0)], 48, 5, Dtype::U16);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(6).build().unwrap();
        let a = one.install(|| generate_scene(&s).unwrap().0.to_bytes());
        let b = many.install(|| generate_scene(&s).unwrap().0.to_bytes());
        assert_eq!(a, b);
    }

    #[test]
    fn class_means_converge() {
        let mean = vec![2.0, -1.0, 0.5];
        let s = spec(vec![class("a", 1.0, mean.clone(), 0.8)], 64, 8, Dtype::F64);
        let (tile, _) = generate_scene(&s).unwrap();
        let n = tile.pixel_count() as f64;
        for (k, mu) in mean.iter().enumerate() {
            let avg: f64 = (0..tile.pixel_count()).map(|p| tile.vector(p)[k]).sum::<f64>() / n;
            assert!((avg - mu).abs() < 3.0 * 0.8 / n.sqrt(), "dim {k}: {avg}");
        }
    }

    #[test]
    fn spec_validation() {
        let good = spec(vec![class("a", 1.0, vec![0.0], 1.0)], 4, 2, Dtype::U16);
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.classes[0].prior = 0.9;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.classes[0].stddev = vec![-1.0];
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.patch_size = 0;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.dims = 2;
        assert!(bad.validate().is_err());
    }

    fn checker(size: usize) -> ClassMap {
        let values = (0..size * size).map(|i| (((i / size) + (i % size)) % 2) as u8).collect();
        ClassMap::classes(size, size, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), MapKind::Cluster, values).unwrap()
    }

    #[test]
    fn label_split_and_fidelity() {
        let gt = checker(10);
        let pts = sample_labels(&gt, &[1], 2, 0.5, 3).unwrap();
        assert_eq!(pts.iter().filter(|p| p.subset == Subset::Training).count(), 1);
        assert_eq!(pts.iter().filter(|p| p.subset == Subset::Testing).count(), 1);

        let all = sample_labels(&gt, &[0, 1], 50, 0.8, 3).unwrap();
        assert!(all.iter().all(|p| p.is_crop == 1));

        let pts = sample_labels(&gt, &[1], 60, 0.8, 9).unwrap();
        assert_eq!(pts.iter().filter(|p| p.subset == Subset::Training).count(), 48);
        let mut seen = std::collections::HashSet::new();
        for p in &pts {
            let idx = gt.geo().pixel_index(p.lon, p.lat, 10, 10).unwrap();
            assert!(seen.insert(idx), "duplicate pixel");
            assert_eq!(p.is_crop, gt.class_at(idx).unwrap());
        }
    }

    #[test]
    fn label_crop_share_on_balanced_truth() {
        let gt = checker(100);
        let pts = sample_labels(&gt, &[1], 1000, 0.8, 21).unwrap();
        let share = pts.iter().filter(|p| p.is_crop == 1).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&share), "crop share {share}");
    }

    #[test]
    fn label_errors() {
        let gt = checker(3);
        assert!(matches!(sample_labels(&gt, &[1], 10, 0.5, 0), Err(SynthError::NotEnoughPixels { requested: 10, available: 9 })));
        assert!(sample_labels(&gt, &[1], 1, 0.5, 0).is_err());
        assert!(sample_labels(&gt, &[1], 4, 1.0, 0).is_err());
        assert!(sample_labels(&gt, &[1], 4, 0.0, 0).is_err());
    }

    #[test]
    fn nodata_pixels_are_never_sampled() {
        let gt = checker(4);
        let mut mask = vec![false; 16];
        mask[5] = true;
        mask[6] = true;
        let gt = gt.masked(&mask);
        let pts = sample_labels(&gt, &[1], 2, 0.5, 0).unwrap();
        for p in pts {
            let idx = gt.geo().pixel_index(p.lon, p.lat, 4, 4).unwrap();
            assert!(idx == 5 || idx == 6);
        }
    }

    #[test]
    fn points_csv_round_trip() {
        let pts = sample_labels(&checker(8), &[1], 10, 0.7, 4).unwrap();
        let mut buf = Vec::new();
        write_points(&pts, &mut buf).unwrap();
        assert!(buf.starts_with(b"lon,lat,is_crop,subset\n"));
        assert_eq!(read_points(buf.as_slice()).unwrap(), pts);
    }

    #[test]
    fn points_csv_rejects_bad_rows() {
        assert!(read_points("lon,lat,is_crop,subset\n0,0,2,training\n".as_bytes()).is_err());
        assert!(read_points("lon,lat,is_crop,subset\n0,0,1,validation\n".as_bytes()).is_err());
        assert!(read_points("x,y,is_crop,subset\n0,0,1,training\n".as_bytes()).is_err());
    }
}
