//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod support;

use std::collections::HashMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use cropmap_core::assess::{compute_metrics, f1_from, ConfusionMatrix};
use cropmap_core::cluster::{adjusted_rand_index, fit_kmeans_traced};
use cropmap_core::config::Config;
use cropmap_core::estimate::{estimate_asset, estimate_report, REFERENCE_ASSET_GB};
use cropmap_core::forest::{train_forest, ForestError, ForestModel, Hyperparams, TrainingSet};
use cropmap_core::geometry::GeoTransform;
use cropmap_core::mapping::threshold_map;
use cropmap_core::pipeline::run_pipeline;
use cropmap_core::rng::{keyed_rng, Purpose};
use cropmap_core::tilestore::{bytes_per_pixel, read_tile, write_tile, ClassMap, Dtype, EmbeddingTile, QuantizationParams, TileError};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($msg)+));
        }
    };
}

fn published_f1() -> Outcome {
    // (name, UA, PA, F1) as published.
    let table = [
        ("GLAD", 0.821, 0.627, 0.711),
        ("WorldCover", 0.892, 0.647, 0.750),
        ("Presto", 0.833, 0.784, 0.808),
        ("AlphaEarth", 0.745, 0.745, 0.745),
    ];
    let mut detail = Vec::new();
    for (name, ua, pa, f1) in table {
        let direct = f1_from(ua, pa).ok_or("undefined F1")?;
        // A confusion matrix realizing UA = a/1000 and PA = b/1000 exactly.
        let (a, b) = ((ua * 1000.0f64).round() as u64, (pa * 1000.0f64).round() as u64);
        let tp = a * b;
        let m = compute_metrics(&ConfusionMatrix::new(tp, 1000 * b - tp, 1000 * a - tp, 1_000_000));
        let via_matrix = m.f1.ok_or("undefined F1")?;
        ensure!((direct - f1).abs() <= 0.0005, "{name}: F1 {direct:.5} vs published {f1}");
        ensure!((via_matrix - direct).abs() < 1e-12, "{name}: matrix F1 {via_matrix} vs {direct}");
        detail.push(format!("{name} {direct:.4}"));
    }
    Ok(detail.join(", "))
}

fn storage() -> Outcome {
    let u16q = QuantizationParams::new(Dtype::U16, 1.0, 0.0).unwrap();
    let f64q = QuantizationParams::identity();
    ensure!(bytes_per_pixel(128, &u16q) == 256, "128 x u16 gives {}", bytes_per_pixel(128, &u16q));
    ensure!(bytes_per_pixel(64, &f64q) == 512, "64 x f64 gives {}", bytes_per_pixel(64, &f64q));
    let a = estimate_asset(56_785.0, 128, &u16q)?;
    ensure!(format!("{:.1}", a.gigabytes()) == "145.4", "estimate {:.3} GB", a.gigabytes());
    let report = estimate_report(56_785.0, 128, &u16q, 10.0)?;
    ensure!(report.contains("145.4 GB"), "report lacks the estimate:\n{report}");
    ensure!(report.contains(&format!("{REFERENCE_ASSET_GB} GB")), "report lacks the reported size:\n{report}");
    ensure!(report.contains("11.4% smaller") && report.contains("not modeled"), "report lacks the discrepancy note:\n{report}");
    Ok(format!("256 B and 512 B per pixel; {:.1} GB vs reported {REFERENCE_ASSET_GB} GB", a.gigabytes()))
}

fn end_to_end() -> Outcome {
    let cfg = Config::default();
    let spec = cfg.scene_spec()?;
    ensure!(spec.width == 256 && spec.height == 256 && spec.dims == 16, "scene shape");
    ensure!(spec.classes.len() == 4 && cfg.labels.crop_classes.len() == 2, "class setup");
    for (i, a) in spec.classes.iter().enumerate() {
        for b in &spec.classes[i + 1..] {
            let d = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let sigma = a.stddev.iter().chain(&b.stddev).fold(0.0f64, |m, &s| m.max(s));
            ensure!(d >= 4.0 * sigma, "{} vs {} separated by {:.2} sigma", a.name, b.name, d / sigma);
        }
    }
    ensure!(cfg.labels.n == 1500 && cfg.labels.train_fraction == 0.8, "label setup");
    ensure!(cfg.forest.n_trees == 100 && cfg.mapping.threshold == 0.7, "forest/threshold setup");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let s = pool.install(|| run_pipeline(&cfg, None, dir.path())).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (oa, f1) = (s.metrics.oa.ok_or("OA undefined")?, s.metrics.f1.ok_or("F1 undefined")?);
    let m = s.confusion.matrix;
    ensure!(m.total() == 300, "{} test points used", m.total());
    ensure!(oa >= 0.95, "OA {oa:.4}");
    ensure!(f1 >= 0.93, "F1 {f1:.4}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("OA {oa:.4}, F1 {f1:.4} on {} test points, {:.1} s single-threaded", m.total(), elapsed.as_secs_f64()))
}

fn cart_oracle() -> Outcome {
    let mut probes = 0;
    for seed in 0..25u64 {
        let mut rng = keyed_rng(seed, Purpose::LabelSample, 99);
        let (dims, rows, labels) = support::cart_fixture(&mut rng, seed);
        ensure!(rows.len() <= 50 && dims <= 3, "fixture {seed} too large");
        let pairs: Vec<(Vec<f64>, u8)> = rows.iter().cloned().zip(labels.iter().copied()).collect();
        let model = train_forest(&TrainingSet::from_rows(&pairs).map_err(|e| e.to_string())?, 1, seed, Hyperparams::exhaustive())
            .map_err(|e| e.to_string())?;
        let oracle_rows: Vec<(&[f64], u8)> = rows.iter().map(|r| r.as_slice()).zip(labels.iter().copied()).collect();
        let oracle = support::cart(&oracle_rows);
        let grid = support::probe_grid(&rows, dims);
        ensure!(grid.len() == 100, "probe grid has {} points", grid.len());
        for x in rows.iter().chain(&grid) {
            let got = model.predict_proba(x).map_err(|e| e.to_string())?;
            ensure!(got == oracle.predict(x), "fixture {seed} at {x:?}: {got} vs oracle {}", oracle.predict(x));
            probes += 1;
        }
    }
    Ok(format!("25 fixtures, {probes} predictions identical"))
}

fn clustering() -> Outcome {
    let centers = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)];
    let mut perfect = 0;
    let mut steps = 0;
    for trial in 0..100u64 {
        let mut rng = keyed_rng(trial, Purpose::PixelNoise, 0);
        let mut samples = Vec::new();
        let mut truth = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..50 {
                let dx: f64 = rng.sample(rand_distr::StandardNormal);
                let dy: f64 = rng.sample(rand_distr::StandardNormal);
                samples.push(vec![cx + dx, cy + dy]);
                truth.push(c);
            }
        }
        let (model, trace) = fit_kmeans_traced(&samples, 4, trial, 500).map_err(|e| e.to_string())?;
        for w in trace.windows(2) {
            ensure!(w[1] <= w[0], "trial {trial}: inertia rose from {} to {}", w[0], w[1]);
        }
        steps += trace.len();
        let assigned: Vec<usize> = samples.iter().map(|s| model.assign(s).unwrap()).collect();
        // Same partition iff the label pairing is a bijection.
        let mut pairing = HashMap::new();
        let bijective = truth.iter().zip(&assigned).all(|(t, a)| *pairing.entry(*t).or_insert(*a) == *a)
            && pairing.values().collect::<std::collections::HashSet<_>>().len() == 4;
        let ari = adjusted_rand_index(&truth, &assigned);
        ensure!(bijective == (ari == 1.0), "trial {trial}: ARI {ari} disagrees with partition check");
        perfect += bijective as usize;
    }
    ensure!(perfect >= 95, "ARI = 1.0 in only {perfect} of 100 trials");
    Ok(format!("ARI = 1.0 in {perfect}/100 trials; inertia non-increasing over {steps} recorded steps"))
}

fn threshold_semantics() -> Outcome {
    let geo = GeoTransform::new(0.0, 0.0, 1.0).unwrap();
    let below = f64::from_bits(0.7f64.to_bits() - 1);
    let p = ClassMap::probabilities(3, 1, geo, vec![0.70, below, f64::NAN]).unwrap();
    let b = threshold_map(&p, 0.7).map_err(|e| e.to_string())?;
    ensure!(b.class_at(0) == Some(1), "0.70 not crop");
    ensure!(b.class_at(1) == Some(0), "value just below 0.7 marked crop");
    ensure!(b.class_at(2).is_none(), "nodata not kept");

    let mut rng = keyed_rng(2024, Purpose::PixelNoise, 1);
    let mut checked = 0u64;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let values: Vec<f64> = (0..w * h)
            .map(|_| match rng.random_range(0..10) {
                0 => f64::NAN,
                1 => 0.7,
                _ => rng.random_range(0.0..=1.0),
            })
            .collect();
        let map = ClassMap::probabilities(w, h, geo, values).unwrap();
        let mut ts = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = threshold_map(&map, ts[0]).map_err(|e| e.to_string())?;
        let hi = threshold_map(&map, ts[1]).map_err(|e| e.to_string())?;
        for i in 0..w * h {
            if hi.class_at(i) == Some(1) {
                ensure!(lo.class_at(i) == Some(1), "pixel {i} crop at t={} but not at t={}", ts[1], ts[0]);
            }
            checked += 1;
        }
    }
    Ok(format!("0.70 counts as crop; monotone over 1000 maps ({checked} pixels)"))
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let cfg = Config::default();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for (name, workers) in [("a", 1), ("b", 1), ("c", 8)] {
        let dir = root.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| e.to_string())?;
        pool.install(|| run_pipeline(&cfg, None, &dir)).map_err(|e| e.to_string())?;
        runs.push(dir_bytes(&dir)?);
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    ensure!(names.contains(&"manifest.toml") && names.len() >= 10, "unexpected outputs {names:?}");
    for (label, other) in [("second run", &runs[1]), ("8 workers", &runs[2])] {
        ensure!(other.len() == runs[0].len(), "{label}: different file set");
        for ((n0, b0), (n1, b1)) in runs[0].iter().zip(other.iter()) {
            ensure!(n0 == n1 && b0 == b1, "{label}: {n0} differs");
        }
    }
    let bytes: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!("{} files ({bytes} bytes) identical across two runs and 1 vs 8 workers", names.len()))
}

fn random_tile(rng: &mut rand_chacha::ChaCha8Rng) -> (EmbeddingTile, Vec<f64>) {
    let (w, h, d) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
    let geo = GeoTransform::new(rng.random_range(-180.0..180.0), rng.random_range(-80.0..80.0), rng.random_range(1e-5..0.1)).unwrap();
    let lo: f64 = rng.random_range(-50.0..50.0);
    let span: f64 = rng.random_range(0.01..100.0);
    let values: Vec<f64> = (0..w * h * d).map(|_| lo + rng.random_range(0.0..=1.0) * span).collect();
    let q = match rng.random_range(0..3) {
        0 => QuantizationParams::fit_range(Dtype::U16, lo, lo + span).unwrap(),
        1 => QuantizationParams::fit_range(Dtype::U8, lo, lo + span).unwrap(),
        _ => QuantizationParams::identity(),
    };
    let mask = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
    let (tile, saturated) = EmbeddingTile::from_values(w, h, d, geo, q, &values, mask).unwrap();
    assert_eq!(saturated, 0);
    (tile, values)
}

fn codec() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = keyed_rng(8, Purpose::PixelNoise, 8);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let (tile, values) = random_tile(&mut rng);
        let bytes = tile.to_bytes();
        let back = if i % 100 == 0 {
            let path = dir.path().join("t.embt");
            write_tile(&tile, &path).map_err(|e| e.to_string())?;
            read_tile(&path).map_err(|e| e.to_string())?
        } else {
            EmbeddingTile::from_bytes(&bytes).map_err(|e| format!("tile {i}: {e}"))?
        };
        ensure!(back == tile, "tile {i}: fields drifted");
        ensure!(back.to_bytes() == bytes, "tile {i}: re-encoding differs");
        let q = tile.quant();
        for (k, &v) in values.iter().enumerate() {
            let err = (q.dequantize(tile.data().stored(k)) - v).abs();
            ensure!(err <= q.scale / 2.0, "tile {i}: error {err} > scale/2 = {}", q.scale / 2.0);
            worst = worst.max(err / q.scale);
        }
    }

    let (tile, _) = random_tile(&mut rng);
    let good = tile.to_bytes();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    ensure!(matches!(EmbeddingTile::from_bytes(&bad_magic), Err(TileError::BadMagic(_))), "bad magic not detected");
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    ensure!(matches!(EmbeddingTile::from_bytes(&bad_version), Err(TileError::VersionMismatch { found: 2 })), "version bump not detected");
    for cut in [5, 63, 64, good.len() - 1] {
        ensure!(matches!(EmbeddingTile::from_bytes(&good[..cut]), Err(TileError::Truncated { .. })), "truncation at {cut} not detected");
    }
    for at in [20, 64, good.len() - 5, good.len() - 1] {
        let mut flipped = good.clone();
        flipped[at] ^= 0x10;
        ensure!(
            matches!(EmbeddingTile::from_bytes(&flipped), Err(TileError::ChecksumMismatch { .. })),
            "bit flip at byte {at} not detected"
        );
    }
    let mut trailing = good.clone();
    trailing.push(0);
    ensure!(matches!(EmbeddingTile::from_bytes(&trailing), Err(TileError::Malformed(_))), "trailing bytes not detected");

    let ts = TrainingSet::from_rows(&[(vec![0.0], 0), (vec![1.0], 1)]).unwrap();
    let model = train_forest(&ts, 3, 1, Hyperparams::default()).unwrap().to_bytes();
    let mut m = model.clone();
    m[0] = b'X';
    ensure!(matches!(ForestModel::from_bytes(&m), Err(ForestError::BadMagic)), "model magic");
    ensure!(
        matches!(ForestModel::from_bytes(&model[..model.len() - 3]), Err(ForestError::Truncated | ForestError::ChecksumMismatch { .. })),
        "model truncation"
    );
    let mut m = model.clone();
    let mid = m.len() / 2;
    m[mid] ^= 1;
    ensure!(matches!(ForestModel::from_bytes(&m), Err(ForestError::ChecksumMismatch { .. })), "model bit flip");

    Ok(format!("10000 round trips exact; worst quantization error {worst:.4} x scale; corruptions rejected"))
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("published F1 from UA/PA", published_f1),
        ("storage arithmetic", storage),
        ("end-to-end synthetic benchmark", end_to_end),
        ("single tree vs exhaustive CART oracle", cart_oracle),
        ("k-means blob recovery", clustering),
        ("inclusive threshold and monotonicity", threshold_semantics),
        ("pipeline determinism", determinism),
        ("tile codec", codec),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
