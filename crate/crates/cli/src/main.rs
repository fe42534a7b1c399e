//! `cropmap`: synthesize embedding scenes, cluster them, train a random
//! forest on labeled points, map and threshold crop probability, assess the
//! result, and estimate asset sizes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cropmap_core::assess::{build_confusion, compare_maps, compute_metrics};
use cropmap_core::cluster::{cluster_map, fit_kmeans, sample_pixels, DEFAULT_MAX_ITER};
use cropmap_core::config::Config;
use cropmap_core::estimate::{estimate_report, DEFAULT_PIXEL_M};
use cropmap_core::forest::{oob_score, train_forest, ForestModel, Hyperparams};
use cropmap_core::geometry::Roi;
use cropmap_core::mapping::{classify_map, render, threshold_map, write_png, Palette, Window, DEFAULT_THRESHOLD};
use cropmap_core::pipeline::{metrics_text, run_dir_name, run_pipeline};
use cropmap_core::synth::{generate_scene, read_points_file, sample_labels, write_points_file, LabeledPoint, Subset};
use cropmap_core::tilestore::{
    read_map, read_raster, read_tile, sample_at_points, write_map, write_tile, ClassMap, Dtype, MapKind, QuantizationParams, Raster,
};

mod failure;

use failure::{require, Failure, Kind, Result};

#[derive(Debug, Parser)]
#[command(name = "cropmap", version, about = "Cropland mapping from per-pixel embeddings")]
struct Cli {
    /// Worker threads (default: all cores). Never changes outputs.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic embedding scene, its ground truth and labeled points.
    Synth(SynthArgs),
    /// Fit k-means on sampled pixels and write the cluster map.
    Cluster(ClusterArgs),
    /// Train a random forest on the training points.
    Train(TrainArgs),
    /// Map crop probability over a tile.
    Classify(ClassifyArgs),
    /// Turn a probability map into a binary crop map (p >= t is crop).
    Threshold(ThresholdArgs),
    /// Score a binary map against labeled points.
    Assess(AssessArgs),
    /// Pixelwise agreement between two binary maps.
    Compare(CompareArgs),
    /// Render a map to PNG.
    Render(RenderArgs),
    /// Run every stage from a config file into a fresh run directory.
    Pipeline(PipelineArgs),
    /// Estimate asset size, runtime and cost for an area.
    Estimate(EstimateArgs),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for scene.embt, truth.embt and points.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    tile: PathBuf,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Centroids as text.
    #[arg(long)]
    model_out: PathBuf,
    /// Cluster map raster.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Embedding tiles; the first tile covering a point is used.
    #[arg(long, required = true, num_args = 1..)]
    tile: Vec<PathBuf>,
    #[arg(long)]
    points: PathBuf,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Features tried per split (default ceil(sqrt(dims))).
    #[arg(long)]
    features_per_split: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_leaf: usize,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    no_bootstrap: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tile: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    /// Probability map.
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "t", default_value_t = DEFAULT_THRESHOLD)]
    t: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SubsetArg {
    Training,
    Testing,
    All,
}

#[derive(Debug, Args)]
struct AssessArgs {
    /// Binary crop map.
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    points: PathBuf,
    #[arg(long, value_enum, default_value_t = SubsetArg::Testing)]
    subset: SubsetArg,
    /// Also write metric,value rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    /// Also write the cross-tabulation here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    /// `value=R,G,B[,A]` lines. Defaults: green/yellow for binary maps,
    /// seeded random colors for cluster maps.
    #[arg(long)]
    palette: Option<PathBuf>,
    /// min_lon,min_lat,max_lon,max_lat
    #[arg(long, value_parser = numbers::<4>, allow_hyphen_values = true, conflicts_with = "center")]
    window: Option<[f64; 4]>,
    /// lon,lat of a square window; needs --radius (degrees).
    #[arg(long, value_parser = numbers::<2>, allow_hyphen_values = true, requires = "radius")]
    center: Option<[f64; 2]>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Exactly `N` comma-separated numbers.
fn numbers<const N: usize>(text: &str) -> std::result::Result<[f64; N], String> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<std::result::Result<Vec<f64>, String>>()?;
    values.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent of the run directory (overrides run.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DtypeArg {
    U8,
    U16,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::U8 => Dtype::U8,
            DtypeArg::U16 => Dtype::U16,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Area in km².
    #[arg(long)]
    area: f64,
    #[arg(long, default_value_t = 128)]
    dims: usize,
    #[arg(long, value_enum, default_value_t = DtypeArg::U16)]
    dtype: DtypeArg,
    /// Pixel edge in metres.
    #[arg(long, default_value_t = DEFAULT_PIXEL_M)]
    pixel_m: f64,
}

fn load_config(path: Option<&Path>) -> Result<(Config, Option<PathBuf>)> {
    match path {
        None => Ok((Config::default(), None)),
        Some(p) => {
            require(p)?;
            let text = fs::read_to_string(p).map_err(|e| Failure::from(e).at(p))?;
            let cfg = Config::parse(&text).map_err(|e| Failure::invalid(e).at(p))?;
            Ok((cfg, p.parent().map(Path::to_path_buf)))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::new(Kind::Other, e.to_string()).at(dir))
}

macro_rules! at {
    ($path:expr, $e:expr) => {
        $e.map_err(|e| Failure::from(e).at($path))
    };
}

fn synth(a: SynthArgs) -> Result<()> {
    let (mut cfg, config_dir) = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.run.seed = seed;
    }
    let spec = cfg.scene_spec().map_err(Failure::invalid)?;
    let (mut tile, mut truth) = generate_scene(&spec)?;
    if let Some(path) = cfg.roi_path(config_dir.as_deref()) {
        require(&path)?;
        let roi = at!(&path, Roi::read(&path))?;
        tile = tile.clip(&roi);
        truth = truth.masked(tile.mask());
    }
    let points = sample_labels(&truth, &cfg.labels.crop_classes, cfg.labels.n, cfg.labels.train_fraction, cfg.label_seed())?;
    create_dir(&a.out)?;
    write_tile(&tile, &a.out.join("scene.embt"))?;
    write_map(&truth, &a.out.join("truth.embt"))?;
    write_points_file(&points, &a.out.join("points.csv"))?;
    println!(
        "wrote {}x{}x{} scene, ground truth and {} points to {}",
        tile.width(),
        tile.height(),
        tile.dims(),
        points.len(),
        a.out.display()
    );
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    require(&a.tile)?;
    let tile = at!(&a.tile, read_tile(&a.tile))?;
    let samples = sample_pixels(&tile, a.samples, a.seed);
    let model = fit_kmeans(&samples, a.k, a.seed, a.max_iter)?;
    let map = cluster_map(&model, &tile)?;
    model.write(&a.model_out)?;
    write_map(&map, &a.out)?;
    println!("k = {}, {} samples, {} iterations, inertia {:.4}", model.k(), samples.len(), model.iterations_run, model.inertia);
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<LabeledPoint>> {
    require(path)?;
    at!(path, read_points_file(path))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut tiles = Vec::new();
    for p in &a.tile {
        require(p)?;
        tiles.push(at!(p, read_tile(p))?);
    }
    if let Some(t) = tiles.iter().find(|t| t.dims() != tiles[0].dims()) {
        return Err(Failure::new(Kind::Dimension, format!("tiles have {} and {} dims", tiles[0].dims(), t.dims())));
    }
    let train: Vec<LabeledPoint> = read_points(&a.points)?.into_iter().filter(|p| p.subset == Subset::Training).collect();
    let sampled = sample_at_points(&tiles, &train)?;
    if sampled.dropped > 0 {
        log::warn!("{} training points fell outside the tiles or on masked pixels", sampled.dropped);
    }
    let hp =
        Hyperparams { features_per_split: a.features_per_split, min_leaf: a.min_leaf, max_depth: a.max_depth, bootstrap: !a.no_bootstrap };
    let model = train_forest(&sampled.set, a.trees, a.seed, hp)?;
    model.write(&a.out)?;
    print!("trained {} trees on {} rows", model.n_trees(), sampled.set.len());
    match oob_score(&model, &sampled.set) {
        Ok(oob) => println!(", out-of-bag accuracy {oob:.4}"),
        Err(_) => println!(),
    }
    Ok(())
}

fn classify(a: ClassifyArgs) -> Result<()> {
    require(&a.model)?;
    require(&a.tile)?;
    let model = at!(&a.model, ForestModel::read(&a.model))?;
    let tile = at!(&a.tile, read_tile(&a.tile))?;
    let map = classify_map(&model, &tile)?;
    write_map(&map, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn threshold(a: ThresholdArgs) -> Result<()> {
    require(&a.input)?;
    let p = at!(&a.input, read_map(&a.input))?;
    let b = threshold_map(&p, a.t)?;
    write_map(&b, &a.out)?;
    let valid = (0..b.pixel_count()).filter(|&i| b.is_valid(i)).count();
    let crop = (0..b.pixel_count()).filter(|&i| b.class_at(i) == Some(1)).count();
    println!("{crop} of {valid} valid pixels are crop at t = {}", a.t);
    Ok(())
}

fn assess(a: AssessArgs) -> Result<()> {
    require(&a.map)?;
    let map = at!(&a.map, read_map(&a.map))?;
    let points: Vec<LabeledPoint> = read_points(&a.points)?
        .into_iter()
        .filter(|p| match a.subset {
            SubsetArg::All => true,
            SubsetArg::Training => p.subset == Subset::Training,
            SubsetArg::Testing => p.subset == Subset::Testing,
        })
        .collect();
    let confusion = build_confusion(&map, &points)?;
    let metrics = compute_metrics(&confusion.matrix);
    print!("{}", metrics_text(&confusion, &metrics, None, None));
    if let Some(csv) = &a.csv {
        at!(csv, fs::write(csv, metrics.to_csv()))?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    require(&a.a)?;
    require(&a.b)?;
    let x = at!(&a.a, read_map(&a.a))?;
    let y = at!(&a.b, read_map(&a.b))?;
    let agreement = compare_maps(&x, &y)?;
    print!("{agreement}");
    if let Some(csv) = &a.csv {
        at!(csv, fs::write(csv, agreement.crosstab_csv()))?;
    }
    Ok(())
}

fn default_palette(map: &ClassMap, seed: u64) -> Palette {
    match map.kind() {
        MapKind::Cluster => {
            let top = (0..map.pixel_count()).filter_map(|i| map.class_at(i)).max().map_or(0, |m| m as usize + 1);
            Palette::random(top, seed)
        }
        _ => Palette::binary(),
    }
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    require(&a.input)?;
    let map = match at!(&a.input, read_raster(&a.input))? {
        Raster::Map(m) => m,
        Raster::Embedding(_) => {
            return Err(Failure::new(Kind::Format, "render needs a map, not an embedding tile").at(&a.input));
        }
    };
    let palette = match &a.palette {
        Some(p) => {
            require(p)?;
            at!(p, Palette::read(p))?
        }
        None => default_palette(&map, a.seed),
    };
    let window = match (&a.window, &a.center, a.radius) {
        (Some(w), _, _) => Some(Window::new(w[0], w[1], w[2], w[3])?),
        (None, Some(c), Some(r)) => Some(Window::centered(c[0], c[1], r)?),
        _ => None,
    };
    let img = render(&map, &palette, window.as_ref())?;
    write_png(&img, &a.out)?;
    println!("wrote {}x{} image to {}", img.width(), img.height(), a.out.display());
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let (cfg, config_dir) = load_config(a.config.as_deref())?;
    let parent = a.out.clone().unwrap_or_else(|| match &config_dir {
        Some(d) if cfg.run.out_dir.is_relative() => d.join(&cfg.run.out_dir),
        _ => cfg.run.out_dir.clone(),
    });
    let base = run_dir_name(&cfg);
    let mut dir = parent.join(&base);
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = parent.join(format!("{base}-{n}"));
    }
    let summary = run_pipeline(&cfg, config_dir.as_deref(), &dir)?;
    print!("{}", metrics_text(&summary.confusion, &summary.metrics, summary.oob, Some(cfg.mapping.threshold)));
    println!("Crop fraction        {:>10.4}", summary.crop_fraction);
    println!("Run directory        {}", summary.out_dir.display());
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let q = match a.dtype {
        DtypeArg::F64 => QuantizationParams::identity(),
        d => QuantizationParams::new(d.into(), 1.0, 0.0)?,
    };
    print!("{}", estimate_report(a.area, a.dims, &q, a.pixel_m).map_err(Failure::invalid)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train(a),
        Command::Classify(a) => classify(a),
        Command::Threshold(a) => threshold(a),
        Command::Assess(a) => assess(a),
        Command::Compare(a) => compare(a),
        Command::Render(a) => render_cmd(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Estimate(a) => estimate(a),
        Command::DefaultConfig => {
            print!("{}", Config::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(Kind::Invalid as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(Kind::Other as u8);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
