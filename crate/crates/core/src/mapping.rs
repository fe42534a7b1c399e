//! Probability and binary cropland maps, and PNG rendering of any map.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgba, RgbaImage};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::forest::ForestModel;
use crate::rng::{keyed_rng, Purpose};
use crate::tilestore::{ClassMap, EmbeddingTile, MapKind, MapValues, TileError, CLASS_NODATA};

/// Probability cutoff for calling a pixel cropland.
pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const CROP_GREEN: [u8; 4] = [0, 128, 0, 255];
pub const NON_CROP_YELLOW: [u8; 4] = [255, 255, 0, 255];
const TRANSPARENT: [u8; 4] = [0, 0, 0, 0];

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("dimension mismatch: model expects {expected} features, tile has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("expected a {expected} map, got {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("palette has no color for value {0}")]
    PaletteMissing(u8),
    #[error("palette line {line}: {msg}")]
    PaletteParse { line: usize, msg: String },
    #[error("window does not intersect the map")]
    EmptyWindow,
    #[error("invalid window: {0}")]
    BadWindow(String),
    #[error("png encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crop probability for every valid pixel of `tile`; NaN where masked.
pub fn classify_map(model: &ForestModel, tile: &EmbeddingTile) -> Result<ClassMap, MappingError> {
    if model.dims() != tile.dims() {
        return Err(MappingError::DimensionMismatch { expected: model.dims(), found: tile.dims() });
    }
    let values: Vec<f64> = (0..tile.pixel_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; tile.dims()],
            |buf, p| {
                if !tile.is_valid(p) {
                    return f64::NAN;
                }
                tile.read_vector(p, buf);
                model.predict_proba_unchecked(buf)
            },
        )
        .collect();
    Ok(ClassMap::probabilities(tile.width(), tile.height(), *tile.geo(), values)?)
}

/// 1 where probability >= `t` (inclusive), 0 below, nodata kept.
pub fn threshold_map(p: &ClassMap, t: f64) -> Result<ClassMap, MappingError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MappingError::BadThreshold(t));
    }
    let MapValues::Probabilities(probs) = p.values() else {
        return Err(MappingError::WrongKind { expected: "probability", found: p.kind().name() });
    };
    let values = probs.iter().map(|&v| if v.is_nan() { CLASS_NODATA } else { (v >= t) as u8 }).collect();
    Ok(ClassMap::classes(p.width(), p.height(), *p.geo(), MapKind::Binary, values)?)
}

/// Value -> RGBA lookup. For probability maps, entries 0 and 1 are the ends
/// of a linear color ramp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: BTreeMap<u8, [u8; 4]>,
}

impl Palette {
    pub fn new(colors: BTreeMap<u8, [u8; 4]>) -> Self {
        Palette { colors }
    }

    /// Green crop, yellow non-crop.
    pub fn binary() -> Self {
        Palette { colors: BTreeMap::from([(0, NON_CROP_YELLOW), (1, CROP_GREEN)]) }
    }

    /// `k` distinct opaque colors drawn from `seed`.
    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, Purpose::Palette, 0);
        let mut colors = BTreeMap::new();
        let mut used = std::collections::HashSet::new();
        while colors.len() < k.min(CLASS_NODATA as usize) {
            let c = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>(), 255];
            if used.insert(c) {
                colors.insert(colors.len() as u8, c);
            }
        }
        Palette { colors }
    }

    pub fn color(&self, value: u8) -> Option<[u8; 4]> {
        self.colors.get(&value).copied()
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Parses `value=R,G,B[,A]` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, MappingError> {
        let mut colors = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| MappingError::PaletteParse { line: n + 1, msg };
            let (value, rgba) = line.split_once('=').ok_or_else(|| err("expected value=R,G,B[,A]".into()))?;
            let value: u8 = value.trim().parse().map_err(|e| err(format!("value: {e}")))?;
            let parts = rgba
                .split(',')
                .map(|c| c.trim().parse::<u8>().map_err(|e| err(format!("channel: {e}"))))
                .collect::<Result<Vec<u8>, _>>()?;
            let color = match parts[..] {
                [r, g, b] => [r, g, b, 255],
                [r, g, b, a] => [r, g, b, a],
                _ => return Err(err(format!("{} channels", parts.len()))),
            };
            colors.insert(value, color);
        }
        Ok(Palette { colors })
    }

    pub fn to_text(&self) -> String {
        self.colors.iter().map(|(v, [r, g, b, a])| format!("{v}={r},{g},{b},{a}\n")).collect()
    }

    pub fn read(path: &Path) -> Result<Self, MappingError> {
        Palette::parse(&fs::read_to_string(path)?)
    }
}

/// Lon/lat bounding box selecting part of a map to render.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl Window {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self, MappingError> {
        if !(min_lon < max_lon && min_lat < max_lat) {
            return Err(MappingError::BadWindow(format!("[{min_lon}, {max_lon}] x [{min_lat}, {max_lat}] is empty")));
        }
        Ok(Window { min_lon, min_lat, max_lon, max_lat })
    }

    /// Square window of half-width `radius` degrees around `(lon, lat)`.
    pub fn centered(lon: f64, lat: f64, radius: f64) -> Result<Self, MappingError> {
        Window::new(lon - radius, lat - radius, lon + radius, lat + radius)
    }
}

/// Pixel rectangle `(col0, row0, cols, rows)` a window selects: it starts at
/// the pixel containing the window's north-west corner and spans
/// `ceil(extent / pixel_size)` pixels on each axis, clipped to the map.
fn window_pixels(map: &ClassMap, w: &Window) -> Result<(usize, usize, usize, usize), MappingError> {
    let geo = map.geo();
    let span = |extent: f64| ((extent / geo.pixel_size) - 1e-9).ceil().max(1.0) as i64;
    let (col0, row0) = geo.lonlat_to_pixel(w.min_lon, w.max_lat);
    let (col1, row1) = (col0 + span(w.max_lon - w.min_lon), row0 + span(w.max_lat - w.min_lat));
    let c0 = col0.max(0);
    let r0 = row0.max(0);
    let c1 = col1.min(map.width() as i64);
    let r1 = row1.min(map.height() as i64);
    if c0 >= c1 || r0 >= r1 {
        return Err(MappingError::EmptyWindow);
    }
    Ok((c0 as usize, r0 as usize, (c1 - c0) as usize, (r1 - r0) as usize))
}

fn lerp(a: [u8; 4], b: [u8; 4], t: f64) -> [u8; 4] {
    let mut out = [0u8; 4];
    for i in 0..4 {
        out[i] = (a[i] as f64 + (b[i] as f64 - a[i] as f64) * t).round() as u8;
    }
    out
}

/// One image pixel per map pixel inside `window` (whole map if `None`).
/// Nodata is transparent.
pub fn render(map: &ClassMap, palette: &Palette, window: Option<&Window>) -> Result<RgbaImage, MappingError> {
    let (c0, r0, cols, rows) = match window {
        Some(w) => window_pixels(map, w)?,
        None => (0, 0, map.width(), map.height()),
    };
    let ramp = match map.kind() {
        MapKind::Probability => {
            Some((palette.color(0).ok_or(MappingError::PaletteMissing(0))?, palette.color(1).ok_or(MappingError::PaletteMissing(1))?))
        }
        _ => None,
    };
    let mut img = RgbaImage::new(cols as u32, rows as u32);
    for y in 0..rows {
        for x in 0..cols {
            let p = (r0 + y) * map.width() + c0 + x;
            let color = match (map.values(), ramp) {
                (MapValues::Probabilities(v), Some((lo, hi))) => {
                    if v[p].is_nan() {
                        TRANSPARENT
                    } else {
                        lerp(lo, hi, v[p])
                    }
                }
                (MapValues::Classes(v), _) => {
                    if v[p] == CLASS_NODATA {
                        TRANSPARENT
                    } else {
                        palette.color(v[p]).ok_or(MappingError::PaletteMissing(v[p]))?
                    }
                }
                _ => unreachable!("probability maps always carry a ramp"),
            };
            img.put_pixel(x as u32, y as u32, Rgba(color));
        }
    }
    Ok(img)
}

pub fn png_bytes(img: &RgbaImage) -> Result<Vec<u8>, MappingError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_png(img: &RgbaImage, path: &Path) -> Result<(), MappingError> {
    fs::write(path, png_bytes(img)?)?;
    Ok(())
}
