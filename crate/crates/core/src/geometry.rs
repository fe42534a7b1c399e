//! Regions of interest and lon/lat <-> pixel transforms.
//!
//! The grid is equirectangular: a constant pixel size in degrees, columns
//! growing eastward from `origin_lon` and rows growing southward from
//! `origin_lat`. Pixel membership is always decided at pixel centers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel size must be positive and finite, got {0}")]
    BadPixelSize(f64),
    #[error("origin must be finite")]
    BadOrigin,
    #[error("ring {ring} has {distinct} distinct vertices, need at least 3")]
    DegenerateRing { ring: usize, distinct: usize },
    #[error("roi has no rings")]
    EmptyRoi,
    #[error("roi line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_lon: f64,
    pub origin_lat: f64,
    /// Degrees per pixel along both axes.
    pub pixel_size: f64,
}

impl GeoTransform {
    pub fn new(origin_lon: f64, origin_lat: f64, pixel_size: f64) -> Result<Self, GeometryError> {
        let geo = GeoTransform { origin_lon, origin_lat, pixel_size };
        geo.validate()?;
        Ok(geo)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(GeometryError::BadPixelSize(self.pixel_size));
        }
        if !(self.origin_lon.is_finite() && self.origin_lat.is_finite()) {
            return Err(GeometryError::BadOrigin);
        }
        Ok(())
    }

    /// Column and row of the pixel containing `(lon, lat)`. Indices may fall
    /// outside any particular raster; callers bound-check.
    pub fn lonlat_to_pixel(&self, lon: f64, lat: f64) -> (i64, i64) {
        let col = ((lon - self.origin_lon) / self.pixel_size).floor();
        let row = ((self.origin_lat - lat) / self.pixel_size).floor();
        (col as i64, row as i64)
    }

    /// Center of pixel `(col, row)`.
    pub fn pixel_to_lonlat(&self, col: i64, row: i64) -> (f64, f64) {
        (self.origin_lon + (col as f64 + 0.5) * self.pixel_size, self.origin_lat - (row as f64 + 0.5) * self.pixel_size)
    }

    /// Pixel index into a `width`x`height` row-major raster, if in bounds.
    pub fn pixel_index(&self, lon: f64, lat: f64, width: usize, height: usize) -> Option<usize> {
        let (col, row) = self.lonlat_to_pixel(lon, lat);
        if col < 0 || row < 0 || col as usize >= width || row as usize >= height {
            return None;
        }
        Some(row as usize * width + col as usize)
    }
}

/// A polygon in lon/lat. The first ring is the outer boundary, any further
/// rings are holes. Rings are stored closed (first vertex repeated last).
#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    rings: Vec<Vec<(f64, f64)>>,
}

impl Roi {
    pub fn new(rings: Vec<Vec<(f64, f64)>>) -> Result<Self, GeometryError> {
        if rings.is_empty() {
            return Err(GeometryError::EmptyRoi);
        }
        let mut closed = Vec::with_capacity(rings.len());
        for (i, mut ring) in rings.into_iter().enumerate() {
            let mut distinct: Vec<(f64, f64)> = ring.clone();
            distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            distinct.dedup();
            if distinct.len() < 3 {
                return Err(GeometryError::DegenerateRing { ring: i, distinct: distinct.len() });
            }
            if ring.first() != ring.last() {
                ring.push(ring[0]);
            }
            closed.push(ring);
        }
        Ok(Roi { rings: closed })
    }

    /// Axis-aligned rectangle, convenient for whole-tile ROIs.
    pub fn rectangle(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self, GeometryError> {
        Roi::new(vec![vec![(min_lon, min_lat), (max_lon, min_lat), (max_lon, max_lat), (min_lon, max_lat)]])
    }

    pub fn rings(&self) -> &[Vec<(f64, f64)>] {
        &self.rings
    }

    /// Even-odd ray casting over all rings, so holes subtract.
    ///
    /// Each edge counts as crossed when exactly one endpoint lies strictly
    /// above the horizontal through the point (half-open in latitude), and
    /// the crossing lies strictly east of the point. Points on a west or
    /// south edge therefore count as inside, points on an east or north edge
    /// as outside, consistently across adjacent polygons.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        let mut inside = false;
        for ring in &self.rings {
            for edge in ring.windows(2) {
                let (x0, y0) = edge[0];
                let (x1, y1) = edge[1];
                if (y0 > lat) != (y1 > lat) {
                    let x_cross = x0 + (lat - y0) * (x1 - x0) / (y1 - y0);
                    if lon < x_cross {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }

    /// Parses one `lon,lat` pair per line with blank lines between rings.
    /// Lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut rings = Vec::new();
        let mut current = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            if line.is_empty() {
                if !current.is_empty() {
                    rings.push(std::mem::take(&mut current));
                }
                continue;
            }
            let (lon, lat) = line.split_once(',').ok_or_else(|| GeometryError::Parse { line: n + 1, msg: "expected lon,lat".into() })?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| GeometryError::Parse { line: n + 1, msg: e.to_string() });
            current.push((parse(lon)?, parse(lat)?));
        }
        if !current.is_empty() {
            rings.push(current);
        }
        Roi::new(rings)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, ring) in self.rings.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for (lon, lat) in ring {
                out.push_str(&format!("{lon},{lat}\n"));
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, GeometryError> {
        Roi::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), GeometryError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Row-major `width`x`height` mask, true where the pixel center is inside `roi`.
pub fn rasterize_roi(roi: &Roi, geo: &GeoTransform, width: usize, height: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let (lon, lat) = geo.pixel_to_lonlat(col as i64, row as i64);
            mask.push(roi.contains(lon, lat));
        }
    }
    mask
}
