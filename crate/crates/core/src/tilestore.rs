//! Embedding rasters, single-band maps, and their on-disk format.
//!
//! Layout of a tile file (all little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `EMBT` |
//! | 4  | 2 | version (1) |
//! | 6  | 1 | kind: 0 embedding, 1 cluster, 2 probability, 3 binary |
//! | 7  | 1 | dtype: 0 u16, 1 f64, 2 u8 |
//! | 8  | 4 | width |
//! | 12 | 4 | height |
//! | 16 | 4 | dims |
//! | 20 | 8 | origin_lon |
//! | 28 | 8 | origin_lat |
//! | 36 | 8 | pixel_size |
//! | 44 | 8 | scale |
//! | 52 | 8 | offset |
//! | 60 | 4 | reserved, zero |
//!
//! The header is followed by the row-major payload (`width * height * dims`
//! values, pixel-interleaved), the validity mask as packed bits (row-major,
//! bit `i % 8` of byte `i / 8`, least significant bit first, zero padded to a
//! whole byte) and finally the CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::TrainingSet;
use crate::geometry::{rasterize_roi, GeoTransform, GeometryError, Roi};
use crate::synth::LabeledPoint;

pub const MAGIC: [u8; 4] = *b"EMBT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
const CRC_LEN: usize = 4;

/// Nodata sentinel for cluster and binary maps.
pub const CLASS_NODATA: u8 = 255;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("bad magic: expected EMBT, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u16 },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed tile: {0}")]
    Malformed(String),
    #[error("expected a {expected} raster, file holds {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("invalid quantization: {0}")]
    BadQuantization(String),
    #[error("invalid tile: {0}")]
    Invalid(String),
    #[error("no points sampled ({dropped} dropped)")]
    NoPointsSampled { dropped: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U16,
    F64,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U16 => 2,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn code(self) -> u8 {
        match self {
            Dtype::U16 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, TileError> {
        match code {
            0 => Ok(Dtype::U16),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U8),
            other => Err(TileError::Malformed(format!("unknown dtype code {other}"))),
        }
    }

    /// Largest representable stored value, `None` for floating point.
    fn max_stored(self) -> Option<f64> {
        match self {
            Dtype::U16 => Some(u16::MAX as f64),
            Dtype::U8 => Some(u8::MAX as f64),
            Dtype::F64 => None,
        }
    }
}

/// Affine mapping `real = offset + scale * stored`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizationParams {
    pub dtype: Dtype,
    pub scale: f64,
    pub offset: f64,
}

impl QuantizationParams {
    pub fn new(dtype: Dtype, scale: f64, offset: f64) -> Result<Self, TileError> {
        let q = QuantizationParams { dtype, scale, offset };
        q.validate()?;
        Ok(q)
    }

    pub fn identity() -> Self {
        QuantizationParams { dtype: Dtype::F64, scale: 1.0, offset: 0.0 }
    }

    /// Integer quantization spanning `[min, max]` with the full dtype range.
    /// A zero-width range gets scale 1 so the single value is stored exactly.
    pub fn fit_range(dtype: Dtype, min: f64, max: f64) -> Result<Self, TileError> {
        let Some(levels) = dtype.max_stored() else {
            return Ok(QuantizationParams::identity());
        };
        if !(min.is_finite() && max.is_finite()) || max < min {
            return Err(TileError::BadQuantization(format!("range [{min}, {max}] is not finite and ordered")));
        }
        let span = max - min;
        let scale = if span > 0.0 { span / levels } else { 1.0 };
        QuantizationParams::new(dtype, scale, min)
    }

    pub fn validate(&self) -> Result<(), TileError> {
        if !(self.scale.is_finite() && self.scale > 0.0) || !self.offset.is_finite() {
            return Err(TileError::BadQuantization(format!(
                "scale must be positive and finite, offset finite (scale={}, offset={})",
                self.scale, self.offset
            )));
        }
        if self.dtype == Dtype::F64 && (self.scale != 1.0 || self.offset != 0.0) {
            return Err(TileError::BadQuantization("f64 storage must use scale 1 and offset 0".into()));
        }
        Ok(())
    }

    /// Stored value for `v`: `round((v - offset) / scale)` clamped to the
    /// dtype range. Identity for f64.
    pub fn quantize(&self, v: f64) -> f64 {
        self.quantize_checked(v).0
    }

    /// Like [`quantize`](Self::quantize), also reporting whether `v` had to be
    /// clamped (NaN counts as saturated and stores 0).
    pub fn quantize_checked(&self, v: f64) -> (f64, bool) {
        let Some(max) = self.dtype.max_stored() else {
            return (v, false);
        };
        let raw = ((v - self.offset) / self.scale).round();
        if raw.is_nan() || raw < 0.0 {
            (0.0, true)
        } else if raw > max {
            (max, true)
        } else {
            (raw, false)
        }
    }

    pub fn dequantize(&self, stored: f64) -> f64 {
        match self.dtype {
            Dtype::F64 => stored,
            _ => self.offset + self.scale * stored,
        }
    }
}

pub fn bytes_per_pixel(dims: usize, q: &QuantizationParams) -> usize {
    dims * q.dtype.size()
}

/// Stored values, one variant per dtype.
#[derive(Clone, Debug)]
pub enum TileData {
    U16(Vec<u16>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TileData {
    pub fn len(&self) -> usize {
        match self {
            TileData::U16(v) => v.len(),
            TileData::F64(v) => v.len(),
            TileData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TileData::U16(_) => Dtype::U16,
            TileData::F64(_) => Dtype::F64,
            TileData::U8(_) => Dtype::U8,
        }
    }

    pub fn stored(&self, i: usize) -> f64 {
        match self {
            TileData::U16(v) => v[i] as f64,
            TileData::F64(v) => v[i],
            TileData::U8(v) => v[i] as f64,
        }
    }
}

// Bitwise for f64 so NaN payloads compare equal after a round trip.
impl PartialEq for TileData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TileData::U16(a), TileData::U16(b)) => a == b,
            (TileData::U8(a), TileData::U8(b)) => a == b,
            (TileData::F64(a), TileData::F64(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }
}

/// A georeferenced `width`x`height` grid of `dims`-dimensional embeddings.
/// Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTile {
    width: usize,
    height: usize,
    dims: usize,
    geo: GeoTransform,
    quant: QuantizationParams,
    data: TileData,
    mask: Vec<bool>,
}

impl EmbeddingTile {
    pub fn new(
        width: usize,
        height: usize,
        dims: usize,
        geo: GeoTransform,
        quant: QuantizationParams,
        data: TileData,
        mask: Vec<bool>,
    ) -> Result<Self, TileError> {
        geo.validate()?;
        quant.validate()?;
        if width == 0 || height == 0 || dims == 0 {
            return Err(TileError::Invalid(format!("empty shape {width}x{height}x{dims}")));
        }
        if data.dtype() != quant.dtype {
            return Err(TileError::Invalid("payload dtype differs from quantization dtype".into()));
        }
        if data.len() != width * height * dims {
            return Err(TileError::Invalid(format!("payload has {} values, expected {}", data.len(), width * height * dims)));
        }
        if mask.len() != width * height {
            return Err(TileError::Invalid(format!("mask has {} entries, expected {}", mask.len(), width * height)));
        }
        Ok(EmbeddingTile { width, height, dims, geo, quant, data, mask })
    }

    /// Quantizes real-valued pixel vectors with `quant`. Returns the tile and
    /// how many values saturated.
    pub fn from_values(
        width: usize,
        height: usize,
        dims: usize,
        geo: GeoTransform,
        quant: QuantizationParams,
        values: &[f64],
        mask: Vec<bool>,
    ) -> Result<(Self, usize), TileError> {
        let mut saturated = 0;
        let mut stored = values.iter().map(|&v| {
            let (s, sat) = quant.quantize_checked(v);
            saturated += sat as usize;
            s
        });
        let data = match quant.dtype {
            Dtype::U16 => TileData::U16(stored.by_ref().map(|s| s as u16).collect()),
            Dtype::U8 => TileData::U8(stored.by_ref().map(|s| s as u8).collect()),
            Dtype::F64 => TileData::F64(stored.by_ref().collect()),
        };
        let tile = EmbeddingTile::new(width, height, dims, geo, quant, data, mask)?;
        Ok((tile, saturated))
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> usize {
        self.dims
    }
    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }
    pub fn quant(&self) -> &QuantizationParams {
        &self.quant
    }
    pub fn data(&self) -> &TileData {
        &self.data
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
    pub fn bytes_per_pixel(&self) -> usize {
        bytes_per_pixel(self.dims, &self.quant)
    }

    pub fn is_valid(&self, pixel: usize) -> bool {
        self.mask[pixel]
    }

    /// Dequantized vector of pixel `pixel` (row-major index) into `out`.
    pub fn read_vector(&self, pixel: usize, out: &mut [f64]) {
        let base = pixel * self.dims;
        for (d, slot) in out.iter_mut().enumerate().take(self.dims) {
            *slot = self.quant.dequantize(self.data.stored(base + d));
        }
    }

    pub fn vector(&self, pixel: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dims];
        self.read_vector(pixel, &mut v);
        v
    }

    /// Same tile with every pixel whose center falls outside `roi` masked out.
    pub fn clip(&self, roi: &Roi) -> EmbeddingTile {
        let roi_mask = rasterize_roi(roi, &self.geo, self.width, self.height);
        self.with_mask_and(&roi_mask)
    }

    /// Same tile with its mask ANDed with `mask`.
    pub fn with_mask_and(&self, mask: &[bool]) -> EmbeddingTile {
        let mut out = self.clone();
        for (m, &keep) in out.mask.iter_mut().zip(mask) {
            *m &= keep;
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: RasterKind::Embedding,
            dtype: self.quant.dtype,
            width: self.width,
            height: self.height,
            dims: self.dims,
            geo: self.geo,
            scale: self.quant.scale,
            offset: self.quant.offset,
        };
        encode(&header, &self.data, &self.mask)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TileError> {
        match decode(bytes)? {
            Raster::Embedding(t) => Ok(t),
            Raster::Map(m) => Err(TileError::WrongKind { expected: "embedding", found: m.kind.name() }),
        }
    }
}

pub fn write_tile(tile: &EmbeddingTile, path: &Path) -> Result<(), TileError> {
    fs::write(path, tile.to_bytes())?;
    Ok(())
}

pub fn read_tile(path: &Path) -> Result<EmbeddingTile, TileError> {
    EmbeddingTile::from_bytes(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Cluster,
    Probability,
    Binary,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::Cluster => "cluster",
            MapKind::Probability => "probability",
            MapKind::Binary => "binary",
        }
    }
}

/// Per-pixel values of a [`ClassMap`].
#[derive(Clone, Debug)]
pub enum MapValues {
    /// Class ids for cluster and binary maps; [`CLASS_NODATA`] marks nodata.
    Classes(Vec<u8>),
    /// Probabilities in `[0, 1]`; NaN marks nodata.
    Probabilities(Vec<f64>),
}

impl PartialEq for MapValues {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (MapValues::Classes(a), MapValues::Classes(b)) => a == b,
            (MapValues::Probabilities(a), MapValues::Probabilities(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Single-band raster: cluster ids, crop probabilities, or a binary crop map.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    width: usize,
    height: usize,
    geo: GeoTransform,
    kind: MapKind,
    values: MapValues,
}

impl ClassMap {
    pub fn classes(width: usize, height: usize, geo: GeoTransform, kind: MapKind, values: Vec<u8>) -> Result<Self, TileError> {
        if kind == MapKind::Probability {
            return Err(TileError::Invalid("probability maps hold real values".into()));
        }
        if kind == MapKind::Binary {
            if let Some(bad) = values.iter().find(|&&v| v > 1 && v != CLASS_NODATA) {
                return Err(TileError::Invalid(format!("binary map value {bad}")));
            }
        }
        ClassMap::checked(width, height, geo, kind, MapValues::Classes(values))
    }

    pub fn probabilities(width: usize, height: usize, geo: GeoTransform, values: Vec<f64>) -> Result<Self, TileError> {
        if let Some(bad) = values.iter().find(|v| !v.is_nan() && !(0.0..=1.0).contains(*v)) {
            return Err(TileError::Invalid(format!("probability {bad} outside [0, 1]")));
        }
        ClassMap::checked(width, height, geo, MapKind::Probability, MapValues::Probabilities(values))
    }

    fn checked(width: usize, height: usize, geo: GeoTransform, kind: MapKind, values: MapValues) -> Result<Self, TileError> {
        geo.validate()?;
        let len = match &values {
            MapValues::Classes(v) => v.len(),
            MapValues::Probabilities(v) => v.len(),
        };
        if width == 0 || height == 0 || len != width * height {
            return Err(TileError::Invalid(format!("{len} values for a {width}x{height} map")));
        }
        Ok(ClassMap { width, height, geo, kind, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }
    pub fn kind(&self) -> MapKind {
        self.kind
    }
    pub fn values(&self) -> &MapValues {
        &self.values
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn is_valid(&self, pixel: usize) -> bool {
        match &self.values {
            MapValues::Classes(v) => v[pixel] != CLASS_NODATA,
            MapValues::Probabilities(v) => !v[pixel].is_nan(),
        }
    }

    /// Class id at `pixel`, `None` on nodata or for probability maps.
    pub fn class_at(&self, pixel: usize) -> Option<u8> {
        match &self.values {
            MapValues::Classes(v) if v[pixel] != CLASS_NODATA => Some(v[pixel]),
            _ => None,
        }
    }

    /// Value at `pixel` as a real, `None` on nodata.
    pub fn value_at(&self, pixel: usize) -> Option<f64> {
        match &self.values {
            MapValues::Classes(v) => (v[pixel] != CLASS_NODATA).then(|| v[pixel] as f64),
            MapValues::Probabilities(v) => (!v[pixel].is_nan()).then_some(v[pixel]),
        }
    }

    pub fn validity_mask(&self) -> Vec<bool> {
        (0..self.pixel_count()).map(|i| self.is_valid(i)).collect()
    }

    /// Same map with pixels where `mask` is false set to nodata.
    pub fn masked(&self, mask: &[bool]) -> ClassMap {
        let mut out = self.clone();
        match &mut out.values {
            MapValues::Classes(v) => v.iter_mut().zip(mask).filter(|(_, &m)| !m).for_each(|(x, _)| *x = CLASS_NODATA),
            MapValues::Probabilities(v) => v.iter_mut().zip(mask).filter(|(_, &m)| !m).for_each(|(x, _)| *x = f64::NAN),
        }
        out
    }

    pub fn same_grid(&self, other: &ClassMap) -> bool {
        self.width == other.width && self.height == other.height && self.geo == other.geo
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (dtype, data) = match &self.values {
            MapValues::Classes(v) => (Dtype::U8, TileData::U8(v.clone())),
            MapValues::Probabilities(v) => (Dtype::F64, TileData::F64(v.clone())),
        };
        let header = Header {
            kind: RasterKind::from(self.kind),
            dtype,
            width: self.width,
            height: self.height,
            dims: 1,
            geo: self.geo,
            scale: 1.0,
            offset: 0.0,
        };
        encode(&header, &data, &self.validity_mask())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TileError> {
        match decode(bytes)? {
            Raster::Map(m) => Ok(m),
            Raster::Embedding(_) => Err(TileError::WrongKind { expected: "class map", found: "embedding" }),
        }
    }
}

pub fn write_map(map: &ClassMap, path: &Path) -> Result<(), TileError> {
    fs::write(path, map.to_bytes())?;
    Ok(())
}

pub fn read_map(path: &Path) -> Result<ClassMap, TileError> {
    ClassMap::from_bytes(&fs::read(path)?)
}

/// Either raster flavour, as found in a file.
#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    Embedding(EmbeddingTile),
    Map(ClassMap),
}

pub fn read_raster(path: &Path) -> Result<Raster, TileError> {
    decode(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RasterKind {
    Embedding,
    Map(MapKind),
}

impl From<MapKind> for RasterKind {
    fn from(k: MapKind) -> Self {
        RasterKind::Map(k)
    }
}

impl RasterKind {
    fn code(self) -> u8 {
        match self {
            RasterKind::Embedding => 0,
            RasterKind::Map(MapKind::Cluster) => 1,
            RasterKind::Map(MapKind::Probability) => 2,
            RasterKind::Map(MapKind::Binary) => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self, TileError> {
        Ok(match code {
            0 => RasterKind::Embedding,
            1 => RasterKind::Map(MapKind::Cluster),
            2 => RasterKind::Map(MapKind::Probability),
            3 => RasterKind::Map(MapKind::Binary),
            other => return Err(TileError::Malformed(format!("unknown kind code {other}"))),
        })
    }
}

struct Header {
    kind: RasterKind,
    dtype: Dtype,
    width: usize,
    height: usize,
    dims: usize,
    geo: GeoTransform,
    scale: f64,
    offset: f64,
}

/// Total file length implied by a shape, `None` on overflow.
pub fn encoded_len(width: usize, height: usize, dims: usize, dtype: Dtype) -> Option<usize> {
    let pixels = width.checked_mul(height)?;
    let payload = pixels.checked_mul(dims)?.checked_mul(dtype.size())?;
    HEADER_LEN.checked_add(payload)?.checked_add(pixels.div_ceil(8))?.checked_add(CRC_LEN)
}

fn encode(h: &Header, data: &TileData, mask: &[bool]) -> Vec<u8> {
    let total = encoded_len(h.width, h.height, h.dims, h.dtype).expect("tile size overflows usize");
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(h.kind.code());
    out.push(h.dtype.code());
    for dim in [h.width, h.height, h.dims] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for f in [h.geo.origin_lon, h.geo.origin_lat, h.geo.pixel_size, h.scale, h.offset] {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.resize(HEADER_LEN, 0);

    match data {
        TileData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TileData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TileData::U8(v) => out.extend_from_slice(v),
    }

    let mut packed = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        packed[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&packed);

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len(), total);
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn decode(bytes: &[u8]) -> Result<Raster, TileError> {
    if bytes.len() < MAGIC.len() {
        return Err(TileError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(TileError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(TileError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(TileError::VersionMismatch { found: version });
    }
    let kind = RasterKind::from_code(bytes[6])?;
    let dtype = Dtype::from_code(bytes[7])?;
    let width = le_u32(bytes, 8) as usize;
    let height = le_u32(bytes, 12) as usize;
    let dims = le_u32(bytes, 16) as usize;
    let expected =
        encoded_len(width, height, dims, dtype).ok_or_else(|| TileError::Malformed(format!("shape {width}x{height}x{dims} overflows")))?;
    if bytes.len() < expected {
        return Err(TileError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(TileError::Malformed(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let body = expected - CRC_LEN;
    let stored = le_u32(bytes, body);
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(TileError::ChecksumMismatch { stored, computed });
    }

    let geo = GeoTransform { origin_lon: le_f64(bytes, 20), origin_lat: le_f64(bytes, 28), pixel_size: le_f64(bytes, 36) };
    let scale = le_f64(bytes, 44);
    let offset = le_f64(bytes, 52);

    let pixels = width * height;
    let n = pixels * dims;
    let payload = &bytes[HEADER_LEN..HEADER_LEN + n * dtype.size()];
    let data = match dtype {
        Dtype::U16 => TileData::U16(payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
        Dtype::F64 => TileData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        Dtype::U8 => TileData::U8(payload.to_vec()),
    };
    let mask_bytes = &bytes[HEADER_LEN + n * dtype.size()..body];
    let mask: Vec<bool> = (0..pixels).map(|i| mask_bytes[i / 8] >> (i % 8) & 1 == 1).collect();

    match kind {
        RasterKind::Embedding => {
            let quant = QuantizationParams::new(dtype, scale, offset)?;
            Ok(Raster::Embedding(EmbeddingTile::new(width, height, dims, geo, quant, data, mask)?))
        }
        RasterKind::Map(map_kind) => {
            if dims != 1 {
                return Err(TileError::Malformed(format!("class map with {dims} bands")));
            }
            let map = match (map_kind, data) {
                (MapKind::Probability, TileData::F64(v)) => ClassMap::probabilities(width, height, geo, v)?,
                (MapKind::Cluster | MapKind::Binary, TileData::U8(v)) => ClassMap::classes(width, height, geo, map_kind, v)?,
                (k, d) => {
                    return Err(TileError::Malformed(format!("{} map stored as {:?}", k.name(), d.dtype())));
                }
            };
            if map.validity_mask() != mask {
                return Err(TileError::Malformed("mask disagrees with nodata values".into()));
            }
            Ok(Raster::Map(map))
        }
    }
}

/// Output of [`sample_at_points`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub set: TrainingSet,
    /// Points outside every tile or on a masked pixel.
    pub dropped: usize,
}

/// Pairs each point with the dequantized embedding of the pixel containing
/// it. Tiles are searched in order; the first tile covering a point wins.
pub fn sample_at_points(tiles: &[EmbeddingTile], points: &[LabeledPoint]) -> Result<Sampled, TileError> {
    let Some(first) = tiles.first() else {
        return Err(TileError::NoPointsSampled { dropped: points.len() });
    };
    let dims = first.dims();
    if tiles.iter().any(|t| t.dims() != dims) {
        return Err(TileError::Invalid("tiles have differing embedding dimensions".into()));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    let mut buf = vec![0.0; dims];
    for p in points {
        let hit = tiles.iter().find_map(|t| t.geo().pixel_index(p.lon, p.lat, t.width(), t.height()).map(|i| (t, i)));
        match hit {
            Some((tile, idx)) if tile.is_valid(idx) => {
                tile.read_vector(idx, &mut buf);
                features.extend_from_slice(&buf);
                labels.push(p.is_crop);
            }
            _ => dropped += 1,
        }
    }
    if labels.is_empty() {
        return Err(TileError::NoPointsSampled { dropped });
    }
    let set = TrainingSet::new(dims, features, labels).map_err(|e| TileError::Invalid(e.to_string()))?;
    Ok(Sampled { set, dropped })
}
