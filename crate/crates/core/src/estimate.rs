//! Storage and compute estimates for embedding assets.
//!
//! Cost and runtime scale linearly from one reference run (56,785 km²,
//! 16 hours, $313.40). One observation cannot show whether the relationship
//! is actually linear, so treat these as rough guides.

use std::fmt::Write as _;

use crate::tilestore::{bytes_per_pixel, Dtype, QuantizationParams};

pub const REFERENCE_AREA_KM2: f64 = 56_785.0;
pub const REFERENCE_ASSET_GB: f64 = 128.8;
pub const REFERENCE_HOURS: f64 = 16.0;
pub const REFERENCE_COST_USD: f64 = 313.40;
pub const DEFAULT_PIXEL_M: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssetEstimate {
    pub pixels: f64,
    pub bytes_per_pixel: usize,
    pub bytes: f64,
}

impl AssetEstimate {
    /// Decimal gigabytes.
    pub fn gigabytes(&self) -> f64 {
        self.bytes / 1e9
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub hours: f64,
    pub dollars: f64,
}

fn check_area(area_km2: f64) -> Result<(), String> {
    if area_km2.is_finite() && area_km2 > 0.0 {
        Ok(())
    } else {
        Err(format!("area must be positive, got {area_km2}"))
    }
}

/// Size of a `dims`-band embedding asset covering `area_km2` with 10 m pixels.
pub fn estimate_asset(area_km2: f64, dims: usize, q: &QuantizationParams) -> Result<AssetEstimate, String> {
    estimate_asset_at(area_km2, dims, q, DEFAULT_PIXEL_M)
}

pub fn estimate_asset_at(area_km2: f64, dims: usize, q: &QuantizationParams, pixel_m: f64) -> Result<AssetEstimate, String> {
    check_area(area_km2)?;
    if dims == 0 {
        return Err("dims must be at least 1".into());
    }
    if !(pixel_m.is_finite() && pixel_m > 0.0) {
        return Err(format!("pixel size must be positive, got {pixel_m}"));
    }
    let pixels = area_km2 * 1e6 / (pixel_m * pixel_m);
    let bpp = bytes_per_pixel(dims, q);
    Ok(AssetEstimate { pixels, bytes_per_pixel: bpp, bytes: pixels * bpp as f64 })
}

pub fn estimate_cost(area_km2: f64) -> Result<CostEstimate, String> {
    check_area(area_km2)?;
    let f = area_km2 / REFERENCE_AREA_KM2;
    Ok(CostEstimate { hours: REFERENCE_HOURS * f, dollars: REFERENCE_COST_USD * f })
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::U16 => "u16",
        Dtype::F64 => "f64",
        Dtype::U8 => "u8",
    }
}

/// Human-readable estimate, always listing the reference asset size next to
/// the per-pixel arithmetic.
pub fn estimate_report(area_km2: f64, dims: usize, q: &QuantizationParams, pixel_m: f64) -> Result<String, String> {
    let a = estimate_asset_at(area_km2, dims, q, pixel_m)?;
    let c = estimate_cost(area_km2)?;
    let reference =
        estimate_asset_at(REFERENCE_AREA_KM2, 128, &QuantizationParams { dtype: Dtype::U16, scale: 1.0, offset: 0.0 }, DEFAULT_PIXEL_M)?;
    let gap = (reference.gigabytes() - REFERENCE_ASSET_GB) / reference.gigabytes() * 100.0;
    let mut s = String::new();
    let _ = writeln!(s, "Area                 {area_km2} km2");
    let _ = writeln!(s, "Pixel size           {pixel_m} m");
    let _ = writeln!(s, "Pixels               {:.0}", a.pixels);
    let _ = writeln!(s, "Bytes per pixel      {} ({} x {})", a.bytes_per_pixel, dims, dtype_name(q.dtype));
    let _ = writeln!(s, "Estimated size       {:.1} GB ({:.0} bytes)", a.gigabytes(), a.bytes);
    let _ = writeln!(
        s,
        "Reference asset      {REFERENCE_ASSET_GB} GB reported for {REFERENCE_AREA_KM2} km2 at 128 x u16; \
         the same arithmetic gives {:.1} GB, so the reported size is {gap:.1}% smaller. \
         The cause (masked pixels outside the boundary? storage compression?) is unknown and not modeled.",
        reference.gigabytes()
    );
    let _ = writeln!(s, "Estimated runtime    {:.2} h", c.hours);
    let _ = writeln!(s, "Estimated cost       ${:.2}", c.dollars);
    let _ = writeln!(
        s,
        "Caveat               runtime and cost are linear extrapolations from one reference run \
         ({REFERENCE_HOURS} h, ${REFERENCE_COST_USD:.2} for {REFERENCE_AREA_KM2} km2)"
    );
    Ok(s)
}
