//! Accuracy assessment of binary crop maps. Crop is the positive class.

use std::fmt;

use thiserror::Error;

use crate::synth::LabeledPoint;
use crate::tilestore::{ClassMap, MapKind};

#[derive(Debug, Error)]
pub enum AssessError {
    #[error("no test point falls on a valid map pixel ({dropped} dropped)")]
    NoUsablePoints { dropped: usize },
    #[error("expected a binary map, got {0}")]
    NotBinary(&'static str),
    #[error("maps are on different grids")]
    GridMismatch,
    #[error("maps share no valid pixel")]
    NoOverlap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// 2x2 table, rows predicted and columns actual.
    pub fn to_csv(&self) -> String {
        format!("predicted\\actual,crop,non_crop\ncrop,{},{}\nnon_crop,{},{}\n", self.tp, self.fp, self.fn_, self.tn)
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Overall, user's and producer's accuracy and F1. `None` means undefined
/// (a zero denominator), never zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub oa: Option<f64>,
    pub ua: Option<f64>,
    pub pa: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// F1 as the harmonic mean of user's and producer's accuracy.
pub fn f1_from(ua: f64, pa: f64) -> Option<f64> {
    (ua + pa > 0.0).then(|| 2.0 * ua * pa / (ua + pa))
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let oa = ratio(cm.tp + cm.tn, cm.total());
    let ua = ratio(cm.tp, cm.tp + cm.fp);
    let pa = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (ua, pa) {
        (Some(u), Some(p)) => f1_from(u, p),
        _ => None,
    };
    MetricsReport { oa, ua, pa, f1 }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    fn rows(&self) -> [(&'static str, Option<f64>); 4] {
        [("overall_accuracy", self.oa), ("users_accuracy", self.ua), ("producers_accuracy", self.pa), ("f1", self.f1)]
    }

    /// `metric,value` rows; undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.rows() {
            out.push_str(&format!("{name},{}\n", v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Overall accuracy     {:>10}", fmt_metric(self.oa))?;
        writeln!(f, "User's accuracy      {:>10}", fmt_metric(self.ua))?;
        writeln!(f, "Producer's accuracy  {:>10}", fmt_metric(self.pa))?;
        writeln!(f, "F1 score             {:>10}", fmt_metric(self.f1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub matrix: ConfusionMatrix,
    /// Points outside the map or on nodata.
    pub dropped: usize,
}

/// Looks up each point's pixel in `map` and tallies prediction vs label.
/// Callers pass the testing subset.
pub fn build_confusion(map: &ClassMap, points: &[LabeledPoint]) -> Result<Confusion, AssessError> {
    if map.kind() != MapKind::Binary {
        return Err(AssessError::NotBinary(map.kind().name()));
    }
    let mut matrix = ConfusionMatrix::default();
    let mut dropped = 0;
    for p in points {
        match map.geo().pixel_index(p.lon, p.lat, map.width(), map.height()).and_then(|i| map.class_at(i)) {
            Some(pred) => matrix.record(pred == 1, p.is_crop == 1),
            None => dropped += 1,
        }
    }
    if matrix.total() == 0 {
        return Err(AssessError::NoUsablePoints { dropped });
    }
    Ok(Confusion { matrix, dropped })
}

/// Pixelwise agreement of two binary maps over jointly valid pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Agreement {
    pub joint_valid: u64,
    pub crop_fraction_a: f64,
    pub crop_fraction_b: f64,
    pub agreement: f64,
    /// `crosstab[a][b]` counts pixels with value `a` in the first map and
    /// `b` in the second.
    pub crosstab: [[u64; 2]; 2],
}

impl Agreement {
    pub fn crosstab_csv(&self) -> String {
        let t = &self.crosstab;
        format!("a\\b,0,1\n0,{},{}\n1,{},{}\n", t[0][0], t[0][1], t[1][0], t[1][1])
    }

    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\njoint_valid,{}\ncrop_fraction_a,{}\ncrop_fraction_b,{}\nagreement,{}\n",
            self.joint_valid, self.crop_fraction_a, self.crop_fraction_b, self.agreement
        )
    }
}

impl fmt::Display for Agreement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Jointly valid pixels {:>10}", self.joint_valid)?;
        writeln!(f, "Crop fraction (a)    {:>10.4}", self.crop_fraction_a)?;
        writeln!(f, "Crop fraction (b)    {:>10.4}", self.crop_fraction_b)?;
        writeln!(f, "Agreement            {:>10.4}", self.agreement)?;
        writeln!(f, "            b=0        b=1")?;
        writeln!(f, "a=0  {:>10} {:>10}", self.crosstab[0][0], self.crosstab[0][1])?;
        writeln!(f, "a=1  {:>10} {:>10}", self.crosstab[1][0], self.crosstab[1][1])
    }
}

pub fn compare_maps(a: &ClassMap, b: &ClassMap) -> Result<Agreement, AssessError> {
    for m in [a, b] {
        if m.kind() != MapKind::Binary {
            return Err(AssessError::NotBinary(m.kind().name()));
        }
    }
    if !a.same_grid(b) {
        return Err(AssessError::GridMismatch);
    }
    let mut crosstab = [[0u64; 2]; 2];
    for p in 0..a.pixel_count() {
        if let (Some(x), Some(y)) = (a.class_at(p), b.class_at(p)) {
            crosstab[x as usize][y as usize] += 1;
        }
    }
    let joint: u64 = crosstab.iter().flatten().sum();
    if joint == 0 {
        return Err(AssessError::NoOverlap);
    }
    let n = joint as f64;
    Ok(Agreement {
        joint_valid: joint,
        crop_fraction_a: (crosstab[1][0] + crosstab[1][1]) as f64 / n,
        crop_fraction_b: (crosstab[0][1] + crosstab[1][1]) as f64 / n,
        agreement: (crosstab[0][0] + crosstab[1][1]) as f64 / n,
        crosstab,
    })
}
