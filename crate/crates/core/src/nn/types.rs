use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Whether a data type is a weight tensor or an input feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DataKind {
    Weight,
    Ifm,
}

/// One weight tensor (weights and bias of a parametric layer) or one input
/// feature map, indexed by parametric layer. Orders weights before IFMs and
/// shallow layers before deep ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DataTypeId {
    pub kind: DataKind,
    pub layer: u32,
}

impl DataTypeId {
    pub fn weight(layer: u32) -> Self {
        Self { kind: DataKind::Weight, layer }
    }

    pub fn ifm(layer: u32) -> Self {
        Self { kind: DataKind::Ifm, layer }
    }
}

impl fmt::Display for DataTypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DataKind::Weight => write!(f, "weight:{}", self.layer),
            DataKind::Ifm => write!(f, "ifm:{}", self.layer),
        }
    }
}

impl FromStr for DataTypeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad data type id {s:?} (expected weight:N or ifm:N)"));
        let (kind, layer) = s.split_once(':').ok_or_else(bad)?;
        let layer: u32 = layer.parse().map_err(|_| bad())?;
        match kind {
            "weight" => Ok(Self::weight(layer)),
            "ifm" => Ok(Self::ifm(layer)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for DataTypeId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DataTypeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What to do with a loaded value outside its plausible range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    Off,
    #[default]
    Zero,
    Saturate,
}

impl FromStr for Correction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Correction::Off),
            "zero" => Ok(Correction::Zero),
            "saturate" => Ok(Correction::Saturate),
            _ => Err(Error::InvalidArgument(format!("unknown correction mode {s:?}"))),
        }
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correction::Off => "off",
            Correction::Zero => "zero",
            Correction::Saturate => "saturate",
        })
    }
}

/// Default widening of captured ranges.
pub const MARGIN_FACTOR: f64 = 1.1;

/// Observed value ranges per data type, captured while training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub margin: f64,
    /// Raw observed `(min, max)`.
    pub observed: BTreeMap<DataTypeId, (f64, f64)>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { margin: MARGIN_FACTOR, observed: BTreeMap::new() }
    }
}

impl Thresholds {
    pub fn observe(&mut self, id: DataTypeId, lo: f64, hi: f64) {
        if !(lo.is_finite() && hi.is_finite()) {
            return;
        }
        let e = self.observed.entry(id).or_insert((lo, hi));
        e.0 = e.0.min(lo);
        e.1 = e.1.max(hi);
    }

    pub fn observe_values<I: IntoIterator<Item = f64>>(&mut self, id: DataTypeId, values: I) {
        let (lo, hi) = values
            .into_iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo <= hi {
            self.observe(id, lo, hi);
        }
    }

    /// Widened bounds: each bound moves outward by `(margin − 1)·|bound|`.
    pub fn bounds(&self, id: DataTypeId) -> Option<(f64, f64)> {
        let w = self.margin - 1.0;
        self.observed.get(&id).map(|&(lo, hi)| (lo - w * lo.abs(), hi + w * hi.abs()))
    }
}

/// Replaces an implausible value: anything outside `[lo, hi]` or non-finite
/// becomes 0 (zero mode) or the nearest bound (saturate mode).
#[inline]
pub fn bound_correct(x: f64, bounds: (f64, f64), mode: Correction) -> f64 {
    let (lo, hi) = bounds;
    if x >= lo && x <= hi {
        return x;
    }
    match mode {
        Correction::Off => x,
        Correction::Zero => 0.0,
        Correction::Saturate => {
            if x.is_nan() {
                // No side to pick; the bound nearest zero is the least harmful.
                if lo.abs() <= hi.abs() { lo } else { hi }
            } else if x < lo {
                lo
            } else {
                hi
            }
        }
    }
}

/// Exponent-field check on fp32 values, as a memory controller would do
/// it: a value is implausible when its biased exponent exceeds that of the
/// largest bound magnitude, or its sign is impossible for the range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExponentCheck {
    max_exponent: u32,
    allow_negative: bool,
    allow_positive: bool,
}

impl ExponentCheck {
    pub fn new(bounds: (f64, f64)) -> Self {
        let (lo, hi) = bounds;
        let m = lo.abs().max(hi.abs()) as f32;
        Self { max_exponent: (m.to_bits() >> 23) & 0xFF, allow_negative: lo < 0.0, allow_positive: hi > 0.0 }
    }

    #[inline]
    pub fn is_plausible(&self, x: f32) -> bool {
        let bits = x.to_bits();
        let exponent = (bits >> 23) & 0xFF;
        if exponent == 0xFF || exponent > self.max_exponent {
            return false;
        }
        if x == 0.0 {
            return true;
        }
        if bits >> 31 == 1 {
            self.allow_negative
        } else {
            self.allow_positive
        }
    }

    #[inline]
    pub fn correct(&self, x: f32, bounds: (f64, f64), mode: Correction) -> f32 {
        if mode == Correction::Off || self.is_plausible(x) {
            return x;
        }
        match mode {
            Correction::Zero | Correction::Off => 0.0,
            Correction::Saturate => bound_correct(f64::from(x), bounds, mode) as f32,
        }
    }
}
