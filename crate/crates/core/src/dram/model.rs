use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::DramGeometry;

/// Probabilistic bit-error model of an approximate DRAM region.
///
/// Each family decides which cells are *weak* (can fail) and how likely a
/// weak cell is to flip on a read:
///
/// * family 0: a uniform weak fraction `p` and flip probability `f_a`;
/// * family 1: weak fraction and flip probability per bitline;
/// * family 2: weak fraction and flip probability per wordline;
/// * family 3: a uniform weak fraction whose flip probability depends on the
///   stored value (`f_v0` for cells holding 0, `f_v1` for cells holding 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelRepr", try_from = "ModelRepr")]
pub enum ErrorModel {
    Uniform { p: f64, f_a: f64 },
    Bitline { p_b: Vec<f64>, f_b: Vec<f64> },
    Wordline { p_w: Vec<f64>, f_w: Vec<f64> },
    DataDependent { p: f64, f_v0: f64, f_v1: f64 },
}

fn check_prob(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!("{name} = {v} is not a probability")))
    }
}

fn check_lines(pname: &str, p: &[f64], fname: &str, f: &[f64]) -> Result<()> {
    if p.is_empty() || p.len() != f.len() {
        return Err(Error::InvalidModel(format!(
            "{pname} and {fname} must be non-empty and equally long ({} vs {})",
            p.len(),
            f.len()
        )));
    }
    p.iter().try_for_each(|&v| check_prob(pname, v))?;
    f.iter().try_for_each(|&v| check_prob(fname, v))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scales the weak-fraction x flip-probability product of one line by `k`,
/// moving the primary parameter first and spilling into the other once it
/// saturates at 1.
fn scale_product(primary: f64, secondary: f64, k: f64) -> (f64, f64) {
    let scaled = primary * k;
    if scaled <= 1.0 {
        (scaled, secondary)
    } else {
        (1.0, (secondary * scaled).min(1.0))
    }
}

impl ErrorModel {
    pub fn uniform(p: f64, f_a: f64) -> Result<Self> {
        let m = ErrorModel::Uniform { p, f_a };
        m.validate()?;
        Ok(m)
    }

    pub fn data_dependent(p: f64, f_v0: f64, f_v1: f64) -> Result<Self> {
        let m = ErrorModel::DataDependent { p, f_v0, f_v1 };
        m.validate()?;
        Ok(m)
    }

    /// Family number, 0 through 3.
    pub fn family(&self) -> u8 {
        match self {
            ErrorModel::Uniform { .. } => 0,
            ErrorModel::Bitline { .. } => 1,
            ErrorModel::Wordline { .. } => 2,
            ErrorModel::DataDependent { .. } => 3,
        }
    }

    /// A model that never flips anything.
    pub fn reliable() -> Self {
        ErrorModel::Uniform { p: 0.0, f_a: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ErrorModel::Uniform { p, f_a } => {
                check_prob("P", *p)?;
                check_prob("F_A", *f_a)
            }
            ErrorModel::Bitline { p_b, f_b } => check_lines("P_B", p_b, "F_B", f_b),
            ErrorModel::Wordline { p_w, f_w } => check_lines("P_W", p_w, "F_W", f_w),
            ErrorModel::DataDependent { p, f_v0, f_v1 } => {
                check_prob("P", *p)?;
                check_prob("F_V0", *f_v0)?;
                check_prob("F_V1", *f_v1)
            }
        }
    }

    /// Validates the model and its per-line array lengths against `geom`.
    pub fn check_geometry(&self, geom: &DramGeometry) -> Result<()> {
        self.validate()?;
        match self {
            ErrorModel::Bitline { p_b, .. } if p_b.len() != geom.bits_per_row as usize => Err(Error::InvalidModel(
                format!("bitline arrays have {} entries, geometry has {} bitlines", p_b.len(), geom.bits_per_row),
            )),
            ErrorModel::Wordline { p_w, .. } if p_w.len() != geom.rows_per_bank as usize => Err(Error::InvalidModel(
                format!("wordline arrays have {} entries, geometry has {} wordlines", p_w.len(), geom.rows_per_bank),
            )),
            _ => Ok(()),
        }
    }

    /// Probability that the cell at linear index `cell` is weak.
    #[inline]
    pub fn weak_probability(&self, geom: &DramGeometry, cell: u64) -> f64 {
        match self {
            ErrorModel::Uniform { p, .. } | ErrorModel::DataDependent { p, .. } => *p,
            ErrorModel::Bitline { p_b, .. } => p_b[geom.bitline_of(cell) as usize],
            ErrorModel::Wordline { p_w, .. } => p_w[geom.row_of(cell) as usize],
        }
    }

    /// Per-read flip probability of a weak cell holding `stored`.
    #[inline]
    pub fn flip_probability(&self, geom: &DramGeometry, cell: u64, stored: bool) -> f64 {
        match self {
            ErrorModel::Uniform { f_a, .. } => *f_a,
            ErrorModel::Bitline { f_b, .. } => f_b[geom.bitline_of(cell) as usize],
            ErrorModel::Wordline { f_w, .. } => f_w[geom.row_of(cell) as usize],
            ErrorModel::DataDependent { f_v0, f_v1, .. } => {
                if stored {
                    *f_v1
                } else {
                    *f_v0
                }
            }
        }
    }

    /// Analytic bit error rate for data with the given fraction of ones.
    pub fn expected_ber(&self, ones_fraction: f64) -> f64 {
        match self {
            ErrorModel::Uniform { p, f_a } => p * f_a,
            ErrorModel::Bitline { p_b, f_b } => {
                p_b.iter().zip(f_b).map(|(p, f)| p * f).sum::<f64>() / p_b.len() as f64
            }
            ErrorModel::Wordline { p_w, f_w } => {
                p_w.iter().zip(f_w).map(|(p, f)| p * f).sum::<f64>() / p_w.len() as f64
            }
            ErrorModel::DataDependent { p, f_v0, f_v1 } => {
                p * (ones_fraction * f_v1 + (1.0 - ones_fraction) * f_v0)
            }
        }
    }

    /// Multiplies every flip probability by `k`; once a flip probability
    /// saturates at 1 the remaining factor moves into the weak fraction.
    pub fn scale_flip_probabilities(&self, k: f64) -> Self {
        debug_assert!(k >= 0.0);
        match self {
            ErrorModel::Uniform { p, f_a } => {
                let (f_a, p) = scale_product(*f_a, *p, k);
                ErrorModel::Uniform { p, f_a }
            }
            ErrorModel::Bitline { p_b, f_b } => {
                let (f_b, p_b) = p_b.iter().zip(f_b).map(|(&p, &f)| scale_product(f, p, k)).unzip();
                ErrorModel::Bitline { p_b, f_b }
            }
            ErrorModel::Wordline { p_w, f_w } => {
                let (f_w, p_w) = p_w.iter().zip(f_w).map(|(&p, &f)| scale_product(f, p, k)).unzip();
                ErrorModel::Wordline { p_w, f_w }
            }
            ErrorModel::DataDependent { p, f_v0, f_v1 } => {
                let top = f_v0.max(*f_v1);
                let direct = if top > 0.0 { k.min(1.0 / top) } else { k };
                let rest = if direct > 0.0 { k / direct } else { 1.0 };
                ErrorModel::DataDependent {
                    p: (p * rest).min(1.0),
                    f_v0: (f_v0 * direct).min(1.0),
                    f_v1: (f_v1 * direct).min(1.0),
                }
            }
        }
    }

    /// Multiplies every weak fraction by `k`; once a weak fraction saturates
    /// at 1 the remaining factor moves into the flip probability.
    ///
    /// Raising `k` only adds weak cells, so weak-cell maps drawn at increasing
    /// scales are nested.
    pub fn scale_weak_fraction(&self, k: f64) -> Self {
        debug_assert!(k >= 0.0);
        match self {
            ErrorModel::Uniform { p, f_a } => {
                let (p, f_a) = scale_product(*p, *f_a, k);
                ErrorModel::Uniform { p, f_a }
            }
            ErrorModel::Bitline { p_b, f_b } => {
                let (p_b, f_b) = p_b.iter().zip(f_b).map(|(&p, &f)| scale_product(p, f, k)).unzip();
                ErrorModel::Bitline { p_b, f_b }
            }
            ErrorModel::Wordline { p_w, f_w } => {
                let (p_w, f_w) = p_w.iter().zip(f_w).map(|(&p, &f)| scale_product(p, f, k)).unzip();
                ErrorModel::Wordline { p_w, f_w }
            }
            ErrorModel::DataDependent { p, f_v0, f_v1 } => {
                let scaled = p * k;
                if scaled <= 1.0 {
                    ErrorModel::DataDependent { p: scaled, f_v0: *f_v0, f_v1: *f_v1 }
                } else {
                    ErrorModel::DataDependent {
                        p: 1.0,
                        f_v0: (f_v0 * scaled).min(1.0),
                        f_v1: (f_v1 * scaled).min(1.0),
                    }
                }
            }
        }
    }

    /// Rescales the weak fractions so that `expected_ber(ones_fraction)`
    /// equals `target` (up to saturation at P = F = 1).
    pub fn with_expected_ber(&self, target: f64, ones_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::InvalidArgument(format!("target BER {target} outside [0, 1]")));
        }
        let current = self.expected_ber(ones_fraction);
        if target == 0.0 {
            return Ok(self.scale_weak_fraction(0.0));
        }
        if current <= 0.0 {
            return Err(Error::InvalidModel("cannot rescale a model with zero expected BER".into()));
        }
        Ok(self.scale_weak_fraction(target / current))
    }

    /// Family-0 approximation with the same mean weak fraction and the same
    /// expected BER.
    pub fn uniform_approximation(&self) -> Self {
        let (p, pf) = match self {
            ErrorModel::Uniform { p, f_a } => (*p, p * f_a),
            ErrorModel::Bitline { p_b: p, f_b: f } | ErrorModel::Wordline { p_w: p, f_w: f } => {
                (mean(p), p.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / p.len() as f64)
            }
            ErrorModel::DataDependent { p, f_v0, f_v1 } => (*p, p * 0.5 * (f_v0 + f_v1)),
        };
        let f_a = if p > 0.0 { (pf / p).min(1.0) } else { 0.0 };
        ErrorModel::Uniform { p, f_a }
    }

    pub fn params_json(&self) -> Value {
        match self {
            ErrorModel::Uniform { p, f_a } => serde_json::json!({ "p": p, "f_a": f_a }),
            ErrorModel::Bitline { p_b, f_b } => serde_json::json!({ "p_b": p_b, "f_b": f_b }),
            ErrorModel::Wordline { p_w, f_w } => serde_json::json!({ "p_w": p_w, "f_w": f_w }),
            ErrorModel::DataDependent { p, f_v0, f_v1 } => {
                serde_json::json!({ "p": p, "f_v0": f_v0, "f_v1": f_v1 })
            }
        }
    }

    pub fn from_params(family: u8, params: Value) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Em0 {
            p: f64,
            f_a: f64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Em1 {
            p_b: Vec<f64>,
            f_b: Vec<f64>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Em2 {
            p_w: Vec<f64>,
            f_w: Vec<f64>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Em3 {
            p: f64,
            f_v0: f64,
            f_v1: f64,
        }
        let bad = |e: serde_json::Error| Error::InvalidModel(format!("family {family} params: {e}"));
        let model = match family {
            0 => {
                let Em0 { p, f_a } = serde_json::from_value(params).map_err(bad)?;
                ErrorModel::Uniform { p, f_a }
            }
            1 => {
                let Em1 { p_b, f_b } = serde_json::from_value(params).map_err(bad)?;
                ErrorModel::Bitline { p_b, f_b }
            }
            2 => {
                let Em2 { p_w, f_w } = serde_json::from_value(params).map_err(bad)?;
                ErrorModel::Wordline { p_w, f_w }
            }
            3 => {
                let Em3 { p, f_v0, f_v1 } = serde_json::from_value(params).map_err(bad)?;
                ErrorModel::DataDependent { p, f_v0, f_v1 }
            }
            other => return Err(Error::InvalidModel(format!("unknown family {other}"))),
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    family: u8,
    params: Value,
}

impl From<ErrorModel> for ModelRepr {
    fn from(m: ErrorModel) -> Self {
        ModelRepr { family: m.family(), params: m.params_json() }
    }
}

impl TryFrom<ModelRepr> for ErrorModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        ErrorModel::from_params(r.family, r.params)
    }
}

/// Error-model JSON document:
/// `{"family": 0..3, "geometry": {...}, "params": {...}, "seed": u64}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorModelFile {
    pub family: u8,
    pub geometry: DramGeometry,
    pub params: Value,
    pub seed: u64,
}

impl ErrorModelFile {
    pub fn new(model: &ErrorModel, geometry: DramGeometry, seed: u64) -> Result<Self> {
        model.check_geometry(&geometry)?;
        Ok(Self { family: model.family(), geometry, params: model.params_json(), seed })
    }

    pub fn model(&self) -> Result<ErrorModel> {
        self.geometry.validate()?;
        let m = ErrorModel::from_params(self.family, self.params.clone())?;
        m.check_geometry(&self.geometry)?;
        Ok(m)
    }
}
