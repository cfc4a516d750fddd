//! Maximum tolerable bit error rate of a network: one global value (coarse)
//! or one per data type (fine).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{evaluate_accuracy, DataTypeId, Dataset, DramEnv, Network};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// Ascending list of BERs the coarse search may return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerGrid {
    points: Vec<f64>,
}

impl BerGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("BER grid is empty".into()));
        }
        if points.iter().any(|&p| !(p > 0.0 && p <= 0.5)) || points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("BER grid must be strictly ascending within (0, 0.5]".into()));
        }
        Ok(Self { points })
    }

    /// `10^(lo + i/per_decade)` up to `max`, with `max` appended when it is
    /// not itself a grid point.
    pub fn log(lo_exponent: i32, max: f64, per_decade: u32) -> Result<Self> {
        if per_decade == 0 || !(max > 0.0) {
            return Err(Error::InvalidArgument("log grid needs per_decade >= 1 and max > 0".into()));
        }
        let mut points = Vec::new();
        for i in 0.. {
            let p = 10f64.powf(f64::from(lo_exponent) + f64::from(i) / f64::from(per_decade));
            if p > max * (1.0 + 1e-12) {
                break;
            }
            points.push(p);
        }
        if points.last().is_none_or(|&l| (l - max).abs() > 1e-12 * max) {
            points.push(max);
        }
        Self::new(points)
    }

    /// `10^-8 … 0.3`, eight points per decade.
    pub fn default_grid() -> Self {
        Self::log(-8, 0.3, 8).expect("default grid is valid")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the grid point equal to `ber` (relative tolerance 1e-9).
    pub fn index_of(&self, ber: f64) -> Option<usize> {
        self.points.iter().position(|&p| (p - ber).abs() <= 1e-9 * p)
    }
}

impl FromStr for BerGrid {
    type Err = Error;

    /// `default`, `log:LO_EXP:MAX:PER_DECADE` or `list:B1,B2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad grid spec {s:?}"));
        if s == "default" {
            return Ok(Self::default_grid());
        }
        if let Some(rest) = s.strip_prefix("log:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            return Self::log(
                parts[0].parse().map_err(|_| bad())?,
                parts[1].parse().map_err(|_| bad())?,
                parts[2].parse().map_err(|_| bad())?,
            );
        }
        if let Some(rest) = s.strip_prefix("list:") {
            let points = rest.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
            return Self::new(points);
        }
        Err(bad())
    }
}

/// BERs applied during one accuracy probe.
#[derive(Debug, Clone, PartialEq)]
pub enum BerAssignment {
    Uniform(f64),
    PerType(BTreeMap<DataTypeId, f64>),
}

/// Source of accuracy measurements under injected errors.
pub trait AccuracyProbe {
    fn data_types(&self) -> Vec<DataTypeId>;
    /// Accuracy (percent) without errors.
    fn clean_accuracy(&self) -> Result<f64>;
    /// Mean accuracy (percent) over `trials` injections.
    fn accuracy(&self, bers: &BerAssignment, trials: usize, seed: u64) -> Result<f64>;
}

/// Probes a network by injecting through scaled copies of an environment.
pub struct NetworkProbe<'a, S> {
    pub net: &'a Network<S>,
    pub data: &'a Dataset,
    pub env: &'a DramEnv,
    /// Accuracy drops are measured from this instead of the network's own
    /// clean accuracy (e.g. a retrained model against its baseline).
    pub reference_accuracy: Option<f64>,
}

impl<S: Scalar> AccuracyProbe for NetworkProbe<'_, S> {
    fn data_types(&self) -> Vec<DataTypeId> {
        self.net.data_types()
    }

    fn clean_accuracy(&self) -> Result<f64> {
        match self.reference_accuracy {
            Some(a) => Ok(a),
            None => Ok(evaluate_accuracy(self.net, self.data, None, 1, 0)?.mean),
        }
    }

    fn accuracy(&self, bers: &BerAssignment, trials: usize, seed: u64) -> Result<f64> {
        let env = match bers {
            BerAssignment::Uniform(b) => self.env.with_ber(*b)?,
            BerAssignment::PerType(m) => self.env.with_type_bers(m, Some(0.0))?,
        };
        Ok(evaluate_accuracy(self.net, self.data, Some(&env), trials, seed)?.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CharMode {
    Coarse,
    Fine,
}

impl FromStr for CharMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(CharMode::Coarse),
            "fine" => Ok(CharMode::Fine),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?} (expected coarse or fine)"))),
        }
    }
}

impl fmt::Display for CharMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CharMode::Coarse => "coarse",
            CharMode::Fine => "fine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    /// Per-type BERs of the probe, or a single `"all"` entry.
    pub bers: BTreeMap<String, f64>,
    pub accuracy: f64,
    pub drop: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub trials: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub drop: f64,
    pub passed: bool,
}

/// Outcome of a coarse search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseOutcome {
    /// Largest passing grid BER, 0 if none passes.
    pub ber: f64,
    pub index: Option<usize>,
    pub clean_accuracy: f64,
    /// Search probes, in order.
    pub probes: Vec<ProbeRecord>,
    pub validations: Vec<Validation>,
    pub warnings: Vec<String>,
}

/// Tolerance beyond the target the validation re-run may show, in points.
pub const VALIDATION_SLACK: f64 = 1.0;

fn record(bers: &BerAssignment, accuracy: f64, clean: f64, target: f64) -> ProbeRecord {
    let drop = clean - accuracy;
    let bers = match bers {
        BerAssignment::Uniform(b) => BTreeMap::from([("all".to_string(), *b)]),
        BerAssignment::PerType(m) => m.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    ProbeRecord { bers, accuracy, drop, passed: drop <= target }
}

fn validate(
    probe: &dyn AccuracyProbe,
    bers: &BerAssignment,
    clean: f64,
    target: f64,
    trials: usize,
    seed: u64,
) -> Result<Validation> {
    let seed = derive_seed(seed, "validate");
    let trials = 3 * trials;
    let accuracy = probe.accuracy(bers, trials, seed)?;
    let drop = clean - accuracy;
    Ok(Validation { trials, seed, accuracy, drop, passed: drop <= target + VALIDATION_SLACK })
}

/// Largest grid BER whose mean accuracy drop is at most `target` points,
/// by binary search over grid indices. The answer is re-checked with three
/// times the trials and fresh seeds and moved down the grid until that
/// check passes.
pub fn coarse_characterize(
    probe: &dyn AccuracyProbe,
    target: f64,
    grid: &BerGrid,
    trials: usize,
    seed: u64,
) -> Result<CoarseOutcome> {
    if trials == 0 || !(target >= 0.0) {
        return Err(Error::InvalidArgument("need trials >= 1 and a non-negative accuracy target".into()));
    }
    let clean = probe.clean_accuracy()?;
    let pts = grid.points();
    let mut probes = Vec::new();
    // Invariant: index `lo` passes (-1 stands for BER 0), index `hi` fails.
    let (mut lo, mut hi) = (-1i64, pts.len() as i64);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let bers = BerAssignment::Uniform(pts[mid as usize]);
        let acc = probe.accuracy(&bers, trials, seed)?;
        let r = record(&bers, acc, clean, target);
        if r.passed {
            lo = mid;
        } else {
            hi = mid;
        }
        probes.push(r);
    }
    let mut warnings = Vec::new();
    let mut validations = Vec::new();
    while lo >= 0 {
        let v = validate(probe, &BerAssignment::Uniform(pts[lo as usize]), clean, target, trials, seed)?;
        let ok = v.passed;
        validations.push(v);
        if ok {
            break;
        }
        warnings.push(format!("validation failed at BER {:e}; stepping down the grid", pts[lo as usize]));
        lo -= 1;
    }
    let index = (lo >= 0).then_some(lo as usize);
    Ok(CoarseOutcome {
        ber: index.map_or(0.0, |i| pts[i]),
        index,
        clean_accuracy: clean,
        probes,
        validations,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineOutcome {
    pub per_type: BTreeMap<DataTypeId, f64>,
    pub probes: Vec<ProbeRecord>,
    pub validations: Vec<Validation>,
    pub warnings: Vec<String>,
}

/// Highest BER a data type may be raised to.
pub const MAX_TYPE_BER: f64 = 0.5;

/// Per-type sweep bootstrapped at `coarse_ber`: data types are visited
/// round-robin (weights first, shallow to deep); each visit multiplies the
/// type's BER by `increment` and keeps the raise if the accuracy drop stays
/// within `target`, otherwise reverts it and drops the type from the sweep.
pub fn fine_characterize(
    probe: &dyn AccuracyProbe,
    target: f64,
    coarse_ber: f64,
    increment: f64,
    trials: usize,
    seed: u64,
) -> Result<FineOutcome> {
    if !(increment > 1.0) || trials == 0 {
        return Err(Error::InvalidArgument("fine sweep needs increment > 1 and trials >= 1".into()));
    }
    let mut ids = probe.data_types();
    ids.sort();
    let mut per_type: BTreeMap<DataTypeId, f64> = ids.iter().map(|&id| (id, coarse_ber)).collect();
    let mut probes = Vec::new();
    let mut warnings = Vec::new();
    let mut validations = Vec::new();
    if coarse_ber <= 0.0 {
        warnings.push("coarse BER is 0; every data type stays at 0".into());
        return Ok(FineOutcome { per_type, probes, validations, warnings });
    }
    let clean = probe.clean_accuracy()?;
    let mut live = ids.clone();
    while !live.is_empty() {
        let mut next = Vec::with_capacity(live.len());
        for &id in &live {
            let current = per_type[&id];
            let candidate = (current * increment).min(MAX_TYPE_BER);
            if candidate <= current {
                continue;
            }
            let mut trial = per_type.clone();
            trial.insert(id, candidate);
            let bers = BerAssignment::PerType(trial);
            let acc = probe.accuracy(&bers, trials, seed)?;
            let r = record(&bers, acc, clean, target);
            if r.passed {
                per_type.insert(id, candidate);
                next.push(id);
            }
            probes.push(r);
        }
        live = next;
    }
    loop {
        let v = validate(probe, &BerAssignment::PerType(per_type.clone()), clean, target, trials, seed)?;
        let ok = v.passed;
        validations.push(v);
        if ok || per_type.values().all(|&b| b <= coarse_ber) {
            break;
        }
        warnings.push("validation failed; lowering every raised type by one step".into());
        for b in per_type.values_mut() {
            if *b > coarse_ber {
                *b = (*b / increment).max(coarse_ber);
            }
        }
    }
    Ok(FineOutcome { per_type, probes, validations, warnings })
}

/// Characterization settings and results, with everything needed to
/// re-derive them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationResult {
    pub mode: CharMode,
    pub accuracy_target: f64,
    pub clean_accuracy: f64,
    pub coarse_ber: f64,
    pub per_type: BTreeMap<DataTypeId, f64>,
    pub trials: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub increment: Option<f64>,
    pub env: Option<DramEnv>,
    pub coarse: CoarseOutcome,
    pub fine: Option<FineOutcome>,
}

/// Default multiplicative step of the fine sweep.
pub const DEFAULT_INCREMENT: f64 = 1.5;

/// Runs the coarse search and, in fine mode, the per-type sweep.
pub fn characterize(
    probe: &dyn AccuracyProbe,
    mode: CharMode,
    target: f64,
    grid: &BerGrid,
    increment: f64,
    trials: usize,
    seed: u64,
) -> Result<CharacterizationResult> {
    let coarse = coarse_characterize(probe, target, grid, trials, seed)?;
    let fine = match mode {
        CharMode::Coarse => None,
        CharMode::Fine => Some(fine_characterize(probe, target, coarse.ber, increment, trials, seed)?),
    };
    let per_type = match &fine {
        Some(f) => f.per_type.clone(),
        None => probe.data_types().into_iter().map(|id| (id, coarse.ber)).collect(),
    };
    Ok(CharacterizationResult {
        mode,
        accuracy_target: target,
        clean_accuracy: coarse.clean_accuracy,
        coarse_ber: coarse.ber,
        per_type,
        trials,
        seed,
        grid: grid.points().to_vec(),
        increment: (mode == CharMode::Fine).then_some(increment),
        env: None,
        coarse,
        fine,
    })
}
