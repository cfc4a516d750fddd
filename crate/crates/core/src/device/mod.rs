//! A synthetic ground-truth DRAM device whose bit error rate responds to
//! supply-voltage and activation-latency reduction, and the profiling
//! procedure that observes its errors.

mod profile;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dram::{DramGeometry, ErrorModel};
use crate::error::{Error, Result};
use crate::rng::{CounterRng, Stream};

pub use profile::{
    profile_device, profile_device_with, read_trace, read_trace_file, synthesize_trace, write_trace, write_trace_file, CellRecord,
    DataPattern, ErrorTrace,
};

/// Nominal DRAM supply voltage in volts.
pub const NOMINAL_VDD: f64 = 1.35;
/// Nominal activation latency in nanoseconds.
pub const NOMINAL_TRCD: f64 = 12.5;

/// A `(ΔV_DD, Δt_RCD)` reduction from nominal; both components are `<= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub delta_vdd: f64,
    pub delta_trcd: f64,
}

impl OperatingPoint {
    pub const NOMINAL: OperatingPoint = OperatingPoint { delta_vdd: 0.0, delta_trcd: 0.0 };

    pub fn new(delta_vdd: f64, delta_trcd: f64) -> Result<Self> {
        let op = Self { delta_vdd, delta_trcd };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_vdd.is_finite() && self.delta_trcd.is_finite()) {
            return Err(Error::InvalidOperatingPoint(format!("{self:?} is not finite")));
        }
        if self.delta_vdd > 0.0 || self.delta_trcd > 0.0 {
            return Err(Error::InvalidOperatingPoint(format!("reductions must be <= 0, got {self:?}")));
        }
        if -self.delta_vdd >= NOMINAL_VDD || -self.delta_trcd >= NOMINAL_TRCD {
            return Err(Error::InvalidOperatingPoint(format!("{self:?} reduces past zero")));
        }
        Ok(())
    }

    pub fn is_nominal(&self) -> bool {
        self.delta_vdd == 0.0 && self.delta_trcd == 0.0
    }

    pub fn vdd(&self) -> f64 {
        NOMINAL_VDD + self.delta_vdd
    }

    pub fn trcd(&self) -> f64 {
        NOMINAL_TRCD + self.delta_trcd
    }
}

/// Monotone piecewise-linear BER response to one reduction axis.
///
/// BER is 0 up to `knee`, rises linearly to the first anchor, interpolates
/// linearly between anchors and holds the last anchor's value beyond it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorCurve {
    pub knee: f64,
    /// `(reduction magnitude, BER)` pairs, ascending in both components.
    pub anchors: Vec<(f64, f64)>,
}

impl AnchorCurve {
    pub fn new(knee: f64, anchors: Vec<(f64, f64)>) -> Result<Self> {
        let c = Self { knee, anchors };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() || !(self.knee >= 0.0) {
            return Err(Error::InvalidArgument("anchor curve needs a knee >= 0 and at least one anchor".into()));
        }
        let mut prev = (self.knee, 0.0);
        for &(x, b) in &self.anchors {
            if !(x > prev.0) || b < prev.1 || !(0.0..=0.5).contains(&b) {
                return Err(Error::InvalidArgument(format!("anchor ({x}, {b}) breaks monotonicity")));
            }
            prev = (x, b);
        }
        Ok(())
    }

    /// BER at reduction magnitude `magnitude >= 0`.
    pub fn eval(&self, magnitude: f64) -> f64 {
        let mut prev = (self.knee, 0.0);
        if magnitude <= prev.0 {
            return 0.0;
        }
        for &(x, b) in &self.anchors {
            if magnitude <= x {
                if magnitude == x {
                    return b;
                }
                let t = (magnitude - prev.0) / (x - prev.0);
                return prev.1 + t * (b - prev.1);
            }
            prev = (x, b);
        }
        prev.1
    }
}

/// Identifier of a device partition.
pub type PartitionId = u32;

/// Latent error behavior of a partition. Stored in profiles but not exposed
/// to pipeline code; it is only observable through profiling and injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenModel {
    opaque: bool,
    /// Model at the reference operating point.
    reference: ErrorModel,
}

impl HiddenModel {
    pub fn family(&self) -> u8 {
        self.reference.family()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub id: PartitionId,
    pub bank: u32,
    pub row_start: u32,
    pub row_end: u32,
    /// Multiplier applied to the aggregate BER curve.
    pub scale: f64,
    pub hidden: HiddenModel,
}

impl Partition {
    pub fn rows(&self) -> Range<u32> {
        self.row_start..self.row_end
    }
}

/// Simulated DRAM device with per-partition error behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDevice {
    pub name: String,
    pub geometry: DramGeometry,
    /// Seed of the frozen weak-cell map.
    pub seed: u64,
    pub reference_point: OperatingPoint,
    pub vdd_curve: AnchorCurve,
    pub trcd_curve: AnchorCurve,
    pub partitions: Vec<Partition>,
}

fn random_lines(stream: &mut Stream, n: usize, p: (f64, f64), f: (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|_| {
            let pv = p.0 + (p.1 - p.0) * stream.next_f64();
            let fv = f.0 + (f.1 - f.0) * stream.next_f64();
            (pv, fv)
        })
        .unzip()
}

/// Rescales flip probabilities so the model's BER at half ones is `ber`.
fn calibrated(model: ErrorModel, ber: f64) -> ErrorModel {
    let k = ber / model.expected_ber(0.5);
    model.scale_flip_probabilities(k)
}

/// Device modeled after the vendor-A column of the tolerable-BER table:
/// ΔV_DD anchors -0.10/-0.25/-0.30/-0.35 V at 0.5/1.5/4.0/5.0 % BER and
/// Δt_RCD anchors -1.0/-2.0/-4.5/-5.5/-6.0 ns at 0.5/1.5/3.0/4.0/5.0 %.
///
/// Four partitions with BER scale factors 0.25, 0.5, 1 and 2 span 256, 256,
/// 256 and 320 rows, so the capacity-weighted mean scale is exactly 1 and
/// the partitions average back to the aggregate curve. Their latent models
/// are, in order, families 0, 3 (1-to-0 flips four times likelier), 1 and 2.
pub fn default_vendor_profile() -> GroundTruthDevice {
    let geometry = DramGeometry { banks: 1, rows_per_bank: 1088, bits_per_row: 1024 };
    let vdd_curve = AnchorCurve { knee: 0.05, anchors: vec![(0.10, 0.005), (0.25, 0.015), (0.30, 0.04), (0.35, 0.05)] };
    let trcd_curve = AnchorCurve {
        knee: 0.5,
        anchors: vec![(1.0, 0.005), (2.0, 0.015), (4.5, 0.03), (5.5, 0.04), (6.0, 0.05)],
    };
    let reference_point = OperatingPoint { delta_vdd: -0.35, delta_trcd: -6.0 };
    let seed = 0x0DE7_1CE0_5EED;
    let mut stream = CounterRng::new(seed).stream(1);
    let aggregate_ref = 0.05;

    let layout = [(0u32, 256u32, 0.25f64), (256, 512, 0.5), (512, 768, 1.0), (768, 1088, 2.0)];
    let partitions = layout
        .iter()
        .enumerate()
        .map(|(i, &(row_start, row_end, scale))| {
            let ber = aggregate_ref * scale;
            let raw = match i {
                0 => ErrorModel::Uniform { p: 2.0 * ber, f_a: 0.5 },
                1 => ErrorModel::DataDependent { p: 0.1, f_v0: 0.1, f_v1: 0.4 },
                2 => {
                    let (p_b, f_b) = random_lines(&mut stream, geometry.bits_per_row as usize, (0.05, 0.15), (0.2, 0.8));
                    ErrorModel::Bitline { p_b, f_b }
                }
                _ => {
                    let (p_w, f_w) = random_lines(&mut stream, geometry.rows_per_bank as usize, (0.1, 0.3), (0.2, 0.8));
                    ErrorModel::Wordline { p_w, f_w }
                }
            };
            Partition {
                id: i as PartitionId,
                bank: 0,
                row_start,
                row_end,
                scale,
                hidden: HiddenModel { opaque: true, reference: calibrated(raw, ber) },
            }
        })
        .collect();

    GroundTruthDevice {
        name: "vendor-a-synthetic".into(),
        geometry,
        seed,
        reference_point,
        vdd_curve,
        trcd_curve,
        partitions,
    }
}

impl GroundTruthDevice {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.vdd_curve.validate()?;
        self.trcd_curve.validate()?;
        self.reference_point.validate()?;
        let reference_ber = self.aggregate_ber(self.reference_point);
        if reference_ber <= 0.0 {
            return Err(Error::InvalidArgument("reference point must have non-zero BER".into()));
        }
        let mut spans: Vec<(u32, u32, u32)> = Vec::new();
        for (i, p) in self.partitions.iter().enumerate() {
            if p.id as usize != i {
                return Err(Error::InvalidArgument(format!("partition ids must be 0..n, found {} at {i}", p.id)));
            }
            if p.bank >= self.geometry.banks || p.row_start >= p.row_end || p.row_end > self.geometry.rows_per_bank {
                return Err(Error::InvalidArgument(format!("partition {} rows outside geometry", p.id)));
            }
            if !(p.scale > 0.0) {
                return Err(Error::InvalidArgument(format!("partition {} scale must be positive", p.id)));
            }
            p.hidden.reference.check_geometry(&self.geometry)?;
            if !(p.hidden.reference.expected_ber(0.5) > 0.0) {
                return Err(Error::InvalidArgument(format!("partition {} latent model never fails", p.id)));
            }
            if spans.iter().any(|&(b, s, e)| b == p.bank && p.row_start < e && s < p.row_end) {
                return Err(Error::InvalidArgument(format!("partition {} overlaps another", p.id)));
            }
            spans.push((p.bank, p.row_start, p.row_end));
        }
        Ok(())
    }

    /// Device-wide BER: the larger of the two axis responses.
    pub fn aggregate_ber(&self, op: OperatingPoint) -> f64 {
        self.vdd_curve.eval(-op.delta_vdd).max(self.trcd_curve.eval(-op.delta_trcd))
    }

    pub fn partition(&self, id: PartitionId) -> Result<&Partition> {
        self.partitions.get(id as usize).ok_or(Error::UnknownPartition(id))
    }

    /// BER of one partition at `op`.
    pub fn ber_curve(&self, id: PartitionId, op: OperatingPoint) -> Result<f64> {
        let p = self.partition(id)?;
        Ok((p.scale * self.aggregate_ber(op)).min(0.5))
    }

    pub fn capacity_bytes(&self, id: PartitionId) -> Result<u64> {
        let p = self.partition(id)?;
        Ok(u64::from(p.row_end - p.row_start) * u64::from(self.geometry.bits_per_row) / 8)
    }

    /// Linear cells of a partition.
    pub fn partition_cells(&self, id: PartitionId) -> Result<Range<u64>> {
        let p = self.partition(id)?;
        let g = &self.geometry;
        let start = g.index(crate::dram::CellCoord { bank: p.bank, row: p.row_start, bit: 0 });
        Ok(start..start + u64::from(p.row_end - p.row_start) * u64::from(g.bits_per_row))
    }

    /// The error model the partition physically exhibits at `op`: the latent
    /// reference model with flip probabilities scaled by
    /// `ber_curve(op) / BER(reference)`.
    pub fn partition_model_at(&self, id: PartitionId, op: OperatingPoint) -> Result<ErrorModel> {
        op.validate()?;
        let p = self.partition(id)?;
        let target = self.ber_curve(id, op)?;
        let reference = p.hidden.reference.expected_ber(0.5);
        Ok(p.hidden.reference.scale_flip_probabilities(target / reference))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }
}
