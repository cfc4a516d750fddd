use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dram::{AccessKey, DramGeometry, ErrorModel, WeakCellMap};
use crate::error::{Error, Result};

use super::{GroundTruthDevice, OperatingPoint};

const MAGIC: &[u8; 4] = b"EDTR";
const VERSION: u8 = 1;

/// Bit pattern written to each row pair `(2k, 2k+1)`; the second row holds
/// the inverse of the first and the roles swap every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataPattern {
    /// All ones in even rows, all zeros in odd rows.
    #[default]
    Solid,
    /// 0x55 in even rows, 0xAA in odd rows.
    Checkerboard,
}

impl DataPattern {
    fn code(self) -> u8 {
        match self {
            DataPattern::Solid => 0,
            DataPattern::Checkerboard => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DataPattern::Solid),
            1 => Ok(DataPattern::Checkerboard),
            _ => Err(Error::Format(format!("unknown data pattern code {c}"))),
        }
    }

    /// Value stored in a cell during round 0.
    #[inline]
    pub fn base_bit(self, row: u32, bit: u32) -> bool {
        let even_row = row % 2 == 0;
        match self {
            DataPattern::Solid => even_row,
            DataPattern::Checkerboard => (bit % 2 == 0) == even_row,
        }
    }

    /// Value stored in a cell during `round`.
    #[inline]
    pub fn stored(self, row: u32, bit: u32, round: u32) -> bool {
        self.base_bit(row, bit) ^ (round % 2 == 1)
    }
}

/// Flip counts of one cell that flipped at least once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: u64,
    /// Flips observed while the cell stored 0.
    pub flips_zero: u32,
    /// Flips observed while the cell stored 1.
    pub flips_one: u32,
}

impl CellRecord {
    pub fn flips(&self) -> u32 {
        self.flips_zero + self.flips_one
    }
}

/// Per-cell read and flip counts observed by profiling a cell region.
///
/// Every cell of `region` is read once per round. Read counts per stored
/// value follow from the pattern, so only cells with flips are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub geometry: DramGeometry,
    pub op: Option<OperatingPoint>,
    pub pattern: DataPattern,
    pub rounds: u32,
    pub seed: u64,
    pub region: Range<u64>,
    records: Vec<CellRecord>,
}

impl ErrorTrace {
    pub fn new(
        geometry: DramGeometry,
        op: Option<OperatingPoint>,
        pattern: DataPattern,
        rounds: u32,
        seed: u64,
        region: Range<u64>,
        mut records: Vec<CellRecord>,
    ) -> Result<Self> {
        geometry.validate()?;
        if region.start > region.end || region.end > geometry.total_cells() {
            return Err(Error::InvalidArgument(format!("trace region {region:?} outside geometry")));
        }
        records.sort_by_key(|r| r.cell);
        let t = Self { geometry, op, pattern, rounds, seed, region, records };
        for w in t.records.windows(2) {
            if w[0].cell == w[1].cell {
                return Err(Error::Format(format!("duplicate trace record for cell {}", w[0].cell)));
            }
        }
        for r in &t.records {
            if !t.region.contains(&r.cell) {
                return Err(Error::Format(format!("record for cell {} outside region", r.cell)));
            }
            let (n0, n1) = t.reads(r.cell);
            if r.flips_zero > n0 || r.flips_one > n1 {
                return Err(Error::Format(format!("cell {} has more flips than reads", r.cell)));
            }
        }
        Ok(t)
    }

    pub fn records(&self) -> &[CellRecord] {
        &self.records
    }

    pub fn cell_count(&self) -> u64 {
        self.region.end - self.region.start
    }

    /// `(stored_zero_reads, stored_one_reads)` of a cell.
    pub fn reads(&self, cell: u64) -> (u32, u32) {
        let c = self.geometry.coord(cell);
        let half = self.rounds / 2;
        let odd = self.rounds % 2;
        if self.pattern.base_bit(c.row, c.bit) {
            (half, half + odd)
        } else {
            (half + odd, half)
        }
    }

    /// Number of cells in the region per distinct `(zero_reads, one_reads)`.
    pub fn read_classes(&self) -> Vec<((u32, u32), u64)> {
        if self.rounds % 2 == 0 {
            return vec![((self.rounds / 2, self.rounds / 2), self.cell_count())];
        }
        let ones = self
            .region
            .clone()
            .into_par_iter()
            .filter(|&cell| {
                let c = self.geometry.coord(cell);
                self.pattern.base_bit(c.row, c.bit)
            })
            .count() as u64;
        let (n0, n1) = self.reads_for_base(false);
        let mut out = vec![((n0, n1), self.cell_count() - ones)];
        out.push((self.reads_for_base(true), ones));
        out.retain(|&(_, n)| n > 0);
        out
    }

    fn reads_for_base(&self, base: bool) -> (u32, u32) {
        let half = self.rounds / 2;
        let odd = self.rounds % 2;
        if base {
            (half, half + odd)
        } else {
            (half + odd, half)
        }
    }

    pub fn total_reads(&self) -> u64 {
        self.cell_count() * u64::from(self.rounds)
    }

    pub fn total_flips(&self) -> u64 {
        self.records.iter().map(|r| u64::from(r.flips())).sum()
    }

    /// Total `(0→1, 1→0)` flips.
    pub fn flips_by_direction(&self) -> (u64, u64) {
        self.records
            .iter()
            .fold((0, 0), |(a, b), r| (a + u64::from(r.flips_zero), b + u64::from(r.flips_one)))
    }

    pub fn flip_rate(&self) -> f64 {
        if self.total_reads() == 0 {
            0.0
        } else {
            self.total_flips() as f64 / self.total_reads() as f64
        }
    }

    /// The part of this trace covering `range`.
    pub fn restrict(&self, range: Range<u64>) -> Result<Self> {
        let start = range.start.max(self.region.start);
        let end = range.end.min(self.region.end).max(start);
        let records = self.records.iter().filter(|r| (start..end).contains(&r.cell)).copied().collect();
        ErrorTrace::new(self.geometry, self.op, self.pattern, self.rounds, self.seed, start..end, records)
    }
}

fn observe(
    geometry: &DramGeometry,
    model: &ErrorModel,
    weak: &[u64],
    rounds: u32,
    seed: u64,
    pattern: DataPattern,
) -> Vec<CellRecord> {
    weak.par_iter()
        .filter_map(|&cell| {
            let c = geometry.coord(cell);
            let mut rec = CellRecord { cell, flips_zero: 0, flips_one: 0 };
            for round in 0..rounds {
                let stored = pattern.stored(c.row, c.bit, round);
                let f = model.flip_probability(geometry, cell, stored);
                if f > 0.0 && AccessKey::new(seed, u64::from(round)).draw(cell) < f {
                    if stored {
                        rec.flips_one += 1;
                    } else {
                        rec.flips_zero += 1;
                    }
                }
            }
            (rec.flips() > 0).then_some(rec)
        })
        .collect()
}

/// Profiles every partition of `dev` at `op` with the solid pattern.
pub fn profile_device(dev: &GroundTruthDevice, op: OperatingPoint, rounds: u32, seed: u64) -> Result<ErrorTrace> {
    profile_device_with(dev, op, rounds, seed, DataPattern::Solid)
}

/// Profiles every partition of `dev` at `op`.
///
/// Each round writes the pattern to even rows and its inverse to odd rows
/// of every row pair, swapping the two every round, and reads each cell
/// back once through the partition's error behavior at `op`.
pub fn profile_device_with(
    dev: &GroundTruthDevice,
    op: OperatingPoint,
    rounds: u32,
    seed: u64,
    pattern: DataPattern,
) -> Result<ErrorTrace> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("profiling needs at least one round".into()));
    }
    let mut records = Vec::new();
    for p in &dev.partitions {
        let model = dev.partition_model_at(p.id, op)?;
        let range = dev.partition_cells(p.id)?;
        let map = WeakCellMap::generate_in(&model, &dev.geometry, dev.seed, std::slice::from_ref(&range))?;
        records.extend(observe(&dev.geometry, &model, map.cells(), rounds, seed, pattern));
    }
    ErrorTrace::new(dev.geometry, Some(op), pattern, rounds, seed, 0..dev.geometry.total_cells(), records)
}

/// Profiles a region governed by a single known model. Used to generate
/// traces with a known ground truth.
pub fn synthesize_trace(
    model: &ErrorModel,
    geometry: DramGeometry,
    region: Range<u64>,
    rounds: u32,
    map_seed: u64,
    access_seed: u64,
    pattern: DataPattern,
) -> Result<ErrorTrace> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("profiling needs at least one round".into()));
    }
    let map = WeakCellMap::generate_in(model, &geometry, map_seed, std::slice::from_ref(&region))?;
    let records = observe(&geometry, model, map.cells(), rounds, access_seed, pattern);
    ErrorTrace::new(geometry, None, pattern, rounds, access_seed, region, records)
}

pub fn write_trace<W: Write>(t: &ErrorTrace, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + t.records.len() * 16);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(t.pattern.code());
    buf.push(u8::from(t.op.is_some()));
    for v in [t.geometry.banks, t.geometry.rows_per_bank, t.geometry.bits_per_row] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let op = t.op.unwrap_or(OperatingPoint::NOMINAL);
    buf.extend_from_slice(&op.delta_vdd.to_le_bytes());
    buf.extend_from_slice(&op.delta_trcd.to_le_bytes());
    buf.extend_from_slice(&t.rounds.to_le_bytes());
    buf.extend_from_slice(&t.seed.to_le_bytes());
    buf.extend_from_slice(&t.region.start.to_le_bytes());
    buf.extend_from_slice(&t.region.end.to_le_bytes());
    buf.extend_from_slice(&(t.records.len() as u64).to_le_bytes());
    for r in &t.records {
        buf.extend_from_slice(&r.cell.to_le_bytes());
        buf.extend_from_slice(&r.flips_zero.to_le_bytes());
        buf.extend_from_slice(&r.flips_one.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format("truncated trace".into()))?;
        self.pos = end;
        Ok(s.try_into().expect("slice length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn read_trace<R: Read>(mut r: R) -> Result<ErrorTrace> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if &c.take::<4>()? != MAGIC {
        return Err(Error::Format("not an error trace (bad magic)".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported trace version {version}")));
    }
    let pattern = DataPattern::from_code(c.u8()?)?;
    let has_op = c.u8()?;
    let geometry = DramGeometry { banks: c.u32()?, rows_per_bank: c.u32()?, bits_per_row: c.u32()? };
    let (dv, dt) = (c.f64()?, c.f64()?);
    let op = match has_op {
        0 => None,
        1 => Some(OperatingPoint::new(dv, dt)?),
        v => return Err(Error::Format(format!("bad operating-point flag {v}"))),
    };
    let rounds = c.u32()?;
    let seed = c.u64()?;
    let region = c.u64()?..c.u64()?;
    let n = c.u64()?;
    if (bytes.len() - c.pos) as u64 != n.saturating_mul(16) {
        return Err(Error::Format(format!("trace declares {n} records but payload size differs")));
    }
    let mut records = Vec::with_capacity(n as usize);
    for _ in 0..n {
        records.push(CellRecord { cell: c.u64()?, flips_zero: c.u32()?, flips_one: c.u32()? });
    }
    ErrorTrace::new(geometry, op, pattern, rounds, seed, region, records)
}

pub fn write_trace_file(t: &ErrorTrace, path: &Path) -> Result<()> {
    write_trace(t, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_trace_file(path: &Path) -> Result<ErrorTrace> {
    read_trace(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::default_vendor_profile;

    #[test]
    fn nominal_profile_has_no_flips() {
        let dev = default_vendor_profile();
        let t = profile_device(&dev, OperatingPoint::NOMINAL, 4, 1).unwrap();
        assert_eq!(t.total_flips(), 0);
        assert!(t.records().is_empty());
    }

    #[test]
    fn balanced_reads_after_even_rounds() {
        let dev = default_vendor_profile();
        let op = OperatingPoint::new(-0.25, 0.0).unwrap();
        for pattern in [DataPattern::Solid, DataPattern::Checkerboard] {
            let t = profile_device_with(&dev, op, 6, 3, pattern).unwrap();
            for cell in [0u64, 1, 1024, 1025, 500_000] {
                assert_eq!(t.reads(cell), (3, 3));
            }
            let odd = profile_device_with(&dev, op, 5, 3, pattern).unwrap();
            let classes = odd.read_classes();
            assert_eq!(classes.iter().map(|c| c.1).sum::<u64>(), odd.cell_count());
            assert_eq!(classes.len(), 2);
        }
    }

    #[test]
    fn flip_rate_matches_aggregate_ber() {
        let dev = default_vendor_profile();
        let op = OperatingPoint::new(-0.30, 0.0).unwrap();
        let rounds = 100;
        let t = profile_device(&dev, op, rounds, 9).unwrap();
        // Conditional on the frozen weak set, flip counts are Poisson-binomial.
        let (mut mean, mut var) = (0.0, 0.0);
        for p in &dev.partitions {
            let model = dev.partition_model_at(p.id, op).unwrap();
            let range = dev.partition_cells(p.id).unwrap();
            let map = WeakCellMap::generate_in(&model, &dev.geometry, dev.seed, &[range]).unwrap();
            for &cell in map.cells() {
                let c = dev.geometry.coord(cell);
                for round in 0..rounds {
                    let f = model.flip_probability(&dev.geometry, cell, DataPattern::Solid.stored(c.row, c.bit, round));
                    mean += f;
                    var += f * (1.0 - f);
                }
            }
        }
        let flips = t.total_flips() as f64;
        assert!((flips - mean).abs() < 3.0 * var.sqrt(), "{flips} vs {mean}");
        // Unconditionally the weak set adds variance of order rounds² per cell.
        let n = t.total_reads() as f64;
        let spread = 3.0 * (n * 0.04 * f64::from(rounds)).sqrt();
        assert!((flips - 0.04 * n).abs() < spread, "rate {}", t.flip_rate());
    }

    #[test]
    fn em3_partition_flips_mostly_one_to_zero() {
        let dev = default_vendor_profile();
        let op = OperatingPoint::new(-0.35, 0.0).unwrap();
        let t = profile_device(&dev, op, 10, 2).unwrap();
        let sub = t.restrict(dev.partition_cells(1).unwrap()).unwrap();
        let (zero_to_one, one_to_zero) = sub.flips_by_direction();
        assert!(one_to_zero > 3 * zero_to_one, "{zero_to_one} vs {one_to_zero}");
    }

    #[test]
    fn binary_roundtrip_and_rejects() {
        let dev = default_vendor_profile();
        let op = OperatingPoint::new(-0.1, -1.0).unwrap();
        let t = profile_device(&dev, op, 3, 4).unwrap();
        assert!(!t.records().is_empty());
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"EDTR");
        assert_eq!(read_trace(&buf[..]).unwrap(), t);
        assert!(read_trace(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_trace(&bad[..]).is_err());
    }

    #[test]
    fn rejects_zero_rounds() {
        let dev = default_vendor_profile();
        assert!(profile_device(&dev, OperatingPoint::NOMINAL, 0, 0).is_err());
    }
}
