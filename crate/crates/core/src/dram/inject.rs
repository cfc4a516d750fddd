use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::BitImage;
use crate::rng::{hash_words, unit_f64};

use super::layout::placement_range;
use super::{DramGeometry, ErrorModel, LayoutDescriptor, WeakCellMap};

const FLIP_TAG: u64 = 0x464C_4950;

/// Flip coordinates kept per injection before falling back to per-row counts.
pub const MAX_TRACE_RECORDS: usize = 10_000_000;

/// Identifies one read access: flips are a pure function of
/// `(seed, cell, counter)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccessKey {
    pub seed: u64,
    pub counter: u64,
}

impl AccessKey {
    pub fn new(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    /// Uniform draw deciding whether `cell` flips on this access.
    #[inline]
    pub fn draw(&self, cell: u64) -> f64 {
        unit_f64(hash_words(self.seed, &[FLIP_TAG, cell, self.counter]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlipDirection {
    #[serde(rename = "0to1")]
    ZeroToOne,
    #[serde(rename = "1to0")]
    OneToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlipRecord {
    pub bank: u32,
    pub row: u32,
    pub bit: u32,
    pub dir: FlipDirection,
}

/// Flipped cells of one injection.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlipTrace {
    records: Vec<FlipRecord>,
    overflow: BTreeMap<(u32, u32), u64>,
    total: u64,
    capacity: usize,
}

impl FlipTrace {
    pub fn new() -> Self {
        Self::with_capacity(MAX_TRACE_RECORDS)
    }

    /// A trace that keeps at most `capacity` coordinates; further flips are
    /// only counted per `(bank, row)`.
    pub fn with_capacity(capacity: usize) -> Self {
        Self { records: Vec::new(), overflow: BTreeMap::new(), total: 0, capacity }
    }

    pub fn push(&mut self, rec: FlipRecord) {
        self.total += 1;
        if self.records.len() < self.capacity {
            self.records.push(rec);
        } else {
            *self.overflow.entry((rec.bank, rec.row)).or_default() += 1;
        }
    }

    pub fn records(&self) -> &[FlipRecord] {
        &self.records
    }

    /// Per-(bank, row) counts of flips beyond the coordinate cap.
    pub fn overflow_counts(&self) -> &BTreeMap<(u32, u32), u64> {
        &self.overflow
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_truncated(&self) -> bool {
        !self.overflow.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Writes one JSON object per recorded flip.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Flips weak cells of an image stored at linear cell `base`, in place.
///
/// `weak` must hold the weak cells of `base .. base + img.bit_len()` in
/// ascending order; cells outside that span are ignored. Returns the number
/// of flips. When `trace` is given every flip is recorded in it.
pub fn inject_in_place(
    img: &mut BitImage,
    base: u64,
    weak: &[u64],
    geom: &DramGeometry,
    model: &ErrorModel,
    access: AccessKey,
    mut trace: Option<&mut FlipTrace>,
) -> u64 {
    let end = base + img.bit_len() as u64;
    let mut flips = 0;
    for &cell in weak {
        if cell < base || cell >= end {
            continue;
        }
        let offset = (cell - base) as usize;
        let stored = img.get(offset);
        let f = model.flip_probability(geom, cell, stored);
        if f > 0.0 && access.draw(cell) < f {
            img.flip(offset);
            flips += 1;
            if let Some(t) = trace.as_deref_mut() {
                let c = geom.coord(cell);
                let dir = if stored { FlipDirection::OneToZero } else { FlipDirection::ZeroToOne };
                t.push(FlipRecord { bank: c.bank, row: c.row, bit: c.bit, dir });
            }
        }
    }
    flips
}

/// Reads `object`'s image back through approximate DRAM: every weak cell it
/// covers flips independently with its model flip probability.
pub fn inject(
    img: &BitImage,
    layout: &LayoutDescriptor,
    object: u32,
    map: &WeakCellMap,
    model: &ErrorModel,
    access: AccessKey,
) -> Result<(BitImage, FlipTrace)> {
    let geom = layout.geometry();
    if map.geometry() != geom {
        return Err(Error::Layout("weak-cell map and layout use different geometries".into()));
    }
    model.check_geometry(geom)?;
    let p = layout
        .placement(object)
        .ok_or_else(|| Error::Layout(format!("object {object} has no placement")))?;
    if img.bit_len() as u64 > p.len_bits {
        return Err(Error::Layout(format!(
            "image of {} bits overflows its {}-bit placement",
            img.bit_len(),
            p.len_bits
        )));
    }
    let range = placement_range(geom, p);
    let mut out = img.clone();
    let mut trace = FlipTrace::new();
    inject_in_place(&mut out, range.start, map.in_range(range), geom, model, access, Some(&mut trace));
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::super::{generate_weak_cells, LayoutMode};
    use super::*;

    fn setup(bits: u64) -> (DramGeometry, LayoutDescriptor) {
        let g = DramGeometry::new(1, 1000, 1000).unwrap();
        let l = LayoutDescriptor::sequential(g, &[(0, bits)], LayoutMode::Aligned).unwrap();
        (g, l)
    }

    #[test]
    fn zero_flip_probability_is_identity() {
        let (g, l) = setup(32 * 100);
        let model = ErrorModel::uniform(0.5, 0.0).unwrap();
        let map = generate_weak_cells(&model, &g, 1).unwrap();
        let img = BitImage::from_f32(&vec![1.5; 100]);
        let (out, trace) = inject(&img, &l, 0, &map, &model, AccessKey::new(3, 0)).unwrap();
        assert_eq!(out, img);
        assert!(trace.is_empty());
    }

    #[test]
    fn data_dependent_zero_cells_cannot_flip() {
        let (g, l) = setup(8000);
        let model = ErrorModel::data_dependent(1.0, 0.0, 1.0).unwrap();
        let map = generate_weak_cells(&model, &g, 1).unwrap();
        let img = BitImage::zeroed(8, 1000);
        let (out, trace) = inject(&img, &l, 0, &map, &model, AccessKey::new(3, 0)).unwrap();
        assert_eq!(out, img);
        assert_eq!(trace.total(), 0);
        let ones = BitImage::from_codes(&vec![-1; 1000], crate::numerics::Dtype::Int8);
        let (out, trace) = inject(&ones, &l, 0, &map, &model, AccessKey::new(3, 0)).unwrap();
        assert_eq!(out.count_ones(), 0);
        assert_eq!(trace.total(), 8000);
        assert!(trace.records().iter().all(|r| r.dir == FlipDirection::OneToZero));
    }

    #[test]
    fn overflow_and_missing_object_rejected() {
        let (g, l) = setup(64);
        let model = ErrorModel::uniform(0.1, 0.1).unwrap();
        let map = generate_weak_cells(&model, &g, 1).unwrap();
        let img = BitImage::from_f32(&[0.0; 3]);
        assert!(inject(&img, &l, 0, &map, &model, AccessKey::new(0, 0)).is_err());
        let img = BitImage::from_f32(&[0.0; 2]);
        assert!(inject(&img, &l, 1, &map, &model, AccessKey::new(0, 0)).is_err());
    }

    #[test]
    fn flip_count_follows_binomial() {
        // P = 0.1, F_A = 0.5 over 10^6 bits: mean 5e4 flips.
        let (g, l) = setup(1_000_000);
        let model = ErrorModel::uniform(0.1, 0.5).unwrap();
        let map = generate_weak_cells(&model, &g, 21).unwrap();
        let img = BitImage::zeroed(8, 125_000);
        let (_, trace) = inject(&img, &l, 0, &map, &model, AccessKey::new(8, 0)).unwrap();
        let n: f64 = 1e6;
        let p: f64 = 0.05;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((trace.total() as f64 - n * p).abs() < 3.0 * sigma, "flips {}", trace.total());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let (g, l) = setup(50_000);
        let model = ErrorModel::uniform(0.2, 0.5).unwrap();
        let map = generate_weak_cells(&model, &g, 2).unwrap();
        let img = BitImage::zeroed(8, 6250);
        let a = inject(&img, &l, 0, &map, &model, AccessKey::new(4, 1)).unwrap();
        let b = inject(&img, &l, 0, &map, &model, AccessKey::new(4, 1)).unwrap();
        assert_eq!(a, b);
        let c = inject(&img, &l, 0, &map, &model, AccessKey::new(4, 2)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn trace_caps_coordinates_and_exports_jsonl() {
        let mut t = FlipTrace::with_capacity(2);
        for row in 0..4 {
            t.push(FlipRecord { bank: 0, row, bit: 1, dir: FlipDirection::ZeroToOne });
        }
        assert_eq!(t.total(), 4);
        assert_eq!(t.records().len(), 2);
        assert!(t.is_truncated());
        assert_eq!(t.overflow_counts().values().sum::<u64>(), 2);
        let mut out = Vec::new();
        t.write_jsonl(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"bank":0,"row":0,"bit":1,"dir":"0to1"}"#);
    }
}
