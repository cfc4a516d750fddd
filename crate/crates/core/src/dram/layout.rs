use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::hash_words;

use super::DramGeometry;

/// How objects are laid out relative to row boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LayoutMode {
    /// Every object starts at a row boundary, so element bit `b` of every
    /// element lands on the same bitlines (MSBs share bitlines).
    Aligned,
    /// Every object starts at a pseudo-random bit offset within its first row.
    Unaligned { seed: u64 },
}

/// One object's position: it occupies consecutive cells, row-major, starting
/// at `(bank, start_row, start_bit)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub object: u32,
    pub bank: u32,
    pub start_row: u32,
    pub start_bit: u32,
    pub len_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    geometry: DramGeometry,
    placements: Vec<Placement>,
}

impl LayoutDescriptor {
    pub fn new(geometry: DramGeometry, placements: Vec<Placement>) -> Result<Self> {
        let l = Self { geometry, placements };
        l.validate()?;
        Ok(l)
    }

    /// Places objects one after another over the whole device, moving to the
    /// next bank when the current one is full.
    pub fn sequential(geometry: DramGeometry, objects: &[(u32, u64)], mode: LayoutMode) -> Result<Self> {
        geometry.validate()?;
        let mut packer = Packer::new(geometry, 0, 0..geometry.rows_per_bank, true);
        let placements = objects
            .iter()
            .map(|&(id, len)| packer.place(id, len, mode))
            .collect::<Result<Vec<_>>>()?;
        Self::new(geometry, placements)
    }

    /// Places objects sequentially inside rows `rows` of one bank.
    pub fn within_rows(
        geometry: DramGeometry,
        bank: u32,
        rows: Range<u32>,
        objects: &[(u32, u64)],
        mode: LayoutMode,
    ) -> Result<Vec<Placement>> {
        if bank >= geometry.banks || rows.end > geometry.rows_per_bank || rows.start >= rows.end {
            return Err(Error::Layout(format!("bank {bank} rows {rows:?} outside geometry")));
        }
        let mut packer = Packer::new(geometry, bank, rows, false);
        objects.iter().map(|&(id, len)| packer.place(id, len, mode)).collect()
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn placement(&self, object: u32) -> Option<&Placement> {
        self.placements.iter().find(|p| p.object == object)
    }

    /// Linear cell indices covered by `p`.
    pub fn range(&self, p: &Placement) -> Range<u64> {
        placement_range(&self.geometry, p)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let mut spans = Vec::with_capacity(self.placements.len());
        for p in &self.placements {
            if p.bank >= g.banks || p.start_row >= g.rows_per_bank || p.start_bit >= g.bits_per_row {
                return Err(Error::Layout(format!("object {} starts outside the geometry", p.object)));
            }
            let r = self.range(p);
            let bank_end = u64::from(p.bank + 1) * g.cells_per_bank();
            if r.end > bank_end {
                return Err(Error::Layout(format!("object {} overflows bank {}", p.object, p.bank)));
            }
            spans.push((r, p.object));
        }
        spans.sort_by_key(|(r, _)| r.start);
        for w in spans.windows(2) {
            if w[0].0.end > w[1].0.start {
                return Err(Error::Layout(format!("objects {} and {} overlap", w[0].1, w[1].1)));
            }
        }
        let mut ids: Vec<u32> = self.placements.iter().map(|p| p.object).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Layout("duplicate object id".into()));
        }
        Ok(())
    }
}

pub(crate) fn placement_range(g: &DramGeometry, p: &Placement) -> Range<u64> {
    let start = g.index(super::CellCoord { bank: p.bank, row: p.start_row, bit: p.start_bit });
    start..start + p.len_bits
}

struct Packer {
    geometry: DramGeometry,
    bank: u32,
    row: u32,
    rows: Range<u32>,
    spill_banks: bool,
}

impl Packer {
    fn new(geometry: DramGeometry, bank: u32, rows: Range<u32>, spill_banks: bool) -> Self {
        Self { geometry, bank, row: rows.start, rows, spill_banks }
    }

    fn place(&mut self, object: u32, len_bits: u64, mode: LayoutMode) -> Result<Placement> {
        let bpr = u64::from(self.geometry.bits_per_row);
        let shift = match mode {
            LayoutMode::Aligned => 0,
            LayoutMode::Unaligned { seed } => hash_words(seed, &[u64::from(object)]) % bpr,
        };
        let rows_needed = (shift + len_bits.max(1)).div_ceil(bpr);
        if u64::from(self.row) + rows_needed > u64::from(self.rows.end) {
            if self.spill_banks && self.bank + 1 < self.geometry.banks && rows_needed <= u64::from(self.rows.end) {
                self.bank += 1;
                self.row = self.rows.start;
            } else {
                return Err(Error::Layout(format!(
                    "object {object} ({len_bits} bits) does not fit: {} rows left",
                    self.rows.end - self.row
                )));
            }
        }
        let p = Placement { object, bank: self.bank, start_row: self.row, start_bit: shift as u32, len_bits };
        self.row += rows_needed as u32;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_objects_start_on_row_boundaries() {
        let g = DramGeometry::new(1, 16, 64).unwrap();
        let l = LayoutDescriptor::sequential(g, &[(0, 100), (1, 64), (2, 1)], LayoutMode::Aligned).unwrap();
        let starts: Vec<(u32, u32)> = l.placements().iter().map(|p| (p.start_row, p.start_bit)).collect();
        assert_eq!(starts, vec![(0, 0), (2, 0), (3, 0)]);
        // Element MSBs of 32-bit data share bitlines 31 and 63.
        let r = l.range(&l.placements()[0]);
        assert_eq!(g.bitline_of(r.start + 31), 31);
        assert_eq!(g.bitline_of(r.start + 95), 31);
    }

    #[test]
    fn unaligned_offsets_and_bank_spill() {
        let g = DramGeometry::new(2, 4, 64).unwrap();
        let l = LayoutDescriptor::sequential(g, &[(0, 150), (1, 150)], LayoutMode::Unaligned { seed: 5 }).unwrap();
        assert!(l.placements().iter().any(|p| p.start_bit != 0));
        assert_eq!(l.placements()[1].bank, 1);
        assert!(LayoutDescriptor::sequential(g, &[(0, 300), (1, 300), (2, 300)], LayoutMode::Aligned).is_err());
    }

    #[test]
    fn rejects_overlap_and_overflow() {
        let g = DramGeometry::new(1, 4, 8).unwrap();
        let a = Placement { object: 0, bank: 0, start_row: 0, start_bit: 0, len_bits: 10 };
        let b = Placement { object: 1, bank: 0, start_row: 1, start_bit: 0, len_bits: 4 };
        assert!(LayoutDescriptor::new(g, vec![a, b]).is_err());
        let c = Placement { object: 2, bank: 0, start_row: 3, start_bit: 4, len_bits: 5 };
        assert!(LayoutDescriptor::new(g, vec![c]).is_err());
        let d = Placement { object: 3, bank: 0, start_row: 2, start_bit: 0, len_bits: 16 };
        assert!(LayoutDescriptor::new(g, vec![a, d]).is_ok());
    }

    #[test]
    fn within_rows_respects_bounds() {
        let g = DramGeometry::new(1, 10, 32).unwrap();
        let ps = LayoutDescriptor::within_rows(g, 0, 4..6, &[(7, 40)], LayoutMode::Aligned).unwrap();
        assert_eq!(ps[0].start_row, 4);
        assert!(LayoutDescriptor::within_rows(g, 0, 4..6, &[(7, 80)], LayoutMode::Aligned).is_err());
    }
}
