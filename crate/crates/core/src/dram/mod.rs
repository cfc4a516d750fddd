//! DRAM geometry, the four probabilistic bit-error models, weak-cell maps,
//! data layout and bit-flip injection.

mod inject;
mod layout;
mod model;
mod weak;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use inject::{inject, inject_in_place, AccessKey, FlipDirection, FlipRecord, FlipTrace, MAX_TRACE_RECORDS};
pub use layout::{LayoutDescriptor, LayoutMode, Placement};
pub use model::{ErrorModel, ErrorModelFile};
pub use weak::{generate_weak_cells, WeakCellMap};

/// Banks x wordlines (rows) x bitlines (bits per row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DramGeometry {
    pub banks: u32,
    pub rows_per_bank: u32,
    pub bits_per_row: u32,
}

/// Physical coordinate of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellCoord {
    pub bank: u32,
    pub row: u32,
    pub bit: u32,
}

impl DramGeometry {
    pub fn new(banks: u32, rows_per_bank: u32, bits_per_row: u32) -> Result<Self> {
        let g = Self { banks, rows_per_bank, bits_per_row };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.banks == 0 || self.rows_per_bank == 0 || self.bits_per_row == 0 {
            return Err(Error::InvalidArgument(format!("geometry counts must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn total_cells(&self) -> u64 {
        u64::from(self.banks) * self.cells_per_bank()
    }

    pub fn cells_per_bank(&self) -> u64 {
        u64::from(self.rows_per_bank) * u64::from(self.bits_per_row)
    }

    /// Linear cell index, bank-major then row-major.
    #[inline]
    pub fn index(&self, c: CellCoord) -> u64 {
        (u64::from(c.bank) * u64::from(self.rows_per_bank) + u64::from(c.row)) * u64::from(self.bits_per_row)
            + u64::from(c.bit)
    }

    #[inline]
    pub fn coord(&self, index: u64) -> CellCoord {
        let bpr = u64::from(self.bits_per_row);
        let bit = (index % bpr) as u32;
        let global_row = index / bpr;
        CellCoord {
            bank: (global_row / u64::from(self.rows_per_bank)) as u32,
            row: (global_row % u64::from(self.rows_per_bank)) as u32,
            bit,
        }
    }

    #[inline]
    pub fn row_of(&self, index: u64) -> u32 {
        ((index / u64::from(self.bits_per_row)) % u64::from(self.rows_per_bank)) as u32
    }

    #[inline]
    pub fn bitline_of(&self, index: u64) -> u32 {
        (index % u64::from(self.bits_per_row)) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_coord_roundtrip() {
        let g = DramGeometry::new(3, 5, 7).unwrap();
        assert_eq!(g.total_cells(), 105);
        for i in 0..g.total_cells() {
            let c = g.coord(i);
            assert_eq!(g.index(c), i);
            assert_eq!(g.row_of(i), c.row);
            assert_eq!(g.bitline_of(i), c.bit);
        }
        assert!(DramGeometry::new(0, 1, 1).is_err());
    }
}
