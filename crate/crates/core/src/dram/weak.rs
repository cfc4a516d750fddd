use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{hash_words, unit_f64};

use super::{DramGeometry, ErrorModel};

const WEAK_TAG: u64 = 0x5745_414B;
const PAR_CHUNK: u64 = 1 << 16;

/// Frozen set of weak cells of a device region.
///
/// A cell is weak when its per-cell uniform draw falls below the model's
/// weak probability for that cell. The draw depends only on `(seed, cell)`,
/// so maps generated from the same seed at increasing weak fractions are
/// nested, and a map restricted to a sub-range equals the map generated on
/// that sub-range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakCellMap {
    geometry: DramGeometry,
    seed: u64,
    /// Sorted linear cell indices.
    weak: Vec<u64>,
}

#[inline]
pub(crate) fn weakness_draw(seed: u64, cell: u64) -> f64 {
    unit_f64(hash_words(seed, &[WEAK_TAG, cell]))
}

fn scan(model: &ErrorModel, geom: &DramGeometry, seed: u64, range: Range<u64>) -> Vec<u64> {
    let chunks: Vec<Range<u64>> = (range.start..range.end)
        .step_by(PAR_CHUNK as usize)
        .map(|s| s..(s + PAR_CHUNK).min(range.end))
        .collect();
    chunks
        .into_par_iter()
        .map(|r| {
            r.filter(|&cell| {
                let p = model.weak_probability(geom, cell);
                p > 0.0 && weakness_draw(seed, cell) < p
            })
            .collect::<Vec<u64>>()
        })
        .flatten_iter()
        .collect()
}

/// Draws the weak-cell map of the whole device.
pub fn generate_weak_cells(model: &ErrorModel, geom: &DramGeometry, seed: u64) -> Result<WeakCellMap> {
    WeakCellMap::generate_in(model, geom, seed, &[0..geom.total_cells()])
}

impl WeakCellMap {
    pub fn empty(geometry: DramGeometry, seed: u64) -> Self {
        Self { geometry, seed, weak: Vec::new() }
    }

    /// Draws weak cells only inside `ranges` (linear cell indices).
    pub fn generate_in(model: &ErrorModel, geom: &DramGeometry, seed: u64, ranges: &[Range<u64>]) -> Result<Self> {
        geom.validate()?;
        model.check_geometry(geom)?;
        let mut map = Self::empty(*geom, seed);
        for r in ranges {
            map.add_region(model, r.clone())?;
        }
        Ok(map)
    }

    /// Adds the weak cells of `range` drawn under `model` (with this map's seed).
    pub fn add_region(&mut self, model: &ErrorModel, range: Range<u64>) -> Result<()> {
        model.check_geometry(&self.geometry)?;
        if range.end > self.geometry.total_cells() {
            return Err(Error::Layout(format!(
                "region {range:?} exceeds {} cells",
                self.geometry.total_cells()
            )));
        }
        let found = scan(model, &self.geometry, self.seed, range);
        let sorted_append = self.weak.last().is_none_or(|&last| found.first().is_none_or(|&f| f > last));
        self.weak.extend(found);
        if !sorted_append {
            self.weak.sort_unstable();
            self.weak.dedup();
        }
        Ok(())
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.weak.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weak.is_empty()
    }

    pub fn cells(&self) -> &[u64] {
        &self.weak
    }

    pub fn is_weak(&self, cell: u64) -> bool {
        self.weak.binary_search(&cell).is_ok()
    }

    /// Weak cells inside `range`, in ascending order.
    pub fn in_range(&self, range: Range<u64>) -> &[u64] {
        let lo = self.weak.partition_point(|&c| c < range.start);
        let hi = self.weak.partition_point(|&c| c < range.end);
        &self.weak[lo..hi]
    }
}
