//! Operating-point selection and placement of network data on DRAM
//! partitions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::characterize::{CharMode, CharacterizationResult};
use crate::device::{GroundTruthDevice, OperatingPoint, PartitionId};
use crate::dram::{LayoutDescriptor, LayoutMode};
use crate::error::{Error, Result};
use crate::nn::{DataTypeId, DramEnv, Network};
use crate::scalar::Scalar;

/// Largest voltage and timing reductions on the lattice.
pub const MAX_VDD_REDUCTION: f64 = 0.35;
pub const MAX_TRCD_REDUCTION: f64 = 6.0;

/// Normalized reduction sum; larger is more aggressive.
pub fn aggressiveness(op: OperatingPoint) -> f64 {
    op.delta_vdd.abs() / MAX_VDD_REDUCTION + op.delta_trcd.abs() / MAX_TRCD_REDUCTION
}

/// Total order on operating points by aggressiveness, ties going to the
/// larger voltage reduction.
pub fn compare_aggressiveness(a: OperatingPoint, b: OperatingPoint) -> Ordering {
    aggressiveness(a)
        .total_cmp(&aggressiveness(b))
        .then(a.delta_vdd.abs().total_cmp(&b.delta_vdd.abs()))
        .then(a.delta_trcd.abs().total_cmp(&b.delta_trcd.abs()))
}

/// All lattice points: ΔVDD in 0.05 V steps down to -0.35 V, ΔtRCD in
/// 0.5 ns steps down to -6.0 ns.
pub fn lattice() -> Vec<OperatingPoint> {
    let mut pts = Vec::with_capacity(8 * 13);
    for i in 0..=7 {
        for j in 0..=12 {
            pts.push(OperatingPoint { delta_vdd: -f64::from(i * 5) / 100.0, delta_trcd: -f64::from(j * 5) / 10.0 });
        }
    }
    pts
}

/// Relative slack when comparing a computed BER with a tolerance.
const BER_EPS: f64 = 1e-9;

fn within(ber: f64, tolerance: f64) -> bool {
    ber <= tolerance * (1.0 + BER_EPS)
}

/// Most aggressive lattice point whose aggregate device BER is at most
/// `tolerable_ber`. Data that tolerates no errors runs at nominal.
pub fn coarse_map(tolerable_ber: f64, device: &GroundTruthDevice) -> Result<OperatingPoint> {
    if !(tolerable_ber >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerable BER {tolerable_ber} is negative")));
    }
    if tolerable_ber == 0.0 {
        return Ok(OperatingPoint::NOMINAL);
    }
    Ok(lattice()
        .into_iter()
        .filter(|&op| within(device.aggregate_ber(op), tolerable_ber))
        .max_by(|&a, &b| compare_aggressiveness(a, b))
        .unwrap_or(OperatingPoint::NOMINAL))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub partition: PartitionId,
    pub capacity_bytes: u64,
    /// Ascending aggressiveness with strictly increasing BER.
    pub points: Vec<(OperatingPoint, f64)>,
}

impl CatalogEntry {
    /// Most aggressive point with BER within `tolerance`.
    pub fn best_point(&self, tolerance: f64) -> Option<(OperatingPoint, f64)> {
        self.points.iter().rev().find(|&&(_, b)| within(b, tolerance)).copied()
    }
}

/// Per-partition capacities and BER at each usable operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl PartitionCatalog {
    /// Builds an entry per partition from raw `(point, BER)` lists, keeping
    /// only points no other point beats on both aggressiveness and BER.
    pub fn new(raw: Vec<(PartitionId, u64, Vec<(OperatingPoint, f64)>)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(raw.len());
        for (partition, capacity_bytes, mut pts) in raw {
            pts.sort_by(|a, b| compare_aggressiveness(b.0, a.0));
            let mut kept = Vec::new();
            let mut best = f64::INFINITY;
            for (op, ber) in pts {
                if !(0.0..=0.5).contains(&ber) {
                    return Err(Error::InvalidArgument(format!("partition {partition}: BER {ber} out of range")));
                }
                if ber < best {
                    best = ber;
                    kept.push((op, ber));
                }
            }
            kept.reverse();
            entries.push(CatalogEntry { partition, capacity_bytes, points: kept });
        }
        let c = Self { entries };
        c.validate()?;
        Ok(c)
    }

    pub fn from_device(device: &GroundTruthDevice) -> Result<Self> {
        let raw = device
            .partitions
            .iter()
            .map(|p| {
                let pts = lattice().into_iter().map(|op| Ok((op, device.ber_curve(p.id, op)?))).collect::<Result<_>>()?;
                Ok((p.id, device.capacity_bytes(p.id)?, pts))
            })
            .collect::<Result<_>>()?;
        Self::new(raw)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.partition) {
                return Err(Error::InvalidArgument(format!("partition {} listed twice", e.partition)));
            }
            if e.capacity_bytes == 0 {
                return Err(Error::InvalidArgument(format!("partition {} has no capacity", e.partition)));
            }
            for w in e.points.windows(2) {
                if compare_aggressiveness(w[0].0, w[1].0) != Ordering::Less || w[0].1 > w[1].1 {
                    return Err(Error::InvalidArgument(format!("partition {} points out of order", e.partition)));
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, id: PartitionId) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.partition == id)
    }

    /// SHA-256 of the catalog's JSON form, hex encoded.
    pub fn digest(&self) -> String {
        crate::sha256_hex(&serde_json::to_vec(self).expect("catalog serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub partition: PartitionId,
    pub point: OperatingPoint,
    pub ber: f64,
    pub bytes: u64,
    pub tolerable_ber: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub mode: CharMode,
    /// Device-wide point (coarse plans).
    pub coarse_point: Option<OperatingPoint>,
    pub coarse_ber: Option<f64>,
    pub assignments: BTreeMap<DataTypeId, Assignment>,
    /// Data kept in reliable memory at nominal parameters.
    pub spill: Vec<DataTypeId>,
    pub catalog_digest: Option<String>,
    pub warnings: Vec<String>,
}

/// Device-wide plan from a coarse characterization.
pub fn coarse_plan(tolerable_ber: f64, device: &GroundTruthDevice) -> Result<MappingPlan> {
    let op = coarse_map(tolerable_ber, device)?;
    Ok(MappingPlan {
        mode: CharMode::Coarse,
        coarse_point: Some(op),
        coarse_ber: Some(device.aggregate_ber(op)),
        assignments: BTreeMap::new(),
        spill: Vec::new(),
        catalog_digest: None,
        warnings: Vec::new(),
    })
}

/// Greedy placement: data types in ascending tolerable BER (ties by id)
/// each take the partition with room that offers the most aggressive point
/// within their tolerance; lower partition ids win ties. Data that fits
/// nowhere, or tolerates no errors, is spilled.
pub fn fine_map_bers(
    tolerances: &BTreeMap<DataTypeId, f64>,
    sizes: &BTreeMap<DataTypeId, u64>,
    catalog: &PartitionCatalog,
) -> Result<MappingPlan> {
    catalog.validate()?;
    let mut order: Vec<(DataTypeId, f64)> = tolerances.iter().map(|(&k, &v)| (k, v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut free: Vec<u64> = catalog.entries.iter().map(|e| e.capacity_bytes).collect();
    let mut plan = MappingPlan {
        mode: CharMode::Fine,
        coarse_point: None,
        coarse_ber: None,
        assignments: BTreeMap::new(),
        spill: Vec::new(),
        catalog_digest: Some(catalog.digest()),
        warnings: Vec::new(),
    };
    if catalog.entries.is_empty() {
        plan.warnings.push("empty partition catalog; all data spilled".into());
    }
    for (id, tol) in order {
        let bytes = *sizes.get(&id).ok_or_else(|| Error::InvalidArgument(format!("no size for data type {id}")))?;
        let mut best: Option<(usize, OperatingPoint, f64)> = None;
        for (i, e) in catalog.entries.iter().enumerate().filter(|_| tol > 0.0) {
            if free[i] < bytes {
                continue;
            }
            let Some((op, ber)) = e.best_point(tol) else { continue };
            let better = match best {
                None => true,
                Some((j, bop, _)) => match compare_aggressiveness(op, bop) {
                    Ordering::Greater => true,
                    Ordering::Equal => e.partition < catalog.entries[j].partition,
                    Ordering::Less => false,
                },
            };
            if better {
                best = Some((i, op, ber));
            }
        }
        match best {
            Some((i, point, ber)) => {
                free[i] -= bytes;
                let partition = catalog.entries[i].partition;
                plan.assignments.insert(id, Assignment { partition, point, ber, bytes, tolerable_ber: tol });
            }
            None => plan.spill.push(id),
        }
    }
    Ok(plan)
}

/// Greedy placement of a fine characterization.
pub fn fine_map(
    char: &CharacterizationResult,
    sizes: &BTreeMap<DataTypeId, u64>,
    catalog: &PartitionCatalog,
) -> Result<MappingPlan> {
    if char.mode != CharMode::Fine {
        return Err(Error::InvalidArgument("fine mapping needs a fine characterization".into()));
    }
    fine_map_bers(&char.per_type, sizes, catalog)
}

impl MappingPlan {
    /// Checks tolerance, capacity and coverage of a fine plan.
    pub fn check_feasible(
        &self,
        tolerances: &BTreeMap<DataTypeId, f64>,
        sizes: &BTreeMap<DataTypeId, u64>,
        catalog: &PartitionCatalog,
    ) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        let mut used: BTreeMap<PartitionId, u64> = BTreeMap::new();
        for (id, a) in &self.assignments {
            let Some(e) = catalog.entry(a.partition) else { return fail(format!("unknown partition {}", a.partition)) };
            let Some(&(_, ber)) = e.points.iter().find(|(op, _)| *op == a.point) else {
                return fail(format!("{id}: point not in catalog of partition {}", a.partition));
            };
            let tol = tolerances.get(id).copied().unwrap_or(0.0);
            if !within(ber, tol) || ber != a.ber {
                return fail(format!("{id}: BER {ber} exceeds tolerance {tol}"));
            }
            if sizes.get(id) != Some(&a.bytes) {
                return fail(format!("{id}: size mismatch"));
            }
            *used.entry(a.partition).or_default() += a.bytes;
        }
        for (p, b) in used {
            if b > catalog.entry(p).map_or(0, |e| e.capacity_bytes) {
                return fail(format!("partition {p} over capacity"));
            }
        }
        let mut seen: BTreeSet<DataTypeId> = self.assignments.keys().copied().collect();
        for id in &self.spill {
            if !seen.insert(*id) {
                return fail(format!("{id} appears twice"));
            }
        }
        if seen != tolerances.keys().copied().collect() {
            return fail("plan does not cover exactly the characterized data types".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Bytes each data type of `net` occupies at its storage dtype.
pub fn data_sizes<S: Scalar>(net: &Network<S>) -> Result<BTreeMap<DataTypeId, u64>> {
    net.data_types().into_iter().map(|id| Ok((id, net.type_bytes(id)?))).collect()
}

/// Injection environment in which each data type sees the physical error
/// behaviour of its partition at its point, over the device's own weak
/// cells. Spilled data is read without errors.
pub fn apply_plan<S: Scalar>(plan: &MappingPlan, net: &Network<S>, device: &GroundTruthDevice) -> Result<DramEnv> {
    let ids = net.data_types();
    let width = u64::from(net.dtype.bits());
    let mut env = DramEnv::new(device.geometry, crate::dram::ErrorModel::reliable(), device.seed)?;
    match plan.mode {
        CharMode::Coarse => {
            let op = plan.coarse_point.ok_or_else(|| Error::InvalidArgument("coarse plan without a point".into()))?;
            let sizes: Vec<(u32, u64)> =
                ids.iter().enumerate().map(|(i, &id)| Ok((i as u32, net.type_len(id)? as u64 * width))).collect::<Result<_>>()?;
            let mut placements = Vec::new();
            // Sequential over the device; each object takes the model of the
            // partition its first row lies in.
            let layout = LayoutDescriptor::sequential(device.geometry, &sizes, LayoutMode::Aligned)?;
            for (i, &id) in ids.iter().enumerate() {
                let pl = layout.placement(i as u32).expect("every object placed");
                let part = device
                    .partitions
                    .iter()
                    .find(|p| p.bank == pl.bank && p.rows().contains(&pl.start_row))
                    .ok_or_else(|| Error::Layout(format!("{id} placed outside every partition")))?;
                env.type_models.insert(id, device.partition_model_at(part.id, op)?);
                placements.push(*pl);
            }
            env.placements = placements;
        }
        CharMode::Fine => {
            let mut by_partition: BTreeMap<PartitionId, Vec<(u32, u64)>> = BTreeMap::new();
            for (i, &id) in ids.iter().enumerate() {
                if let Some(a) = plan.assignments.get(&id) {
                    device.partition(a.partition)?;
                    by_partition.entry(a.partition).or_default().push((i as u32, net.type_len(id)? as u64 * width));
                    env.type_models.insert(id, device.partition_model_at(a.partition, a.point)?);
                } else if plan.spill.contains(&id) {
                    env.reliable.insert(id);
                } else {
                    return Err(Error::InvalidArgument(format!("plan does not mention data type {id}")));
                }
            }
            for (pid, objects) in by_partition {
                let p = device.partition(pid)?;
                env.placements.extend(LayoutDescriptor::within_rows(
                    device.geometry,
                    p.bank,
                    p.rows(),
                    &objects,
                    LayoutMode::Aligned,
                )?);
            }
        }
    }
    Ok(env)
}
