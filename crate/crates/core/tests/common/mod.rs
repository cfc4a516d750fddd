#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

use approxdram::device::{GroundTruthDevice, OperatingPoint};
use approxdram::mapping::*;
use approxdram::nn::DataTypeId;
use approxdram::rng::CounterRng;

pub fn ids() -> [DataTypeId; 3] {
    [DataTypeId::weight(0), DataTypeId::weight(1), DataTypeId::ifm(1)]
}

/// Three partitions of the vendor curve scaled by `scales`.
pub fn catalog(device: &GroundTruthDevice, scales: [f64; 3], caps: [u64; 3]) -> PartitionCatalog {
    let raw = (0..3)
        .map(|i| {
            let pts = lattice().into_iter().map(|op| (op, (scales[i] * device.aggregate_ber(op)).min(0.5))).collect();
            (i as u32, caps[i], pts)
        })
        .collect();
    PartitionCatalog::new(raw).unwrap()
}

pub struct Fixture {
    pub catalog: PartitionCatalog,
    pub tolerances: BTreeMap<DataTypeId, f64>,
    pub sizes: BTreeMap<DataTypeId, u64>,
}

pub fn fixture(device: &GroundTruthDevice, seed: u64) -> Fixture {
    let r = CounterRng::new(seed);
    let u = |k: u64| r.uniform(&[k]);
    let scales = [0.2 + 2.0 * u(0), 0.2 + 2.0 * u(1), 0.2 + 2.0 * u(2)];
    let caps = [(1 + (u(3) * 3.0) as u64) * 100, (1 + (u(4) * 3.0) as u64) * 100, (1 + (u(5) * 3.0) as u64) * 100];
    let tolerances = ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            // Mix of exact lattice BERs, zero and random values.
            let t = match (u(10 + i as u64) * 4.0) as u32 {
                0 => 0.0,
                1 => device.aggregate_ber(OperatingPoint { delta_vdd: -0.25, delta_trcd: -2.0 }) * scales[i % 3],
                _ => 10f64.powf(-3.0 + 2.0 * u(20 + i as u64)),
            };
            (id, t)
        })
        .collect();
    let sizes = ids().iter().enumerate().map(|(i, &id)| (id, 50 + (u(30 + i as u64) * 250.0) as u64)).collect();
    Fixture { catalog: catalog(device, scales, caps), tolerances, sizes }
}

/// Most aggressive feasible point of an entry, by scanning every point.
pub fn scan_best(entry: &CatalogEntry, tol: f64) -> Option<(OperatingPoint, f64)> {
    let mut best: Option<(OperatingPoint, f64)> = None;
    for &(op, ber) in &entry.points {
        if tol > 0.0 && ber <= tol * (1.0 + 1e-9) {
            if best.is_none_or(|(b, _)| compare_aggressiveness(op, b) == Ordering::Greater) {
                best = Some((op, ber));
            }
        }
    }
    best
}

/// Replays the greedy step by step and checks each decision of `plan`.
pub fn verify_greedy(f: &Fixture, plan: &MappingPlan) {
    let mut order: Vec<_> = f.tolerances.iter().map(|(&k, &v)| (k, v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut free: BTreeMap<u32, u64> = f.catalog.entries.iter().map(|e| (e.partition, e.capacity_bytes)).collect();
    for (id, tol) in order {
        let size = f.sizes[&id];
        let candidates: Vec<(u32, OperatingPoint, f64)> = f
            .catalog
            .entries
            .iter()
            .filter(|e| free[&e.partition] >= size)
            .filter_map(|e| scan_best(e, tol).map(|(op, b)| (e.partition, op, b)))
            .collect();
        match plan.assignments.get(&id) {
            None => {
                assert!(candidates.is_empty(), "{id} spilled although {candidates:?} were feasible");
                assert!(plan.spill.contains(&id));
            }
            Some(a) => {
                let &(pid, op, ber) = candidates
                    .iter()
                    .max_by(|x, y| compare_aggressiveness(x.1, y.1).then(y.0.cmp(&x.0)))
                    .expect("assigned with no feasible candidate");
                assert_eq!((a.partition, a.point, a.ber), (pid, op, ber), "{id}");
                *free.get_mut(&pid).unwrap() -= size;
            }
        }
    }
}
