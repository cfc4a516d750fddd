use std::cmp::Ordering;
use std::collections::BTreeMap;

use approxdram::device::{default_vendor_profile, OperatingPoint};
use approxdram::dram::{AccessKey, LayoutDescriptor};
use approxdram::mapping::*;
use approxdram::nn::{
    evaluate_accuracy, make_synthetic_dataset, train_baseline, DataTypeId, DatasetKind, Loader, TrainConfig,
};
use approxdram::numerics::Dtype;
use approxdram::Network32;
use proptest::prelude::*;

mod common;
use common::*;

/// Every assignment of the three data types to a partition or the spill
/// list, with its feasibility.
fn all_assignments(f: &Fixture) -> Vec<(BTreeMap<DataTypeId, Option<(u32, OperatingPoint)>>, bool)> {
    let mut out = Vec::new();
    for code in 0..4u32.pow(3) {
        let mut used = BTreeMap::new();
        let mut feasible = true;
        let mut choice = BTreeMap::new();
        for (k, &id) in ids().iter().enumerate() {
            let c = (code / 4u32.pow(k as u32)) % 4;
            if c == 3 {
                choice.insert(id, None);
                continue;
            }
            let e = f.catalog.entry(c).unwrap();
            *used.entry(c).or_insert(0) += f.sizes[&id];
            match scan_best(e, f.tolerances[&id]) {
                Some((op, _)) => {
                    choice.insert(id, Some((c, op)));
                }
                None => {
                    feasible = false;
                    choice.insert(id, None);
                }
            }
        }
        feasible &= used.iter().all(|(p, &b)| b <= f.catalog.entry(*p).unwrap().capacity_bytes);
        out.push((choice, feasible));
    }
    out
}

#[test]
fn three_by_three_fixtures_follow_the_greedy() {
    let device = default_vendor_profile();
    let mut spilled = 0;
    for seed in 0..300 {
        let f = fixture(&device, seed);
        let plan = fine_map_bers(&f.tolerances, &f.sizes, &f.catalog).unwrap();
        plan.check_feasible(&f.tolerances, &f.sizes, &f.catalog).unwrap();
        verify_greedy(&f, &plan);

        // The plan is one of the feasible assignments.
        let mine: BTreeMap<_, _> =
            ids().iter().map(|id| (*id, plan.assignments.get(id).map(|a| (a.partition, a.point)))).collect();
        let all = all_assignments(&f);
        assert!(all.iter().any(|(c, ok)| *ok && *c == mine), "seed {seed}");

        // Every type the greedy places sits at a point at least as
        // aggressive as any it could reach alone in a partition it fits.
        for (id, a) in &plan.assignments {
            let alone = f
                .catalog
                .entries
                .iter()
                .filter(|e| e.capacity_bytes >= f.sizes[id])
                .filter_map(|e| scan_best(e, f.tolerances[id]))
                .map(|(op, _)| op)
                .max_by(|x, y| compare_aggressiveness(*x, *y))
                .unwrap();
            if plan.spill.is_empty() && plan.assignments.len() == 3 && ample(&f) {
                assert_eq!(compare_aggressiveness(a.point, alone), Ordering::Equal, "seed {seed} {id}");
            }
        }
        spilled += plan.spill.len();
    }
    assert!(spilled > 0, "fixtures never exercise spilling");
}

fn ample(f: &Fixture) -> bool {
    let total: u64 = f.sizes.values().sum();
    f.catalog.entries.iter().all(|e| e.capacity_bytes >= total)
}

#[test]
fn single_type_single_partition() {
    let device = default_vendor_profile();
    let c = catalog(&device, [1.0, 1.0, 1.0], [1000, 1000, 1000]);
    let c = PartitionCatalog { entries: vec![c.entries[0].clone()] };
    let tol = BTreeMap::from([(DataTypeId::weight(0), 0.04)]);
    let sizes = BTreeMap::from([(DataTypeId::weight(0), 10)]);
    let plan = fine_map_bers(&tol, &sizes, &c).unwrap();
    let a = plan.assignments[&DataTypeId::weight(0)];
    assert_eq!(a.point, coarse_map(0.04, &device).unwrap());
}

#[test]
fn oversized_data_spills() {
    let device = default_vendor_profile();
    let c = catalog(&device, [1.0, 0.5, 2.0], [100, 100, 100]);
    let tol = BTreeMap::from([(DataTypeId::weight(0), 0.04), (DataTypeId::ifm(0), 0.04)]);
    let sizes = BTreeMap::from([(DataTypeId::weight(0), 101), (DataTypeId::ifm(0), 100)]);
    let plan = fine_map_bers(&tol, &sizes, &c).unwrap();
    assert_eq!(plan.spill, vec![DataTypeId::weight(0)]);
    plan.check_feasible(&tol, &sizes, &c).unwrap();
}

#[test]
fn empty_catalog_spills_everything() {
    let tol = BTreeMap::from([(DataTypeId::weight(0), 0.04)]);
    let sizes = BTreeMap::from([(DataTypeId::weight(0), 1)]);
    let plan = fine_map_bers(&tol, &sizes, &PartitionCatalog { entries: vec![] }).unwrap();
    assert_eq!(plan.spill.len(), 1);
    assert_eq!(plan.warnings.len(), 1);
}

#[test]
fn plan_json_roundtrip() {
    let device = default_vendor_profile();
    let f = fixture(&device, 5);
    let plan = fine_map_bers(&f.tolerances, &f.sizes, &f.catalog).unwrap();
    assert_eq!(MappingPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
    assert_eq!(plan.catalog_digest.as_deref(), Some(f.catalog.digest().as_str()));
}

proptest! {
    #[test]
    fn plans_are_feasible_and_locally_optimal(seed in 0u64..10_000) {
        let device = default_vendor_profile();
        let f = fixture(&device, seed);
        let plan = fine_map_bers(&f.tolerances, &f.sizes, &f.catalog).unwrap();
        plan.check_feasible(&f.tolerances, &f.sizes, &f.catalog).unwrap();
        for (id, a) in &plan.assignments {
            let e = f.catalog.entry(a.partition).unwrap();
            let best = scan_best(e, f.tolerances[id]).unwrap();
            prop_assert_eq!(best.0, a.point);
        }
    }

    #[test]
    fn raising_a_tolerance_never_lowers_its_point(seed in 0u64..10_000, k in 0usize..3, factor in 1.0f64..20.0) {
        let device = default_vendor_profile();
        let mut f = fixture(&device, seed);
        for e in &mut f.catalog.entries {
            e.capacity_bytes = 10_000;
        }
        let id = ids()[k];
        let before = fine_map_bers(&f.tolerances, &f.sizes, &f.catalog).unwrap();
        let t = f.tolerances[&id];
        f.tolerances.insert(id, if t == 0.0 { 1e-3 * factor } else { (t * factor).min(0.5) });
        let after = fine_map_bers(&f.tolerances, &f.sizes, &f.catalog).unwrap();
        let score = |p: &MappingPlan| p.assignments.get(&id).map(|a| a.point).unwrap_or(OperatingPoint::NOMINAL);
        prop_assert_ne!(compare_aggressiveness(score(&after), score(&before)), Ordering::Less);
    }
}

fn small_trained_net() -> (Network32, approxdram::nn::Dataset) {
    let ds = make_synthetic_dataset(1000, 4, DatasetKind::Spiral, 3).unwrap();
    let net = Network32::mlp(&[2, 64, 64, 4], Dtype::Fp32, 3).unwrap();
    let (net, _) = train_baseline(net, &ds, &TrainConfig { epochs: 10, seed: 3, ..TrainConfig::default() }).unwrap();
    (net, ds)
}

#[test]
fn all_spill_plan_reads_clean() {
    let (net, ds) = small_trained_net();
    let device = default_vendor_profile();
    let plan = MappingPlan {
        mode: approxdram::characterize::CharMode::Fine,
        coarse_point: None,
        coarse_ber: None,
        assignments: BTreeMap::new(),
        spill: net.data_types(),
        catalog_digest: None,
        warnings: vec![],
    };
    let env = apply_plan(&plan, &net, &device).unwrap();
    let clean = evaluate_accuracy(&net, &ds, None, 1, 0).unwrap().mean;
    assert_eq!(evaluate_accuracy(&net, &ds, Some(&env), 5, 1).unwrap().mean, clean);
}

#[test]
fn unknown_partition_is_rejected() {
    let (net, _) = small_trained_net();
    let device = default_vendor_profile();
    let mut assignments = BTreeMap::new();
    for id in net.data_types() {
        let bytes = net.type_bytes(id).unwrap();
        assignments.insert(id, Assignment { partition: 9, point: OperatingPoint::NOMINAL, ber: 0.0, bytes, tolerable_ber: 0.1 });
    }
    let plan = MappingPlan {
        mode: approxdram::characterize::CharMode::Fine,
        coarse_point: None,
        coarse_ber: None,
        assignments,
        spill: vec![],
        catalog_digest: None,
        warnings: vec![],
    };
    assert!(apply_plan(&plan, &net, &device).is_err());
}

/// Two weight tensors on partitions with different BERs: flipped bits per
/// tensor against the per-cell expectation, within 3σ.
#[test]
fn per_type_flip_rates_follow_their_partitions() {
    let (net, _) = small_trained_net();
    let device = default_vendor_profile();
    let op = OperatingPoint { delta_vdd: -0.25, delta_trcd: -2.0 };
    let (w1, w2) = (DataTypeId::weight(1), DataTypeId::weight(2));
    let mut assignments = BTreeMap::new();
    for (id, pid) in [(w1, 0u32), (w2, 2u32)] {
        let bytes = net.type_bytes(id).unwrap();
        let ber = device.ber_curve(pid, op).unwrap();
        assignments.insert(id, Assignment { partition: pid, point: op, ber, bytes, tolerable_ber: ber });
    }
    let (b1, b2) = (assignments[&w1].ber, assignments[&w2].ber);
    assert!(b1 < b2);
    let plan = MappingPlan {
        mode: approxdram::characterize::CharMode::Fine,
        coarse_point: None,
        coarse_ber: None,
        assignments,
        spill: net.data_types().into_iter().filter(|id| *id != w1 && *id != w2).collect(),
        catalog_digest: None,
        warnings: vec![],
    };
    let env = apply_plan(&plan, &net, &device).unwrap().with_correction(approxdram::nn::Correction::Off);
    let prepared = env.prepare(&net).unwrap();
    let layout = LayoutDescriptor::new(device.geometry, env.placements.clone()).unwrap();
    let g = device.geometry;

    let ids = net.data_types();
    let mut flips = [0u64; 2];
    let mut bits = [0u64; 2];
    let mut mean = [0.0f64; 2];
    let mut var = [0.0f64; 2];
    let reads = 20;
    for r in 0..reads {
        let w = Loader::new(&net, Some(&prepared)).weights(AccessKey::new(r, u64::MAX));
        for (k, (&id, pid)) in [(&w1, 0u32), (&w2, 2u32)].into_iter().enumerate() {
            let layer = id.layer as usize;
            let clean: Vec<u32> = net.params()[layer].iter().map(|v| v.to_bits()).collect();
            let read: Vec<u32> = w[layer].iter().map(|v| v.to_bits()).collect();
            flips[k] += clean.iter().zip(&read).map(|(a, b)| u64::from((a ^ b).count_ones())).sum::<u64>();
            bits[k] += 32 * clean.len() as u64;
            if r == 0 {
                let obj = ids.iter().position(|x| *x == id).unwrap() as u32;
                let range = layout.range(layout.placement(obj).unwrap());
                let model = device.partition_model_at(pid, op).unwrap();
                for c in range {
                    // Bitline and uniform families do not depend on the stored value.
                    let q = model.weak_probability(&g, c) * model.flip_probability(&g, c, false);
                    mean[k] += q;
                    var[k] += q * (1.0 - q);
                }
            }
        }
    }
    for k in 0..2 {
        // Reads share the frozen weak cells, so only the flip draws are
        // independent across reads; bound with the conservative per-read
        // variance scaled by reads squared.
        let expected = mean[k] * reads as f64;
        let sigma = var[k].sqrt() * reads as f64;
        let observed = flips[k] as f64;
        assert!((observed - expected).abs() <= 3.0 * sigma, "type {k}: {observed} vs {expected} ± {sigma}");
        let rate = observed / bits[k] as f64;
        let target = [b1, b2][k];
        assert!((rate - target).abs() < 0.35 * target, "type {k}: rate {rate} vs partition BER {target}");
    }
}
