use std::cell::Cell;
use std::collections::BTreeMap;

use approxdram::characterize::*;
use approxdram::nn::DataTypeId;
use approxdram::Result;

/// Accuracy oracle: clean below a threshold, collapsed at or above it.
struct Step {
    theta: f64,
    clean: f64,
    calls: Cell<usize>,
}

impl Step {
    fn new(theta: f64) -> Self {
        Self { theta, clean: 95.0, calls: Cell::new(0) }
    }
}

impl AccuracyProbe for Step {
    fn data_types(&self) -> Vec<DataTypeId> {
        vec![DataTypeId::weight(0)]
    }

    fn clean_accuracy(&self) -> Result<f64> {
        Ok(self.clean)
    }

    fn accuracy(&self, bers: &BerAssignment, _trials: usize, _seed: u64) -> Result<f64> {
        self.calls.set(self.calls.get() + 1);
        let b = match bers {
            BerAssignment::Uniform(b) => *b,
            BerAssignment::PerType(m) => m.values().copied().fold(0.0, f64::max),
        };
        Ok(if b <= self.theta { self.clean } else { 10.0 })
    }
}

/// Per-type thresholds; accuracy collapses when any type exceeds its own.
struct PerTypeStep {
    limits: BTreeMap<DataTypeId, f64>,
}

impl AccuracyProbe for PerTypeStep {
    fn data_types(&self) -> Vec<DataTypeId> {
        self.limits.keys().copied().collect()
    }

    fn clean_accuracy(&self) -> Result<f64> {
        Ok(90.0)
    }

    fn accuracy(&self, bers: &BerAssignment, _trials: usize, _seed: u64) -> Result<f64> {
        let ok = match bers {
            BerAssignment::Uniform(b) => self.limits.values().all(|&l| *b <= l),
            BerAssignment::PerType(m) => m.iter().all(|(id, b)| *b <= self.limits[id]),
        };
        Ok(if ok { 90.0 } else { 20.0 })
    }
}

fn probe_budget(grid: &BerGrid) -> usize {
    (grid.len() as f64).log2().ceil() as usize + 1
}

#[test]
fn step_oracle_threshold_found_exactly_on_every_grid_point() {
    let grid = BerGrid::default_grid();
    for (i, &theta) in grid.points().iter().enumerate() {
        let oracle = Step::new(theta);
        let out = coarse_characterize(&oracle, 1.0, &grid, 10, 0).unwrap();
        assert_eq!(out.ber, theta);
        assert_eq!(out.index, Some(i));
        assert!(out.probes.len() <= probe_budget(&grid), "{} probes", out.probes.len());
        assert!(out.warnings.is_empty());
        assert_eq!(oracle.calls.get(), out.probes.len() + out.validations.len());
    }
}

#[test]
fn step_oracle_on_small_grids() {
    for n in 1..=40 {
        let grid = BerGrid::log(-6, 10f64.powf(-6.0 + (n - 1) as f64 / 8.0), 8).unwrap();
        assert_eq!(grid.len(), n);
        for theta_idx in 0..n {
            let theta = grid.points()[theta_idx];
            let out = coarse_characterize(&Step::new(theta), 1.0, &grid, 10, 0).unwrap();
            assert_eq!(out.ber, theta);
            assert!(out.probes.len() <= probe_budget(&grid));
        }
    }
}

#[test]
fn nothing_passes_reports_zero() {
    let grid = BerGrid::default_grid();
    let out = coarse_characterize(&Step::new(1e-9), 1.0, &grid, 10, 0).unwrap();
    assert_eq!(out.ber, 0.0);
    assert_eq!(out.index, None);
    assert!(out.probes.len() <= probe_budget(&grid));
}

#[test]
fn full_target_returns_grid_maximum() {
    let grid = BerGrid::default_grid();
    let out = coarse_characterize(&Step::new(1e-9), 100.0, &grid, 10, 0).unwrap();
    assert_eq!(out.ber, 0.3);
}

#[test]
fn single_point_grid() {
    let grid = BerGrid::new(vec![1e-3]).unwrap();
    assert_eq!(coarse_characterize(&Step::new(1e-3), 1.0, &grid, 10, 0).unwrap().ber, 1e-3);
    assert_eq!(coarse_characterize(&Step::new(1e-4), 1.0, &grid, 10, 0).unwrap().ber, 0.0);
}

/// A probe whose search probes pass but whose validation re-run fails above
/// a lower threshold.
struct Noisy {
    search_theta: f64,
    true_theta: f64,
}

impl AccuracyProbe for Noisy {
    fn data_types(&self) -> Vec<DataTypeId> {
        vec![DataTypeId::weight(0)]
    }

    fn clean_accuracy(&self) -> Result<f64> {
        Ok(95.0)
    }

    fn accuracy(&self, bers: &BerAssignment, trials: usize, _seed: u64) -> Result<f64> {
        let BerAssignment::Uniform(b) = bers else { unreachable!() };
        let theta = if trials > 10 { self.true_theta } else { self.search_theta };
        Ok(if *b <= theta { 95.0 } else { 50.0 })
    }
}

#[test]
fn failed_validation_steps_down() {
    let grid = BerGrid::default_grid();
    let (hi, lo) = (grid.points()[40], grid.points()[37]);
    let out = coarse_characterize(&Noisy { search_theta: hi, true_theta: lo }, 1.0, &grid, 10, 0).unwrap();
    assert_eq!(out.ber, lo);
    assert_eq!(out.validations.len(), 4);
    assert!(out.validations.last().unwrap().passed);
    assert_eq!(out.validations[0].trials, 30);
    assert_eq!(out.warnings.len(), 3);
}

#[test]
fn single_type_sweep_matches_multiplicative_coarse_search() {
    let theta = 7.3e-3;
    let fine = fine_characterize(&Step::new(theta), 1.0, 1e-3, 1.5, 10, 0).unwrap();
    let ladder: Vec<f64> = std::iter::successors(Some(1e-3), |b| Some(b * 1.5)).take_while(|&b| b <= 0.5).collect();
    let coarse = coarse_characterize(&Step::new(theta), 1.0, &BerGrid::new(ladder).unwrap(), 10, 0).unwrap();
    assert_eq!(fine.per_type[&DataTypeId::weight(0)], coarse.ber);
}

#[test]
fn huge_increment_keeps_bootstrap() {
    let fine = fine_characterize(&Step::new(0.01), 1.0, 1e-3, 1000.0, 10, 0).unwrap();
    assert_eq!(fine.per_type[&DataTypeId::weight(0)], 1e-3);
    assert!(fine_characterize(&Step::new(0.01), 1.0, 1e-3, 1.0, 10, 0).is_err());
}

#[test]
fn per_type_sweep_finds_each_limit_step() {
    let ids = [DataTypeId::weight(0), DataTypeId::weight(1), DataTypeId::ifm(0), DataTypeId::ifm(1)];
    let limits: BTreeMap<_, _> = ids.iter().zip([2e-3, 9e-3, 1e-3, 0.2]).map(|(&i, l)| (i, l)).collect();
    let probe = PerTypeStep { limits: limits.clone() };
    let grid = BerGrid::default_grid();
    let res = characterize(&probe, CharMode::Fine, 1.0, &grid, 1.5, 10, 3).unwrap();
    assert_eq!(res.coarse_ber, grid.points()[grid.points().iter().rposition(|&p| p <= 1e-3).unwrap()]);
    for (id, &l) in &limits {
        let b = res.per_type[id];
        assert!(b >= res.coarse_ber);
        assert!(b <= l && b * 1.5 > l, "{id}: {b} vs limit {l}");
    }
    let json = serde_json::to_string(&res).unwrap();
    assert_eq!(serde_json::from_str::<CharacterizationResult>(&json).unwrap(), res);
}

#[test]
fn coarse_zero_keeps_every_type_at_zero() {
    let fine = fine_characterize(&Step::new(0.01), 1.0, 0.0, 1.5, 10, 0).unwrap();
    assert!(fine.per_type.values().all(|&b| b == 0.0));
}
