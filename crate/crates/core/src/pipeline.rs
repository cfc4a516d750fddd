//! The full loop: profile and fit the device, train a baseline, boost it
//! with curricular retraining, characterize, map, and check the mapping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::characterize::{
    characterize, coarse_characterize, BerGrid, CharMode, CharacterizationResult, CoarseOutcome, NetworkProbe,
};
use crate::device::{profile_device, GroundTruthDevice, PartitionId};
use crate::error::{Error, Result};
use crate::fit::{fit_and_select, FitReport};
use crate::mapping::{apply_plan, coarse_plan, data_sizes, fine_map, MappingPlan, PartitionCatalog};
use crate::nn::{
    curricular_retrain, curricular_schedule, evaluate_accuracy, make_synthetic_dataset, train_baseline, AccuracyStats,
    Correction, Dataset, DatasetKind, DramEnv, Network, TrainConfig,
};
use crate::numerics::Dtype;
use crate::rng::{derive_seed, hash_words};
use crate::scalar::Scalar;
use crate::sha256_hex;

pub const REPORT_FORMAT: &str = "approxdram-report/1";

/// Stage labels; each stage seed is `derive_seed(seed, label)`.
pub const STAGES: [&str; 8] = ["profile", "data", "init", "baseline", "characterize", "retrain", "fine", "closure"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Each round retrains towards this multiple of the current tolerable BER.
    pub multiplier: f64,
    pub max_rounds: usize,
}

impl Default for RetrainSettings {
    fn default() -> Self {
        Self { epochs: 12, lr: 0.05, batch: 32, multiplier: 3.0, max_rounds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    pub samples: usize,
    pub classes: usize,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub dtype: Dtype,
    pub correction: Correction,
    pub baseline: TrainSettings,
    pub retrain: RetrainSettings,
    /// Largest accepted accuracy drop, in points.
    pub target_drop: f64,
    pub trials: usize,
    /// Grid spec, see [`BerGrid`]'s `FromStr`.
    pub grid: String,
    pub increment: f64,
    /// Partition whose profile supplies the error model.
    pub profile_partition: PartitionId,
    pub profile_rounds: u32,
    /// Draw a fresh weak-cell map per retraining epoch and evaluation
    /// trial instead of using the device's own cells.
    pub resample_map: bool,
    pub closure_trials: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dataset: DatasetKind::Bars,
            samples: 4000,
            classes: 4,
            hidden: vec![64, 64],
            dtype: Dtype::Fp32,
            correction: Correction::Zero,
            baseline: TrainSettings { epochs: 50, lr: 0.05, batch: 32 },
            retrain: RetrainSettings::default(),
            target_drop: 1.0,
            trials: 10,
            grid: "default".into(),
            increment: crate::characterize::DEFAULT_INCREMENT,
            profile_partition: 2,
            profile_rounds: 16,
            resample_map: true,
            closure_trials: 30,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.hidden.is_empty() {
            return bad("the network needs at least one hidden layer");
        }
        if self.samples < self.classes || self.classes < 2 {
            return bad("need at least two classes and one sample per class");
        }
        if self.trials == 0 || self.closure_trials == 0 {
            return bad("trial counts must be >= 1");
        }
        if !(self.target_drop >= 0.0) {
            return bad("target drop must be >= 0");
        }
        if !(self.increment > 1.0) {
            return bad("increment must be > 1");
        }
        if !(self.retrain.multiplier > 1.0) || self.retrain.epochs < 2 {
            return bad("retraining needs a multiplier > 1 and at least 2 epochs");
        }
        if self.baseline.batch == 0 || self.retrain.batch == 0 {
            return bad("batch size must be >= 1");
        }
        self.grid.parse::<BerGrid>()?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn stage_seeds(&self) -> BTreeMap<String, u64> {
        STAGES.iter().map(|s| (s.to_string(), derive_seed(self.seed, s))).collect()
    }

    fn stage(&self, label: &str) -> u64 {
        debug_assert!(STAGES.contains(&label));
        derive_seed(self.seed, label)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dataset.input_len()];
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }

    pub fn dataset(&self) -> Result<Dataset> {
        make_synthetic_dataset(self.samples, self.classes, self.dataset, self.stage("data"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostRound {
    pub round: usize,
    pub target_ber: f64,
    pub coarse_ber: f64,
    pub clean_accuracy: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostOutcome {
    pub baseline_ber: f64,
    pub ber: f64,
    /// `ber / baseline_ber`; 1 when the baseline tolerates nothing and
    /// neither does the boosted model.
    pub ratio: f64,
    pub rounds: Vec<BoostRound>,
}

fn grid_rank(grid: &BerGrid, ber: f64) -> i64 {
    grid.index_of(ber).map_or(-1, |i| i as i64)
}

/// Rounds of curricular retraining, each aimed at `multiplier` times the
/// current tolerable BER and judged by a coarse search on `eval_env`
/// against the baseline's clean accuracy. A round is kept when it moves the
/// tolerable BER up by at least one grid step; the loop stops at the first
/// round that does not, or after `max_rounds`.
#[allow(clippy::too_many_arguments)]
pub fn curricular_boost<S: Scalar>(
    net: &Network<S>,
    ds: &Dataset,
    eval_env: &DramEnv,
    train_env: &DramEnv,
    baseline: &CoarseOutcome,
    grid: &BerGrid,
    settings: &RetrainSettings,
    target_drop: f64,
    trials: usize,
    char_seed: u64,
    retrain_seed: u64,
) -> Result<(Network<S>, BoostOutcome)> {
    let mut best = net.clone();
    let mut best_ber = baseline.ber;
    let mut rounds = Vec::new();
    for round in 0..settings.max_rounds {
        let target = (best_ber.max(grid.points()[0]) * settings.multiplier).min(crate::characterize::MAX_TYPE_BER);
        let schedule = curricular_schedule(target, settings.epochs)?;
        let cfg = TrainConfig {
            epochs: settings.epochs,
            lr: settings.lr,
            batch: settings.batch,
            seed: hash_words(retrain_seed, &[round as u64]),
        };
        let candidate = curricular_retrain(best.clone(), ds, train_env, &schedule, &cfg)?;
        let probe = NetworkProbe { net: &candidate, data: ds, env: eval_env, reference_accuracy: Some(baseline.clean_accuracy) };
        let found = coarse_characterize(&probe, target_drop, grid, trials, char_seed)?;
        let clean = evaluate_accuracy(&candidate, ds, None, 1, 0)?.mean;
        let accepted = grid_rank(grid, found.ber) > grid_rank(grid, best_ber);
        rounds.push(BoostRound { round, target_ber: target, coarse_ber: found.ber, clean_accuracy: clean, accepted });
        if !accepted {
            break;
        }
        best = candidate;
        best_ber = found.ber;
    }
    let ratio = match (baseline.ber > 0.0, best_ber > 0.0) {
        (true, _) => best_ber / baseline.ber,
        (false, false) => 1.0,
        (false, true) => f64::INFINITY,
    };
    Ok((best, BoostOutcome { baseline_ber: baseline.ber, ber: best_ber, ratio, rounds }))
}

/// Profiles the device at its reference point and fits the error model of
/// one partition.
pub fn fit_partition(device: &GroundTruthDevice, partition: PartitionId, rounds: u32, seed: u64) -> Result<FitReport> {
    let trace = profile_device(device, device.reference_point, rounds, seed)?;
    fit_and_select(&trace.restrict(device.partition_cells(partition)?)?)
}

/// Environment over the device's weak cells governed by a fitted model.
pub fn device_env(device: &GroundTruthDevice, fit: &FitReport, correction: Correction) -> Result<DramEnv> {
    Ok(DramEnv::new(device.geometry, fit.chosen_model()?, device.seed)?.with_correction(correction))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureCheck {
    pub trials: usize,
    pub seed: u64,
    pub reference_accuracy: f64,
    pub accuracy: AccuracyStats,
    pub drop: f64,
    /// Largest accepted drop: target + 1 point.
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub name: String,
    pub seed: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub format: String,
    pub config: PipelineConfig,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub device: DeviceSummary,
    pub fit: FitReport,
    pub parameters: usize,
    pub baseline_clean_accuracy: f64,
    pub baseline: CoarseOutcome,
    pub boost: BoostOutcome,
    pub boosted_clean_accuracy: f64,
    pub characterization: CharacterizationResult,
    pub sizes: BTreeMap<String, u64>,
    pub coarse_plan: MappingPlan,
    pub fine_plan: MappingPlan,
    pub coarse_closure: ClosureCheck,
    pub fine_closure: ClosureCheck,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub struct PipelineRun {
    pub report: PipelineReport,
    pub baseline: Network<f32>,
    pub boosted: Network<f32>,
}

fn closure<S: Scalar>(
    plan: &MappingPlan,
    net: &Network<S>,
    ds: &Dataset,
    device: &GroundTruthDevice,
    cfg: &PipelineConfig,
    reference: f64,
    seed: u64,
) -> Result<ClosureCheck> {
    let env = apply_plan(plan, net, device)?.with_correction(cfg.correction);
    let accuracy = evaluate_accuracy(net, ds, Some(&env), cfg.closure_trials, seed)?;
    let drop = reference - accuracy.mean;
    let limit = cfg.target_drop + 1.0;
    Ok(ClosureCheck { trials: cfg.closure_trials, seed, reference_accuracy: reference, drop, limit, passed: drop <= limit, accuracy })
}

pub fn run_pipeline(cfg: &PipelineConfig, device: &GroundTruthDevice) -> Result<PipelineRun> {
    cfg.validate()?;
    device.validate()?;
    let grid: BerGrid = cfg.grid.parse()?;

    let fit = fit_partition(device, cfg.profile_partition, cfg.profile_rounds, cfg.stage("profile"))?;
    let mut env = device_env(device, &fit, cfg.correction)?;
    env.resample_map = cfg.resample_map;

    let ds = cfg.dataset()?;
    let init = Network::<f32>::mlp(&cfg.widths(), cfg.dtype, cfg.stage("init"))?;
    let train = TrainConfig { epochs: cfg.baseline.epochs, lr: cfg.baseline.lr, batch: cfg.baseline.batch, seed: cfg.stage("baseline") };
    let (baseline, _) = train_baseline(init, &ds, &train)?;

    let char_seed = cfg.stage("characterize");
    let probe = NetworkProbe { net: &baseline, data: &ds, env: &env, reference_accuracy: None };
    let base = coarse_characterize(&probe, cfg.target_drop, &grid, cfg.trials, char_seed)?;

    let (boosted, boost) = curricular_boost(
        &baseline,
        &ds,
        &env,
        &env,
        &base,
        &grid,
        &cfg.retrain,
        cfg.target_drop,
        cfg.trials,
        char_seed,
        cfg.stage("retrain"),
    )?;
    let boosted_clean_accuracy = evaluate_accuracy(&boosted, &ds, None, 1, 0)?.mean;

    let probe = NetworkProbe { net: &boosted, data: &ds, env: &env, reference_accuracy: Some(base.clean_accuracy) };
    let mut characterization =
        characterize(&probe, CharMode::Fine, cfg.target_drop, &grid, cfg.increment, cfg.trials, cfg.stage("fine"))?;
    characterization.env = Some(env.clone());

    let sizes = data_sizes(&boosted)?;
    let catalog = PartitionCatalog::from_device(device)?;
    let coarse = coarse_plan(characterization.coarse_ber, device)?;
    let fine = fine_map(&characterization, &sizes, &catalog)?;
    fine.check_feasible(&characterization.per_type, &sizes, &catalog)?;

    let closure_seed = cfg.stage("closure");
    let coarse_closure = closure(&coarse, &boosted, &ds, device, cfg, base.clean_accuracy, closure_seed)?;
    let fine_closure = closure(&fine, &boosted, &ds, device, cfg, base.clean_accuracy, closure_seed)?;

    let report = PipelineReport {
        format: REPORT_FORMAT.into(),
        config: cfg.clone(),
        config_digest: cfg.digest(),
        seeds: cfg.stage_seeds(),
        device: DeviceSummary { name: device.name.clone(), seed: device.seed, digest: sha256_hex(device.to_json()?.as_bytes()) },
        fit,
        parameters: boosted.param_count(),
        baseline_clean_accuracy: base.clean_accuracy,
        baseline: base,
        boost,
        boosted_clean_accuracy,
        characterization,
        sizes: sizes.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        coarse_plan: coarse,
        fine_plan: fine,
        coarse_closure,
        fine_closure,
    };
    Ok(PipelineRun { report, baseline, boosted })
}
