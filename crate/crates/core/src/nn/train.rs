use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dram::AccessKey;
use crate::error::{Error, Result};
use crate::rng::{hash_words, CounterRng};
use crate::scalar::Scalar;

use super::data::Dataset;
use super::env::{DramEnv, Loader, PreparedEnv};
use super::network::{argmax, softmax_cross_entropy, ForwardTrace, Network, Params};
use super::types::{Correction, DataTypeId, Thresholds};

const TRIAL_TAG: u64 = 0x5452_4941_4C00;
const EPOCH_TAG: u64 = 0x4550_4F43_4800;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 0.05, batch: 32, seed: 0 }
    }
}

fn check_dataset<S: Scalar>(net: &Network<S>, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    if ds.input_len != net.input_len() || ds.classes > net.classes() {
        return Err(Error::Shape(format!(
            "dataset ({} inputs, {} classes) does not fit the network ({} inputs, {} outputs)",
            ds.input_len,
            ds.classes,
            net.input_len(),
            net.classes()
        )));
    }
    Ok(())
}

fn observe_weights<S: Scalar>(t: &mut Thresholds, params: &[Params<S>]) {
    for (i, p) in params.iter().enumerate() {
        t.observe_values(DataTypeId::weight(i as u32), p.iter().map(|v| v.to_f64_lossy()));
    }
}

/// One epoch of mini-batch SGD. With `env`, forward passes read weights and
/// feature maps through it while updates go to the clean master weights.
/// Returns the mean loss, NaN if any sample's loss was not finite; such
/// samples contribute no gradient.
pub fn train_epoch<S: Scalar>(
    net: &mut Network<S>,
    ds: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    env: Option<&PreparedEnv>,
    mut capture: Option<&mut Thresholds>,
) -> Result<f64> {
    check_dataset(net, ds)?;
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("batch must be >= 1 and lr > 0".into()));
    }
    let epoch_key = hash_words(cfg.seed, &[EPOCH_TAG, epoch as u64]);
    let mut order: Vec<usize> = (0..ds.train_len()).collect();
    order.shuffle(&mut CounterRng::new(epoch_key).stream(0));
    let lr = S::lit(cfg.lr);
    let mut total = 0.0;
    let mut bad = false;
    let mut trace = ForwardTrace::default();
    let mut x: Vec<S> = Vec::with_capacity(ds.input_len);
    for (b, batch) in order.chunks(cfg.batch).enumerate() {
        let loader = env.map(|e| Loader::new(net, Some(e)));
        let used = match &loader {
            Some(l) => l.weights(AccessKey::new(epoch_key, b as u64)),
            None => net.params().to_vec(),
        };
        let mut grads: Vec<Params<S>> = net.params().iter().map(Params::zeros_like).collect();
        for &i in batch {
            x.clear();
            x.extend(ds.train_sample(i).iter().map(|&v| S::lit(f64::from(v))));
            let access = AccessKey::new(epoch_key, i as u64);
            let logits = {
                let mut hook = |layer: usize, vals: &mut [S]| {
                    if let Some(l) = &loader {
                        l.ifm(layer, vals, access);
                    }
                    if let Some(t) = capture.as_deref_mut() {
                        t.observe_values(DataTypeId::ifm(layer as u32), vals.iter().map(|v| v.to_f64_lossy()));
                    }
                };
                net.forward_with(&used, &x, &mut hook, Some(&mut trace))
            };
            let (loss, dlogits) = softmax_cross_entropy(&logits, ds.train_y[i] as usize);
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() || dlogits.iter().any(|g| !g.is_finite()) {
                bad = true;
                continue;
            }
            total += loss;
            net.backward(&used, &trace, &dlogits, &mut grads);
        }
        let scale = lr / S::lit(batch.len() as f64);
        for (p, g) in net.params_mut().iter_mut().zip(&grads) {
            for (w, &d) in p.iter_mut().zip(g.iter()) {
                *w -= scale * d;
            }
        }
        if let Some(t) = capture.as_deref_mut() {
            observe_weights(t, net.params());
        }
    }
    Ok(if bad { f64::NAN } else { total / ds.train_len().max(1) as f64 })
}

/// Trains on reliable memory and captures value ranges of every data type
/// (initial and updated weights, and every feature map seen in training).
pub fn train_baseline<S: Scalar>(mut net: Network<S>, ds: &Dataset, cfg: &TrainConfig) -> Result<(Network<S>, Thresholds)> {
    check_dataset(&net, ds)?;
    let mut t = Thresholds::default();
    observe_weights(&mut t, net.params());
    if cfg.epochs == 0 {
        let mut x: Vec<S> = Vec::new();
        for i in 0..ds.train_len() {
            x.clear();
            x.extend(ds.train_sample(i).iter().map(|&v| S::lit(f64::from(v))));
            let mut hook = |layer: usize, vals: &mut [S]| {
                t.observe_values(DataTypeId::ifm(layer as u32), vals.iter().map(|v| v.to_f64_lossy()));
            };
            net.forward_with(net.params(), &x, &mut hook, None);
        }
    }
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(&mut net, ds, cfg, epoch, None, Some(&mut t))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, reason: "training loss is not finite".into() });
        }
    }
    net.thresholds = t.clone();
    Ok((net, t))
}

/// Per-epoch BER: two epochs at 0, then a geometric ramp that doubles every
/// two epochs and reaches `target` in the last step.
pub fn curricular_schedule(target: f64, total_epochs: usize) -> Result<Vec<f64>> {
    if total_epochs < 2 {
        return Err(Error::InvalidArgument("a curricular schedule needs at least 2 epochs".into()));
    }
    if !(0.0..=0.5).contains(&target) {
        return Err(Error::InvalidArgument(format!("target BER {target} outside [0, 0.5]")));
    }
    let k = (total_epochs - 2).div_ceil(2) as i32;
    Ok((0..total_epochs)
        .map(|e| {
            if e < 2 || target == 0.0 {
                0.0
            } else {
                let step = ((e - 2) / 2) as i32 + 1;
                target / 2f64.powi(k - step)
            }
        })
        .collect())
}

/// Retrains with errors injected in forward passes at each epoch's BER
/// (zero correction); gradients update the clean master weights.
pub fn curricular_retrain<S: Scalar>(
    mut net: Network<S>,
    ds: &Dataset,
    env: &DramEnv,
    schedule: &[f64],
    cfg: &TrainConfig,
) -> Result<Network<S>> {
    let mut nan_streak = 0;
    for (epoch, &ber) in schedule.iter().enumerate() {
        let prepared = if ber > 0.0 {
            let e = env.with_ber(ber)?.with_correction(Correction::Zero);
            Some(e.prepare_with_map(&net, e.map_seed_for(epoch as u64))?)
        } else {
            None
        };
        let loss = train_epoch(&mut net, ds, cfg, epoch, prepared.as_ref(), None)?;
        if net.params().iter().any(|p| p.iter().any(|w| !w.is_finite())) {
            return Err(Error::Diverged { epoch, reason: "accuracy collapse: weights are not finite".into() });
        }
        nan_streak = if loss.is_finite() { 0 } else { nan_streak + 1 };
        if nan_streak >= 2 {
            return Err(Error::Diverged { epoch, reason: "accuracy collapse: loss not finite for 2 epochs".into() });
        }
    }
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyStats {
    /// Mean validation accuracy in percent.
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub per_trial: Vec<f64>,
}

impl AccuracyStats {
    fn from_trials(per_trial: Vec<f64>) -> Self {
        let n = per_trial.len() as f64;
        let mean = per_trial.iter().sum::<f64>() / n;
        let std = if per_trial.len() > 1 {
            (per_trial.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, trials: per_trial.len(), per_trial }
    }
}

/// Seed of trial `t` of an evaluation seeded with `seed`.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    hash_words(seed, &[TRIAL_TAG, t as u64])
}

/// Validation accuracy (percent) of one inference pass over the validation
/// set. Weights are read once; each sample's feature maps are read with
/// the sample index as access counter.
pub fn validation_accuracy<S: Scalar>(net: &Network<S>, ds: &Dataset, env: Option<&PreparedEnv>, access_seed: u64) -> f64 {
    let loader = Loader::new(net, env);
    let weights = loader.weights(AccessKey::new(access_seed, u64::MAX));
    let mut x: Vec<S> = Vec::with_capacity(ds.input_len);
    let mut correct = 0usize;
    for i in 0..ds.val_len() {
        x.clear();
        x.extend(ds.val_sample(i).iter().map(|&v| S::lit(f64::from(v))));
        let access = AccessKey::new(access_seed, i as u64);
        let logits = net.forward_with(&weights, &x, &mut |layer, vals| loader.ifm(layer, vals, access), None);
        if argmax(&logits) == ds.val_y[i] as usize {
            correct += 1;
        }
    }
    100.0 * correct as f64 / ds.val_len().max(1) as f64
}

/// Mean validation accuracy over independently seeded injection trials.
pub fn evaluate_prepared<S: Scalar>(net: &Network<S>, ds: &Dataset, env: &PreparedEnv, trials: usize, seed: u64) -> AccuracyStats {
    let per_trial: Vec<f64> =
        (0..trials.max(1)).into_par_iter().map(|t| validation_accuracy(net, ds, Some(env), trial_seed(seed, t))).collect();
    AccuracyStats::from_trials(per_trial)
}

/// Validation accuracy; without `env` the result is exact and its std 0.
pub fn evaluate_accuracy<S: Scalar>(
    net: &Network<S>,
    ds: &Dataset,
    env: Option<&DramEnv>,
    trials: usize,
    seed: u64,
) -> Result<AccuracyStats> {
    check_dataset(net, ds)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    match env {
        None => {
            let acc = validation_accuracy(net, ds, None, 0);
            Ok(AccuracyStats { mean: acc, std: 0.0, trials, per_trial: vec![acc; trials] })
        }
        Some(e) if e.resample_map => {
            let prepared: Vec<PreparedEnv> =
                (0..trials).map(|t| e.prepare_with_map(net, e.map_seed_for(t as u64))).collect::<Result<_>>()?;
            let per_trial = prepared
                .par_iter()
                .enumerate()
                .map(|(t, p)| validation_accuracy(net, ds, Some(p), trial_seed(seed, t)))
                .collect();
            Ok(AccuracyStats::from_trials(per_trial))
        }
        Some(e) => Ok(evaluate_prepared(net, ds, &e.prepare(net)?, trials, seed)),
    }
}
