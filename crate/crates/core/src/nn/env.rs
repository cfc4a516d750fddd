use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dram::{AccessKey, DramGeometry, ErrorModel, LayoutDescriptor, LayoutMode, Placement, WeakCellMap};
use crate::error::{Error, Result};
use crate::rng::hash_words;
use crate::numerics::{quantize_one, Dtype};
use crate::scalar::Scalar;

use super::network::{Network, Params};
use super::types::{bound_correct, Correction, DataKind, DataTypeId, ExponentCheck};

/// Geometry used by environments that do not name one.
pub const ENV_GEOMETRY: DramGeometry = DramGeometry { banks: 1, rows_per_bank: 1088, bits_per_row: 1024 };

const MAP_TAG: u64 = 0x4D41_5000;

/// Flip probability of weak cells in environments built from a bare BER.
pub const UNIFORM_FLIP_PROBABILITY: f64 = 0.5;

/// Approximate DRAM that a network's weights and feature maps are read
/// through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DramEnv {
    pub geometry: DramGeometry,
    /// Error model for data types without their own model.
    pub model: ErrorModel,
    /// Seed of the frozen weak-cell map.
    pub map_seed: u64,
    pub layout: LayoutMode,
    pub correction: Correction,
    /// Use the fp32 exponent-field check instead of full range checking.
    #[serde(default)]
    pub exponent_check: bool,
    /// BER applied to every data type without its own override.
    #[serde(default)]
    pub ber: Option<f64>,
    #[serde(default)]
    pub ber_override: BTreeMap<DataTypeId, f64>,
    #[serde(default)]
    pub type_models: BTreeMap<DataTypeId, ErrorModel>,
    /// Explicit placements; object ids index `Network::data_types()`.
    #[serde(default)]
    pub placements: Vec<Placement>,
    /// Data types held in reliable memory.
    #[serde(default)]
    pub reliable: BTreeSet<DataTypeId>,
    /// Draw a fresh weak-cell map for every evaluation trial and training
    /// epoch instead of using one frozen map.
    #[serde(default)]
    pub resample_map: bool,
}

impl DramEnv {
    pub fn new(geometry: DramGeometry, model: ErrorModel, map_seed: u64) -> Result<Self> {
        model.check_geometry(&geometry)?;
        Ok(Self {
            geometry,
            model,
            map_seed,
            layout: LayoutMode::Aligned,
            correction: Correction::Zero,
            exponent_check: false,
            ber: None,
            ber_override: BTreeMap::new(),
            type_models: BTreeMap::new(),
            placements: Vec::new(),
            reliable: BTreeSet::new(),
            resample_map: false,
        })
    }

    /// Family-0 environment with flip probability 0.5 and the given BER.
    pub fn uniform(ber: f64, map_seed: u64) -> Result<Self> {
        check_ber(ber)?;
        let model = ErrorModel::uniform(2.0 * ber, UNIFORM_FLIP_PROBABILITY)?;
        Self::new(ENV_GEOMETRY, model, map_seed)
    }

    pub fn with_correction(mut self, correction: Correction) -> Self {
        self.correction = correction;
        self
    }

    /// Same environment with every data type scaled to `ber`.
    pub fn with_ber(&self, ber: f64) -> Result<Self> {
        check_ber(ber)?;
        let mut e = self.clone();
        e.ber = Some(ber);
        e.ber_override.clear();
        Ok(e)
    }

    /// Same environment with per-type BERs; types not listed use `default`.
    pub fn with_type_bers(&self, bers: &BTreeMap<DataTypeId, f64>, default: Option<f64>) -> Result<Self> {
        let mut e = self.clone();
        e.ber = default;
        e.ber_override = bers.clone();
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.model.check_geometry(&self.geometry)?;
        for m in self.type_models.values() {
            m.check_geometry(&self.geometry)?;
        }
        self.ber.map(check_ber).transpose()?;
        for &b in self.ber_override.values() {
            check_ber(b)?;
        }
        Ok(())
    }

    /// Error model that data type `id` experiences.
    pub fn effective_model(&self, id: DataTypeId) -> Result<ErrorModel> {
        if self.reliable.contains(&id) {
            return Ok(ErrorModel::reliable());
        }
        let base = self.type_models.get(&id).unwrap_or(&self.model);
        match self.ber_override.get(&id).copied().or(self.ber) {
            None => Ok(base.clone()),
            Some(b) if b == 0.0 => Ok(ErrorModel::reliable()),
            Some(b) => base.with_expected_ber(b, 0.5),
        }
    }

    /// Weak-map seed of realization `index` (trial or epoch).
    pub fn map_seed_for(&self, index: u64) -> u64 {
        if self.resample_map {
            hash_words(self.map_seed, &[MAP_TAG, index])
        } else {
            self.map_seed
        }
    }

    /// Resolves layout, models and weak cells for a network.
    pub fn prepare<S: Scalar>(&self, net: &Network<S>) -> Result<PreparedEnv> {
        self.prepare_with_map(net, self.map_seed)
    }

    /// As [`DramEnv::prepare`] with an explicit weak-map seed.
    pub fn prepare_with_map<S: Scalar>(&self, net: &Network<S>, map_seed: u64) -> Result<PreparedEnv> {
        self.validate()?;
        let ids = net.data_types();
        let width = net.dtype.bits() as u64;
        let sizes: Vec<u64> = ids.iter().map(|&id| Ok(net.type_len(id)? as u64 * width)).collect::<Result<_>>()?;
        let layout = if self.placements.is_empty() {
            let objects: Vec<(u32, u64)> = sizes.iter().enumerate().map(|(i, &b)| (i as u32, b)).collect();
            LayoutDescriptor::sequential(self.geometry, &objects, self.layout)?
        } else {
            LayoutDescriptor::new(self.geometry, self.placements.clone())?
        };
        let mut types = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let bounds = net.thresholds.bounds(id);
            let p = match layout.placement(i as u32) {
                Some(p) => p,
                None if self.reliable.contains(&id) => {
                    types.push(PreparedType { model: ErrorModel::reliable(), base: 0, weak: Vec::new(), bounds });
                    continue;
                }
                None => return Err(Error::Layout(format!("no placement for data type {id} (object {i})"))),
            };
            if p.len_bits < sizes[i] {
                return Err(Error::Layout(format!("placement of {id} holds {} of {} bits", p.len_bits, sizes[i])));
            }
            let start = layout.range(p).start;
            let model = self.effective_model(id)?;
            model.check_geometry(&self.geometry)?;
            let weak = if model.expected_ber(0.5) > 0.0 || matches!(model, ErrorModel::DataDependent { .. }) {
                let range = start..start + sizes[i];
                WeakCellMap::generate_in(&model, &self.geometry, map_seed, std::slice::from_ref(&range))?
                    .cells()
                    .to_vec()
            } else {
                Vec::new()
            };
            types.push(PreparedType { model, base: start, weak, bounds });
        }
        Ok(PreparedEnv {
            geometry: self.geometry,
            dtype: net.dtype,
            correction: self.correction,
            exponent_check: self.exponent_check,
            types,
        })
    }
}

fn check_ber(b: f64) -> Result<()> {
    if (0.0..=0.5).contains(&b) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("BER {b} outside [0, 0.5]")))
    }
}

#[derive(Debug, Clone)]
struct PreparedType {
    model: ErrorModel,
    base: u64,
    /// Weak cells covered by the object, ascending.
    weak: Vec<u64>,
    bounds: Option<(f64, f64)>,
}

/// An environment resolved for one network: placements, per-type models
/// and frozen weak cells.
#[derive(Debug, Clone)]
pub struct PreparedEnv {
    geometry: DramGeometry,
    dtype: Dtype,
    correction: Correction,
    exponent_check: bool,
    /// Weights of every layer, then IFMs of every layer.
    types: Vec<PreparedType>,
}

impl PreparedEnv {
    fn get(&self, id: DataTypeId) -> &PreparedType {
        let layers = self.types.len() / 2;
        let i = match id.kind {
            DataKind::Weight => id.layer as usize,
            DataKind::Ifm => layers + id.layer as usize,
        };
        &self.types[i]
    }

    /// Number of weak cells under a data type.
    pub fn weak_cells(&self, id: DataTypeId) -> usize {
        self.get(id).weak.len()
    }

    pub fn model(&self, id: DataTypeId) -> &ErrorModel {
        &self.get(id).model
    }

    pub fn correction(&self) -> Correction {
        self.correction
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }
}

/// Reads weights and feature maps as inference stores them: at the
/// network's dtype, optionally through approximate DRAM.
pub struct Loader<'a, S> {
    net: &'a Network<S>,
    env: Option<&'a PreparedEnv>,
    weight_scales: Vec<f64>,
    ifm_scales: Vec<Option<f64>>,
    stored_weights: Vec<Params<S>>,
}

impl<'a, S: Scalar> Loader<'a, S> {
    pub fn new(net: &'a Network<S>, env: Option<&'a PreparedEnv>) -> Self {
        let dtype = net.dtype;
        let weight_scales: Vec<f64> = net
            .params()
            .iter()
            .map(|p| if dtype.is_integer() { scale_of(p.iter().copied(), dtype) } else { 1.0 })
            .collect();
        let ifm_scales = (0..net.parametric_layers())
            .map(|i| {
                net.thresholds.bounds(DataTypeId::ifm(i as u32)).filter(|_| dtype.is_integer()).map(|(lo, hi)| {
                    let m = lo.abs().max(hi.abs());
                    if m > 0.0 { m / f64::from(dtype.code_max()) } else { 1.0 }
                })
            })
            .collect();
        let stored_weights = net
            .params()
            .iter()
            .zip(&weight_scales)
            .map(|(p, &scale)| Params {
                weights: p.weights.iter().map(|&v| store(v, dtype, scale)).collect(),
                bias: p.bias.iter().map(|&v| store(v, dtype, scale)).collect(),
            })
            .collect();
        Self { net, env, weight_scales, ifm_scales, stored_weights }
    }

    /// Weights as read back from memory for one access.
    pub fn weights(&self, access: AccessKey) -> Vec<Params<S>> {
        let mut out = self.stored_weights.clone();
        if let Some(env) = self.env {
            for (i, p) in out.iter_mut().enumerate() {
                let t = env.get(DataTypeId::weight(i as u32));
                let nw = p.weights.len();
                let scale = self.weight_scales[i];
                let mut flat: Vec<S> = p.iter().copied().collect();
                corrupt(&mut flat, t, env, self.net.dtype, scale, access);
                p.weights.copy_from_slice(&flat[..nw]);
                p.bias.copy_from_slice(&flat[nw..]);
            }
        }
        out
    }

    /// Stores the IFM of parametric layer `layer` and reads it back.
    pub fn ifm(&self, layer: usize, values: &mut [S], access: AccessKey) {
        let dtype = self.net.dtype;
        let scale = match self.ifm_scales[layer] {
            Some(s) => s,
            None if dtype.is_integer() => scale_of(values.iter().copied(), dtype),
            None => 1.0,
        };
        for v in values.iter_mut() {
            *v = store(*v, dtype, scale);
        }
        if let Some(env) = self.env {
            corrupt(values, env.get(DataTypeId::ifm(layer as u32)), env, dtype, scale, access);
        }
    }
}

/// Symmetric scale over the finite values.
fn scale_of<S: Scalar>(values: impl Iterator<Item = S>, dtype: Dtype) -> f64 {
    let m = values.map(|v| v.to_f64_lossy()).filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m / f64::from(dtype.code_max())
    } else {
        1.0
    }
}

/// Value after a round trip through storage at `dtype`.
#[inline]
fn store<S: Scalar>(v: S, dtype: Dtype, scale: f64) -> S {
    if dtype.is_integer() {
        S::lit(f64::from(quantize_one(v.to_f64_lossy(), dtype, scale)) * scale)
    } else {
        S::from_f32_storage(v.to_f32_storage())
    }
}

#[inline]
fn to_word<S: Scalar>(v: S, dtype: Dtype, scale: f64) -> u32 {
    if dtype.is_integer() {
        let mask = if dtype.bits() == 32 { u32::MAX } else { (1u32 << dtype.bits()) - 1 };
        (quantize_one(v.to_f64_lossy(), dtype, scale) as u32) & mask
    } else {
        v.to_f32_storage().to_bits()
    }
}

#[inline]
fn from_word<S: Scalar>(w: u32, dtype: Dtype, scale: f64) -> S {
    if dtype.is_integer() {
        let shift = 32 - dtype.bits();
        let code = ((w << shift) as i32) >> shift;
        S::lit(f64::from(code) * scale)
    } else {
        S::from_f32_storage(f32::from_bits(w))
    }
}

/// Flips the weak cells of one stored object and applies the correction.
fn corrupt<S: Scalar>(values: &mut [S], t: &PreparedType, env: &PreparedEnv, dtype: Dtype, scale: f64, access: AccessKey) {
    let width = u64::from(dtype.bits());
    let weak = &t.weak;
    let mut i = 0;
    while i < weak.len() {
        let e = ((weak[i] - t.base) / width) as usize;
        let orig = to_word(values[e], dtype, scale);
        let mut word = orig;
        while i < weak.len() && ((weak[i] - t.base) / width) as usize == e {
            let cell = weak[i];
            let b = ((cell - t.base) % width) as u32;
            let stored = (orig >> b) & 1 == 1;
            let f = t.model.flip_probability(&env.geometry, cell, stored);
            if f > 0.0 && access.draw(cell) < f {
                word ^= 1 << b;
            }
            i += 1;
        }
        if word != orig {
            values[e] = from_word(word, dtype, scale);
        }
    }
    if env.correction == Correction::Off {
        return;
    }
    let Some(bounds) = t.bounds else { return };
    if env.exponent_check && dtype == Dtype::Fp32 {
        let check = ExponentCheck::new(bounds);
        for v in values.iter_mut() {
            *v = S::from_f32_storage(check.correct(v.to_f32_storage(), bounds, env.correction));
        }
    } else {
        for v in values.iter_mut() {
            let x = v.to_f64_lossy();
            let c = bound_correct(x, bounds, env.correction);
            if c.to_bits() != x.to_bits() {
                *v = S::lit(c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::inject_in_place;
    use crate::numerics::{decode_bits, encode_bits, Tensor};

    fn net(dtype: Dtype) -> Network<f32> {
        let mut n = Network::<f32>::mlp(&[2, 16, 16, 3], dtype, 5).unwrap();
        for (i, lens) in n.ifm_lens().into_iter().enumerate() {
            let _ = lens;
            n.thresholds.observe(DataTypeId::ifm(i as u32), -1.0, 4.0);
            let (lo, hi) = n.params()[i].iter().fold((0.0f64, 0.0f64), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
            n.thresholds.observe(DataTypeId::weight(i as u32), lo, hi);
        }
        n
    }

    #[test]
    fn sparse_path_matches_full_injection() {
        for dtype in [Dtype::Int4, Dtype::Int8, Dtype::Int16, Dtype::Fp32] {
            let n = net(dtype);
            let env = DramEnv::uniform(0.05, 9).unwrap().with_correction(Correction::Off);
            let prepared = env.prepare(&n).unwrap();
            let loader = Loader::new(&n, Some(&prepared));
            let clean = Loader::new(&n, None).weights(AccessKey::new(0, 0));
            let access = AccessKey::new(77, 3);
            let fast = loader.weights(access);
            for layer in 0..3 {
                let t = prepared.get(DataTypeId::weight(layer as u32));
                let values: Vec<f32> = clean[layer].iter().copied().collect();
                let scale = loader.weight_scales[layer];
                let tensor = if dtype.is_integer() {
                    let codes = values.iter().map(|&v| quantize_one(v.to_f64_lossy(), dtype, scale)).collect();
                    Tensor::from_codes(dtype, vec![values.len()], codes, scale).unwrap()
                } else {
                    Tensor::from_f32(vec![values.len()], values.clone()).unwrap()
                };
                let mut img = encode_bits(&tensor);
                inject_in_place(&mut img, t.base, &t.weak, &env.geometry, &t.model, access, None);
                let back = decode_bits(&img, dtype, &[values.len()], scale).unwrap();
                let full: Vec<f32> = back.to_f64_vec().into_iter().map(|v| v as f32).collect();
                let got: Vec<f32> = fast[layer].iter().copied().collect();
                assert_eq!(
                    full.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    "{dtype}"
                );
            }
        }
    }

    #[test]
    fn zero_ber_env_reads_clean_values() {
        let n = net(Dtype::Fp32);
        let env = DramEnv::uniform(0.0, 1).unwrap().with_correction(Correction::Off);
        let p = env.prepare(&n).unwrap();
        let a = Loader::new(&n, Some(&p)).weights(AccessKey::new(1, 0));
        let b = Loader::new(&n, None).weights(AccessKey::new(1, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn reliable_and_override_models() {
        let n = net(Dtype::Int8);
        let mut env = DramEnv::uniform(0.01, 1).unwrap();
        env.reliable.insert(DataTypeId::weight(1));
        env.ber_override.insert(DataTypeId::ifm(0), 0.2);
        assert_eq!(env.effective_model(DataTypeId::weight(1)).unwrap().expected_ber(0.5), 0.0);
        assert!((env.effective_model(DataTypeId::ifm(0)).unwrap().expected_ber(0.5) - 0.2).abs() < 1e-12);
        assert!((env.effective_model(DataTypeId::ifm(1)).unwrap().expected_ber(0.5) - 0.01).abs() < 1e-12);
        let p = env.prepare(&n).unwrap();
        assert_eq!(p.weak_cells(DataTypeId::weight(1)), 0);
        assert!(env.with_ber(0.6).is_err());
    }

    #[test]
    fn weak_maps_nest_across_ber() {
        let n = net(Dtype::Fp32);
        let env = DramEnv::uniform(0.01, 4).unwrap();
        let lo = env.with_ber(0.001).unwrap().prepare(&n).unwrap();
        let hi = env.with_ber(0.01).unwrap().prepare(&n).unwrap();
        let id = DataTypeId::weight(1);
        let small: BTreeSet<u64> = lo.get(id).weak.iter().copied().collect();
        let large: BTreeSet<u64> = hi.get(id).weak.iter().copied().collect();
        assert!(small.is_subset(&large));
        assert!(large.len() > small.len());
    }
}
