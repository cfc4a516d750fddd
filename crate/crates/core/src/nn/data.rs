use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Interleaved 2-D spiral arms, one per class.
    #[default]
    Spiral,
    /// 2-D Gaussian blobs on a circle.
    Blobs,
    /// 2-D bands along the first axis separated by gaps.
    Separable,
    /// `1×8×8` images of noisy bars; the class picks the orientation.
    Bars,
}

impl DatasetKind {
    pub fn input_len(self) -> usize {
        match self {
            DatasetKind::Bars => 64,
            _ => 2,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiral" => Ok(DatasetKind::Spiral),
            "blobs" => Ok(DatasetKind::Blobs),
            "separable" => Ok(DatasetKind::Separable),
            "bars" => Ok(DatasetKind::Bars),
            _ => Err(Error::InvalidArgument(format!("unknown dataset kind {s:?}"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Spiral => "spiral",
            DatasetKind::Blobs => "blobs",
            DatasetKind::Separable => "separable",
            DatasetKind::Bars => "bars",
        })
    }
}

/// Labeled samples split 80/20 into training and validation sets. Inputs
/// are stored row-major, `input_len` values per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub classes: usize,
    pub input_len: usize,
    pub seed: u64,
    pub train_x: Vec<f32>,
    pub train_y: Vec<u32>,
    pub val_x: Vec<f32>,
    pub val_y: Vec<u32>,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn val_len(&self) -> usize {
        self.val_y.len()
    }

    pub fn train_sample(&self, i: usize) -> &[f32] {
        &self.train_x[i * self.input_len..(i + 1) * self.input_len]
    }

    pub fn val_sample(&self, i: usize) -> &[f32] {
        &self.val_x[i * self.input_len..(i + 1) * self.input_len]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.classes >= 1
            && self.input_len >= 1
            && self.train_x.len() == self.train_y.len() * self.input_len
            && self.val_x.len() == self.val_y.len() * self.input_len
            && self.train_y.iter().chain(&self.val_y).all(|&y| (y as usize) < self.classes)
            && self.train_x.iter().chain(&self.val_x).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("dataset arrays are inconsistent".into()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }
}

/// Deterministic synthetic classification set with balanced classes.
pub fn make_synthetic_dataset(n: usize, classes: usize, kind: DatasetKind, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::InvalidArgument(format!("need n >= classes >= 1, got n={n}, classes={classes}")));
    }
    if kind == DatasetKind::Bars && classes > 8 {
        return Err(Error::InvalidArgument("bars data supports at most 8 classes".into()));
    }
    let rng = CounterRng::new(seed);
    let mut s = rng.stream(0);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let d = kind.input_len();
    let c = classes as f64;
    let mut samples: Vec<(Vec<f32>, u32)> = (0..n)
        .map(|i| {
            let label = i % classes;
            let l = label as f64;
            let x: Vec<f64> = match kind {
                DatasetKind::Spiral => {
                    let t = s.next_f64();
                    let r = 0.1 + 0.9 * t;
                    let theta = std::f64::consts::TAU * (l / c + 0.45 * t);
                    let noise = 0.03;
                    vec![
                        r * theta.cos() + noise * unit.sample(&mut s),
                        r * theta.sin() + noise * unit.sample(&mut s),
                    ]
                }
                DatasetKind::Blobs => {
                    let theta = std::f64::consts::TAU * l / c;
                    vec![theta.cos() + 0.15 * unit.sample(&mut s), theta.sin() + 0.15 * unit.sample(&mut s)]
                }
                DatasetKind::Separable => {
                    let width = 2.0 / c;
                    let lo = -1.0 + l * width + 0.1 * width;
                    vec![lo + 0.8 * width * s.next_f64(), 2.0 * s.next_f64() - 1.0]
                }
                DatasetKind::Bars => bars(label, &mut s, &unit),
            };
            (x.into_iter().map(|v| v as f32).collect(), label as u32)
        })
        .collect();
    samples.shuffle(&mut rng.stream(1));
    let n_train = n * 4 / 5;
    let mut ds = Dataset {
        kind,
        classes,
        input_len: d,
        seed,
        train_x: Vec::with_capacity(n_train * d),
        train_y: Vec::with_capacity(n_train),
        val_x: Vec::with_capacity((n - n_train) * d),
        val_y: Vec::with_capacity(n - n_train),
    };
    for (i, (x, y)) in samples.into_iter().enumerate() {
        if i < n_train {
            ds.train_x.extend(x);
            ds.train_y.push(y);
        } else {
            ds.val_x.extend(x);
            ds.val_y.push(y);
        }
    }
    Ok(ds)
}

fn bars(label: usize, s: &mut crate::rng::Stream, unit: &Normal<f64>) -> Vec<f64> {
    let mut img = vec![0.0; 64];
    let pos = 1 + (s.next_f64() * 6.0) as usize;
    for k in 0..8 {
        let (y, x) = match label % 4 {
            0 => (pos, k),
            1 => (k, pos),
            2 => (k, k),
            _ => (k, 7 - k),
        };
        img[y * 8 + x] = 1.0;
        // Classes 4..8 carry a second, parallel line.
        if label >= 4 {
            let (y2, x2) = match label % 4 {
                0 => ((pos + 3) % 8, k),
                1 => (k, (pos + 3) % 8),
                2 => (k, (k + 4) % 8),
                _ => (k, (11 - k) % 8),
            };
            img[y2 * 8 + x2] = 1.0;
        }
    }
    img.iter().map(|v| v + 0.1 * unit.sample(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_split() {
        let a = make_synthetic_dataset(4000, 4, DatasetKind::Spiral, 7).unwrap();
        let b = make_synthetic_dataset(4000, 4, DatasetKind::Spiral, 7).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.train_len(), 3200);
        assert_eq!(a.val_len(), 800);
        assert_ne!(a, make_synthetic_dataset(4000, 4, DatasetKind::Spiral, 8).unwrap());
        a.validate().unwrap();
        assert_eq!(Dataset::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(make_synthetic_dataset(3, 4, DatasetKind::Blobs, 0).is_err());
    }

    #[test]
    fn bars_have_image_shape() {
        let d = make_synthetic_dataset(100, 4, DatasetKind::Bars, 1).unwrap();
        assert_eq!(d.input_len, 64);
        assert_eq!(d.train_sample(0).len(), 64);
    }
}
