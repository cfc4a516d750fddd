use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Dtype;
use crate::rng::CounterRng;
use crate::scalar::Scalar;

use super::types::{DataTypeId, Thresholds};

/// One layer of a network. Feature maps are flat, channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// Valid (unpadded), stride-1 convolution over `in_channels × height × width`.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, height: usize, width: usize },
    Relu,
    /// 2×2 max pooling with stride 2 over `channels × height × width`.
    MaxPool { channels: usize, height: usize, width: usize },
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output length for input length `n`, if the layer accepts it.
    fn output_len(&self, n: usize) -> Option<usize> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (n == inputs).then_some(outputs),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, height, width } => {
                (n == in_channels * height * width && kernel >= 1 && kernel <= height && kernel <= width)
                    .then(|| out_channels * (height - kernel + 1) * (width - kernel + 1))
            }
            LayerSpec::Relu => Some(n),
            LayerSpec::MaxPool { channels, height, width } => {
                (n == channels * height * width && height >= 2 && width >= 2)
                    .then(|| channels * (height / 2) * (width / 2))
            }
        }
    }

    /// `(weight count, bias count)` of a parametric layer.
    fn param_shape(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs * outputs, outputs),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                (out_channels * in_channels * kernel * kernel, out_channels)
            }
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// Weights and bias of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros_like(&self) -> Self {
        Self { weights: vec![S::zero(); self.weights.len()], bias: vec![S::zero(); self.bias.len()] }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// A small feed-forward classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    layers: Vec<LayerSpec>,
    params: Vec<Params<S>>,
    /// Storage type of weights and feature maps during inference.
    pub dtype: Dtype,
    pub thresholds: Thresholds,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<S> {
    /// Input of every layer, after any load hook.
    inputs: Vec<Vec<S>>,
    /// Winning input index per output of every pooling layer.
    argmax: Vec<Vec<usize>>,
}

impl<S: Scalar> Network<S> {
    /// Builds a network with He-uniform weights and zero biases.
    pub fn new(layers: Vec<LayerSpec>, dtype: Dtype, seed: u64) -> Result<Self> {
        let mut n = match layers.first() {
            Some(LayerSpec::Dense { inputs, .. }) => *inputs,
            Some(LayerSpec::Conv2d { in_channels, height, width, .. }) => in_channels * height * width,
            _ => return Err(Error::Shape("a network must start with a parametric layer".into())),
        };
        for (i, l) in layers.iter().enumerate() {
            n = l.output_len(n).ok_or_else(|| Error::Shape(format!("layer {i} ({l:?}) does not accept {n} inputs")))?;
        }
        let parametric = layers.iter().filter(|l| l.is_parametric()).count();
        if parametric < 2 {
            return Err(Error::Shape("a network needs at least two parametric layers".into()));
        }
        if !layers.last().is_some_and(|l| l.is_parametric()) {
            return Err(Error::Shape("the last layer must produce logits".into()));
        }
        let rng = CounterRng::new(seed);
        let params = layers
            .iter()
            .filter(|l| l.is_parametric())
            .enumerate()
            .map(|(i, l)| {
                let (nw, nb) = l.param_shape();
                let limit = (6.0 / l.fan_in() as f64).sqrt();
                let mut s = rng.stream(i as u64);
                Params {
                    weights: (0..nw).map(|_| S::lit((2.0 * s.next_f64() - 1.0) * limit)).collect(),
                    bias: vec![S::zero(); nb],
                }
            })
            .collect();
        Ok(Self { layers, params, dtype, thresholds: Thresholds::default() })
    }

    /// Multilayer perceptron with ReLU between dense layers, e.g. `[2, 64, 64, 4]`.
    pub fn mlp(widths: &[usize], dtype: Dtype, seed: u64) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense { inputs: w[0], outputs: w[1] });
        }
        Self::new(layers, dtype, seed)
    }

    /// `1×8×8` input, 3×3 convolution to 8 channels, ReLU, 2×2 max pool, dense head.
    pub fn small_conv(classes: usize, dtype: Dtype, seed: u64) -> Result<Self> {
        Self::new(
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 8, kernel: 3, height: 8, width: 8 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { channels: 8, height: 6, width: 6 },
                LayerSpec::Dense { inputs: 72, outputs: classes },
            ],
            dtype,
            seed,
        )
    }

    /// Rebuilds a network from layer specs and parameters.
    pub fn from_parts(layers: Vec<LayerSpec>, params: Vec<Params<S>>, dtype: Dtype, thresholds: Thresholds) -> Result<Self> {
        let mut net = Self::new(layers, dtype, 0)?;
        if params.len() != net.params.len()
            || params.iter().zip(&net.params).any(|(a, b)| a.weights.len() != b.weights.len() || a.bias.len() != b.bias.len())
        {
            return Err(Error::Shape("parameter tensors do not match the layer specs".into()));
        }
        net.params = params;
        net.thresholds = thresholds;
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Params<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Params<S>] {
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        match self.layers[0] {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, height, width, .. } => in_channels * height * width,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) => *outputs,
            Some(&LayerSpec::Conv2d { out_channels, kernel, height, width, .. }) => {
                out_channels * (height - kernel + 1) * (width - kernel + 1)
            }
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn parametric_layers(&self) -> usize {
        self.params.len()
    }

    /// Input length of every parametric layer.
    pub fn ifm_lens(&self) -> Vec<usize> {
        let mut n = self.input_len();
        let mut out = Vec::new();
        for l in &self.layers {
            if l.is_parametric() {
                out.push(n);
            }
            n = l.output_len(n).expect("validated at construction");
        }
        out
    }

    /// All data types, weights first, shallow to deep.
    pub fn data_types(&self) -> Vec<DataTypeId> {
        let n = self.params.len() as u32;
        (0..n).map(DataTypeId::weight).chain((0..n).map(DataTypeId::ifm)).collect()
    }

    /// Element count of a data type.
    pub fn type_len(&self, id: DataTypeId) -> Result<usize> {
        let i = id.layer as usize;
        if i >= self.params.len() {
            return Err(Error::InvalidArgument(format!("network has no data type {id}")));
        }
        Ok(match id.kind {
            super::types::DataKind::Weight => self.params[i].len(),
            super::types::DataKind::Ifm => self.ifm_lens()[i],
        })
    }

    /// Storage footprint of a data type in bytes.
    pub fn type_bytes(&self, id: DataTypeId) -> Result<u64> {
        Ok((self.type_len(id)? as u64 * u64::from(self.dtype.bits())).div_ceil(8))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Params::len).sum()
    }

    /// The same network with another scalar type.
    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Params {
                    weights: p.weights.iter().map(|w| T::lit(w.to_f64_lossy())).collect(),
                    bias: p.bias.iter().map(|w| T::lit(w.to_f64_lossy())).collect(),
                })
                .collect(),
            dtype: self.dtype,
            thresholds: self.thresholds.clone(),
        }
    }

    /// Forward pass of one sample with the given parameters. `load` sees the
    /// input of every parametric layer (its IFM) before use and may change it.
    pub fn forward_with(
        &self,
        params: &[Params<S>],
        x: &[S],
        load: &mut dyn FnMut(usize, &mut [S]),
        mut trace: Option<&mut ForwardTrace<S>>,
    ) -> Vec<S> {
        if let Some(t) = trace.as_deref_mut() {
            t.inputs.clear();
            t.argmax.clear();
        }
        let mut cur = x.to_vec();
        let mut p = 0;
        for l in &self.layers {
            if l.is_parametric() {
                load(p, &mut cur);
            }
            let next = match *l {
                LayerSpec::Dense { inputs, outputs } => {
                    let w = &params[p].weights;
                    let b = &params[p].bias;
                    (0..outputs)
                        .map(|o| {
                            let row = &w[o * inputs..(o + 1) * inputs];
                            row.iter().zip(&cur).fold(b[o], |acc, (&a, &c)| acc + a * c)
                        })
                        .collect()
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, height, width } => {
                    conv_forward(&params[p], &cur, in_channels, out_channels, kernel, height, width)
                }
                // NaN passes through.
                LayerSpec::Relu => cur.iter().map(|&v| if v < S::zero() { S::zero() } else { v }).collect(),
                LayerSpec::MaxPool { channels, height, width } => {
                    let (out, arg) = pool_forward(&cur, channels, height, width);
                    if let Some(t) = trace.as_deref_mut() {
                        t.argmax.push(arg);
                    }
                    out
                }
            };
            if l.is_parametric() {
                p += 1;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
        }
        cur
    }

    /// Exact forward pass with the network's own parameters.
    pub fn forward(&self, x: &[S]) -> Vec<S> {
        self.forward_with(&self.params, x, &mut |_, _| {}, None)
    }

    /// Accumulates parameter gradients of one sample into `grads`, given
    /// the loss gradient with respect to the logits.
    pub fn backward(&self, params: &[Params<S>], trace: &ForwardTrace<S>, dlogits: &[S], grads: &mut [Params<S>]) {
        let mut delta = dlogits.to_vec();
        let mut p = self.params.len();
        let mut pool = trace.argmax.len();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            delta = match *l {
                LayerSpec::Dense { inputs, outputs } => {
                    p -= 1;
                    let g = &mut grads[p];
                    let w = &params[p].weights;
                    let mut back = vec![S::zero(); inputs];
                    for o in 0..outputs {
                        let d = delta[o];
                        g.bias[o] += d;
                        let row = o * inputs;
                        for k in 0..inputs {
                            g.weights[row + k] += d * input[k];
                            back[k] += d * w[row + k];
                        }
                    }
                    back
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, height, width } => {
                    p -= 1;
                    conv_backward(&params[p], &mut grads[p], input, &delta, in_channels, out_channels, kernel, height, width)
                }
                LayerSpec::Relu => {
                    delta.iter().zip(input).map(|(&d, &x)| if x > S::zero() { d } else { S::zero() }).collect()
                }
                LayerSpec::MaxPool { .. } => {
                    pool -= 1;
                    let mut back = vec![S::zero(); input.len()];
                    for (&d, &j) in delta.iter().zip(&trace.argmax[pool]) {
                        back[j] += d;
                    }
                    back
                }
            };
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<S: Scalar>(
    p: &Params<S>,
    x: &[S],
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Vec<S> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![S::zero(); cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = p.bias[o];
                for c in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += p.weights[((o * cin + c) * k + dy) * k + dx] * x[(c * h + y + dy) * w + xx + dx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    p: &Params<S>,
    g: &mut Params<S>,
    x: &[S],
    delta: &[S],
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Vec<S> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut back = vec![S::zero(); x.len()];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let d = delta[(o * oh + y) * ow + xx];
                g.bias[o] += d;
                for c in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let wi = ((o * cin + c) * k + dy) * k + dx;
                            let xi = (c * h + y + dy) * w + xx + dx;
                            g.weights[wi] += d * x[xi];
                            back[xi] += d * p.weights[wi];
                        }
                    }
                }
            }
        }
    }
    back
}

fn pool_forward<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> (Vec<S>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (ch * h + 2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                    // NaN never wins, so a NaN input only survives if all four are NaN.
                    if x[j] > x[best] || x[best].is_nan() {
                        best = j;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Softmax cross-entropy of one sample: `(loss, ∂loss/∂logits)`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], label: usize) -> (S, Vec<S>) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    let loss = sum.ln() - (logits[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / sum - if i == label { S::one() } else { S::zero() })
        .collect();
    (loss, grad)
}

/// Index of the largest logit; NaN logits never win and an all-NaN
/// output predicts class 0.
pub fn argmax<S: Scalar>(logits: &[S]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] || (logits[best].is_nan() && !z.is_nan()) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_compose() {
        let net = Network::<f32>::mlp(&[2, 64, 64, 4], Dtype::Fp32, 1).unwrap();
        assert_eq!(net.parametric_layers(), 3);
        assert_eq!(net.data_types().len(), 6);
        assert_eq!(net.ifm_lens(), vec![2, 64, 64]);
        assert_eq!(net.param_count(), 192 + 4160 + 260);
        assert_eq!(net.forward(&[0.1, -0.2]).len(), 4);
        let conv = Network::<f32>::small_conv(3, Dtype::Int8, 1).unwrap();
        assert_eq!(conv.ifm_lens(), vec![64, 72]);
        assert_eq!(conv.type_bytes(DataTypeId::weight(0)).unwrap(), 80);
        assert!(Network::<f32>::mlp(&[2, 4], Dtype::Fp32, 1).is_err());
        assert!(Network::<f32>::new(
            vec![LayerSpec::Dense { inputs: 2, outputs: 3 }, LayerSpec::Dense { inputs: 4, outputs: 2 }],
            Dtype::Fp32,
            0
        )
        .is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::<f32>::mlp(&[2, 8, 2], Dtype::Fp32, 3).unwrap();
        let b = Network::<f32>::mlp(&[2, 8, 2], Dtype::Fp32, 3).unwrap();
        let c = Network::<f32>::mlp(&[2, 8, 2], Dtype::Fp32, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn softmax_gradient_sums_to_zero() {
        let (loss, g) = softmax_cross_entropy(&[1.0f64, 2.0, 3.0], 2);
        assert!((loss - 0.40760596444438).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn argmax_ignores_nan() {
        assert_eq!(argmax(&[f32::NAN, 1.0, 0.5]), 1);
        assert_eq!(argmax(&[f32::NAN, f32::NAN]), 0);
        assert_eq!(argmax(&[0.0f32, f32::INFINITY]), 1);
    }
}
