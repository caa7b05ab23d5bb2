//! Feed-forward MLP with inverted dropout and hand-written backpropagation.
//!
//! Weights are stored `fan_in x fan_out` so a batch forward pass is
//! `X · W + b`. The flat parameter vector lists, layer by layer, the weight
//! matrix in row-major order followed by the bias.

pub mod checkpoint;

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, Metadata, TensorEntry, FORMAT_VERSION};

/// Network shape. The default hidden stack is 128-128-64-64-32-32-16-16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
}

pub const DEFAULT_HIDDEN: [usize; 8] = [128, 128, 64, 64, 32, 32, 16, 16];

impl MlpSpec {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths: DEFAULT_HIDDEN.to_vec(),
            output_dim,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!("all layer widths must be >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input side first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_widths);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Number of dense (parameterized) layers.
    pub fn layer_count(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All trainable parameters of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Dense>,
}

/// Flat-vector ranges of one layer's weights and bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Dense {
                    weights: Array2::zeros((i, o)),
                    bias: Array1::zeros(o),
                })
                .collect(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slots(&self) -> Vec<LayerSlots> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = at..at + l.weights.len();
                let b = w.end..w.end + l.bias.len();
                at = b.end;
                LayerSlots { weights: w, bias: b }
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn unflatten(spec: &MlpSpec, theta: &[f64]) -> Result<Self> {
        if theta.len() != spec.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                theta.len()
            )));
        }
        let mut at = 0;
        let mut layers = Vec::new();
        for (i, o) in spec.layer_dims() {
            let weights = Array2::from_shape_vec((i, o), theta[at..at + i * o].to_vec())
                .map_err(|e| Error::Dimension(e.to_string()))?;
            at += i * o;
            let bias = Array1::from(theta[at..at + o].to_vec());
            at += o;
            layers.push(Dense { weights, bias });
        }
        Ok(Self { layers })
    }

    /// Hash of every parameter bit pattern; used to detect stale traces.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weights.iter().chain(l.bias.iter()) {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
                h ^= h >> 29;
            }
        }
        h
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        let expected = self.layers.first().map_or(0, |l| l.weights.nrows());
        if x.ncols() != expected {
            return Err(Error::Dimension(format!(
                "input has {} columns, network expects {expected}",
                x.ncols()
            )));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::zeros(spec);
    for layer in &mut params.layers {
        let limit = (6.0 / layer.weights.nrows() as f64).sqrt();
        layer
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-limit..limit));
    }
    params
}

/// A batch of flattened inputs and targets, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Independent dropout mask per sample and unit.
    Train { seed: u64 },
    /// One dropout mask per unit, shared by every sample of the batch.
    /// Two forward passes with the same seed see the same thinned network.
    TrainShared { seed: u64 },
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    /// Pre-activations of every dense layer (the last one equals `output`).
    pub pre: Vec<Array2<f64>>,
    /// Hidden-layer outputs after rectification and dropout.
    pub hidden: Vec<Array2<f64>>,
    /// Dropout scale factors (0 or 1/(1-p)) per hidden layer, when applied.
    pub masks: Vec<Option<Array2<f64>>>,
    pub output: Array2<f64>,
    fingerprint: u64,
}

impl ForwardTrace {
    /// Recomputes the output from the recorded last hidden activation.
    pub fn replay(&self, params: &ParamSet) -> Array2<f64> {
        let last = params.layers.last().expect("network has an output layer");
        let prev = self.hidden.last().unwrap_or(&self.input);
        prev.dot(&last.weights) + &last.bias
    }

    /// Activations of the final hidden layer.
    pub fn embedding(&self) -> Option<&Array2<f64>> {
        self.hidden.last()
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            0.0
        }
    })
}

pub fn forward(
    params: &ParamSet,
    x: ArrayView2<f64>,
    mode: Mode,
    dropout_rate: f64,
) -> Result<ForwardTrace> {
    params.check_input(&x)?;
    let n = x.nrows();
    let mut rng = match mode {
        Mode::Train { seed } | Mode::TrainShared { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Infer => None,
    };
    let n_hidden = params.layers.len() - 1;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut hidden = Vec::with_capacity(n_hidden);
    let mut masks = Vec::with_capacity(n_hidden);
    let input = x.to_owned();
    for (l, layer) in params.layers.iter().enumerate() {
        let prev = if l == 0 { &input } else { &hidden[l - 1] };
        let z = prev.dot(&layer.weights) + &layer.bias;
        if l == n_hidden {
            pre.push(z);
            break;
        }
        let mut h = z.mapv(|v| v.max(0.0));
        let width = h.ncols();
        let mask = match (&mut rng, mode) {
            (Some(r), Mode::Train { .. }) if dropout_rate > 0.0 => {
                Some(dropout_mask(r, n, width, dropout_rate))
            }
            (Some(r), Mode::TrainShared { .. }) if dropout_rate > 0.0 => {
                let row = dropout_mask(r, 1, width, dropout_rate);
                Some(row.broadcast((n, width)).unwrap().to_owned())
            }
            _ => None,
        };
        if let Some(m) = &mask {
            h *= m;
        }
        pre.push(z);
        hidden.push(h);
        masks.push(mask);
    }
    let output = pre.last().unwrap().clone();
    Ok(ForwardTrace {
        input,
        pre,
        hidden,
        masks,
        output,
        fingerprint: params.fingerprint(),
    })
}

/// Mean squared error over the outputs of each sample.
pub fn per_example_loss(trace: &ForwardTrace, y: ArrayView2<f64>) -> Result<Vec<f64>> {
    if trace.output.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "predictions {:?} vs targets {:?}",
            trace.output.dim(),
            y.dim()
        )));
    }
    let k = y.ncols() as f64;
    Ok(trace
        .output
        .outer_iter()
        .zip(y.outer_iter())
        .map(|(p, t)| p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / k)
        .collect())
}

fn check_fresh(params: &ParamSet, trace: &ForwardTrace) -> Result<()> {
    if params.fingerprint() != trace.fingerprint {
        return Err(Error::StaleTrace);
    }
    Ok(())
}

/// Derivative of each per-example loss with respect to every layer's
/// pre-activation, row `i` belonging to sample `i`.
fn backprop(params: &ParamSet, trace: &ForwardTrace, y: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    check_fresh(params, trace)?;
    if trace.output.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "predictions {:?} vs targets {:?}",
            trace.output.dim(),
            y.dim()
        )));
    }
    let scale = 2.0 / y.ncols() as f64;
    let mut delta = (&trace.output - &y) * scale;
    let n_layers = params.layers.len();
    let mut deltas = vec![Array2::zeros((0, 0)); n_layers];
    for l in (0..n_layers).rev() {
        if l > 0 {
            let mut back = delta.dot(&params.layers[l].weights.t());
            let z = &trace.pre[l - 1];
            match &trace.masks[l - 1] {
                Some(m) => Zip::from(&mut back).and(z).and(m).for_each(|d, &z, &m| {
                    *d = if z > 0.0 { *d * m } else { 0.0 };
                }),
                None => Zip::from(&mut back).and(z).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }),
            }
            deltas[l] = std::mem::replace(&mut delta, back);
        } else {
            deltas[0] = std::mem::take(&mut delta);
        }
    }
    Ok(deltas)
}

fn layer_input<'a>(trace: &'a ForwardTrace, l: usize) -> &'a Array2<f64> {
    if l == 0 {
        &trace.input
    } else {
        &trace.hidden[l - 1]
    }
}

/// Gradient of every per-example loss, one row per sample, `|θ|` columns.
pub fn per_example_grads(
    params: &ParamSet,
    trace: &ForwardTrace,
    y: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let deltas = backprop(params, trace, y)?;
    let n = y.nrows();
    let slots = params.slots();
    let mut grads = Array2::zeros((n, params.len()));
    for (l, slot) in slots.iter().enumerate() {
        let a = layer_input(trace, l);
        let d = &deltas[l];
        for i in 0..n {
            let mut row = grads.row_mut(i);
            let out = d.ncols();
            for (r, &av) in a.row(i).iter().enumerate() {
                let base = slot.weights.start + r * out;
                for (c, &dv) in d.row(i).iter().enumerate() {
                    row[base + c] = av * dv;
                }
            }
            for (c, &dv) in d.row(i).iter().enumerate() {
                row[slot.bias.start + c] = dv;
            }
        }
    }
    Ok(grads)
}

/// Gradient of `(1/n) Σ c_i ℓ_i` without materializing per-example gradients.
pub fn weighted_grad(
    params: &ParamSet,
    trace: &ForwardTrace,
    y: ArrayView2<f64>,
    coeffs: &[f64],
) -> Result<Vec<f64>> {
    if coeffs.len() != y.nrows() {
        return Err(Error::Dimension(format!(
            "{} weights for {} samples",
            coeffs.len(),
            y.nrows()
        )));
    }
    let mut deltas = backprop(params, trace, y)?;
    let n = y.nrows() as f64;
    let mut out = Vec::with_capacity(params.len());
    for (l, d) in deltas.iter_mut().enumerate() {
        for (mut row, &c) in d.outer_iter_mut().zip(coeffs) {
            row *= c / n;
        }
        let gw = layer_input(trace, l).t().dot(d);
        out.extend(gw.iter());
        out.extend(d.sum_axis(Axis(0)).iter());
    }
    Ok(out)
}

/// Gradient of the unweighted batch-mean loss.
pub fn mean_grad(params: &ParamSet, trace: &ForwardTrace, y: ArrayView2<f64>) -> Result<Vec<f64>> {
    weighted_grad(params, trace, y, &vec![1.0; y.nrows()])
}

/// `⟨direction, ∇ℓ_i⟩` for every sample, without materializing `∇ℓ_i`.
pub fn per_example_dots(
    params: &ParamSet,
    trace: &ForwardTrace,
    y: ArrayView2<f64>,
    direction: &[f64],
) -> Result<Vec<f64>> {
    if direction.len() != params.len() {
        return Err(Error::Dimension(format!(
            "direction has {} entries, network has {}",
            direction.len(),
            params.len()
        )));
    }
    let deltas = backprop(params, trace, y)?;
    let mut dots = Array1::<f64>::zeros(y.nrows());
    for ((l, slot), layer) in params.slots().iter().enumerate().zip(&params.layers) {
        let dir_w = ArrayView2::from_shape(layer.weights.dim(), &direction[slot.weights.clone()])
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let dir_b = ndarray::ArrayView1::from(&direction[slot.bias.clone()]);
        let projected = layer_input(trace, l).dot(&dir_w) + &dir_b;
        dots += &(projected * &deltas[l]).sum_axis(Axis(1));
    }
    Ok(dots.to_vec())
}

/// Which dense layers may change during training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub layers: Vec<bool>,
}

impl TrainableMask {
    pub fn all(layer_count: usize) -> Self {
        Self {
            layers: vec![true; layer_count],
        }
    }

    pub fn is_trainable(&self, layer: usize) -> bool {
        self.layers[layer]
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().filter(|&&t| t).count()
    }

    /// Zeroes every entry of `v` that belongs to a frozen layer.
    pub fn apply(&self, params: &ParamSet, v: &mut [f64]) {
        for (slot, &t) in params.slots().iter().zip(&self.layers) {
            if !t {
                v[slot.weights.clone()].fill(0.0);
                v[slot.bias.clone()].fill(0.0);
            }
        }
    }
}

/// Gradient of `λ Σ w²` over trainable weight entries; biases and frozen
/// layers get exactly zero.
pub fn l2_penalty_grad(params: &ParamSet, lambda: f64, mask: &TrainableMask) -> Vec<f64> {
    let mut out = vec![0.0; params.len()];
    if lambda == 0.0 {
        return out;
    }
    for ((slot, layer), &t) in params.slots().iter().zip(&params.layers).zip(&mask.layers) {
        if t {
            out[slot.weights.clone()]
                .iter_mut()
                .zip(layer.weights.iter())
                .for_each(|(g, &w)| *g = 2.0 * lambda * w);
        }
    }
    out
}

/// `θ ← θ − lr · g` on trainable layers only.
pub fn apply_update(params: &mut ParamSet, grad: &[f64], lr: f64, mask: &TrainableMask) {
    let slots = params.slots();
    for ((slot, layer), &t) in slots.iter().zip(params.layers.iter_mut()).zip(&mask.layers) {
        if !t {
            continue;
        }
        layer
            .weights
            .iter_mut()
            .zip(&grad[slot.weights.clone()])
            .for_each(|(w, g)| *w -= lr * g);
        layer
            .bias
            .iter_mut()
            .zip(&grad[slot.bias.clone()])
            .for_each(|(b, g)| *b -= lr * g);
    }
}

/// Final hidden-layer activations in inference mode.
pub fn hidden_embeddings(params: &ParamSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let trace = forward(params, x, Mode::Infer, 0.0)?;
    trace
        .hidden
        .last()
        .cloned()
        .ok_or_else(|| Error::Dimension("network has no hidden layer".into()))
}

/// Inference-mode predictions.
pub fn predict(params: &ParamSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(forward(params, x, Mode::Infer, 0.0)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_spec(hidden: Vec<usize>, dropout: f64) -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            hidden_widths: hidden,
            output_dim: 2,
            dropout_rate: dropout,
        }
    }

    fn random_batch(n: usize, in_dim: usize, out_dim: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            x: Array2::from_shape_simple_fn((n, in_dim), || rng.gen_range(-1.0..1.0)),
            y: Array2::from_shape_simple_fn((n, out_dim), || rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = toy_spec(vec![4, 3], 0.0);
        assert_eq!(init_params(&spec, 7), init_params(&spec, 7));
        assert_ne!(init_params(&spec, 7), init_params(&spec, 8));
    }

    #[test]
    fn init_shapes_for_single_unit() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![1],
            output_dim: 1,
            dropout_rate: 0.0,
        };
        let p = init_params(&spec, 0);
        assert_eq!(p.layers[0].weights.dim(), (1, 1));
        assert_eq!(p.layers[0].bias, array![0.0]);
        assert_eq!(p.layers[1].weights.dim(), (1, 1));
        assert_eq!(p.len(), 4);
    }

    #[test]
    fn default_spec_has_nine_dense_layers() {
        let spec = MlpSpec::new(72 * 3, 12);
        assert_eq!(spec.layer_count(), 9);
        assert_eq!(*spec.hidden_widths.last().unwrap(), 16);
    }

    #[test]
    fn zero_params_predict_zero() {
        let spec = toy_spec(vec![4], 0.0);
        let p = ParamSet::zeros(&spec);
        let b = random_batch(5, 3, 2, 1);
        let t = forward(&p, b.x.view(), Mode::Infer, 0.0).unwrap();
        assert!(t.output.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_dropout_train_equals_infer() {
        let spec = toy_spec(vec![5, 4], 0.0);
        let p = init_params(&spec, 3);
        let b = random_batch(6, 3, 2, 2);
        let a = forward(&p, b.x.view(), Mode::Train { seed: 9 }, 0.0).unwrap();
        let c = forward(&p, b.x.view(), Mode::Infer, 0.0).unwrap();
        assert_eq!(a.output, c.output);
    }

    #[test]
    fn hand_computed_single_unit_forward() {
        // h = relu(2*1 - 0.5) = 1.5 ; y = -3*1.5 + 0.25 = -4.25
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![1],
            output_dim: 1,
            dropout_rate: 0.0,
        };
        let mut p = ParamSet::zeros(&spec);
        p.layers[0].weights[[0, 0]] = 2.0;
        p.layers[0].bias[0] = -0.5;
        p.layers[1].weights[[0, 0]] = -3.0;
        p.layers[1].bias[0] = 0.25;
        let t = forward(&p, array![[1.0]].view(), Mode::Infer, 0.0).unwrap();
        assert_eq!(t.output[[0, 0]], -4.25);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let p = init_params(&toy_spec(vec![2], 0.0), 0);
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            forward(&p, x.view(), Mode::Infer, 0.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn replay_is_bit_exact() {
        let spec = toy_spec(vec![5, 4], 0.2);
        let p = init_params(&spec, 3);
        let b = random_batch(6, 3, 2, 2);
        let t = forward(&p, b.x.view(), Mode::Train { seed: 4 }, 0.2).unwrap();
        assert_eq!(t.replay(&p), t.output);
    }

    #[test]
    fn loss_values() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![],
            output_dim: 2,
            dropout_rate: 0.0,
        };
        let p = ParamSet::zeros(&spec);
        let t = forward(&p, array![[1.0]].view(), Mode::Infer, 0.0).unwrap();
        assert_eq!(per_example_loss(&t, array![[1.0, 1.0]].view()).unwrap(), vec![1.0]);
        assert_eq!(per_example_loss(&t, array![[0.0, 0.0]].view()).unwrap(), vec![0.0]);
    }

    #[test]
    fn loss_matches_brute_force() {
        let spec = toy_spec(vec![4], 0.0);
        let p = init_params(&spec, 11);
        let b = random_batch(7, 3, 2, 12);
        let t = forward(&p, b.x.view(), Mode::Infer, 0.0).unwrap();
        let got = per_example_loss(&t, b.y.view()).unwrap();
        for i in 0..7 {
            let mut s = 0.0;
            for k in 0..2 {
                let e = t.output[[i, k]] - b.y[[i, k]];
                s += e * e;
            }
            assert!((got[i] - s / 2.0).abs() <= 1e-15);
        }
    }

    fn loss_of(spec: &MlpSpec, theta: &[f64], x: &Array2<f64>, y: &Array2<f64>, i: usize, trace: &ForwardTrace) -> f64 {
        // replay the recorded masks so the finite difference sees the same network
        let p = ParamSet::unflatten(spec, theta).unwrap();
        let mut a = x.row(i).insert_axis(Axis(0)).to_owned();
        for (l, layer) in p.layers.iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            if l + 1 == p.layers.len() {
                a = z;
            } else {
                a = z.mapv(|v| v.max(0.0));
                if let Some(m) = &trace.masks[l] {
                    a *= &m.row(i);
                }
            }
        }
        a.iter().zip(y.row(i)).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.ncols() as f64
    }

    #[test]
    fn per_example_grads_match_finite_differences() {
        let spec = toy_spec(vec![5, 4], 0.2);
        let mut p = init_params(&spec, 21);
        // keep pre-activations off the ReLU kink at exactly zero
        p.layers.iter_mut().for_each(|l| l.bias.fill(0.05));
        let b = random_batch(4, 3, 2, 22);
        let t = forward(&p, b.x.view(), Mode::Train { seed: 5 }, 0.2).unwrap();
        let g = per_example_grads(&p, &t, b.y.view()).unwrap();
        let theta = p.flatten();
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..theta.len() {
                let mut tp = theta.clone();
                tp[j] += h;
                let mut tm = theta.clone();
                tm[j] -= h;
                let fd = (loss_of(&spec, &tp, &b.x, &b.y, i, &t) - loss_of(&spec, &tm, &b.x, &b.y, i, &t)) / (2.0 * h);
                let err = (fd - g[[i, j]]).abs() / fd.abs().max(g[[i, j]].abs()).max(1e-6);
                assert!(err <= 1e-5, "sample {i} param {j}: fd={fd} analytic={}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn perfect_linear_fit_has_zero_gradient() {
        let spec = MlpSpec {
            input_dim: 2,
            hidden_widths: vec![],
            output_dim: 1,
            dropout_rate: 0.0,
        };
        let mut p = ParamSet::zeros(&spec);
        p.layers[0].weights = array![[1.5], [-2.0]];
        p.layers[0].bias = array![0.5];
        let x = array![[1.0, 2.0], [0.0, -1.0]];
        let y = x.dot(&p.layers[0].weights) + &p.layers[0].bias;
        let t = forward(&p, x.view(), Mode::Infer, 0.0).unwrap();
        let g = per_example_grads(&p, &t, y.view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_of_per_example_grads_is_batch_grad() {
        let spec = toy_spec(vec![6, 3], 0.1);
        let p = init_params(&spec, 31);
        let b = random_batch(9, 3, 2, 32);
        let t = forward(&p, b.x.view(), Mode::Train { seed: 1 }, 0.1).unwrap();
        let g = per_example_grads(&p, &t, b.y.view()).unwrap();
        let mean = g.mean_axis(Axis(0)).unwrap();
        let batch = mean_grad(&p, &t, b.y.view()).unwrap();
        for (a, b) in mean.iter().zip(&batch) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dots_match_materialized_grads() {
        let spec = toy_spec(vec![6, 3], 0.1);
        let p = init_params(&spec, 41);
        let b = random_batch(5, 3, 2, 42);
        let t = forward(&p, b.x.view(), Mode::TrainShared { seed: 2 }, 0.1).unwrap();
        let g = per_example_grads(&p, &t, b.y.view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dots = per_example_dots(&p, &t, b.y.view(), &dir).unwrap();
        for i in 0..5 {
            let expect: f64 = g.row(i).iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((dots[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn stale_trace_detected() {
        let spec = toy_spec(vec![3], 0.0);
        let mut p = init_params(&spec, 0);
        let b = random_batch(2, 3, 2, 0);
        let t = forward(&p, b.x.view(), Mode::Infer, 0.0).unwrap();
        p.layers[0].weights[[0, 0]] += 1.0;
        assert!(matches!(
            per_example_grads(&p, &t, b.y.view()),
            Err(Error::StaleTrace)
        ));
    }

    #[test]
    fn l2_penalty_cases() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![1],
            output_dim: 1,
            dropout_rate: 0.0,
        };
        let mut p = ParamSet::zeros(&spec);
        p.layers[0].weights[[0, 0]] = 3.0;
        p.layers[0].bias[0] = 4.0;
        p.layers[1].weights[[0, 0]] = 5.0;
        let all = TrainableMask::all(2);
        assert_eq!(l2_penalty_grad(&p, 0.0, &all), vec![0.0; 4]);
        assert_eq!(l2_penalty_grad(&p, 0.5, &all), vec![3.0, 0.0, 5.0, 0.0]);
        let frozen = TrainableMask {
            layers: vec![false, true],
        };
        assert_eq!(l2_penalty_grad(&p, 0.5, &frozen), vec![0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn embeddings_have_last_hidden_width() {
        let spec = MlpSpec::new(6, 2);
        let p = init_params(&spec, 0);
        let x = Array2::from_elem((3, 6), 0.5);
        let e = hidden_embeddings(&p, x.view()).unwrap();
        assert_eq!(e.dim(), (3, 16));
        let t = forward(&p, x.view(), Mode::Infer, 0.0).unwrap();
        assert_eq!(&e, t.embedding().unwrap());

        let z = ParamSet::zeros(&spec);
        let e0 = hidden_embeddings(&z, Array2::zeros((2, 6)).view()).unwrap();
        assert!(e0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_expectation_matches_inference() {
        let spec = MlpSpec {
            input_dim: 2,
            hidden_widths: vec![3],
            output_dim: 1,
            dropout_rate: 0.2,
        };
        let mut p = init_params(&spec, 5);
        p.layers[0].bias = array![0.5, 0.5, 0.5];
        let x = array![[0.3, 0.7]];
        let infer = forward(&p, x.view(), Mode::Infer, 0.2).unwrap();
        let reps = 20_000;
        let mut acc = Array1::<f64>::zeros(3);
        for s in 0..reps {
            let t = forward(&p, x.view(), Mode::Train { seed: s }, 0.2).unwrap();
            acc += &t.hidden[0].row(0);
        }
        acc /= reps as f64;
        for (a, b) in acc.iter().zip(infer.hidden[0].row(0)) {
            assert!((a - b).abs() <= 0.01 * b.abs());
        }
    }

    #[test]
    fn shared_mode_uses_one_mask_per_unit() {
        let spec = toy_spec(vec![8], 0.5);
        let p = init_params(&spec, 0);
        let b = random_batch(4, 3, 2, 0);
        let t = forward(&p, b.x.view(), Mode::TrainShared { seed: 3 }, 0.5).unwrap();
        let m = t.masks[0].as_ref().unwrap();
        for i in 1..4 {
            assert_eq!(m.row(i), m.row(0));
        }
        let other = random_batch(2, 3, 2, 1);
        let t2 = forward(&p, other.x.view(), Mode::TrainShared { seed: 3 }, 0.5).unwrap();
        assert_eq!(t2.masks[0].as_ref().unwrap().row(0), m.row(0));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_identity(seed in 0u64..1000, h1 in 1usize..6, h2 in 1usize..6) {
            let spec = toy_spec(vec![h1, h2], 0.0);
            let p = init_params(&spec, seed);
            let back = ParamSet::unflatten(&spec, &p.flatten()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
