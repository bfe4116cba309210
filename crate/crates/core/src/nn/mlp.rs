//! Dense rectifier networks with hand-written reverse mode.
//!
//! Weights are stored `in x out` so a batch (one sample per row) propagates
//! as `H = X W + b`. Hidden layers use a rectifier and the last layer is
//! linear. Inputs are standardized with a per-input mean/scale before the
//! first layer; outputs are mapped back through a per-output mean/scale.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point type a network can be evaluated in.
pub trait Real:
    ndarray::LinalgScalar + ndarray::ScalarOperand + num_traits::Float + Send + Sync + std::fmt::Debug + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Affine standardization `z = (v - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Column statistics of `rows`; zero-variance columns keep scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let width = rows[0].len();
        let m = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for r in rows {
            for (a, v) in mean.iter_mut().zip(r) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; width];
        for r in rows {
            for ((s, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / m).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Layer<F> {
    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

/// A fully-connected network with input and output normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<F> {
    pub layers: Vec<Layer<F>>,
    pub input_norm: Normalization,
    pub target_norm: Normalization,
}

/// Per-layer parameter gradients, same shapes as the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(model: &MlpModel<F>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * s);
            l.bias.mapv_inplace(|v| v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    /// Input to each layer (the first entry is the normalized input).
    inputs: Vec<Array2<F>>,
    /// Raw network output, before de-normalization.
    pub output: Array2<F>,
}

impl<F: Real> MlpModel<F> {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::argument("a network needs at least two positive widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                let weight = Array2::from_shape_fn((w[0], w[1]), |_| F::of(rng.random_range(-limit..limit)));
                Layer {
                    weight,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            input_norm: Normalization::identity(widths[0]),
            target_norm: Normalization::identity(*widths.last().unwrap()),
        })
    }

    pub fn from_layers(layers: Vec<Layer<F>>, input_norm: Normalization, target_norm: Normalization) -> Result<Self> {
        let model = Self {
            layers,
            input_norm,
            target_norm,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::argument("network has no layers"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::argument(format!("layer {i} output does not match layer {} input", i + 1)));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::argument("bias width does not match layer output"));
            }
        }
        if self.input_norm.width() != self.input_width() || self.input_norm.scale.len() != self.input_width() {
            return Err(Error::argument("input normalization width mismatch"));
        }
        if self.target_norm.width() != self.output_width() || self.target_norm.scale.len() != self.output_width() {
            return Err(Error::argument("target normalization width mismatch"));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Layer::fan_out));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Converts parameters to another precision.
    pub fn cast<G: Real>(&self) -> MlpModel<G> {
        MlpModel {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(|v| G::of(v.as_f64())),
                    bias: l.bias.mapv(|v| G::of(v.as_f64())),
                })
                .collect(),
            input_norm: self.input_norm.clone(),
            target_norm: self.target_norm.clone(),
        }
    }

    /// Standardizes raw inputs in place, one sample per row.
    pub fn normalize_inputs(&self, x: &mut Array2<F>) {
        let mean: Array1<F> = self.input_norm.mean.iter().map(|&v| F::of(v)).collect();
        let inv: Array1<F> = self.input_norm.scale.iter().map(|&v| F::of(1.0 / v)).collect();
        for mut row in x.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&mean)
                .and(&inv)
                .for_each(|v, &m, &s| *v = (*v - m) * s);
        }
    }

    /// Maps raw network outputs back to target units.
    pub fn denormalize_outputs(&self, out: &ArrayView2<F>) -> Array2<f64> {
        let mut y = out.mapv(|v| v.as_f64());
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.target_norm.scale[j] + self.target_norm.mean[j];
            }
        }
        y
    }

    /// Forward pass on already-normalized inputs, keeping activations.
    pub fn forward_cached(&self, x_norm: Array2<F>) -> ForwardCache<F> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x_norm;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            add_bias(&mut z, &layer.bias);
            if i < last {
                z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            }
            inputs.push(h);
            h = z;
        }
        ForwardCache { inputs, output: h }
    }

    /// Forward pass on already-normalized inputs, output in normalized units.
    pub fn forward_normalized(&self, x_norm: ArrayView2<F>) -> Array2<F> {
        let mut h = x_norm.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            add_bias(&mut z, &layer.bias);
            if i < last {
                z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            }
            h = z;
        }
        h
    }

    /// Reverse pass. `d_out` is the gradient with respect to the raw
    /// (normalized-unit) output. Returns parameter gradients and, when asked,
    /// the gradient with respect to the normalized input.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        d_out: Array2<F>,
        want_input_grad: bool,
    ) -> (Gradients<F>, Option<Array2<F>>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { weight: gw, bias: gb });
            if i == 0 && !want_input_grad {
                break;
            }
            let mut d_in = delta.dot(&layer.weight.t());
            if i > 0 {
                // input of layer i is the rectified output of layer i - 1
                ndarray::Zip::from(&mut d_in).and(input).for_each(|d, &a| {
                    if a <= F::zero() {
                        *d = F::zero();
                    }
                });
            }
            delta = d_in;
        }
        grads.reverse();
        let input_grad = if want_input_grad { Some(delta) } else { None };
        (Gradients { layers: grads }, input_grad)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_width() {
            return Err(Error::argument(format!(
                "input has width {}, network expects {}",
                input.len(),
                self.input_width()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("network input must be finite"));
        }
        Ok(())
    }

    fn normalized_row(&self, input: &[f64]) -> Array2<F> {
        Array2::from_shape_fn((1, input.len()), |(_, j)| {
            F::of((input[j] - self.input_norm.mean[j]) / self.input_norm.scale[j])
        })
    }
}

fn add_bias<F: Real>(z: &mut Array2<F>, bias: &Array1<F>) {
    for mut row in z.rows_mut() {
        ndarray::Zip::from(&mut row).and(bias).for_each(|v, &b| *v = *v + b);
    }
}

/// Full forward pass: normalize, propagate, de-normalize.
pub fn mlp_apply<F: Real>(model: &MlpModel<F>, input: &[f64]) -> Result<Vec<f64>> {
    model.check_input(input)?;
    let out = model.forward_normalized(model.normalized_row(input).view());
    Ok(model.denormalize_outputs(&out.view()).row(0).to_vec())
}

/// Gradients of `<upstream, mlp_apply(model, input)>` with respect to every
/// parameter and to the raw input.
pub fn mlp_grad<F: Real>(model: &MlpModel<F>, input: &[f64], upstream: &[f64]) -> Result<(Gradients<F>, Vec<f64>)> {
    model.check_input(input)?;
    if upstream.len() != model.output_width() {
        return Err(Error::argument(format!(
            "upstream gradient has width {}, network output is {}",
            upstream.len(),
            model.output_width()
        )));
    }
    let cache = model.forward_cached(model.normalized_row(input));
    let d_out = Array2::from_shape_fn((1, upstream.len()), |(_, j)| F::of(upstream[j] * model.target_norm.scale[j]));
    let (grads, d_in) = model.backward(&cache, d_out, true);
    let d_in = d_in.expect("input gradient requested");
    let input_grad = d_in
        .row(0)
        .iter()
        .zip(&model.input_norm.scale)
        .map(|(g, s)| g.as_f64() / s)
        .collect();
    Ok((grads, input_grad))
}
