//! A small dense network with manual backpropagation and an Adam optimizer,
//! shared by the human-plan predictor and the policy-gradient learner.
//!
//! Everything runs on column-major f64 matrices; minibatches are matrices
//! with one column per sample so training stays in matrix-matrix products.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// A fully connected network. Hidden layers share one activation; the
/// output layer is linear.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Cached layer outputs from a forward pass, consumed by `backward`.
pub struct ForwardTrace {
    /// Layer inputs: activations[0] is the input batch, activations[k+1]
    /// the output of layer k.
    pub activations: Vec<DMatrix<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().unwrap()
    }
}

/// Parameter gradients aligned with `Mlp::layers`.
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl Mlp {
    /// He-style scaled random initialization, seeded for reproducibility.
    pub fn new(sizes: &[usize], hidden: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for i in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| {
                // Box-Muller from two uniforms keeps the draw order stable.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            });
            let bias = DVector::zeros(fan_out);
            let activation = if i + 1 == sizes.len() - 1 { Activation::Identity } else { hidden };
            layers.push(Dense { weights, bias, activation });
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    /// Forward pass over a batch (one column per sample), keeping the trace
    /// needed for backpropagation.
    pub fn forward(&self, input: &DMatrix<f64>) -> ForwardTrace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        let mut current = input.clone();
        for layer in &self.layers {
            let mut z = &layer.weights * &current;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            z.apply(|v| *v = layer.activation.apply(*v));
            activations.push(z.clone());
            current = z;
        }
        ForwardTrace { activations }
    }

    /// Single-sample forward pass without allocation of a trace.
    pub fn infer(&self, input: &[f64]) -> Vec<f64> {
        let mut current = DVector::from_column_slice(input);
        for layer in &self.layers {
            let mut z = &layer.weights * &current + &layer.bias;
            z.apply(|v| *v = layer.activation.apply(*v));
            current = z;
        }
        current.as_slice().to_vec()
    }

    /// Backpropagate an output cotangent through the trace; returns the
    /// parameter gradients and the cotangent with respect to the input batch.
    pub fn backward(&self, trace: &ForwardTrace, output_cotangent: &DMatrix<f64>) -> (Gradients, DMatrix<f64>) {
        let n_layers = self.layers.len();
        let mut w_grads = vec![DMatrix::zeros(0, 0); n_layers];
        let mut b_grads = vec![DVector::zeros(0); n_layers];
        let mut delta = output_cotangent.clone();
        for k in (0..n_layers).rev() {
            let out = &trace.activations[k + 1];
            // delta currently holds dL/d(activation output); convert to
            // pre-activation.
            for (mut dc, oc) in delta.column_iter_mut().zip(out.column_iter()) {
                for i in 0..dc.len() {
                    dc[i] *= self.layers[k].activation.grad_from_output(oc[i]);
                }
            }
            let input = &trace.activations[k];
            w_grads[k] = &delta * input.transpose();
            b_grads[k] = DVector::from_iterator(
                delta.nrows(),
                (0..delta.nrows()).map(|i| delta.row(i).sum()),
            );
            delta = self.layers[k].weights.transpose() * delta;
        }
        (Gradients { weights: w_grads, bias: b_grads }, delta)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flatten all parameters (used by gradient-check tests).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut idx = 0;
        for l in &mut self.layers {
            for v in l.weights.iter_mut() {
                *v = flat[idx];
                idx += 1;
            }
            for v in l.bias.iter_mut() {
                *v = flat[idx];
                idx += 1;
            }
        }
        assert_eq!(idx, flat.len());
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    step: usize,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon: 1e-8,
            m_w: net.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            v_w: net.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            m_b: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
            v_b: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
            step: 0,
        }
    }

    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for (k, layer) in net.layers.iter_mut().enumerate() {
            for (((w, g), m), v) in layer
                .weights
                .iter_mut()
                .zip(grads.weights[k].iter())
                .zip(self.m_w[k].iter_mut())
                .zip(self.v_w[k].iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.learning_rate * (*m / b1c) / ((*v / b2c).sqrt() + self.epsilon);
            }
            for (((b, g), m), v) in layer
                .bias
                .iter_mut()
                .zip(grads.bias[k].iter())
                .zip(self.m_b[k].iter_mut())
                .zip(self.v_b[k].iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *b -= self.learning_rate * (*m / b1c) / ((*v / b2c).sqrt() + self.epsilon);
            }
        }
    }
}

/// Per-dimension input standardization, estimated from a training set and
/// stored with the model that used it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Midpoint-split pairwise sum. Besides better accuracy than a running
/// sum, it makes statistics exactly invariant to dataset duplication: the
/// root of the doubled tree is an exact doubling.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => {
            let m = n / 2;
            pairwise_sum(&v[..m]) + pairwise_sum(&v[m..])
        }
    }
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fit to rows of samples; constant dimensions get unit scale.
    pub fn fit(samples: &[Vec<f64>]) -> Self {
        let dim = samples[0].len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut std = vec![0.0; dim];
        let mut column = vec![0.0; samples.len()];
        for i in 0..dim {
            for (c, s) in column.iter_mut().zip(samples) {
                *c = s[i];
            }
            mean[i] = pairwise_sum(&column) / n;
            for c in &mut column {
                *c = (*c - mean[i]) * (*c - mean[i]);
            }
            std[i] = (pairwise_sum(&column) / n).sqrt();
            if std[i] < 1e-8 {
                std[i] = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajopt::fd_gradient;
    use approx::assert_relative_eq;

    #[test]
    fn forward_matches_infer() {
        let net = Mlp::new(&[3, 8, 2], Activation::Relu, 1);
        let x = vec![0.3, -0.7, 1.2];
        let single = net.infer(&x);
        let batch = DMatrix::from_column_slice(3, 1, &x);
        let trace = net.forward(&batch);
        for i in 0..2 {
            assert_relative_eq!(single[i], trace.output()[(i, 0)], max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = Mlp::new(&[4, 6, 3], Activation::Relu, 2);
        let zeros = vec![0.0; net.num_params()];
        net.set_flat_params(&zeros);
        let out = net.infer(&[1.0, -2.0, 0.5, 3.0]);
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for activation in [Activation::Relu, Activation::Tanh] {
            let net = Mlp::new(&[4, 6, 5, 3], activation, 7);
            let input = DMatrix::from_fn(4, 3, |i, j| 0.3 * (i as f64) - 0.2 * (j as f64) + 0.1);
            let target = DMatrix::from_fn(3, 3, |i, j| 0.5 * (i as f64) - 0.1 * (j as f64));
            let loss_of = |params: &[f64]| {
                let mut n = net.clone();
                n.set_flat_params(params);
                let tr = n.forward(&input);
                let d = tr.output() - &target;
                0.5 * d.iter().map(|v| v * v).sum::<f64>()
            };
            let trace = net.forward(&input);
            let cot = trace.output() - &target;
            let (grads, _) = net.backward(&trace, &cot);
            let mut flat_analytic = Vec::new();
            for k in 0..net.layers.len() {
                flat_analytic.extend_from_slice(grads.weights[k].as_slice());
                flat_analytic.extend_from_slice(grads.bias[k].as_slice());
            }
            let flat = net.flat_params();
            let fd = fd_gradient(|p| loss_of(p), &flat, 1e-6);
            for (a, f) in flat_analytic.iter().zip(&fd) {
                let denom = a.abs().max(f.abs()).max(1e-6);
                assert!((a - f).abs() / denom < 1e-4, "analytic {a} fd {f}");
            }
        }
    }

    #[test]
    fn input_cotangent_matches_finite_differences() {
        let net = Mlp::new(&[5, 8, 4], Activation::Tanh, 9);
        let x = vec![0.2, -0.4, 0.8, 0.0, -1.1];
        let cot = vec![0.7, -0.3, 0.5, 0.1];
        let batch = DMatrix::from_column_slice(5, 1, &x);
        let trace = net.forward(&batch);
        let cot_m = DMatrix::from_column_slice(4, 1, &cot);
        let (_, input_cot) = net.backward(&trace, &cot_m);
        let fd = fd_gradient(
            |xs| {
                let out = net.infer(xs);
                out.iter().zip(&cot).map(|(o, c)| o * c).sum()
            },
            &x,
            1e-6,
        );
        for i in 0..5 {
            assert_relative_eq!(input_cot[(i, 0)], fd[i], max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut net = Mlp::new(&[2, 4, 1], Activation::Tanh, 3);
        let mut adam = Adam::new(&net, 1e-2, 0.9, 0.999);
        let input = DMatrix::from_column_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let target = DMatrix::from_column_slice(1, 4, &[0.1, 0.9, 0.9, 0.1]);
        let loss = |net: &Mlp| {
            let tr = net.forward(&input);
            let d = tr.output() - &target;
            d.iter().map(|v| v * v).sum::<f64>()
        };
        let initial = loss(&net);
        for _ in 0..400 {
            let trace = net.forward(&input);
            let cot = 2.0 * (trace.output() - &target);
            let (grads, _) = net.backward(&trace, &cot);
            adam.update(&mut net, &grads);
        }
        let final_loss = loss(&net);
        assert!(final_loss < 0.05 * initial, "initial {initial}, final {final_loss}");
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Mlp::new(&[6, 10, 2], Activation::Relu, 42);
        let b = Mlp::new(&[6, 10, 2], Activation::Relu, 42);
        assert_eq!(a.flat_params(), b.flat_params());
        let c = Mlp::new(&[6, 10, 2], Activation::Relu, 43);
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn standardizer_normalizes_and_guards_constants() {
        let samples = vec![
            vec![1.0, 5.0, 2.0],
            vec![3.0, 5.0, 4.0],
            vec![5.0, 5.0, 6.0],
        ];
        let st = Standardizer::fit(&samples);
        assert_eq!(st.mean[1], 5.0);
        assert_eq!(st.std[1], 1.0);
        let z = st.apply(&[3.0, 5.0, 4.0]);
        assert!(z.iter().all(|v| v.abs() < 1e-12));
    }
}
