//! Tanh multilayer perceptron, Adam, and the constrained-parameter transforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, LeafBlock, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid layer sizes {0:?}: need at least two layers, all of size >= 1")]
    InvalidLayers(Vec<usize>),
    #[error("input has {got} features, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("gradient for parameter {index} is not finite ({value})")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("{params} parameters but {grads} gradients")]
    GradientLength { params: usize, grads: usize },
    #[error("parameter vector has {got} entries, layer sizes need {expected}")]
    ParamCount { expected: usize, got: usize },
}

/// Dense feed-forward network: tanh on hidden layers, identity on the output.
///
/// Parameters are stored flat, layer by layer: the row-major `(out, in)`
/// weight matrix followed by the `out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Parameter count of a network with the given layer sizes.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

fn validate_layers(layer_sizes: &[usize]) -> Result<(), NnError> {
    if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
        return Err(NnError::InvalidLayers(layer_sizes.to_vec()));
    }
    Ok(())
}

/// Handle to a model's parameters lifted onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundParams(pub LeafBlock);

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self, NnError> {
        validate_layers(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            params.extend((0..n_in * n_out).map(|_| rng.gen_range(-bound..=bound)));
            params.extend(std::iter::repeat(0.0).take(n_out));
        }
        Ok(MlpModel {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        validate_layers(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if params.len() != expected {
            return Err(NnError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        Ok(MlpModel {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(tape.lift_block(&self.params))
    }

    /// Taped forward pass. Tangents of `input` propagate to the outputs.
    pub fn forward(&self, tape: &mut Tape, bound: BoundParams, input: &[Var]) -> Result<Vec<Var>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let last = self.layer_sizes.len() - 2;
        let mut offset = 0;
        let mut acts: Vec<Var> = input.to_vec();
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let bias_start = offset + n_in * n_out;
            acts = tape.dense_layer(bound.0, offset, bias_start, n_out, &acts, l < last);
            offset = bias_start + n_out;
        }
        Ok(acts)
    }

    /// Plain forward pass; bit-identical to the primal values of [`MlpModel::forward`].
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let last = self.layer_sizes.len() - 2;
        let mut offset = 0;
        let mut acts = input.to_vec();
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let next: Vec<f64> = (0..n_out)
                .map(|j| {
                    let row = &weights[j * n_in..(j + 1) * n_in];
                    let z = row
                        .iter()
                        .zip(&acts)
                        .fold(biases[j], |acc, (w, x)| acc + w * x);
                    if l < last {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts = next;
            offset += n_in * n_out + n_out;
        }
        Ok(acts)
    }
}

/// Fixed per-feature affine map `(x - mean) / scale`, part of a network's
/// architecture so that data and residuals stay in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations; constant columns get scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| -m / s + (1.0 / s) * v)
            .collect()
    }

    /// Taped standardization. Primal outputs are recorded contiguously,
    /// ahead of any tangents.
    pub fn forward_taped(&self, tape: &mut Tape, x: &[Var]) -> Vec<Var> {
        let primal: Vec<Var> = x
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| tape.linear(&[(v.detached(), 1.0 / s)], -m / s))
            .collect();
        primal
            .into_iter()
            .zip(x.iter().zip(&self.scale))
            .map(|(p, (&v, s))| match v.tangent_node() {
                None => p,
                Some(_) => {
                    let t = tape.tangent_var(v);
                    let st = tape.scale(t, 1.0 / s);
                    Var::from_parts(p.node(), Some(st.node()))
                }
            })
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }

    pub fn inverse_taped(&self, tape: &mut Tape, z: &[Var]) -> Vec<Var> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| tape.linear(&[(v, *s)], *m))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One bias-corrected Adam update. Parameters are untouched on error.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NnError::GradientLength {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index, value });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub const TOTAL_VOLUME: f64 = 26.7;
pub const FROTH_FRACTION_MIN: f64 = 0.04;
pub const FROTH_FRACTION_MAX: f64 = 0.07;

/// Froth and pulp volumes from one unconstrained parameter:
/// `V_f = total·(lo + (hi − lo)·σ(raw))`, `V_p = total − V_f`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedVolume {
    pub raw: f64,
    pub total: f64,
    pub froth_min: f64,
    pub froth_max: f64,
}

impl ConstrainedVolume {
    pub fn new(raw: f64) -> Self {
        ConstrainedVolume {
            raw,
            total: TOTAL_VOLUME,
            froth_min: FROTH_FRACTION_MIN,
            froth_max: FROTH_FRACTION_MAX,
        }
    }

    /// Raw value that decodes to the given froth volume (must lie strictly
    /// inside the bounds).
    pub fn raw_for_froth_volume(vf: f64) -> f64 {
        let s = (vf / TOTAL_VOLUME - FROTH_FRACTION_MIN) / (FROTH_FRACTION_MAX - FROTH_FRACTION_MIN);
        (s / (1.0 - s)).ln()
    }

    /// `(V_f, V_p)`.
    pub fn volumes(&self) -> (f64, f64) {
        let frac = self.froth_min + (self.froth_max - self.froth_min) * sigmoid(self.raw);
        let vf = self.total * frac;
        (vf, self.total - vf)
    }

    /// Taped `(V_f, V_p)` for a raw parameter already on the tape.
    pub fn volumes_taped(&self, tape: &mut Tape, raw: Var) -> (Var, Var) {
        let s = tape.sigmoid(raw);
        let vf = tape.linear(
            &[(s, self.total * (self.froth_max - self.froth_min))],
            self.total * self.froth_min,
        );
        let vp = tape.linear(&[(vf, -1.0)], self.total);
        (vf, vp)
    }
}
