//! Fully connected value network with hand-written backpropagation and Adam.
//!
//! Hidden layers use ReLU, the output layer is linear. Batches are column
//! matrices (`features x batch`) so every layer is one GEMM.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `outputs x inputs`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Gradients with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weights: DMatrix::zeros(l.outputs(), l.inputs()),
                    bias: DVector::zeros(l.outputs()),
                })
                .collect(),
        }
    }

    /// Parameters in canonical order: per layer, weights column-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    fn check_finite(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.iter().chain(l.bias.iter()).any(|g| !g.is_finite()) {
                let max = l
                    .weights
                    .iter()
                    .chain(l.bias.iter())
                    .filter(|g| g.is_finite())
                    .fold(0.0f64, |m, g| m.max(g.abs()));
                return Err(Error::numeric(
                    "policy",
                    format!("non-finite gradient in layer {i} (largest finite |g| = {max:e})"),
                ));
            }
        }
        Ok(())
    }
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "network needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let bound = (6.0 / inp as f64).sqrt();
                Dense {
                    weights: DMatrix::from_fn(out, inp, |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs()];
        s.extend(self.layers.iter().map(Dense::outputs));
        s
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty network");
        last.weights.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Mutable parameters in the same order as [`Gradients::flatten`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let input = DMatrix::from_column_slice(x.len(), 1, x);
        self.forward_batch(&input).as_slice().to_vec()
    }

    /// Outputs for a `inputs x batch` matrix.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Mean squared error between `Q(s_i, a_i)` and `targets_i`, and its gradient.
    pub fn loss_and_gradients(
        &self,
        states: &DMatrix<f64>,
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(f64, Gradients)> {
        let batch = states.ncols();
        assert_eq!(actions.len(), batch);
        assert_eq!(targets.len(), batch);
        let last = self.layers.len() - 1;
        // activations[i] is the input to layer i
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(states.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weights * activations.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            activations.push(z);
        }
        let out = activations.last().unwrap();
        let mut delta = DMatrix::zeros(out.nrows(), batch);
        let mut loss = 0.0;
        for (j, (&a, &t)) in actions.iter().zip(targets).enumerate() {
            let err = out[(a, j)] - t;
            loss += err * err;
            delta[(a, j)] = 2.0 * err / batch as f64;
        }
        loss /= batch as f64;
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &activations[i];
            let gw = &delta * input.transpose();
            let gb = delta.column_sum();
            if i > 0 {
                let mut back = self.layers[i].weights.transpose() * &delta;
                // ReLU derivative; post-activation zero means the unit was inactive
                back.zip_apply(input, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
            grads.push(Dense {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        let grads = Gradients { layers: grads };
        if !loss.is_finite() {
            return Err(Error::numeric("policy", format!("non-finite loss {loss}")));
        }
        grads.check_finite()?;
        Ok((loss, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        for ((layer, g), (m, v)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()))
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            for (((p, g), m), v) in layer
                .weights
                .iter_mut()
                .zip(g.weights.iter())
                .zip(m.weights.iter_mut())
                .zip(v.weights.iter_mut())
            {
                update(p, *g, m, v);
            }
            for (((p, g), m), v) in layer
                .bias
                .iter_mut()
                .zip(g.bias.iter())
                .zip(m.bias.iter_mut())
                .zip(v.bias.iter_mut())
            {
                update(p, *g, m, v);
            }
        }
    }
}

/// Checkpoint form of one layer: row-major weight matrix and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl From<&Mlp> for Vec<LayerWeights> {
    fn from(net: &Mlp) -> Self {
        net.layers
            .iter()
            .map(|l| LayerWeights {
                weights: l
                    .weights
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
                bias: l.bias.iter().copied().collect(),
            })
            .collect()
    }
}

impl TryFrom<&[LayerWeights]> for Mlp {
    type Error = Error;

    fn try_from(layers: &[LayerWeights]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Policy("checkpoint has no layers".into()));
        }
        let mut out = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            let rows = l.weights.len();
            let cols = l.weights.first().map_or(0, Vec::len);
            if rows == 0 || cols == 0 || l.weights.iter().any(|r| r.len() != cols) || l.bias.len() != rows {
                return Err(Error::Policy(format!("checkpoint layer {i} is malformed")));
            }
            if let Some(prev) = out.last() {
                let prev: &Dense = prev;
                if prev.outputs() != cols {
                    return Err(Error::Policy(format!(
                        "checkpoint layer {i} expects {cols} inputs, previous layer has {} outputs",
                        prev.outputs()
                    )));
                }
            }
            out.push(Dense {
                weights: DMatrix::from_fn(rows, cols, |r, c| l.weights[r][c]),
                bias: DVector::from_vec(l.bias.clone()),
            });
        }
        Ok(Mlp { layers: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer_gives_zero_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&[9, 128, 128, 5], &mut rng);
        net.zero_output_layer();
        for _ in 0..10 {
            let s: Vec<f64> = (0..9).map(|_| rng.random()).collect();
            assert_eq!(net.forward(&s), vec![0.0; 5]);
        }
    }

    #[test]
    fn single_weight_gradient_matches_hand_derivative() {
        // f(w) = w x, loss (w x - t)^2, dL/dw = 2 (w x - t) x
        let net = Mlp {
            layers: vec![Dense {
                weights: DMatrix::from_element(1, 1, 0.7),
                bias: DVector::zeros(1),
            }],
        };
        let (x, t) = (1.5, 0.2);
        let states = DMatrix::from_element(1, 1, x);
        let (loss, g) = net.loss_and_gradients(&states, &[0], &[t]).unwrap();
        assert!((loss - (0.7 * x - t).powi(2)).abs() < 1e-15);
        assert!((g.layers[0].weights[(0, 0)] - 2.0 * (0.7 * x - t) * x).abs() < 1e-15);
        assert!((g.layers[0].bias[0] - 2.0 * (0.7 * x - t)).abs() < 1e-15);
    }

    /// Textbook scalar Adam used as the oracle.
    fn scalar_adam(p: f64, grads: &[f64], lr: f64) -> f64 {
        let (mut m, mut v, mut p) = (0.0, 0.0, p);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= lr * mh / (vh.sqrt() + 1e-8);
        }
        p
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let mut net = Mlp {
            layers: vec![Dense {
                weights: DMatrix::from_row_slice(1, 2, &[0.5, -0.25]),
                bias: DVector::from_element(1, 0.1),
            }],
        };
        let mut adam = Adam::new(&net, 1e-3);
        let seq = [[0.3, -2.0, 0.01], [0.1, 1.0, -0.5], [-4.0, 0.0, 2.0]];
        for g in &seq {
            let grads = Gradients {
                layers: vec![Dense {
                    weights: DMatrix::from_row_slice(1, 2, &g[..2]),
                    bias: DVector::from_element(1, g[2]),
                }],
            };
            adam.step(&mut net, &grads);
        }
        let col = |k: usize| seq.iter().map(|g| g[k]).collect::<Vec<_>>();
        assert!((net.layers[0].weights[(0, 0)] - scalar_adam(0.5, &col(0), 1e-3)).abs() < 1e-15);
        assert!((net.layers[0].weights[(0, 1)] - scalar_adam(-0.25, &col(1), 1e-3)).abs() < 1e-15);
        assert!((net.layers[0].bias[0] - scalar_adam(0.1, &col(2), 1e-3)).abs() < 1e-15);
        // the first bias-corrected step moves each parameter by about lr against its gradient sign
        let mut fresh = Mlp {
            layers: vec![Dense {
                weights: DMatrix::from_row_slice(1, 2, &[0.0, 0.0]),
                bias: DVector::zeros(1),
            }],
        };
        let mut adam = Adam::new(&fresh, 1e-4);
        let g = Gradients {
            layers: vec![Dense {
                weights: DMatrix::from_row_slice(1, 2, &[3.0, -0.2]),
                bias: DVector::zeros(1),
            }],
        };
        adam.step(&mut fresh, &g);
        assert!((fresh.layers[0].weights[(0, 0)] + 1e-4).abs() < 1e-10);
        assert!((fresh.layers[0].weights[(0, 1)] - 1e-4).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let net = Mlp {
            layers: vec![Dense {
                weights: DMatrix::from_element(1, 1, f64::MAX),
                bias: DVector::zeros(1),
            }],
        };
        let states = DMatrix::from_element(1, 1, 10.0);
        let err = net.loss_and_gradients(&states, &[0], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Numeric { module: "policy", .. }));
    }

    #[test]
    fn checkpoint_form_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[9, 4, 4, 5], &mut rng);
        let layers: Vec<LayerWeights> = (&net).into();
        let back = Mlp::try_from(layers.as_slice()).unwrap();
        assert_eq!(back, net);
        let mut broken = layers.clone();
        broken[1].bias.pop();
        assert!(Mlp::try_from(broken.as_slice()).is_err());
    }
}
