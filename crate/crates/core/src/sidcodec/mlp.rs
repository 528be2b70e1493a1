//! Dense layers with tanh between them (no activation after the last).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::matvec;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `[d_out, d_in]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            w: mlp.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: mlp.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, s: f64) {
        for (a, b) in self.w.iter_mut().chain(self.b.iter_mut()).zip(other.w.iter().chain(other.b.iter())) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }
}

impl Mlp {
    /// `dims = [d_in, hidden..., d_out]`, Xavier-normal weights, zero biases.
    pub fn random<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let std = (2.0 / (d_in + d_out) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                Dense { d_in, d_out, w: (0..d_in * d_out).map(|_| normal.sample(rng)).collect(), b: vec![0.0; d_out] }
            })
            .collect();
        Mlp { layers }
    }

    /// Single identity layer with zero bias.
    pub fn identity(d: usize) -> Self {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Mlp { layers: vec![Dense { d_in: d, d_out: d, w, b: vec![0.0; d] }] }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).output
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.d_out];
            matvec(&layer.w, layer.d_out, layer.d_in, &h, &mut out);
            for (o, b) in out.iter_mut().zip(&layer.b) {
                *o += b;
            }
            if i != last {
                for o in out.iter_mut() {
                    *o = o.tanh();
                }
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        MlpCache { inputs, output: h }
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let mut delta = dy.to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i != last {
                // output of layer i is the input of layer i + 1
                let out = &cache.inputs[i + 1];
                for (d, y) in delta.iter_mut().zip(out) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &cache.inputs[i];
            let gw = &mut grads.w[i];
            for o in 0..layer.d_out {
                let d = delta[o];
                grads.b[i][o] += d;
                let row = &mut gw[o * layer.d_in..(o + 1) * layer.d_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let mut dx = vec![0.0; layer.d_in];
            for o in 0..layer.d_out {
                let d = delta[o];
                let row = &layer.w[o * layer.d_in..(o + 1) * layer.d_in];
                for (g, w) in dx.iter_mut().zip(row) {
                    *g += d * w;
                }
            }
            delta = dx;
        }
        delta
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.push(w);
            out.push(b);
        }
        out
    }
}
