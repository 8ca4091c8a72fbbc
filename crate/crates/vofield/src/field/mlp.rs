//! Small dense decoders with hand-rolled reverse mode.
//!
//! Hidden activations are softplus (smooth first and second derivatives,
//! which the jet backward needs). The last layer is linear; output
//! activations live at the call sites. Forward passes come in two flavors:
//! a plain value pass, and a jet pass carrying three positional tangents so
//! density gradients are forward values.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::Jet;

#[inline]
pub fn softplus(x: f64) -> f64 {
    // Numerically stable ln(1 + e^x).
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn new(in_dim: usize, out_dim: usize, rng: &mut StdRng) -> Self {
        // Kaiming-style uniform init.
        let bound = (6.0 / in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            let mut acc = *b;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            *o = acc;
        }
    }

    fn forward_jet(&self, input: &[Jet], out: &mut [Jet]) {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            let mut acc = Jet {
                v: *b,
                t: [0.0; 3],
            };
            for (w, x) in row.iter().zip(input) {
                acc.v += w * x.v;
                acc.t[0] += w * x.t[0];
                acc.t[1] += w * x.t[1];
                acc.t[2] += w * x.t[2];
            }
            *o = acc;
        }
    }

    /// Plain reverse: given output cotangents, accumulates parameter
    /// gradients and writes input cotangents.
    fn backward(
        &self,
        input: &[f64],
        out_cot: &[f64],
        grads: &mut LayerGrads,
        input_cot: &mut [f64],
    ) {
        input_cot.iter_mut().for_each(|v| *v = 0.0);
        for (r, (row, g_row)) in self
            .weights
            .chunks_exact(self.in_dim)
            .zip(grads.weights.chunks_exact_mut(self.in_dim))
            .enumerate()
        {
            let oc = out_cot[r];
            if oc != 0.0 {
                grads.bias[r] += oc;
                for c in 0..self.in_dim {
                    g_row[c] += oc * input[c];
                    input_cot[c] += row[c] * oc;
                }
            }
        }
    }

    /// Jet reverse: cotangents cover both value and tangent channels.
    fn backward_jet(
        &self,
        input: &[Jet],
        out_cot: &[Jet],
        grads: &mut LayerGrads,
        input_cot: &mut [Jet],
    ) {
        input_cot.iter_mut().for_each(|v| *v = Jet::default());
        for (r, (row, g_row)) in self
            .weights
            .chunks_exact(self.in_dim)
            .zip(grads.weights.chunks_exact_mut(self.in_dim))
            .enumerate()
        {
            let oc = &out_cot[r];
            grads.bias[r] += oc.v;
            for c in 0..self.in_dim {
                let x = &input[c];
                // Weight sees the value path and all three tangent paths.
                g_row[c] += oc.v * x.v + oc.t[0] * x.t[0] + oc.t[1] * x.t[1] + oc.t[2] * x.t[2];
                let ic = &mut input_cot[c];
                ic.v += row[c] * oc.v;
                ic.t[0] += row[c] * oc.t[0];
                ic.t[1] += row[c] * oc.t[1];
                ic.t[2] += row[c] * oc.t[2];
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    fn zeros(layer: &Layer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn zero(&mut self) {
        self.weights.iter_mut().for_each(|v| *v = 0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_from(&mut self, other: &LayerGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// A multi-layer perceptron with softplus between layers and a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations cached by a plain forward pass (pre-activations per layer
/// plus the post-activation inputs handed to each subsequent layer).
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct MlpJetCache {
    pre: Vec<Vec<Jet>>,
    post: Vec<Vec<Jet>>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zero(&mut self) {
        self.layers.iter_mut().for_each(LayerGrads::zero);
    }

    pub fn add_from(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_from(b);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }
}

impl Mlp {
    /// Builds an MLP with the given layer widths, e.g. `[in, hidden, out]`.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| Layer::new(w[0], w[1], &mut rng))
            .collect();
        Self { layers }
    }

    pub fn grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(LayerGrads::zeros).collect(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    /// Value-only forward; returns the (linear) outputs and fills the cache.
    pub fn forward(&self, input: &[f64], cache: &mut MlpCache) -> Vec<f64> {
        cache.pre.clear();
        cache.post.clear();
        cache.post.push(input.to_vec());
        let mut current = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim];
            layer.forward(&current, &mut out);
            cache.pre.push(out.clone());
            if i + 1 < self.layers.len() {
                for v in &mut out {
                    *v = softplus(*v);
                }
                cache.post.push(out.clone());
            }
            current = out;
        }
        current
    }

    /// Reverse of [`Mlp::forward`]; returns the input cotangent.
    pub fn backward(&self, cache: &MlpCache, out_cot: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let mut cot = out_cot.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i + 1 < self.layers.len() {
                // Chain through the softplus that followed this layer's
                // output in the forward pass.
                for (c, pre) in cot.iter_mut().zip(&cache.pre[i]) {
                    *c *= sigmoid(*pre);
                }
            }
            let mut input_cot = vec![0.0; layer.in_dim];
            layer.backward(&cache.post[i], &cot, &mut grads.layers[i], &mut input_cot);
            cot = input_cot;
        }
        cot
    }

    /// Jet forward carrying three positional tangents per neuron.
    pub fn forward_jet(&self, input: &[Jet], cache: &mut MlpJetCache) -> Vec<Jet> {
        cache.pre.clear();
        cache.post.clear();
        cache.post.push(input.to_vec());
        let mut current = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![Jet::default(); layer.out_dim];
            layer.forward_jet(&current, &mut out);
            cache.pre.push(out.clone());
            if i + 1 < self.layers.len() {
                for jet in &mut out {
                    let s = sigmoid(jet.v);
                    jet.v = softplus(jet.v);
                    for t in &mut jet.t {
                        *t *= s;
                    }
                }
                cache.post.push(out.clone());
            }
            current = out;
        }
        current
    }

    /// Reverse of [`Mlp::forward_jet`]. Tangent cotangents flow through the
    /// softplus second derivative, which is what makes gradients of the
    /// density gradient exact.
    pub fn backward_jet(
        &self,
        cache: &MlpJetCache,
        out_cot: &[Jet],
        grads: &mut MlpGrads,
    ) -> Vec<Jet> {
        let mut cot = out_cot.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i + 1 < self.layers.len() {
                for (c, pre) in cot.iter_mut().zip(&cache.pre[i]) {
                    let s = sigmoid(pre.v);
                    let ds = s * (1.0 - s);
                    // value path: v_out = softplus(u.v) -> u.v cot += s * c.v
                    // tangent path: t_out[k] = s(u.v) * u.t[k]
                    //   -> u.v cot += ds * sum_k u.t[k] * c.t[k]
                    //   -> u.t[k] cot = s * c.t[k]
                    let tangent_dot =
                        pre.t[0] * c.t[0] + pre.t[1] * c.t[1] + pre.t[2] * c.t[2];
                    let new_v = s * c.v + ds * tangent_dot;
                    c.v = new_v;
                    for t in &mut c.t {
                        *t *= s;
                    }
                }
            }
            let mut input_cot = vec![Jet::default(); layer.in_dim];
            layer.backward_jet(&cache.post[i], &cot, &mut grads.layers[i], &mut input_cot);
            cot = input_cot;
        }
        cot
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }
}
