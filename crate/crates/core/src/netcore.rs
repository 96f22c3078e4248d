//! Shallow tanh feed-forward networks.
//!
//! Parameters are stored layer by layer, each layer as a row-major weight
//! matrix (`out × in`) followed by its bias vector. [`NetworkParams::flat`]
//! exposes them in exactly that order, which is also the order gradients are
//! accumulated in.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Expr, Graph, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerSpec {
    /// Spec for a configuration network: one or two hidden layers, scalar output.
    pub fn configuration(input_dim: usize, hidden_widths: &[usize]) -> Result<Self> {
        let spec = LayerSpec {
            input_dim,
            hidden_widths: hidden_widths.to_vec(),
            output_dim: 1,
            activation: Activation::Tanh,
        };
        spec.validate()?;
        if !(1..=2).contains(&hidden_widths.len()) {
            return Err(Error::Spec(format!(
                "configuration networks take one or two hidden layers, got {}",
                hidden_widths.len()
            )));
        }
        Ok(spec)
    }

    /// `depth` hidden layers of `width` neurons each.
    pub fn dnn(input_dim: usize, width: usize, depth: usize, output_dim: usize) -> Self {
        LayerSpec {
            input_dim,
            hidden_widths: vec![width; depth],
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Spec("input and output dimensions must be positive".into()));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::Spec(format!("hidden layer {i} has zero width")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each weight layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| i * o + o).sum()
    }

    pub fn hidden_neurons(&self) -> usize {
        self.hidden_widths.iter().sum()
    }

    /// Length of the activation trace written by [`NetworkParams::run`].
    pub fn trace_len(&self) -> usize {
        self.input_dim + self.hidden_neurons() + self.output_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major, `fan_out × fan_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Serialize for Layer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let w = self.w.chunks(self.fan_in).map(<[f64]>::to_vec).collect();
        LayerRepr { w, b: self.b.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Layer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = LayerRepr::deserialize(d)?;
        let fan_out = repr.w.len();
        let fan_in = repr.w.first().map_or(0, Vec::len);
        if repr.w.iter().any(|r| r.len() != fan_in) || repr.b.len() != fan_out {
            return Err(serde::de::Error::custom("ragged layer weights"));
        }
        Ok(Layer { fan_in, fan_out, w: repr.w.concat(), b: repr.b })
    }
}

/// Weights and biases of one feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkParams {
    pub spec: LayerSpec,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

/// Reusable buffers for [`NetworkParams::backprop`].
#[derive(Clone, Debug, Default)]
pub struct Scratch<R> {
    delta: Vec<R>,
    next: Vec<R>,
}

impl<R> Scratch<R> {
    pub fn new() -> Self {
        Scratch { delta: Vec::new(), next: Vec::new() }
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `(spec, seed)`.
pub fn init_params(spec: &LayerSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            Layer {
                fan_in,
                fan_out,
                w: (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect(),
                b: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(NetworkParams { spec: spec.clone(), seed, layers })
}

/// Comparison network with the same initialization scheme; depth is unrestricted.
pub fn baseline_dnn(spec: &LayerSpec, seed: u64) -> Result<NetworkParams> {
    init_params(spec, seed)
}

impl NetworkParams {
    /// All-zero network of the given shape.
    pub fn zeros(spec: &LayerSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer { fan_in, fan_out, w: vec![0.0; fan_in * fan_out], b: vec![0.0; fan_out] })
            .collect();
        Ok(NetworkParams { spec: spec.clone(), seed: 0, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }

    /// Loads parameters from the front of `src`, returning how many were consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&src[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&src[at..at + nb]);
            at += nb;
        }
        at
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.spec.input_dim {
            return Err(Error::Dimension { expected: self.spec.input_dim, got: len });
        }
        Ok(())
    }

    /// Network outputs; hidden layers use tanh, the output layer is linear.
    pub fn forward<R: Real>(&self, input: &[R]) -> Result<Vec<R>> {
        self.check_input(input.len())?;
        let mut trace = Vec::with_capacity(self.spec.trace_len());
        self.run(input, &mut trace);
        Ok(trace[trace.len() - self.spec.output_dim..].to_vec())
    }

    /// Scalar-output convenience for configuration networks.
    pub fn forward_scalar<R: Real>(&self, input: &[R]) -> Result<R> {
        Ok(self.forward(input)?[0])
    }

    /// Forward pass writing `[input | hidden activations… | output]` into `trace`.
    ///
    /// Does not validate `input`; callers on the hot path check once up front.
    pub fn run<R: Real>(&self, input: &[R], trace: &mut Vec<R>) {
        trace.clear();
        trace.extend_from_slice(input);
        let mut start = 0;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let end = start + layer.fan_in;
            for o in 0..layer.fan_out {
                let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let mut acc = R::cst(layer.b[o]);
                for (w, &a) in row.iter().zip(&trace[start..end]) {
                    acc += R::cst(*w) * a;
                }
                trace.push(if li == last { acc } else { acc.tanh() });
            }
            start = end;
        }
    }

    /// Reverse pass over a trace from [`run`](Self::run): accumulates
    /// `Σ out_adj[o] · ∂out[o]/∂θ` into `grad` (flat parameter order).
    ///
    /// Running this on dual numbers differentiates the parameter gradient
    /// with respect to whatever the input tangents were seeded with.
    pub fn backprop<R: Real>(&self, trace: &[R], out_adj: &[R], grad: &mut [R], scratch: &mut Scratch<R>) {
        let Scratch { delta, next } = scratch;
        delta.clear();
        delta.extend_from_slice(out_adj);
        let mut off_end = self.param_count();
        let mut act_end = trace.len() - self.spec.output_dim;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let act_start = act_end - layer.fan_in;
            let acts = &trace[act_start..act_end];
            let off = off_end - layer.w.len() - layer.b.len();
            off_end = off;
            let (gw, gb) = grad[off..off + layer.w.len() + layer.b.len()].split_at_mut(layer.w.len());
            for o in 0..layer.fan_out {
                let d = delta[o];
                gb[o] += d;
                for (g, &a) in gw[o * layer.fan_in..(o + 1) * layer.fan_in].iter_mut().zip(acts) {
                    *g += d * a;
                }
            }
            if li > 0 {
                next.clear();
                next.resize(layer.fan_in, R::zero());
                for o in 0..layer.fan_out {
                    let d = delta[o];
                    let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += R::cst(*w) * d;
                    }
                }
                // previous layer's activations are tanh outputs
                for (n, &a) in next.iter_mut().zip(acts) {
                    *n *= R::one() - a * a;
                }
                std::mem::swap(delta, next);
            }
            act_end = act_start;
        }
    }

    /// Records the forward pass into `g`.
    pub fn forward_expr(&self, g: &mut Graph, input: &[Expr]) -> Result<Vec<Expr>> {
        self.check_input(input.len())?;
        let mut acts = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.fan_out);
            for o in 0..layer.fan_out {
                let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let mut acc = g.constant(layer.b[o]);
                for (&w, &a) in row.iter().zip(&acts) {
                    let term = g.scale(a, w);
                    acc = g.add(acc, term);
                }
                out.push(if li == last { acc } else { g.tanh(acc) });
            }
            acts = out;
        }
        Ok(acts)
    }

    /// Upper bound on the input Lipschitz constant: product of Frobenius norms
    /// (tanh is 1-Lipschitz).
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().map(|l| l.w.iter().map(|w| w * w).sum::<f64>().sqrt()).product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Bindings;

    #[test]
    fn param_counts() {
        let s = LayerSpec::configuration(1, &[8]).unwrap();
        assert_eq!(s.param_count(), 25);
        assert_eq!(init_params(&s, 3).unwrap().param_count(), 25);
        let s = LayerSpec::configuration(2, &[8, 8]).unwrap();
        assert_eq!(s.param_count(), 105);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = LayerSpec::configuration(2, &[8, 8]).unwrap();
        let a = init_params(&s, 42).unwrap();
        let b = init_params(&s, 42).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_ne!(a.flat(), init_params(&s, 43).unwrap().flat());
        for l in &a.layers {
            let lim = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            assert!(l.w.iter().all(|w| w.abs() <= lim));
            assert!(l.b.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(LayerSpec::configuration(0, &[8]), Err(Error::Spec(_))));
        assert!(matches!(LayerSpec::configuration(1, &[8, 0]), Err(Error::Spec(_))));
        assert!(matches!(LayerSpec::configuration(1, &[8, 8, 8]), Err(Error::Spec(_))));
        let bad = LayerSpec { input_dim: 1, hidden_widths: vec![4], output_dim: 0, activation: Activation::Tanh };
        assert!(init_params(&bad, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = LayerSpec::configuration(2, &[8, 8]).unwrap();
        let net = NetworkParams::zeros(&s).unwrap();
        assert_eq!(net.forward(&[0.3, -1.2]).unwrap(), vec![0.0]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { expected: 2, got: 1 })));
    }

    #[test]
    fn hand_computed_forward() {
        // 1 -> 1 -> 1 with unit weights: out = w2 * tanh(w1 x + b1) + b2
        let s = LayerSpec::configuration(1, &[1]).unwrap();
        let mut net = NetworkParams::zeros(&s).unwrap();
        net.read_flat(&[1.0, 0.0, 1.0, 0.0]);
        let x: f64 = 0.7;
        assert!((net.forward_scalar(&[x]).unwrap() - x.tanh()).abs() < 1e-15);
        net.read_flat(&[0.5, 0.2, -2.0, 0.3]);
        let want = -2.0 * (0.5 * x + 0.2).tanh() + 0.3;
        assert!((net.forward_scalar(&[x]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let s = LayerSpec::configuration(2, &[8, 8]).unwrap();
        let net = init_params(&s, 5).unwrap();
        let input = [0.4, -0.9];
        let mut trace = Vec::new();
        net.run(&input, &mut trace);
        let mut grad = vec![0.0; net.param_count()];
        net.backprop(&trace, &[1.0], &mut grad, &mut Scratch::new());
        let base = net.flat();
        let eps = 1e-6;
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += eps;
            let mut up = net.clone();
            up.read_flat(&p);
            p[i] -= 2.0 * eps;
            let mut dn = net.clone();
            dn.read_flat(&p);
            let fd = (up.forward_scalar(&input).unwrap() - dn.forward_scalar(&input).unwrap()) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-8, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn graph_forward_agrees_with_direct() {
        let s = LayerSpec::dnn(2, 6, 3, 2);
        let net = baseline_dnn(&s, 9).unwrap();
        let mut g = Graph::new();
        let x = g.variable("x");
        let t = g.variable("t");
        let outs = net.forward_expr(&mut g, &[x, t]).unwrap();
        let b = Bindings::new().with(x, 0.25).with(t, 1.5);
        let direct = net.forward(&[0.25f64, 1.5]).unwrap();
        for (o, d) in outs.iter().zip(direct) {
            assert!((g.evaluate(*o, &b).unwrap() - d).abs() < 1e-14);
        }
    }

    #[test]
    fn json_layout() {
        let s = LayerSpec::configuration(1, &[2]).unwrap();
        let net = init_params(&s, 1).unwrap();
        let v: serde_json::Value = serde_json::to_value(&net).unwrap();
        assert_eq!(v["layers"][0]["w"].as_array().unwrap().len(), 2);
        assert_eq!(v["layers"][1]["b"].as_array().unwrap().len(), 1);
        let back: NetworkParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn baseline_neuron_counts_match_ensembles() {
        // K = 3 ensemble: 3 configurations x (E, S) x 8 hidden neurons
        let zenn = 3 * 2 * LayerSpec::configuration(1, &[8]).unwrap().hidden_neurons();
        assert_eq!(zenn, LayerSpec::dnn(1, 8, 6, 3).hidden_neurons());
        assert_eq!(zenn, 48);
        let landscape = LayerSpec::dnn(2, 48, 4, 1);
        assert_eq!(landscape.hidden_neurons(), 6 * 2 * 16);
    }
}
