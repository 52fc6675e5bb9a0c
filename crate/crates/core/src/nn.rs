//! Fixed-topology feedforward networks with hand-written backpropagation.
//!
//! Batches are row-major: one example per row. Each layer computes
//! `act(x · Wᵀ + b)` with `W` shaped `(out, in)`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{format_f64, write_text};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Activation::Linear),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// The relu subgradient at 0 is 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Hidden layers use `hidden`, the output layer is linear.
pub fn mlp_specs(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Vec<LayerSpec> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    let last = dims.len() - 2;
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last { Activation::Linear } else { activation };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `(out_dim, in_dim)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of a feedforward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("input is always present")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients shaped like a [`Network`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v * factor);
            l.bias.mapv_inplace(|v| v * factor);
        }
    }

    /// Adds `other` into `self`; shapes must agree.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

impl Network {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.spec.in_dim == 0 || l.spec.out_dim == 0 {
                return Err(Error::Invalid(format!("layer {i} has a zero dimension")));
            }
            if l.weight.dim() != (l.spec.out_dim, l.spec.in_dim) {
                return Err(Error::shape(
                    "layer weight",
                    format!("{}x{}", l.spec.out_dim, l.spec.in_dim),
                    format!("{:?}", l.weight.dim()),
                ));
            }
            if l.bias.len() != l.spec.out_dim {
                return Err(Error::shape("layer bias", l.spec.out_dim, l.bias.len()));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
            if i > 0 && layers[i - 1].spec.out_dim != l.spec.in_dim {
                return Err(Error::shape("layer chain", layers[i - 1].spec.out_dim, l.spec.in_dim));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights and zero biases, drawn layer by layer from `rng`.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|&spec| {
                let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                let weight = Array2::from_shape_fn((spec.out_dim, spec.in_dim), |_| rng.random_range(-limit..limit));
                Layer {
                    spec,
                    weight,
                    bias: Array1::zeros(spec.out_dim),
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Initialization as a pure function of seed and shapes.
    pub fn init_seeded(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        Self::init(specs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.ncols()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_owned());
        for layer in &self.layers {
            let input = activations.last().expect("nonempty");
            let z = input.dot(&layer.weight.t()) + &layer.bias;
            let a = z.mapv(|v| layer.spec.activation.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        if activations.last().expect("nonempty").iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(ForwardPass {
            activations,
            pre_activations,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut pass = self.forward(x)?;
        Ok(pass.activations.pop().expect("nonempty"))
    }

    /// Which relu inputs are positive, layer by layer, for a forward pass.
    pub fn relu_pattern(pass: &ForwardPass, net: &Network) -> Vec<bool> {
        net.layers
            .iter()
            .zip(&pass.pre_activations)
            .filter(|(l, _)| l.spec.activation == Activation::Relu)
            .flat_map(|(_, z)| z.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Reverse-mode gradients of a scalar loss given `∂loss/∂output`.
    ///
    /// Parameter gradients are summed over the batch rows, so a loss that is
    /// a batch mean must already carry its `1/B` in `output_grad`. Also
    /// returns `∂loss/∂input`.
    pub fn backward(&self, pass: &ForwardPass, output_grad: ArrayView2<'_, f64>) -> Result<(Gradients, Array2<f64>)> {
        if pass.pre_activations.len() != self.layers.len() {
            return Err(Error::shape("forward pass layers", self.layers.len(), pass.pre_activations.len()));
        }
        let out = pass.output();
        if output_grad.dim() != out.dim() {
            return Err(Error::shape(
                "output gradient",
                format!("{:?}", out.dim()),
                format!("{:?}", output_grad.dim()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &pass.pre_activations[i];
            let a = &pass.activations[i + 1];
            let act = layer.spec.activation;
            if act != Activation::Linear {
                ndarray::Zip::from(&mut delta)
                    .and(z)
                    .and(a)
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            }
            let input = &pass.activations[i];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            let next = delta.dot(&layer.weight);
            grads.push(LayerGrad { weight, bias });
            delta = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Overwrites all parameters from a flat vector in [`Network::to_flat`] order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape("flat parameters", self.param_count(), values.len()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = values[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b = values[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Line-oriented text dump: a `layer <in> <out> <activation>` line, then
    /// one line of row-major weights and one line of biases per layer.
    /// Values use shortest round-trip formatting, so loading is lossless.
    pub fn write_checkpoint(&self, out: &mut String) {
        let _ = writeln!(out, "network {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(out, "layer {} {} {}", l.spec.in_dim, l.spec.out_dim, l.spec.activation.name());
            out.push_str(&join_values(l.weight.iter()));
            out.push('\n');
            out.push_str(&join_values(l.bias.iter()));
            out.push('\n');
        }
    }

    pub(crate) fn read_checkpoint<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Self> {
        let bad = |msg: &str| Error::Invalid(format!("checkpoint: {msg}"));
        let header = lines.next().ok_or_else(|| bad("missing network header"))?;
        let count: usize = header
            .strip_prefix("network ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("bad network header"))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let spec_line = lines.next().ok_or_else(|| bad("missing layer line"))?;
            let parts: Vec<&str> = spec_line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "layer" {
                return Err(bad("bad layer line"));
            }
            let in_dim: usize = parts[1].parse().map_err(|_| bad("bad in_dim"))?;
            let out_dim: usize = parts[2].parse().map_err(|_| bad("bad out_dim"))?;
            let activation = Activation::parse(parts[3]).ok_or_else(|| bad("bad activation"))?;
            let weights = parse_values(lines.next().ok_or_else(|| bad("missing weights"))?)?;
            let bias = parse_values(lines.next().ok_or_else(|| bad("missing bias"))?)?;
            let weight = Array2::from_shape_vec((out_dim, in_dim), weights).map_err(|_| bad("weight count"))?;
            layers.push(Layer {
                spec: LayerSpec::new(in_dim, out_dim, activation),
                weight,
                bias: Array1::from_vec(bias),
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        self.write_checkpoint(&mut out);
        write_text(path.as_ref(), &out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut text.lines())
    }
}

fn join_values<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| format_f64(*v)).collect::<Vec<_>>().join(" ")
}

fn parse_values(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Invalid(format!("checkpoint: `{s}` is not a number")))
        })
        .collect()
}

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, net: &Network) -> Self {
        Self {
            config,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Rejects the whole step (leaving
    /// parameters and state untouched) if any gradient is non-finite.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::shape("gradient layers", net.layers.len(), grads.layers.len()));
        }
        for (i, (g, l)) in grads.layers.iter().zip(&net.layers).enumerate() {
            if g.weight.dim() != l.weight.dim() || g.bias.len() != l.bias.len() {
                return Err(Error::shape("gradient block", format!("layer {i}"), "mismatched shape"));
            }
            if g.weight.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} weight")));
            }
            if g.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} bias")));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            ndarray::Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

/// Options for [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check only this many randomly chosen coordinates (seeded).
    pub sample: Option<(usize, u64)>,
    /// Raise the denominator floor to the roundoff level of the central
    /// difference, `FD_NOISE_ULPS · ε · |loss| / step`, divided by the tolerance.
    pub loss_scaled_floor: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            sample: None,
            loss_scaled_floor: false,
        }
    }
}

/// Roundoff allowance, in ulps of the loss, for [`GradCheckOptions::loss_scaled_floor`].
pub const FD_NOISE_ULPS: f64 = 16.0;

/// Denominator floor of the relative error, so that near-zero gradients are
/// compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates skipped because their probes crossed a kink.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// Compares `analytic` against central finite differences of `loss` at `params`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)` with
/// `floor = GRAD_CHECK_FLOOR` unless the loss-scaled floor is enabled.
pub fn gradient_check<F>(mut loss: F, params: &[f64], analytic: &[f64], options: GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    gradient_check_piecewise(|p| (loss(p), ()), params, analytic, options)
}

/// Like [`gradient_check`] for piecewise-smooth losses. `loss` also returns
/// the active piece (for example the sign pattern of every relu input); a
/// coordinate whose two probes land on different pieces straddles a kink and
/// is skipped.
pub fn gradient_check_piecewise<F, P>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    options: GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, P),
    P: PartialEq,
{
    assert_eq!(params.len(), analytic.len(), "parameter and gradient lengths differ");
    let indices: Vec<usize> = match options.sample {
        Some((count, seed)) if count < params.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, params.len(), count).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..params.len()).collect(),
    };
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
        tolerance: options.tolerance,
    };
    for &i in &indices {
        let original = probe[i];
        probe[i] = original + options.step;
        let (plus, piece_plus) = loss(&probe);
        probe[i] = original - options.step;
        let (minus, piece_minus) = loss(&probe);
        probe[i] = original;
        if piece_plus != piece_minus {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let numeric = (plus - minus) / (2.0 * options.step);
        let a = analytic[i];
        let floor = if options.loss_scaled_floor {
            let noise = FD_NOISE_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / options.step;
            GRAD_CHECK_FLOOR.max(noise / options.tolerance)
        } else {
            GRAD_CHECK_FLOOR
        };
        let denom = a.abs().max(numeric.abs()).max(floor);
        let err = (a - numeric).abs() / denom;
        if err > report.max_relative_error || !err.is_finite() {
            report.max_relative_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}
