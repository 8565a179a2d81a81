//! Velocity network: a small fully-connected net with hand-written
//! reverse-mode gradients.
//!
//! The net maps an embedded `(x, t, c)` triple to a velocity vector of the
//! data dimension. Time enters as `(t, sin 2*pi*t, cos 2*pi*t)`, the context
//! id as a one-hot block. Hidden layers use a smooth activation; the output
//! layer is linear.
//!
//! Losses are expressed through [`NetLoss`]: a set of evaluation points plus
//! a rule turning the network outputs at those points into a scalar and the
//! cotangent `dL/dv` per point. [`grad_params`] backpropagates the cotangents
//! through the net and accumulates parameter gradients in a fixed order, so
//! gradients are bit-identical across thread counts. [`finite_diff_check`]
//! verifies any loss against central differences.

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::Stream;
use serde::{Deserialize, Serialize};

/// Width of the time embedding `(t, sin 2*pi*t, cos 2*pi*t)`.
pub const TIME_EMBED_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    /// Softplus `ln(1 + e^z)`, a smooth relu.
    SmoothRelu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            // Stable softplus: max(z, 0) + ln(1 + e^-|z|).
            Activation::SmoothRelu => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// Derivative expressed through the activation value, so the forward
    /// cache only needs to keep activations.
    #[inline]
    fn derivative_from_value(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            // softplus' = sigmoid(z) = 1 - e^-softplus(z).
            Activation::SmoothRelu => 1.0 - (-a).exp(),
        }
    }
}

/// Architecture of the velocity net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Dimension of the data points (and of the output).
    pub data_dim: usize,
    /// Number of discrete context ids (one-hot embedded).
    pub num_contexts: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetConfig {
    pub fn new(data_dim: usize, num_contexts: usize, hidden: Vec<usize>) -> Self {
        Self {
            data_dim,
            num_contexts,
            hidden,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::Config("data_dim must be >= 1".into()));
        }
        if self.num_contexts == 0 {
            return Err(Error::Config("num_contexts must be >= 1".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + TIME_EMBED_DIM + self.num_contexts
    }

    pub fn output_dim(&self) -> usize {
        self.data_dim
    }

    /// Per-layer `(rows, cols)` weight shapes, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim());
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    /// Flat parameter layout: weights and bias per layer, in order.
    pub fn layout(&self) -> Layout {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (l, (rows, cols)) in self.layer_shapes().into_iter().enumerate() {
            entries.push(LayoutEntry {
                name: format!("w{l}"),
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
            entries.push(LayoutEntry {
                name: format!("b{l}"),
                offset,
                rows,
                cols: 1,
            });
            offset += rows;
        }
        Layout { entries }
    }

    pub fn param_len(&self) -> usize {
        self.layout().len()
    }

    /// Writes the embedded input `(x, time features, one-hot context)`.
    pub fn embed(&self, x: &[f64], t: f64, context: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(x);
        out.push(t);
        out.push((std::f64::consts::TAU * t).sin());
        out.push((std::f64::consts::TAU * t).cos());
        for c in 0..self.num_contexts {
            out.push(if c == context { 1.0 } else { 0.0 });
        }
    }
}

/// One block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.rows * e.cols)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Flat parameter vector tied to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(config: &NetConfig) -> Self {
        let layout = config.layout();
        let values = vec![0.0; layout.len()];
        Self { values, layout }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(config: &NetConfig, rng: &mut Stream) -> Self {
        let layout = config.layout();
        let mut values = vec![0.0; layout.len()];
        for entry in &layout.entries {
            if entry.cols == 1 {
                continue; // bias stays zero
            }
            let scale = (6.0 / (entry.rows + entry.cols) as f64).sqrt();
            for v in &mut values[entry.offset..entry.offset + entry.rows * entry.cols] {
                *v = (2.0 * rng.uniform_open() - 1.0) * scale;
            }
        }
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFiniteGradient { index }),
            None => Ok(()),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Activations cached by [`forward_cached`], consumed by [`backward_into`].
pub struct ForwardCache {
    /// `layers[0]` is the embedded input, `layers[l]` the activation output
    /// of hidden layer `l`.
    layers: Vec<Vec<f64>>,
}

fn affine(
    weights: &[f64],
    rows: usize,
    cols: usize,
    bias: &[f64],
    input: &[f64],
    out: &mut Vec<f64>,
) {
    out.clear();
    for r in 0..rows {
        let row = &weights[r * cols..(r + 1) * cols];
        let mut acc = bias[r];
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        out.push(acc);
    }
}

fn check_inputs(config: &NetConfig, params: &ParamVector, t: f64, context: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t });
    }
    if context >= config.num_contexts {
        return Err(Error::UnknownContext {
            context,
            available: config.num_contexts,
        });
    }
    if params.values.len() != config.param_len() {
        return Err(Error::LengthMismatch {
            what: "parameter vector",
            expected: config.param_len(),
            got: params.values.len(),
        });
    }
    Ok(())
}

/// Evaluates the velocity net. Pure: identical inputs give bit-identical
/// outputs.
pub fn forward(config: &NetConfig, params: &ParamVector, x: &[f64], t: f64, context: usize) -> Result<Vec<f64>> {
    forward_cached(config, params, x, t, context).map(|(v, _)| v)
}

/// Forward pass keeping the per-layer activations for backprop.
pub fn forward_cached(
    config: &NetConfig,
    params: &ParamVector,
    x: &[f64],
    t: f64,
    context: usize,
) -> Result<(Vec<f64>, ForwardCache)> {
    check_inputs(config, params, t, context)?;
    let shapes = config.layer_shapes();
    let n_layers = shapes.len();

    let mut layers = Vec::with_capacity(n_layers);
    let mut current = Vec::new();
    config.embed(x, t, context, &mut current);
    let mut next = Vec::new();
    for (l, &(rows, cols)) in shapes.iter().enumerate() {
        let w_off = params.layout.entries[2 * l].offset;
        let b_off = params.layout.entries[2 * l + 1].offset;
        affine(
            &params.values[w_off..w_off + rows * cols],
            rows,
            cols,
            &params.values[b_off..b_off + rows],
            &current,
            &mut next,
        );
        if l + 1 < n_layers {
            for z in next.iter_mut() {
                *z = config.activation.apply(*z);
            }
        }
        layers.push(std::mem::replace(&mut current, std::mem::take(&mut next)));
    }
    if current.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEval);
    }
    Ok((current, ForwardCache { layers }))
}

/// Backpropagates an output cotangent, adding parameter gradients into
/// `grad` and returning nothing else. `grad` must have the full parameter
/// length.
pub fn backward_into(
    config: &NetConfig,
    params: &ParamVector,
    cache: &ForwardCache,
    cotangent: &[f64],
    grad: &mut [f64],
) {
    let shapes = config.layer_shapes();
    let mut delta = cotangent.to_vec();
    for l in (0..shapes.len()).rev() {
        let (rows, cols) = shapes[l];
        let w_off = params.layout.entries[2 * l].offset;
        let b_off = params.layout.entries[2 * l + 1].offset;
        let input = &cache.layers[l];

        for r in 0..rows {
            let d = delta[r];
            grad[b_off + r] += d;
            let g_row = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
            for (g, x) in g_row.iter_mut().zip(input) {
                *g += d * x;
            }
        }

        if l > 0 {
            let weights = &params.values[w_off..w_off + rows * cols];
            let mut prev = vec![0.0; cols];
            for r in 0..rows {
                let d = delta[r];
                let row = &weights[r * cols..(r + 1) * cols];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= config.activation.derivative_from_value(*a);
            }
            delta = prev;
        }
    }
}

/// One network query a loss depends on.
#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub x: Vec<f64>,
    pub t: f64,
    pub context: usize,
}

/// A scalar loss over a batch of network evaluations.
///
/// Implementations may combine the outputs with affine maps, the supported
/// activations, squares, logs, sums, min, and clipping (clipping and min
/// differentiate as piecewise-constant-slope).
pub trait NetLoss {
    fn eval_points(&self) -> &[EvalPoint];

    /// Loss value and the cotangent `dL/dv` for every evaluation point.
    fn value_and_cotangents(&self, outputs: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>);

    fn value(&self, outputs: &[Vec<f64>]) -> f64 {
        self.value_and_cotangents(outputs).0
    }
}

/// Runs the forward passes of a loss, in parallel, in index order.
pub fn loss_outputs<L: NetLoss + ?Sized>(
    config: &NetConfig,
    params: &ParamVector,
    loss: &L,
) -> Result<Vec<Vec<f64>>> {
    let points = loss.eval_points();
    exec::map_indexed(points.len(), |i| {
        let p = &points[i];
        forward(config, params, &p.x, p.t, p.context)
    })
    .into_iter()
    .collect()
}

pub fn loss_value<L: NetLoss + ?Sized>(
    config: &NetConfig,
    params: &ParamVector,
    loss: &L,
) -> Result<f64> {
    Ok(loss.value(&loss_outputs(config, params, loss)?))
}

pub struct GradOutput {
    pub value: f64,
    pub grad: ParamVector,
    /// Network outputs per evaluation point, for callers that derive
    /// side statistics from the same pass.
    pub outputs: Vec<Vec<f64>>,
}

/// Loss value plus its parameter gradient.
///
/// Forward and backward passes over evaluation points run in parallel; the
/// per-point gradients are summed in point order, so the result does not
/// depend on the thread count.
pub fn grad_params<L: NetLoss + ?Sized>(
    config: &NetConfig,
    params: &ParamVector,
    loss: &L,
) -> Result<GradOutput> {
    let points = loss.eval_points();
    let passes: Vec<(Vec<f64>, ForwardCache)> =
        exec::map_indexed(points.len(), |i| {
            let p = &points[i];
            forward_cached(config, params, &p.x, p.t, p.context)
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let outputs: Vec<Vec<f64>> = passes.iter().map(|(v, _)| v.clone()).collect();
    let (value, cotangents) = loss.value_and_cotangents(&outputs);
    assert_eq!(cotangents.len(), points.len(), "one cotangent per eval point");

    let partials: Vec<Vec<f64>> = exec::map_indexed(points.len(), |i| {
        let mut g = vec![0.0; params.len()];
        if cotangents[i].iter().any(|c| *c != 0.0) {
            backward_into(config, params, &passes[i].1, &cotangents[i], &mut g);
        }
        g
    });

    let mut grad = ParamVector {
        values: vec![0.0; params.len()],
        layout: params.layout.clone(),
    };
    for partial in &partials {
        for (g, p) in grad.values.iter_mut().zip(partial) {
            *g += p;
        }
    }
    Ok(GradOutput {
        value,
        grad,
        outputs,
    })
}

/// Max relative error of the analytic gradient against central differences:
/// `max_j |analytic_j - central_j| / max(1e-12, |central_j|)`.
pub fn finite_diff_check<L: NetLoss + Sync + ?Sized>(
    config: &NetConfig,
    params: &ParamVector,
    loss: &L,
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = grad_params(config, params, loss)?.grad;
    let errors = exec::map_indexed(params.len(), |j| -> Result<f64> {
        let mut shifted = params.clone();
        shifted.values[j] = params.values[j] + h;
        let plus = loss_value(config, &shifted, loss)?;
        shifted.values[j] = params.values[j] - h;
        let minus = loss_value(config, &shifted, loss)?;
        let central = (plus - minus) / (2.0 * h);
        Ok((analytic.values[j] - central).abs() / central.abs().max(1e-12))
    });
    let mut max_err = 0.0f64;
    for e in errors {
        max_err = max_err.max(e?);
    }
    Ok(max_err)
}
