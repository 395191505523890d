//! Feed-forward predictor with exact per-example gradients and
//! Hessian-vector products.
//!
//! Parameters live in one flat vector. Each layer occupies a contiguous
//! block: the weight matrix in row-major `(fan_out, fan_in)` order followed by
//! the bias vector. Hidden layers apply the configured activation; the output
//! layer is linear and feeds the loss directly.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ExampleId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// First derivative; ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    #[inline]
    fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// `(y_hat - y)^2` on a scalar output, without the one-half factor.
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub loss_kind: LossKind,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, loss_kind: LossKind) -> Self {
        Self {
            layer_widths,
            activation,
            loss_kind,
            init_seed: 0,
            init_scale: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::invalid(
                "a model needs at least input and output widths",
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.loss_kind == LossKind::SoftmaxCrossEntropy && self.output_width() < 2 {
            return Err(Error::invalid(
                "softmax cross-entropy needs at least 2 outputs",
            ));
        }
        if self.loss_kind == LossKind::MeanSquaredError && self.output_width() != 1 {
            return Err(Error::invalid("mean squared error expects a scalar output"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("init_scale must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let layers = self
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(index, w)| {
                let shape = LayerShape {
                    index,
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += shape.len();
                shape
            })
            .collect();
        Layout {
            layers,
            len: offset,
        }
    }

    /// Uniform(-s, s) per layer with `s = init_scale / sqrt(fan_in)`.
    pub fn init_state(&self) -> Result<ModelState> {
        self.validate()?;
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut params = vec![0.0; layout.len()];
        for layer in layout.layers() {
            let s = self.init_scale / (layer.fan_in as f64).sqrt();
            for p in &mut params[layer.range()] {
                let u: f64 = rng.random();
                *p = s * (2.0 * u - 1.0);
            }
        }
        Ok(ModelState {
            params,
            layout: Arc::new(layout),
            spec: Arc::new(self.clone()),
        })
    }
}

/// One fully connected layer's location inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub index: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weight_len()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.offset + self.weight_len()..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    layers: Vec<LayerShape>,
    len: usize,
}

impl Layout {
    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Resolve a layer identifier against the layers present in this layout.
    pub fn layer(&self, id: LayerId) -> Result<&LayerShape> {
        match id {
            LayerId::Last => self
                .layers
                .iter()
                .max_by_key(|l| l.index)
                .ok_or_else(|| Error::UnknownLayer(id.to_string())),
            LayerId::Index(i) => self
                .layers
                .iter()
                .find(|l| l.index == i)
                .ok_or_else(|| Error::UnknownLayer(id.to_string())),
        }
    }

    fn single(shape: &LayerShape) -> Layout {
        let rebased = LayerShape {
            offset: 0,
            ..*shape
        };
        Layout {
            layers: vec![rebased],
            len: rebased.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerId {
    Index(usize),
    Last,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Index(i) => write!(f, "{i}"),
            LayerId::Last => f.write_str("last"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LayerId::Last),
            other => other
                .parse()
                .map(LayerId::Index)
                .map_err(|_| Error::UnknownLayer(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    params: Vec<f64>,
    layout: Arc<Layout>,
    spec: Arc<ModelSpec>,
}

impl ModelState {
    pub fn from_params(spec: &ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if params.len() != layout.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericOverflow("non-finite parameter".into()));
        }
        Ok(Self {
            params,
            layout: Arc::new(layout),
            spec: Arc::new(spec.clone()),
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// A copy with `params + scale * direction`.
    pub fn perturbed(&self, direction: &GradientVector, scale: f64) -> Result<Self> {
        self.check_aligned(direction)?;
        let mut out = self.clone();
        for (p, d) in out.params.iter_mut().zip(&direction.values) {
            *p += scale * d;
        }
        Ok(out)
    }

    pub fn zero_gradient(&self) -> GradientVector {
        GradientVector {
            values: vec![0.0; self.params.len()],
            layout: Arc::clone(&self.layout),
        }
    }

    pub(crate) fn check_aligned(&self, g: &GradientVector) -> Result<()> {
        if *g.layout != *self.layout {
            return Err(Error::shape(format!(
                "vector of length {} is not aligned with a state of length {}",
                g.len(),
                self.len()
            )));
        }
        Ok(())
    }

    fn weights(&self, layer: &LayerShape) -> &[f64] {
        &self.params[layer.weight_range()]
    }

    fn bias(&self, layer: &LayerShape) -> &[f64] {
        &self.params[layer.bias_range()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match *self {
            Target::Class(c) => Some(c),
            Target::Value(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: ExampleId,
    pub features: Vec<f64>,
    pub label: Target,
    /// Original class for examples that went through label corruption.
    pub true_label: Option<usize>,
}

impl Example {
    pub fn new(id: ExampleId, features: Vec<f64>, label: Target) -> Self {
        Self {
            id,
            features,
            label,
            true_label: None,
        }
    }

    pub fn classified(id: ExampleId, features: Vec<f64>, class: usize) -> Self {
        Self::new(id, features, Target::Class(class))
    }

    /// True when corruption changed this example's label.
    pub fn is_mislabelled(&self) -> bool {
        match (self.true_label, self.label) {
            (Some(t), Target::Class(c)) => t != c,
            _ => false,
        }
    }
}

/// A vector in parameter space: a gradient, an HVP result or a direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn aligned_with(state: &ModelState, values: Vec<f64>) -> Result<Self> {
        Self::new(values, Arc::clone(state.layout()))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> Result<f64> {
        if self.layout != other.layout && *self.layout != *other.layout {
            return Err(Error::shape(
                "dot product of vectors with different layouts",
            ));
        }
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Weight block of one layer (bias excluded), row-major `(fan_out, fan_in)`.
    pub fn weights_of(&self, layer: LayerId) -> Result<&[f64]> {
        let shape = self.layout.layer(layer)?;
        Ok(&self.values[shape.weight_range()])
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Restrict a vector to one layer's weights and bias.
pub fn layer_slice(g: &GradientVector, layer: LayerId) -> Result<GradientVector> {
    let shape = g.layout.layer(layer)?;
    Ok(GradientVector {
        values: g.values[shape.range()].to_vec(),
        layout: Arc::new(Layout::single(shape)),
    })
}

/// Activations of one forward pass. `acts[0]` is the input, `acts[L]` the
/// output logits; `pre[l]` is the pre-activation of layer `l`.
pub(crate) struct Forward {
    pub(crate) pre: Vec<Vec<f64>>,
    pub(crate) acts: Vec<Vec<f64>>,
}

impl Forward {
    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

fn check_example(state: &ModelState, example: &Example) -> Result<()> {
    let spec = state.spec();
    if example.features.len() != spec.input_width() {
        return Err(Error::shape(format!(
            "example {} has {} features, model expects {}",
            example.id,
            example.features.len(),
            spec.input_width()
        )));
    }
    match (spec.loss_kind, example.label) {
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) if c < spec.output_width() => Ok(()),
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => Err(Error::shape(format!(
            "example {} has class {c} but the model has {} outputs",
            example.id,
            spec.output_width()
        ))),
        (LossKind::MeanSquaredError, Target::Value(_)) => Ok(()),
        _ => Err(Error::shape(format!(
            "example {} target does not match the model's loss",
            example.id
        ))),
    }
}

pub(crate) fn forward(state: &ModelState, features: &[f64]) -> Result<Forward> {
    if features.len() != state.spec().input_width() {
        return Err(Error::shape(format!(
            "{} features for a model with input width {}",
            features.len(),
            state.spec().input_width()
        )));
    }
    let activation = state.spec().activation;
    let layers = state.layout().layers();
    let mut pre = Vec::with_capacity(layers.len());
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(features.to_vec());
    for (l, layer) in layers.iter().enumerate() {
        let w = state.weights(layer);
        let b = state.bias(layer);
        let input = &acts[l];
        let z: Vec<f64> = (0..layer.fan_out)
            .map(|o| b[o] + dot(&w[o * layer.fan_in..(o + 1) * layer.fan_in], input))
            .collect();
        let a = if l + 1 == layers.len() {
            z.clone()
        } else {
            z.iter().map(|&v| activation.apply(v)).collect()
        };
        pre.push(z);
        acts.push(a);
    }
    let fwd = Forward { pre, acts };
    if fwd.logits().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("non-finite network output".into()));
    }
    Ok(fwd)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn loss_from_logits(kind: LossKind, logits: &[f64], target: Target) -> f64 {
    match (kind, target) {
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            lse - logits[c]
        }
        (LossKind::MeanSquaredError, Target::Value(y)) => {
            let r = logits[0] - y;
            r * r
        }
        _ => unreachable!("target checked against loss kind"),
    }
}

/// `loss(to) - loss(from)` computed without cancelling the two losses, so tiny
/// decreases stay resolvable.
pub(crate) fn loss_change(kind: LossKind, from: &[f64], to: &[f64], target: Target) -> f64 {
    match (kind, target) {
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
            let p = softmax(from);
            let lse_change = p
                .iter()
                .zip(from.iter().zip(to))
                .map(|(pk, (a, b))| pk * (b - a).exp_m1())
                .sum::<f64>()
                .ln_1p();
            lse_change - (to[c] - from[c])
        }
        (LossKind::MeanSquaredError, Target::Value(y)) => {
            (to[0] - from[0]) * (to[0] + from[0] - 2.0 * y)
        }
        _ => unreachable!("target checked against loss kind"),
    }
}

/// d loss / d logits.
pub(crate) fn output_delta(kind: LossKind, logits: &[f64], target: Target) -> Vec<f64> {
    match (kind, target) {
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
            let mut p = softmax(logits);
            p[c] -= 1.0;
            p
        }
        (LossKind::MeanSquaredError, Target::Value(y)) => vec![2.0 * (logits[0] - y)],
        _ => unreachable!("target checked against loss kind"),
    }
}

/// Loss Hessian w.r.t. the logits applied to `r`.
fn output_hessian_apply(kind: LossKind, logits: &[f64], r: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let p = softmax(logits);
            let pr = dot(&p, r);
            p.iter().zip(r).map(|(pi, ri)| pi * (ri - pr)).collect()
        }
        LossKind::MeanSquaredError => r.iter().map(|v| 2.0 * v).collect(),
    }
}

/// Backpropagated d loss / d pre-activation for every layer.
pub(crate) fn backward_deltas(state: &ModelState, fwd: &Forward, target: Target) -> Vec<Vec<f64>> {
    let spec = state.spec();
    let layers = state.layout().layers();
    let n = layers.len();
    let mut deltas = vec![Vec::new(); n];
    deltas[n - 1] = output_delta(spec.loss_kind, fwd.logits(), target);
    for l in (1..n).rev() {
        let layer = &layers[l];
        let w = state.weights(layer);
        let delta = &deltas[l];
        let mut back = vec![0.0; layer.fan_in];
        for (o, d) in delta.iter().enumerate() {
            let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
            for (b, wv) in back.iter_mut().zip(row) {
                *b += wv * d;
            }
        }
        for (b, z) in back.iter_mut().zip(&fwd.pre[l - 1]) {
            *b *= spec.activation.derivative(*z);
        }
        deltas[l - 1] = back;
    }
    deltas
}

fn accumulate_gradient(
    state: &ModelState,
    fwd: &Forward,
    deltas: &[Vec<f64>],
    scale: f64,
    out: &mut [f64],
) {
    for (l, layer) in state.layout().layers().iter().enumerate() {
        let input = &fwd.acts[l];
        let delta = &deltas[l];
        let gw = &mut out[layer.weight_range()];
        for (o, d) in delta.iter().enumerate() {
            let row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
            for (g, x) in row.iter_mut().zip(input) {
                *g += scale * d * x;
            }
        }
        for (g, d) in out[layer.bias_range()].iter_mut().zip(delta) {
            *g += scale * d;
        }
    }
}

pub fn loss(state: &ModelState, example: &Example) -> Result<f64> {
    check_example(state, example)?;
    let fwd = forward(state, &example.features)?;
    let value = loss_from_logits(state.spec().loss_kind, fwd.logits(), example.label);
    if !value.is_finite() {
        return Err(Error::NumericOverflow(format!(
            "non-finite loss on example {}",
            example.id
        )));
    }
    Ok(value)
}

pub fn loss_and_gradient(state: &ModelState, example: &Example) -> Result<(f64, GradientVector)> {
    check_example(state, example)?;
    let fwd = forward(state, &example.features)?;
    let value = loss_from_logits(state.spec().loss_kind, fwd.logits(), example.label);
    if !value.is_finite() {
        return Err(Error::NumericOverflow(format!(
            "non-finite loss on example {}",
            example.id
        )));
    }
    let deltas = backward_deltas(state, &fwd, example.label);
    let mut g = state.zero_gradient();
    accumulate_gradient(state, &fwd, &deltas, 1.0, &mut g.values);
    Ok((value, g))
}

pub fn per_example_gradient(state: &ModelState, example: &Example) -> Result<GradientVector> {
    loss_and_gradient(state, example).map(|(_, g)| g)
}

/// Mean of per-example gradients, summed in batch order.
pub fn batch_gradient<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
) -> Result<GradientVector> {
    let mut g = state.zero_gradient();
    let mut count = 0usize;
    for example in batch {
        check_example(state, example)?;
        let fwd = forward(state, &example.features)?;
        let deltas = backward_deltas(state, &fwd, example.label);
        accumulate_gradient(state, &fwd, &deltas, 1.0, &mut g.values);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    g.scale(1.0 / count as f64);
    Ok(g)
}

/// Mean loss over a batch together with its mean gradient.
pub fn batch_loss_and_gradient<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
) -> Result<(f64, GradientVector)> {
    let mut g = state.zero_gradient();
    let mut total = 0.0;
    let mut count = 0usize;
    for example in batch {
        check_example(state, example)?;
        let fwd = forward(state, &example.features)?;
        total += loss_from_logits(state.spec().loss_kind, fwd.logits(), example.label);
        let deltas = backward_deltas(state, &fwd, example.label);
        accumulate_gradient(state, &fwd, &deltas, 1.0, &mut g.values);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / count as f64;
    g.scale(inv);
    Ok((total * inv, g))
}

/// Pearlmutter R-operator pass for one example; adds `scale * H v` to `out`.
fn hvp_accumulate(
    state: &ModelState,
    fwd: &Forward,
    deltas: &[Vec<f64>],
    v: &[f64],
    scale: f64,
    out: &mut [f64],
) {
    let spec = state.spec();
    let act = spec.activation;
    let layers = state.layout().layers();
    let n = layers.len();

    // Forward directional derivatives.
    let mut r_pre: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r_acts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    r_acts.push(vec![0.0; layers[0].fan_in]);
    for (l, layer) in layers.iter().enumerate() {
        let w = state.weights(layer);
        let vw = &v[layer.weight_range()];
        let vb = &v[layer.bias_range()];
        let input = &fwd.acts[l];
        let r_input = &r_acts[l];
        let rz: Vec<f64> = (0..layer.fan_out)
            .map(|o| {
                let row = o * layer.fan_in..(o + 1) * layer.fan_in;
                vb[o] + dot(&vw[row.clone()], input) + dot(&w[row], r_input)
            })
            .collect();
        let ra = if l + 1 == n {
            rz.clone()
        } else {
            rz.iter()
                .zip(&fwd.pre[l])
                .map(|(r, z)| act.derivative(*z) * r)
                .collect()
        };
        r_pre.push(rz);
        r_acts.push(ra);
    }

    // Backward directional derivatives.
    let mut r_delta = output_hessian_apply(spec.loss_kind, fwd.logits(), &r_pre[n - 1]);
    for l in (0..n).rev() {
        let layer = &layers[l];
        let input = &fwd.acts[l];
        let r_input = &r_acts[l];
        let delta = &deltas[l];
        {
            let gw = &mut out[layer.weight_range()];
            for o in 0..layer.fan_out {
                let row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (i, g) in row.iter_mut().enumerate() {
                    *g += scale * (r_delta[o] * input[i] + delta[o] * r_input[i]);
                }
            }
        }
        for (g, rd) in out[layer.bias_range()].iter_mut().zip(&r_delta) {
            *g += scale * rd;
        }
        if l == 0 {
            break;
        }
        let w = state.weights(layer);
        let vw = &v[layer.weight_range()];
        let mut back = vec![0.0; layer.fan_in];
        let mut r_back = vec![0.0; layer.fan_in];
        for o in 0..layer.fan_out {
            let row = o * layer.fan_in..(o + 1) * layer.fan_in;
            for ((i, wv), vwv) in w[row.clone()].iter().enumerate().zip(&vw[row]) {
                back[i] += wv * delta[o];
                r_back[i] += vwv * delta[o] + wv * r_delta[o];
            }
        }
        let z_prev = &fwd.pre[l - 1];
        let rz_prev = &r_pre[l - 1];
        r_delta = (0..layer.fan_in)
            .map(|i| {
                r_back[i] * act.derivative(z_prev[i])
                    + back[i] * act.second_derivative(z_prev[i]) * rz_prev[i]
            })
            .collect();
    }
}

/// Mean Hessian of the batch loss applied to `v`, without forming the Hessian.
pub fn hessian_vector_product<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
    v: &GradientVector,
) -> Result<GradientVector> {
    state.check_aligned(v)?;
    let mut out = hessian_multi_product(state, batch, std::slice::from_ref(&v.values))?;
    Ok(GradientVector {
        values: out.pop().expect("one direction"),
        layout: Arc::clone(state.layout()),
    })
}

/// Mean batch Hessian applied to several raw directions, sharing one forward
/// and backward pass per example.
pub fn hessian_multi_product<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
    directions: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let p = state.len();
    if let Some(bad) = directions.iter().find(|d| d.len() != p) {
        return Err(Error::shape(format!(
            "direction of length {} for a state of length {p}",
            bad.len()
        )));
    }
    let mut out = vec![vec![0.0; p]; directions.len()];
    let mut count = 0usize;
    for example in batch {
        check_example(state, example)?;
        let fwd = forward(state, &example.features)?;
        let deltas = backward_deltas(state, &fwd, example.label);
        for (v, acc) in directions.iter().zip(out.iter_mut()) {
            hvp_accumulate(state, &fwd, &deltas, v, 1.0, acc);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / count as f64;
    for acc in &mut out {
        acc.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(out)
}

pub fn predict(state: &ModelState, features: &[f64]) -> Result<Vec<f64>> {
    forward(state, features).map(|f| f.acts.last().cloned().unwrap_or_default())
}

pub fn predicted_class(state: &ModelState, features: &[f64]) -> Result<usize> {
    let logits = predict(state, features)?;
    Ok(argmax(&logits))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn is_misclassified(state: &ModelState, example: &Example) -> Result<bool> {
    match example.label {
        Target::Class(c) => Ok(predicted_class(state, &example.features)? != c),
        Target::Value(_) => Ok(false),
    }
}

pub fn accuracy(state: &ModelState, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut correct = 0usize;
    for ex in examples {
        if !is_misclassified(state, ex)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

pub fn mean_loss(state: &ModelState, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("mean loss of an empty set"));
    }
    let mut total = 0.0;
    for ex in examples {
        total += loss(state, ex)?;
    }
    Ok(total / examples.len() as f64)
}

/// Output of the last hidden layer (the input to the output layer).
pub fn last_hidden(state: &ModelState, features: &[f64]) -> Result<Vec<f64>> {
    let fwd = forward(state, features)?;
    Ok(fwd.acts[fwd.acts.len() - 2].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec(widths: &[usize], act: Activation, seed: u64) -> ModelSpec {
        ModelSpec::new(widths.to_vec(), act, LossKind::SoftmaxCrossEntropy).with_seed(seed)
    }

    fn random_example(rng: &mut ChaCha8Rng, dim: usize, classes: usize) -> Example {
        let features = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        Example::classified(0, features, rng.random_range(0..classes))
    }

    #[test]
    fn loss_change_matches_difference_of_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect();
            let y = Target::Class(rng.random_range(0..4));
            let direct = loss_from_logits(LossKind::SoftmaxCrossEntropy, &b, y)
                - loss_from_logits(LossKind::SoftmaxCrossEntropy, &a, y);
            let change = loss_change(LossKind::SoftmaxCrossEntropy, &a, &b, y);
            assert!((direct - change).abs() < 1e-12);
        }
        let y = Target::Value(0.5);
        let direct = loss_from_logits(LossKind::MeanSquaredError, &[2.0], y)
            - loss_from_logits(LossKind::MeanSquaredError, &[1.25], y);
        assert!(
            (loss_change(LossKind::MeanSquaredError, &[1.25], &[2.0], y) - direct).abs() < 1e-14
        );
    }

    #[test]
    fn loss_change_resolves_tiny_steps() {
        let a = [1.0, -0.5, 2.0];
        let b = [1.0 + 1e-9, -0.5, 2.0 - 1e-9];
        let change = loss_change(LossKind::SoftmaxCrossEntropy, &a, &b, Target::Class(2));
        let p = softmax(&a);
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).collect();
        let first_order = p[0] * d[0] + p[2] * d[2] - d[2];
        assert!((change - first_order).abs() < 1e-17);
    }

    fn fd_gradient(state: &ModelState, ex: &Example, h: f64) -> Vec<f64> {
        (0..state.len())
            .map(|i| {
                let mut plus = state.clone();
                plus.params_mut()[i] += h;
                let mut minus = state.clone();
                minus.params_mut()[i] -= h;
                (loss(&plus, ex).unwrap() - loss(&minus, ex).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_uniform_cross_entropy() {
        let spec = tiny_spec(&[3, 2], Activation::Tanh, 0).with_scale(0.0);
        let state = spec.init_state().unwrap();
        let ex = Example::classified(0, vec![0.3, -2.0, 5.0], 1);
        assert!((loss(&state, &ex).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn exact_regression_fit_has_zero_loss_and_gradient() {
        let spec = ModelSpec::new(vec![2, 1], Activation::Tanh, LossKind::MeanSquaredError);
        let state = ModelState::from_params(&spec, vec![1.0, 2.0, 0.5]).unwrap();
        let ex = Example::new(0, vec![1.0, 1.0], Target::Value(3.5));
        assert_eq!(loss(&state, &ex).unwrap(), 0.0);
        assert!(per_example_gradient(&state, &ex)
            .unwrap()
            .values()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn hand_evaluated_cross_entropy() {
        // h = tanh([0.5*1 - 0.3*2 + 0.1, -0.2*1 + 0.4*2 - 0.1])
        // logits = [0.7*h0 - 0.6*h1 + 0.2, 0.3*h0 + 0.9*h1 - 0.4]
        let spec = tiny_spec(&[2, 2, 2], Activation::Tanh, 0);
        let params = vec![
            0.5, -0.3, -0.2, 0.4, 0.1, -0.1, // layer 0
            0.7, -0.6, 0.3, 0.9, 0.2, -0.4, // layer 1
        ];
        let state = ModelState::from_params(&spec, params).unwrap();
        let ex = Example::classified(0, vec![1.0, 2.0], 1);
        // Evaluated independently in scalar arithmetic.
        let expected = 0.647_644_134_998_164_9;
        assert!((loss(&state, &ex).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100u64 {
            let act = if trial % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            let spec = tiny_spec(&[3, 4, 3], act, trial).with_scale(1.5);
            let state = spec.init_state().unwrap();
            let ex = random_example(&mut rng, 3, 3);
            let g = per_example_gradient(&state, &ex).unwrap();
            let fd = fd_gradient(&state, &ex, 1e-4);
            for (a, b) in g.values().iter().zip(&fd) {
                let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
                // ReLU kinks inside the FD stencil are the only legitimate outliers.
                if act == Activation::Tanh {
                    assert!(
                        err < 1e-4 || (a - b).abs() < 1e-7,
                        "trial {trial}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn last_layer_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = tiny_spec(&[4, 5, 3], Activation::Tanh, 11);
        let state = spec.init_state().unwrap();
        let ex = random_example(&mut rng, 4, 3);
        let g = per_example_gradient(&state, &ex).unwrap();
        let logits = predict(&state, &ex.features).unwrap();
        let mut delta = softmax(&logits);
        delta[ex.label.class().unwrap()] -= 1.0;
        let h = last_hidden(&state, &ex.features).unwrap();
        let w = g.weights_of(LayerId::Last).unwrap();
        for o in 0..3 {
            for i in 0..5 {
                assert!((w[o * 5 + i] - delta[o] * h[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn batch_gradient_is_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = tiny_spec(&[3, 4, 2], Activation::Tanh, 2);
        let state = spec.init_state().unwrap();
        let batch: Vec<Example> = (0..5).map(|_| random_example(&mut rng, 3, 2)).collect();
        let mean = batch_gradient(&state, &batch).unwrap();
        let mut direct = vec![0.0; state.len()];
        for ex in &batch {
            for (d, g) in direct
                .iter_mut()
                .zip(per_example_gradient(&state, ex).unwrap().values())
            {
                *d += g / 5.0;
            }
        }
        for (a, b) in mean.values().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
        let single = batch_gradient(&state, &batch[..1]).unwrap();
        assert_eq!(single, per_example_gradient(&state, &batch[0]).unwrap());
        let dup = batch_gradient(&state, [&batch[1], &batch[1]]).unwrap();
        assert_eq!(dup, per_example_gradient(&state, &batch[1]).unwrap());
        assert!(matches!(
            batch_gradient(&state, &Vec::<Example>::new()),
            Err(Error::EmptyBatch)
        ));
    }

    #[allow(clippy::needless_range_loop)]
    fn dense_hessian_fd(state: &ModelState, batch: &[Example], h: f64) -> Vec<Vec<f64>> {
        // Differentiate each gradient coordinate by central differences.
        let p = state.len();
        let mut hess = vec![vec![0.0; p]; p];
        for j in 0..p {
            let mut plus = state.clone();
            plus.params_mut()[j] += h;
            let mut minus = state.clone();
            minus.params_mut()[j] -= h;
            let gp = batch_gradient(&plus, batch).unwrap();
            let gm = batch_gradient(&minus, batch).unwrap();
            for i in 0..p {
                hess[i][j] = (gp.values()[i] - gm.values()[i]) / (2.0 * h);
            }
        }
        hess
    }

    #[test]
    fn hvp_matches_dense_hessian_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = tiny_spec(&[3, 4, 3], Activation::Tanh, 4).with_scale(1.5);
        let state = spec.init_state().unwrap();
        assert!(state.len() <= 50);
        let batch: Vec<Example> = (0..4).map(|_| random_example(&mut rng, 3, 3)).collect();
        let v: Vec<f64> = (0..state.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let v = GradientVector::aligned_with(&state, v).unwrap();
        let hv = hessian_vector_product(&state, &batch, &v).unwrap();

        let hess = dense_hessian_fd(&state, &batch, 1e-5);
        for (i, row) in hess.iter().enumerate() {
            let expected = dot(row, v.values());
            assert!((hv.values()[i] - expected).abs() < 1e-6, "{i}");
        }

        let h = 1e-4;
        let gp = batch_gradient(&state.perturbed(&v, h).unwrap(), &batch).unwrap();
        let gm = batch_gradient(&state.perturbed(&v, -h).unwrap(), &batch).unwrap();
        for i in 0..state.len() {
            let fd = (gp.values()[i] - gm.values()[i]) / (2.0 * h);
            let a = hv.values()[i];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7) < 1e-3 || (a - fd).abs() < 1e-8
            );
        }

        let zero = state.zero_gradient();
        let hz = hessian_vector_product(&state, &batch, &zero).unwrap();
        assert!(hz.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mse_hvp_matches_dense_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let spec = ModelSpec::new(vec![2, 5, 1], Activation::Tanh, LossKind::MeanSquaredError)
            .with_seed(3);
        let state = spec.init_state().unwrap();
        let batch: Vec<Example> = (0..3)
            .map(|i| {
                Example::new(
                    i,
                    vec![rng.random(), rng.random()],
                    Target::Value(rng.random()),
                )
            })
            .collect();
        let hess = dense_hessian_fd(&state, &batch, 1e-5);
        for j in 0..state.len() {
            let mut e = vec![0.0; state.len()];
            e[j] = 1.0;
            let col = hessian_multi_product(&state, &batch, &[e])
                .unwrap()
                .pop()
                .unwrap();
            for i in 0..state.len() {
                assert!((col[i] - hess[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_slices_partition_the_vector() {
        let spec = tiny_spec(&[3, 4, 5, 2], Activation::Relu, 1);
        let state = spec.init_state().unwrap();
        let ex = Example::classified(0, vec![0.2, 0.4, -0.1], 1);
        let g = per_example_gradient(&state, &ex).unwrap();
        let mut joined = Vec::new();
        for i in 0..spec.num_layers() {
            joined.extend_from_slice(layer_slice(&g, LayerId::Index(i)).unwrap().values());
        }
        assert_eq!(joined, g.values());
        let last = layer_slice(&g, LayerId::Last).unwrap();
        assert_eq!(last.len(), (5 + 1) * 2);
        let zero = layer_slice(&state.zero_gradient(), LayerId::Index(1)).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
        assert!(matches!(
            layer_slice(&g, LayerId::Index(9)),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn shape_errors_are_reported() {
        let spec = tiny_spec(&[3, 2], Activation::Tanh, 0);
        let state = spec.init_state().unwrap();
        let wrong_dim = Example::classified(0, vec![1.0], 0);
        assert!(matches!(loss(&state, &wrong_dim), Err(Error::Shape(_))));
        let wrong_class = Example::classified(0, vec![1.0, 2.0, 3.0], 2);
        assert!(matches!(loss(&state, &wrong_class), Err(Error::Shape(_))));
        assert!(
            ModelSpec::new(vec![3], Activation::Tanh, LossKind::SoftmaxCrossEntropy)
                .validate()
                .is_err()
        );
        assert!(
            ModelSpec::new(vec![3, 1], Activation::Tanh, LossKind::SoftmaxCrossEntropy)
                .validate()
                .is_err()
        );
    }

    #[test]
    fn overflow_is_explicit() {
        let spec = tiny_spec(&[1, 2], Activation::Tanh, 0);
        let state = ModelState::from_params(&spec, vec![1e308, 0.0, 1e308, 0.0]).unwrap();
        let ex = Example::classified(0, vec![10.0], 0);
        assert!(matches!(loss(&state, &ex), Err(Error::NumericOverflow(_))));
    }

    #[test]
    fn small_step_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..100 {
            let spec = tiny_spec(&[3, 4, 3], Activation::Tanh, trial);
            let state = spec.init_state().unwrap();
            let ex = random_example(&mut rng, 3, 3);
            let (l0, g) = loss_and_gradient(&state, &ex).unwrap();
            let stepped = state.perturbed(&g, -1e-4).unwrap();
            assert!(loss(&stepped, &ex).unwrap() < l0);
        }
    }

    #[test]
    fn gradients_are_bit_deterministic() {
        let spec = tiny_spec(&[3, 6, 3], Activation::Tanh, 99);
        let a = spec.init_state().unwrap();
        let b = spec.init_state().unwrap();
        let ex = Example::classified(0, vec![0.1, 0.2, 0.3], 2);
        let ga = per_example_gradient(&a, &ex).unwrap();
        let gb = per_example_gradient(&b, &ex).unwrap();
        assert!(ga
            .values()
            .iter()
            .zip(gb.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
