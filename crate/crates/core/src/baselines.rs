//! Influence-function and representer-point baselines.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, dot, Example, ExampleId, LayerId, ModelState, Target};
use crate::sketch::{Projector, SketchMode, SketchSpec, SketchedGradient};

/// Largest scoped parameter count for which the dense Hessian is formed.
pub const DIRECT_MAX_PARAMS: usize = 4000;
pub const DEFAULT_HESSIAN_DAMPING: f64 = 1e-3;
pub const DEFAULT_REPRESENTER_LAMBDA: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianScope {
    LastLayer,
    AllParams,
}

impl HessianScope {
    pub fn range(self, state: &ModelState) -> Result<std::ops::Range<usize>> {
        Ok(match self {
            HessianScope::LastLayer => state.layout().layer(LayerId::Last)?.range(),
            HessianScope::AllParams => 0..state.len(),
        })
    }
}

fn scoped_gradient(state: &ModelState, z: &Example, scope: HessianScope) -> Result<Vec<f64>> {
    let g = model::per_example_gradient(state, z)?;
    Ok(g.values()[scope.range(state)?].to_vec())
}

/// Mean batch Hessian restricted to the scope, applied to scoped directions.
fn scoped_hvp<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
    scope: HessianScope,
    directions: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let range = scope.range(state)?;
    let full: Vec<Vec<f64>> = directions
        .iter()
        .map(|d| {
            let mut v = vec![0.0; state.len()];
            v[range.clone()].copy_from_slice(d);
            v
        })
        .collect();
    Ok(model::hessian_multi_product(state, batch, &full)?
        .into_iter()
        .map(|v| v[range.clone()].to_vec())
        .collect())
}

/// Dense scoped Hessian of the mean training loss plus `damping * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct DampedHessian {
    pub scope: HessianScope,
    pub damping: f64,
    /// Undamped, symmetrized.
    pub matrix: DMatrix<f64>,
}

impl DampedHessian {
    pub fn build(
        state: &ModelState,
        dataset: &[Example],
        scope: HessianScope,
        damping: f64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let p = scope.range(state)?.len();
        if p > DIRECT_MAX_PARAMS {
            return Err(Error::Unsupported(format!(
                "direct inversion is limited to {DIRECT_MAX_PARAMS} parameters (scope has {p}); use the sketched estimator"
            )));
        }
        let columns = (0..p)
            .collect::<Vec<_>>()
            .par_chunks(32)
            .map(|chunk| {
                let dirs: Vec<Vec<f64>> = chunk
                    .iter()
                    .map(|&j| {
                        let mut e = vec![0.0; p];
                        e[j] = 1.0;
                        e
                    })
                    .collect();
                scoped_hvp(state, dataset, scope, &dirs)
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        let h = DMatrix::from_fn(p, p, |i, j| 0.5 * (columns[j][i] + columns[i][j]));
        Self::from_matrix(scope, damping, h)
    }

    /// Uses a caller-supplied symmetric matrix in place of the Hessian.
    pub fn from_matrix(scope: HessianScope, damping: f64, matrix: DMatrix<f64>) -> Result<Self> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::invalid("Hessian damping must be nonnegative"));
        }
        if !matrix.is_square() {
            return Err(Error::shape("Hessian must be square"));
        }
        Ok(Self {
            scope,
            damping,
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn damped(&self) -> DMatrix<f64> {
        &self.matrix + DMatrix::identity(self.dim(), self.dim()) * self.damping
    }

    pub fn factor(&self) -> Result<DirectInfluence> {
        let lu = self.damped().lu();
        let pivots = lu.u().diagonal().map(f64::abs);
        let largest = pivots.max();
        if largest.is_nan() || largest <= 0.0 || pivots.min() <= 1e-12 * largest {
            return Err(Error::SingularHessian(format!(
                "damped Hessian is singular (damping {}); increase the damping",
                self.damping
            )));
        }
        Ok(DirectInfluence {
            scope: self.scope,
            lu,
        })
    }
}

/// LU-factored `H + damping * I`.
pub struct DirectInfluence {
    scope: HessianScope,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DirectInfluence {
    pub fn scope(&self) -> HessianScope {
        self.scope
    }

    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.lu.l().nrows() {
            return Err(Error::shape(format!(
                "vector of length {} for a {}-dimensional Hessian",
                g.len(),
                self.lu.l().nrows()
            )));
        }
        let x = self
            .lu
            .solve(&DVector::from_column_slice(g))
            .ok_or_else(|| Error::SingularHessian("solve failed".into()))?;
        Ok(x.as_slice().to_vec())
    }

    /// `(H + damping I)^-1 grad(z')`, reusable across training examples.
    pub fn test_vector(&self, state: &ModelState, z_test: &Example) -> Result<Vec<f64>> {
        self.solve(&scoped_gradient(state, z_test, self.scope)?)
    }

    pub fn score_with(&self, state: &ModelState, z: &Example, test_vector: &[f64]) -> Result<f64> {
        Ok(-dot(&scoped_gradient(state, z, self.scope)?, test_vector))
    }

    pub fn influence(&self, state: &ModelState, z: &Example, z_test: &Example) -> Result<f64> {
        let v = self.test_vector(state, z_test)?;
        self.score_with(state, z, &v)
    }

    /// `grad(z) . (H + damping I)^-1 grad(z)`, the negated self influence.
    pub fn self_influence_magnitude(&self, state: &ModelState, z: &Example) -> Result<f64> {
        let g = scoped_gradient(state, z, self.scope)?;
        Ok(dot(&g, &self.solve(&g)?))
    }
}

/// `-grad(z') . (H + damping I)^-1 grad(z)` over the last layer.
pub fn influence_function_direct(
    state: &ModelState,
    dataset: &[Example],
    z: &Example,
    z_test: &Example,
    damping: f64,
) -> Result<f64> {
    DampedHessian::build(state, dataset, HessianScope::LastLayer, damping)?
        .factor()?
        .influence(state, z, z_test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchSettings {
    pub scope: HessianScope,
    pub damping: f64,
    pub step_size: f64,
    /// Step size at iteration `t` is `step_size / (1 + decay * t)`.
    pub decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Iterates from this fraction of the run onward are averaged.
    pub average_from: f64,
    /// Full-batch residual evaluation cadence, in iterations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Relative residual `||(H + damping I) S - G^T|| / ||G||` accepted as converged.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SketchSettings {
    fn default() -> Self {
        Self {
            scope: HessianScope::LastLayer,
            damping: DEFAULT_HESSIAN_DAMPING,
            step_size: 0.1,
            decay: 0.0,
            iterations: 2000,
            batch_size: 32,
            average_from: 0.5,
            eval_every: 50,
            patience: 10,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

/// `S` approximating `(H + damping I)^-1 G^T`, stored column by column.
#[derive(Debug, Clone)]
pub struct HessianSketch {
    pub columns: Vec<Vec<f64>>,
    pub spec: SketchSpec,
    pub settings: SketchSettings,
    /// `(iteration, relative residual)` at each evaluation.
    pub residual_trace: Vec<(usize, f64)>,
    pub final_residual: f64,
    projector: Projector,
}

/// Columns of `G^T`.
fn transpose_columns(projector: &Projector) -> Vec<Vec<f64>> {
    let spec = projector.spec();
    let p = projector.input_len();
    match spec.mode {
        SketchMode::Identity => (0..p)
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                e
            })
            .collect(),
        _ => (0..spec.d).map(|r| projector.row(r).to_vec()).collect(),
    }
}

fn frobenius(cols: &[Vec<f64>]) -> f64 {
    cols.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn damped_hvp<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
    settings: &SketchSettings,
    cols: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let mut out = scoped_hvp(state, batch, settings.scope, cols)?;
    for (o, c) in out.iter_mut().zip(cols) {
        o.iter_mut()
            .zip(c)
            .for_each(|(a, b)| *a += settings.damping * b);
    }
    Ok(out)
}

fn sub_assign(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (x, y) in a.iter_mut().zip(b) {
        x.iter_mut().zip(y).for_each(|(u, v)| *u -= v);
    }
}

fn sample_batch<'a>(rng: &mut ChaCha8Rng, dataset: &'a [Example], b: usize) -> Vec<&'a Example> {
    rand::seq::index::sample(rng, dataset.len(), b)
        .into_iter()
        .map(|i| &dataset[i])
        .collect()
}

/// One draw of `2 H_B1 (H_B2 S - G^T)` with independent batches (damping included).
pub fn sketch_stochastic_gradient(
    state: &ModelState,
    dataset: &[Example],
    settings: &SketchSettings,
    s: &[Vec<f64>],
    gt: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let b1 = sample_batch(rng, dataset, settings.batch_size);
    let b2 = sample_batch(rng, dataset, settings.batch_size);
    let mut r = damped_hvp(state, b2, settings, s)?;
    sub_assign(&mut r, gt);
    let mut g = damped_hvp(state, b1, settings, &r)?;
    g.iter_mut().flatten().for_each(|x| *x *= 2.0);
    Ok(g)
}

/// Full-batch `2 H (H S - G^T)` (damping included).
pub fn sketch_full_gradient(
    state: &ModelState,
    dataset: &[Example],
    settings: &SketchSettings,
    s: &[Vec<f64>],
    gt: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let mut r = damped_hvp(state, dataset, settings, s)?;
    sub_assign(&mut r, gt);
    let mut g = damped_hvp(state, dataset, settings, &r)?;
    g.iter_mut().flatten().for_each(|x| *x *= 2.0);
    Ok(g)
}

/// Minimizes `||(H + damping I) S - G^T||_F^2` by stochastic gradient descent
/// with two independent minibatches per step.
pub fn inverse_hessian_sketch(
    state: &ModelState,
    dataset: &[Example],
    spec: SketchSpec,
    settings: SketchSettings,
) -> Result<HessianSketch> {
    if settings.batch_size == 0 || settings.batch_size > dataset.len() {
        return Err(Error::invalid(format!(
            "sketch batch size {} must lie in 1..={}",
            settings.batch_size,
            dataset.len()
        )));
    }
    if settings.step_size.is_nan()
        || settings.step_size <= 0.0
        || settings.eval_every == 0
        || settings.iterations == 0
    {
        return Err(Error::invalid(
            "sketch optimizer needs a positive step size, cadence and iteration count",
        ));
    }
    let p = settings.scope.range(state)?.len();
    let projector = Projector::new(spec, p)?;
    let gt = transpose_columns(&projector);
    let g_norm = frobenius(&gt);
    let residual = |s: &[Vec<f64>]| -> Result<f64> {
        let mut r = damped_hvp(state, dataset, &settings, s)?;
        sub_assign(&mut r, &gt);
        Ok(frobenius(&r) / g_norm)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut s = vec![vec![0.0; p]; gt.len()];
    let mut avg = s.clone();
    let mut averaged = 0usize;
    let average_start =
        (settings.average_from.clamp(0.0, 1.0) * settings.iterations as f64) as usize;
    let mut trace = vec![(0, 1.0)];
    let mut best = 1.0;
    let mut stale = 0usize;

    for t in 0..settings.iterations {
        let grad = sketch_stochastic_gradient(state, dataset, &settings, &s, &gt, &mut rng)?;
        let eta = settings.step_size / (1.0 + settings.decay * t as f64);
        for (col, gcol) in s.iter_mut().zip(&grad) {
            col.iter_mut().zip(gcol).for_each(|(x, g)| *x -= eta * g);
        }
        if t >= average_start {
            averaged += 1;
            let w = 1.0 / averaged as f64;
            for (a, c) in avg.iter_mut().zip(&s) {
                a.iter_mut().zip(c).for_each(|(x, y)| *x += w * (y - *x));
            }
        }
        if (t + 1) % settings.eval_every == 0 {
            let current = if averaged > 0 { &avg } else { &s };
            let r = residual(current)?;
            trace.push((t + 1, r));
            if !r.is_finite() {
                return Err(non_convergence("residual became non-finite", &trace));
            }
            if r <= settings.tolerance {
                break;
            }
            if r < best * (1.0 - 1e-6) {
                best = r;
                stale = 0;
            } else {
                stale += 1;
                if stale >= settings.patience {
                    return Err(non_convergence("residual stopped decreasing", &trace));
                }
            }
        }
    }
    let columns = if averaged > 0 { avg } else { s };
    let final_residual = residual(&columns)?;
    if !final_residual.is_finite() || final_residual >= 1.0 {
        trace.push((settings.iterations, final_residual));
        return Err(non_convergence(
            "residual did not fall below its starting value",
            &trace,
        ));
    }
    Ok(HessianSketch {
        columns,
        spec,
        settings,
        residual_trace: trace,
        final_residual,
        projector,
    })
}

fn non_convergence(reason: &str, trace: &[(usize, f64)]) -> Error {
    let tail: Vec<String> = trace
        .iter()
        .rev()
        .take(8)
        .rev()
        .map(|(t, r)| format!("{t}:{r:.3e}"))
        .collect();
    Error::NonConvergence(format!(
        "{reason}; relative residuals [{}]",
        tail.join(", ")
    ))
}

impl HessianSketch {
    pub fn dim(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// `S` as a `p x d` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), self.columns.len(), |i, j| self.columns[j][i])
    }

    /// `G` as a `d x p` matrix.
    pub fn projection_matrix(&self) -> DMatrix<f64> {
        let gt = transpose_columns(&self.projector);
        DMatrix::from_fn(gt.len(), self.dim(), |i, j| gt[i][j])
    }

    /// `S^T grad(z)`.
    pub fn train_side(&self, state: &ModelState, z: &Example) -> Result<Vec<f64>> {
        let g = scoped_gradient(state, z, self.settings.scope)?;
        if g.len() != self.dim() {
            return Err(Error::shape("state does not match the sketched Hessian"));
        }
        Ok(self.columns.iter().map(|c| dot(c, &g)).collect())
    }

    /// `G grad(z')`.
    pub fn test_side(&self, state: &ModelState, z_test: &Example) -> Result<SketchedGradient> {
        self.projector
            .project_slice(&scoped_gradient(state, z_test, self.settings.scope)?)
    }

    pub fn score_with(
        &self,
        state: &ModelState,
        z: &Example,
        test: &SketchedGradient,
    ) -> Result<f64> {
        if *test.spec() != self.spec {
            return Err(Error::SketchMismatch(format!(
                "test projection uses {:?}, Hessian sketch uses {:?}",
                test.spec(),
                self.spec
            )));
        }
        Ok(-dot(&self.train_side(state, z)?, test.values()) * test.scale())
    }

    /// `-(S^T grad(z)) . (G grad(z'))`.
    pub fn influence(&self, state: &ModelState, z: &Example, z_test: &Example) -> Result<f64> {
        let test = self.test_side(state, z_test)?;
        self.score_with(state, z, &test)
    }

    /// `(S^T grad(z)) . (G grad(z))`, the negated self influence.
    pub fn self_influence_magnitude(&self, state: &ModelState, z: &Example) -> Result<f64> {
        Ok(-self.influence(state, z, z)?)
    }
}

pub fn influence_function_sketched(
    sketch: &HessianSketch,
    state: &ModelState,
    z: &Example,
    z_test: &Example,
) -> Result<f64> {
    sketch.influence(state, z, z_test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepresenterSettings {
    pub lambda: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
}

impl Default for RepresenterSettings {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_REPRESENTER_LAMBDA,
            max_iterations: 200_000,
            armijo_c: 1e-4,
        }
    }
}

/// Last layer fine-tuned under an L2 penalty, with representer coefficients.
/// The bias is treated as the weight of a constant feature 1 and is penalized.
#[derive(Debug, Clone)]
pub struct RepresenterModel {
    pub state: ModelState,
    pub lambda: f64,
    /// `alpha[i][k]` for training example `i` and output `k`.
    pub alphas: Vec<Vec<f64>>,
    pub ids: Vec<ExampleId>,
    /// Last hidden layer outputs with a trailing 1.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Target>,
    pub stationarity_residual: f64,
    pub iterations: usize,
    positions: HashMap<ExampleId, usize>,
}

fn augmented_features(state: &ModelState, x: &[f64]) -> Result<Vec<f64>> {
    let mut f = model::last_hidden(state, x)?;
    f.push(1.0);
    Ok(f)
}

/// Rows of the last layer with the bias appended to each.
fn last_layer_matrix(state: &ModelState) -> Result<Vec<Vec<f64>>> {
    let shape = *state.layout().layer(LayerId::Last)?;
    let p = state.params();
    Ok((0..shape.fan_out)
        .map(|o| {
            let mut row =
                p[shape.offset + o * shape.fan_in..shape.offset + (o + 1) * shape.fan_in].to_vec();
            row.push(p[shape.bias_range().start + o]);
            row
        })
        .collect())
}

fn with_last_layer(state: &ModelState, w: &[Vec<f64>]) -> Result<ModelState> {
    let shape = *state.layout().layer(LayerId::Last)?;
    let mut next = state.clone();
    let params = next.params_mut();
    for (o, row) in w.iter().enumerate() {
        let start = shape.offset + o * shape.fan_in;
        params[start..start + shape.fan_in].copy_from_slice(&row[..shape.fan_in]);
        params[shape.bias_range().start + o] = row[shape.fan_in];
    }
    Ok(next)
}

fn matvec(w: &[Vec<f64>], f: &[f64]) -> Vec<f64> {
    w.iter().map(|row| dot(row, f)).collect()
}

struct Objective<'a> {
    kind: model::LossKind,
    features: &'a [Vec<f64>],
    labels: &'a [Target],
    lambda: f64,
}

impl Objective<'_> {
    /// Objective difference between two weight matrices, accumulated from
    /// per-example differences.
    fn change(&self, from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
        let n = self.features.len() as f64;
        let data: f64 = self
            .features
            .iter()
            .zip(self.labels)
            .map(|(f, &y)| model::loss_change(self.kind, &matvec(from, f), &matvec(to, f), y))
            .sum();
        let reg: f64 = from
            .iter()
            .flatten()
            .zip(to.iter().flatten())
            .map(|(a, b)| (b - a) * (b + a))
            .sum();
        data / n + self.lambda * reg
    }

    /// Per-example `d loss / d logits`.
    fn deltas(&self, w: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.features
            .iter()
            .zip(self.labels)
            .map(|(f, &y)| model::output_delta(self.kind, &matvec(w, f), y))
            .collect()
    }

    fn gradient(&self, w: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.features.len() as f64;
        let mut g: Vec<Vec<f64>> = w
            .iter()
            .map(|row| row.iter().map(|x| 2.0 * self.lambda * x).collect())
            .collect();
        for (f, d) in self.features.iter().zip(self.deltas(w)) {
            for (grow, dk) in g.iter_mut().zip(&d) {
                grow.iter_mut()
                    .zip(f)
                    .for_each(|(gi, fi)| *gi += dk * fi / n);
            }
        }
        g
    }
}

/// Full-batch gradient descent with Armijo backtracking on the last layer of
/// `mean loss + lambda ||w2||^2`, stopping once the gradient norm of the
/// summed objective `n * (mean loss + lambda ||w2||^2)` is below `1e-8 * n`.
pub fn representer_finetune(
    state: &ModelState,
    dataset: &[Example],
    settings: RepresenterSettings,
) -> Result<RepresenterModel> {
    if !(settings.lambda > 0.0 && settings.lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "representer lambda must be positive, got {}",
            settings.lambda
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let features = dataset
        .par_iter()
        .map(|z| augmented_features(state, &z.features))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Target> = dataset.iter().map(|z| z.label).collect();
    let objective = Objective {
        kind: state.spec().loss_kind,
        features: &features,
        labels: &labels,
        lambda: settings.lambda,
    };
    let n = dataset.len() as f64;
    let tolerance = 1e-8;
    let mut w = last_layer_matrix(state)?;
    let mut step = 1.0;
    let mut iterations = 0;
    let residual = loop {
        let g = objective.gradient(&w);
        let g_sq: f64 = g.iter().flatten().map(|x| x * x).sum();
        if g_sq.sqrt() < tolerance {
            break n * g_sq.sqrt();
        }
        if iterations >= settings.max_iterations {
            return Err(Error::NonConvergence(format!(
                "representer fine-tune stopped after {iterations} iterations with summed gradient norm {:.3e} (target {:.3e})",
                n * g_sq.sqrt(),
                n * tolerance
            )));
        }
        step *= 2.0;
        loop {
            let trial: Vec<Vec<f64>> = w
                .iter()
                .zip(&g)
                .map(|(r, gr)| r.iter().zip(gr).map(|(x, gx)| x - step * gx).collect())
                .collect();
            if objective.change(&w, &trial) <= -settings.armijo_c * step * g_sq {
                w = trial;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return Err(Error::NonConvergence(
                    "line search failed to find a decrease".into(),
                ));
            }
        }
        iterations += 1;
    };
    let scale = -1.0 / (2.0 * settings.lambda * n);
    let alphas = objective
        .deltas(&w)
        .into_iter()
        .map(|d| d.into_iter().map(|x| scale * x).collect())
        .collect();
    let ids: Vec<ExampleId> = dataset.iter().map(|z| z.id).collect();
    let positions = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    Ok(RepresenterModel {
        state: with_last_layer(state, &w)?,
        lambda: settings.lambda,
        alphas,
        ids,
        features,
        labels,
        stationarity_residual: residual,
        iterations,
        positions,
    })
}

impl RepresenterModel {
    pub fn last_layer_norm(&self) -> Result<f64> {
        Ok(last_layer_matrix(&self.state)?
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt())
    }

    fn position(&self, z: &Example) -> Result<usize> {
        let i = *self.positions.get(&z.id).ok_or_else(|| {
            Error::invalid(format!(
                "example {} was not part of the fine-tune set",
                z.id
            ))
        })?;
        if augmented_features(&self.state, &z.features)? != self.features[i]
            || self.labels[i] != z.label
        {
            return Err(Error::invalid(format!(
                "stale feature cache for example {}; fine-tune again",
                z.id
            )));
        }
        Ok(i)
    }

    /// `sum_i alpha_i (f_i . f')`, equal to the model's logits when stationary.
    pub fn reconstruct_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = augmented_features(&self.state, x)?;
        let mut out = vec![0.0; self.state.spec().output_width()];
        for (a, fi) in self.alphas.iter().zip(&self.features) {
            let k = dot(fi, &f);
            out.iter_mut().zip(a).for_each(|(o, ai)| *o += ai * k);
        }
        Ok(out)
    }

    /// Per-output contribution `alpha_z (f(z) . f(z'))`.
    pub fn influence(&self, z: &Example, z_test: &Example) -> Result<Vec<f64>> {
        let i = self.position(z)?;
        let k = dot(
            &self.features[i],
            &augmented_features(&self.state, &z_test.features)?,
        );
        Ok(self.alphas[i].iter().map(|a| a * k).collect())
    }

    /// Contribution at the test example's label output (output 0 for regression).
    pub fn influence_score(&self, z: &Example, z_test: &Example) -> Result<f64> {
        let v = self.influence(z, z_test)?;
        Ok(v[z_test.label.class().unwrap_or(0)])
    }

    /// `|alpha|` at the example's own label output.
    pub fn self_score(&self, z: &Example) -> Result<f64> {
        let i = self.position(z)?;
        Ok(self.alphas[i][z.label.class().unwrap_or(0)].abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LossKind, ModelSpec};
    use crate::training::{train, TrainConfig};
    use rand::Rng;

    fn blobs(n: usize, seed: u64, classes: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = i % classes;
                let angle = c as f64 * std::f64::consts::TAU / classes as f64;
                Example::classified(
                    i as u32,
                    vec![
                        2.0 * angle.cos() + rng.random_range(-1.0..1.0),
                        2.0 * angle.sin() + rng.random_range(-1.0..1.0),
                    ],
                    c,
                )
            })
            .collect()
    }

    fn trained_tiny() -> (Vec<Example>, ModelState) {
        let data = blobs(60, 1, 3);
        let spec = ModelSpec::new(
            vec![2, 4, 3],
            Activation::Tanh,
            LossKind::SoftmaxCrossEntropy,
        )
        .with_seed(3);
        let out = train(&TrainConfig::constant(0.2, 10, 20), &data, &spec).unwrap();
        (data, out.final_state)
    }

    #[test]
    fn identity_hessian_gives_negated_dot() {
        let (data, state) = trained_tiny();
        let p = HessianScope::LastLayer.range(&state).unwrap().len();
        let direct =
            DampedHessian::from_matrix(HessianScope::LastLayer, 0.0, DMatrix::identity(p, p))
                .unwrap()
                .factor()
                .unwrap();
        let g1 = scoped_gradient(&state, &data[0], HessianScope::LastLayer).unwrap();
        let g2 = scoped_gradient(&state, &data[1], HessianScope::LastLayer).unwrap();
        let got = direct.influence(&state, &data[0], &data[1]).unwrap();
        assert!((got + dot(&g1, &g2)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_family_matches_closed_form() {
        // y_hat = w x + b with squared error: H = (2/n) sum [x^2 x; x 1].
        let spec = ModelSpec::new(vec![1, 1], Activation::Tanh, LossKind::MeanSquaredError);
        let state = ModelState::from_params(&spec, vec![0.5, 0.1]).unwrap();
        let data: Vec<Example> = [(1.0, 2.0), (2.0, 1.0), (-1.0, 0.0)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Example::new(i as u32, vec![x], Target::Value(y)))
            .collect();
        let (sxx, sx, n) = (6.0, 2.0, 3.0);
        let (a, b, d) = (2.0 * sxx / n, 2.0 * sx / n, 2.0);
        let det = a * d - b * b;
        let grad = |x: f64, y: f64| {
            let r = 2.0 * (0.5 * x + 0.1 - y);
            [r * x, r]
        };
        let g = grad(1.0, 2.0);
        let gt = grad(-1.0, 0.0);
        let hinv_gt = [
            (d * gt[0] - b * gt[1]) / det,
            (-b * gt[0] + a * gt[1]) / det,
        ];
        let expected = -(g[0] * hinv_gt[0] + g[1] * hinv_gt[1]);
        let got = influence_function_direct(&state, &data, &data[0], &data[2], 0.0).unwrap();
        assert!(
            (got - expected).abs() <= 1e-12 * expected.abs(),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn direct_influence_is_symmetric_and_zero_for_fitted_points() {
        let (data, state) = trained_tiny();
        let direct = DampedHessian::build(&state, &data, HessianScope::LastLayer, 1e-3)
            .unwrap()
            .factor()
            .unwrap();
        for i in 0..10 {
            let a = direct.influence(&state, &data[i], &data[i + 10]).unwrap();
            let b = direct.influence(&state, &data[i + 10], &data[i]).unwrap();
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300));
        }
        let spec = ModelSpec::new(vec![1, 1], Activation::Tanh, LossKind::MeanSquaredError);
        let fit = ModelState::from_params(&spec, vec![1.0, 0.0]).unwrap();
        let pts = vec![
            Example::new(0, vec![2.0], Target::Value(2.0)),
            Example::new(1, vec![1.0], Target::Value(3.0)),
        ];
        assert_eq!(
            influence_function_direct(&fit, &pts, &pts[0], &pts[1], 1e-3).unwrap(),
            0.0
        );
    }

    #[test]
    fn undamped_softmax_hessian_is_singular() {
        let (data, state) = trained_tiny();
        let err = DampedHessian::build(&state, &data, HessianScope::LastLayer, 0.0)
            .unwrap()
            .factor()
            .err()
            .unwrap();
        assert!(matches!(err, Error::SingularHessian(ref m) if m.contains("damping")));
    }

    #[test]
    fn identity_hessian_sketch_converges_to_projection() {
        // A scalar-output linear model with inputs of unit second moment has H = 2 I.
        let spec = ModelSpec::new(vec![2, 1], Activation::Tanh, LossKind::MeanSquaredError);
        let state = ModelState::from_params(&spec, vec![0.0; 3]).unwrap();
        let s2 = std::f64::consts::SQRT_2;
        let data: Vec<Example> = [[s2, 0.0], [-s2, 0.0], [0.0, s2], [0.0, -s2]]
            .iter()
            .enumerate()
            .map(|(i, x)| Example::new(i as u32, x.to_vec(), Target::Value(0.0)))
            .collect();
        // Features alone have H = diag(2, 2) on weights, 2 on the bias.
        let settings = SketchSettings {
            damping: 0.0,
            step_size: 0.05,
            batch_size: 4,
            iterations: 500,
            tolerance: 1e-10,
            patience: 1000,
            ..SketchSettings::default()
        };
        let sk = inverse_hessian_sketch(&state, &data, SketchSpec::dense(4, 9), settings).unwrap();
        let expected = sk.projection_matrix().transpose() * 0.5;
        assert!((sk.matrix() - expected).norm() < 1e-8);
        assert!(sk.final_residual < 1e-8);
    }

    #[test]
    fn stochastic_sketch_gradient_is_unbiased() {
        let (data, state) = trained_tiny();
        let settings = SketchSettings {
            batch_size: 8,
            ..SketchSettings::default()
        };
        let p = HessianScope::LastLayer.range(&state).unwrap().len();
        let projector = Projector::new(SketchSpec::dense(6, 2), p).unwrap();
        let gt = transpose_columns(&projector);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let full = sketch_full_gradient(&state, &data, &settings, &s, &gt).unwrap();
        let draws = 1000;
        let mut mean = vec![vec![0.0; p]; 6];
        for _ in 0..draws {
            let g =
                sketch_stochastic_gradient(&state, &data, &settings, &s, &gt, &mut rng).unwrap();
            for (m, c) in mean.iter_mut().zip(&g) {
                m.iter_mut()
                    .zip(c)
                    .for_each(|(a, b)| *a += b / draws as f64);
            }
        }
        sub_assign(&mut mean, &full);
        let rel = frobenius(&mean) / frobenius(&full);
        assert!(rel < 0.03, "{rel}");
    }

    #[test]
    fn diverging_sketch_reports_residuals() {
        let (data, state) = trained_tiny();
        let settings = SketchSettings {
            step_size: 1e4,
            iterations: 200,
            eval_every: 5,
            patience: 3,
            ..SketchSettings::default()
        };
        let err =
            inverse_hessian_sketch(&state, &data, SketchSpec::dense(4, 1), settings).unwrap_err();
        assert!(matches!(err, Error::NonConvergence(ref m) if m.contains("residual")));
    }

    #[test]
    fn sketched_influence_rejects_foreign_projection() {
        let (data, state) = trained_tiny();
        let settings = SketchSettings {
            damping: 0.05,
            step_size: 0.5,
            iterations: 100,
            tolerance: 0.5,
            ..SketchSettings::default()
        };
        let sk = inverse_hessian_sketch(&state, &data, SketchSpec::dense(8, 1), settings).unwrap();
        let p = HessianScope::LastLayer.range(&state).unwrap().len();
        let g = scoped_gradient(&state, &data[0], HessianScope::LastLayer).unwrap();
        let other = Projector::new(SketchSpec::dense(8, 2), p)
            .unwrap()
            .project_slice(&g)
            .unwrap();
        assert!(matches!(
            sk.score_with(&state, &data[1], &other),
            Err(Error::SketchMismatch(_))
        ));
        // Zero test gradient gives zero influence.
        let zero = Projector::new(SketchSpec::dense(8, 1), p)
            .unwrap()
            .project_slice(&vec![0.0; p])
            .unwrap();
        assert_eq!(sk.score_with(&state, &data[1], &zero).unwrap(), 0.0);
    }

    #[test]
    fn representer_reconstructs_logits() {
        let (data, state) = trained_tiny();
        let rep = representer_finetune(&state, &data, RepresenterSettings::default()).unwrap();
        assert!(rep.stationarity_residual < 1e-8 * data.len() as f64);
        for z in blobs(20, 5, 3) {
            let direct = model::predict(&rep.state, &z.features).unwrap();
            let rebuilt = rep.reconstruct_logits(&z.features).unwrap();
            let err: f64 = direct
                .iter()
                .zip(&rebuilt)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = direct.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err <= 1e-4 * norm, "{err} vs {norm}");
        }
    }

    #[test]
    fn representer_norm_shrinks_with_lambda() {
        let (data, state) = trained_tiny();
        let norms: Vec<f64> = [0.01, 0.1, 1.0]
            .iter()
            .map(|&lambda| {
                representer_finetune(
                    &state,
                    &data,
                    RepresenterSettings {
                        lambda,
                        ..Default::default()
                    },
                )
                .unwrap()
                .last_layer_norm()
                .unwrap()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
        assert!(representer_finetune(
            &state,
            &data,
            RepresenterSettings {
                lambda: 0.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn representer_two_class_hand_evaluation() {
        // Single-layer 2-class model: the last hidden output is the input itself.
        let spec = ModelSpec::new(vec![1, 2], Activation::Tanh, LossKind::SoftmaxCrossEntropy);
        let state = ModelState::from_params(&spec, vec![0.0; 4]).unwrap();
        let data = vec![
            Example::classified(0, vec![1.0], 0),
            Example::classified(1, vec![-1.0], 1),
        ];
        let lambda = 0.5;
        let rep = representer_finetune(
            &state,
            &data,
            RepresenterSettings {
                lambda,
                ..Default::default()
            },
        )
        .unwrap();
        // Symmetric problem: logits for x are (a x, -a x); bias stays 0.
        let w = last_layer_matrix(&rep.state).unwrap();
        let a = w[0][0];
        let p0 = 1.0 / (1.0 + (-2.0 * a).exp());
        let alpha0 = [
            -(p0 - 1.0) / (2.0 * lambda * 2.0),
            -(1.0 - p0) / (2.0 * lambda * 2.0),
        ];
        let zt = Example::classified(9, vec![0.5], 0);
        let k = 1.0 * 0.5 + 1.0;
        let got = rep.influence(&data[0], &zt).unwrap();
        assert!((got[0] - alpha0[0] * k).abs() < 1e-9);
        assert!((got[1] - alpha0[1] * k).abs() < 1e-9);
        assert!((rep.self_score(&data[0]).unwrap() - alpha0[0].abs()).abs() < 1e-9);
        // Stationarity of the scalar problem: 2 lambda a = (1 - p0) for x = +-1.
        assert!((2.0 * lambda * 2.0 * a - 2.0 * (1.0 - p0)).abs() < 1e-6);
    }

    #[test]
    fn representer_orthogonal_features_and_stale_cache() {
        let spec = ModelSpec::new(vec![2, 2], Activation::Tanh, LossKind::SoftmaxCrossEntropy);
        let state = ModelState::from_params(&spec, vec![0.0; 6]).unwrap();
        let data = vec![
            Example::classified(0, vec![1.0, 0.0], 0),
            Example::classified(1, vec![0.0, 1.0], 1),
        ];
        let rep = representer_finetune(&state, &data, RepresenterSettings::default()).unwrap();
        // f = [x, 1]; choose z' with f(z) . f(z') = 1 * -1 + 0 + 1 = 0.
        let zt = Example::classified(5, vec![-1.0, 3.0], 0);
        assert!(rep
            .influence(&data[0], &zt)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let mut moved = data[0].clone();
        moved.features[0] = 2.0;
        assert!(
            matches!(rep.influence(&moved, &zt), Err(Error::InvalidArgument(ref m)) if m.contains("stale"))
        );
    }
}
