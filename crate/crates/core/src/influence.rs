//! TracIn influence scores.
//!
//! Three variants are provided, from most to least exact:
//!
//! * idealized: the actual drop in the test loss over every step that used the
//!   training example (single-example steps only);
//! * first order: `eta_t / b * grad(w_t, z') . grad(w_t, z)` summed over the
//!   steps whose batch contained `z`;
//! * checkpoint (TracInCP): `sum_i weight_i * grad(w_i, z) . grad(w_i, z')`
//!   over saved checkpoints, with `weight_i` the step size in effect or 1.
//!
//! Positive scores mark proponents (the training example reduced the test
//! loss) and negative scores opponents.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, dot, layer_slice, Example, ExampleId, LayerId, ModelState};
use crate::sketch::{self, Projector, SketchMode, SketchSpec};
use crate::stats;
use crate::training::{self, Checkpoint, DatasetIndex, TrainingTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Idealized,
    FirstOrder,
    TracinCp,
    TracinCpEqual,
    InfluenceFunction,
    InfluenceFunctionSketched,
    Representer,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Idealized,
        Method::FirstOrder,
        Method::TracinCp,
        Method::TracinCpEqual,
        Method::InfluenceFunction,
        Method::InfluenceFunctionSketched,
        Method::Representer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Idealized => "idealized",
            Method::FirstOrder => "first_order",
            Method::TracinCp => "tracin_cp",
            Method::TracinCpEqual => "tracin_cp_equal",
            Method::InfluenceFunction => "influence_function",
            Method::InfluenceFunctionSketched => "influence_function_sketched",
            Method::Representer => "representer",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::invalid(format!(
                    "unknown method `{s}`; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub train_id: ExampleId,
    pub test_id: ExampleId,
    pub method: Method,
    pub score: f64,
    /// `(checkpoint step, weighted contribution)` for checkpoint methods.
    pub per_checkpoint: Option<Vec<(u64, f64)>>,
}

/// Writes `train_id,test_id,method,score[,ckpt_<t>...]`. Checkpoint columns
/// are emitted when every record carries contributions for the same steps.
pub fn write_influence_csv<W: Write>(w: W, records: &[InfluenceRecord]) -> Result<()> {
    let steps: Option<Vec<u64>> = records.first().and_then(|r| {
        let steps: Vec<u64> = r.per_checkpoint.as_ref()?.iter().map(|(s, _)| *s).collect();
        records
            .iter()
            .all(|r| {
                r.per_checkpoint
                    .as_ref()
                    .is_some_and(|pc| pc.iter().map(|(s, _)| *s).eq(steps.iter().copied()))
            })
            .then_some(steps)
    });
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        "train_id".to_string(),
        "test_id".to_string(),
        "method".to_string(),
        "score".to_string(),
    ];
    if let Some(steps) = &steps {
        header.extend(steps.iter().map(|s| format!("ckpt_{s}")));
    }
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.train_id.to_string(),
            r.test_id.to_string(),
            r.method.to_string(),
            format!("{:e}", r.score),
        ];
        if steps.is_some() {
            if let Some(pc) = &r.per_checkpoint {
                row.extend(pc.iter().map(|(_, c)| format!("{c:e}")));
            }
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Which checkpoints enter a TracInCP sum and with what weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSelection {
    steps: Vec<u64>,
    weights: Vec<f64>,
    equal_weights: bool,
}

impl CheckpointSelection {
    /// Checkpoints at the given positions, weighted by their step sizes.
    pub fn from_positions(checkpoints: &[Checkpoint], positions: &[usize]) -> Result<Self> {
        let mut steps = Vec::with_capacity(positions.len());
        let mut weights = Vec::with_capacity(positions.len());
        for &i in positions {
            let c = checkpoints
                .get(i)
                .ok_or_else(|| Error::invalid(format!("checkpoint position {i} out of range")))?;
            steps.push(c.step);
            weights.push(c.step_size);
        }
        Self::new(steps, weights)
    }

    pub fn all(checkpoints: &[Checkpoint]) -> Result<Self> {
        let positions: Vec<usize> = (0..checkpoints.len()).collect();
        Self::from_positions(checkpoints, &positions)
    }

    pub fn new(steps: Vec<u64>, weights: Vec<f64>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("checkpoint selection is empty"));
        }
        if steps.len() != weights.len() {
            return Err(Error::invalid("one weight per selected checkpoint"));
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "selected checkpoint steps must strictly increase",
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("checkpoint weights must be positive"));
        }
        Ok(Self {
            steps,
            weights,
            equal_weights: false,
        })
    }

    /// Same checkpoints with every weight set to 1.
    pub fn with_equal_weights(mut self) -> Self {
        self.weights.iter_mut().for_each(|w| *w = 1.0);
        self.equal_weights = true;
        self
    }

    /// Every weight multiplied by `c > 0`.
    pub fn scaled(mut self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid("weight scale must be positive"));
        }
        self.weights.iter_mut().for_each(|w| *w *= c);
        Ok(self)
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn method(&self) -> Method {
        if self.equal_weights {
            Method::TracinCpEqual
        } else {
            Method::TracinCp
        }
    }

    fn resolve<'a>(&self, checkpoints: &'a [Checkpoint]) -> Result<Vec<&'a Checkpoint>> {
        self.steps
            .iter()
            .map(|&s| {
                checkpoints
                    .iter()
                    .find(|c| c.step == s)
                    .ok_or_else(|| Error::invalid(format!("no checkpoint at step {s}")))
            })
            .collect()
    }
}

/// How gradients are reduced before taking dot products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientView {
    /// Restrict to one layer's weights and bias.
    pub layer: Option<LayerId>,
    pub sketch: Option<SketchSpec>,
    /// Multiplies the training-side loss (test hook for bilinearity).
    pub train_loss_scale: f64,
}

impl Default for GradientView {
    fn default() -> Self {
        Self {
            layer: None,
            sketch: None,
            train_loss_scale: 1.0,
        }
    }
}

impl GradientView {
    pub fn layer(layer: LayerId) -> Self {
        Self {
            layer: Some(layer),
            ..Self::default()
        }
    }

    pub fn with_sketch(mut self, spec: SketchSpec) -> Self {
        self.sketch = Some(spec);
        self
    }
}

/// Computes the reduced gradient of one example at one state.
#[derive(Debug, Clone)]
pub(crate) struct Featurizer {
    view: GradientView,
    projector: Option<Projector>,
}

impl Featurizer {
    pub(crate) fn new(view: GradientView, state: &ModelState) -> Result<Self> {
        let reduced_len = match view.layer {
            Some(layer) => state.layout().layer(layer)?.len(),
            None => state.len(),
        };
        let projector = match view.sketch {
            Some(spec) if spec.mode == SketchMode::Rank1Pair => {
                spec.validate()?;
                if view.layer.is_none() {
                    return Err(Error::invalid("rank-1 sketches need a layer scope"));
                }
                None
            }
            Some(spec) => Some(Projector::new(spec, reduced_len)?),
            None => None,
        };
        Ok(Self { view, projector })
    }

    pub(crate) fn features(&self, state: &ModelState, example: &Example) -> Result<Vec<f64>> {
        if let (Some(spec), Some(layer)) = (self.view.sketch, self.view.layer) {
            if spec.mode == SketchMode::Rank1Pair {
                let r1 = sketch::rank1_components(state, example, layer)?;
                return Ok(sketch::rank1_project(&r1, &spec)?.values().to_vec());
            }
        }
        let g = model::per_example_gradient(state, example)?;
        let reduced = match self.view.layer {
            Some(layer) => layer_slice(&g, layer)?.into_values(),
            None => g.into_values(),
        };
        match &self.projector {
            Some(p) => Ok(p.project_slice(&reduced)?.values().to_vec()),
            None => Ok(reduced),
        }
    }
}

/// TracInCP scorer with per-checkpoint featurizers resolved once.
pub struct TracInCp<'a> {
    selection: CheckpointSelection,
    checkpoints: Vec<&'a Checkpoint>,
    featurizer: Featurizer,
    view: GradientView,
}

/// Reduced gradients of one example at every selected checkpoint.
pub type CheckpointFeatures = Vec<Vec<f64>>;

impl<'a> TracInCp<'a> {
    pub fn new(
        selection: &CheckpointSelection,
        checkpoints: &'a [Checkpoint],
        view: GradientView,
    ) -> Result<Self> {
        let resolved = selection.resolve(checkpoints)?;
        let featurizer = Featurizer::new(view, &resolved[0].state)?;
        Ok(Self {
            selection: selection.clone(),
            checkpoints: resolved,
            featurizer,
            view,
        })
    }

    pub fn selection(&self) -> &CheckpointSelection {
        &self.selection
    }

    pub fn features(&self, example: &Example) -> Result<CheckpointFeatures> {
        self.checkpoints
            .iter()
            .map(|c| self.featurizer.features(&c.state, example))
            .collect()
    }

    /// Training-side features, with the loss-scale hook applied.
    pub fn train_features(&self, example: &Example) -> Result<CheckpointFeatures> {
        let mut f = self.features(example)?;
        if self.view.train_loss_scale != 1.0 {
            for v in &mut f {
                v.iter_mut().for_each(|x| *x *= self.view.train_loss_scale);
            }
        }
        Ok(f)
    }

    /// Weighted per-checkpoint contributions and their sum.
    pub fn combine(
        &self,
        train: &CheckpointFeatures,
        test: &CheckpointFeatures,
    ) -> (f64, Vec<(u64, f64)>) {
        let parts: Vec<(u64, f64)> = self
            .selection
            .steps
            .iter()
            .zip(&self.selection.weights)
            .zip(train.iter().zip(test))
            .map(|((&s, &w), (a, b))| (s, w * dot(a, b)))
            .collect();
        let total = parts.iter().map(|(_, c)| c).sum();
        (total, parts)
    }

    pub fn score(&self, z: &Example, z_test: &Example) -> Result<InfluenceRecord> {
        let (score, parts) = self.combine(&self.train_features(z)?, &self.features(z_test)?);
        Ok(InfluenceRecord {
            train_id: z.id,
            test_id: z_test.id,
            method: self.selection.method(),
            score,
            per_checkpoint: Some(parts),
        })
    }

    /// Scores every training example against one test example. Test features are
    /// computed once and shared across workers.
    pub fn score_all(&self, train: &[Example], z_test: &Example) -> Result<Vec<InfluenceRecord>> {
        let test = self.features(z_test)?;
        train
            .par_iter()
            .map(|z| {
                let (score, parts) = self.combine(&self.train_features(z)?, &test);
                Ok(InfluenceRecord {
                    train_id: z.id,
                    test_id: z_test.id,
                    method: self.selection.method(),
                    score,
                    per_checkpoint: Some(parts),
                })
            })
            .collect()
    }

    pub fn self_influence(&self, z: &Example) -> Result<f64> {
        let f = self.features(z)?;
        let (score, _) = self.combine(&f, &f);
        Ok(score)
    }

    pub fn self_influence_all(&self, train: &[Example]) -> Result<Vec<(ExampleId, f64)>> {
        train
            .par_iter()
            .map(|z| Ok((z.id, self.self_influence(z)?)))
            .collect()
    }
}

/// `sum_i weight_i * grad(w_i, z) . grad(w_i, z')` over the selection.
pub fn tracin_cp(
    selection: &CheckpointSelection,
    checkpoints: &[Checkpoint],
    z: &Example,
    z_test: &Example,
    view: GradientView,
) -> Result<InfluenceRecord> {
    TracInCp::new(selection, checkpoints, view)?.score(z, z_test)
}

pub fn self_influence(
    selection: &CheckpointSelection,
    checkpoints: &[Checkpoint],
    z: &Example,
    view: GradientView,
) -> Result<f64> {
    TracInCp::new(selection, checkpoints, view)?.self_influence(z)
}

fn require_single_example_steps(trace: &TrainingTrace) -> Result<()> {
    if trace.config.batch_size != 1 {
        return Err(Error::Unsupported(format!(
            "idealized influence needs batch_size 1 (trace uses {}); use the first-order variant for minibatches",
            trace.config.batch_size
        )));
    }
    Ok(())
}

/// Idealized influence of every training example on `z_test`: the loss drop at
/// each step is credited to the example used in that step.
pub fn idealized_influence_all(
    trace: &TrainingTrace,
    dataset: &[Example],
    z_test: &Example,
) -> Result<BTreeMap<ExampleId, f64>> {
    require_single_example_steps(trace)?;
    let mut scores: BTreeMap<ExampleId, f64> = dataset.iter().map(|z| (z.id, 0.0)).collect();
    let mut current = model::loss(&trace.spec.init_state()?, z_test)?;
    training::replay_with(trace, dataset, |step| {
        let next = model::loss(step.after, z_test)?;
        *scores.entry(step.record.example_ids[0]).or_insert(0.0) += current - next;
        current = next;
        Ok(())
    })?;
    Ok(scores)
}

pub fn idealized_influence(
    trace: &TrainingTrace,
    dataset: &[Example],
    z: ExampleId,
    z_test: &Example,
) -> Result<f64> {
    require_single_example_steps(trace)?;
    let mut total = 0.0;
    training::replay_with(trace, dataset, |step| {
        if step.record.example_ids[0] == z {
            total += model::loss(step.before, z_test)? - model::loss(step.after, z_test)?;
        }
        Ok(())
    })?;
    Ok(total)
}

/// Idealized influence of each training example on its own loss.
pub fn idealized_self_influence_all(
    trace: &TrainingTrace,
    dataset: &[Example],
) -> Result<Vec<(ExampleId, f64)>> {
    require_single_example_steps(trace)?;
    let mut scores: BTreeMap<ExampleId, f64> = dataset.iter().map(|z| (z.id, 0.0)).collect();
    training::replay_with(trace, dataset, |step| {
        let z = step.batch[0];
        *scores.entry(z.id).or_insert(0.0) +=
            model::loss(step.before, z)? - model::loss(step.after, z)?;
        Ok(())
    })?;
    Ok(dataset.iter().map(|z| (z.id, scores[&z.id])).collect())
}

/// First-order influence of each training example on its own loss.
pub fn first_order_self_influence_all(
    trace: &TrainingTrace,
    dataset: &[Example],
) -> Result<Vec<(ExampleId, f64)>> {
    let mut scores: BTreeMap<ExampleId, f64> = dataset.iter().map(|z| (z.id, 0.0)).collect();
    training::replay_with(trace, dataset, |step| {
        let factor = step.record.step_size / step.batch.len() as f64;
        for z in step.batch {
            *scores.entry(z.id).or_insert(0.0) +=
                factor * model::per_example_gradient(step.before, z)?.norm_sq();
        }
        Ok(())
    })?;
    Ok(dataset.iter().map(|z| (z.id, scores[&z.id])).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfluence {
    pub shares: Vec<(ExampleId, f64)>,
    pub total: f64,
}

/// First-order attribution of one step's test-loss change to batch members.
pub fn first_order_step_influence<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
    z_test: &Example,
    step_size: f64,
) -> Result<StepInfluence> {
    let test_grad = model::per_example_gradient(state, z_test)?;
    let batch: Vec<&Example> = batch.into_iter().collect();
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let factor = step_size / batch.len() as f64;
    let mut shares = Vec::with_capacity(batch.len());
    for z in batch {
        let g = model::per_example_gradient(state, z)?;
        shares.push((z.id, factor * test_grad.dot(&g)?));
    }
    let total = shares.iter().map(|(_, s)| s).sum();
    Ok(StepInfluence { shares, total })
}

pub fn tracin_first_order(
    trace: &TrainingTrace,
    dataset: &[Example],
    z: ExampleId,
    z_test: &Example,
) -> Result<f64> {
    let index = DatasetIndex::new(dataset)?;
    if !index.contains(z) {
        log::warn!("example {z} is not part of the training set; its first-order influence is 0");
        return Ok(0.0);
    }
    let mut total = 0.0;
    training::replay_with(trace, dataset, |step| {
        if let Some(pos) = step.record.example_ids.iter().position(|&id| id == z) {
            let test_grad = model::per_example_gradient(step.before, z_test)?;
            let g = model::per_example_gradient(step.before, step.batch[pos])?;
            total += step.record.step_size / step.batch.len() as f64 * test_grad.dot(&g)?;
        }
        Ok(())
    })?;
    Ok(total)
}

/// First-order TracIn for every (training example, probe) pair in one replay.
/// Returns `scores[probe][i]` aligned with `dataset` order.
pub fn tracin_first_order_all(
    trace: &TrainingTrace,
    dataset: &[Example],
    probes: &[Example],
) -> Result<Vec<Vec<f64>>> {
    let positions: HashMap<ExampleId, usize> =
        dataset.iter().enumerate().map(|(i, z)| (z.id, i)).collect();
    let mut scores = vec![vec![0.0; dataset.len()]; probes.len()];
    training::replay_with(trace, dataset, |step| {
        let probe_grads = probes
            .par_iter()
            .map(|p| model::per_example_gradient(step.before, p))
            .collect::<Result<Vec<_>>>()?;
        let factor = step.record.step_size / step.batch.len() as f64;
        for z in step.batch {
            let g = model::per_example_gradient(step.before, z)?;
            let pos = positions[&z.id];
            for (row, pg) in scores.iter_mut().zip(&probe_grads) {
                row[pos] += factor * pg.dot(&g)?;
            }
        }
        Ok(())
    })?;
    Ok(scores)
}

/// Sorts ids by score with ties broken by ascending id. With a filter state,
/// training examples it misclassifies are dropped first.
pub fn rank_examples(
    scores: &[(ExampleId, f64)],
    descending: bool,
    exclude_misclassified: Option<(&ModelState, &[Example])>,
) -> Result<Vec<ExampleId>> {
    let mut kept: Vec<(ExampleId, f64)> = match exclude_misclassified {
        None => scores.to_vec(),
        Some((state, dataset)) => {
            let index = DatasetIndex::new(dataset)?;
            let mut kept = Vec::with_capacity(scores.len());
            for &(id, s) in scores {
                if !model::is_misclassified(state, index.get(id)?)? {
                    kept.push((id, s));
                }
            }
            kept
        }
    };
    kept.sort_by(|a, b| {
        let by_score = if descending {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        by_score.then(a.0.cmp(&b.0))
    });
    Ok(kept.into_iter().map(|(id, _)| id).collect())
}

/// Top-`k` proponents (highest scores) and opponents (lowest scores).
pub fn proponents_and_opponents(
    scores: &[(ExampleId, f64)],
    k: usize,
    exclude_misclassified: Option<(&ModelState, &[Example])>,
) -> Result<(Vec<ExampleId>, Vec<ExampleId>)> {
    let desc = rank_examples(scores, true, exclude_misclassified)?;
    let asc = rank_examples(scores, false, exclude_misclassified)?;
    Ok((
        desc.into_iter().take(k).collect(),
        asc.into_iter().take(k).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBreakdown {
    pub step: u64,
    /// Mislabelled examples in the top fraction, indexed by true class.
    pub counts_by_true_class: Vec<usize>,
}

impl CheckpointBreakdown {
    /// True class with the most recovered mislabels (lowest index on ties).
    pub fn dominant_class(&self) -> usize {
        let mut best = 0;
        for (c, &n) in self.counts_by_true_class.iter().enumerate() {
            if n > self.counts_by_true_class[best] {
                best = c;
            }
        }
        best
    }
}

/// For each selected checkpoint on its own: rank by single-checkpoint
/// self-influence, keep the top fraction and count mislabels per true class.
pub fn checkpoint_decomposition(
    selection: &CheckpointSelection,
    checkpoints: &[Checkpoint],
    top_fraction: f64,
    dataset: &[Example],
    view: GradientView,
) -> Result<Vec<CheckpointBreakdown>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "top fraction must lie in (0, 1], got {top_fraction}"
        )));
    }
    let resolved = selection.resolve(checkpoints)?;
    let classes = resolved[0].state.spec().output_width();
    let index = DatasetIndex::new(dataset)?;
    let keep = ((top_fraction * dataset.len() as f64).round() as usize).min(dataset.len());
    let mut out = Vec::with_capacity(resolved.len());
    for (c, &weight) in resolved.iter().zip(selection.weights()) {
        let single = CheckpointSelection::new(vec![c.step], vec![weight])?;
        let scorer = TracInCp::new(&single, checkpoints, view)?;
        let scores = scorer.self_influence_all(dataset)?;
        let ranked = rank_examples(&scores, true, None)?;
        let mut counts = vec![0usize; classes];
        for id in ranked.into_iter().take(keep) {
            let ex = index.get(id)?;
            if ex.is_mislabelled() {
                let t = ex
                    .true_label
                    .expect("mislabelled examples carry a true label");
                counts[t] += 1;
            }
        }
        out.push(CheckpointBreakdown {
            step: c.step,
            counts_by_true_class: counts,
        });
    }
    Ok(out)
}

/// Positions of the `k` checkpoints whose preceding interval reduced the
/// training loss the most, in ascending order. `checkpoint_losses[i]` is the
/// loss at checkpoint `i`; the interval before checkpoint 0 starts at
/// `initial_loss`. Ties go to the earlier checkpoint.
pub fn select_checkpoints(
    initial_loss: f64,
    checkpoint_losses: &[f64],
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("must select at least one checkpoint"));
    }
    if k > checkpoint_losses.len() {
        return Err(Error::invalid(format!(
            "asked for {k} checkpoints but only {} exist",
            checkpoint_losses.len()
        )));
    }
    let reductions: Vec<f64> = std::iter::once(initial_loss)
        .chain(checkpoint_losses.iter().copied())
        .collect::<Vec<_>>()
        .windows(2)
        .map(|w| w[0] - w[1])
        .collect();
    let mut order: Vec<usize> = (0..reductions.len()).collect();
    order.sort_by(|&a, &b| reductions[b].total_cmp(&reductions[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Loss recorded at each checkpoint's epoch.
pub fn checkpoint_losses(trace: &TrainingTrace, checkpoints: &[Checkpoint]) -> Result<Vec<f64>> {
    checkpoints
        .iter()
        .map(|c| {
            c.epoch
                .checked_sub(1)
                .and_then(|e| trace.epoch_losses.get(e).copied())
                .ok_or_else(|| Error::invalid(format!("no loss recorded for epoch {}", c.epoch)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproximationQuality {
    /// `(first-order predicted loss drop, actual loss drop)` per (step, probe).
    pub pairs: Vec<(f64, f64)>,
    /// `None` when either side has zero variance.
    pub pearson: Option<f64>,
}

/// Compares the first-order prediction of every step's test-loss drop with the
/// drop observed by replay.
pub fn approximation_quality(
    trace: &TrainingTrace,
    dataset: &[Example],
    probes: &[Example],
) -> Result<ApproximationQuality> {
    let mut pairs = Vec::with_capacity(trace.steps.len() * probes.len());
    training::replay_with(trace, dataset, |step| {
        let batch_grad = model::batch_gradient(step.before, step.batch.iter().copied())?;
        let rows = probes
            .par_iter()
            .map(|p| {
                let (before, g) = model::loss_and_gradient(step.before, p)?;
                let after = model::loss(step.after, p)?;
                Ok((step.record.step_size * g.dot(&batch_grad)?, before - after))
            })
            .collect::<Result<Vec<_>>>()?;
        pairs.extend(rows);
        Ok(())
    })?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let pearson = stats::pearson(&xs, &ys);
    Ok(ApproximationQuality { pairs, pearson })
}
