//! Mislabel injection, recovery curves, fix-and-retrain and checkpoint studies.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, DampedHessian, HessianScope, RepresenterSettings, SketchSettings};
use crate::error::{Error, Result};
use crate::influence::{
    self, checkpoint_losses, rank_examples, select_checkpoints, CheckpointSelection, GradientView,
    Method, TracInCp,
};
use crate::model::{self, Example, ExampleId, ModelSpec, ModelState, Target};
use crate::sketch::SketchSpec;
use crate::stats;
use crate::training::{train, Checkpoint, TrainConfig, TrainingTrace};

/// Grid points of a recovery curve (fractions `0, 0.01, ..., 1`).
pub const CURVE_GRID: usize = 101;

/// Flips `floor(fraction * n)` seeded-random examples to the reference
/// model's highest-scoring incorrect class, keeping the original in
/// `true_label`.
pub fn inject_mislabels(
    dataset: &[Example],
    fraction: f64,
    reference: &ModelState,
    seed: u64,
) -> Result<Vec<Example>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "mislabel fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let classes = reference.spec().output_width();
    if classes < 2 {
        return Err(Error::invalid("mislabel injection needs a classifier"));
    }
    let count = (fraction * dataset.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<usize> = rand::seq::index::sample(&mut rng, dataset.len(), count)
        .into_iter()
        .collect();
    dataset
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let truth = z
                .label
                .class()
                .ok_or_else(|| Error::invalid("mislabel injection needs class labels"))?;
            let mut out = z.clone();
            out.true_label = None;
            if chosen.contains(&i) {
                let logits = model::predict(reference, &z.features)?;
                let flipped = (0..classes)
                    .filter(|&c| c != truth)
                    .fold(None, |best: Option<usize>, c| match best {
                        Some(b) if logits[b] >= logits[c] => Some(b),
                        _ => Some(c),
                    })
                    .expect("at least two classes");
                out.label = Target::Class(flipped);
                out.true_label = Some(truth);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCurve {
    /// `(fraction inspected, fraction of mislabels recovered)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RecoveryCurve {
    /// Recovered fraction at the grid point nearest `fraction`.
    pub fn at(&self, fraction: f64) -> f64 {
        let k = (fraction.clamp(0.0, 1.0) * (self.points.len() - 1) as f64).round() as usize;
        self.points[k].1
    }
}

/// Inspects examples by decreasing score (ties by id) on a 1% grid.
pub fn recovery_curve(scores: &[(ExampleId, f64)], dataset: &[Example]) -> Result<RecoveryCurve> {
    let mislabelled: HashSet<ExampleId> = dataset
        .iter()
        .filter(|z| z.is_mislabelled())
        .map(|z| z.id)
        .collect();
    if mislabelled.is_empty() {
        return Err(Error::invalid("dataset has no injected mislabels"));
    }
    let ids: HashSet<ExampleId> = dataset.iter().map(|z| z.id).collect();
    let scored: HashSet<ExampleId> = scores.iter().map(|s| s.0).collect();
    if scored != ids || scores.len() != ids.len() {
        return Err(Error::invalid(
            "scores must cover every training example exactly once",
        ));
    }
    let order = rank_examples(scores, true, None)?;
    let n = order.len();
    let mut found = vec![0usize; n + 1];
    for (i, id) in order.iter().enumerate() {
        found[i + 1] = found[i] + usize::from(mislabelled.contains(id));
    }
    let total = mislabelled.len() as f64;
    let points: Vec<(f64, f64)> = (0..CURVE_GRID)
        .map(|k| {
            let f = k as f64 / (CURVE_GRID - 1) as f64;
            let prefix = (f * n as f64).round() as usize;
            (f, found[prefix] as f64 / total)
        })
        .collect();
    let auc = points
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    Ok(RecoveryCurve { points, auc })
}

/// Independent uniform scores, the random-inspection baseline.
pub fn random_scores(dataset: &[Example], seed: u64) -> Vec<(ExampleId, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset
        .iter()
        .map(|z| (z.id, rng.random::<f64>()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixOutcome {
    pub inspect_fraction: f64,
    pub fixed: usize,
    pub test_accuracy: f64,
}

/// Restores the true label of injected examples within the inspected prefix.
pub fn fix_prefix(
    dataset: &[Example],
    scores: &[(ExampleId, f64)],
    inspect_fraction: f64,
) -> Result<(Vec<Example>, usize)> {
    if !(0.0..=1.0).contains(&inspect_fraction) {
        return Err(Error::invalid("inspect fraction must lie in [0, 1]"));
    }
    let order = rank_examples(scores, true, None)?;
    let prefix = (inspect_fraction * order.len() as f64).round() as usize;
    let inspected: HashSet<ExampleId> = order.into_iter().take(prefix).collect();
    let mut fixed = 0;
    let out = dataset
        .iter()
        .map(|z| {
            let mut z = z.clone();
            if inspected.contains(&z.id) {
                if let Some(t) = z.true_label.take() {
                    z.label = Target::Class(t);
                    fixed += 1;
                }
            }
            z
        })
        .collect();
    Ok((out, fixed))
}

/// Fixes the inspected prefix, retrains from scratch with the same config and
/// seeds, and reports test accuracy.
pub fn fix_and_retrain(
    dataset: &[Example],
    scores: &[(ExampleId, f64)],
    inspect_fraction: f64,
    config: &TrainConfig,
    spec: &ModelSpec,
    test_set: &[Example],
) -> Result<FixOutcome> {
    let (fixed_set, fixed) = fix_prefix(dataset, scores, inspect_fraction)?;
    let out = train(config, &fixed_set, spec)?;
    Ok(FixOutcome {
        inspect_fraction,
        fixed,
        test_accuracy: model::accuracy(&out.final_state, test_set)?,
    })
}

/// Inputs for ranking training examples by self influence.
pub struct SelfScoring<'a> {
    pub final_state: &'a ModelState,
    pub checkpoints: &'a [Checkpoint],
    pub selection: &'a CheckpointSelection,
    pub dataset: &'a [Example],
    pub view: GradientView,
    pub trace: Option<&'a TrainingTrace>,
    pub if_damping: f64,
    pub sketch: Option<(SketchSpec, SketchSettings)>,
    pub representer: RepresenterSettings,
}

impl<'a> SelfScoring<'a> {
    pub fn new(
        final_state: &'a ModelState,
        checkpoints: &'a [Checkpoint],
        selection: &'a CheckpointSelection,
        dataset: &'a [Example],
    ) -> Self {
        Self {
            final_state,
            checkpoints,
            selection,
            dataset,
            view: GradientView::default(),
            trace: None,
            if_damping: baselines::DEFAULT_HESSIAN_DAMPING,
            sketch: None,
            representer: RepresenterSettings::default(),
        }
    }

    fn trace(&self, method: Method) -> Result<&'a TrainingTrace> {
        self.trace.ok_or_else(|| {
            Error::Unsupported(format!(
                "{method} self influence needs the full training trace"
            ))
        })
    }

    /// Higher means more suspicious under every method.
    pub fn scores(&self, method: Method) -> Result<Vec<(ExampleId, f64)>> {
        match method {
            Method::TracinCp => TracInCp::new(self.selection, self.checkpoints, self.view)?
                .self_influence_all(self.dataset),
            Method::TracinCpEqual => {
                let equal = self.selection.clone().with_equal_weights();
                TracInCp::new(&equal, self.checkpoints, self.view)?.self_influence_all(self.dataset)
            }
            Method::Idealized => {
                influence::idealized_self_influence_all(self.trace(method)?, self.dataset)
            }
            Method::FirstOrder => {
                influence::first_order_self_influence_all(self.trace(method)?, self.dataset)
            }
            Method::InfluenceFunction => {
                let direct = DampedHessian::build(
                    self.final_state,
                    self.dataset,
                    HessianScope::LastLayer,
                    self.if_damping,
                )?
                .factor()?;
                self.dataset
                    .iter()
                    .map(|z| Ok((z.id, direct.self_influence_magnitude(self.final_state, z)?)))
                    .collect()
            }
            Method::InfluenceFunctionSketched => {
                let (spec, settings) = self.sketch.ok_or_else(|| {
                    Error::Unsupported("sketched influence needs sketch settings".into())
                })?;
                let sk = baselines::inverse_hessian_sketch(
                    self.final_state,
                    self.dataset,
                    spec,
                    settings,
                )?;
                self.dataset
                    .iter()
                    .map(|z| Ok((z.id, sk.self_influence_magnitude(self.final_state, z)?)))
                    .collect()
            }
            Method::Representer => {
                let rep = baselines::representer_finetune(
                    self.final_state,
                    self.dataset,
                    self.representer,
                )?;
                self.dataset
                    .iter()
                    .map(|z| Ok((z.id, rep.self_score(z)?)))
                    .collect()
            }
        }
    }
}

/// A named set of checkpoints, optionally sketched, for the correlation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySubset {
    pub name: String,
    pub positions: Vec<usize>,
    pub sketch: Option<SketchSpec>,
}

impl StudySubset {
    pub fn single(position: usize) -> Self {
        Self {
            name: format!("single_{position}"),
            positions: vec![position],
            sketch: None,
        }
    }

    /// `k` positions spread evenly over `len`, ending at the last.
    pub fn evenly_spaced(len: usize, k: usize) -> Result<Self> {
        if k == 0 || k > len {
            return Err(Error::invalid(format!(
                "cannot space {k} of {len} checkpoints"
            )));
        }
        Ok(Self {
            name: format!("even_{k}"),
            positions: (0..k).map(|j| (j + 1) * len / k - 1).collect(),
            sketch: None,
        })
    }

    pub fn loss_selected(
        trace: &TrainingTrace,
        checkpoints: &[Checkpoint],
        k: usize,
    ) -> Result<Self> {
        let losses = checkpoint_losses(trace, checkpoints)?;
        Ok(Self {
            name: format!("loss_{k}"),
            positions: select_checkpoints(trace.initial_loss, &losses, k)?,
            sketch: None,
        })
    }

    pub fn with_sketch(mut self, spec: SketchSpec) -> Self {
        self.name = format!("{}_d{}", self.name, spec.d);
        self.sketch = Some(spec);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub name: String,
    pub positions: Vec<usize>,
    pub sketch_d: Option<usize>,
    pub pearson: f64,
}

/// Pooled first-order scores `[probe][train]` against which subsets are compared.
pub fn first_order_reference(
    trace: &TrainingTrace,
    dataset: &[Example],
    probes: &[Example],
) -> Result<Vec<Vec<f64>>> {
    influence::tracin_first_order_all(trace, dataset, probes)
}

/// Pearson correlation between each subset's TracInCP scores and first-order
/// scores over all (training example, probe) pairs.
pub fn checkpoint_correlation_study(
    reference: &[Vec<f64>],
    dataset: &[Example],
    checkpoints: &[Checkpoint],
    probes: &[Example],
    subsets: &[StudySubset],
) -> Result<Vec<StudyRow>> {
    let pooled_ref: Vec<f64> = reference.iter().flatten().copied().collect();
    subsets
        .iter()
        .map(|subset| {
            let selection = CheckpointSelection::from_positions(checkpoints, &subset.positions)?;
            let view = GradientView {
                sketch: subset.sketch,
                ..GradientView::default()
            };
            let scorer = TracInCp::new(&selection, checkpoints, view)?;
            let mut pooled = Vec::with_capacity(pooled_ref.len());
            for probe in probes {
                pooled.extend(
                    scorer
                        .score_all(dataset, probe)?
                        .into_iter()
                        .map(|r| r.score),
                );
            }
            let pearson = stats::pearson(&pooled, &pooled_ref).ok_or_else(|| {
                Error::invalid(format!(
                    "subset {} produced zero-variance scores",
                    subset.name
                ))
            })?;
            Ok(StudyRow {
                name: subset.name.clone(),
                positions: subset.positions.clone(),
                sketch_d: subset.sketch.map(|s| s.d),
                pearson,
            })
        })
        .collect()
}

/// `method,fraction,recovered` rows.
pub fn write_curves_csv<W: Write>(w: W, curves: &[(String, RecoveryCurve)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "fraction", "recovered"])?;
    for (name, curve) in curves {
        for (f, r) in &curve.points {
            out.write_record([name.as_str(), &format!("{f:.2}"), &r.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Groups fix-and-retrain outcomes by method: `method,inspect_fraction,fixed,test_accuracy`.
pub fn write_fix_csv<W: Write>(w: W, rows: &[(String, FixOutcome)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "inspect_fraction", "fixed", "test_accuracy"])?;
    for (name, r) in rows {
        out.write_record([
            name.as_str(),
            &r.inspect_fraction.to_string(),
            &r.fixed.to_string(),
            &r.test_accuracy.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Positions of ids inside a dataset, for callers aligning score vectors.
pub fn id_positions(dataset: &[Example]) -> HashMap<ExampleId, usize> {
    dataset.iter().enumerate().map(|(i, z)| (z.id, i)).collect()
}
