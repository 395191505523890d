//! SGD training with epoch-boundary checkpoints and a replayable step trace.
//!
//! The trace keeps only batch membership and step sizes. Parameter vectors at
//! any step are recovered by replaying from the seeded initial state, which
//! reproduces the live run bit for bit because both paths go through
//! [`sgd_step`].

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Example, ExampleId, ModelSpec, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    pub step_size: f64,
    pub start_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    Full,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_schedule: Vec<LrPhase>,
    pub shuffle_seed: u64,
    pub checkpoint_every: usize,
    pub trace_mode: TraceMode,
}

impl TrainConfig {
    /// Constant step size, checkpoint every epoch, full trace.
    pub fn constant(step_size: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            batch_size,
            epochs,
            lr_schedule: vec![LrPhase {
                step_size,
                start_epoch: 0,
            }],
            shuffle_seed: 0,
            checkpoint_every: 1,
            trace_mode: TraceMode::Full,
        }
    }

    pub fn with_shuffle_seed(mut self, seed: u64) -> Self {
        self.shuffle_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        match self.lr_schedule.first() {
            Some(first) if first.start_epoch == 0 => {}
            _ => return Err(Error::invalid("lr_schedule must start at epoch 0")),
        }
        if self
            .lr_schedule
            .windows(2)
            .any(|w| w[1].start_epoch <= w[0].start_epoch)
        {
            return Err(Error::invalid(
                "lr_schedule start epochs must strictly increase",
            ));
        }
        if self
            .lr_schedule
            .iter()
            .any(|p| !(p.step_size > 0.0 && p.step_size.is_finite()))
        {
            return Err(Error::invalid("step sizes must be positive and finite"));
        }
        Ok(())
    }

    pub fn step_size_for_epoch(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|p| p.start_epoch <= epoch)
            .map(|p| p.step_size)
            .unwrap_or(self.lr_schedule[0].step_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub example_ids: Vec<ExampleId>,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of SGD steps applied before this state was saved.
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub state: ModelState,
    pub step_size: f64,
    /// Set when the schedule changed inside the interval this checkpoint closes.
    pub step_size_varied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    pub steps: Vec<StepRecord>,
    /// Mean training loss before the first step.
    pub initial_loss: f64,
    /// Mean training loss over the whole dataset after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainingTrace {
    pub fn is_full(&self) -> bool {
        self.config.trace_mode == TraceMode::Full
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_state: ModelState,
    pub checkpoints: Vec<Checkpoint>,
    pub trace: TrainingTrace,
}

/// `w - eta * mean_gradient(w, batch)`.
pub fn sgd_step<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
    step_size: f64,
) -> Result<ModelState> {
    let (_, next) = step_with_loss(state, batch, step_size)?;
    Ok(next)
}

fn step_with_loss<'a>(
    state: &ModelState,
    batch: impl IntoIterator<Item = &'a Example>,
    step_size: f64,
) -> Result<(f64, ModelState)> {
    let (batch_loss, g) = model::batch_loss_and_gradient(state, batch)?;
    let mut next = state.clone();
    for (p, gi) in next.params_mut().iter_mut().zip(g.values()) {
        *p -= step_size * gi;
    }
    if !batch_loss.is_finite() || !next.is_finite() {
        return Err(Error::NumericOverflow(format!(
            "non-finite update (batch loss {batch_loss})"
        )));
    }
    Ok((batch_loss, next))
}

/// Id lookup over a dataset slice.
pub struct DatasetIndex<'a> {
    examples: &'a [Example],
    positions: HashMap<ExampleId, usize>,
}

impl<'a> DatasetIndex<'a> {
    pub fn new(examples: &'a [Example]) -> Result<Self> {
        let mut positions = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if positions.insert(ex.id, i).is_some() {
                return Err(Error::invalid(format!("duplicate example id {}", ex.id)));
            }
        }
        Ok(Self {
            examples,
            positions,
        })
    }

    pub fn get(&self, id: ExampleId) -> Result<&'a Example> {
        self.positions
            .get(&id)
            .map(|&i| &self.examples[i])
            .ok_or_else(|| Error::invalid(format!("example id {id} is not in the dataset")))
    }

    pub fn contains(&self, id: ExampleId) -> bool {
        self.positions.contains_key(&id)
    }

    pub fn batch(&self, ids: &[ExampleId]) -> Result<Vec<&'a Example>> {
        ids.iter().map(|&id| self.get(id)).collect()
    }

    pub fn examples(&self) -> &'a [Example] {
        self.examples
    }
}

pub fn train(config: &TrainConfig, dataset: &[Example], spec: &ModelSpec) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    // Validates unique ids.
    DatasetIndex::new(dataset)?;

    let mut state = spec.init_state()?;
    let initial_loss = model::mean_loss(&state, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut steps = Vec::new();
    let mut checkpoints = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;
    let mut interval_start_epoch = 0usize;

    for epoch in 0..config.epochs {
        let step_size = config.step_size_for_epoch(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (batch_loss, next) = step_with_loss(&state, batch.iter().copied(), step_size)
                .map_err(|e| match e {
                    Error::NumericOverflow(_) => Error::Divergence {
                        step,
                        loss: model::batch_loss_and_gradient(&state, batch.iter().copied())
                            .map(|(l, _)| l)
                            .unwrap_or(f64::NAN),
                    },
                    other => other,
                })?;
            log::trace!("step {step}: batch loss {batch_loss:.6}");
            if config.trace_mode == TraceMode::Full {
                steps.push(StepRecord {
                    step,
                    example_ids: batch.iter().map(|ex| ex.id).collect(),
                    step_size,
                });
            }
            state = next;
            step += 1;
        }
        let epoch_loss = model::mean_loss(&state, dataset).map_err(|_| Error::Divergence {
            step,
            loss: f64::NAN,
        })?;
        epoch_losses.push(epoch_loss);
        log::debug!("epoch {}: mean training loss {epoch_loss:.6}", epoch + 1);

        if (epoch + 1) % config.checkpoint_every == 0 {
            let varied =
                (interval_start_epoch..=epoch).any(|e| config.step_size_for_epoch(e) != step_size);
            if varied {
                log::warn!(
                    "step size changed between checkpoints ending at epoch {}; recording {step_size}",
                    epoch + 1
                );
            }
            checkpoints.push(Checkpoint {
                step,
                epoch: epoch + 1,
                state: state.clone(),
                step_size,
                step_size_varied: varied,
            });
            interval_start_epoch = epoch + 1;
        }
    }

    Ok(TrainOutcome {
        final_state: state,
        checkpoints,
        trace: TrainingTrace {
            config: config.clone(),
            spec: spec.clone(),
            steps,
            initial_loss,
            epoch_losses,
        },
    })
}

fn require_full(trace: &TrainingTrace) -> Result<()> {
    if !trace.is_full() {
        return Err(Error::Unsupported(
            "replay needs a trace recorded with trace_mode = full".into(),
        ));
    }
    Ok(())
}

/// Parameters after the first `upto_step` recorded steps.
pub fn replay(trace: &TrainingTrace, dataset: &[Example], upto_step: usize) -> Result<ModelState> {
    require_full(trace)?;
    if upto_step > trace.steps.len() {
        return Err(Error::StepOutOfRange {
            step: upto_step,
            len: trace.steps.len(),
        });
    }
    let index = DatasetIndex::new(dataset)?;
    let mut state = trace.spec.init_state()?;
    for record in &trace.steps[..upto_step] {
        let batch = index.batch(&record.example_ids)?;
        state = sgd_step(&state, batch, record.step_size)?;
    }
    Ok(state)
}

/// One replayed step as seen by a [`replay_with`] visitor.
pub struct ReplayStep<'s, 'd> {
    pub record: &'s StepRecord,
    pub batch: &'s [&'d Example],
    pub before: &'s ModelState,
    pub after: &'s ModelState,
}

/// Replays the whole trace, handing each step's states to `visit`.
pub fn replay_with<F>(
    trace: &TrainingTrace,
    dataset: &[Example],
    mut visit: F,
) -> Result<ModelState>
where
    F: FnMut(ReplayStep<'_, '_>) -> Result<()>,
{
    require_full(trace)?;
    let index = DatasetIndex::new(dataset)?;
    let mut state = trace.spec.init_state()?;
    for record in &trace.steps {
        let batch = index.batch(&record.example_ids)?;
        let next = sgd_step(&state, batch.iter().copied(), record.step_size)?;
        visit(ReplayStep {
            record,
            batch: &batch,
            before: &state,
            after: &next,
        })?;
        state = next;
    }
    Ok(state)
}
