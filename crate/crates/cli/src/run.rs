//! Shared plumbing: datasets, model spec, cached training artifacts, manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use traceng::data::{self, DatasetKind, DatasetManifest};
use traceng::eval::StudySubset;
use traceng::influence::{self, CheckpointSelection, GradientView};
use traceng::model::{Example, LayerId, LossKind, ModelSpec, Target};
use traceng::persist;
use traceng::sketch::SketchSpec;
use traceng::training::{self, Checkpoint, TrainConfig, TrainOutcome};

use crate::config::{CheckpointChoice, ExperimentConfig, LayerScope, Seeds, SketchKind};
use crate::CliError;

/// Sketch dimension used when a command needs one and none is configured.
pub const DEFAULT_SKETCH_D: usize = 64;

pub struct Datasets {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub manifests: Vec<DatasetManifest>,
}

pub fn load_datasets(c: &ExperimentConfig) -> Result<Datasets, CliError> {
    let (train, test, train_desc, test_desc) = match &c.data {
        Some(gen) => {
            let test_seed = c.seeds.data.wrapping_add(1);
            let train = data::generate(&gen.train, c.seeds.data)?;
            let test = data::generate(&gen.test, test_seed)?;
            let a =
                DatasetManifest::describe("train", gen.train.kind(), Some(c.seeds.data), &train);
            let b = DatasetManifest::describe("test", gen.test.kind(), Some(test_seed), &test);
            (train, test, a, b)
        }
        None => {
            let p = &c.paths;
            let (train, kind) = match (&p.train_csv, &p.train_idx) {
                (Some(path), _) => (data::load_csv(path)?, DatasetKind::Csv),
                (None, Some(idx)) => (
                    data::load_idx(&idx.images, &idx.labels)?,
                    DatasetKind::IdxPair,
                ),
                (None, None) => unreachable!("validated"),
            };
            let (test, test_kind) = match (&p.test_csv, &p.test_idx) {
                (Some(path), _) => (data::load_csv(path)?, DatasetKind::Csv),
                (None, Some(idx)) => (
                    data::load_idx(&idx.images, &idx.labels)?,
                    DatasetKind::IdxPair,
                ),
                (None, None) => {
                    return Err(CliError::Config(
                        "file datasets need paths.test_csv or paths.test_idx".into(),
                    ))
                }
            };
            let a = DatasetManifest::describe("train", kind, None, &train);
            let b = DatasetManifest::describe("test", test_kind, None, &test);
            (train, test, a, b)
        }
    };
    if train.is_empty() {
        return Err(CliError::Config("training set is empty".into()));
    }
    Ok(Datasets {
        train,
        test,
        manifests: vec![train_desc, test_desc],
    })
}

pub fn model_spec(c: &ExperimentConfig, d: &Datasets) -> Result<ModelSpec, CliError> {
    let dim = d.train[0].features.len();
    let output = match c.model.loss {
        LossKind::MeanSquaredError => 1,
        LossKind::SoftmaxCrossEntropy => {
            let mut classes = 0;
            for z in d.train.iter().chain(&d.test) {
                match z.label {
                    Target::Class(k) => {
                        classes = classes.max(k + 1).max(z.true_label.map_or(0, |t| t + 1))
                    }
                    Target::Value(_) => {
                        return Err(CliError::Config(
                            "regression targets need model.loss = \"mean_squared_error\"".into(),
                        ))
                    }
                }
            }
            classes.max(2)
        }
    };
    let widths = std::iter::once(dim)
        .chain(c.model.hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect();
    let spec = ModelSpec::new(widths, c.model.activation, c.model.loss)
        .with_seed(c.seeds.init)
        .with_scale(c.model.init_scale);
    spec.validate()?;
    Ok(spec)
}

pub fn train_config(c: &ExperimentConfig) -> Result<TrainConfig, CliError> {
    let config = TrainConfig {
        batch_size: c.train.batch_size,
        epochs: c.train.epochs,
        lr_schedule: c.step_schedule(),
        shuffle_seed: c.seeds.shuffle,
        checkpoint_every: c.train.checkpoint_every,
        trace_mode: c.train.trace,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize, Deserialize)]
struct TrainingIndex {
    key: String,
    checkpoints: Vec<String>,
}

const TRAINING_INDEX: &str = "training.json";
const TRACE_FILE: &str = "trace.bin";
const FINAL_FILE: &str = "final.ckpt";

fn training_key(spec: &ModelSpec, config: &TrainConfig, d: &Datasets) -> Result<String, CliError> {
    let fingerprints: Vec<&str> = d.manifests.iter().map(|m| m.fingerprint.as_str()).collect();
    let blob = serde_json::to_vec(&(spec, config, fingerprints))?;
    Ok(format!("{:016x}", data::fnv1a(&blob)))
}

fn checkpoint_name(c: &Checkpoint) -> String {
    format!("ckpt_{:08}.ckpt", c.step)
}

/// Writes checkpoints, final state, trace, loss history and the datasets.
pub fn save_training(
    out: &Path,
    spec: &ModelSpec,
    config: &TrainConfig,
    d: &Datasets,
    outcome: &TrainOutcome,
) -> Result<Vec<PathBuf>, CliError> {
    let dir = out.join("checkpoints");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut names = Vec::new();
    for ckpt in &outcome.checkpoints {
        let name = checkpoint_name(ckpt);
        persist::save_checkpoint(&dir.join(&name), ckpt)?;
        written.push(dir.join(&name));
        names.push(name);
    }
    let last = outcome.checkpoints.last();
    let final_ckpt = Checkpoint {
        step: outcome.trace.num_steps() as u64,
        epoch: config.epochs,
        state: outcome.final_state.clone(),
        step_size: last.map_or(0.0, |c| c.step_size),
        step_size_varied: false,
    };
    persist::save_checkpoint(&out.join(FINAL_FILE), &final_ckpt)?;
    persist::save_trace(&out.join(TRACE_FILE), &outcome.trace)?;

    let mut hist = csv::Writer::from_path(out.join("loss_history.csv"))?;
    hist.write_record(["epoch", "mean_train_loss"])?;
    hist.write_record(["0".to_string(), outcome.trace.initial_loss.to_string()])?;
    for (e, l) in outcome.trace.epoch_losses.iter().enumerate() {
        hist.write_record([(e + 1).to_string(), l.to_string()])?;
    }
    hist.flush()?;

    data::save_csv(&d.train, &out.join("train.csv"))?;
    data::save_csv(&d.test, &out.join("test.csv"))?;

    let index = TrainingIndex {
        key: training_key(spec, config, d)?,
        checkpoints: names,
    };
    fs::write(
        out.join(TRAINING_INDEX),
        serde_json::to_string_pretty(&index)?,
    )?;
    written.extend(
        [
            FINAL_FILE,
            TRACE_FILE,
            "loss_history.csv",
            "train.csv",
            "test.csv",
            TRAINING_INDEX,
        ]
        .iter()
        .map(|f| out.join(f)),
    );
    Ok(written)
}

fn load_training(out: &Path, key: &str) -> Option<TrainOutcome> {
    let index: TrainingIndex =
        serde_json::from_slice(&fs::read(out.join(TRAINING_INDEX)).ok()?).ok()?;
    if index.key != key {
        return None;
    }
    let checkpoints = index
        .checkpoints
        .iter()
        .map(|n| persist::load_checkpoint(&out.join("checkpoints").join(n)))
        .collect::<traceng::Result<Vec<_>>>()
        .ok()?;
    let final_state = persist::load_checkpoint(&out.join(FINAL_FILE)).ok()?.state;
    let trace = persist::load_trace(&out.join(TRACE_FILE)).ok()?;
    Some(TrainOutcome {
        final_state,
        checkpoints,
        trace,
    })
}

/// Reuses artifacts from an earlier `train` in the same output directory when
/// they were produced from identical inputs; otherwise trains and saves.
pub fn train_or_load(
    out: &Path,
    spec: &ModelSpec,
    config: &TrainConfig,
    d: &Datasets,
) -> Result<TrainOutcome, CliError> {
    let key = training_key(spec, config, d)?;
    if let Some(found) = load_training(out, &key) {
        log::info!("reusing training artifacts in {}", out.display());
        return Ok(found);
    }
    log::info!(
        "no matching training artifacts in {}; training",
        out.display()
    );
    let outcome = training::train(config, &d.train, spec)?;
    fs::create_dir_all(out)?;
    save_training(out, spec, config, d, &outcome)?;
    Ok(outcome)
}

pub fn sketch_spec(c: &ExperimentConfig, d: usize) -> SketchSpec {
    match c.influence.sketch_mode {
        SketchKind::Dense => SketchSpec::dense(d, c.seeds.sketch),
        SketchKind::Rank1 => SketchSpec::rank1(d, c.seeds.sketch),
    }
}

pub fn layer(c: &ExperimentConfig) -> Option<LayerId> {
    match c.influence.layer {
        LayerScope::All => None,
        LayerScope::Last => Some(LayerId::Last),
    }
}

pub fn gradient_view(c: &ExperimentConfig) -> GradientView {
    GradientView {
        layer: layer(c),
        sketch: c.influence.sketch_d.map(|d| sketch_spec(c, d)),
        train_loss_scale: 1.0,
    }
}

pub fn selection(
    c: &ExperimentConfig,
    outcome: &TrainOutcome,
) -> Result<CheckpointSelection, CliError> {
    let ckpts = &outcome.checkpoints;
    let positions = match (c.influence.checkpoints, c.influence.num_checkpoints) {
        (CheckpointChoice::All, _) => (0..ckpts.len()).collect(),
        (CheckpointChoice::Evenly, Some(k)) => {
            StudySubset::evenly_spaced(ckpts.len(), k)?.positions
        }
        (CheckpointChoice::LossReduction, Some(k)) => {
            let losses = influence::checkpoint_losses(&outcome.trace, ckpts)?;
            influence::select_checkpoints(outcome.trace.initial_loss, &losses, k)?
        }
        _ => unreachable!("validated"),
    };
    let sel = CheckpointSelection::from_positions(ckpts, &positions)?;
    Ok(if c.influence.equal_weights {
        sel.with_equal_weights()
    } else {
        sel
    })
}

pub fn find_examples<'a>(
    set: &'a [Example],
    ids: &[u32],
    what: &str,
) -> Result<Vec<&'a Example>, CliError> {
    if ids.is_empty() {
        return Err(CliError::Config(format!(
            "no {what} ids given; pass --test-ids or set influence.test_ids"
        )));
    }
    let index = training::DatasetIndex::new(set)?;
    ids.iter()
        .map(|&id| {
            index
                .get(id)
                .map_err(|_| CliError::Config(format!("{what} id {id} not found")))
        })
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seeds: Seeds,
    datasets: &'a [DatasetManifest],
    outputs: Vec<String>,
    created_unix: u64,
}

/// Resolved config copy and JSON manifest next to a command's outputs.
pub fn write_provenance(
    c: &ExperimentConfig,
    command: &str,
    d: &Datasets,
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let out = &c.paths.out;
    fs::create_dir_all(out)?;
    let resolved = c.to_toml()?;
    fs::write(out.join(format!("{command}.resolved.toml")), &resolved)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: format!("{:016x}", data::fnv1a(resolved.as_bytes())),
        seeds: c.seeds,
        datasets: &d.manifests,
        outputs: outputs
            .iter()
            .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
            .collect(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |t| t.as_secs()),
    };
    let mut f = fs::File::create(out.join(format!("{command}.manifest.json")))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(())
}
