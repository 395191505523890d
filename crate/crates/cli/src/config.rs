//! Experiment configuration: a TOML file with unknown keys rejected, plus
//! command-line overrides. The resolved form is written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use traceng::baselines::HessianScope;
use traceng::data::Generator;
use traceng::influence::Method;
use traceng::model::{Activation, LossKind};
use traceng::training::{LrPhase, TraceMode};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub influence: InfluenceConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Training set generation; the test set uses `data + 1`.
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub inject: u64,
    pub sketch: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            init: 1,
            shuffle: 1,
            inject: 1,
            sketch: 1,
        }
    }
}

/// Generated datasets. Mutually exclusive with file sources under `[paths]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Generator,
    pub test: Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "one")]
    pub init_scale: f64,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_loss() -> LossKind {
    LossKind::SoftmaxCrossEntropy
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Constant step size; ignored when `lr_schedule` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lr_schedule: Vec<LrPhase>,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "one_usize")]
    pub checkpoint_every: usize,
    #[serde(default = "full_trace")]
    pub trace: TraceMode,
}

fn one_usize() -> usize {
    1
}

fn full_trace() -> TraceMode {
    TraceMode::Full
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScope {
    All,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    All,
    Evenly,
    LossReduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchKind {
    Dense,
    Rank1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceConfig {
    pub method: Method,
    pub checkpoints: CheckpointChoice,
    /// Subset size for `evenly` and `loss_reduction`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_checkpoints: Option<usize>,
    pub equal_weights: bool,
    pub layer: LayerScope,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sketch_d: Option<usize>,
    pub sketch_mode: SketchKind,
    /// Parameters the influence-function baselines invert the Hessian over.
    pub hessian_scope: HessianScope,
    pub damping: f64,
    pub representer_lambda: f64,
    /// Test-set ids to score against.
    pub test_ids: Vec<u32>,
    pub top_k: usize,
    pub filter_misclassified: bool,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            method: Method::TracinCp,
            checkpoints: CheckpointChoice::All,
            num_checkpoints: None,
            equal_weights: false,
            layer: LayerScope::All,
            sketch_d: None,
            sketch_mode: SketchKind::Dense,
            hessian_scope: HessianScope::LastLayer,
            damping: traceng::baselines::DEFAULT_HESSIAN_DAMPING,
            representer_lambda: traceng::baselines::DEFAULT_REPRESENTER_LAMBDA,
            test_ids: Vec::new(),
            top_k: 10,
            filter_misclassified: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mislabel_fraction: f64,
    pub methods: Vec<Method>,
    pub fix_fractions: Vec<f64>,
    /// Points written per recovery curve; must evenly subsample the 1% grid.
    pub curve_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mislabel_fraction: 0.1,
            methods: vec![
                Method::TracinCp,
                Method::InfluenceFunction,
                Method::Representer,
            ],
            fix_fractions: vec![0.0, 0.1, 0.2, 0.3, 0.5, 1.0],
            curve_grid: traceng::eval::CURVE_GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_idx: Option<IdxPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_idx: Option<IdxPair>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            train_csv: None,
            test_csv: None,
            train_idx: None,
            test_idx: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPair {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub test_ids: Option<Vec<u32>>,
    pub top_k: Option<usize>,
    pub equal_weights: bool,
    pub layer: Option<LayerScope>,
    pub sketch_d: Option<usize>,
    pub filter_misclassified: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: Self = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.resolve_relative_paths(path.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    /// Input files are relative to the config file; `out` is relative to the
    /// working directory.
    fn resolve_relative_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        paths.train_csv.as_mut().map(fix);
        paths.test_csv.as_mut().map(fix);
        for pair in [&mut paths.train_idx, &mut paths.test_idx]
            .into_iter()
            .flatten()
        {
            fix(&mut pair.images);
            fix(&mut pair.labels);
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seeds = Seeds {
                data: seed,
                init: seed,
                shuffle: seed,
                inject: seed,
                sketch: seed,
            };
        }
        let inf = &mut self.influence;
        if let Some(m) = o.method {
            inf.method = m;
        }
        if let Some(ids) = &o.test_ids {
            inf.test_ids = ids.clone();
        }
        if let Some(k) = o.top_k {
            inf.top_k = k;
        }
        inf.equal_weights |= o.equal_weights;
        if let Some(layer) = o.layer {
            inf.layer = layer;
        }
        if let Some(d) = o.sketch_d {
            inf.sketch_d = Some(d);
        }
        inf.filter_misclassified |= o.filter_misclassified;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let files = self.paths.train_csv.is_some() || self.paths.train_idx.is_some();
        match (&self.data, files) {
            (Some(_), true) => {
                return bad(
                    "give either [data] generators or training files under [paths], not both"
                        .into(),
                )
            }
            (None, false) => {
                return bad(
                    "no dataset: add a [data] section or paths.train_csv / paths.train_idx".into(),
                )
            }
            _ => {}
        }
        if self.paths.train_csv.is_some() && self.paths.train_idx.is_some() {
            return bad("paths.train_csv and paths.train_idx are mutually exclusive".into());
        }
        if self.train.step_size.is_none() && self.train.lr_schedule.is_empty() {
            return bad("train needs step_size or lr_schedule".into());
        }
        if self.train.trace == TraceMode::None
            && matches!(
                self.influence.method,
                Method::Idealized | Method::FirstOrder
            )
        {
            return bad(format!(
                "method {} needs train.trace = \"full\"",
                self.influence.method
            ));
        }
        let f = self.eval.mislabel_fraction;
        if !(0.0..1.0).contains(&f) {
            return bad(format!(
                "eval.mislabel_fraction must lie in [0, 1), got {f}"
            ));
        }
        if let Some(x) = self
            .eval
            .fix_fractions
            .iter()
            .find(|x| !(0.0..=1.0).contains(*x))
        {
            return bad(format!("eval.fix_fractions must lie in [0, 1], got {x}"));
        }
        let g = self.eval.curve_grid;
        let steps = traceng::eval::CURVE_GRID - 1;
        if g < 2 || !steps.is_multiple_of(g - 1) {
            return bad(format!(
                "eval.curve_grid must be 1 + a divisor of {steps} (e.g. 101, 51, 11), got {g}"
            ));
        }
        if matches!(
            self.influence.checkpoints,
            CheckpointChoice::Evenly | CheckpointChoice::LossReduction
        ) && self.influence.num_checkpoints.is_none()
        {
            return bad(
                "influence.num_checkpoints is required for evenly and loss_reduction selection"
                    .into(),
            );
        }
        if self.influence.sketch_d == Some(0) {
            return bad("sketch dimension must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn step_schedule(&self) -> Vec<LrPhase> {
        if self.train.lr_schedule.is_empty() {
            vec![LrPhase {
                step_size: self.train.step_size.unwrap_or_default(),
                start_epoch: 0,
            }]
        } else {
            self.train.lr_schedule.clone()
        }
    }
}
