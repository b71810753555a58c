use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset, MnistSplit};
use crate::error::{Error, Result};
use crate::layers::IntrinsicGranularity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Eval,
    Train,
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Eval => "eval",
            Command::Train => "train",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Standard MNIST file names in `dir`.
    Mnist { dir: PathBuf, split: Split },
    /// An explicit IDX image/label pair.
    Idx { images: PathBuf, labels: PathBuf },
    /// Seeded Gaussian blobs.
    Blobs {
        classes: usize,
        samples_per_class: usize,
        dims: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl DatasetSpec {
    fn rebase(&mut self, base: &Path) {
        match self {
            DatasetSpec::Mnist { dir, .. } => *dir = base.join(&*dir),
            DatasetSpec::Idx { images, labels } => {
                *images = base.join(&*images);
                *labels = base.join(&*labels);
            }
            DatasetSpec::Blobs { .. } => {}
        }
    }

    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Mnist { dir, split } => data::load_mnist(
                dir,
                match split {
                    Split::Train => MnistSplit::Train,
                    Split::Test => MnistSplit::Test,
                },
            ),
            DatasetSpec::Idx { images, labels } => data::load_idx(images, labels),
            DatasetSpec::Blobs {
                classes,
                samples_per_class,
                dims,
                seed,
            } => data::synth_gaussian_blobs(*classes, *samples_per_class, *dims, *seed),
        }
    }
}

/// Hyperparameters of `fixquant train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub l2_lambda: f64,
    /// Quantizer spec applied to every gradient not matched by the map's `gradient` list.
    #[serde(default)]
    pub gradient_quantizer: Option<String>,
}

/// One run, as read from the JSON config file. Relative paths are resolved
/// against the directory holding the config file. Command-line flags
/// (`--seed`, `--out`, `--jobs`) override the matching fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; when present it must match the subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub model: PathBuf,
    /// Weight store directory. Optional for `train` (fresh seeded weights).
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Quantizer map file with `intrinsic`, `extrinsic` and `gradient` lists.
    #[serde(default)]
    pub quantizers: Option<PathBuf>,
    pub dataset: DatasetSpec,
    /// Held-out set for per-epoch accuracy during `train`.
    #[serde(default)]
    pub test_dataset: Option<DatasetSpec>,
    /// Sweep plan, required by `sweep`.
    #[serde(default)]
    pub plan: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub intrinsic_granularity: IntrinsicGranularity,
    /// `eval` only: evaluate on a seeded fraction of the dataset.
    #[serde(default)]
    pub eval_subset_fraction: Option<f64>,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    /// Parse the file and apply overrides. Paths stay as written; see [`RunConfig::resolved`].
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = Some(out.clone());
        }
        if let Some(jobs) = overrides.jobs {
            cfg.jobs = Some(jobs);
        }
        Ok(cfg)
    }

    /// Copy with every relative path joined onto `base`. Overridden `out`
    /// paths come from the command line and are kept relative to the working
    /// directory.
    pub fn resolved(&self, base: &Path, overrides: &Overrides) -> Self {
        let mut cfg = self.clone();
        let join = |p: &mut PathBuf| *p = base.join(&*p);
        join(&mut cfg.model);
        cfg.weights.as_mut().map(join);
        cfg.quantizers.as_mut().map(join);
        cfg.plan.as_mut().map(join);
        if overrides.out.is_none() {
            cfg.out.as_mut().map(join);
        }
        cfg.dataset.rebase(base);
        if let Some(t) = cfg.test_dataset.as_mut() {
            t.rebase(base);
        }
        cfg
    }

    pub fn check_command(&self, command: Command) -> Result<()> {
        match self.command {
            Some(c) if c != command => Err(Error::Config(format!(
                "config is for `{}` but `{}` was requested",
                c.name(),
                command.name()
            ))),
            _ => Ok(()),
        }
    }
}
