//! `fixquant eval|train|sweep`: config loading, fail-fast validation and reports.
//!
//! Every command first loads and checks all inputs (config, model, maps,
//! weights, dataset, plan) and builds the networks it needs. Only then is the
//! output directory created and the computation started, so a validation
//! failure leaves no partial output. Validation failures exit with 1, failures
//! during the computation with 2.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::explore::{
    self, Accuracy, CellKey, CellResult, Evaluator, NetworkEvaluator, SubunitBest, SweepOptions, SweepPlan,
};
use crate::graph::{
    build_network_with, init_weights, BuildOptions, BuiltNetwork, Dtype, ModelSpec, QuantizerMapFile, QuantizerMaps,
    ResolutionEntry, WeightStore,
};
use crate::quantizer::parse_quantizer;
use crate::report::{write_report_json, ProvenanceHasher};
use crate::train::{self, EpochRecord, TrainConfig};

pub use config::{Command, DatasetSpec, Overrides, RunConfig, Split, TrainSection};

pub const EVAL_REPORT: &str = "eval_report.json";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const WEIGHTS_DIR: &str = "weights";
pub const SWEEP_RESUME: &str = "sweep_resume.json";
const DEFAULT_OUT: &str = "out";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub phase: Phase,
    pub error: Error,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.phase {
            Phase::Validation => 1,
            Phase::Runtime => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let phase = match self.phase {
            Phase::Validation => "invalid input",
            Phase::Runtime => "run failed",
        };
        write!(f, "{phase}: {}", self.error)?;
        let mut source = std::error::Error::source(&self.error);
        while let Some(s) = source {
            write!(f, ": {s}")?;
            source = s.source();
        }
        Ok(())
    }
}

trait PhaseExt<T> {
    fn phase(self, phase: Phase) -> std::result::Result<T, CliError>;
}

impl<T> PhaseExt<T> for Result<T> {
    fn phase(self, phase: Phase) -> std::result::Result<T, CliError> {
        self.map_err(|error| CliError { phase, error })
    }
}

/// Provenance block carried by every report.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    /// SHA-256 over the config, the model, map and plan files, the weights and the dataset.
    pub hash: String,
    /// The config as given, with command-line overrides applied.
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub command: Command,
    pub provenance: Provenance,
    pub samples: usize,
    pub correct: usize,
    pub baseline_correct: usize,
    pub absolute_accuracy: f64,
    pub baseline_accuracy: f64,
    pub relative_accuracy_vs_floatbaseline: f64,
    pub resolution: Vec<ResolutionEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub command: Command,
    pub provenance: Provenance,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Accuracy of the saved (f32) weights on the test dataset.
    pub final_test_accuracy: Option<f64>,
    pub weights: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsetRecord {
    pub fraction: f64,
    pub seed: u64,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub command: Command,
    pub provenance: Provenance,
    pub plan: SweepPlan,
    pub subset: SubsetRecord,
    pub baseline: Accuracy,
    pub baseline_accuracy: f64,
    pub threshold: f64,
    pub cells: usize,
    pub bests: Vec<SubunitBest>,
    pub bottleneck: explore::Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    provenance_hash: String,
}

/// What a successful command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: String,
    pub files: Vec<PathBuf>,
}

/// Inputs shared by all commands, loaded during validation.
struct Loaded {
    cfg: RunConfig,
    spec: ModelSpec,
    maps: QuantizerMaps,
    weights: WeightStore,
    dataset: LabeledDataset,
    out: PathBuf,
    options: BuildOptions,
    hasher: ProvenanceHasher,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn hash_weights(hasher: &mut ProvenanceHasher, weights: &WeightStore) {
    for (key, t) in weights.iter() {
        let mut bytes = Vec::with_capacity(t.len() * 8 + t.rank() * 8);
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        hasher.part(key, &bytes);
    }
}

fn hash_dataset(hasher: &mut ProvenanceHasher, label: &str, ds: &LabeledDataset) {
    let mut bytes = Vec::with_capacity(ds.images().len() * 8 + ds.len() * 8);
    for &d in ds.images().shape() {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in ds.images().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &l in ds.labels() {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    hasher.part(label, &bytes);
}

fn load_common(command: Command, config_path: &Path, overrides: &Overrides) -> Result<Loaded> {
    let cfg = RunConfig::load(config_path, overrides)?;
    cfg.check_command(command)?;
    let base = config_path.parent().unwrap_or(Path::new(""));
    let resolved = cfg.resolved(base, overrides);

    let mut hasher = ProvenanceHasher::new();
    hasher.part("command", command.name().as_bytes());
    let cfg_json = crate::report::to_report_json(&cfg).map_err(|e| Error::json(config_path, e))?;
    hasher.part("config", cfg_json.as_bytes());

    let spec = ModelSpec::load(&resolved.model)?;
    hasher.part("model", &read_bytes(&resolved.model)?);
    let maps = match &resolved.quantizers {
        Some(path) => {
            hasher.part("quantizers", &read_bytes(path)?);
            QuantizerMapFile::load(path)?.build()?
        }
        None => QuantizerMaps::default(),
    };
    let weights = match (&resolved.weights, command) {
        (Some(dir), _) => WeightStore::load(dir)?,
        (None, Command::Train) => init_weights(&spec, resolved.seed)?,
        (None, _) => {
            return Err(Error::MissingWeights(format!(
                "no weights directory configured for `{}`",
                command.name()
            )))
        }
    };
    hash_weights(&mut hasher, &weights);
    let dataset = resolved.dataset.load()?;
    if dataset.sample_shape() != spec.input_shape.as_slice() {
        return Err(Error::Config(format!(
            "dataset samples are {:?} but the model expects {:?}",
            dataset.sample_shape(),
            spec.input_shape
        )));
    }
    hash_dataset(&mut hasher, "dataset", &dataset);
    if let Some(jobs) = resolved.jobs {
        if jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
    }
    let out = resolved.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok(Loaded {
        options: BuildOptions {
            granularity: resolved.intrinsic_granularity,
        },
        cfg,
        spec,
        maps,
        weights,
        dataset,
        out,
        hasher,
    })
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Run `command` with the config file at `config_path`.
pub fn run(command: Command, config_path: &Path, overrides: &Overrides) -> std::result::Result<Outcome, CliError> {
    match command {
        Command::Eval => cmd_eval(config_path, overrides),
        Command::Train => cmd_train(config_path, overrides),
        Command::Sweep => cmd_sweep(config_path, overrides),
    }
}

pub fn cmd_eval(config_path: &Path, overrides: &Overrides) -> std::result::Result<Outcome, CliError> {
    use Phase::*;
    let loaded = load_common(Command::Eval, config_path, overrides).phase(Validation)?;
    let (net, baseline, data, resolution) = (|| {
        let empty = QuantizerMaps::default();
        let build = |maps: &QuantizerMaps| -> Result<BuiltNetwork> {
            build_network_with(
                &loaded.spec,
                &maps.intrinsic,
                &maps.extrinsic,
                &loaded.weights,
                loaded.options,
            )
        };
        let net = build(&loaded.maps)?;
        let baseline = build(&empty)?;
        if !loaded.maps.gradient.is_empty() {
            warn!("gradient quantizers have no effect on `eval`");
        }
        let data = match loaded.cfg.eval_subset_fraction {
            Some(f) => data::subset(&loaded.dataset, f, loaded.cfg.subset_seed)?,
            None => loaded.dataset.clone(),
        };
        let resolution = net.resolution_report().to_vec();
        Ok((net, baseline, data, resolution))
    })()
    .phase(Validation)?;
    let hash = loaded.hasher.finish();

    (|| {
        let base = explore::evaluate_counts(&baseline, &data)?;
        let acc = explore::evaluate_counts(&net, &data)?;
        let relative = if base.correct == 0 {
            warn!("the float baseline classifies nothing correctly; relative accuracy is undefined");
            f64::NAN
        } else {
            acc.correct as f64 / base.correct as f64
        };
        let report = EvalReport {
            command: Command::Eval,
            provenance: Provenance {
                hash,
                config: loaded.cfg.clone(),
            },
            samples: data.len(),
            correct: acc.correct,
            baseline_correct: base.correct,
            absolute_accuracy: acc.value(),
            baseline_accuracy: base.value(),
            relative_accuracy_vs_floatbaseline: relative,
            resolution,
        };
        create_out(&loaded.out)?;
        let path = loaded.out.join(EVAL_REPORT);
        write_report_json(&path, &report)?;
        Ok(Outcome {
            summary: format!(
                "accuracy {:.4} ({} of {}), baseline {:.4}, relative {:.4}",
                report.absolute_accuracy,
                acc.correct,
                data.len(),
                report.baseline_accuracy,
                relative
            ),
            files: vec![path],
        })
    })()
    .phase(Runtime)
}

fn train_config(section: &TrainSection, maps: &QuantizerMaps, seed: u64) -> Result<TrainConfig> {
    if !maps.intrinsic.is_empty() || !maps.extrinsic.is_empty() {
        return Err(Error::Config(
            "training runs a float forward; intrinsic and extrinsic maps must be empty for `train`".into(),
        ));
    }
    let cfg = TrainConfig {
        learning_rate: section.learning_rate,
        epochs: section.epochs,
        batch_size: section.batch_size,
        l2_lambda: section.l2_lambda,
        gradient_quantizer: section.gradient_quantizer.as_deref().map(parse_quantizer).transpose()?,
        gradient_map: maps.gradient.clone(),
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> std::result::Result<Outcome, CliError> {
    use Phase::*;
    let mut loaded = load_common(Command::Train, config_path, overrides).phase(Validation)?;
    let (mut net, train_cfg, test) = (|| {
        let section = loaded
            .cfg
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("`train` needs a `train` section".into()))?;
        let train_cfg = train_config(section, &loaded.maps, loaded.cfg.seed)?;
        let base = config_path.parent().unwrap_or(Path::new(""));
        let test = match &loaded.cfg.resolved(base, overrides).test_dataset {
            Some(spec) => {
                let ds = spec.load()?;
                hash_dataset(&mut loaded.hasher, "test_dataset", &ds);
                Some(ds)
            }
            None => None,
        };
        let net = build_network_with(
            &loaded.spec,
            &loaded.maps.intrinsic,
            &loaded.maps.extrinsic,
            &loaded.weights,
            loaded.options,
        )?;
        Ok((net, train_cfg, test))
    })()
    .phase(Validation)?;
    let hash = loaded.hasher.finish();

    (|| {
        let (weights, log) = train::train(&mut net, &loaded.dataset, test.as_ref(), &train_cfg)?;
        // Report what a later `eval` of the saved f32 weights will see.
        let saved = weights.narrowed_to_f32();
        let final_test_accuracy = match &test {
            Some(ds) => {
                let empty = QuantizerMaps::default();
                let net = build_network_with(&loaded.spec, &empty.intrinsic, &empty.extrinsic, &saved, loaded.options)?;
                Some(explore::evaluate(&net, ds)?)
            }
            None => None,
        };
        create_out(&loaded.out)?;
        let weights_dir = loaded.out.join(WEIGHTS_DIR);
        weights.save(&weights_dir, Dtype::F32Le)?;
        log.write_csv(&loaded.out)?;
        let report = TrainReport {
            command: Command::Train,
            provenance: Provenance {
                hash,
                config: loaded.cfg.clone(),
            },
            steps: log.steps.len(),
            final_loss: log.steps.last().map(|s| s.loss),
            epochs: log.epochs.clone(),
            final_test_accuracy,
            weights: WEIGHTS_DIR.into(),
        };
        let path = loaded.out.join(TRAIN_REPORT);
        write_report_json(&path, &report)?;
        let summary = match final_test_accuracy {
            Some(a) => format!("trained {} steps, test accuracy {a:.4}", report.steps),
            None => format!("trained {} steps", report.steps),
        };
        Ok(Outcome {
            summary,
            files: vec![
                path,
                weights_dir,
                loaded.out.join(train::STEPS_CSV),
                loaded.out.join(train::EPOCHS_CSV),
            ],
        })
    })()
    .phase(Runtime)
}

/// Cells of an earlier run with the same provenance hash, if any.
fn resumable_cells(out: &Path, hash: &str, plan: &SweepPlan) -> BTreeMap<CellKey, f64> {
    let state_path = out.join(SWEEP_RESUME);
    let matches = fs::read_to_string(&state_path)
        .ok()
        .and_then(|t| serde_json::from_str::<ResumeState>(&t).ok())
        .is_some_and(|s| s.provenance_hash == hash);
    if !matches {
        return BTreeMap::new();
    }
    let cells = match explore::read_grid_csv(&out.join(explore::GRID_CSV)) {
        Ok(cells) => cells,
        Err(e) => {
            warn!("ignoring unreadable partial grid: {e}");
            return BTreeMap::new();
        }
    };
    let known: BTreeMap<CellKey, f64> = cells
        .into_iter()
        .filter_map(|c| {
            let subunit = plan.subunits.iter().position(|s| s.name == c.subunit)?;
            let key = CellKey {
                subunit,
                word_size: c.word_size,
                frac_bits: c.frac_bits,
            };
            Some((key, c.rel_accuracy))
        })
        .collect();
    info!("resuming sweep: {} cells already evaluated", known.len());
    known
}

pub fn cmd_sweep(config_path: &Path, overrides: &Overrides) -> std::result::Result<Outcome, CliError> {
    use Phase::*;
    let mut loaded = load_common(Command::Sweep, config_path, overrides).phase(Validation)?;
    let (plan, evaluator, indices) = (|| {
        let base = config_path.parent().unwrap_or(Path::new(""));
        let plan_path = loaded
            .cfg
            .resolved(base, overrides)
            .plan
            .ok_or_else(|| Error::Config("`sweep` needs a `plan` file".into()))?;
        let plan = SweepPlan::load(&plan_path)?;
        loaded.hasher.part("plan", &read_bytes(&plan_path)?);
        if !loaded.maps.intrinsic.is_empty() || !loaded.maps.extrinsic.is_empty() {
            warn!("forward quantizer maps are ignored by `sweep`; the plan decides what is quantized");
        }
        let indices = data::subset_indices(loaded.dataset.len(), plan.eval_subset_fraction, plan.subset_seed)?;
        let subset = loaded.dataset.select(&indices)?;
        let empty = QuantizerMaps::default();
        build_network_with(
            &loaded.spec,
            &empty.intrinsic,
            &empty.extrinsic,
            &loaded.weights,
            loaded.options,
        )?;
        let evaluator = NetworkEvaluator::new(loaded.spec.clone(), loaded.weights.clone(), subset, plan.granularity);
        for s in &plan.subunits {
            if evaluator.matching_layers(&s.pattern) == 0 {
                return Err(Error::Sweep(format!(
                    "subunit {:?}: pattern {:?} matches no layer",
                    s.name, s.pattern
                )));
            }
        }
        Ok((plan, evaluator, indices))
    })()
    .phase(Validation)?;
    let hash = loaded.hasher.finish();

    (|| {
        let out = &loaded.out;
        create_out(out)?;
        let known = resumable_cells(out, &hash, &plan);
        let grid_path = out.join(explore::GRID_CSV);
        if known.is_empty() {
            explore::write_grid_csv(&grid_path, &[])?;
        }
        write_report_json(
            &out.join(SWEEP_RESUME),
            &ResumeState {
                provenance_hash: hash.clone(),
            },
        )?;
        let file = OpenOptions::new()
            .append(true)
            .open(&grid_path)
            .map_err(|e| Error::io(&grid_path, e))?;
        let writer = Mutex::new(csv::Writer::from_writer(file));
        let append = |c: &CellResult| {
            let mut w = writer.lock().expect("grid writer lock");
            if let Err(e) = explore::append_cell(&mut w, c) {
                warn!(
                    "could not record cell {}/{}/{}: {e}",
                    c.subunit, c.word_size, c.frac_bits
                );
            }
        };
        let result = explore::run_sweep_with(
            &plan,
            &evaluator,
            SweepOptions {
                jobs: loaded.cfg.jobs.unwrap_or(1),
                known,
                on_cell: Some(&append),
            },
        )?;
        drop(writer);
        // Final rewrite in cell order so reruns produce identical bytes.
        explore::write_grid_csv(&grid_path, &result.grid)?;
        let summary = SweepSummary {
            command: Command::Sweep,
            provenance: Provenance {
                hash,
                config: loaded.cfg.clone(),
            },
            subset: SubsetRecord {
                fraction: plan.eval_subset_fraction,
                seed: plan.subset_seed,
                indices,
            },
            plan: plan.clone(),
            baseline: result.baseline,
            baseline_accuracy: result.baseline.value(),
            threshold: result.threshold,
            cells: result.grid.len(),
            bests: result.bests.clone(),
            bottleneck: result.bottleneck.clone(),
        };
        let summary_path = out.join(explore::SUMMARY_JSON);
        write_report_json(&summary_path, &summary)?;
        let b = &result.bottleneck;
        let text = match (b.word_size, b.frac_bits) {
            (Some(w), Some(f)) => format!("bottleneck {} at (W={w}, F={f})", b.subunit),
            _ => format!("bottleneck {} (no passing configuration)", b.subunit),
        };
        Ok(Outcome {
            summary: text,
            files: vec![grid_path, summary_path],
        })
    })()
    .phase(Runtime)
}
