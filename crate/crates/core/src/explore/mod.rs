//! Word-size sweeps over user-declared subunits and bottleneck search.
//!
//! Each subunit is quantized on its own while the rest of the network stays
//! in floating point. For every (W, F) cell the relative accuracy (quantized
//! over baseline, on the same fixed evaluation subset) is recorded. The best
//! configuration of a subunit is the passing cell with the smallest W, then the
//! smallest F. The bottleneck is the subunit whose best configuration has the
//! largest W, then the largest F.

mod evaluator;
mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{FixedPointFormat, RoundingMode};
use crate::layers::IntrinsicGranularity;
use crate::quantizer::{FixedPointQuantizer, SharedQuantizer};

pub use evaluator::{evaluate, evaluate_counts, Accuracy, Evaluator, NetworkEvaluator};
pub(crate) use io::append_cell;
pub use io::{read_grid_csv, write_grid_csv, GRID_CSV, SUMMARY_JSON};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subunit {
    pub name: String,
    pub pattern: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Intrinsic,
    Extrinsic,
}

/// Fractional-bit grid per word size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FracGrid {
    /// F in 0..W.
    #[default]
    All,
    /// F = W / 2 (rounded down).
    Half,
    /// F = round(W * fraction) for each fraction, clamped to W - 1.
    Fractions(Vec<f64>),
    /// Explicit F lists keyed by W.
    Explicit(BTreeMap<u32, Vec<u32>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub subunits: Vec<Subunit>,
    pub word_sizes: Vec<u32>,
    #[serde(default)]
    pub frac: FracGrid,
    pub slot: Slot,
    pub mode: RoundingMode,
    /// Seed of stochastic cells; each cell uses its own substream.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Required relative accuracy; `None` allows one misclassification on the subset.
    #[serde(default)]
    pub threshold: Option<f64>,
    pub eval_subset_fraction: f64,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default)]
    pub granularity: IntrinsicGranularity,
}

impl SweepPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: SweepPlan = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sweep plan: {m}")));
        if self.subunits.is_empty() {
            return bad("subunit list is empty".into());
        }
        let mut names = BTreeSet::new();
        for s in &self.subunits {
            if s.pattern.is_empty() {
                return bad(format!("subunit {:?} has an empty pattern", s.name));
            }
            if !names.insert(s.name.as_str()) {
                return bad(format!("duplicate subunit name {:?}", s.name));
            }
        }
        if self.word_sizes.is_empty() {
            return bad("word_sizes is empty".into());
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("threshold {t} is outside (0, 1]"));
            }
        }
        if !(self.eval_subset_fraction > 0.0 && self.eval_subset_fraction <= 1.0) {
            return bad(format!(
                "eval_subset_fraction {} is outside (0, 1]",
                self.eval_subset_fraction
            ));
        }
        match (self.mode, self.seed) {
            (RoundingMode::Stochastic, None) => return bad("stochastic mode needs a seed".into()),
            (m, Some(_)) if !m.is_stochastic() => return bad(format!("seed given for {m} mode")),
            _ => {}
        }
        if let FracGrid::Fractions(fr) = &self.frac {
            if let Some(f) = fr.iter().find(|f| !(0.0..=1.0).contains(*f)) {
                return bad(format!("fraction {f} is outside [0, 1]"));
            }
        }
        self.formats().map(|_| ())
    }

    /// All formats of the grid, ordered by W then F, without duplicates.
    pub fn formats(&self) -> Result<Vec<FixedPointFormat>> {
        let mut cells = BTreeSet::new();
        for &w in &self.word_sizes {
            let fracs: Vec<u32> = match &self.frac {
                FracGrid::All => (0..w).collect(),
                FracGrid::Half => vec![w / 2],
                FracGrid::Fractions(fr) => fr
                    .iter()
                    .map(|f| ((f64::from(w) * f).round() as u32).min(w.saturating_sub(1)))
                    .collect(),
                FracGrid::Explicit(map) => map
                    .get(&w)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("sweep plan: no fractional bits listed for W={w}")))?,
            };
            for f in fracs {
                cells.insert((w, f));
            }
        }
        cells.into_iter().map(|(w, f)| FixedPointFormat::new(w, f)).collect()
    }
}

/// One (subunit, W, F) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    /// Declaration index of the subunit.
    pub subunit: usize,
    pub word_size: u32,
    pub frac_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub subunit: String,
    #[serde(rename = "W")]
    pub word_size: u32,
    #[serde(rename = "F")]
    pub frac_bits: u32,
    pub rel_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubunitBest {
    pub subunit: String,
    /// `None` when no cell reaches the threshold.
    pub best: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Bottleneck {
    pub subunit: String,
    pub word_size: Option<u32>,
    pub frac_bits: Option<u32>,
    pub unsatisfiable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub baseline: Accuracy,
    pub threshold: f64,
    /// Cells ordered by subunit declaration, then W, then F.
    pub grid: Vec<CellResult>,
    pub bests: Vec<SubunitBest>,
    pub bottleneck: Bottleneck,
}

/// Default threshold: one misclassification below the baseline's correct count.
pub fn default_threshold(baseline_correct: usize) -> f64 {
    if baseline_correct <= 1 {
        // Nothing to lose; require any accuracy at all.
        return f64::MIN_POSITIVE;
    }
    (baseline_correct - 1) as f64 / baseline_correct as f64
}

/// Smallest (W, F) among cells whose relative accuracy reaches `threshold`.
/// The whole grid is scanned; passing is not assumed to be monotone.
pub fn select_best(cells: &[(u32, u32, f64)], threshold: f64) -> Option<(u32, u32)> {
    cells.iter().filter(|c| c.2 >= threshold).map(|&(w, f, _)| (w, f)).min()
}

/// The subunit with the largest best (W, F). Subunits without a passing
/// configuration take precedence and are flagged unsatisfiable. Remaining
/// ties go to the subunit declared first.
pub fn find_bottleneck(bests: &[SubunitBest]) -> Result<Bottleneck> {
    let flagged = |s: &SubunitBest| Bottleneck {
        subunit: s.subunit.clone(),
        word_size: s.best.map(|b| b.0),
        frac_bits: s.best.map(|b| b.1),
        unsatisfiable: s.best.is_none(),
    };
    if bests.is_empty() {
        return Err(Error::Sweep("no subunits to choose a bottleneck from".into()));
    }
    let unsat: Vec<&SubunitBest> = bests.iter().filter(|s| s.best.is_none()).collect();
    if let Some(first) = unsat.first() {
        if unsat.len() > 1 {
            warn!(
                "{} subunits have no passing configuration; reporting {:?}, the first declared",
                unsat.len(),
                first.subunit
            );
        }
        return Ok(flagged(first));
    }
    let top = bests.iter().filter_map(|s| s.best).max().expect("nonempty");
    let tied: Vec<&SubunitBest> = bests.iter().filter(|s| s.best == Some(top)).collect();
    if tied.len() > 1 {
        warn!(
            "subunits {:?} tie at (W={}, F={}); choosing {:?}, the first declared",
            tied.iter().map(|s| s.subunit.as_str()).collect::<Vec<_>>(),
            top.0,
            top.1,
            tied[0].subunit
        );
    }
    Ok(flagged(tied[0]))
}

/// Quantizer of one cell. Stochastic cells draw from a substream keyed by the cell.
pub fn cell_quantizer(plan: &SweepPlan, key: CellKey) -> Result<SharedQuantizer> {
    let fmt = FixedPointFormat::new(key.word_size, key.frac_bits)?;
    Ok(match plan.seed {
        Some(seed) if plan.mode.is_stochastic() => {
            let partition = ((key.subunit as u64) << 16) | (u64::from(key.word_size) << 8) | u64::from(key.frac_bits);
            Arc::new(FixedPointQuantizer::stochastic(fmt, seed).substream(partition))
        }
        _ => Arc::new(FixedPointQuantizer::new(fmt, plan.mode)?),
    })
}

/// Sweep options beyond the plan.
pub struct SweepOptions<'a> {
    /// Upper bound on concurrently evaluated cells.
    pub jobs: usize,
    /// Relative accuracies already known (from an interrupted run); not re-evaluated.
    pub known: BTreeMap<CellKey, f64>,
    /// Called once per newly evaluated cell, from worker threads.
    pub on_cell: Option<&'a (dyn Fn(&CellResult) + Sync)>,
}

impl Default for SweepOptions<'_> {
    fn default() -> Self {
        SweepOptions {
            jobs: 1,
            known: BTreeMap::new(),
            on_cell: None,
        }
    }
}

/// Run every cell of `plan` against `evaluator`.
pub fn run_sweep_with(plan: &SweepPlan, evaluator: &dyn Evaluator, options: SweepOptions<'_>) -> Result<SweepResult> {
    plan.validate()?;
    for s in &plan.subunits {
        if evaluator.matching_layers(&s.pattern) == 0 {
            return Err(Error::Sweep(format!(
                "subunit {:?}: pattern {:?} matches no layer",
                s.name, s.pattern
            )));
        }
    }
    let baseline = evaluator.baseline()?;
    if baseline.correct == 0 {
        return Err(Error::Sweep(
            "baseline classifies nothing correctly on the evaluation subset; relative accuracy is undefined".into(),
        ));
    }
    let threshold = plan.threshold.unwrap_or_else(|| default_threshold(baseline.correct));
    let formats = plan.formats()?;
    let keys: Vec<CellKey> = (0..plan.subunits.len())
        .flat_map(|s| {
            formats.iter().map(move |f| CellKey {
                subunit: s,
                word_size: f.word_size(),
                frac_bits: f.frac_bits(),
            })
        })
        .collect();
    let todo: Vec<CellKey> = keys
        .iter()
        .copied()
        .filter(|k| !options.known.contains_key(k))
        .collect();

    let eval_cell = |key: CellKey| -> Result<(CellKey, f64)> {
        let subunit = &plan.subunits[key.subunit];
        let q = cell_quantizer(plan, key)?;
        let acc = evaluator.evaluate_cell(subunit, plan.slot, q)?;
        let rel = acc.correct as f64 / baseline.correct as f64;
        if let Some(cb) = options.on_cell {
            cb(&CellResult {
                subunit: subunit.name.clone(),
                word_size: key.word_size,
                frac_bits: key.frac_bits,
                rel_accuracy: rel,
            });
        }
        Ok((key, rel))
    };
    let fresh: Vec<(CellKey, f64)> = if options.jobs <= 1 {
        todo.into_iter().map(eval_cell).collect::<Result<_>>()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| Error::Sweep(format!("cannot start worker threads: {e}")))?
            .install(|| todo.into_par_iter().map(eval_cell).collect::<Result<_>>())?
    };

    let mut all = options.known;
    all.retain(|k, _| keys.binary_search(k).is_ok());
    all.extend(fresh);
    let grid: Vec<CellResult> = all
        .iter()
        .map(|(k, &rel)| CellResult {
            subunit: plan.subunits[k.subunit].name.clone(),
            word_size: k.word_size,
            frac_bits: k.frac_bits,
            rel_accuracy: rel,
        })
        .collect();
    let bests: Vec<SubunitBest> = plan
        .subunits
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cells: Vec<(u32, u32, f64)> = all
                .iter()
                .filter(|(k, _)| k.subunit == i)
                .map(|(k, &r)| (k.word_size, k.frac_bits, r))
                .collect();
            SubunitBest {
                subunit: s.name.clone(),
                best: select_best(&cells, threshold),
            }
        })
        .collect();
    let bottleneck = find_bottleneck(&bests)?;
    Ok(SweepResult {
        baseline,
        threshold,
        grid,
        bests,
        bottleneck,
    })
}

/// Sweep a network on a seeded subset of `dataset`, one cell at a time.
pub fn run_sweep(
    plan: &SweepPlan,
    spec: &crate::graph::ModelSpec,
    weights: &crate::graph::WeightStore,
    dataset: &crate::data::LabeledDataset,
) -> Result<SweepResult> {
    let subset = crate::data::subset(dataset, plan.eval_subset_fraction, plan.subset_seed)?;
    let evaluator = NetworkEvaluator::new(spec.clone(), weights.clone(), subset, plan.granularity);
    run_sweep_with(plan, &evaluator, SweepOptions::default())
}
