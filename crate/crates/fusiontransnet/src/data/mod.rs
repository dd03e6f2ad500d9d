//! Dataset model, max-min normalization, and chronological splitting.
//!
//! A [`Dataset`] is a set of aligned per-mode timelines. Examples are
//! defined by their target step: step `t` is a usable target when `t` has
//! a full window of preceding steps. The chronological split partitions
//! the target steps; normalization statistics are fitted on the training
//! slice of the timeline only.

mod io;
mod synthetic;

pub use io::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, ModeSpec, SyntheticConfig};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{FtnError, Result};
use crate::graph::ModeSeries;

/// Aligned per-mode timelines over a common step range and grid universe.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub modes: Vec<ModeSeries>,
}

impl Dataset {
    pub fn steps(&self) -> usize {
        self.modes.first().map(|m| m.steps()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(FtnError::Data("dataset has no modes".into()));
        }
        let steps = self.steps();
        for m in &self.modes {
            if m.steps() != steps {
                return Err(FtnError::Data(format!(
                    "mode {} has {} steps, expected {steps}",
                    m.mode.name,
                    m.steps()
                )));
            }
            for snap in &m.snapshots {
                let n = m.node_count();
                if snap.flow.dim() != (n, n) {
                    return Err(FtnError::Data(format!(
                        "mode {} step {}: flow shape {:?} for {n} nodes",
                        m.mode.name,
                        snap.time_index,
                        snap.flow.dim()
                    )));
                }
                if snap.features.nrows() != n {
                    return Err(FtnError::Data(format!(
                        "mode {} step {}: {} feature rows for {n} nodes",
                        m.mode.name,
                        snap.time_index,
                        snap.features.nrows()
                    )));
                }
                if snap.flow.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(FtnError::Data(format!(
                        "mode {} step {}: negative or non-finite flow",
                        m.mode.name, snap.time_index
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keeps only the given modes (re-indexed contiguously).
    pub fn filter_modes(&self, keep: &[usize]) -> Result<Dataset> {
        let mut modes = Vec::with_capacity(keep.len());
        for (new_index, &m) in keep.iter().enumerate() {
            let mut series = self
                .modes
                .get(m)
                .ok_or_else(|| FtnError::Data(format!("no mode with index {m}")))?
                .clone();
            series.mode.index = new_index;
            modes.push(series);
        }
        Ok(Dataset { modes })
    }

    /// Each node's total flow (row plus column sums) over a step range,
    /// used for deterministic candidate pruning.
    pub fn node_volumes(&self, steps: Range<usize>) -> Vec<Vec<f64>> {
        self.modes
            .iter()
            .map(|m| {
                let n = m.node_count();
                let mut vol = vec![0.0; n];
                for snap in &m.snapshots[steps.clone()] {
                    for i in 0..n {
                        vol[i] += snap.flow.row(i).sum() + snap.flow.column(i).sum();
                    }
                }
                vol
            })
            .collect()
    }
}

/// Per-mode extrema of training-split OD entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub per_mode: Vec<MinMax>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl NormalizationState {
    /// Fits per-mode extrema on the OD entries of `steps`.
    pub fn fit(dataset: &Dataset, steps: Range<usize>) -> NormalizationState {
        let per_mode = dataset
            .modes
            .iter()
            .map(|m| {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for snap in &m.snapshots[steps.clone()] {
                    for v in snap.flow.iter() {
                        min = min.min(*v);
                        max = max.max(*v);
                    }
                }
                if !min.is_finite() {
                    min = 0.0;
                    max = 0.0;
                }
                MinMax { min, max }
            })
            .collect();
        NormalizationState { per_mode }
    }

    pub fn normalize_value(&self, mode: usize, x: f64) -> f64 {
        let MinMax { min, max } = self.per_mode[mode];
        if max > min {
            (x - min) / (max - min)
        } else {
            0.0
        }
    }

    pub fn denormalize_value(&self, mode: usize, x: f64) -> f64 {
        let MinMax { min, max } = self.per_mode[mode];
        x * (max - min) + min
    }
}

/// Max-min normalization of every OD entry to the unit interval. With no
/// state given, extrema are fitted on the input itself. Inflow/outflow
/// feature columns are recomputed from the normalized flows (scaled
/// row/column sums); any extra feature columns pass through unchanged.
pub fn max_min_normalize(
    dataset: &Dataset,
    state: Option<&NormalizationState>,
) -> Result<(Dataset, NormalizationState)> {
    dataset.validate()?;
    let state = match state {
        Some(s) => {
            if s.per_mode.len() != dataset.modes.len() {
                return Err(FtnError::Contract(format!(
                    "normalization state has {} modes, dataset {}",
                    s.per_mode.len(),
                    dataset.modes.len()
                )));
            }
            s.clone()
        }
        None => NormalizationState::fit(dataset, 0..dataset.steps()),
    };
    let mut out = dataset.clone();
    for (mode_idx, series) in out.modes.iter_mut().enumerate() {
        let n = series.node_count();
        for snap in series.snapshots.iter_mut() {
            snap.flow.mapv_inplace(|x| state.normalize_value(mode_idx, x));
            for i in 0..n {
                snap.features[(i, 0)] = snap.flow.column(i).sum();
                snap.features[(i, 1)] = snap.flow.row(i).sum();
            }
        }
    }
    Ok((out, state))
}

/// Chronological partition of the usable target steps. A target step
/// needs `window` preceding steps, so the first one is `window` itself;
/// each example (window plus target) belongs to exactly one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub window: usize,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl TemporalSplit {
    /// The timeline steps visible during training: everything up to and
    /// including the last training target. Normalization is fitted here.
    pub fn train_visible_steps(&self) -> Range<usize> {
        0..self.train.end
    }

    pub fn targets(&self, split: SplitKind) -> Range<usize> {
        match split {
            SplitKind::Train => self.train.clone(),
            SplitKind::Val => self.val.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn parse(s: &str) -> Result<SplitKind> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" | "validation" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(FtnError::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Splits the usable target steps chronologically by the given fractions
/// (train, val, test). A split with a positive fraction must receive at
/// least one target.
pub fn temporal_split(
    dataset: &Dataset,
    window: usize,
    fractions: (f64, f64, f64),
) -> Result<TemporalSplit> {
    let (ftr, fva, fte) = fractions;
    if (ftr + fva + fte - 1.0).abs() > 1e-9 || ftr < 0.0 || fva < 0.0 || fte < 0.0 {
        return Err(FtnError::Config(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let steps = dataset.steps();
    if steps <= window {
        return Err(FtnError::Data(format!(
            "{steps} steps leave no target with a window of {window}"
        )));
    }
    let targets = steps - window;
    let n_test = (fte * targets as f64).round() as usize;
    let n_val = (fva * targets as f64).round() as usize;
    if n_test + n_val > targets {
        return Err(FtnError::Data(format!(
            "{targets} targets is too few for the requested split"
        )));
    }
    let n_train = targets - n_val - n_test;
    for (frac, count, name) in [
        (ftr, n_train, "train"),
        (fva, n_val, "val"),
        (fte, n_test, "test"),
    ] {
        if frac > 0.0 && count == 0 {
            return Err(FtnError::Data(format!(
                "too few steps for one full window in the {name} split"
            )));
        }
    }
    let train = window..window + n_train;
    let val = train.end..train.end + n_val;
    let test = val.end..val.end + n_test;
    Ok(TemporalSplit {
        window,
        train,
        val,
        test,
    })
}
