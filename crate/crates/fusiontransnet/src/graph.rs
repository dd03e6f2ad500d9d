//! Per-mode spatiotemporal OD graphs and the two adjacency constructions.
//!
//! A mode's nodes are the spatial grids it serves, numbered by
//! lexicographic `(p, q)` order. Edges are never materialized: a positive
//! entry of the OD flow matrix *is* the edge. Two adjacency matrices drive
//! the graph convolutions — the row-normalized flow graph of each time
//! step, and a learned adaptive graph built from origin/destination node
//! embedding dictionaries.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{FtnError, Result};

/// A transportation mode (taxi, bus, bike, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeId {
    pub name: String,
    pub index: usize,
}

/// A spatial grid cell, 0-based. Ordering is lexicographic `(p, q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridId {
    pub p: u32,
    pub q: u32,
}

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.p, self.q)
    }
}

/// One mode's state at a single time step: the OD flow matrix plus node
/// features (inflow, outflow, optional POI columns).
#[derive(Debug, Clone)]
pub struct ODGraphSnapshot {
    pub time_index: usize,
    /// `N x N`, nonnegative.
    pub flow: Array2<f64>,
    /// `N x k`, first two columns are inflow and outflow.
    pub features: Array2<f64>,
}

/// A full per-mode timeline with its node-to-grid mapping.
#[derive(Debug, Clone)]
pub struct ModeSeries {
    pub mode: ModeId,
    /// Node index -> grid, strictly lexicographically increasing.
    pub nodes: Vec<GridId>,
    pub snapshots: Vec<ODGraphSnapshot>,
}

impl ModeSeries {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn steps(&self) -> usize {
        self.snapshots.len()
    }
}

/// A training window: `window_len` consecutive snapshots of one mode and
/// the OD matrix of the following step as the target.
#[derive(Debug, Clone, Copy)]
pub struct ODGraphSequence<'a> {
    pub mode: &'a ModeId,
    pub nodes: &'a [GridId],
    pub snapshots: &'a [ODGraphSnapshot],
    pub target: &'a Array2<f64>,
    pub target_step: usize,
}

impl ModeSeries {
    /// The window of length `window_len` whose target is `target_step`.
    pub fn sequence(&self, target_step: usize, window_len: usize) -> Result<ODGraphSequence<'_>> {
        if target_step < window_len || target_step >= self.snapshots.len() {
            return Err(FtnError::Data(format!(
                "target step {target_step} needs {window_len} preceding steps within 0..{}",
                self.snapshots.len()
            )));
        }
        Ok(ODGraphSequence {
            mode: &self.mode,
            nodes: &self.nodes,
            snapshots: &self.snapshots[target_step - window_len..target_step],
            target: &self.snapshots[target_step].flow,
            target_step,
        })
    }
}

/// Row-normalizes an OD flow matrix: each row with positive sum is divided
/// by its sum; all-zero rows stay all-zero, keeping the result
/// row-substochastic rather than inventing flow.
pub fn normalize_flows(flow: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(((i, j), v)) = flow.indexed_iter().find(|(_, v)| **v < 0.0) {
        return Err(FtnError::Domain(format!(
            "negative flow {v} at ({i},{j})"
        )));
    }
    let mut out = flow.clone();
    for mut row in out.rows_mut() {
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|x| x / sum);
        }
    }
    Ok(out)
}

/// The learned adaptive OD graph `softmax_rows(relu(E_o . E_d^T))`.
///
/// Differentiable with respect to both embedding dictionaries; every row
/// sums to one.
pub fn adaptive_graph(e_o: &Tensor, e_d: &Tensor) -> Result<Tensor> {
    if e_o.shape().1 != e_d.shape().1 {
        return Err(FtnError::Dimension {
            op: "adaptive_graph",
            lhs: vec![e_o.shape().0, e_o.shape().1],
            rhs: vec![e_d.shape().0, e_d.shape().1],
        });
    }
    e_o.matmul(&e_d.transpose())?.relu().softmax_rows()
}

/// Co-location index over all spatial grids: which `(mode, node)` pairs
/// share each grid. Grids hosting two or more distinct modes are the
/// multi-modal units.
#[derive(Debug, Clone, Default)]
pub struct MultiModalUnitIndex {
    grids: BTreeMap<GridId, Vec<(usize, usize)>>,
}

impl MultiModalUnitIndex {
    /// `(mode index, node index)` pairs at `grid`.
    pub fn members(&self, grid: GridId) -> &[(usize, usize)] {
        self.grids.get(&grid).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Mode indices present at `grid`, ascending.
    pub fn modes_at(&self, grid: GridId) -> Vec<usize> {
        let mut modes: Vec<usize> = self.members(grid).iter().map(|(m, _)| *m).collect();
        modes.dedup();
        modes
    }

    /// Grids served by at least two distinct modes, in grid order.
    pub fn multi_modal_units(&self) -> impl Iterator<Item = (GridId, &[(usize, usize)])> {
        self.grids
            .iter()
            .filter(|(_, members)| {
                let mut modes: Vec<usize> = members.iter().map(|(m, _)| *m).collect();
                modes.dedup();
                modes.len() >= 2
            })
            .map(|(g, members)| (*g, members.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// Builds the co-location index. Deterministic: members are listed in mode
/// order (node order is unique per mode since one node serves one grid).
pub fn build_unit_index(modes: &[ModeSeries]) -> MultiModalUnitIndex {
    let mut grids: BTreeMap<GridId, Vec<(usize, usize)>> = BTreeMap::new();
    for series in modes {
        for (node, grid) in series.nodes.iter().enumerate() {
            grids.entry(*grid).or_default().push((series.mode.index, node));
        }
    }
    for members in grids.values_mut() {
        members.sort();
    }
    MultiModalUnitIndex { grids }
}
