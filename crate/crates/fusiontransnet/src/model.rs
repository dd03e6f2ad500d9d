//! Model assembly: configuration, the named parameter state, and the full
//! forward pass from raw window inputs to the balanced multimodal loss.
//!
//! Parameters live in a [`ModelState`] keyed by hierarchical name
//! (`taxi/intra/e_o`, `fusion/global/w_score`, ...). Each training step
//! wraps them as autodiff leaves, builds the graph for a batch of
//! examples, and reads the gradients back out by name. Ablation variants
//! rewire the forward pass; every parameter always exists, so a removed
//! module is recognizable by its zero gradients.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::decoder::{balanced_multimodal_loss, mode_loss, predict_od, LossConfig, ZeroMeanPolicy};
use crate::error::{FtnError, Result};
use crate::fusion::{
    build_candidate_sets, global_attention, local_fusion, mode_distinct_aggregate,
    multiple_perspective_interaction, CandidateSet, GlobalFusionParams, InteractionGates,
    InteractionShared, LocalFusionParams, LocalFusionOutput, UnitAttention,
};
use crate::graph::{adaptive_graph, build_unit_index, normalize_flows, ModeSeries, MultiModalUnitIndex};
use crate::intra::{
    embed_features, gcn_step_unsplit, od_gcn_step, split_od, temporal_attention, GcnChannelParams,
    TemporalParams,
};

/// Which module the variant removes, mirroring the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    /// Shared origin/destination treatment: unsplit features, one
    /// embedding dictionary, one convolution path.
    NoOdSplit,
    /// Global fusion removed.
    NoGlobal,
    /// Local fusion removed.
    NoLocal,
    /// Gated interaction replaced by plain concatenation of the views.
    NoMpi,
}

impl Ablation {
    /// Accepts both the long config names and the short CLI tags.
    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_od_split" | "od" => Ok(Ablation::NoOdSplit),
            "no_global" | "g" => Ok(Ablation::NoGlobal),
            "no_local" | "l" => Ok(Ablation::NoLocal),
            "no_mpi" | "m" => Ok(Ablation::NoMpi),
            other => Err(FtnError::Config(format!("unknown ablation tag '{other}'"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoOdSplit => "no_od_split",
            Ablation::NoGlobal => "no_global",
            Ablation::NoLocal => "no_local",
            Ablation::NoMpi => "no_mpi",
        }
    }

    /// Display name in the ablation table.
    pub fn label(&self) -> &'static str {
        match self {
            Ablation::Full => "FusionTransNet",
            Ablation::NoOdSplit => "FusionTransNet-OD",
            Ablation::NoGlobal => "FusionTransNet-G",
            Ablation::NoLocal => "FusionTransNet-L",
            Ablation::NoMpi => "FusionTransNet-M",
        }
    }
}

/// Scope of the global-fusion candidate set for a focal node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlobalCandidateScope {
    /// Candidates are the nodes of the other modes present at the focal
    /// node's own grid (the printed summation bounds).
    ModeRestricted,
    /// Candidates are all nodes of all other modes.
    AllNodes,
}

impl GlobalCandidateScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mode_restricted" => Ok(Self::ModeRestricted),
            "all_nodes" => Ok(Self::AllNodes),
            other => Err(FtnError::Config(format!(
                "unknown global_candidates value '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Window length L.
    pub window: usize,
    /// Latent feature width after the input projection; even.
    pub d_c: usize,
    /// Spatial embedding width; even.
    pub d_e: usize,
    pub leaky_slope: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Examples per optimizer step.
    pub batch_size: usize,
    /// Per-mode loss weight; a single value broadcasts to all modes.
    pub eta: Vec<f64>,
    pub ablation: Ablation,
    pub seed: u64,
    pub global_candidates: GlobalCandidateScope,
    /// Per-node cap on admissible global candidates (top by flow volume).
    pub max_candidates: Option<usize>,
    pub on_zero_mean: ZeroMeanPolicy,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 3,
            d_c: 8,
            d_e: 8,
            leaky_slope: 0.01,
            learning_rate: 5e-3,
            weight_decay: 1e-4,
            epochs: 12,
            batch_size: 8,
            eta: vec![1.0],
            ablation: Ablation::Full,
            seed: 0,
            global_candidates: GlobalCandidateScope::ModeRestricted,
            max_candidates: None,
            on_zero_mean: ZeroMeanPolicy::SkipWithWarning,
            train_frac: 0.7,
            val_frac: 0.2,
            test_frac: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(FtnError::Config("window must be >= 1".into()));
        }
        if self.d_c == 0 || self.d_c % 2 != 0 {
            return Err(FtnError::Config(format!("d_c must be even and positive, got {}", self.d_c)));
        }
        if self.d_e == 0 || self.d_e % 2 != 0 {
            return Err(FtnError::Config(format!("d_e must be even and positive, got {}", self.d_e)));
        }
        if self.batch_size == 0 {
            return Err(FtnError::Config("batch_size must be >= 1".into()));
        }
        if self.eta.iter().any(|e| *e <= 0.0) {
            return Err(FtnError::Config("eta weights must be positive".into()));
        }
        let total = self.train_frac + self.val_frac + self.test_frac;
        if (total - 1.0).abs() > 1e-9 {
            return Err(FtnError::Config(format!(
                "split fractions must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    /// Embedding width after temporal attention.
    pub fn d_p(&self) -> usize {
        self.window * self.d_e
    }

    /// Eta weight of mode `m` (single configured value broadcasts).
    pub fn eta_for(&self, m: usize, modes: usize) -> Result<f64> {
        if self.eta.len() == 1 {
            return Ok(self.eta[0]);
        }
        if self.eta.len() != modes {
            return Err(FtnError::Config(format!(
                "{} eta weights for {} modes",
                self.eta.len(),
                modes
            )));
        }
        Ok(self.eta[m])
    }
}

/// Every learnable parameter, addressable by hierarchical name.
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    params: BTreeMap<String, Array2<f64>>,
}

impl ModelState {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Static wiring derived from the dataset: mode sizes, the co-location
/// index, and the global-fusion candidate masks.
pub struct ModelArch {
    pub cfg: ModelConfig,
    pub mode_names: Vec<String>,
    pub node_counts: Vec<usize>,
    pub unit_index: MultiModalUnitIndex,
    pub candidates: Vec<CandidateSet>,
    pub loss_config: LossConfig,
}

impl ModelArch {
    /// Builds the architecture for a dataset. `volumes[m][node]` is the
    /// node's total flow over the training split, used only when
    /// `max_candidates` prunes the candidate set.
    pub fn new(cfg: ModelConfig, series: &[ModeSeries], volumes: Option<&[Vec<f64>]>) -> Result<ModelArch> {
        cfg.validate()?;
        if series.is_empty() {
            return Err(FtnError::Config("no modes in dataset".into()));
        }
        for s in series {
            if s.node_count() == 0 {
                return Err(FtnError::Config(format!("mode {} has zero nodes", s.mode.name)));
            }
        }
        let node_counts: Vec<usize> = series.iter().map(|s| s.node_count()).collect();
        let unit_index = build_unit_index(series);

        // admissibility of candidate mode n for node i of mode m
        let grids: Vec<&[crate::graph::GridId]> = series.iter().map(|s| s.nodes.as_slice()).collect();
        let scope = cfg.global_candidates;
        let index_ref = &unit_index;
        let mut candidates = build_candidate_sets(&node_counts, |m, i, n| match scope {
            GlobalCandidateScope::AllNodes => true,
            GlobalCandidateScope::ModeRestricted => {
                let grid = grids[m][i];
                n != m && index_ref.modes_at(grid).contains(&n)
            }
        });

        if let (Some(cap), Some(volumes)) = (cfg.max_candidates, volumes) {
            for cand in candidates.iter_mut() {
                prune_candidates(cand, cap, volumes);
            }
        }

        let eta: Vec<f64> = (0..series.len())
            .map(|m| cfg.eta_for(m, series.len()))
            .collect::<Result<_>>()?;
        let loss_config = LossConfig {
            eta,
            on_zero_mean: cfg.on_zero_mean,
        };
        Ok(ModelArch {
            mode_names: series.iter().map(|s| s.mode.name.clone()).collect(),
            node_counts,
            unit_index,
            candidates,
            loss_config,
            cfg,
        })
    }

    pub fn modes(&self) -> usize {
        self.node_counts.len()
    }
}

/// Keeps the `cap` admissible candidates with the highest flow volume per
/// focal node; ties break on the (mode, node) candidate order.
fn prune_candidates(cand: &mut CandidateSet, cap: usize, volumes: &[Vec<f64>]) {
    let rows = cand.mask.nrows();
    for i in 0..rows {
        let mut admissible: Vec<usize> = (0..cand.entries.len())
            .filter(|&j| cand.mask[(i, j)] != 0.0)
            .collect();
        if admissible.len() <= cap {
            continue;
        }
        admissible.sort_by(|&a, &b| {
            let (ma, na) = cand.entries[a];
            let (mb, nb) = cand.entries[b];
            volumes[mb][nb]
                .partial_cmp(&volumes[ma][na])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(cand.entries[a].cmp(&cand.entries[b]))
        });
        for &j in &admissible[cap..] {
            cand.mask[(i, j)] = 0.0;
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Initializes every parameter from the seed, in a fixed creation order.
pub fn init_state(arch: &ModelArch) -> ModelState {
    let cfg = &arch.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = ModelState::default();
    let (d_c, d_e, l) = (cfg.d_c, cfg.d_e, cfg.window);
    let d_p = cfg.d_p();
    let half = d_p / 2;
    let feature_width = 2;

    for (m, name) in arch.mode_names.iter().enumerate() {
        let n = arch.node_counts[m];
        state.insert(
            format!("{name}/intra/input_proj"),
            uniform(&mut rng, feature_width, d_c, feature_width),
        );
        state.insert(format!("{name}/intra/e_o"), uniform(&mut rng, n, d_e, d_e));
        if cfg.ablation != Ablation::NoOdSplit {
            state.insert(format!("{name}/intra/e_d"), uniform(&mut rng, n, d_e, d_e));
        }
        let (w_rows, w_cols) = if cfg.ablation == Ablation::NoOdSplit {
            (d_c, d_e / 2)
        } else {
            (d_c / 2, d_e / 2)
        };
        for channel in ["flow", "adaptive"] {
            state.insert(
                format!("{name}/intra/gcn/{channel}/w_o"),
                uniform(&mut rng, w_rows, w_cols, w_rows),
            );
            state.insert(
                format!("{name}/intra/gcn/{channel}/b_o"),
                uniform(&mut rng, n, 1, w_rows),
            );
            if cfg.ablation != Ablation::NoOdSplit {
                state.insert(
                    format!("{name}/intra/gcn/{channel}/w_d"),
                    uniform(&mut rng, w_rows, w_cols, w_rows),
                );
                state.insert(
                    format!("{name}/intra/gcn/{channel}/b_d"),
                    uniform(&mut rng, n, 1, w_rows),
                );
            }
        }
        state.insert(format!("{name}/intra/temporal/w0"), uniform(&mut rng, l, l, l));
        state.insert(format!("{name}/intra/temporal/w1"), uniform(&mut rng, n, 1, n));
        state.insert(format!("{name}/intra/temporal/w2"), uniform(&mut rng, d_e, n, d_e));
        state.insert(format!("{name}/intra/temporal/w3"), uniform(&mut rng, d_e, 1, d_e));
        state.insert(format!("{name}/intra/temporal/b"), uniform(&mut rng, l, 1, l));

        // the passthrough gate starts at full scale; the fused-view gates
        // start small and grow only where their branches pay off
        state.insert(format!("{name}/mpi/w_f1"), uniform(&mut rng, n, d_p, 1));
        state.insert(format!("{name}/mpi/w_f2"), uniform(&mut rng, n, d_p, d_p * d_p));
        state.insert(format!("{name}/mpi/w_f3"), uniform(&mut rng, n, d_p, d_p * d_p));
        state.insert(format!("{name}/decoder/w"), uniform(&mut rng, n, n, n));
    }

    state.insert("fusion/global/w_score", uniform(&mut rng, half, half, half));
    state.insert("fusion/global/a_o", uniform(&mut rng, d_p, 1, d_p));
    state.insert("fusion/global/a_d", uniform(&mut rng, d_p, 1, d_p));
    state.insert("fusion/global/w_diff_o", uniform(&mut rng, half, half, half));
    state.insert("fusion/global/w_diff_d", uniform(&mut rng, half, half, half));
    state.insert("fusion/local/w_o", uniform(&mut rng, half, half, half));
    state.insert("fusion/local/w_d", uniform(&mut rng, half, half, half));
    state.insert("fusion/local/a_o", uniform(&mut rng, d_p, 1, d_p));
    state.insert("fusion/local/a_d", uniform(&mut rng, d_p, 1, d_p));
    for w in ["w_p1", "w_p2", "w_p3", "w_p4"] {
        state.insert(format!("fusion/mpi/{w}"), uniform(&mut rng, d_p, d_p, d_p));
    }
    state
}

/// Per-step autodiff leaves for every parameter.
pub struct Leaves {
    map: BTreeMap<String, Tensor>,
}

impl Leaves {
    pub fn from_state(state: &ModelState, trainable: bool) -> Leaves {
        let map = state
            .iter()
            .map(|(name, value)| {
                let t = if trainable {
                    Tensor::param(value.clone())
                } else {
                    Tensor::constant(value.clone())
                };
                (name.clone(), t)
            })
            .collect();
        Leaves { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| FtnError::Contract(format!("no parameter named '{name}'")))
    }

    /// Gradients accumulated on the leaves, by name. Parameters that no
    /// path reached (disconnected modules) get zero matrices.
    pub fn gradients(&self) -> BTreeMap<String, Array2<f64>> {
        self.map
            .iter()
            .map(|(name, t)| {
                let g = t
                    .grad()
                    .unwrap_or_else(|| Array2::zeros((t.shape().0, t.shape().1)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Per-step model inputs shared by every window that touches a step:
/// row-normalized flow-graph adjacencies (from raw flows), inflow/outflow
/// features (column/row sums of the normalized flows), and normalized
/// flow matrices serving as targets. Indexed `[mode][step]`.
#[derive(Debug, Clone)]
pub struct DataCache {
    pub adjacency: Vec<Vec<Array2<f64>>>,
    pub features: Vec<Vec<Array2<f64>>>,
    pub targets: Vec<Vec<Array2<f64>>>,
}

impl DataCache {
    /// `raw` supplies the flow-graph adjacencies, `normalized` the
    /// features and targets; both must be aligned timelines of the same
    /// modes.
    pub fn build(raw: &[ModeSeries], normalized: &[ModeSeries]) -> Result<DataCache> {
        if raw.len() != normalized.len() {
            return Err(FtnError::Contract(format!(
                "{} raw modes vs {} normalized",
                raw.len(),
                normalized.len()
            )));
        }
        let mut adjacency = Vec::with_capacity(raw.len());
        let mut features = Vec::with_capacity(raw.len());
        let mut targets = Vec::with_capacity(raw.len());
        for (r, nrm) in raw.iter().zip(normalized) {
            let n = r.node_count();
            let mut adj_m = Vec::with_capacity(r.steps());
            let mut feat_m = Vec::with_capacity(r.steps());
            let mut target_m = Vec::with_capacity(r.steps());
            for (snap_raw, snap_norm) in r.snapshots.iter().zip(&nrm.snapshots) {
                adj_m.push(normalize_flows(&snap_raw.flow)?);
                let flow = &snap_norm.flow;
                let mut x = Array2::zeros((n, 2));
                for i in 0..n {
                    x[(i, 0)] = flow.column(i).sum().ln_1p(); // inflow
                    x[(i, 1)] = flow.row(i).sum().ln_1p(); // outflow
                }
                feat_m.push(x);
                target_m.push(flow.clone());
            }
            adjacency.push(adj_m);
            features.push(feat_m);
            targets.push(target_m);
        }
        Ok(DataCache {
            adjacency,
            features,
            targets,
        })
    }

    pub fn steps(&self) -> usize {
        self.adjacency.first().map(Vec::len).unwrap_or(0)
    }
}

/// The cache wrapped as constant graph leaves, built once per run so
/// forward passes share the leaf nodes instead of re-copying arrays.
/// Not `Send`; each worker thread builds its own from the shared
/// [`DataCache`].
pub struct TensorCache {
    pub adjacency: Vec<Vec<Tensor>>,
    pub features: Vec<Vec<Tensor>>,
    pub targets: Vec<Vec<Tensor>>,
}

impl TensorCache {
    pub fn new(cache: &DataCache) -> TensorCache {
        let wrap = |mats: &Vec<Vec<Array2<f64>>>| {
            mats.iter()
                .map(|per_step| per_step.iter().map(|a| Tensor::constant(a.clone())).collect())
                .collect()
        };
        TensorCache {
            adjacency: wrap(&cache.adjacency),
            features: wrap(&cache.features),
            targets: wrap(&cache.targets),
        }
    }

    pub fn steps(&self) -> usize {
        self.adjacency.first().map(Vec::len).unwrap_or(0)
    }
}

/// Attention matrices captured during a forward pass, for inspection.
pub struct AttentionDump {
    /// Per mode: temporal `L x L` weights.
    pub temporal: Vec<Array2<f64>>,
    /// Per mode: origin/destination global attention over the candidate
    /// entries listed in the architecture's `candidates`.
    pub global_origin: Vec<Array2<f64>>,
    pub global_dest: Vec<Array2<f64>>,
    /// Per multi-modal unit.
    pub local: Vec<(crate::graph::GridId, Vec<(usize, usize)>, Array2<f64>, Array2<f64>)>,
}

/// What to record during a forward pass beyond the loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    /// Attention matrices of the last example in the batch.
    pub attention: bool,
    /// Final embeddings `U_m` of every example.
    pub embeddings: bool,
}

pub struct ForwardOutput {
    /// Normalized-scale predicted OD matrices, `[example][mode]`.
    pub predictions: Vec<Vec<Array2<f64>>>,
    /// Balanced multimodal loss, averaged over the batch.
    pub loss: Tensor,
    pub attention: Option<AttentionDump>,
    /// Final embeddings `[example][mode]` when captured.
    pub embeddings: Vec<Vec<Array2<f64>>>,
}

struct IntraParams {
    input_proj: Tensor,
    e_o: Tensor,
    e_d: Option<Tensor>,
    channels: Vec<GcnChannelParams>,
    temporal: TemporalParams,
}

fn intra_params(leaves: &Leaves, name: &str, split: bool) -> Result<IntraParams> {
    let channels = ["flow", "adaptive"]
        .iter()
        .map(|ch| {
            let w_o = leaves.get(&format!("{name}/intra/gcn/{ch}/w_o"))?.clone();
            let b_o = leaves.get(&format!("{name}/intra/gcn/{ch}/b_o"))?.clone();
            let (w_d, b_d) = if split {
                (
                    leaves.get(&format!("{name}/intra/gcn/{ch}/w_d"))?.clone(),
                    leaves.get(&format!("{name}/intra/gcn/{ch}/b_d"))?.clone(),
                )
            } else {
                (w_o.clone(), b_o.clone())
            };
            Ok(GcnChannelParams {
                w_origin: w_o,
                b_origin: b_o,
                w_dest: w_d,
                b_dest: b_d,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntraParams {
        input_proj: leaves.get(&format!("{name}/intra/input_proj"))?.clone(),
        e_o: leaves.get(&format!("{name}/intra/e_o"))?.clone(),
        e_d: if split {
            Some(leaves.get(&format!("{name}/intra/e_d"))?.clone())
        } else {
            None
        },
        channels,
        temporal: TemporalParams {
            w0: leaves.get(&format!("{name}/intra/temporal/w0"))?.clone(),
            w1: leaves.get(&format!("{name}/intra/temporal/w1"))?.clone(),
            w2: leaves.get(&format!("{name}/intra/temporal/w2"))?.clone(),
            w3: leaves.get(&format!("{name}/intra/temporal/w3"))?.clone(),
            bias: leaves.get(&format!("{name}/intra/temporal/b"))?.clone(),
        },
    })
}

fn fusion_params(leaves: &Leaves) -> Result<(GlobalFusionParams, LocalFusionParams, InteractionShared)> {
    Ok((
        GlobalFusionParams {
            w_score: leaves.get("fusion/global/w_score")?.clone(),
            a_origin: leaves.get("fusion/global/a_o")?.clone(),
            a_dest: leaves.get("fusion/global/a_d")?.clone(),
            w_diff_origin: leaves.get("fusion/global/w_diff_o")?.clone(),
            w_diff_dest: leaves.get("fusion/global/w_diff_d")?.clone(),
        },
        LocalFusionParams {
            w_origin: leaves.get("fusion/local/w_o")?.clone(),
            w_dest: leaves.get("fusion/local/w_d")?.clone(),
            a_origin: leaves.get("fusion/local/a_o")?.clone(),
            a_dest: leaves.get("fusion/local/a_d")?.clone(),
        },
        InteractionShared {
            w_p1: leaves.get("fusion/mpi/w_p1")?.clone(),
            w_p2: leaves.get("fusion/mpi/w_p2")?.clone(),
            w_p3: leaves.get("fusion/mpi/w_p3")?.clone(),
            w_p4: leaves.get("fusion/mpi/w_p4")?.clone(),
        },
    ))
}

/// Runs the three phases for a batch of target steps and returns the
/// mean balanced loss. The adaptive graphs are built once per call and
/// shared by every example in the batch.
pub fn forward_batch(
    arch: &ModelArch,
    leaves: &Leaves,
    cache: &TensorCache,
    target_steps: &[usize],
    capture: Capture,
) -> Result<ForwardOutput> {
    if target_steps.is_empty() {
        return Err(FtnError::Contract("empty batch".into()));
    }
    let cfg = &arch.cfg;
    let split = cfg.ablation != Ablation::NoOdSplit;
    let modes = arch.modes();
    if cache.adjacency.len() != modes {
        return Err(FtnError::Contract(format!(
            "cache has {} modes, architecture has {modes}",
            cache.adjacency.len()
        )));
    }

    let mut intra = Vec::with_capacity(modes);
    let mut adaptive = Vec::with_capacity(modes);
    for name in &arch.mode_names {
        let p = intra_params(leaves, name, split)?;
        let a_s = match &p.e_d {
            Some(e_d) => adaptive_graph(&p.e_o, e_d)?,
            None => adaptive_graph(&p.e_o, &p.e_o)?,
        };
        adaptive.push(a_s);
        intra.push(p);
    }
    let (global_params, local_params, mpi_shared) = fusion_params(leaves)?;

    let mut batch_loss: Option<Tensor> = None;
    let mut predictions = Vec::with_capacity(target_steps.len());
    let mut embeddings = Vec::new();
    let mut attention = None;

    for &target_step in target_steps {
        if target_step < cfg.window || target_step >= cache.steps() {
            return Err(FtnError::Contract(format!(
                "target step {target_step} outside the usable range with window {}",
                cfg.window
            )));
        }
        let mut p_all = Vec::with_capacity(modes);
        let mut temporal_dump = Vec::new();
        for m in 0..modes {
            let params = &intra[m];
            let mut z_seq = Vec::with_capacity(cfg.window);
            for step in target_step - cfg.window..target_step {
                let a_t = cache.adjacency[m][step].clone();
                let x = &cache.features[m][step];
                let h = embed_features(x, &params.input_proj)?;
                let adjacencies = [a_t, adaptive[m].clone()];
                let z = if split {
                    let (h_o, h_d) = split_od(&h)?;
                    od_gcn_step(&h_o, &h_d, &adjacencies, &params.channels)?
                } else {
                    gcn_step_unsplit(&h, &adjacencies, &params.channels)?
                };
                z_seq.push(z);
            }
            let out = temporal_attention(&z_seq, &params.temporal)?;
            if capture.attention {
                temporal_dump.push(out.weights.value().clone());
            }
            p_all.push(out.embedding);
        }

        let mut p_origin = Vec::with_capacity(modes);
        let mut p_dest = Vec::with_capacity(modes);
        for p in &p_all {
            let (o, d) = split_od(p)?;
            p_origin.push(o);
            p_dest.push(d);
        }

        let use_global = cfg.ablation != Ablation::NoGlobal;
        let use_local = cfg.ablation != Ablation::NoLocal;

        let (c_all, global_att) = if use_global {
            let att = global_attention(
                &p_origin,
                &p_dest,
                &arch.candidates,
                &global_params,
                cfg.leaky_slope,
            )?;
            let c = mode_distinct_aggregate(&att, &p_origin, &p_dest, &arch.candidates, &global_params)?;
            (Some(c), Some(att))
        } else {
            (None, None)
        };

        let local_out: Option<LocalFusionOutput> = if use_local {
            Some(local_fusion(
                &arch.unit_index,
                &p_origin,
                &p_dest,
                &local_params,
                cfg.leaky_slope,
            )?)
        } else {
            None
        };

        let mut losses = Vec::with_capacity(modes);
        let mut targets = Vec::with_capacity(modes);
        let mut preds = Vec::with_capacity(modes);
        let mut example_embeddings = Vec::new();
        for m in 0..modes {
            let name = &arch.mode_names[m];
            let c_m = c_all.as_ref().map(|c| &c[m]);
            let s_m = local_out.as_ref().map(|l| &l.s[m]);
            let u = if cfg.ablation == Ablation::NoMpi {
                let mut parts = vec![p_all[m].clone()];
                if let Some(c) = c_m {
                    parts.push(c.clone());
                }
                if let Some(s) = s_m {
                    parts.push(s.clone());
                }
                Tensor::concat_many(&parts, 1)?
            } else {
                let gates = InteractionGates {
                    w_f1: leaves.get(&format!("{name}/mpi/w_f1"))?.clone(),
                    w_f2: leaves.get(&format!("{name}/mpi/w_f2"))?.clone(),
                    w_f3: leaves.get(&format!("{name}/mpi/w_f3"))?.clone(),
                };
                multiple_perspective_interaction(&p_all[m], c_m, s_m, &mpi_shared, &gates)?
            };
            if capture.embeddings {
                example_embeddings.push(u.value().clone());
            }
            let w_m = leaves.get(&format!("{name}/decoder/w"))?;
            let pred = predict_od(&u, w_m)?;
            let target = &cache.targets[m][target_step];
            losses.push(mode_loss(&pred, target)?);
            targets.push(target.value());
            preds.push(pred);
        }
        let loss = balanced_multimodal_loss(&losses, &targets, &arch.loss_config)?;
        batch_loss = Some(match batch_loss {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });

        predictions.push(preds.iter().map(|p| p.value().clone()).collect());
        if capture.embeddings {
            embeddings.push(example_embeddings);
        }
        if capture.attention {
            attention = Some(AttentionDump {
                temporal: temporal_dump,
                global_origin: global_att
                    .as_ref()
                    .map(|a| a.origin.iter().map(|t| t.value().clone()).collect())
                    .unwrap_or_default(),
                global_dest: global_att
                    .as_ref()
                    .map(|a| a.dest.iter().map(|t| t.value().clone()).collect())
                    .unwrap_or_default(),
                local: local_out
                    .as_ref()
                    .map(|l| {
                        l.units
                            .iter()
                            .map(|u: &UnitAttention| {
                                (
                                    u.grid,
                                    u.members.clone(),
                                    u.origin.value().clone(),
                                    u.dest.value().clone(),
                                )
                            })
                            .collect()
                    })
                    .unwrap_or_default(),
            });
        }
    }

    let loss = batch_loss
        .expect("non-empty batch")
        .scale(1.0 / target_steps.len() as f64);
    Ok(ForwardOutput {
        predictions,
        loss,
        attention,
        embeddings,
    })
}
