//! Training loop (AdamW), evaluation metrics, the historical-average
//! baseline, and embedding-space validation.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{max_min_normalize, temporal_split, Dataset, NormalizationState, SplitKind, TemporalSplit};
use crate::error::{FtnError, Result};
use crate::model::{
    forward_batch, init_state, Capture, DataCache, Leaves, ModelArch, ModelConfig, ModelState,
    TensorCache,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates per parameter, plus the step count
/// for bias correction.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    t: u64,
}

/// One AdamW update: bias-corrected Adam moments, then decoupled decay
/// `theta <- theta - lr * weight_decay * theta`.
pub fn adamw_step(
    state: &mut ModelState,
    opt: &mut AdamWState,
    grads: &BTreeMap<String, Array2<f64>>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    opt.t += 1;
    let t = opt.t;
    let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (name, theta) in state.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| FtnError::Training(format!("no gradient for parameter {name}")))?;
        if g.iter().any(|x| x.is_nan()) {
            return Err(FtnError::Training(format!("NaN gradient for parameter {name}")));
        }
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        let v = opt
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        azip_update(theta, m, v, g, lr, weight_decay, bias1, bias2);
    }
    Ok(())
}

fn azip_update(
    theta: &mut Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    g: &Array2<f64>,
    lr: f64,
    weight_decay: f64,
    bias1: f64,
    bias2: f64,
) {
    for ((t, (m, v)), g) in theta
        .iter_mut()
        .zip(m.iter_mut().zip(v.iter_mut()))
        .zip(g.iter())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *t -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        *t -= lr * weight_decay * *t;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mode: String,
    pub mae: f64,
    pub rmse: f64,
}

/// Evaluation metrics on denormalized values, plus run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: String,
    pub seed: u64,
    pub epochs: usize,
    pub wall_clock_seconds: f64,
    pub split: String,
    pub per_mode: Vec<ModeMetrics>,
    pub overall_mae: f64,
    pub overall_rmse: f64,
}

impl EvalReport {
    /// `mae <= rmse` per mode and overall (root mean square dominates the
    /// mean absolute value).
    pub fn check_metric_order(&self) -> Result<()> {
        for m in &self.per_mode {
            if m.mae > m.rmse + 1e-12 {
                return Err(FtnError::Contract(format!(
                    "MAE {} exceeds RMSE {} for mode {}",
                    m.mae, m.rmse, m.mode
                )));
            }
        }
        if self.overall_mae > self.overall_rmse + 1e-12 {
            return Err(FtnError::Contract("overall MAE exceeds RMSE".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
}

/// Everything derived from a dataset before training: the chronological
/// split, normalization fitted on the training slice, and the per-step
/// input cache.
pub struct Prepared {
    pub split: TemporalSplit,
    pub norm: NormalizationState,
    pub cache: DataCache,
    /// Node flow volumes over the training slice (candidate pruning).
    pub volumes: Vec<Vec<f64>>,
}

pub fn prepare(dataset: &Dataset, cfg: &ModelConfig) -> Result<Prepared> {
    dataset.validate()?;
    let split = temporal_split(
        dataset,
        cfg.window,
        (cfg.train_frac, cfg.val_frac, cfg.test_frac),
    )?;
    let norm = NormalizationState::fit(dataset, split.train_visible_steps());
    prepare_with_split(dataset, split, norm)
}

/// Preparation with externally supplied normalization (restoring a
/// checkpoint: the training-time statistics must be reused).
pub fn prepare_with_norm(
    dataset: &Dataset,
    cfg: &ModelConfig,
    norm: NormalizationState,
) -> Result<Prepared> {
    dataset.validate()?;
    let split = temporal_split(
        dataset,
        cfg.window,
        (cfg.train_frac, cfg.val_frac, cfg.test_frac),
    )?;
    prepare_with_split(dataset, split, norm)
}

fn prepare_with_split(
    dataset: &Dataset,
    split: TemporalSplit,
    norm: NormalizationState,
) -> Result<Prepared> {
    let (normalized, _) = max_min_normalize(dataset, Some(&norm))?;
    let cache = DataCache::build(&dataset.modes, &normalized.modes)?;
    let volumes = dataset.node_volumes(split.train_visible_steps());
    Ok(Prepared {
        split,
        norm,
        cache,
        volumes,
    })
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    pub report: EvalReport,
}

/// Accumulates absolute and squared errors on the denormalized scale.
#[derive(Default, Clone)]
struct ErrorAccumulator {
    abs: f64,
    sq: f64,
    count: f64,
}

impl ErrorAccumulator {
    fn push(&mut self, err: f64) {
        self.abs += err.abs();
        self.sq += err * err;
        self.count += 1.0;
    }

    fn mae(&self) -> f64 {
        self.abs / self.count
    }

    fn rmse(&self) -> f64 {
        (self.sq / self.count).sqrt()
    }
}

fn metrics_from_predictions(
    arch: &ModelArch,
    norm: &NormalizationState,
    cache: &DataCache,
    targets: &[usize],
    mut predict: impl FnMut(usize) -> Result<Vec<Array2<f64>>>,
) -> Result<(Vec<ModeMetrics>, f64, f64)> {
    let modes = arch.modes();
    let mut per_mode = vec![ErrorAccumulator::default(); modes];
    let mut overall = ErrorAccumulator::default();
    for &t in targets {
        let preds = predict(t)?;
        for m in 0..modes {
            let truth = &cache.targets[m][t];
            for (p, g) in preds[m].iter().zip(truth.iter()) {
                let err = norm.denormalize_value(m, *p) - norm.denormalize_value(m, *g);
                per_mode[m].push(err);
                overall.push(err);
            }
        }
    }
    let per_mode = per_mode
        .iter()
        .enumerate()
        .map(|(m, acc)| ModeMetrics {
            mode: arch.mode_names[m].clone(),
            mae: acc.mae(),
            rmse: acc.rmse(),
        })
        .collect();
    Ok((per_mode, overall.mae(), overall.rmse()))
}

/// Evaluates a trained state on one split; metrics are computed on
/// denormalized values.
pub fn evaluate(
    arch: &ModelArch,
    state: &ModelState,
    prepared: &Prepared,
    split: SplitKind,
) -> Result<EvalReport> {
    let targets: Vec<usize> = prepared.split.targets(split).collect();
    if targets.is_empty() {
        return Err(FtnError::Data(format!("empty split {split:?}")));
    }
    let leaves = Leaves::from_state(state, false);
    let started = Instant::now();
    let tensors = TensorCache::new(&prepared.cache);
    let mut preds_by_step: BTreeMap<usize, Vec<Array2<f64>>> = BTreeMap::new();
    for chunk in targets.chunks(32) {
        let out = forward_batch(arch, &leaves, &tensors, chunk, Capture::default())?;
        for (t, preds) in chunk.iter().zip(out.predictions) {
            preds_by_step.insert(*t, preds);
        }
    }
    let (per_mode, overall_mae, overall_rmse) = metrics_from_predictions(
        arch,
        &prepared.norm,
        &prepared.cache,
        &targets,
        |t| Ok(preds_by_step[&t].clone()),
    )?;
    let report = EvalReport {
        ablation: arch.cfg.ablation.tag().into(),
        seed: arch.cfg.seed,
        epochs: arch.cfg.epochs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        split: format!("{split:?}").to_lowercase(),
        per_mode,
        overall_mae,
        overall_rmse,
    };
    report.check_metric_order()?;
    Ok(report)
}

/// Runs the full training protocol and returns the best-validation state
/// (final state when the validation split is empty) plus per-epoch
/// history and the test report.
pub fn train(dataset: &Dataset, cfg: &ModelConfig) -> Result<TrainOutcome> {
    let prepared = prepare(dataset, cfg)?;
    train_prepared(dataset, cfg, &prepared)
}

/// Training against an already prepared dataset (shared by the ablation
/// driver so the cache is built once).
pub fn train_prepared(
    dataset: &Dataset,
    cfg: &ModelConfig,
    prepared: &Prepared,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let arch = ModelArch::new(cfg.clone(), &dataset.modes, Some(&prepared.volumes))?;
    let mut state = init_state(&arch);
    let mut opt = AdamWState::default();
    let tensors = TensorCache::new(&prepared.cache);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let train_targets: Vec<usize> = prepared.split.targets(SplitKind::Train).collect();
    if train_targets.is_empty() {
        return Err(FtnError::Data("empty training split".into()));
    }
    let has_val = prepared.split.val.len() > 0;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelState)> = None;
    for epoch in 0..cfg.epochs {
        let mut order = train_targets.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let leaves = Leaves::from_state(&state, true);
            let out = forward_batch(&arch, &leaves, &tensors, chunk, Capture::default())?;
            let loss = out.loss.scalar_value()?;
            if !loss.is_finite() {
                return Err(FtnError::Training(format!(
                    "loss diverged at epoch {epoch}, step {}",
                    opt.t
                )));
            }
            out.loss.backward()?;
            let grads = leaves.gradients();
            adamw_step(&mut state, &mut opt, &grads, cfg.learning_rate, cfg.weight_decay)?;
            epoch_loss += loss;
            batches += 1.0;
        }
        let train_loss = epoch_loss / batches;

        let (val_mae, val_rmse) = if has_val {
            let report = evaluate(&arch, &state, prepared, SplitKind::Val)?;
            if best
                .as_ref()
                .map(|(mae, _)| report.overall_mae < *mae)
                .unwrap_or(true)
            {
                best = Some((report.overall_mae, state.clone()));
            }
            (Some(report.overall_mae), Some(report.overall_rmse))
        } else {
            (None, None)
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
            val_rmse,
        });
    }

    let final_state = match best {
        Some((_, s)) => s,
        None => state,
    };
    let mut report = evaluate(&arch, &final_state, prepared, SplitKind::Test)?;
    report.epochs = cfg.epochs;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        state: final_state,
        history,
        report,
    })
}

/// Historical average baseline: each OD cell is predicted by its mean
/// over the training-split targets, evaluated like any model on the
/// denormalized scale.
pub fn ha_baseline(dataset: &Dataset, cfg: &ModelConfig) -> Result<EvalReport> {
    let prepared = prepare(dataset, cfg)?;
    let arch = ModelArch::new(cfg.clone(), &dataset.modes, Some(&prepared.volumes))?;
    let started = Instant::now();

    let train_targets: Vec<usize> = prepared.split.targets(SplitKind::Train).collect();
    if train_targets.is_empty() {
        return Err(FtnError::Data("empty training split".into()));
    }
    // per-mode mean of normalized targets over the training split
    let means: Vec<Array2<f64>> = (0..arch.modes())
        .map(|m| {
            let mut acc = Array2::<f64>::zeros(prepared.cache.targets[m][0].dim());
            for &t in &train_targets {
                acc += &prepared.cache.targets[m][t];
            }
            acc / train_targets.len() as f64
        })
        .collect();

    let test_targets: Vec<usize> = prepared.split.targets(SplitKind::Test).collect();
    if test_targets.is_empty() {
        return Err(FtnError::Data("empty test split".into()));
    }
    let (per_mode, overall_mae, overall_rmse) = metrics_from_predictions(
        &arch,
        &prepared.norm,
        &prepared.cache,
        &test_targets,
        |_| Ok(means.clone()),
    )?;
    let report = EvalReport {
        ablation: "ha".into(),
        seed: cfg.seed,
        epochs: 0,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        split: "test".into(),
        per_mode,
        overall_mae,
        overall_rmse,
    };
    report.check_metric_order()?;
    Ok(report)
}

/// Both correlation measures exactly as printed: the "POC" form runs over
/// first differences, the "FOC" form is the Pearson correlation of the
/// raw sequences. Pairs with zero variance contribute zero.
pub fn as_printed_poc(a: &[f64], b: &[f64]) -> f64 {
    let diffs = |s: &[f64]| -> Vec<f64> { s.windows(2).map(|w| w[1] - w[0]).collect() };
    let da = diffs(a);
    let db = diffs(b);
    let num: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
    let den = (da.iter().map(|x| x * x).sum::<f64>()).sqrt()
        * (db.iter().map(|y| y * y).sum::<f64>()).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn as_printed_foc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let den = (a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>()).sqrt()
        * (b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>()).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub k: usize,
    pub mean_poc: f64,
    pub mean_foc: f64,
}

/// Validates the learned embedding space: for every node (of `mode`, or
/// of all modes), the k nearest same-mode neighbors by Euclidean distance
/// in mean final-embedding space are scored by the two correlation
/// measures between inflow series, and the means are reported per k.
///
/// Embeddings are averaged over the given evaluation targets, and the
/// inflow series (raw column sums) cover the same evaluation span, so
/// the neighborhoods are judged against the traffic they describe.
pub fn poc_foc_validation(
    arch: &ModelArch,
    state: &ModelState,
    prepared: &Prepared,
    dataset: &Dataset,
    eval_targets: Range<usize>,
    k_list: &[usize],
    mode: Option<usize>,
) -> Result<Vec<CorrelationRow>> {
    let targets: Vec<usize> = eval_targets.collect();
    poc_foc_validation_at(arch, state, prepared, dataset, &targets, k_list, mode)
}

/// Variant taking an explicit list of evaluation targets.
pub fn poc_foc_validation_at(
    arch: &ModelArch,
    state: &ModelState,
    prepared: &Prepared,
    dataset: &Dataset,
    eval_targets: &[usize],
    k_list: &[usize],
    mode: Option<usize>,
) -> Result<Vec<CorrelationRow>> {
    let modes: Vec<usize> = match mode {
        Some(m) => vec![m],
        None => (0..arch.modes()).collect(),
    };
    for &m in &modes {
        let n = arch.node_counts[m];
        for &k in k_list {
            if k == 0 || k >= n {
                return Err(FtnError::Config(format!(
                    "k = {k} outside 1..{n} for mode {}",
                    arch.mode_names[m]
                )));
            }
        }
    }
    let targets: Vec<usize> = eval_targets.to_vec();
    if targets.is_empty() {
        return Err(FtnError::Data("no evaluation targets for embeddings".into()));
    }

    // mean final embedding per node
    let leaves = Leaves::from_state(state, false);
    let tensors = TensorCache::new(&prepared.cache);
    let mut mean_u: Vec<Array2<f64>> = Vec::new();
    for chunk in targets.chunks(32) {
        let out = forward_batch(
            arch,
            &leaves,
            &tensors,
            chunk,
            Capture {
                attention: false,
                embeddings: true,
            },
        )?;
        for per_mode in out.embeddings {
            if mean_u.is_empty() {
                mean_u = per_mode;
            } else {
                for (acc, u) in mean_u.iter_mut().zip(per_mode) {
                    *acc += &u;
                }
            }
        }
    }
    for u in mean_u.iter_mut() {
        *u /= targets.len() as f64;
    }
    // standardize per feature across nodes so the neighborhood geometry
    // does not depend on the relative scale of the embedding branches
    for u in mean_u.iter_mut() {
        let n = u.nrows() as f64;
        for mut col in u.columns_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 {
                col.mapv_inplace(|x| (x - mean) / std);
            }
        }
    }

    // raw inflow series over the evaluation span
    let inflow: Vec<Vec<Vec<f64>>> = dataset
        .modes
        .iter()
        .map(|series| {
            (0..series.node_count())
                .map(|node| {
                    targets
                        .iter()
                        .map(|&t| series.snapshots[t].flow.column(node).sum())
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mut poc_acc = 0.0;
        let mut foc_acc = 0.0;
        let mut count = 0.0;
        for &m in &modes {
            let u = &mean_u[m];
            let n = u.nrows();
            for i in 0..n {
                let mut dist: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d: f64 = (0..u.ncols())
                            .map(|f| (u[(i, f)] - u[(j, f)]).powi(2))
                            .sum();
                        (d, j)
                    })
                    .collect();
                dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                for &(_, j) in dist.iter().take(k) {
                    poc_acc += as_printed_poc(&inflow[m][i], &inflow[m][j]);
                    foc_acc += as_printed_foc(&inflow[m][i], &inflow[m][j]);
                    count += 1.0;
                }
            }
        }
        rows.push(CorrelationRow {
            k,
            mean_poc: poc_acc / count,
            mean_foc: foc_acc / count,
        });
    }
    Ok(rows)
}
