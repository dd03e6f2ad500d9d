//! Phase 2: cross-modal fusion.
//!
//! Three cooperating mechanisms refine the per-mode embeddings from the
//! intra-modal encoder:
//!
//! * **Global fusion** scores every node of a focal mode against candidate
//!   nodes of the other modes city-wide (graph-attention style: a learnable
//!   scoring vector applied to the concatenated projections, LeakyReLU,
//!   softmax over the candidate set).
//! * The attention weights feed an aggregation of *absolute differences*
//!   of projected embeddings, so identical behavior across modes
//!   contributes exactly nothing — the guard against negative transfer.
//! * **Local fusion** repeats the scheme among the modes co-located at one
//!   multi-modal spatial unit, crossing origin embeddings of the focal
//!   mode with destination embeddings of the others (and vice versa).
//!
//! A gated multiple-perspective interaction then combines the intra-modal,
//! globally fused, and locally fused views into the final embedding.

use ndarray::Array2;

use crate::autodiff::Tensor;
use crate::error::{FtnError, Result};
use crate::graph::MultiModalUnitIndex;

/// Parameters of the global-fusion attention and its difference
/// aggregation.
#[derive(Clone)]
pub struct GlobalFusionParams {
    /// Shared scoring projection, `(d_p/2) x w`.
    pub w_score: Tensor,
    /// Scoring vector over concatenated projections, `2w x 1`, origin side.
    pub a_origin: Tensor,
    /// Scoring vector, destination side.
    pub a_dest: Tensor,
    /// Difference projection for origin embeddings, `(d_p/2) x w_f`.
    pub w_diff_origin: Tensor,
    /// Difference projection for destination embeddings.
    pub w_diff_dest: Tensor,
}

/// Parameters of the local fusion at multi-modal units. The projection is
/// used both for scoring and for the differences.
#[derive(Clone)]
pub struct LocalFusionParams {
    pub w_origin: Tensor,
    pub w_dest: Tensor,
    pub a_origin: Tensor,
    pub a_dest: Tensor,
}

/// Shared projections of the multiple-perspective interaction.
#[derive(Clone)]
pub struct InteractionShared {
    pub w_p1: Tensor,
    pub w_p2: Tensor,
    pub w_p3: Tensor,
    pub w_p4: Tensor,
}

/// Per-mode Hadamard gates of the final combination.
#[derive(Clone)]
pub struct InteractionGates {
    pub w_f1: Tensor,
    pub w_f2: Tensor,
    pub w_f3: Tensor,
}

/// The global-attention candidate columns of one focal mode: every node of
/// every other mode, in ascending mode order, plus the 0/1 admissibility
/// mask (`N_m x len(entries)`). The mask encodes the candidate scope
/// (mode-restricted or all nodes) and any volume-based pruning cap.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub entries: Vec<(usize, usize)>,
    pub mask: Array2<f64>,
}

/// Row-stochastic global attention per focal mode (origin and destination
/// sides). Rows of nodes without any admissible candidate are all zero.
pub struct GlobalAttention {
    pub origin: Vec<Tensor>,
    pub dest: Vec<Tensor>,
}

fn split_scoring_vector(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (len, _) = a.shape();
    if len % 2 != 0 {
        return Err(FtnError::Config(format!(
            "scoring vector length {len} must be even"
        )));
    }
    Ok((a.slice(0, 0..len / 2)?, a.slice(0, len / 2..len)?))
}

fn attention_side(
    p_half: &[Tensor],
    candidates: &[CandidateSet],
    w_score: &Tensor,
    a: &Tensor,
    leaky_slope: f64,
) -> Result<Vec<Tensor>> {
    let (a_left, a_right) = split_scoring_vector(a)?;
    let proj: Vec<Tensor> = p_half
        .iter()
        .map(|p| p.matmul(w_score))
        .collect::<Result<_>>()?;
    let u: Vec<Tensor> = proj.iter().map(|p| p.matmul(&a_left)).collect::<Result<_>>()?;
    let v: Vec<Tensor> = proj
        .iter()
        .map(|p| p.matmul(&a_right))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(p_half.len());
    for (m, cand) in candidates.iter().enumerate() {
        let mut v_parts = Vec::new();
        let mut n_prev = None;
        for &(mode, _) in &cand.entries {
            if n_prev != Some(mode) {
                v_parts.push(v[mode].clone());
                n_prev = Some(mode);
            }
        }
        if v_parts.is_empty() {
            // no other mode exists; zero columns would be meaningless
            out.push(Tensor::zeros(p_half[m].shape().0, 0));
            continue;
        }
        let v_cat = Tensor::concat_many(&v_parts, 0)?;
        let scores = Tensor::outer_sum(&u[m], &v_cat)?.leaky_relu(leaky_slope);
        out.push(scores.masked_softmax_rows(&cand.mask)?);
    }
    Ok(out)
}

/// Graph-attention scores of every focal node against its cross-modal
/// candidates, separately for the origin and destination embedding halves.
/// Each admissible row sums to one across the whole candidate set.
pub fn global_attention(
    p_origin: &[Tensor],
    p_dest: &[Tensor],
    candidates: &[CandidateSet],
    params: &GlobalFusionParams,
    leaky_slope: f64,
) -> Result<GlobalAttention> {
    for p in p_origin {
        if p.shape().0 == 0 {
            return Err(FtnError::Config("mode with zero nodes".into()));
        }
    }
    Ok(GlobalAttention {
        origin: attention_side(p_origin, candidates, &params.w_score, &params.a_origin, leaky_slope)?,
        dest: attention_side(p_dest, candidates, &params.w_score, &params.a_dest, leaky_slope)?,
    })
}

fn aggregate_side(
    attention: &[Tensor],
    p_half: &[Tensor],
    candidates: &[CandidateSet],
    w_diff: &Tensor,
) -> Result<Vec<Tensor>> {
    let proj: Vec<Tensor> = p_half
        .iter()
        .map(|p| p.matmul(w_diff))
        .collect::<Result<_>>()?;
    let width = w_diff.shape().1;
    let mut out = Vec::with_capacity(p_half.len());
    for (m, cand) in candidates.iter().enumerate() {
        let n = p_half[m].shape().0;
        if cand.entries.is_empty() {
            out.push(Tensor::zeros(n, width));
            continue;
        }
        let mut r_parts = Vec::new();
        let mut n_prev = None;
        for &(mode, _) in &cand.entries {
            if n_prev != Some(mode) {
                r_parts.push(proj[mode].clone());
                n_prev = Some(mode);
            }
        }
        let r_cat = Tensor::concat_many(&r_parts, 0)?;
        out.push(Tensor::weighted_abs_diff_agg(&attention[m], &proj[m], &r_cat)?);
    }
    Ok(out)
}

/// Attention-weighted aggregation of absolute embedding differences
/// across modes (the anti-negative-transfer step). Returns one
/// `N_m x 2*w_f` matrix per mode: origin and destination aggregates
/// concatenated along the feature axis.
pub fn mode_distinct_aggregate(
    attention: &GlobalAttention,
    p_origin: &[Tensor],
    p_dest: &[Tensor],
    candidates: &[CandidateSet],
    params: &GlobalFusionParams,
) -> Result<Vec<Tensor>> {
    let c_o = aggregate_side(&attention.origin, p_origin, candidates, &params.w_diff_origin)?;
    let c_d = aggregate_side(&attention.dest, p_dest, candidates, &params.w_diff_dest)?;
    c_o.iter()
        .zip(&c_d)
        .map(|(o, d)| Tensor::concat(o, d, 1))
        .collect()
}

/// Attention rows of one multi-modal unit, kept for inspection output.
pub struct UnitAttention {
    pub grid: crate::graph::GridId,
    /// `(mode, node)` members in row/column order.
    pub members: Vec<(usize, usize)>,
    pub origin: Tensor,
    pub dest: Tensor,
}

pub struct LocalFusionOutput {
    /// Per mode: `N_m x 2w`; rows of nodes outside multi-modal units are
    /// zero.
    pub s: Vec<Tensor>,
    pub units: Vec<UnitAttention>,
}

/// Local fusion at every multi-modal unit: softmax over the modes at the
/// unit (self included), then aggregation of cross origin/destination
/// differences.
///
/// All units are processed as one flat problem: member rows of every unit
/// are gathered into a stacked matrix, a block-diagonal mask restricts
/// the softmax to each unit, and the aggregated rows are scattered back
/// into full per-mode matrices (zero rows for nodes outside units).
pub fn local_fusion(
    unit_index: &MultiModalUnitIndex,
    p_origin: &[Tensor],
    p_dest: &[Tensor],
    params: &LocalFusionParams,
    leaky_slope: f64,
) -> Result<LocalFusionOutput> {
    let modes = p_origin.len();
    let width = params.w_origin.shape().1;

    // flat member list: (grid block, mode, node), unit-major
    let mut flat: Vec<(usize, usize, usize)> = Vec::new();
    let mut units_meta: Vec<(crate::graph::GridId, Vec<(usize, usize)>)> = Vec::new();
    for (grid, members) in unit_index.multi_modal_units() {
        let block = units_meta.len();
        for &(m, node) in members {
            flat.push((block, m, node));
        }
        units_meta.push((grid, members.to_vec()));
    }
    let rows = flat.len();
    if rows == 0 {
        let s = p_origin
            .iter()
            .map(|p| Tensor::zeros(p.shape().0, 2 * width))
            .collect();
        return Ok(LocalFusionOutput { s, units: vec![] });
    }

    // per-mode gather matrices: stacked = sum_m G_m . X_m
    let gather: Vec<Tensor> = (0..modes)
        .map(|m| {
            let n = p_origin[m].shape().0;
            let mut g = Array2::zeros((rows, n));
            for (r, &(_, mode, node)) in flat.iter().enumerate() {
                if mode == m {
                    g[(r, node)] = 1.0;
                }
            }
            Tensor::constant(g)
        })
        .collect();
    let stack = |per_mode: &[Tensor]| -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (g, x) in gather.iter().zip(per_mode) {
            let part = g.matmul(x)?;
            acc = Some(match acc {
                Some(a) => a.add(&part)?,
                None => part,
            });
        }
        Ok(acc.expect("at least one mode"))
    };

    // block-diagonal admissibility: same unit attends to itself only
    let mut mask = Array2::zeros((rows, rows));
    for (r, &(block_r, _, _)) in flat.iter().enumerate() {
        for (c, &(block_c, _, _)) in flat.iter().enumerate() {
            if block_r == block_c {
                mask[(r, c)] = 1.0;
            }
        }
    }

    let proj_o: Vec<Tensor> = p_origin
        .iter()
        .map(|p| p.matmul(&params.w_origin))
        .collect::<Result<_>>()?;
    let proj_d: Vec<Tensor> = p_dest
        .iter()
        .map(|p| p.matmul(&params.w_dest))
        .collect::<Result<_>>()?;
    // cross projections: destination embeddings through the origin map and
    // vice versa, used inside the absolute differences
    let proj_d_by_wo: Vec<Tensor> = p_dest
        .iter()
        .map(|p| p.matmul(&params.w_origin))
        .collect::<Result<_>>()?;
    let proj_o_by_wd: Vec<Tensor> = p_origin
        .iter()
        .map(|p| p.matmul(&params.w_dest))
        .collect::<Result<_>>()?;

    let (a_left_o, a_right_o) = split_scoring_vector(&params.a_origin)?;
    let (a_left_d, a_right_d) = split_scoring_vector(&params.a_dest)?;

    let q_o = stack(&proj_o)?;
    let r_o = stack(&proj_d_by_wo)?;
    let q_d = stack(&proj_d)?;
    let r_d = stack(&proj_o_by_wd)?;

    let att_o = Tensor::outer_sum(&q_o.matmul(&a_left_o)?, &q_o.matmul(&a_right_o)?)?
        .leaky_relu(leaky_slope)
        .masked_softmax_rows(&mask)?;
    let att_d = Tensor::outer_sum(&q_d.matmul(&a_left_d)?, &q_d.matmul(&a_right_d)?)?
        .leaky_relu(leaky_slope)
        .masked_softmax_rows(&mask)?;

    let s_o_flat = Tensor::weighted_abs_diff_agg(&att_o, &q_o, &r_o)?;
    let s_d_flat = Tensor::weighted_abs_diff_agg(&att_d, &q_d, &r_d)?;

    let mut s = Vec::with_capacity(modes);
    for g in &gather {
        let scatter = g.transpose();
        let s_o = scatter.matmul(&s_o_flat)?;
        let s_d = scatter.matmul(&s_d_flat)?;
        s.push(Tensor::concat(&s_o, &s_d, 1)?);
    }

    // per-unit attention blocks for inspection
    let mut units = Vec::new();
    let mut offset = 0;
    for (grid, members) in units_meta {
        let k = members.len();
        let block = |att: &Tensor| {
            Tensor::constant(
                att.value()
                    .slice(ndarray::s![offset..offset + k, offset..offset + k])
                    .to_owned(),
            )
        };
        units.push(UnitAttention {
            grid,
            members,
            origin: block(&att_o),
            dest: block(&att_d),
        });
        offset += k;
    }
    Ok(LocalFusionOutput { s, units })
}

/// Gated combination of the intra-modal view with the global and local
/// fusion views:
/// `U = Wf1 .* P + Wf2 .* (c E_g^T) + Wf3 .* (s E_l^T)` with
/// `E_g = sigmoid((P Wp1)^T (c Wp2))` and `E_l` likewise. Passing `None`
/// for a view removes its addend entirely (the ablation switches), so no
/// gradient reaches that view's parameters.
pub fn multiple_perspective_interaction(
    p: &Tensor,
    c: Option<&Tensor>,
    s: Option<&Tensor>,
    shared: &InteractionShared,
    gates: &InteractionGates,
) -> Result<Tensor> {
    let mut u = gates.w_f1.hadamard(p)?;
    if let Some(c) = c {
        let e_g = p
            .matmul(&shared.w_p1)?
            .transpose()
            .matmul(&c.matmul(&shared.w_p2)?)?
            .sigmoid();
        u = u.add(&gates.w_f2.hadamard(&c.matmul(&e_g.transpose())?)?)?;
    }
    if let Some(s) = s {
        let e_l = p
            .matmul(&shared.w_p3)?
            .transpose()
            .matmul(&s.matmul(&shared.w_p4)?)?
            .sigmoid();
        u = u.add(&gates.w_f3.hadamard(&s.matmul(&e_l.transpose())?)?)?;
    }
    Ok(u)
}

/// Builds the candidate set of every focal mode: all nodes of all other
/// modes in ascending mode order. `admissible(focal_mode, focal_node,
/// candidate_mode)` decides the mask.
pub fn build_candidate_sets(
    node_counts: &[usize],
    mut admissible: impl FnMut(usize, usize, usize) -> bool,
) -> Vec<CandidateSet> {
    let modes = node_counts.len();
    (0..modes)
        .map(|m| {
            let mut entries = Vec::new();
            for (n, &count) in node_counts.iter().enumerate() {
                if n == m {
                    continue;
                }
                for node in 0..count {
                    entries.push((n, node));
                }
            }
            let mut mask = Array2::zeros((node_counts[m], entries.len()));
            for i in 0..node_counts[m] {
                for (j, &(n, _)) in entries.iter().enumerate() {
                    if admissible(m, i, n) {
                        mask[(i, j)] = 1.0;
                    }
                }
            }
            CandidateSet { entries, mask }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_unit_index, GridId, ModeId, ModeSeries};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SLOPE: f64 = 0.01;

    fn t(a: Array2<f64>) -> Tensor {
        Tensor::constant(a)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_global_params(rng: &mut ChaCha8Rng, half: usize, w: usize) -> GlobalFusionParams {
        GlobalFusionParams {
            w_score: t(rand_mat(rng, half, w)),
            a_origin: t(rand_mat(rng, 2 * w, 1)),
            a_dest: t(rand_mat(rng, 2 * w, 1)),
            w_diff_origin: t(rand_mat(rng, half, w)),
            w_diff_dest: t(rand_mat(rng, half, w)),
        }
    }

    fn all_admissible(node_counts: &[usize]) -> Vec<CandidateSet> {
        build_candidate_sets(node_counts, |_, _, _| true)
    }

    #[test]
    fn identical_embeddings_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let half = 3;
        let row = rand_mat(&mut rng, 1, half);
        let stack = |n: usize| {
            let mut m = Array2::zeros((n, half));
            for mut r in m.rows_mut() {
                r.assign(&row.row(0));
            }
            t(m)
        };
        let p_o = vec![stack(2), stack(3)];
        let p_d = vec![stack(2), stack(3)];
        let params = rand_global_params(&mut rng, half, 3);
        let att = global_attention(&p_o, &p_d, &all_admissible(&[2, 3]), &params, SLOPE).unwrap();
        // focal mode 0 has 3 candidates (all of mode 1) -> uniform 1/3
        for v in att.origin[0].value() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // focal mode 1 has 2 candidates
        for v in att.origin[1].value() {
            assert!((v - 1.0 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_logit_takes_all_weight() {
        // scores become [20, 0]: projection picks the first coordinate
        let p_o = vec![t(array![[0.0]]), t(array![[20.0], [0.0]])];
        let p_d = p_o.clone();
        let params = GlobalFusionParams {
            w_score: t(array![[1.0]]),
            a_origin: t(array![[0.0], [1.0]]), // score = v_j = candidate value
            a_dest: t(array![[0.0], [1.0]]),
            w_diff_origin: t(array![[1.0]]),
            w_diff_dest: t(array![[1.0]]),
        };
        let att = global_attention(&p_o, &p_d, &all_admissible(&[1, 2]), &params, SLOPE).unwrap();
        assert!(att.origin[0].value()[(0, 0)] >= 1.0 - 1e-8);
    }

    // Plain-loop oracle of the attention + aggregation pipeline for one
    // focal mode, origin side.
    #[allow(clippy::too_many_arguments)]
    fn global_oracle(
        p_focal: &Array2<f64>,
        p_others: &[&Array2<f64>],
        mask: &Array2<f64>,
        w_score: &Array2<f64>,
        a: &[f64],
        w_diff: &Array2<f64>,
        slope: f64,
    ) -> (Array2<f64>, Array2<f64>) {
        let w = w_score.ncols();
        let proj = |p: &Array2<f64>| p.dot(w_score);
        let pf = proj(p_focal);
        let pc: Vec<Array2<f64>> = p_others.iter().map(|p| proj(p)).collect();
        let cand_rows: Vec<Vec<f64>> = pc
            .iter()
            .flat_map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
            .collect();
        let n = p_focal.nrows();
        let c = cand_rows.len();
        let mut att = Array2::zeros((n, c));
        for i in 0..n {
            let mut logits = vec![0.0; c];
            for (j, cand) in cand_rows.iter().enumerate() {
                let mut score = 0.0;
                for f in 0..w {
                    score += a[f] * pf[(i, f)];
                    score += a[w + f] * cand[f];
                }
                logits[j] = if score > 0.0 { score } else { slope * score };
            }
            let mut max = f64::NEG_INFINITY;
            for (j, &l) in logits.iter().enumerate() {
                if mask[(i, j)] != 0.0 {
                    max = max.max(l);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (j, &l) in logits.iter().enumerate() {
                if mask[(i, j)] != 0.0 {
                    att[(i, j)] = (l - max).exp();
                    sum += att[(i, j)];
                }
            }
            for j in 0..c {
                att[(i, j)] /= sum;
            }
        }
        // aggregation of |q_i - r_j| with the attention weights
        let wf = w_diff.ncols();
        let qf = p_focal.dot(w_diff);
        let rc: Vec<Array2<f64>> = p_others.iter().map(|p| p.dot(w_diff)).collect();
        let r_rows: Vec<Vec<f64>> = rc
            .iter()
            .flat_map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
            .collect();
        let mut agg = Array2::zeros((n, wf));
        for i in 0..n {
            for (j, r) in r_rows.iter().enumerate() {
                for f in 0..wf {
                    agg[(i, f)] += att[(i, j)] * (qf[(i, f)] - r[f]).abs();
                }
            }
        }
        (att, agg)
    }

    #[test]
    fn global_fusion_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let half = 4;
            let w = 3;
            let p_o = vec![t(rand_mat(&mut rng, 3, half)), t(rand_mat(&mut rng, 3, half))];
            let p_d = vec![t(rand_mat(&mut rng, 3, half)), t(rand_mat(&mut rng, 3, half))];
            let params = rand_global_params(&mut rng, half, w);
            // random mask with at least one admissible candidate per row
            let mut cands = all_admissible(&[3, 3]);
            for cs in &mut cands {
                for mut row in cs.mask.rows_mut() {
                    for v in row.iter_mut() {
                        if rng.gen_bool(0.3) {
                            *v = 0.0;
                        }
                    }
                    if row.iter().all(|v| *v == 0.0) {
                        row[0] = 1.0;
                    }
                }
            }
            let att = global_attention(&p_o, &p_d, &cands, &params, SLOPE).unwrap();
            let c = mode_distinct_aggregate(&att, &p_o, &p_d, &cands, &params).unwrap();

            for m in 0..2 {
                let other = 1 - m;
                let (want_att, want_agg) = global_oracle(
                    p_o[m].value(),
                    &[p_o[other].value()],
                    &cands[m].mask,
                    params.w_score.value(),
                    params.a_origin.value().column(0).to_vec().as_slice(),
                    params.w_diff_origin.value(),
                    SLOPE,
                );
                for (got, want) in att.origin[m].value().iter().zip(want_att.iter()) {
                    assert!((got - want).abs() < 1e-12);
                }
                let got_c = c[m].slice(1, 0..3).unwrap();
                for (got, want) in got_c.value().iter().zip(want_agg.iter()) {
                    assert!((got - want).abs() < 1e-12);
                }
                // attention rows with candidates sum to one
                for (row, mrow) in att.origin[m].value().rows().into_iter().zip(cands[m].mask.rows())
                {
                    if mrow.iter().any(|v| *v != 0.0) {
                        assert!((row.sum() - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn identical_embeddings_zero_the_aggregate_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let half = 3;
        let row = rand_mat(&mut rng, 1, half);
        let stack = |n: usize| {
            let mut m = Array2::zeros((n, half));
            for mut r in m.rows_mut() {
                r.assign(&row.row(0));
            }
            t(m)
        };
        let p_o = vec![stack(2), stack(4)];
        let p_d = vec![stack(2), stack(4)];
        let params = rand_global_params(&mut rng, half, 3);
        let cands = all_admissible(&[2, 4]);
        let att = global_attention(&p_o, &p_d, &cands, &params, SLOPE).unwrap();
        let c = mode_distinct_aggregate(&att, &p_o, &p_d, &cands, &params).unwrap();
        for cm in &c {
            assert!(cm.value().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_admissible_candidate_reduces_to_plain_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let half = 3;
        let p_o = vec![t(rand_mat(&mut rng, 1, half)), t(rand_mat(&mut rng, 2, half))];
        let p_d = vec![t(rand_mat(&mut rng, 1, half)), t(rand_mat(&mut rng, 2, half))];
        let params = rand_global_params(&mut rng, half, 3);
        // only candidate node 1 of mode 1 is admissible for mode 0
        let mut cands = all_admissible(&[1, 2]);
        cands[0].mask[(0, 0)] = 0.0;
        let att = global_attention(&p_o, &p_d, &cands, &params, SLOPE).unwrap();
        assert!((att.origin[0].value()[(0, 1)] - 1.0).abs() < 1e-12);
        let c = mode_distinct_aggregate(&att, &p_o, &p_d, &cands, &params).unwrap();
        let q = p_o[0].value().dot(params.w_diff_origin.value());
        let r_o = p_o[1].value().dot(params.w_diff_origin.value());
        for f in 0..3 {
            let want = (q[(0, f)] - r_o[(1, f)]).abs();
            assert!((c[0].value()[(0, f)] - want).abs() < 1e-12);
        }
    }

    fn mode_series(index: usize, grids: &[(u32, u32)]) -> ModeSeries {
        ModeSeries {
            mode: ModeId {
                name: format!("m{index}"),
                index,
            },
            nodes: grids.iter().map(|&(p, q)| GridId { p, q }).collect(),
            snapshots: vec![],
        }
    }

    fn rand_local_params(rng: &mut ChaCha8Rng, half: usize, w: usize) -> LocalFusionParams {
        LocalFusionParams {
            w_origin: t(rand_mat(rng, half, w)),
            w_dest: t(rand_mat(rng, half, w)),
            a_origin: t(rand_mat(rng, 2 * w, 1)),
            a_dest: t(rand_mat(rng, 2 * w, 1)),
        }
    }

    #[test]
    fn nodes_outside_units_get_zero_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        // mode 0 at grids (0,0) and (1,1); mode 1 at (1,1) and (2,2):
        // only (1,1) is a unit
        let index = build_unit_index(&[
            mode_series(0, &[(0, 0), (1, 1)]),
            mode_series(1, &[(1, 1), (2, 2)]),
        ]);
        let half = 3;
        let p_o = vec![t(rand_mat(&mut rng, 2, half)), t(rand_mat(&mut rng, 2, half))];
        let p_d = vec![t(rand_mat(&mut rng, 2, half)), t(rand_mat(&mut rng, 2, half))];
        let out = local_fusion(&index, &p_o, &p_d, &rand_local_params(&mut rng, half, 2), SLOPE)
            .unwrap();
        // mode 0 node 0 and mode 1 node 1 are not at the unit
        assert!(out.s[0].value().row(0).iter().all(|v| *v == 0.0));
        assert!(out.s[1].value().row(1).iter().all(|v| *v == 0.0));
        assert!(out.s[0].value().row(1).iter().any(|v| *v != 0.0));
        assert_eq!(out.units.len(), 1);
    }

    #[test]
    fn identical_origin_and_destination_embeddings_zero_local_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let index = build_unit_index(&[mode_series(0, &[(0, 0)]), mode_series(1, &[(0, 0)])]);
        let half = 3;
        let shared = rand_mat(&mut rng, 1, half);
        let p = vec![t(shared.clone()), t(shared.clone())];
        let out = local_fusion(&index, &p, &p, &rand_local_params(&mut rng, half, 2), SLOPE)
            .unwrap();
        for s in &out.s {
            assert!(s.value().iter().all(|v| *v == 0.0));
        }
    }

    // Explicit-loop oracle of the local fusion at a single unit.
    fn local_oracle(
        p_o_rows: &[Vec<f64>],
        p_d_rows: &[Vec<f64>],
        w_o: &Array2<f64>,
        a_o: &[f64],
        slope: f64,
    ) -> Vec<Vec<f64>> {
        let k = p_o_rows.len();
        let w = w_o.ncols();
        let proj = |row: &[f64]| -> Vec<f64> {
            (0..w)
                .map(|f| row.iter().enumerate().map(|(c, v)| v * w_o[(c, f)]).sum())
                .collect()
        };
        let po: Vec<Vec<f64>> = p_o_rows.iter().map(|r| proj(r)).collect();
        let pd: Vec<Vec<f64>> = p_d_rows.iter().map(|r| proj(r)).collect();
        let mut att = vec![vec![0.0; k]; k];
        for m in 0..k {
            for n in 0..k {
                let mut s = 0.0;
                for f in 0..w {
                    s += a_o[f] * po[m][f] + a_o[w + f] * po[n][f];
                }
                att[m][n] = if s > 0.0 { s } else { slope * s };
            }
            let max = att[m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in att[m].iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in att[m].iter_mut() {
                *v /= sum;
            }
        }
        let mut s_out = vec![vec![0.0; w]; k];
        for m in 0..k {
            for n in 0..k {
                for f in 0..w {
                    s_out[m][f] += att[m][n] * (po[m][f] - pd[n][f]).abs();
                }
            }
        }
        s_out
    }

    #[test]
    fn local_fusion_matches_oracle_at_three_mode_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let index = build_unit_index(&[
                mode_series(0, &[(0, 0)]),
                mode_series(1, &[(0, 0)]),
                mode_series(2, &[(0, 0)]),
            ]);
            let half = 4;
            let p_o: Vec<Tensor> = (0..3).map(|_| t(rand_mat(&mut rng, 1, half))).collect();
            let p_d: Vec<Tensor> = (0..3).map(|_| t(rand_mat(&mut rng, 1, half))).collect();
            let params = rand_local_params(&mut rng, half, 3);
            let out = local_fusion(&index, &p_o, &p_d, &params, SLOPE).unwrap();

            let rows = |ps: &[Tensor]| -> Vec<Vec<f64>> {
                ps.iter().map(|p| p.value().row(0).to_vec()).collect()
            };
            let want = local_oracle(
                &rows(&p_o),
                &rows(&p_d),
                params.w_origin.value(),
                params.a_origin.value().column(0).to_vec().as_slice(),
                SLOPE,
            );
            for m in 0..3 {
                for f in 0..3 {
                    let got = out.s[m].value()[(0, f)];
                    assert!((got - want[m][f]).abs() < 1e-12, "{got} vs {}", want[m][f]);
                }
            }
            // attention rows sum to one
            for row in out.units[0].origin.value().rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    fn rand_interaction(rng: &mut ChaCha8Rng, n: usize, d_p: usize) -> (InteractionShared, InteractionGates) {
        (
            InteractionShared {
                w_p1: t(rand_mat(rng, d_p, d_p)),
                w_p2: t(rand_mat(rng, d_p, d_p)),
                w_p3: t(rand_mat(rng, d_p, d_p)),
                w_p4: t(rand_mat(rng, d_p, d_p)),
            },
            InteractionGates {
                w_f1: t(rand_mat(rng, n, d_p)),
                w_f2: t(rand_mat(rng, n, d_p)),
                w_f3: t(rand_mat(rng, n, d_p)),
            },
        )
    }

    #[test]
    fn interaction_with_zero_views_is_gated_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (n, d_p) = (3, 4);
        let p = t(rand_mat(&mut rng, n, d_p));
        let zero = Tensor::zeros(n, d_p);
        let (shared, gates) = rand_interaction(&mut rng, n, d_p);
        let u = multiple_perspective_interaction(&p, Some(&zero), Some(&zero), &shared, &gates)
            .unwrap();
        let want = gates.w_f1.value() * p.value();
        for (got, want) in u.value().iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zeroed_gates_make_fused_views_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (n, d_p) = (3, 4);
        let p = t(rand_mat(&mut rng, n, d_p));
        let (shared, mut gates) = rand_interaction(&mut rng, n, d_p);
        gates.w_f2 = Tensor::zeros(n, d_p);
        gates.w_f3 = Tensor::zeros(n, d_p);
        let c1 = t(rand_mat(&mut rng, n, d_p));
        let s1 = t(rand_mat(&mut rng, n, d_p));
        let c2 = t(rand_mat(&mut rng, n, d_p));
        let s2 = t(rand_mat(&mut rng, n, d_p));
        let u1 =
            multiple_perspective_interaction(&p, Some(&c1), Some(&s1), &shared, &gates).unwrap();
        let u2 =
            multiple_perspective_interaction(&p, Some(&c2), Some(&s2), &shared, &gates).unwrap();
        assert_eq!(u1.value(), u2.value());
    }

    #[test]
    fn interaction_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..20 {
            let (n, d_p) = (3, 4);
            let p = t(rand_mat(&mut rng, n, d_p));
            let c = t(rand_mat(&mut rng, n, d_p));
            let s = t(rand_mat(&mut rng, n, d_p));
            let (shared, gates) = rand_interaction(&mut rng, n, d_p);
            let u = multiple_perspective_interaction(&p, Some(&c), Some(&s), &shared, &gates)
                .unwrap();

            // plain ndarray re-evaluation
            let sig = |m: Array2<f64>| m.mapv(|x| 1.0 / (1.0 + (-x).exp()));
            let e_g = sig(p.value().dot(shared.w_p1.value()).t().dot(&c.value().dot(shared.w_p2.value())));
            let e_l = sig(p.value().dot(shared.w_p3.value()).t().dot(&s.value().dot(shared.w_p4.value())));
            let want = gates.w_f1.value() * p.value()
                + gates.w_f2.value() * &c.value().dot(&e_g.t())
                + gates.w_f3.value() * &s.value().dot(&e_l.t());
            for (got, want) in u.value().iter().zip(want.iter()) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_is_equivariant_under_mode_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let half = 3;
        let p_o: Vec<Tensor> = (0..3).map(|i| t(rand_mat(&mut rng, 2 + i, half))).collect();
        let p_d: Vec<Tensor> = (0..3).map(|i| t(rand_mat(&mut rng, 2 + i, half))).collect();
        let params = rand_global_params(&mut rng, half, 3);
        let counts = [2usize, 3, 4];
        let cands = all_admissible(&counts);
        let att = global_attention(&p_o, &p_d, &cands, &params, SLOPE).unwrap();
        let c = mode_distinct_aggregate(&att, &p_o, &p_d, &cands, &params).unwrap();

        // swap modes 1 and 2 everywhere
        let perm = [0usize, 2, 1];
        let p_o2: Vec<Tensor> = perm.iter().map(|&i| p_o[i].clone()).collect();
        let p_d2: Vec<Tensor> = perm.iter().map(|&i| p_d[i].clone()).collect();
        let counts2 = [2usize, 4, 3];
        let cands2 = all_admissible(&counts2);
        let att2 = global_attention(&p_o2, &p_d2, &cands2, &params, SLOPE).unwrap();
        let c2 = mode_distinct_aggregate(&att2, &p_o2, &p_d2, &cands2, &params).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (got, want) in c2[new].value().iter().zip(c[old].value().iter()) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
