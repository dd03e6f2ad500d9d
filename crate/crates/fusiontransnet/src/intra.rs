//! Phase 1: per-mode spatiotemporal encoding.
//!
//! Each mode runs the same block: node features are projected into a latent
//! space, split into origin and destination halves, convolved over two
//! transposed adjacency channels (observed flow graph and adaptive graph),
//! and finally mixed across the input window by temporal attention. The
//! output is one embedding row per node with `d_p = L * d_e` features,
//! flattened time-major.

use crate::autodiff::Tensor;
use crate::error::{FtnError, Result};

/// Parameters of one adjacency channel of the OD graph convolution.
#[derive(Clone)]
pub struct GcnChannelParams {
    /// `d_c/2 x d_e/2` (or `d_c x d_e` in the unsplit ablation).
    pub w_origin: Tensor,
    /// Per-node bias, `N x 1`.
    pub b_origin: Tensor,
    pub w_dest: Tensor,
    pub b_dest: Tensor,
}

/// Temporal-attention parameters for a window of length `L`.
#[derive(Clone)]
pub struct TemporalParams {
    /// `L x L`
    pub w0: Tensor,
    /// `N x 1`, contracts the node axis.
    pub w1: Tensor,
    /// `d_e x N`
    pub w2: Tensor,
    /// `d_e x 1`, contracts the feature axis.
    pub w3: Tensor,
    /// `L x 1`
    pub bias: Tensor,
}

pub struct TemporalAttentionOutput {
    /// `N x (L * d_e)`: per node, the L attention-weighted slices
    /// concatenated in time order.
    pub embedding: Tensor,
    /// The row-stochastic `L x L` attention matrix.
    pub weights: Tensor,
}

/// `H = relu(X . input_proj)`.
pub fn embed_features(x: &Tensor, input_proj: &Tensor) -> Result<Tensor> {
    if x.shape().1 != input_proj.shape().0 {
        return Err(FtnError::Config(format!(
            "feature width {} does not match input projection rows {}",
            x.shape().1,
            input_proj.shape().0
        )));
    }
    Ok(x.matmul(input_proj)?.relu())
}

/// Splits latent features into origin (first half of columns) and
/// destination (second half) embeddings.
pub fn split_od(h: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, d) = h.shape();
    if d % 2 != 0 {
        return Err(FtnError::Config(format!(
            "latent width {d} must be even to split into origin/destination halves"
        )));
    }
    Ok((h.slice(1, 0..d / 2)?, h.slice(1, d / 2..d)?))
}

fn check_adjacency(a: &Tensor) -> Result<()> {
    if a.value().iter().any(|x| x.is_nan()) {
        return Err(FtnError::Numeric {
            op: "od_gcn_step",
            detail: "NaN in adjacency".into(),
        });
    }
    Ok(())
}

/// One OD graph convolution: sums `relu(A_c^T . H . W_c + b_c)` over the
/// adjacency channels, separately for the origin and destination halves,
/// and concatenates the two results along the feature axis.
pub fn od_gcn_step(
    h_origin: &Tensor,
    h_dest: &Tensor,
    adjacencies: &[Tensor],
    channels: &[GcnChannelParams],
) -> Result<Tensor> {
    assert_eq!(adjacencies.len(), channels.len());
    let mut z_origin: Option<Tensor> = None;
    let mut z_dest: Option<Tensor> = None;
    for (a, ch) in adjacencies.iter().zip(channels) {
        check_adjacency(a)?;
        let at = a.transpose();
        let zo = at
            .matmul(h_origin)?
            .matmul(&ch.w_origin)?
            .add_col_bias(&ch.b_origin)?
            .relu();
        let zd = at
            .matmul(h_dest)?
            .matmul(&ch.w_dest)?
            .add_col_bias(&ch.b_dest)?
            .relu();
        z_origin = Some(match z_origin {
            Some(acc) => acc.add(&zo)?,
            None => zo,
        });
        z_dest = Some(match z_dest {
            Some(acc) => acc.add(&zd)?,
            None => zd,
        });
    }
    let zo = z_origin.ok_or_else(|| FtnError::Config("no adjacency channels".into()))?;
    let zd = z_dest.expect("set together with z_origin");
    Tensor::concat(&zo, &zd, 1)
}

/// Variant used by the no-OD-split ablation: one convolution path over
/// the unsplit latent features, its output duplicated so origins and
/// destinations share the same embedding.
pub fn gcn_step_unsplit(
    h: &Tensor,
    adjacencies: &[Tensor],
    channels: &[GcnChannelParams],
) -> Result<Tensor> {
    let mut z: Option<Tensor> = None;
    for (a, ch) in adjacencies.iter().zip(channels) {
        check_adjacency(a)?;
        let zc = a
            .transpose()
            .matmul(h)?
            .matmul(&ch.w_origin)?
            .add_col_bias(&ch.b_origin)?
            .relu();
        z = Some(match z {
            Some(acc) => acc.add(&zc)?,
            None => zc,
        });
    }
    let z = z.ok_or_else(|| FtnError::Config("no adjacency channels".into()))?;
    Tensor::concat(&z, &z, 1)
}

/// Temporal attention over the window `[Z_1 .. Z_L]` (each `N x d_e`).
///
/// The `L x L` dependency matrix is
/// `W0 . sigmoid((Z^T W1) W2 (Z W3)^T + b)`, softmax-normalized per row,
/// and used to re-weight the window slices. The bias broadcasts along
/// rows (entry `j` is added to column `j`).
pub fn temporal_attention(
    z_seq: &[Tensor],
    params: &TemporalParams,
) -> Result<TemporalAttentionOutput> {
    if z_seq.is_empty() {
        return Err(FtnError::Config("temporal attention needs L >= 1".into()));
    }
    let (n, d_e) = z_seq[0].shape();

    let mut f1_rows = Vec::with_capacity(z_seq.len());
    let mut f2_rows = Vec::with_capacity(z_seq.len());
    let mut stack_rows = Vec::with_capacity(z_seq.len());
    for z in z_seq {
        f1_rows.push(z.transpose().matmul(&params.w1)?.transpose()); // 1 x d_e
        f2_rows.push(z.matmul(&params.w3)?.transpose()); // 1 x N
        stack_rows.push(z.reshape(1, n * d_e)?);
    }
    let f1 = Tensor::concat_many(&f1_rows, 0)?; // L x d_e
    let f2 = Tensor::concat_many(&f2_rows, 0)?; // L x N
    let inner = f1.matmul(&params.w2)?.matmul(&f2.transpose())?; // L x L
    let e_e = params
        .w0
        .matmul(&inner.add_row_bias(&params.bias)?.sigmoid())?;
    let weights = e_e.softmax_rows()?;

    let z_stack = Tensor::concat_many(&stack_rows, 0)?; // L x (N*d_e)
    let mixed = weights.matmul(&z_stack)?;
    let mut per_time = Vec::with_capacity(z_seq.len());
    for l in 0..z_seq.len() {
        per_time.push(mixed.slice(0, l..l + 1)?.reshape(n, d_e)?);
    }
    let embedding = Tensor::concat_many(&per_time, 1)?;
    Ok(TemporalAttentionOutput { embedding, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(a: Array2<f64>) -> Tensor {
        Tensor::constant(a)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
    }

    #[test]
    fn embed_zero_input_is_zero() {
        let x = Tensor::zeros(3, 2);
        let proj = t(array![[0.5, -0.5, 1.0, 2.0], [1.0, 0.0, -1.0, 0.3]]);
        let h = embed_features(&x, &proj).unwrap();
        assert!(h.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embed_identity_projection_returns_input() {
        let x = t(array![[1.0, 2.0], [0.5, 0.0]]);
        let proj = t(array![[1.0, 0.0], [0.0, 1.0]]);
        let h = embed_features(&x, &proj).unwrap();
        assert_eq!(h.value(), x.value());
    }

    #[test]
    fn embed_width_mismatch_is_config_error() {
        let x = Tensor::zeros(3, 2);
        let proj = Tensor::zeros(3, 4);
        assert!(matches!(
            embed_features(&x, &proj),
            Err(FtnError::Config(_))
        ));
    }

    #[test]
    fn embed_gradient_matches_finite_differences() {
        let x_val = array![[0.8, -0.4], [1.3, 0.6]];
        let p0 = [0.7, -0.2, 0.5, 1.4, -0.9, 0.3, 0.2, -1.1];
        let eval = |p: &[f64]| -> f64 {
            let proj = t(Array2::from_shape_vec((2, 4), p.to_vec()).unwrap());
            embed_features(&Tensor::constant(x_val.clone()), &proj)
                .unwrap()
                .sum_all()
                .scalar_value()
                .unwrap()
        };
        let proj = Tensor::param(Array2::from_shape_vec((2, 4), p0.to_vec()).unwrap());
        let loss = embed_features(&Tensor::constant(x_val.clone()), &proj)
            .unwrap()
            .sum_all();
        loss.backward().unwrap();
        let grad = proj.grad().unwrap();
        let h = 1e-5;
        let mut point = p0.to_vec();
        for i in 0..point.len() {
            let orig = point[i];
            point[i] = orig + h;
            let up = eval(&point);
            point[i] = orig - h;
            let down = eval(&point);
            point[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grad.as_slice().unwrap()[i];
            assert!((g - fd).abs() / g.abs().max(fd.abs()).max(1.0) < 1e-4);
        }
    }

    #[test]
    fn split_takes_feature_halves() {
        let h = t(array![[1.0, 2.0, 3.0, 4.0]]);
        let (o, d) = split_od(&h).unwrap();
        assert_eq!(o.value(), &array![[1.0, 2.0]]);
        assert_eq!(d.value(), &array![[3.0, 4.0]]);
        let back = Tensor::concat(&o, &d, 1).unwrap();
        assert_eq!(back.value(), h.value());
    }

    #[test]
    fn split_single_node() {
        let h = Tensor::zeros(1, 6);
        let (o, d) = split_od(&h).unwrap();
        assert_eq!(o.shape(), (1, 3));
        assert_eq!(d.shape(), (1, 3));
    }

    #[test]
    fn split_odd_width_is_config_error() {
        let h = Tensor::zeros(2, 5);
        assert!(matches!(split_od(&h), Err(FtnError::Config(_))));
    }

    fn identity_channels(n: usize, d: usize) -> Vec<GcnChannelParams> {
        let eye = Tensor::constant(Array2::eye(d));
        let zero_b = Tensor::zeros(n, 1);
        (0..2)
            .map(|_| GcnChannelParams {
                w_origin: eye.clone(),
                b_origin: zero_b.clone(),
                w_dest: eye.clone(),
                b_dest: zero_b.clone(),
            })
            .collect()
    }

    #[test]
    fn gcn_with_identity_adjacencies_doubles_input() {
        // two channels with A = I, W = I, b = 0 and nonnegative H sum to 2H
        let h_o = t(array![[0.5, 1.0], [2.0, 0.0], [0.3, 0.7]]);
        let h_d = t(array![[1.5, 0.2], [0.0, 1.0], [0.9, 0.4]]);
        let eye = Tensor::constant(Array2::eye(3));
        let z = od_gcn_step(
            &h_o,
            &h_d,
            &[eye.clone(), eye],
            &identity_channels(3, 2),
        )
        .unwrap();
        let z_o = z.slice(1, 0..2).unwrap();
        let z_d = z.slice(1, 2..4).unwrap();
        assert_eq!(z_o.value(), &(h_o.value() * 2.0));
        assert_eq!(z_d.value(), &(h_d.value() * 2.0));
    }

    #[test]
    fn gcn_with_zero_features_keeps_only_bias_terms() {
        let n = 3;
        let b_flow = Tensor::constant(array![[0.5], [-1.0], [2.0]]);
        let b_adapt = Tensor::constant(array![[1.0], [0.0], [-0.5]]);
        let eye = Tensor::constant(Array2::eye(n));
        let channels = vec![
            GcnChannelParams {
                w_origin: Tensor::constant(Array2::eye(2)),
                b_origin: b_flow.clone(),
                w_dest: Tensor::constant(Array2::eye(2)),
                b_dest: b_flow.clone(),
            },
            GcnChannelParams {
                w_origin: Tensor::constant(Array2::eye(2)),
                b_origin: b_adapt.clone(),
                w_dest: Tensor::constant(Array2::eye(2)),
                b_dest: b_adapt.clone(),
            },
        ];
        let z = od_gcn_step(
            &Tensor::zeros(n, 2),
            &Tensor::zeros(n, 2),
            &[eye.clone(), eye],
            &channels,
        )
        .unwrap();
        // each column j of Z^O equals relu(b_flow) + relu(b_adapt)
        for i in 0..n {
            let expect = b_flow.value()[(i, 0)].max(0.0) + b_adapt.value()[(i, 0)].max(0.0);
            for j in 0..2 {
                assert!((z.value()[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_rejects_nan_adjacency() {
        let mut a = Array2::eye(2);
        a[(0, 1)] = f64::NAN;
        let err = od_gcn_step(
            &Tensor::zeros(2, 2),
            &Tensor::zeros(2, 2),
            &[Tensor::constant(a), Tensor::constant(Array2::eye(2))],
            &identity_channels(2, 2),
        )
        .unwrap_err();
        assert!(matches!(err, FtnError::Numeric { .. }));
    }

    // Independent dense evaluation of the convolution with explicit loops.
    fn gcn_oracle(
        h_o: &Array2<f64>,
        h_d: &Array2<f64>,
        adjacencies: &[Array2<f64>],
        channels: &[(Array2<f64>, Vec<f64>, Array2<f64>, Vec<f64>)],
    ) -> Array2<f64> {
        let n = h_o.nrows();
        let half = channels[0].0.ncols();
        let mut z = Array2::zeros((n, 2 * half));
        for (a, (wo, bo, wd, bd)) in adjacencies.iter().zip(channels) {
            for i in 0..n {
                for f in 0..half {
                    let mut acc_o = 0.0;
                    let mut acc_d = 0.0;
                    for j in 0..n {
                        // (A^T H)[i, :] = sum_j A[j, i] * H[j, :]
                        for c in 0..h_o.ncols() {
                            acc_o += a[(j, i)] * h_o[(j, c)] * wo[(c, f)];
                            acc_d += a[(j, i)] * h_d[(j, c)] * wd[(c, f)];
                        }
                    }
                    z[(i, f)] += (acc_o + bo[i]).max(0.0);
                    z[(i, half + f)] += (acc_d + bd[i]).max(0.0);
                }
            }
        }
        z
    }

    #[test]
    fn gcn_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 3;
            let half = 2;
            let h_o = rand_mat(&mut rng, n, half, 1.0);
            let h_d = rand_mat(&mut rng, n, half, 1.0);
            let a1 = rand_mat(&mut rng, n, n, 1.0);
            let a2 = rand_mat(&mut rng, n, n, 1.0);
            let mk = |rng: &mut ChaCha8Rng| {
                (
                    rand_mat(rng, half, half, 1.0),
                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
                    rand_mat(rng, half, half, 1.0),
                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
                )
            };
            let raw = vec![mk(&mut rng), mk(&mut rng)];
            let channels: Vec<GcnChannelParams> = raw
                .iter()
                .map(|(wo, bo, wd, bd)| GcnChannelParams {
                    w_origin: t(wo.clone()),
                    b_origin: Tensor::from_shape_vec(n, 1, bo.clone()).unwrap(),
                    w_dest: t(wd.clone()),
                    b_dest: Tensor::from_shape_vec(n, 1, bd.clone()).unwrap(),
                })
                .collect();
            let z = od_gcn_step(
                &t(h_o.clone()),
                &t(h_d.clone()),
                &[t(a1.clone()), t(a2.clone())],
                &channels,
            )
            .unwrap();
            let want = gcn_oracle(&h_o, &h_d, &[a1, a2], &raw);
            for (got, want) in z.value().iter().zip(want.iter()) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    fn rand_temporal(rng: &mut ChaCha8Rng, l: usize, n: usize, d_e: usize) -> TemporalParams {
        TemporalParams {
            w0: t(rand_mat(rng, l, l, 1.0)),
            w1: t(rand_mat(rng, n, 1, 1.0)),
            w2: t(rand_mat(rng, d_e, n, 1.0)),
            w3: t(rand_mat(rng, d_e, 1, 1.0)),
            bias: t(rand_mat(rng, l, 1, 1.0)),
        }
    }

    #[test]
    fn temporal_attention_single_step_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = t(rand_mat(&mut rng, 4, 2, 1.0));
        let params = rand_temporal(&mut rng, 1, 4, 2);
        let out = temporal_attention(&[z.clone()], &params).unwrap();
        assert_eq!(out.weights.value(), &array![[1.0]]);
        assert_eq!(out.embedding.value(), z.value());
    }

    #[test]
    fn temporal_attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (l, n, d_e) = (3, 4, 2);
            let z: Vec<Tensor> = (0..l).map(|_| t(rand_mat(&mut rng, n, d_e, 2.0))).collect();
            let params = rand_temporal(&mut rng, l, n, d_e);
            let out = temporal_attention(&z, &params).unwrap();
            for row in out.weights.value().rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn temporal_attention_empty_window_is_config_error() {
        let params = rand_temporal(&mut ChaCha8Rng::seed_from_u64(0), 1, 2, 2);
        assert!(matches!(
            temporal_attention(&[], &params),
            Err(FtnError::Config(_))
        ));
    }

    // Independent re-implementation of the temporal attention with plain
    // loops over the printed contractions.
    fn temporal_oracle(
        z: &[Array2<f64>],
        w0: &Array2<f64>,
        w1: &[f64],
        w2: &Array2<f64>,
        w3: &[f64],
        bias: &[f64],
    ) -> Array2<f64> {
        let l = z.len();
        let n = z[0].nrows();
        let d_e = z[0].ncols();
        // F1[l, f] = sum_i z[l][i, f] * w1[i]
        let mut f1 = vec![vec![0.0; d_e]; l];
        let mut f2 = vec![vec![0.0; n]; l];
        for (li, zl) in z.iter().enumerate() {
            for i in 0..n {
                for f in 0..d_e {
                    f1[li][f] += zl[(i, f)] * w1[i];
                    f2[li][i] += zl[(i, f)] * w3[f];
                }
            }
        }
        // inner[a, b] = F1[a] . W2 . F2[b]
        let mut e = vec![vec![0.0; l]; l];
        for a in 0..l {
            for b in 0..l {
                let mut acc = 0.0;
                for f in 0..d_e {
                    for i in 0..n {
                        acc += f1[a][f] * w2[(f, i)] * f2[b][i];
                    }
                }
                let s = 1.0 / (1.0 + (-(acc + bias[b])).exp());
                e[a][b] = s;
            }
        }
        // E_e = W0 . sigmoid(inner), then row softmax
        let mut ee = vec![vec![0.0; l]; l];
        for a in 0..l {
            for b in 0..l {
                for k in 0..l {
                    ee[a][b] += w0[(a, k)] * e[k][b];
                }
            }
        }
        for row in ee.iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        // P[i, a*d_e + f] = sum_b E'[a, b] z[b][i, f]
        let mut p = Array2::zeros((n, l * d_e));
        for a in 0..l {
            for b in 0..l {
                for i in 0..n {
                    for f in 0..d_e {
                        p[(i, a * d_e + f)] += ee[a][b] * z[b][(i, f)];
                    }
                }
            }
        }
        p
    }

    #[test]
    fn temporal_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let (l, n, d_e) = (3, 4, 2);
            let z_arrays: Vec<Array2<f64>> =
                (0..l).map(|_| rand_mat(&mut rng, n, d_e, 1.5)).collect();
            let params = rand_temporal(&mut rng, l, n, d_e);
            let z: Vec<Tensor> = z_arrays.iter().cloned().map(t).collect();
            let out = temporal_attention(&z, &params).unwrap();
            let want = temporal_oracle(
                &z_arrays,
                params.w0.value(),
                params.w1.value().column(0).to_vec().as_slice(),
                params.w2.value(),
                params.w3.value().column(0).to_vec().as_slice(),
                params.bias.value().column(0).to_vec().as_slice(),
            );
            for (got, want) in out.embedding.value().iter().zip(want.iter()) {
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn encoder_is_node_permutation_equivariant() {
        // permuting nodes in all node-indexed inputs and parameters
        // permutes the rows of the output embedding the same way
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // one GCN channel of width 1 per half, so z has d_e = 2 columns
        let (l, n, d_e, half) = (2, 4, 2, 1);
        let perm = [2usize, 0, 3, 1];

        let h_o: Vec<Array2<f64>> = (0..l).map(|_| rand_mat(&mut rng, n, half, 1.0)).collect();
        let h_d: Vec<Array2<f64>> = (0..l).map(|_| rand_mat(&mut rng, n, half, 1.0)).collect();
        let adj: Vec<Array2<f64>> = (0..l).map(|_| rand_mat(&mut rng, n, n, 1.0)).collect();
        let channels_raw = (
            rand_mat(&mut rng, half, half, 1.0),
            rand_mat(&mut rng, n, 1, 1.0),
            rand_mat(&mut rng, half, half, 1.0),
            rand_mat(&mut rng, n, 1, 1.0),
        );
        let temporal_raw = (
            rand_mat(&mut rng, l, l, 1.0),
            rand_mat(&mut rng, n, 1, 1.0),
            rand_mat(&mut rng, d_e, n, 1.0),
            rand_mat(&mut rng, d_e, 1, 1.0),
            rand_mat(&mut rng, l, 1, 1.0),
        );

        let permute_rows = |m: &Array2<f64>| {
            let mut out = m.clone();
            for (new, &old) in perm.iter().enumerate() {
                out.row_mut(new).assign(&m.row(old));
            }
            out
        };
        let permute_cols = |m: &Array2<f64>| {
            let mut out = m.clone();
            for (new, &old) in perm.iter().enumerate() {
                out.column_mut(new).assign(&m.column(old));
            }
            out
        };
        let permute_both = |m: &Array2<f64>| permute_cols(&permute_rows(m));

        let run = |h_o: &[Array2<f64>],
                   h_d: &[Array2<f64>],
                   adj: &[Array2<f64>],
                   ch: &(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>),
                   tp: &(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)|
         -> Array2<f64> {
            let channels = vec![GcnChannelParams {
                w_origin: t(ch.0.clone()),
                b_origin: t(ch.1.clone()),
                w_dest: t(ch.2.clone()),
                b_dest: t(ch.3.clone()),
            }];
            let params = TemporalParams {
                w0: t(tp.0.clone()),
                w1: t(tp.1.clone()),
                w2: t(tp.2.clone()),
                w3: t(tp.3.clone()),
                bias: t(tp.4.clone()),
            };
            let z: Vec<Tensor> = (0..h_o.len())
                .map(|i| {
                    od_gcn_step(
                        &t(h_o[i].clone()),
                        &t(h_d[i].clone()),
                        &[t(adj[i].clone())],
                        &channels,
                    )
                    .unwrap()
                })
                .collect();
            temporal_attention(&z, &params)
                .unwrap()
                .embedding
                .value()
                .clone()
        };

        let base = run(&h_o, &h_d, &adj, &channels_raw, &temporal_raw);

        let h_o_p: Vec<_> = h_o.iter().map(&permute_rows).collect();
        let h_d_p: Vec<_> = h_d.iter().map(&permute_rows).collect();
        let adj_p: Vec<_> = adj.iter().map(&permute_both).collect();
        let ch_p = (
            channels_raw.0.clone(),
            permute_rows(&channels_raw.1),
            channels_raw.2.clone(),
            permute_rows(&channels_raw.3),
        );
        let tp_p = (
            temporal_raw.0.clone(),
            permute_rows(&temporal_raw.1),
            permute_cols(&temporal_raw.2),
            temporal_raw.3.clone(),
            temporal_raw.4.clone(),
        );
        let permuted = run(&h_o_p, &h_d_p, &adj_p, &ch_p, &tp_p);

        for (new, &old) in perm.iter().enumerate() {
            for f in 0..base.ncols() {
                assert!(
                    (permuted[(new, f)] - base[(old, f)]).abs() < 1e-12,
                    "row {new} vs {old}"
                );
            }
        }
    }

    #[test]
    fn outputs_stay_finite_for_bounded_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let (l, n, d_e, half) = (2, 3, 2, 1);
            let channels = vec![GcnChannelParams {
                w_origin: t(rand_mat(&mut rng, half, 1, 100.0)),
                b_origin: t(rand_mat(&mut rng, n, 1, 100.0)),
                w_dest: t(rand_mat(&mut rng, half, 1, 100.0)),
                b_dest: t(rand_mat(&mut rng, n, 1, 100.0)),
            }];
            let params = TemporalParams {
                w0: t(rand_mat(&mut rng, l, l, 100.0)),
                w1: t(rand_mat(&mut rng, n, 1, 100.0)),
                w2: t(rand_mat(&mut rng, d_e, n, 100.0)),
                w3: t(rand_mat(&mut rng, d_e, 1, 100.0)),
                bias: t(rand_mat(&mut rng, l, 1, 100.0)),
            };
            let z: Vec<Tensor> = (0..l)
                .map(|_| {
                    od_gcn_step(
                        &t(rand_mat(&mut rng, n, half, 100.0)),
                        &t(rand_mat(&mut rng, n, half, 100.0)),
                        &[t(rand_mat(&mut rng, n, n, 100.0))],
                        &channels,
                    )
                    .unwrap()
                })
                .collect();
            let out = temporal_attention(&z, &params).unwrap();
            assert!(out.embedding.value().iter().all(|v| v.is_finite()));
        }
    }
}
