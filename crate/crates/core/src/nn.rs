//! Neural building blocks expressed as tape subgraphs: multi-head
//! self/cross attention, skeleton and temporal graph convolutions,
//! feed-forward blocks and the three-stream token blending.

use ndarray::Array2;

use crate::error::{KasError, Result};
use crate::tape::{Tape, Var};

/// Projection parameters of one attention block.
#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Weight matrices of one graph-convolution block (Kipf-style propagation
/// with an identity path and a pre-activation layer norm).
#[derive(Clone, Copy)]
pub struct GcnVars {
    pub w1: Var,
    pub w2: Var,
    pub ln: LayerNormVars,
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

pub fn layer_norm_affine(tape: &mut Tape, x: Var, vars: &LayerNormVars) -> Result<Var> {
    let n = tape.layer_norm_rows(x);
    let g = tape.mul_row(n, vars.gain)?;
    tape.add_row(g, vars.bias)
}

/// Two-layer feed-forward with rectified-linear hidden activation.
pub fn ffn(tape: &mut Tape, x: Var, vars: &FfnVars) -> Result<Var> {
    let h = linear(tape, x, vars.w1, vars.b1)?;
    let h = tape.relu(h);
    linear(tape, h, vars.w2, vars.b2)
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(KasError::InvalidConfig(format!(
            "feature dim {d} not divisible by head count {heads}"
        )));
    }
    Ok(d / heads)
}

/// Multi-head attention where query rows and key/value rows are attended
/// within row groups. Projections are computed once on the full matrices;
/// each `(q_rows, kv_rows)` pair then attends independently. The output
/// keeps the original row order of `q_src`.
///
/// Returns the output together with the attention-weight nodes (one per
/// group and head), each a row-stochastic matrix.
pub fn grouped_attention(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    vars: &AttnVars,
    heads: usize,
    groups: &[(Vec<usize>, Vec<usize>)],
) -> Result<(Var, Vec<Var>)> {
    let (n_q, d) = tape.shape(q_src);
    let d_k = check_heads(d, heads)?;
    if tape.shape(kv_src).1 != d {
        return Err(KasError::ShapeMismatch {
            expected: format!("kv feature dim {d}"),
            got: format!("{}", tape.shape(kv_src).1),
        });
    }

    let q = linear(tape, q_src, vars.wq, vars.bq)?;
    let k = linear(tape, kv_src, vars.wk, vars.bk)?;
    let v = linear(tape, kv_src, vars.wv, vars.bv)?;

    let scale = 1.0 / (d_k as f64).sqrt();
    let mut outputs = Vec::with_capacity(groups.len());
    let mut weights = Vec::new();
    let mut order = Vec::with_capacity(n_q);
    for (q_rows, kv_rows) in groups {
        order.extend_from_slice(q_rows);
        let qg = tape.gather_rows(q, q_rows.clone())?;
        let kg = tape.gather_rows(k, kv_rows.clone())?;
        let vg = tape.gather_rows(v, kv_rows.clone())?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(qg, h * d_k, d_k)?;
            let kh = tape.slice_cols(kg, h * d_k, d_k)?;
            let vh = tape.slice_cols(vg, h * d_k, d_k)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled);
            weights.push(attn);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        outputs.push(tape.concat_cols(&head_outs)?);
    }
    let stacked = tape.concat_rows(&outputs)?;
    if order.len() != n_q {
        return Err(KasError::ShapeMismatch {
            expected: format!("groups covering {n_q} query rows"),
            got: format!("{} rows", order.len()),
        });
    }
    let identity = order.iter().enumerate().all(|(i, &r)| i == r);
    let restored = if identity {
        stacked
    } else {
        let mut inverse = vec![0usize; n_q];
        for (pos, &row) in order.iter().enumerate() {
            inverse[row] = pos;
        }
        tape.gather_rows(stacked, inverse)?
    };
    let out = linear(tape, restored, vars.wo, vars.bo)?;
    Ok((out, weights))
}

/// Standard multi-head self-attention over N x d tokens.
pub fn mhsa(tape: &mut Tape, x: Var, vars: &AttnVars, heads: usize) -> Result<(Var, Vec<Var>)> {
    let n = tape.shape(x).0;
    let all: Vec<usize> = (0..n).collect();
    grouped_attention(tape, x, x, vars, heads, &[(all.clone(), all)])
}

/// Multi-head cross-attention: queries from `q`, keys and values from `kv`.
pub fn mhca(
    tape: &mut Tape,
    q: Var,
    kv: Var,
    vars: &AttnVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let nq = tape.shape(q).0;
    let nkv = tape.shape(kv).0;
    grouped_attention(
        tape,
        q,
        kv,
        vars,
        heads,
        &[((0..nq).collect(), (0..nkv).collect())],
    )
}

/// D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
/// Rejects asymmetric adjacency.
pub fn normalized_adjacency(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = a.dim();
    if n != m {
        return Err(KasError::ShapeMismatch {
            expected: "square adjacency".into(),
            got: format!("{n}x{m}"),
        });
    }
    for i in 0..n {
        for j in 0..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 0.0 {
                return Err(KasError::InvalidConfig(format!(
                    "adjacency not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let mut tilde = a.clone();
    for i in 0..n {
        tilde[(i, i)] += 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| tilde.row(i).sum()).collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = tilde[(i, j)] / (deg[i].sqrt() * deg[j].sqrt());
        }
    }
    Ok(out)
}

/// relu(H + LN(S H W1 + H W2)) where S is the normalized self-connected
/// adjacency.
pub fn gcn_propagate(tape: &mut Tape, h: Var, s: Var, vars: &GcnVars) -> Result<Var> {
    let hw1 = tape.matmul(h, vars.w1)?;
    let hw2 = tape.matmul(h, vars.w2)?;
    gcn_propagate_projected(tape, h, hw1, hw2, s, &vars.ln)
}

/// Propagation step when H W1 and H W2 were already computed (lets callers
/// batch the projections across frames or joints).
pub fn gcn_propagate_projected(
    tape: &mut Tape,
    h: Var,
    hw1: Var,
    hw2: Var,
    s: Var,
    ln: &LayerNormVars,
) -> Result<Var> {
    let mixed = tape.matmul(s, hw1)?;
    let inner = tape.add(mixed, hw2)?;
    let normed = layer_norm_affine(tape, inner, ln)?;
    let res = tape.add(h, normed)?;
    Ok(tape.relu(res))
}

/// Spatial graph convolution over skeleton joints.
pub fn gcn_spatial(
    tape: &mut Tape,
    h: Var,
    adjacency: &Array2<f64>,
    vars: &GcnVars,
) -> Result<Var> {
    let s = normalized_adjacency(adjacency)?;
    if s.dim().0 != tape.shape(h).0 {
        return Err(KasError::ShapeMismatch {
            expected: format!("{} tokens", s.dim().0),
            got: format!("{}", tape.shape(h).0),
        });
    }
    let s = tape.constant(s);
    gcn_propagate(tape, h, s, vars)
}

/// Binary frame-similarity adjacency: every frame connects to its `k` most
/// similar other frames by feature dot product (ties broken toward the
/// lower frame index), then the edge set is symmetrized. No self-loops;
/// those are added during normalization.
pub fn topk_adjacency(features: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let t = features.dim().0;
    if k == 0 || k >= t {
        return Err(KasError::InvalidConfig(format!(
            "temporal neighbour count k = {k} must satisfy 1 <= k < T = {t}"
        )));
    }
    let sim = features.dot(&features.t());
    let mut a = Array2::zeros((t, t));
    for i in 0..t {
        let mut others: Vec<usize> = (0..t).filter(|&j| j != i).collect();
        others.sort_by(|&x, &y| {
            sim[(i, y)]
                .partial_cmp(&sim[(i, x)])
                .unwrap()
                .then(x.cmp(&y))
        });
        for &j in others.iter().take(k) {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    Ok(a)
}

/// Temporal graph convolution over the frames of one token: the adjacency
/// is rebuilt from the current forward values (the top-k selection itself
/// is not differentiated through).
pub fn gcn_temporal(tape: &mut Tape, h: Var, k: usize, vars: &GcnVars) -> Result<Var> {
    let a = topk_adjacency(tape.value(h), k)?;
    let s = normalized_adjacency(&a)?;
    let s = tape.constant(s);
    gcn_propagate(tape, h, s, vars)
}

/// Per-position convex blending of three stream outputs. The weights come
/// from a linear map over the concatenated streams followed by a softmax.
/// Returns the blended output and the n x 3 weight matrix.
pub fn blend3(
    tape: &mut Tape,
    h1: Var,
    h2: Var,
    h3: Var,
    w: Var,
) -> Result<(Var, Var)> {
    let cat = tape.concat_cols(&[h1, h2, h3])?;
    let logits = tape.matmul(cat, w)?;
    if tape.shape(logits).1 != 3 {
        return Err(KasError::ShapeMismatch {
            expected: "blend map with 3 outputs".into(),
            got: format!("{}", tape.shape(logits).1),
        });
    }
    let alphas = tape.softmax_rows(logits);
    let a1 = tape.slice_cols(alphas, 0, 1)?;
    let a2 = tape.slice_cols(alphas, 1, 1)?;
    let a3 = tape.slice_cols(alphas, 2, 1)?;
    let p1 = tape.scale_rows(h1, a1)?;
    let p2 = tape.scale_rows(h2, a2)?;
    let p3 = tape.scale_rows(h3, a3)?;
    let sum = tape.add(p1, p2)?;
    let blended = tape.add(sum, p3)?;
    Ok((blended, alphas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_attn(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize) -> AttnVars {
        AttnVars {
            wq: tape.constant(rand_mat(rng, d, d)),
            bq: tape.constant(rand_mat(rng, 1, d)),
            wk: tape.constant(rand_mat(rng, d, d)),
            bk: tape.constant(rand_mat(rng, 1, d)),
            wv: tape.constant(rand_mat(rng, d, d)),
            bv: tape.constant(rand_mat(rng, 1, d)),
            wo: tape.constant(rand_mat(rng, d, d)),
            bo: tape.constant(rand_mat(rng, 1, d)),
        }
    }

    /// Straight-line per-head attention, no tape.
    fn naive_attention(
        q_tokens: &Array2<f64>,
        kv_tokens: &Array2<f64>,
        tape: &Tape,
        vars: &AttnVars,
        heads: usize,
    ) -> Array2<f64> {
        let d = q_tokens.dim().1;
        let d_k = d / heads;
        let proj = |x: &Array2<f64>, w: Var, b: Var| {
            x.dot(tape.value(w)) + &tape.value(b).row(0)
        };
        let q = proj(q_tokens, vars.wq, vars.bq);
        let k = proj(kv_tokens, vars.wk, vars.bk);
        let v = proj(kv_tokens, vars.wv, vars.bv);
        let n_q = q_tokens.dim().0;
        let n_kv = kv_tokens.dim().0;
        let mut out = Array2::zeros((n_q, d));
        for h in 0..heads {
            for i in 0..n_q {
                let mut scores = vec![0.0; n_kv];
                for (j, score) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..d_k {
                        dot += q[(i, h * d_k + c)] * k[(j, h * d_k + c)];
                    }
                    *score = dot / (d_k as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for c in 0..d_k {
                        out[(i, h * d_k + c)] += e / sum * v[(j, h * d_k + c)];
                    }
                }
            }
        }
        out.dot(tape.value(vars.wo)) + &tape.value(vars.bo).row(0)
    }

    #[test]
    fn mhsa_single_token_is_projection_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let vars = rand_attn(&mut tape, &mut rng, 8);
        let token = rand_mat(&mut rng, 1, 8);
        let x = tape.constant(token.clone());
        let (out, weights) = mhsa(&mut tape, x, &vars, 2).unwrap();
        // attention weight exactly 1
        for &w in &weights {
            assert_eq!(tape.value(w)[(0, 0)], 1.0);
        }
        let v = token.dot(tape.value(vars.wv)) + &tape.value(vars.bv).row(0);
        let expect = v.dot(tape.value(vars.wo)) + &tape.value(vars.bo).row(0);
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_identical_tokens_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut tape = Tape::new();
        let vars = rand_attn(&mut tape, &mut rng, 8);
        let row = rand_mat(&mut rng, 1, 8);
        let mut tokens = Array2::zeros((2, 8));
        tokens.row_mut(0).assign(&row.row(0));
        tokens.row_mut(1).assign(&row.row(0));
        let x = tape.constant(tokens);
        let (out, _) = mhsa(&mut tape, x, &vars, 4).unwrap();
        let o = tape.value(out);
        for c in 0..8 {
            assert!((o[(0, c)] - o[(1, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tape = Tape::new();
        let vars = rand_attn(&mut tape, &mut rng, 16);
        let tokens = rand_mat(&mut rng, 4, 16);
        let x = tape.constant(tokens.clone());
        let (out, weights) = mhsa(&mut tape, x, &vars, 2).unwrap();
        let expect = naive_attention(&tokens, &tokens, &tape, &vars, 2);
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for &w in &weights {
            for row in tape.value(w).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mhca_with_tied_inputs_equals_mhsa() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut tape = Tape::new();
        let vars = rand_attn(&mut tape, &mut rng, 8);
        let tokens = rand_mat(&mut rng, 5, 8);
        let x = tape.constant(tokens.clone());
        let (self_out, _) = mhsa(&mut tape, x, &vars, 2).unwrap();
        let (cross_out, _) = mhca(&mut tape, x, x, &vars, 2).unwrap();
        assert_eq!(tape.value(self_out), tape.value(cross_out));
    }

    #[test]
    fn mhca_single_kv_token_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut tape = Tape::new();
        let vars = rand_attn(&mut tape, &mut rng, 8);
        let q = tape.constant(rand_mat(&mut rng, 3, 8));
        let kv = tape.constant(rand_mat(&mut rng, 1, 8));
        let (_, weights) = mhca(&mut tape, q, kv, &vars, 2).unwrap();
        for &w in &weights {
            for row in tape.value(w).rows() {
                assert_eq!(row[0], 1.0);
            }
        }
    }

    #[test]
    fn mhca_matches_naive_oracle_on_different_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut tape = Tape::new();
        let vars = rand_attn(&mut tape, &mut rng, 16);
        let q_tokens = rand_mat(&mut rng, 5, 16);
        let kv_tokens = rand_mat(&mut rng, 3, 16);
        let q = tape.constant(q_tokens.clone());
        let kv = tape.constant(kv_tokens.clone());
        let (out, _) = mhca(&mut tape, q, kv, &vars, 2).unwrap();
        let expect = naive_attention(&q_tokens, &kv_tokens, &tape, &vars, 2);
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn head_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut tape = Tape::new();
        let vars = rand_attn(&mut tape, &mut rng, 10);
        let x = tape.constant(rand_mat(&mut rng, 3, 10));
        assert!(mhsa(&mut tape, x, &vars, 3).is_err());
    }

    #[test]
    fn two_node_path_normalization() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let s = normalized_adjacency(&a).unwrap();
        for &v in &s {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let a = array![[0.0, 1.0], [0.0, 0.0]];
        assert!(normalized_adjacency(&a).is_err());
    }

    #[test]
    fn gcn_zero_weights_zero_affine_collapses_to_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let j = 4;
        let d = 6;
        let mut tape = Tape::new();
        let vars = GcnVars {
            w1: tape.constant(Array2::zeros((d, d))),
            w2: tape.constant(Array2::zeros((d, d))),
            ln: LayerNormVars {
                gain: tape.constant(Array2::zeros((1, d))),
                bias: tape.constant(Array2::zeros((1, d))),
            },
        };
        let h_val = rand_mat(&mut rng, j, d);
        let h = tape.constant(h_val.clone());
        let a = Array2::zeros((j, j));
        let out = gcn_spatial(&mut tape, h, &a, &vars).unwrap();
        for (o, &x) in tape.value(out).iter().zip(h_val.iter()) {
            assert!((o - x.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let topo = crate::pose::SkeletonTopology::default17();
        let a = topo.adjacency();
        let d = 5;
        let mut tape = Tape::new();
        let w1 = rand_mat(&mut rng, d, d);
        let w2 = rand_mat(&mut rng, d, d);
        let gain = rand_mat(&mut rng, 1, d);
        let bias = rand_mat(&mut rng, 1, d);
        let vars = GcnVars {
            w1: tape.constant(w1.clone()),
            w2: tape.constant(w2.clone()),
            ln: LayerNormVars {
                gain: tape.constant(gain.clone()),
                bias: tape.constant(bias.clone()),
            },
        };
        let h_val = rand_mat(&mut rng, 17, d);
        let h = tape.constant(h_val.clone());
        let out = gcn_spatial(&mut tape, h, &a, &vars).unwrap();

        // dense oracle
        let s = normalized_adjacency(&a).unwrap();
        let inner = s.dot(&h_val.dot(&w1)) + h_val.dot(&w2);
        let mut normed = inner.clone();
        for mut row in normed.rows_mut() {
            let m = row.len() as f64;
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let sigma = (var + crate::tape::LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / sigma);
        }
        let affine = &normed * &gain.row(0) + &bias.row(0);
        let expect = (&h_val + &affine).mapv(|v| v.max(0.0));
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gcn_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let topo = crate::pose::SkeletonTopology::default17();
        let a = topo.adjacency();
        let d = 4;
        let perm: Vec<usize> = {
            // a graph automorphism of the skeleton: the mirror map
            (0..17).map(|j| topo.mirror(j)).collect()
        };
        let w1 = rand_mat(&mut rng, d, d);
        let w2 = rand_mat(&mut rng, d, d);
        let gain = rand_mat(&mut rng, 1, d);
        let bias = rand_mat(&mut rng, 1, d);
        let h_val = rand_mat(&mut rng, 17, d);

        let run = |h_in: &Array2<f64>, adj: &Array2<f64>| {
            let mut tape = Tape::new();
            let vars = GcnVars {
                w1: tape.constant(w1.clone()),
                w2: tape.constant(w2.clone()),
                ln: LayerNormVars {
                    gain: tape.constant(gain.clone()),
                    bias: tape.constant(bias.clone()),
                },
            };
            let h = tape.constant(h_in.clone());
            let out = gcn_spatial(&mut tape, h, adj, &vars).unwrap();
            tape.value(out).clone()
        };

        let base = run(&h_val, &a);
        let mut h_perm = Array2::zeros((17, d));
        let mut a_perm = Array2::zeros((17, 17));
        for i in 0..17 {
            h_perm.row_mut(perm[i]).assign(&h_val.row(i));
            for j in 0..17 {
                a_perm[(perm[i], perm[j])] = a[(i, j)];
            }
        }
        let permuted = run(&h_perm, &a_perm);
        for i in 0..17 {
            for c in 0..d {
                assert!((permuted[(perm[i], c)] - base[(i, c)]).abs() < 1e-9);
            }
        }
    }

    /// Brute-force similarity-sort oracle for the temporal adjacency.
    fn topk_oracle(features: &Array2<f64>, k: usize) -> Array2<f64> {
        let t = features.dim().0;
        let mut a = Array2::zeros((t, t));
        for i in 0..t {
            let mut scored: Vec<(usize, f64)> = (0..t)
                .filter(|&j| j != i)
                .map(|j| {
                    let dot = features
                        .row(i)
                        .iter()
                        .zip(features.row(j).iter())
                        .map(|(x, y)| x * y)
                        .sum::<f64>();
                    (j, dot)
                })
                .collect();
            scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            for &(j, _) in scored.iter().take(k) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
        a
    }

    #[test]
    fn topk_two_frames_complete_graph() {
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let a = topk_adjacency(&f, 1).unwrap();
        assert_eq!(a, array![[0.0, 1.0], [1.0, 0.0]]);
        let s = normalized_adjacency(&a).unwrap();
        for &v in &s {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn topk_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let t = rng.gen_range(3..=8);
            let k = rng.gen_range(1..t);
            let f = rand_mat(&mut rng, t, 4);
            assert_eq!(topk_adjacency(&f, k).unwrap(), topk_oracle(&f, k));
        }
    }

    #[test]
    fn topk_rejects_k_out_of_range() {
        let f = Array2::zeros((3, 2));
        assert!(topk_adjacency(&f, 3).is_err());
        assert!(topk_adjacency(&f, 0).is_err());
    }

    #[test]
    fn gcn_temporal_identical_frames_tie_break_structure() {
        // all-equal frames: every node prefers the lowest indices, so after
        // symmetrization frames 3..5 share the neighbour set {0, 1} and must
        // produce identical rows
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let d = 4;
        let row = rand_mat(&mut rng, 1, d);
        let mut frames = Array2::zeros((6, d));
        for mut r in frames.rows_mut() {
            r.assign(&row.row(0));
        }
        let a = topk_adjacency(&frames, 2).unwrap();
        for i in 3..6 {
            assert_eq!(a[(i, 0)], 1.0);
            assert_eq!(a[(i, 1)], 1.0);
            for j in 2..6 {
                assert_eq!(a[(i, j)], 0.0);
            }
        }
        let mut tape = Tape::new();
        let vars = GcnVars {
            w1: tape.constant(rand_mat(&mut rng, d, d)),
            w2: tape.constant(rand_mat(&mut rng, d, d)),
            ln: LayerNormVars {
                gain: tape.constant(rand_mat(&mut rng, 1, d)),
                bias: tape.constant(rand_mat(&mut rng, 1, d)),
            },
        };
        let h = tape.constant(frames);
        let out = gcn_temporal(&mut tape, h, 2, &vars).unwrap();
        let o = tape.value(out);
        for i in 4..6 {
            for c in 0..d {
                assert!((o[(i, c)] - o[(3, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_temporal_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let d = 4;
        let frames = rand_mat(&mut rng, 6, d);
        let w1 = rand_mat(&mut rng, d, d);
        let w2 = rand_mat(&mut rng, d, d);
        let gain = rand_mat(&mut rng, 1, d);
        let bias = rand_mat(&mut rng, 1, d);
        let mut tape = Tape::new();
        let vars = GcnVars {
            w1: tape.constant(w1.clone()),
            w2: tape.constant(w2.clone()),
            ln: LayerNormVars {
                gain: tape.constant(gain.clone()),
                bias: tape.constant(bias.clone()),
            },
        };
        let h = tape.constant(frames.clone());
        let out = gcn_temporal(&mut tape, h, 2, &vars).unwrap();

        let a = topk_oracle(&frames, 2);
        let s = normalized_adjacency(&a).unwrap();
        let inner = s.dot(&frames.dot(&w1)) + frames.dot(&w2);
        let mut normed = inner;
        for mut row in normed.rows_mut() {
            let m = row.len() as f64;
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let sigma = (var + crate::tape::LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / sigma);
        }
        let affine = &normed * &gain.row(0) + &bias.row(0);
        let expect = (&frames + &affine).mapv(|v| v.max(0.0));
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn blending_of_equal_streams_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let d = 6;
        let mut tape = Tape::new();
        let h_val = rand_mat(&mut rng, 5, d);
        let h1 = tape.constant(h_val.clone());
        let h2 = tape.constant(h_val.clone());
        let h3 = tape.constant(h_val.clone());
        let w = tape.constant(rand_mat(&mut rng, 3 * d, 3));
        let (blended, _) = blend3(&mut tape, h1, h2, h3, w).unwrap();
        for (a, b) in tape.value(blended).iter().zip(h_val.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blending_weights_are_positive_and_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let d = 6;
        let mut tape = Tape::new();
        let h1 = tape.constant(rand_mat(&mut rng, 5, d));
        let h2 = tape.constant(rand_mat(&mut rng, 5, d));
        let h3 = tape.constant(rand_mat(&mut rng, 5, d));
        let w = tape.constant(rand_mat(&mut rng, 3 * d, 3));
        let (_, alphas) = blend3(&mut tape, h1, h2, h3, w).unwrap();
        for row in tape.value(alphas).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}
