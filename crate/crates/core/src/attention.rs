//! Multi-headed self-attention and the three transformer layer variants.
//!
//! Every function here works on tape variables with arbitrary leading
//! (batch) axes; attention always runs over the second-to-last axis.

use crate::error::{Error, Result};
use crate::tensor::{ops::LAYERNORM_EPS, Scalar, Tape, Var};
use crate::tokenizer::Grid;

/// `x · W + b` with `W` shaped `[d_in, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormWeights {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormWeights {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layernorm(x, self.gamma, self.beta, LAYERNORM_EPS)
    }
}

/// Query/key/value/output projections of one MSA block.
#[derive(Clone, Copy, Debug)]
pub struct MsaWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Two-layer perceptron `d → 4d → d` with GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct MlpWeights {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// One pre-norm encoder layer; `temporal` is only present for
/// factorised self-attention layers.
#[derive(Clone, Copy, Debug)]
pub struct TransformerLayerWeights {
    pub ln1: LayerNormWeights,
    pub msa: MsaWeights,
    pub temporal: Option<(LayerNormWeights, MsaWeights)>,
    pub ln2: LayerNormWeights,
    pub mlp: MlpWeights,
}

fn head_dim<T: Scalar>(tape: &Tape<T>, x: Var, heads: usize) -> Result<usize> {
    let d = *tape.shape(x).last().expect("rank >= 1");
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// `[.., N, d]` → `[.., heads, N, d/heads]`
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let dk = head_dim(tape, x, heads)?;
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    let mut split = shape[..r - 1].to_vec();
    split.extend([heads, dk]);
    let x = tape.reshape(x, &split)?;
    let mut perm: Vec<usize> = (0..r + 1).collect();
    perm.swap(r - 2, r - 1);
    tape.permute(x, &perm)
}

/// `[.., heads, N, dk]` → `[.., N, heads·dk]`
fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 3, r - 2);
    let x = tape.permute(x, &perm)?;
    let mut merged = shape[..r - 3].to_vec();
    merged.extend([shape[r - 2], shape[r - 3] * shape[r - 1]]);
    tape.reshape(x, &merged)
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / √d_k)`.
pub fn attention_weights<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var) -> Result<Var> {
    let dk = *tape.shape(q).last().expect("rank >= 1");
    if tape.shape(k).last() != Some(&dk) {
        return Err(Error::shape("attention", tape.shape(q), tape.shape(k)));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::one() / T::of(dk as f64).sqrt())?;
    tape.softmax(scores)
}

/// `softmax(Q Kᵀ / √d_k) V` over the last two axes.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_with_weights(tape, q, k, v).map(|(out, _)| out)
}

/// As [`attention`], also returning the weight matrix for inspection.
pub fn attention_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    if tape.shape(k) != tape.shape(v) {
        return Err(Error::shape("attention", tape.shape(k), tape.shape(v)));
    }
    let w = attention_weights(tape, q, k)?;
    Ok((tape.matmul(w, v)?, w))
}

/// Multi-headed self-attention over the second-to-last axis of `x`.
pub fn msa<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &MsaWeights) -> Result<Var> {
    head_dim(tape, x, w.heads)?;
    let q = w.query.apply(tape, x)?;
    let k = w.key.apply(tape, x)?;
    let v = w.value.apply(tape, x)?;
    let q = split_heads(tape, q, w.heads)?;
    let k = split_heads(tape, k, w.heads)?;
    let v = split_heads(tape, v, w.heads)?;
    let y = attention(tape, q, k, v)?;
    let y = merge_heads(tape, y)?;
    w.out.apply(tape, y)
}

fn mlp_block<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &TransformerLayerWeights) -> Result<Var> {
    let h = w.ln2.apply(tape, x)?;
    let h = w.mlp.fc1.apply(tape, h)?;
    let h = tape.gelu(h)?;
    let h = w.mlp.fc2.apply(tape, h)?;
    tape.add(h, x)
}

/// `y = MSA(LN(z)) + z; out = MLP(LN(y)) + y`
pub fn transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    w: &TransformerLayerWeights,
) -> Result<Var> {
    let h = w.ln1.apply(tape, z)?;
    let h = msa(tape, h, &w.msa)?;
    let y = tape.add(h, z)?;
    mlp_block(tape, y, w)
}

/// Permutation swapping the axes holding `nt` and `nh·nw` in `[.., nt, S, d]`.
fn swap_time_space(rank: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 3, rank - 2);
    perm
}

/// Spatial MSA within each frame, then temporal MSA within each spatial
/// site, then the MLP. `z` is `[.., nt, nh·nw, d]`.
///
/// With `skip_temporal` the temporal sub-block is bypassed entirely, which
/// is what a zero-initialised temporal MSA must reproduce.
pub fn factorised_sa_layer<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    w: &TransformerLayerWeights,
    skip_temporal: bool,
) -> Result<Var> {
    let (ln_t, msa_t) = w.temporal.ok_or_else(|| {
        Error::Config("factorised self-attention layer needs temporal MSA weights".into())
    })?;
    if tape.shape(z).len() < 3 {
        return Err(Error::invalid(
            "factorised_sa_layer",
            format!("expected [.., nt, nh·nw, d], got {:?}", tape.shape(z)),
        ));
    }
    let h = w.ln1.apply(tape, z)?;
    let h = msa(tape, h, &w.msa)?;
    let ys = tape.add(h, z)?;

    let yt = if skip_temporal {
        ys
    } else {
        let perm = swap_time_space(tape.shape(ys).len());
        let zt = tape.permute(ys, &perm)?;
        let h = ln_t.apply(tape, zt)?;
        let h = msa(tape, h, &msa_t)?;
        let h = tape.permute(h, &perm)?;
        tape.add(h, ys)?
    };
    mlp_block(tape, yt, w)
}

/// Half of the heads attend within the query's frame, the other half along
/// the query's temporal tube. `z` is `[.., N, d]` with `N = nt·nh·nw` in
/// grid order; the head outputs are concatenated in head order before the
/// shared output projection, so the layer has exactly the parameters of an
/// unfactorised layer.
pub fn factorised_dot_layer<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    grid: Grid,
    w: &TransformerLayerWeights,
) -> Result<Var> {
    let heads = w.msa.heads;
    if heads % 2 != 0 {
        return Err(Error::Config(format!(
            "factorised dot-product attention needs an even head count, got {heads}"
        )));
    }
    let shape = tape.shape(z).to_vec();
    let r = shape.len();
    if r < 2 || shape[r - 2] != grid.len() {
        return Err(Error::shape("factorised_dot_layer", &shape, &[grid.len()]));
    }
    let d = shape[r - 1];
    let dk = head_dim(tape, z, heads)?;
    let lead = &shape[..r - 2];
    let l = lead.len();
    let half = heads / 2;

    let h = w.ln1.apply(tape, z)?;
    // [lead, nt, S, heads, dk]
    let mut split = lead.to_vec();
    split.extend([grid.nt, grid.spatial(), heads, dk]);
    let project = |tape: &mut Tape<T>, lin: &Linear| -> Result<Var> {
        let p = lin.apply(tape, h)?;
        tape.reshape(p, &split)
    };
    let q = project(tape, &w.msa.query)?;
    let k = project(tape, &w.msa.key)?;
    let v = project(tape, &w.msa.value)?;

    let head_axis = l + 2;
    // spatial heads: [lead, nt, half, S, dk]
    let mut to_spatial: Vec<usize> = (0..l + 4).collect();
    to_spatial.swap(l + 1, l + 2);
    // temporal heads: [lead, S, half, nt, dk]
    let mut to_temporal: Vec<usize> = (0..l).collect();
    to_temporal.extend([l + 1, l + 2, l, l + 3]);
    let from_temporal = crate::tensor::ops::inverse_permutation(&to_temporal);

    let run = |tape: &mut Tape<T>, start: usize, perm: &[usize], back: &[usize]| -> Result<Var> {
        let mut pick = |x: Var| -> Result<Var> {
            let s = tape.slice(x, head_axis, start, half)?;
            tape.permute(s, perm)
        };
        let (qs, ks, vs) = (pick(q)?, pick(k)?, pick(v)?);
        let y = attention(tape, qs, ks, vs)?;
        tape.permute(y, back)
    };
    let ys = run(tape, 0, &to_spatial, &to_spatial)?;
    let yt = run(tape, half, &to_temporal, &from_temporal)?;

    let y = tape.concat(&[ys, yt], head_axis)?;
    let mut merged = lead.to_vec();
    merged.extend([grid.len(), d]);
    let y = tape.reshape(y, &merged)?;
    let y = w.msa.out.apply(tape, y)?;
    let y = tape.add(y, z)?;
    mlp_block(tape, y, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{RngState, Tensor};

    fn rand(tape: &mut Tape<f64>, shape: &[usize], rng: &mut RngState) -> Var {
        tape.param(Tensor::random_uniform(shape.to_vec(), -1.0, 1.0, rng))
    }

    fn linear(tape: &mut Tape<f64>, i: usize, o: usize, rng: &mut RngState) -> Linear {
        Linear {
            weight: rand(tape, &[i, o], rng),
            bias: rand(tape, &[o], rng),
        }
    }

    fn msa_weights(tape: &mut Tape<f64>, d: usize, heads: usize, rng: &mut RngState) -> MsaWeights {
        MsaWeights {
            query: linear(tape, d, d, rng),
            key: linear(tape, d, d, rng),
            value: linear(tape, d, d, rng),
            out: linear(tape, d, d, rng),
            heads,
        }
    }

    fn ln(tape: &mut Tape<f64>, d: usize, rng: &mut RngState) -> LayerNormWeights {
        LayerNormWeights {
            gamma: rand(tape, &[d], rng),
            beta: rand(tape, &[d], rng),
        }
    }

    fn layer(tape: &mut Tape<f64>, d: usize, heads: usize, temporal: bool, rng: &mut RngState) -> TransformerLayerWeights {
        TransformerLayerWeights {
            ln1: ln(tape, d, rng),
            msa: msa_weights(tape, d, heads, rng),
            temporal: temporal.then(|| (ln(tape, d, rng), msa_weights(tape, d, heads, rng))),
            ln2: ln(tape, d, rng),
            mlp: MlpWeights {
                fc1: linear(tape, d, 4 * d, rng),
                fc2: linear(tape, 4 * d, d, rng),
            },
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = RngState::new(0);
        let mut tape = Tape::new();
        let q = rand(&mut tape, &[3, 2], &mut rng);
        let k = rand(&mut tape, &[1, 2], &mut rng);
        let v = rand(&mut tape, &[1, 2], &mut rng);
        let y = attention(&mut tape, q, k, v).unwrap();
        let vv = tape.value(v).data().to_vec();
        for row in tape.value(y).data().chunks(2) {
            assert!((row[0] - vv[0]).abs() < 1e-12 && (row[1] - vv[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_averages_values() {
        let mut rng = RngState::new(1);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros([2, 3]));
        let k = rand(&mut tape, &[4, 3], &mut rng);
        let v = rand(&mut tape, &[4, 3], &mut rng);
        let y = attention(&mut tape, q, k, v).unwrap();
        let vv = tape.value(v).clone();
        for row in tape.value(y).data().chunks(3) {
            for c in 0..3 {
                let mean: f64 = (0..4).map(|r| vv.at(&[r, c])).sum::<f64>() / 4.0;
                assert!((row[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_rows_are_stochastic() {
        let mut rng = RngState::new(2);
        let mut tape = Tape::new();
        let q = rand(&mut tape, &[2, 5, 4], &mut rng);
        let k = rand(&mut tape, &[2, 7, 4], &mut rng);
        let v = rand(&mut tape, &[2, 7, 4], &mut rng);
        let (_, w) = attention_with_weights(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.shape(w), &[2, 5, 7]);
        for row in tape.value(w).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_key_width_is_rejected() {
        let mut rng = RngState::new(3);
        let mut tape = Tape::new();
        let q = rand(&mut tape, &[2, 4], &mut rng);
        let k = rand(&mut tape, &[2, 3], &mut rng);
        assert!(attention(&mut tape, q, k, k).is_err());
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let mut rng = RngState::new(4);
        let mut tape = Tape::new();
        let x = rand(&mut tape, &[3, 6], &mut rng);
        let w = msa_weights(&mut tape, 6, 4, &mut rng);
        assert!(matches!(msa(&mut tape, x, &w), Err(Error::Config(_))));
    }

    #[test]
    fn single_head_is_projected_attention() {
        let mut rng = RngState::new(5);
        let mut tape = Tape::new();
        let x = rand(&mut tape, &[4, 6], &mut rng);
        let w = msa_weights(&mut tape, 6, 1, &mut rng);
        let y = msa(&mut tape, x, &w).unwrap();
        let q = w.query.apply(&mut tape, x).unwrap();
        let k = w.key.apply(&mut tape, x).unwrap();
        let v = w.value.apply(&mut tape, x).unwrap();
        let a = attention(&mut tape, q, k, v).unwrap();
        let expect = w.out.apply(&mut tape, a).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(expect)) < 1e-12);
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let mut rng = RngState::new(6);
        let mut tape = Tape::new();
        let xv = Tensor::random_uniform([5, 8], -1.0, 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_fn([5, 8], |i| xv.data()[perm[i / 8] * 8 + i % 8]);
        let w = msa_weights(&mut tape, 8, 2, &mut rng);
        let x = tape.constant(xv);
        let x2 = tape.constant(xp);
        let y = msa(&mut tape, x, &w).unwrap();
        let y2 = msa(&mut tape, x2, &w).unwrap();
        let (y, y2) = (tape.value(y).clone(), tape.value(y2));
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((y2.at(&[i, c]) - y.at(&[p, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_identity() {
        let mut rng = RngState::new(7);
        let mut tape = Tape::new();
        let mut zero = |s: &[usize]| tape.param(Tensor::zeros(s.to_vec()));
        let lin = |zero: &mut dyn FnMut(&[usize]) -> Var, i: usize, o: usize| Linear {
            weight: zero(&[i, o]),
            bias: zero(&[o]),
        };
        let norm = LayerNormWeights { gamma: zero(&[8]), beta: zero(&[8]) };
        let w = TransformerLayerWeights {
            ln1: norm,
            msa: MsaWeights {
                query: lin(&mut zero, 8, 8),
                key: lin(&mut zero, 8, 8),
                value: lin(&mut zero, 8, 8),
                out: lin(&mut zero, 8, 8),
                heads: 2,
            },
            temporal: None,
            ln2: norm,
            mlp: MlpWeights { fc1: lin(&mut zero, 8, 32), fc2: lin(&mut zero, 32, 8) },
        };
        let z = rand(&mut tape, &[2, 3, 8], &mut rng);
        let out = transformer_layer(&mut tape, z, &w).unwrap();
        assert_eq!(tape.value(out), tape.value(z));
    }

    #[test]
    fn layer_preserves_shape() {
        let mut rng = RngState::new(8);
        let mut tape = Tape::new();
        let w = layer(&mut tape, 8, 2, true, &mut rng);
        for n in [1, 3, 6] {
            let z = rand(&mut tape, &[n, 8], &mut rng);
            let y = transformer_layer(&mut tape, z, &w).unwrap();
            assert_eq!(tape.shape(y), &[n, 8]);
        }
        let z = rand(&mut tape, &[2, 3, 4, 8], &mut rng);
        let y = factorised_sa_layer(&mut tape, z, &w, false).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 4, 8]);
        let grid = Grid { nt: 3, nh: 2, nw: 2 };
        let z = rand(&mut tape, &[2, 12, 8], &mut rng);
        let y = factorised_dot_layer(&mut tape, z, grid, &w).unwrap();
        assert_eq!(tape.shape(y), &[2, 12, 8]);
    }

    #[test]
    fn zero_temporal_msa_is_a_residual() {
        let mut rng = RngState::new(9);
        let mut tape = Tape::new();
        let mut w = layer(&mut tape, 8, 2, true, &mut rng);
        let zero = |tape: &mut Tape<f64>, s: &[usize]| tape.param(Tensor::zeros(s.to_vec()));
        let (ln_t, mut m) = w.temporal.unwrap();
        for lin in [&mut m.query, &mut m.key, &mut m.value, &mut m.out] {
            *lin = Linear { weight: zero(&mut tape, &[8, 8]), bias: zero(&mut tape, &[8]) };
        }
        w.temporal = Some((ln_t, m));
        let z = rand(&mut tape, &[3, 4, 8], &mut rng);
        let full = factorised_sa_layer(&mut tape, z, &w, false).unwrap();
        let skip = factorised_sa_layer(&mut tape, z, &w, true).unwrap();
        assert_eq!(tape.value(full), tape.value(skip));
    }

    #[test]
    fn odd_heads_rejected_for_dot_layer() {
        let mut rng = RngState::new(10);
        let mut tape = Tape::new();
        let w = layer(&mut tape, 6, 3, false, &mut rng);
        let z = rand(&mut tape, &[4, 6], &mut rng);
        let grid = Grid { nt: 2, nh: 2, nw: 1 };
        assert!(matches!(factorised_dot_layer(&mut tape, z, grid, &w), Err(Error::Config(_))));
    }

    #[test]
    fn dot_layer_with_one_frame_is_full_attention() {
        let mut rng = RngState::new(11);
        let mut tape = Tape::new();
        let w = layer(&mut tape, 8, 4, false, &mut rng);
        let z = rand(&mut tape, &[6, 8], &mut rng);
        let grid = Grid { nt: 1, nh: 2, nw: 3 };
        let dot = factorised_dot_layer(&mut tape, z, grid, &w).unwrap();
        // Spatial heads see everything; temporal heads see only themselves,
        // so their output is the token's own value projection.
        let h = w.ln1.apply(&mut tape, z).unwrap();
        let q = w.msa.query.apply(&mut tape, h).unwrap();
        let k = w.msa.key.apply(&mut tape, h).unwrap();
        let v = w.msa.value.apply(&mut tape, h).unwrap();
        let (qs, ks, vs) = (split_heads(&mut tape, q, 4).unwrap(), split_heads(&mut tape, k, 4).unwrap(), split_heads(&mut tape, v, 4).unwrap());
        let full = attention(&mut tape, qs, ks, vs).unwrap();
        let full = tape.slice(full, 0, 0, 2).unwrap();
        let own = tape.slice(vs, 0, 2, 2).unwrap();
        let heads = tape.concat(&[full, own], 0).unwrap();
        let y = merge_heads(&mut tape, heads).unwrap();
        let y = w.msa.out.apply(&mut tape, y).unwrap();
        let y = tape.add(y, z).unwrap();
        let y = mlp_block(&mut tape, y, &w).unwrap();
        assert!(tape.value(dot).max_abs_diff(tape.value(y)) < 1e-12);
    }
}
