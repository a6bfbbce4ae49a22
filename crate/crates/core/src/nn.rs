//! Transformer building blocks shared by the fuser and the anticipation decoder.
//!
//! Modules only hold [`ParamId`]s; values live in a [`ParamSet`] and are bound
//! onto a tape through a [`Ctx`] for each forward pass.

use anticipate_tensor::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// A tape plus the parameter values bound to it.
#[derive(Clone, Copy)]
pub struct Ctx<'a, F: Scalar> {
    pub tape: &'a Tape<F>,
    pub params: &'a ParamSet<F>,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    pub fn new(tape: &'a Tape<F>, params: &'a ParamSet<F>) -> Self {
        Self { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }
}

pub fn normal_tensor<F: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect())
}

pub(crate) fn add_param<F: Scalar>(params: &mut ParamSet<F>, name: String, value: Tensor<F>) -> Result<ParamId> {
    Ok(params.add(name, value)?)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[out, in]` ~ N(0, 0.02²), bias zero.
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<Self> {
        let weight = add_param(params, format!("{name}.weight"), normal_tensor(&[out_dim, in_dim], INIT_STD, rng))?;
        let bias = add_param(params, format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var) -> Result<Var> {
        Ok(ctx.tape.linear(x, ctx.p(self.weight), Some(ctx.p(self.bias)))?)
    }
}

/// Affine layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: add_param(params, format!("{name}.gamma"), Tensor::full(vec![dim], F::one()))?,
            beta: add_param(params, format!("{name}.beta"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let y = t.layer_norm(x, F::from_f64_lossy(LN_EPS))?;
        let y = t.mul(y, ctx.p(self.gamma))?;
        Ok(t.add(y, ctx.p(self.beta))?)
    }
}

/// `mask[q * len + k]` is true when query `q` may attend key `k`; `k ≤ q`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len.max(1) <= i / len.max(1)).collect()
}

/// Strictly-past variant: `k < q`. The first row is fully masked.
pub fn strict_causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len.max(1) < i / len.max(1)).collect()
}

pub struct AttentionOutput {
    pub out: Var,
    /// `[groups * heads, len_q, len_k]`
    pub weights: Var,
    /// Query rows that had no allowed key and were zero-filled.
    pub zero_rows: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(params, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(params, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(params, &format!("{name}.value"), dim, dim, rng)?,
            out: Linear::new(params, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `[G, L, d] -> [G * heads, L, d / heads]`
    fn split_heads<F: Scalar>(&self, t: &Tape<F>, x: Var) -> Result<Var> {
        let s = t.shape(x);
        let (g, l) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = t.reshape(x, &[g, l, self.heads, dh])?;
        let x = t.permute(x, &[0, 2, 1, 3])?;
        Ok(t.reshape(x, &[g * self.heads, l, dh])?)
    }

    /// Scaled dot-product attention over `[G, L, d]` sequences (`G` independent groups).
    ///
    /// `mask` is `[len_q, len_k]`; rows with no allowed key are an error unless
    /// `zero_fill`, in which case their output is zero.
    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, q_seq: Var, k_seq: Var, v_seq: Var, mask: Option<&[bool]>, zero_fill: bool) -> Result<AttentionOutput> {
        let t = ctx.tape;
        let qs = t.shape(q_seq);
        let ks = t.shape(k_seq);
        if qs.len() != 3 || ks.len() != 3 || qs[2] != self.dim || ks[2] != self.dim || qs[0] != ks[0] || t.shape(v_seq) != ks {
            return Err(Error::Contract(format!(
                "attention inputs q {:?}, k {:?}, v {:?} for dim {}",
                qs,
                ks,
                t.shape(v_seq),
                self.dim
            )));
        }
        let (g, lq) = (qs[0], qs[1]);
        let dh = self.dim / self.heads;
        let q = self.split_heads(t, self.query.forward(ctx, q_seq)?)?;
        let k = self.split_heads(t, self.key.forward(ctx, k_seq)?)?;
        let v = self.split_heads(t, self.value.forward(ctx, v_seq)?)?;
        let scores = t.matmul_t(q, k, false, true)?;
        let scores = t.scale(scores, F::one() / F::from_usize(dh).unwrap().sqrt());
        let (weights, zero_rows) = match mask {
            Some(m) => t.masked_softmax(scores, m, zero_fill)?,
            None => (t.softmax(scores, 2)?, 0),
        };
        let mixed = t.matmul(weights, v)?;
        let mixed = t.reshape(mixed, &[g, self.heads, lq, dh])?;
        let mixed = t.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = t.reshape(mixed, &[g, lq, self.dim])?;
        Ok(AttentionOutput {
            out: self.out.forward(ctx, mixed)?,
            weights,
            zero_rows,
        })
    }
}

/// Pre-norm encoder block: `x + MHA(LN(x))`, then `x + FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderBlock {
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), dim)?,
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), dim)?,
            ff_in: Linear::new(params, &format!("{name}.ff_in"), dim, 4 * dim, rng)?,
            ff_out: Linear::new(params, &format!("{name}.ff_out"), 4 * dim, dim, rng)?,
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var, mask: Option<&[bool]>, zero_fill: bool) -> Result<Var> {
        let t = ctx.tape;
        let h = self.ln_attn.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h, h, mask, zero_fill)?;
        let x = t.add(x, a.out)?;
        let h = self.ln_ff.forward(ctx, x)?;
        let h = t.gelu(self.ff_in.forward(ctx, h)?);
        let h = self.ff_out.forward(ctx, h)?;
        Ok(t.add(x, h)?)
    }

    /// The first `n_q` output rows of [`Self::forward`] without computing the rest.
    pub fn forward_prefix<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var, n_q: usize) -> Result<Var> {
        let t = ctx.tape;
        let h = self.ln_attn.forward(ctx, x)?;
        let hq = t.slice(h, 1, 0, n_q)?;
        let a = self.attn.forward(ctx, hq, h, h, None, false)?;
        let x = t.add(t.slice(x, 1, 0, n_q)?, a.out)?;
        let h = self.ln_ff.forward(ctx, x)?;
        let h = t.gelu(self.ff_in.forward(ctx, h)?);
        let h = self.ff_out.forward(ctx, h)?;
        Ok(t.add(x, h)?)
    }

    /// Zeroes the attention and feed-forward output projections, turning the block into the identity.
    pub fn zero_outputs<F: Scalar>(&self, params: &mut ParamSet<F>) {
        for id in [self.attn.out.weight, self.attn.out.bias, self.ff_out.weight, self.ff_out.bias] {
            params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }
}

/// Learned absolute positions, `[max_len, d]`.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    pub table: ParamId,
    pub max_len: usize,
}

impl PositionalTable {
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, max_len: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            table: add_param(params, name.to_string(), normal_tensor(&[max_len, dim], INIT_STD, rng))?,
            max_len,
        })
    }

    /// Adds positions `0..len` to a `[len, d]` sequence.
    pub fn add_to<F: Scalar>(&self, ctx: &Ctx<'_, F>, x: Var) -> Result<Var> {
        let len = ctx.tape.shape(x)[0];
        if len > self.max_len {
            return Err(Error::Contract(format!("sequence of {len} exceeds {} positions", self.max_len)));
        }
        let pos = ctx.tape.slice(ctx.p(self.table), 0, 0, len)?;
        Ok(ctx.tape.add(x, pos)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn block_setup(dim: usize, heads: usize) -> (ParamSet<f64>, EncoderBlock) {
        let mut p = ParamSet::new();
        let b = EncoderBlock::new(&mut p, "b", dim, heads, &mut stream(1, 1)).unwrap();
        (p, b)
    }

    #[test]
    fn causal_mask_shapes() {
        assert_eq!(causal_mask(1), vec![true]);
        assert_eq!(causal_mask(3), vec![true, false, false, true, true, false, true, true, true]);
        assert!(causal_mask(0).is_empty());
    }

    #[test]
    fn causal_mask_transpose_complement() {
        // transposing, then complementing every off-diagonal entry, rebuilds the mask
        let n = 5;
        let m = causal_mask(n);
        for q in 0..n {
            for k in 0..n {
                let rebuilt = if q == k { m[k * n + q] } else { !m[k * n + q] };
                assert_eq!(m[q * n + k], rebuilt);
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut p = ParamSet::<f64>::new();
        assert!(MultiHeadAttention::new(&mut p, "a", 10, 4, &mut stream(1, 1)).is_err());
    }

    #[test]
    fn single_key_attention_is_value_projection() {
        let mut p = ParamSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut p, "a", 8, 2, &mut stream(3, 1)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p);
        let x = tape.constant(normal_tensor(&[1, 1, 8], 1.0, &mut stream(4, 1)));
        let y = attn.forward(&ctx, x, x, x, None, false).unwrap();
        let expect = attn.out.forward(&ctx, attn.value.forward(&ctx, x).unwrap()).unwrap();
        let (a, b) = (tape.value(y.out), tape.value(expect));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut p = ParamSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut p, "a", 8, 2, &mut stream(3, 1)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p);
        let row = normal_tensor::<f64>(&[8], 1.0, &mut stream(5, 1));
        let x = tape.constant(Tensor::from_vec(vec![1, 4, 8], row.data().repeat(4)));
        let y = attn.forward(&ctx, x, x, x, Some(&causal_mask(4)), false).unwrap();
        let w = tape.value(y.weights);
        for h in 0..2 {
            for q in 0..4 {
                for k in 0..=q {
                    assert!((w.get(&[h, q, k]) - 1.0 / (q + 1) as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut p = ParamSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut p, "a", 8, 4, &mut stream(3, 1)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p);
        let x = tape.constant(normal_tensor(&[3, 6, 8], 2.0, &mut stream(6, 1)));
        let y = attn.forward(&ctx, x, x, x, Some(&causal_mask(6)), false).unwrap();
        for row in tape.value(y.weights).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_queries_ignore_later_keys() {
        let mut p = ParamSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut p, "a", 8, 2, &mut stream(3, 1)).unwrap();
        let base = normal_tensor::<f64>(&[1, 5, 8], 1.0, &mut stream(7, 1));
        let mut bumped = base.clone();
        for v in &mut bumped.data_mut()[3 * 8..4 * 8] {
            *v += 10.0;
        }
        let run = |x: Tensor<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &p);
            let x = tape.constant(x);
            tape.value(attn.forward(&ctx, x, x, x, Some(&causal_mask(5)), false).unwrap().out)
        };
        let (a, b) = (run(base), run(bumped));
        assert_eq!(&a.data()[..3 * 8], &b.data()[..3 * 8]);
        assert_ne!(&a.data()[3 * 8..4 * 8], &b.data()[3 * 8..4 * 8]);
    }

    #[test]
    fn strict_mask_zero_fills_first_row() {
        let mut p = ParamSet::<f64>::new();
        let attn = MultiHeadAttention::new(&mut p, "a", 4, 1, &mut stream(3, 1)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p);
        let x = tape.constant(normal_tensor(&[1, 3, 4], 1.0, &mut stream(8, 1)));
        let mask = strict_causal_mask(3);
        assert!(attn.forward(&ctx, x, x, x, Some(&mask), false).is_err());
        let y = attn.forward(&ctx, x, x, x, Some(&mask), true).unwrap();
        assert_eq!(y.zero_rows, 1);
    }

    #[test]
    fn zeroed_block_is_identity() {
        let (mut p, b) = block_setup(16, 4);
        b.zero_outputs(&mut p);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p);
        let x = normal_tensor::<f64>(&[2, 5, 16], 1.0, &mut stream(9, 1));
        let xv = tape.constant(x.clone());
        let y = b.forward(&ctx, xv, None, false).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn prefix_forward_matches_full_rows() {
        let (p, b) = block_setup(16, 4);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p);
        let x = tape.constant(normal_tensor(&[3, 5, 16], 1.0, &mut stream(12, 1)));
        let full = tape.value(b.forward(&ctx, x, None, false).unwrap());
        let pre = tape.value(b.forward_prefix(&ctx, x, 2).unwrap());
        assert_eq!(pre.shape(), &[3, 2, 16]);
        for g in 0..3 {
            for i in 0..2 * 16 {
                assert!((pre.data()[g * 32 + i] - full.data()[g * 80 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_preserves_shape() {
        let (p, b) = block_setup(64, 4);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p);
        let x = tape.constant(normal_tensor(&[1, 16, 64], 1.0, &mut stream(10, 1)));
        let y = b.forward(&ctx, x, Some(&causal_mask(16)), false).unwrap();
        assert_eq!(tape.shape(y), vec![1, 16, 64]);
    }

    #[test]
    fn unmasked_block_is_permutation_equivariant() {
        let (p, b) = block_setup(8, 2);
        let x = normal_tensor::<f64>(&[1, 4, 8], 1.0, &mut stream(11, 1));
        let perm = [2usize, 0, 3, 1];
        let mut xp = Vec::new();
        for &i in &perm {
            xp.extend_from_slice(&x.data()[i * 8..(i + 1) * 8]);
        }
        let run = |x: Tensor<f64>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &p);
            let v = tape.constant(x);
            tape.value(b.forward(&ctx, v, None, false).unwrap())
        };
        let (y, yp) = (run(x.clone()), run(Tensor::from_vec(vec![1, 4, 8], xp)));
        for (slot, &i) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp.data()[slot * 8 + j] - y.data()[i * 8 + j]).abs() < 1e-12);
            }
        }
    }
}
