//! Central finite-difference oracle for analytic gradients (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::error::Result;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Acceptance threshold on the maximum relative error.
pub const GRAD_TOL: f64 = 1e-5;

/// Denominator floor so that near-zero gradients compare absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `d f / d inputs` from the tape against central differences with
/// step `h = 1e-4 · max(1, |θ|)`. `f` must return a scalar.
pub fn check_gradients<G>(name: &str, inputs: &[Tensor<f64>], fault: Option<OpKind>, f: G) -> Result<GradCheck>
where
    G: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.var(x.clone())).collect();
        let l = f(&t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut worst: f64 = 0.0;
    let mut elements = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x.numel());
        for j in 0..x.numel() {
            let theta = x.data()[j];
            let h = 1e-4 * theta.abs().max(1.0);
            work[i].data_mut()[j] = theta + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = theta - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = theta;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
            elements += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        elements,
    })
}

/// Reduces any tensor to a scalar through fixed random weights, so every
/// output element contributes a distinct gradient.
pub fn project(tape: &Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    project_avoiding(tape, v, seed, None)
}

/// [`project`] routed around `avoid`, so a fault injected into that op kind
/// is not cancelled by the projection itself.
pub fn project_avoiding(tape: &Tape<f64>, v: Var, seed: u64, avoid: Option<OpKind>) -> Result<Var> {
    let shape = tape.shape(v);
    let n: usize = shape.iter().product();
    if matches!(avoid, Some(OpKind::Mul | OpKind::SumAll)) {
        let w = tape.constant(random_tensor(&[n, 1], seed, -1.0, 1.0));
        let flat = tape.reshape(v, &[1, n])?;
        let p = tape.matmul(flat, w)?;
        return tape.reshape(p, &[]);
    }
    let w = tape.constant(random_tensor(&shape, seed, -1.0, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.sum_all(p))
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn causal(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Runs the finite-difference oracle on every differentiable op kind.
/// With `fault`, that op's backward rule is sign-flipped.
pub fn op_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheck>> {
    let r = |shape: &[usize], k: u64| random_tensor(shape, seed.wrapping_mul(1000).wrapping_add(k), -1.0, 1.0);
    let pos = |shape: &[usize], k: u64| random_tensor(shape, seed.wrapping_mul(1000).wrapping_add(k), 0.5, 2.0);
    let mut out = Vec::new();
    let mut run = |kind: OpKind, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        out.push(check_gradients(kind.name(), &inputs, fault, |t, v| {
            let y = f(t, v)?;
            project_avoiding(t, y, seed ^ 0x5eed, fault)
        })?);
        Ok(())
    };

    run(OpKind::MatMul, vec![r(&[2, 3, 4], 1), r(&[4, 5], 2)], &|t, v| t.matmul(v[0], v[1]))?;
    run(OpKind::MatMul, vec![r(&[2, 4, 3], 3), r(&[2, 5, 4], 4)], &|t, v| {
        t.matmul_t(v[0], v[1], true, true)
    })?;
    run(OpKind::Linear, vec![r(&[3, 4], 5), r(&[5, 4], 6), r(&[5], 7)], &|t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })?;
    run(OpKind::Add, vec![r(&[3, 4], 8), r(&[4], 9)], &|t, v| t.add(v[0], v[1]))?;
    run(OpKind::Sub, vec![r(&[2, 1, 3], 10), r(&[4, 1], 11)], &|t, v| t.sub(v[0], v[1]))?;
    run(OpKind::Mul, vec![r(&[3, 4], 12), r(&[3, 1], 13)], &|t, v| t.mul(v[0], v[1]))?;
    run(OpKind::Scale, vec![r(&[3, 4], 14)], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run(OpKind::Concat, vec![r(&[2, 3], 15), r(&[2, 2], 16)], &|t, v| t.concat(&[v[0], v[1]], 1))?;
    run(OpKind::Slice, vec![r(&[3, 4], 17)], &|t, v| t.slice(v[0], 1, 1, 2))?;
    run(OpKind::Permute, vec![r(&[2, 3, 4], 18)], &|t, v| t.permute(v[0], &[2, 0, 1]))?;
    run(OpKind::Reshape, vec![r(&[2, 6], 19)], &|t, v| t.reshape(v[0], &[3, 4]))?;
    run(OpKind::Expand, vec![r(&[3], 20)], &|t, v| Ok(t.expand(v[0], 4)))?;
    run(OpKind::Sum, vec![r(&[2, 3, 4], 21)], &|t, v| t.sum(v[0], 1))?;
    run(OpKind::Mean, vec![r(&[2, 3, 4], 22)], &|t, v| t.mean(v[0], 0))?;
    run(OpKind::SumAll, vec![r(&[2, 3], 23)], &|t, v| {
        let s = t.sum_all(v[0]);
        t.mul(s, s)
    })?;
    run(OpKind::Softmax, vec![r(&[2, 3, 2], 24)], &|t, v| t.softmax(v[0], 1))?;
    let mask = causal(3);
    run(OpKind::MaskedSoftmax, vec![r(&[2, 3, 3], 25)], &|t, v| {
        Ok(t.masked_softmax(v[0], &mask, false)?.0)
    })?;
    run(OpKind::Log, vec![pos(&[3, 4], 26)], &|t, v| t.log(v[0]))?;
    run(OpKind::Exp, vec![r(&[3, 4], 27)], &|t, v| Ok(t.exp(v[0])))?;
    run(OpKind::Gelu, vec![random_tensor(&[3, 4], seed ^ 28, -3.0, 3.0)], &|t, v| Ok(t.gelu(v[0])))?;
    run(OpKind::LayerNorm, vec![r(&[3, 5], 29)], &|t, v| t.layer_norm(v[0], 1e-5))?;
    run(OpKind::L2Normalize, vec![r(&[3, 4], 30)], &|t, v| t.l2_normalize(v[0], 1, 1e-12))?;
    run(OpKind::EmbeddingLookup, vec![r(&[5, 3], 31)], &|t, v| t.embedding_lookup(v[0], &[0, 3, 3, 1]))?;
    let bags: Arc<Vec<Vec<(usize, f64)>>> = Arc::new(vec![vec![(0, 0.5), (4, -1.0)], vec![], vec![(2, 1.0), (2, 0.25), (5, 2.0)]]);
    run(OpKind::EmbeddingBag, vec![r(&[6, 3], 32)], &|t, v| t.embedding_bag(v[0], bags.clone()))?;
    run(OpKind::Mse, vec![r(&[3, 4], 33), r(&[3, 4], 34)], &|t, v| {
        let l = t.mse(v[0], v[1])?;
        Ok(t.scale(l, 3.0))
    })?;
    run(OpKind::CrossEntropy, vec![r(&[4, 5], 35)], &|t, v| {
        let l = t.cross_entropy_with_logits(v[0], &[0, 4, 2, 2])?;
        Ok(t.scale(l, 2.0))
    })?;
    Ok(out)
}
