//! Training losses: symmetric contrastive, next-feature regression and classification.

use anticipate_tensor::{Scalar, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Stage;

pub struct ContrastiveLosses {
    pub v2t: Var,
    pub t2v: Var,
    pub cross: Var,
}

/// Symmetric InfoNCE over `[B, d_c]` video and text rows with `s = v·t / exp(log_tau)`.
pub fn contrastive_loss<F: Scalar>(tape: &Tape<F>, video: Var, text: Var, log_tau: Var) -> Result<ContrastiveLosses> {
    let (vs, ts) = (tape.shape(video), tape.shape(text));
    if vs.len() != 2 || vs != ts {
        return Err(Error::Contract(format!("contrastive rows {vs:?} vs {ts:?}")));
    }
    let b = vs[0];
    if b == 0 {
        return Err(Error::Contract("contrastive loss on an empty batch".into()));
    }
    let sim = tape.matmul_t(video, text, false, true)?;
    let inv_tau = tape.exp(tape.scale(log_tau, -F::one()));
    let logits = tape.mul(sim, inv_tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let v2t = tape.cross_entropy_with_logits(logits, &diag)?;
    let t2v = tape.cross_entropy_with_logits(tape.transpose(logits)?, &diag)?;
    let cross = tape.add(v2t, t2v)?;
    Ok(ContrastiveLosses { v2t, t2v, cross })
}

/// Rejects rows whose norm is off by more than `tol`.
pub fn check_unit_rows<F: Scalar>(values: &[F], cols: usize, tol: f64) -> Result<()> {
    for (i, row) in values.chunks(cols.max(1)).enumerate() {
        let n = row.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > tol {
            return Err(Error::Contract(format!("row {i} has norm {n}, expected unit rows")));
        }
    }
    Ok(())
}

/// [`contrastive_loss`] with the batch contract checked first.
pub fn contrastive_loss_checked<F: Scalar>(tape: &Tape<F>, video: Var, text: Var, log_tau: Var) -> Result<ContrastiveLosses> {
    let tol = if F::NAME == "f32" { 1e-4 } else { 1e-9 };
    for v in [video, text] {
        let s = tape.shape(v);
        if s.len() == 2 {
            check_unit_rows(tape.value(v).data(), s[1], tol)?;
        }
    }
    contrastive_loss(tape, video, text, log_tau)
}

/// Mean squared error between `ẑ_t` and the detached `z_{t+1}` over `t = 1..T-1`.
/// Zero when `T < 2`.
pub fn feature_loss<F: Scalar>(tape: &Tape<F>, z_hat: Var, z: Var) -> Result<Var> {
    let s = tape.shape(z_hat);
    if s.len() != 3 || tape.shape(z) != s {
        return Err(Error::Contract(format!("feature loss on {s:?} vs {:?}", tape.shape(z))));
    }
    let steps = s[1];
    if steps < 2 {
        return Ok(tape.constant(anticipate_tensor::Tensor::scalar(F::zero())));
    }
    let pred = tape.slice(z_hat, 1, 0, steps - 1)?;
    let target = tape.detach(tape.slice(z, 1, 1, steps - 1)?);
    Ok(tape.mse(pred, target)?)
}

pub fn classification_loss<F: Scalar>(tape: &Tape<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy_with_logits(logits, targets).map_err(|e| match e {
        TensorError::Domain { detail, .. } => Error::Data(detail),
        other => other.into(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub v2t: Option<f64>,
    pub t2v: Option<f64>,
    pub cross: Option<f64>,
    pub feat: Option<f64>,
    pub cls: Option<f64>,
    pub total: f64,
}

/// Pretrain: `L_cross + L_feat`. Finetune: `L_cls + beta·L_feat`.
pub fn stage_total(stage: Stage, cross: Option<f64>, feat: Option<f64>, cls: Option<f64>, beta: f64) -> Result<f64> {
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Contract(format!("{name} is required for this stage")));
    match stage {
        Stage::Pretrain => Ok(need(cross, "contrastive loss")? + need(feat, "feature loss")?),
        Stage::Finetune => {
            let c = need(cls, "classification loss")?;
            if beta == 0.0 {
                Ok(c)
            } else {
                Ok(c + beta * need(feat, "feature loss")?)
            }
        }
    }
}

/// Tape version of [`stage_total`].
pub fn stage_loss<F: Scalar>(tape: &Tape<F>, stage: Stage, cross: Option<Var>, feat: Option<Var>, cls: Option<Var>, beta: f64) -> Result<Var> {
    let need = |v: Option<Var>, name: &str| v.ok_or_else(|| Error::Contract(format!("{name} is required for this stage")));
    match stage {
        Stage::Pretrain => Ok(tape.add(need(cross, "contrastive loss")?, need(feat, "feature loss")?)?),
        Stage::Finetune => {
            let c = need(cls, "classification loss")?;
            if beta == 0.0 {
                Ok(c)
            } else {
                let f = tape.scale(need(feat, "feature loss")?, F::from_f64_lossy(beta));
                Ok(tape.add(c, f)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anticipate_tensor::Tensor;

    fn losses(v: &[f64], t: &[f64], b: usize, tau: f64) -> (f64, f64, f64) {
        let tape = Tape::<f64>::new();
        let d = v.len() / b;
        let vv = tape.var(Tensor::from_f64(vec![b, d], v));
        let tv = tape.var(Tensor::from_f64(vec![b, d], t));
        let lt = tape.var(Tensor::from_f64(vec![1], &[tau.ln()]));
        let l = contrastive_loss_checked(&tape, vv, tv, lt).unwrap();
        (tape.value(l.v2t).item(), tape.value(l.t2v).item(), tape.value(l.cross).item())
    }

    #[test]
    fn single_pair_is_zero() {
        assert_eq!(losses(&[0.6, 0.8], &[1.0, 0.0], 1, 0.07), (0.0, 0.0, 0.0));
    }

    #[test]
    fn orthogonal_pair_of_two() {
        let (a, b, c) = losses(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, 1.0);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((a - want).abs() < 1e-12 && (b - want).abs() < 1e-12);
        assert!((c - 2.0 * want).abs() < 1e-12);
    }

    #[test]
    fn lower_temperature_lowers_separated_loss() {
        let e = [1.0, 0.0, 0.0, 1.0];
        let taus = [2.0, 1.0, 0.5, 0.1];
        let vals: Vec<f64> = taus.iter().map(|&t| losses(&e, &e, 2, t).2).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
    }

    #[test]
    fn swapping_sides_swaps_directions() {
        let v = [0.6, 0.8, 1.0, 0.0, 0.0, 1.0];
        let t = [0.8, 0.6, 0.0, 1.0, 1.0, 0.0];
        let (a, b, _) = losses(&v, &t, 3, 0.5);
        let (c, d, _) = losses(&t, &v, 3, 0.5);
        assert_eq!((a, b), (d, c));
    }

    #[test]
    fn non_unit_rows_and_empty_batches_are_rejected() {
        let tape = Tape::<f64>::new();
        let v = tape.var(Tensor::from_f64(vec![1, 2], &[1.0, 1.0]));
        let lt = tape.var(Tensor::from_f64(vec![1], &[0.0]));
        assert!(contrastive_loss_checked(&tape, v, v, lt).is_err());
        let e = tape.var(Tensor::zeros(vec![0, 2]));
        assert!(contrastive_loss(&tape, e, e, lt).is_err());
    }

    #[test]
    fn feature_loss_examples() {
        let tape = Tape::<f64>::new();
        let zh = tape.var(Tensor::from_f64(vec![1, 2, 1], &[0.5, 9.0]));
        let z = tape.var(Tensor::from_f64(vec![1, 2, 1], &[7.0, 1.0]));
        let l = feature_loss(&tape, zh, z).unwrap();
        assert_eq!(tape.value(l).item(), 0.25);
        let g = tape.backward(l).unwrap();
        assert!(g.get(z).map(|g| g.iter().all(|&x| x == 0.0)).unwrap_or(true));
        assert_eq!(g.get(zh).unwrap(), &[-1.0, 0.0]);

        let shifted = tape.var(Tensor::from_f64(vec![1, 3, 1], &[2.0, 3.0, 0.0]));
        let base = tape.var(Tensor::from_f64(vec![1, 3, 1], &[1.0, 2.0, 3.0]));
        assert_eq!(tape.value(feature_loss(&tape, shifted, base).unwrap()).item(), 0.0);
        let one = tape.var(Tensor::from_f64(vec![1, 1, 1], &[4.0]));
        assert_eq!(tape.value(feature_loss(&tape, one, one).unwrap()).item(), 0.0);
    }

    #[test]
    fn classification_examples() {
        let tape = Tape::<f64>::new();
        let u = tape.var(Tensor::zeros(vec![1, 24]));
        let l = classification_loss(&tape, u, &[5]).unwrap();
        assert!((tape.value(l).item() - 24f64.ln()).abs() < 1e-12);
        let mut big = vec![0.0; 24];
        big[3] = 1e3;
        let b = tape.var(Tensor::from_f64(vec![1, 24], &big));
        assert!(tape.value(classification_loss(&tape, b, &[3]).unwrap()).item() < 1e-12);
        let h = tape.var(Tensor::from_f64(vec![1, 3], &[1.0, 2.0, 0.5]));
        let want = -((2f64).exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp())).ln();
        assert!((tape.value(classification_loss(&tape, h, &[1]).unwrap()).item() - want).abs() < 1e-12);
        assert!(matches!(classification_loss(&tape, h, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn stage_totals() {
        assert!((stage_total(Stage::Pretrain, Some(0.5), Some(0.2), None, 0.0).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(stage_total(Stage::Finetune, None, None, Some(1.3), 0.0).unwrap(), 1.3);
        assert!((stage_total(Stage::Finetune, None, Some(0.2), Some(1.3), 1.0).unwrap() - 1.5).abs() < 1e-12);
        assert!(stage_total(Stage::Pretrain, Some(0.5), None, None, 0.0).is_err());
        assert!(stage_total(Stage::Finetune, None, None, Some(1.0), 1.0).is_err());
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(1.3));
        let f = tape.constant(Tensor::scalar(0.2));
        let l = stage_loss(&tape, Stage::Finetune, None, Some(f), Some(c), 1.0).unwrap();
        assert!((tape.value(l).item() - 1.5).abs() < 1e-12);
    }
}
