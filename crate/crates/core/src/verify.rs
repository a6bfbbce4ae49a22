//! Finite-difference checks for composed modules, in double precision.

use anticipate_tensor::gradcheck::{check_gradients, op_suite, project, random_tensor, rel_err, GradCheck};
use anticipate_tensor::{OpKind, ParamSet, Tape, Tensor, Var};
use rand::Rng as _;

use anticipate_tensor::TensorError;

use crate::error::{Error, Result};
use crate::fusion::Fuser;
use crate::model::{Channel, Decoder, ModalitySpec, Model, ModelConfig, SegmentInput, Stage};
use crate::nn::{Ctx, EncoderBlock, LayerNorm, PositionalTable};
use crate::objectives::{classification_loss, contrastive_loss, feature_loss};
use crate::rng::stream;

/// Checks input gradients of `f`, then spot-checks `samples` parameter entries.
fn check_module<G>(name: &str, params: &ParamSet<f64>, inputs: &[Tensor<f64>], samples: usize, seed: u64, fault: Option<OpKind>, f: G) -> Result<Vec<GradCheck>>
where
    G: Fn(&Tape<f64>, &ParamSet<f64>, &[Var]) -> Result<Var>,
{
    let mut out = vec![check_gradients(&format!("{name}/inputs"), inputs, fault, |t, v| {
        let y = f(t, params, v).map_err(lower)?;
        project(t, y, seed)
    })?];

    let loss_of = |p: &ParamSet<f64>, fault: Option<OpKind>| -> Result<(Tape<f64>, Var)> {
        let t = Tape::new();
        t.inject_fault(fault);
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&t, p, &vs)?;
        let l = project(&t, y, seed)?;
        Ok((t, l))
    };
    let (tape, loss) = loss_of(params, fault)?;
    let grads = tape.param_grads(&tape.backward(loss)?, params.len());

    let ids: Vec<_> = params.ids().collect();
    let mut rng = stream(seed, 0x9c);
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let id = ids[rng.gen_range(0..ids.len())];
        let n = params.value(id).numel();
        let j = rng.gen_range(0..n);
        let theta = params.value(id).data()[j];
        let h = 1e-4 * theta.abs().max(1.0);
        let mut eval = |x: f64| -> Result<f64> {
            work.value_mut(id).data_mut()[j] = x;
            let (t, l) = loss_of(&work, None)?;
            Ok(t.value(l).item())
        };
        let numeric = (eval(theta + h)? - eval(theta - h)?) / (2.0 * h);
        work.value_mut(id).data_mut()[j] = theta;
        let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[j]);
        worst = worst.max(rel_err(analytic, numeric));
    }
    out.push(GradCheck {
        name: format!("{name}/params"),
        max_rel_err: worst,
        elements: samples,
    });
    Ok(out)
}

fn fuser_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheck>> {
    let mut rng = stream(seed, 1);
    let mut p = ParamSet::<f64>::new();
    let fuser = Fuser::new(&mut p, "fuser", 4, 2, 2, 3, 2, true, &mut rng)?;
    scale_params(&mut p, 2.0);
    let tokens = random_tensor(&[2, 3, 4], seed ^ 11, -1.0, 1.0);
    let present = vec![true, false, true, true, true, false];
    check_module("fuser", &p, &[tokens], 24, seed, fault, |t, p, v| {
        fuser.forward(&Ctx::new(t, p), v[0], &present)
    })
}

fn decoder_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheck>> {
    let mut rng = stream(seed, 2);
    let mut p = ParamSet::<f64>::new();
    let dec = Decoder {
        positions: PositionalTable::new(&mut p, "decoder.positions", 5, 4, &mut rng)?,
        blocks: (0..2)
            .map(|i| EncoderBlock::new(&mut p, &format!("decoder.block{i}"), 4, 2, &mut rng))
            .collect::<Result<_>>()?,
        ln_f: LayerNorm::new(&mut p, "decoder.ln_f", 4)?,
        exclusive: false,
    };
    scale_params(&mut p, 2.0);
    let z = random_tensor(&[2, 5, 4], seed ^ 12, -1.0, 1.0);
    check_module("decoder", &p, &[z], 24, seed, fault, |t, p, v| dec.forward(&Ctx::new(t, p), v[0]))
}

fn lower(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

/// Init weights are tiny; larger ones make the checks exercise real curvature.
fn scale_params(p: &mut ParamSet<f64>, k: f64) {
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        p.value_mut(id).data_mut().iter_mut().for_each(|x| *x *= k);
    }
}

fn loss_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheck>> {
    let r = |s: &[usize], k: u64, lo: f64, hi: f64| random_tensor(s, seed ^ (100 + k), lo, hi);
    let mut out = Vec::new();
    out.push(check_gradients(
        "loss/contrastive",
        &[r(&[4, 3], 1, -1.0, 1.0), r(&[4, 3], 2, -1.0, 1.0), r(&[1], 3, -1.0, 0.0)],
        fault,
        |t, v| {
            let a = t.l2_normalize(v[0], 1, 1e-12)?;
            let b = t.l2_normalize(v[1], 1, 1e-12)?;
            Ok(contrastive_loss(t, a, b, v[2]).map_err(lower)?.cross)
        },
    )?);
    // The target side is detached, so only the prediction is perturbed.
    let z = r(&[2, 4, 3], 5, -1.0, 1.0);
    out.push(check_gradients("loss/feature", &[r(&[2, 4, 3], 4, -1.0, 1.0)], fault, |t, v| {
        feature_loss(t, v[0], t.constant(z.clone())).map_err(lower)
    })?);
    out.push(check_gradients("loss/classification", &[r(&[3, 5], 6, -2.0, 2.0)], fault, |t, v| {
        classification_loss(t, v[0], &[4, 0, 2]).map_err(lower)
    })?);
    Ok(out)
}

/// Full model at `T = 16, d = 64`: ten random parameters against central differences.
pub fn model_spot_check(seed: u64, samples: usize) -> Result<GradCheck> {
    let config = ModelConfig {
        modalities: vec![ModalitySpec::dense("rgb", 8), ModalitySpec::text("act_text")],
        buckets: 64,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(config, seed)?;
    scale_params(&mut model.params, 5.0);
    let steps = 16;
    let seg = SegmentInput {
        steps,
        channels: vec![
            Some(Channel::Dense(std::sync::Arc::new(
                random_tensor(&[steps * 8], seed ^ 21, -1.0, 1.0).data().iter().map(|&x| x as f32).collect(),
            ))),
            Some(Channel::Text(
                (0..steps)
                    .map(|i| std::sync::Arc::new(crate::text::embed_text(&format!("take plate {i}"), 64)))
                    .collect(),
            )),
        ],
    };
    let loss_of = |m: &Model<f64>| -> Result<(Tape<f64>, Var)> {
        let t = Tape::new();
        let ctx = m.ctx(&t);
        let out = m.forward(&ctx, &[&seg], Stage::Finetune)?;
        // Feature loss is left out: its detached target makes finite differences disagree by design.
        let l = classification_loss(&t, out.logits.expect("logits"), &[3])?;
        Ok((t, l))
    };
    let (tape, loss) = loss_of(&model)?;
    let grads = tape.param_grads(&tape.backward(loss)?, model.params.len());
    let ids: Vec<_> = model.params.ids().filter(|&id| grads[id.index()].is_some()).collect();
    let mut rng = stream(seed, 0x5c);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let id = ids[rng.gen_range(0..ids.len())];
        let g = grads[id.index()].as_ref().unwrap();
        // Prefer entries that actually receive gradient.
        let nz: Vec<usize> = (0..g.len()).filter(|&j| g[j] != 0.0).collect();
        let j = if nz.is_empty() {
            rng.gen_range(0..g.len())
        } else {
            nz[rng.gen_range(0..nz.len())]
        };
        let theta = model.params.value(id).data()[j];
        let h = 1e-4 * theta.abs().max(1.0);
        let mut at = |x: f64| -> Result<f64> {
            model.params.value_mut(id).data_mut()[j] = x;
            let (t, l) = loss_of(&model)?;
            Ok(t.value(l).item())
        };
        let numeric = (at(theta + h)? - at(theta - h)?) / (2.0 * h);
        model.params.value_mut(id).data_mut()[j] = theta;
        worst = worst.max(rel_err(g[j], numeric));
    }
    Ok(GradCheck {
        name: "model/params".into(),
        max_rel_err: worst,
        elements: samples,
    })
}

pub const SCOPES: [&str; 6] = ["all", "ops", "module", "fuser", "decoder", "losses"];

/// Runs the checks in `scope`; `fault` sign-flips one op's backward rule.
pub fn run_scope(scope: &str, seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let all = scope == "all";
    let module = all || scope == "module";
    if all || scope == "ops" {
        out.extend(op_suite(seed, fault)?);
    }
    if module || scope == "fuser" {
        out.extend(fuser_checks(seed, fault)?);
    }
    if module || scope == "decoder" {
        out.extend(decoder_checks(seed, fault)?);
    }
    if module || scope == "losses" {
        out.extend(loss_checks(seed, fault)?);
    }
    if module {
        out.push(model_spot_check(seed, 10)?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("unknown gradcheck scope {scope:?}; expected one of {SCOPES:?}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modules_pass() {
        for scope in ["fuser", "decoder", "losses"] {
            for c in run_scope(scope, 3, None).unwrap() {
                assert!(c.passed(), "{} {}", c.name, c.max_rel_err);
            }
        }
    }

    #[test]
    fn model_spot_check_passes() {
        let c = model_spot_check(1, 10).unwrap();
        assert!(c.passed(), "{}", c.max_rel_err);
    }

    #[test]
    fn flipped_layer_norm_fails_in_modules() {
        let checks = run_scope("fuser", 3, Some(OpKind::LayerNorm)).unwrap();
        assert!(checks.iter().any(|c| !c.passed()));
    }

    #[test]
    fn unknown_scope_is_rejected() {
        assert!(run_scope("everything", 1, None).is_err());
    }
}
