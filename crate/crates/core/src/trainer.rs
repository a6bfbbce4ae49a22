//! Two-stage training: contrastive pre-training, then frozen or full fine-tuning.
//!
//! A batch is split into fixed-size chunks, each with its own tape. Chunks run
//! through [`Exec::map`] and their gradients are summed in chunk order.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anticipate_tensor::{clip_grad_norm, sgd_momentum_step, LrSchedule, OptimizerState, ParamSet, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::make_batches;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::Prediction;
use crate::model::{save_checkpoint, Channel, Model, SegmentInput, Stage};
use crate::objectives::{classification_loss, contrastive_loss, feature_loss};
use crate::rng::{stream, tag, Rng};
use crate::text::{embed_text, DescriptionBank, SampleMode, TextFeature};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    #[default]
    Frozen,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub warmup: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fine-tuning only; frozen when unset.
    pub mode: Option<FinetuneMode>,
    /// Weight of the feature loss while fine-tuning.
    pub beta: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Avoid repeated target classes within a batch.
    pub dedup_classes: bool,
    /// Gaussian noise added to dense modalities during training.
    pub sigma_aug: f64,
    /// Segments per tape.
    pub chunk: usize,
    pub exec: Exec,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 30,
            warmup: 6,
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 16,
            mode: None,
            beta: 1.0,
            seed: 0,
            clip_norm: Some(5.0),
            dedup_classes: false,
            sigma_aug: 0.0,
            chunk: 4,
            exec: Exec::default(),
        }
    }
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self::default()
    }

    pub fn finetune(mode: FinetuneMode) -> Self {
        Self {
            stage: Stage::Finetune,
            mode: Some(mode),
            ..Self::default()
        }
    }

    /// 50 epochs with 20 warmup epochs.
    pub fn paper(stage: Stage) -> Self {
        Self {
            stage,
            epochs: 50,
            warmup: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup > self.epochs {
            return bad(format!("warmup {} exceeds {} epochs", self.warmup, self.epochs));
        }
        if self.stage == Stage::Pretrain && self.mode.is_some() {
            return bad("a fine-tuning mode was given for the pretrain stage".into());
        }
        if self.batch_size == 0 || self.chunk == 0 {
            return bad("batch_size and chunk must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.beta >= 0.0 && self.sigma_aug >= 0.0) {
            return bad("learning rate, weight decay, beta and sigma_aug must be non-negative".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn finetune_mode(&self) -> FinetuneMode {
        self.mode.unwrap_or_default()
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        Ok(LrSchedule::new(self.base_lr, self.warmup, self.epochs)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_cross: Option<f64>,
    pub loss_feat: Option<f64>,
    pub loss_cls: Option<f64>,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: Option<PathBuf>,
}

pub const RUNLOG_HEADER: &str = "epoch,lr,loss_cross,loss_feat,loss_cls,total,seconds";

impl RunLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{RUNLOG_HEADER}\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                e.epoch,
                e.lr,
                opt(e.loss_cross),
                opt(e.loss_feat),
                opt(e.loss_cls),
                e.total,
                e.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }
}

type Grads = Vec<Option<Vec<f32>>>;

fn accumulate(into: &mut Grads, add: Grads) {
    if into.is_empty() {
        *into = add;
        return;
    }
    for (a, b) in into.iter_mut().zip(add) {
        match (a.as_mut(), b) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (None, Some(b)) => *a = Some(b),
            _ => {}
        }
    }
}

fn chunked(batch: &[SegmentInput], chunk: usize) -> Vec<&[SegmentInput]> {
    batch.chunks(chunk).collect()
}

fn augment(inputs: &[&SegmentInput], sigma: f64, rng: &mut Rng) -> Vec<SegmentInput> {
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    inputs
        .iter()
        .map(|s| SegmentInput {
            steps: s.steps,
            channels: s
                .channels
                .iter()
                .map(|c| match c {
                    Some(Channel::Dense(v)) if sigma > 0.0 => Some(Channel::Dense(Arc::new(v.iter().map(|&x| x + noise.sample(rng) as f32).collect()))),
                    other => other.clone(),
                })
                .collect(),
        })
        .collect()
}

/// Collects the batch inputs, adding feature noise when configured.
fn gather(inputs: &[SegmentInput], idx: &[usize], sigma: f64, rng: &mut Rng) -> Vec<SegmentInput> {
    let refs: Vec<&SegmentInput> = idx.iter().map(|&i| &inputs[i]).collect();
    if sigma > 0.0 {
        augment(&refs, sigma, rng)
    } else {
        refs.into_iter().cloned().collect()
    }
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} became {v}")))
    }
}

struct Runner<'m> {
    model: &'m mut Model<f32>,
    cfg: StageConfig,
    opt: OptimizerState<f32>,
    last_good: ParamSet<f32>,
    checkpoint: Option<PathBuf>,
    log: RunLog,
}

impl<'m> Runner<'m> {
    fn new(model: &'m mut Model<f32>, cfg: &StageConfig, checkpoint: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(&model.params, cfg.momentum as f32, cfg.weight_decay as f32, 0.0)?;
        Ok(Self {
            last_good: model.params.clone(),
            model,
            cfg: cfg.clone(),
            opt,
            checkpoint: checkpoint.map(Path::to_path_buf),
            log: RunLog::default(),
        })
    }

    fn step(&mut self, mut grads: Grads) -> Result<()> {
        if let Some(c) = self.cfg.clip_norm {
            let n = clip_grad_norm(&mut grads, c as f32);
            check_finite(n as f64, "gradient norm")?;
        }
        sgd_momentum_step(&mut self.model.params, &grads, &mut self.opt)?;
        Ok(())
    }

    /// Restores the last completed epoch's parameters and saves them.
    fn abort(&mut self, err: Error) -> Error {
        if !err.is_numeric() {
            return err;
        }
        self.model.params = self.last_good.clone();
        if let Some(p) = &self.checkpoint {
            if let Err(e) = save_checkpoint(self.model, p) {
                log::error!("could not save the last-good checkpoint: {e}");
            } else {
                log::error!("numeric failure; last-good parameters saved to {}", p.display());
            }
        }
        err
    }

    fn finish(mut self) -> Result<RunLog> {
        if let Some(p) = &self.checkpoint {
            save_checkpoint(self.model, p)?;
            self.log.checkpoint = Some(p.clone());
        }
        Ok(self.log)
    }
}

/// Accumulates per-epoch loss sums weighted by batch size.
#[derive(Default)]
struct EpochSums {
    n: usize,
    cross: f64,
    feat: f64,
    cls: f64,
    total: f64,
}

impl EpochSums {
    fn add(&mut self, b: usize, cross: f64, feat: f64, cls: f64, total: f64) {
        self.n += b;
        self.cross += cross * b as f64;
        self.feat += feat * b as f64;
        self.cls += cls * b as f64;
        self.total += total * b as f64;
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.n.max(1) as f64
    }
}

/// Stage 1: `L_cross + L_feat` against sampled descriptions of each target action.
pub fn pretrain(
    model: &mut Model<f32>,
    inputs: &[SegmentInput],
    targets: &[usize],
    bank: &DescriptionBank,
    cfg: &StageConfig,
    checkpoint: Option<&Path>,
) -> Result<RunLog> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain needs a pretrain stage config".into()));
    }
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Data(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    bank.check_complete(model.config.classes)?;
    model.params.set_all_trainable(true);
    for id in model.classifier_ids() {
        model.params.set_trainable(id, false);
    }
    let mut run = Runner::new(model, cfg, checkpoint)?;
    let result = pretrain_epochs(&mut run, inputs, targets, bank);
    run.model.params.set_all_trainable(true);
    match result {
        Ok(()) => run.finish(),
        Err(e) => Err(run.abort(e)),
    }
}

/// Gradients of `L_cross + L_feat` for one batch, with the loss values.
///
/// Chunks are forwarded separately; the contrastive head runs on a batch tape
/// and its gradient with respect to each video row seeds the chunk tapes.
pub fn pretrain_batch(model: &Model<f32>, batch: &[SegmentInput], texts: &[&TextFeature], chunk: usize, exec: Exec) -> Result<(Grads, f64, f64)> {
    let b = batch.len();
    let n_params = model.params.len();
    let forwards = exec.map(chunked(batch, chunk), |c| -> Result<(Tape<f32>, Var, Var, Tensor<f32>, f64, usize)> {
        let tape = Tape::new();
        let ctx = model.ctx(&tape);
        let refs: Vec<&SegmentInput> = c.iter().collect();
        let out = model.forward(&ctx, &refs, Stage::Pretrain)?;
        let feat = feature_loss(&tape, out.z_hat, out.z)?;
        let v = out.video.expect("pretrain forward yields video embeddings");
        let (vv, fv) = (tape.value(v), tape.value(feat).item() as f64);
        Ok((tape, v, feat, vv, fv, c.len()))
    });
    let forwards: Vec<_> = forwards.into_iter().collect::<Result<_>>()?;

    let tape = Tape::new();
    let ctx = model.ctx(&tape);
    let dc = model.config.contrast_dim;
    let vdata: Vec<f32> = forwards.iter().flat_map(|f| f.3.data().iter().copied()).collect();
    let vleaf = tape.var(Tensor::from_vec(vec![b, dc], vdata));
    let temb = model.text_embedding(&ctx, texts)?;
    let losses = contrastive_loss(&tape, vleaf, temb, ctx.p(model.log_tau))?;
    let cross = tape.value(losses.cross).item() as f64;
    let feat: f64 = forwards.iter().map(|f| f.4 * f.5 as f64 / b as f64).sum();
    check_finite(cross + feat, "pretrain loss")?;
    let g = tape.backward(losses.cross)?;
    let dv = g.get_or_zeros(vleaf, b * dc);
    let mut grads = tape.param_grads(&g, n_params);

    let mut work = Vec::with_capacity(forwards.len());
    let mut off = 0;
    for f in forwards {
        let n = f.5;
        work.push((f, off));
        off += n * dc;
    }
    let chunk_grads = exec.map(work, |((tape, v, feat, _, _, n), off)| -> Result<Grads> {
        let seeds = vec![(v, dv[off..off + n * dc].to_vec()), (feat, vec![n as f32 / b as f32])];
        let g = tape.backward_seeded(&seeds)?;
        Ok(tape.param_grads(&g, n_params))
    });
    for cg in chunk_grads {
        accumulate(&mut grads, cg?);
    }
    Ok((grads, cross, feat))
}

fn pretrain_epochs(run: &mut Runner<'_>, inputs: &[SegmentInput], targets: &[usize], bank: &DescriptionBank) -> Result<()> {
    let cfg = run.cfg.clone();
    let sched = cfg.schedule()?;
    let mut batch_rng = stream(cfg.seed, tag::BATCHES);
    let mut desc_rng = stream(cfg.seed, tag::BANK);
    let mut aug_rng = stream(cfg.seed, tag::AUGMENT);
    let mut text_cache: HashMap<String, Arc<TextFeature>> = HashMap::new();
    let buckets = run.model.config.buckets;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = sched.lr_at(epoch as f64);
        run.opt.set_lr(lr as f32)?;
        let mut sums = EpochSums::default();
        for idx in make_batches(targets, cfg.batch_size, Some(&mut batch_rng), cfg.dedup_classes) {
            let b = idx.len();
            let batch = gather(inputs, &idx, cfg.sigma_aug, &mut aug_rng);
            let texts: Vec<Arc<TextFeature>> = idx
                .iter()
                .map(|&i| {
                    let d = bank.sample(targets[i], &mut desc_rng, SampleMode::Train)?;
                    Ok(text_cache.entry(d.to_string()).or_insert_with(|| Arc::new(embed_text(d, buckets))).clone())
                })
                .collect::<Result<_>>()?;
            let trefs: Vec<&TextFeature> = texts.iter().map(|t| t.as_ref()).collect();
            let (grads, cross, feat) = pretrain_batch(run.model, &batch, &trefs, cfg.chunk, cfg.exec)?;
            run.step(grads)?;
            sums.add(b, cross, feat, 0.0, cross + feat);
        }
        let total = sums.mean(sums.total);
        check_finite(total, "pretrain epoch loss")?;
        run.log.epochs.push(EpochLog {
            epoch,
            lr,
            loss_cross: Some(sums.mean(sums.cross)),
            loss_feat: Some(sums.mean(sums.feat)),
            loss_cls: None,
            total,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("pretrain epoch {epoch} lr {lr:.2e} loss {total:.4}");
        run.last_good = run.model.params.clone();
    }
    Ok(())
}

/// Decoder features at the last step plus the per-segment feature loss, without gradients.
pub fn encode(model: &Model<f32>, inputs: &[SegmentInput], chunk: usize, exec: Exec) -> Result<(Vec<Vec<f32>>, f64)> {
    let parts = exec.map(inputs.chunks(chunk.max(1)).collect(), |c| -> Result<(Vec<Vec<f32>>, f64)> {
        let tape = Tape::new();
        let ctx = model.ctx(&tape);
        let refs: Vec<&SegmentInput> = c.iter().collect();
        let z = model.fuse(&ctx, &refs)?;
        let z_hat = model.anticipate(&ctx, z)?;
        let feat = tape.value(feature_loss(&tape, z_hat, z)?).item() as f64;
        let last = tape.value(model.last_step(&ctx, z_hat)?);
        let d = model.config.dim;
        Ok((last.data().chunks(d).map(<[f32]>::to_vec).collect(), feat * c.len() as f64))
    });
    let mut feats = Vec::with_capacity(inputs.len());
    let mut feat_sum = 0.0;
    for p in parts {
        let (f, s) = p?;
        feats.extend(f);
        feat_sum += s;
    }
    Ok((feats, feat_sum / inputs.len().max(1) as f64))
}

/// Stage 2: `L_cls + beta·L_feat`; frozen mode trains the classifier only.
pub fn finetune(model: &mut Model<f32>, inputs: &[SegmentInput], targets: &[usize], cfg: &StageConfig, checkpoint: Option<&Path>) -> Result<RunLog> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config("finetune needs a finetune stage config".into()));
    }
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Data(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= model.config.classes) {
        return Err(Error::Data(format!("target {t} outside {} classes", model.config.classes)));
    }
    cfg.validate()?;
    model.set_frozen(cfg.finetune_mode() == FinetuneMode::Frozen);
    let mut run = Runner::new(model, cfg, checkpoint)?;
    let result = match cfg.finetune_mode() {
        FinetuneMode::Frozen => frozen_epochs(&mut run, inputs, targets),
        FinetuneMode::Full => full_epochs(&mut run, inputs, targets),
    };
    run.model.params.set_all_trainable(true);
    match result {
        Ok(()) => run.finish(),
        Err(e) => Err(run.abort(e)),
    }
}

fn classifier_step(run: &mut Runner<'_>, feats: &[&[f32]], targets: &[usize]) -> Result<f64> {
    let model: &Model<f32> = run.model;
    let tape = Tape::new();
    let ctx = model.ctx(&tape);
    let d = model.config.dim;
    let x = tape.constant(Tensor::from_vec(vec![feats.len(), d], feats.concat()));
    let logits = model.classify(&ctx, x)?;
    let loss = classification_loss(&tape, logits, targets)?;
    let cls = tape.value(loss).item() as f64;
    check_finite(cls, "classification loss")?;
    let g = tape.backward(loss)?;
    let grads = tape.param_grads(&g, model.params.len());

    run.step(grads)?;
    Ok(cls)
}

fn frozen_epochs(run: &mut Runner<'_>, inputs: &[SegmentInput], targets: &[usize]) -> Result<()> {
    let cfg = run.cfg.clone();
    let sched = cfg.schedule()?;
    let mut batch_rng = stream(cfg.seed, tag::BATCHES);
    let mut aug_rng = stream(cfg.seed, tag::AUGMENT);
    let cached = if cfg.sigma_aug == 0.0 {
        Some(encode(run.model, inputs, cfg.chunk, cfg.exec)?)
    } else {
        None
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = sched.lr_at(epoch as f64);
        run.opt.set_lr(lr as f32)?;
        let mut sums = EpochSums::default();
        for idx in make_batches(targets, cfg.batch_size, Some(&mut batch_rng), cfg.dedup_classes) {
            let tgt: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let (cls, feat) = match &cached {
                Some((feats, feat)) => {
                    let rows: Vec<&[f32]> = idx.iter().map(|&i| feats[i].as_slice()).collect();
                    (classifier_step(run, &rows, &tgt)?, *feat)
                }
                None => {
                    let batch = gather(inputs, &idx, cfg.sigma_aug, &mut aug_rng);
                    let (feats, feat) = encode(run.model, &batch, cfg.chunk, cfg.exec)?;
                    let rows: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();
                    (classifier_step(run, &rows, &tgt)?, feat)
                }
            };
            sums.add(idx.len(), 0.0, feat, cls, cls + cfg.beta * feat);
        }
        push_finetune_epoch(run, epoch, lr, &sums, start)?;
    }
    Ok(())
}

fn full_epochs(run: &mut Runner<'_>, inputs: &[SegmentInput], targets: &[usize]) -> Result<()> {
    let cfg = run.cfg.clone();
    let sched = cfg.schedule()?;
    let mut batch_rng = stream(cfg.seed, tag::BATCHES);
    let mut aug_rng = stream(cfg.seed, tag::AUGMENT);
    let n_params = run.model.params.len();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = sched.lr_at(epoch as f64);
        run.opt.set_lr(lr as f32)?;
        let mut sums = EpochSums::default();
        for idx in make_batches(targets, cfg.batch_size, Some(&mut batch_rng), cfg.dedup_classes) {
            let b = idx.len();
            let batch = gather(inputs, &idx, cfg.sigma_aug, &mut aug_rng);
            let tgt: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let model: &Model<f32> = run.model;
            let work: Vec<(&[SegmentInput], &[usize])> = batch.chunks(cfg.chunk).zip(tgt.chunks(cfg.chunk)).collect();
            let parts = cfg.exec.map(work, |(c, t)| -> Result<(Grads, f64, f64)> {
                let tape = Tape::new();
                let ctx = model.ctx(&tape);
                let refs: Vec<&SegmentInput> = c.iter().collect();
                let out = model.forward(&ctx, &refs, Stage::Finetune)?;
                let cls = classification_loss(&tape, out.logits.expect("finetune forward yields logits"), t)?;
                let feat = feature_loss(&tape, out.z_hat, out.z)?;
                let w = c.len() as f32 / b as f32;
                let joint = tape.add(cls, tape.scale(feat, cfg.beta as f32))?;
                let loss = tape.scale(joint, w);
                let g = tape.backward(loss)?;
                Ok((
                    tape.param_grads(&g, n_params),
                    tape.value(cls).item() as f64 * w as f64,
                    tape.value(feat).item() as f64 * w as f64,
                ))
            });
            let mut grads = Vec::new();
            let (mut cls, mut feat) = (0.0, 0.0);
            for p in parts {
                let (g, c, f) = p?;
                accumulate(&mut grads, g);
                cls += c;
                feat += f;
            }
            check_finite(cls + feat, "finetune loss")?;
            run.step(grads)?;
            sums.add(b, 0.0, feat, cls, cls + cfg.beta * feat);
        }
        push_finetune_epoch(run, epoch, lr, &sums, start)?;
    }
    Ok(())
}

fn push_finetune_epoch(run: &mut Runner<'_>, epoch: usize, lr: f64, sums: &EpochSums, start: Instant) -> Result<()> {
    let total = sums.mean(sums.total);
    check_finite(total, "finetune epoch loss")?;
    run.log.epochs.push(EpochLog {
        epoch,
        lr,
        loss_cross: None,
        loss_feat: Some(sums.mean(sums.feat)),
        loss_cls: Some(sums.mean(sums.cls)),
        total,
        seconds: start.elapsed().as_secs_f64(),
    });
    log::info!("finetune epoch {epoch} lr {lr:.2e} loss {total:.4}");
    run.last_good = run.model.params.clone();
    Ok(())
}

/// Action logits for every input.
pub fn predict_logits(model: &Model<f32>, inputs: &[SegmentInput], chunk: usize, exec: Exec) -> Result<Vec<Vec<f32>>> {
    let parts = exec.map(inputs.chunks(chunk.max(1)).collect(), |c| -> Result<Vec<Vec<f32>>> {
        let tape = Tape::new();
        let ctx = model.ctx(&tape);
        let refs: Vec<&SegmentInput> = c.iter().collect();
        let out = model.forward(&ctx, &refs, Stage::Finetune)?;
        let logits = tape.value(out.logits.expect("finetune forward yields logits"));
        Ok(logits.data().chunks(model.config.classes).map(<[f32]>::to_vec).collect())
    });
    let mut out = Vec::with_capacity(inputs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn predictions(logits: Vec<Vec<f32>>, ids: &[String], targets: &[usize], participants: &[usize]) -> Vec<Prediction> {
    logits
        .into_iter()
        .enumerate()
        .map(|(i, scores)| Prediction {
            segment_id: ids[i].clone(),
            scores,
            target: targets[i],
            participant: participants[i],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModalitySpec, ModelConfig};
    use crate::text::generate_bank;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            fuser_layers: 1,
            decoder_layers: 1,
            contrast_dim: 8,
            buckets: 64,
            classes: 3,
            max_len: 4,
            modalities: vec![ModalitySpec::dense("rgb", 5), ModalitySpec::text("act_text")],
            ..ModelConfig::default()
        }
    }

    fn tiny_data(n: usize) -> (Vec<SegmentInput>, Vec<usize>, DescriptionBank) {
        let mut rng = stream(1, 1);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            let t = i % 3;
            let dense: Vec<f32> = (0..4 * 5).map(|j| noise.sample(&mut rng) as f32 + if j % 5 == t { 2.0 } else { 0.0 }).collect();
            let text = Arc::new(embed_text(&format!("a video containing the action: act {}", (t + 2) % 3), 64));
            inputs.push(SegmentInput {
                steps: 4,
                channels: vec![Some(Channel::Dense(Arc::new(dense))), Some(Channel::Text(vec![text; 4]))],
            });
            targets.push(t);
        }
        let names = vec![("take".into(), "cup".into()), ("wash".into(), "cup".into()), ("cut".into(), "bread".into())];
        let bank = generate_bank(&names, &[], 3, &mut rng);
        (inputs, targets, bank)
    }

    fn small_stage(stage: Stage) -> StageConfig {
        StageConfig {
            stage,
            epochs: 1,
            warmup: 0,
            base_lr: 0.05,
            batch_size: 4,
            chunk: 2,
            ..StageConfig::default()
        }
    }

    #[test]
    fn one_epoch_on_ten_segments_logs_one_epoch() {
        let (inputs, targets, bank) = tiny_data(10);
        let mut model = Model::<f32>::new(tiny_config(), 3).unwrap();
        let log = pretrain(&mut model, &inputs, &targets, &bank, &small_stage(Stage::Pretrain), None).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert!(log.epochs[0].loss_cross.is_some() && log.epochs[0].total.is_finite());
        assert!(log.to_csv().starts_with("epoch,lr,loss_cross,loss_feat,loss_cls,total,seconds\n0,"));
    }

    #[test]
    fn lr_trace_follows_schedule() {
        let (inputs, targets, bank) = tiny_data(8);
        let mut model = Model::<f32>::new(tiny_config(), 3).unwrap();
        let cfg = StageConfig {
            epochs: 5,
            warmup: 2,
            ..small_stage(Stage::Pretrain)
        };
        let log = pretrain(&mut model, &inputs, &targets, &bank, &cfg, None).unwrap();
        let s = cfg.schedule().unwrap();
        for e in &log.epochs {
            assert_eq!(e.lr, s.lr_at(e.epoch as f64));
        }
    }

    #[test]
    fn frozen_keeps_trunk_bitwise() {
        let (inputs, targets, _) = tiny_data(12);
        let mut model = Model::<f32>::new(tiny_config(), 3).unwrap();
        let before = model.params.clone();
        let cfg = StageConfig {
            epochs: 5,
            ..small_stage(Stage::Finetune)
        };
        finetune(&mut model, &inputs, &targets, &cfg, None).unwrap();
        let cls = model.classifier_ids();
        let mut changed = false;
        for id in model.params.ids() {
            let same = model.params.value(id).data() == before.value(id).data();
            if cls.contains(&id) {
                changed |= !same;
            } else {
                assert!(same, "{} moved", model.params.name(id));
            }
        }
        assert!(changed);
    }

    #[test]
    fn full_mode_moves_trunk() {
        let (inputs, targets, _) = tiny_data(12);
        let mut model = Model::<f32>::new(tiny_config(), 3).unwrap();
        let before = model.params.clone();
        let cfg = StageConfig {
            epochs: 2,
            warmup: 0,
            mode: Some(FinetuneMode::Full),
            ..small_stage(Stage::Finetune)
        };
        finetune(&mut model, &inputs, &targets, &cfg, None).unwrap();
        let id = model
            .params
            .id("fuser.block0.attn.wq.weight")
            .or_else(|| model.params.id("proj.rgb.weight"))
            .unwrap();
        assert_ne!(model.params.value(id).data(), before.value(id).data());
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (inputs, targets, bank) = tiny_data(10);
        let run = |exec| {
            let mut model = Model::<f32>::new(tiny_config(), 3).unwrap();
            let cfg = StageConfig {
                epochs: 2,
                exec,
                ..small_stage(Stage::Pretrain)
            };
            let log = pretrain(&mut model, &inputs, &targets, &bank, &cfg, None).unwrap();
            (log.totals(), crate::model::checkpoint_bytes(&model))
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }

    #[test]
    fn chunking_matches_single_tape_gradients() {
        let (inputs, targets, _) = tiny_data(8);
        let run = |chunk| {
            let mut model = Model::<f32>::new(tiny_config(), 3).unwrap();
            let cfg = StageConfig {
                epochs: 1,
                chunk,
                mode: Some(FinetuneMode::Full),
                ..small_stage(Stage::Finetune)
            };
            finetune(&mut model, &inputs, &targets, &cfg, None).unwrap();
            model.params.value(model.params.id("proj.rgb.weight").unwrap()).data().to_vec()
        };
        let (a, b) = (run(1), run(4));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn non_finite_loss_restores_last_good_and_saves() {
        let (mut inputs, targets, _) = tiny_data(8);
        let mut model = Model::<f32>::new(tiny_config(), 3).unwrap();
        let before = crate::model::checkpoint_bytes(&model);
        if let Some(Channel::Dense(v)) = &mut inputs[3].channels[0] {
            let mut w = v.as_ref().clone();
            w[0] = f32::NAN;
            *v = Arc::new(w);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let cfg = StageConfig {
            epochs: 1,
            mode: Some(FinetuneMode::Full),
            ..small_stage(Stage::Finetune)
        };
        let err = finetune(&mut model, &inputs, &targets, &cfg, Some(&path)).unwrap_err();
        assert!(err.is_numeric(), "{err}");
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }

    #[test]
    fn pretraining_lowers_the_loss() {
        let (inputs, targets, bank) = tiny_data(24);
        let mut model = Model::<f32>::new(tiny_config(), 3).unwrap();
        let cfg = StageConfig {
            epochs: 12,
            warmup: 1,
            ..small_stage(Stage::Pretrain)
        };
        let log = pretrain(&mut model, &inputs, &targets, &bank, &cfg, None).unwrap();
        let t = log.totals();
        assert!(t.last().unwrap() < &t[1], "{t:?}");
    }

    #[test]
    fn chunked_pretrain_gradients_match_one_tape() {
        let (inputs, _, _) = tiny_data(6);
        let model = Model::<f32>::new(tiny_config(), 5).unwrap();
        let texts: Vec<TextFeature> = (0..6).map(|i| embed_text(&format!("take the cup number {i}"), 64)).collect();
        let trefs: Vec<&TextFeature> = texts.iter().collect();
        let (grads, cross, feat) = pretrain_batch(&model, &inputs, &trefs, 4, Exec::Sequential).unwrap();

        let tape = Tape::new();
        let ctx = model.ctx(&tape);
        let refs: Vec<&SegmentInput> = inputs.iter().collect();
        let out = model.forward(&ctx, &refs, Stage::Pretrain).unwrap();
        let f = feature_loss(&tape, out.z_hat, out.z).unwrap();
        let t = model.text_embedding(&ctx, &trefs).unwrap();
        let c = contrastive_loss(&tape, out.video.unwrap(), t, ctx.p(model.log_tau)).unwrap();
        let total = tape.add(c.cross, f).unwrap();
        let want = tape.param_grads(&tape.backward(total).unwrap(), model.params.len());
        assert!((tape.value(c.cross).item() as f64 - cross).abs() < 1e-5);
        assert!((tape.value(f).item() as f64 - feat).abs() < 1e-5);
        for (id, (a, b)) in model.params.ids().zip(grads.iter().zip(&want)) {
            let (a, b) = (a.clone().unwrap_or_default(), b.clone().unwrap_or_default());
            assert_eq!(a.len(), b.len(), "{}", model.params.name(id));
            let scale = b.iter().fold(1e-6f32, |m, x| m.max(x.abs()));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-3 * scale, "{}: {x} vs {y}", model.params.name(id));
            }
        }
    }
}
