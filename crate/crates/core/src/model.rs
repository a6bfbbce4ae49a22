//! The full anticipation model: modality projectors, fuser, causal decoder,
//! contrastive heads and the action classifier.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use anticipate_tensor::{Bags, ParamId, ParamSet, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Fuser;
use crate::nn::{add_param, causal_mask, normal_tensor, strict_causal_mask, Ctx, EncoderBlock, LayerNorm, Linear, PositionalTable, INIT_STD};
use crate::rng::{stream, tag};
use crate::text::{TextFeature, DEFAULT_BUCKETS};

pub const MODALITY_NAMES: [&str; 6] = ["rgb", "flow", "audio", "obj_feat", "obj_text", "act_text"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModalityKind {
    Dense { dim: usize },
    Text,
}

/// Unknown keys are rejected by the flattened kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ModalityKind,
}

impl ModalitySpec {
    pub fn dense(name: &str, dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Dense { dim },
        }
    }

    pub fn text(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: ModalityKind::Text,
        }
    }
}

/// Which sequence position feeds the contrastive video head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    /// Decoder output at the last position.
    #[default]
    Anticipated,
    /// Fuser output at the last position.
    Fused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub fuser_layers: usize,
    pub decoder_layers: usize,
    pub contrast_dim: usize,
    pub n_fuse: usize,
    pub buckets: usize,
    pub classes: usize,
    pub max_len: usize,
    pub modalities: Vec<ModalitySpec>,
    pub anchor: Anchor,
    /// Decoder position `t` attends `1..t-1` only; the first position reads zeros.
    pub exclusive_mask: bool,
    pub missing_tokens: bool,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            fuser_layers: 2,
            decoder_layers: 4,
            contrast_dim: 64,
            n_fuse: 1,
            buckets: DEFAULT_BUCKETS,
            classes: 24,
            max_len: 32,
            modalities: default_modalities(),
            anchor: Anchor::Anticipated,
            exclusive_mask: false,
            missing_tokens: true,
            temperature: 0.07,
        }
    }
}

pub fn default_modalities() -> Vec<ModalitySpec> {
    vec![
        ModalitySpec::dense("rgb", 32),
        ModalitySpec::dense("flow", 16),
        ModalitySpec::dense("audio", 16),
        ModalitySpec::dense("obj_feat", 16),
        ModalitySpec::text("obj_text"),
        ModalitySpec::text("act_text"),
    ]
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(&format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.contrast_dim == 0 || self.classes == 0 || self.buckets == 0 || self.max_len == 0 {
            return bad("contrast_dim, classes, buckets and max_len must be positive");
        }
        if self.n_fuse == 0 {
            return bad("n_fuse must be at least 1");
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if !MODALITY_NAMES.contains(&m.name.as_str()) {
                return bad(&format!("unknown modality {:?}", m.name));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return bad(&format!("modality {:?} listed twice", m.name));
            }
            if m.kind == (ModalityKind::Dense { dim: 0 }) {
                return bad(&format!("modality {:?} has zero width", m.name));
            }
        }
        Ok(())
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    /// Keeps only the named modalities, in registry order.
    pub fn with_modalities(&self, names: &[String]) -> Result<Self> {
        for n in names {
            if self.modality_index(n).is_none() {
                return Err(Error::Config(format!("modality {n:?} is not registered")));
            }
        }
        let mut c = self.clone();
        c.modalities.retain(|m| names.contains(&m.name));
        if c.modalities.is_empty() {
            return Err(Error::Config("empty modality set".into()));
        }
        Ok(c)
    }
}

/// One modality's observations over the `T` steps of a segment.
#[derive(Clone, Debug)]
pub enum Channel {
    /// `T × dim`, row-major.
    Dense(Arc<Vec<f32>>),
    Text(Vec<Arc<TextFeature>>),
}

/// Model input for one segment; `channels[m]` follows the model's modality registry.
#[derive(Clone, Debug)]
pub struct SegmentInput {
    pub steps: usize,
    pub channels: Vec<Option<Channel>>,
}

#[derive(Clone, Debug)]
pub struct TextProjector {
    pub table: ParamId,
    pub bias: ParamId,
    pub buckets: usize,
}

impl TextProjector {
    pub fn new<F: Scalar>(params: &mut ParamSet<F>, name: &str, buckets: usize, out: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        Ok(Self {
            table: add_param(params, format!("{name}.table"), normal_tensor(&[buckets, out], INIT_STD, rng))?,
            bias: add_param(params, format!("{name}.bias"), Tensor::zeros(vec![out]))?,
            buckets,
        })
    }

    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, feats: &[&TextFeature]) -> Result<Var> {
        let bags: Vec<Vec<(usize, F)>> = feats
            .iter()
            .map(|f| {
                if f.buckets != self.buckets {
                    return Err(Error::Contract(format!(
                        "text feature of {} buckets for a {}-bucket projector",
                        f.buckets, self.buckets
                    )));
                }
                Ok(f.entries.iter().map(|&(i, v)| (i, F::from_f64_lossy(v as f64))).collect())
            })
            .collect::<Result<_>>()?;
        let t = ctx.tape;
        let y = t.embedding_bag(ctx.p(self.table), Bags::new(bags))?;
        Ok(t.add(y, ctx.p(self.bias))?)
    }
}

#[derive(Clone, Debug)]
pub enum Projector {
    Dense(Linear),
    Text(TextProjector),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub positions: PositionalTable,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub exclusive: bool,
}

impl Decoder {
    /// `[B, T, d] -> [B, T, d]`, causal over `T`.
    pub fn forward<F: Scalar>(&self, ctx: &Ctx<'_, F>, z: Var) -> Result<Var> {
        let t = ctx.tape;
        let s = t.shape(z);
        let steps = s[1];
        let pos = t.slice(ctx.p(self.positions.table), 0, 0, steps.min(self.positions.max_len))?;
        if steps > self.positions.max_len {
            return Err(Error::Contract(format!("{steps} steps exceed {} positions", self.positions.max_len)));
        }
        let mut x = t.add(z, pos)?;
        let mask = if self.exclusive { strict_causal_mask(steps) } else { causal_mask(steps) };
        for b in &self.blocks {
            x = b.forward(ctx, x, Some(&mask), self.exclusive)?;
        }
        self.ln_f.forward(ctx, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

pub struct ForwardOutput {
    /// `[B, T, d]`
    pub z: Var,
    /// `[B, T, d]`
    pub z_hat: Var,
    /// `[B, d]`
    pub anchor: Var,
    /// `[B, d_c]`, pretrain only.
    pub video: Option<Var>,
    /// `[B, C]`, finetune only.
    pub logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    pub projectors: Vec<Projector>,
    pub fuser: Fuser,
    pub decoder: Decoder,
    pub video_head: Linear,
    pub text_head: TextProjector,
    pub log_tau: ParamId,
    pub classifier: Linear,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, tag::INIT);
        let mut p = ParamSet::new();
        let c = &config;
        let projectors = c
            .modalities
            .iter()
            .map(|m| {
                Ok(match m.kind {
                    ModalityKind::Dense { dim } => Projector::Dense(Linear::new(&mut p, &format!("proj.{}", m.name), dim, c.dim, &mut rng)?),
                    ModalityKind::Text => Projector::Text(TextProjector::new(&mut p, &format!("proj.{}", m.name), c.buckets, c.dim, &mut rng)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fuser = Fuser::new(
            &mut p,
            "fuser",
            c.dim,
            c.heads,
            c.fuser_layers,
            c.modalities.len(),
            c.n_fuse,
            c.missing_tokens,
            &mut rng,
        )?;
        let decoder = Decoder {
            positions: PositionalTable::new(&mut p, "decoder.positions", c.max_len, c.dim, &mut rng)?,
            blocks: (0..c.decoder_layers)
                .map(|i| EncoderBlock::new(&mut p, &format!("decoder.block{i}"), c.dim, c.heads, &mut rng))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new(&mut p, "decoder.ln_f", c.dim)?,
            exclusive: c.exclusive_mask,
        };
        let video_head = Linear::new(&mut p, "head.video", c.dim, c.contrast_dim, &mut rng)?;
        let text_head = TextProjector::new(&mut p, "head.text", c.buckets, c.contrast_dim, &mut rng)?;
        let log_tau = add_param(
            &mut p,
            "head.log_tau".into(),
            Tensor::from_vec(vec![1], vec![F::from_f64_lossy(c.temperature.ln())]),
        )?;
        let classifier = Linear::new(&mut p, "classifier", c.dim, c.classes, &mut rng)?;
        Ok(Self {
            config,
            params: p,
            projectors,
            fuser,
            decoder,
            video_head,
            text_head,
            log_tau,
            classifier,
        })
    }

    pub fn classifier_ids(&self) -> [ParamId; 2] {
        [self.classifier.weight, self.classifier.bias]
    }

    /// Trains only the classifier when `frozen`, everything otherwise.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_all_trainable(!frozen);
        for id in self.classifier_ids() {
            self.params.set_trainable(id, true);
        }
    }

    pub fn ctx<'a>(&'a self, tape: &'a anticipate_tensor::Tape<F>) -> Ctx<'a, F> {
        Ctx::new(tape, &self.params)
    }

    /// `[B·T, M, d]` tokens plus per-(step, modality) presence flags.
    pub fn project_modalities(&self, ctx: &Ctx<'_, F>, batch: &[&SegmentInput]) -> Result<(Var, Vec<bool>)> {
        let t = ctx.tape;
        let b = batch.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let steps = batch[0].steps;
        let m = self.config.modalities.len();
        let rows = b * steps;
        let mut columns = Vec::with_capacity(m);
        let mut present = vec![false; rows * m];
        for seg in batch {
            if seg.steps != steps || seg.channels.len() != m {
                return Err(Error::Contract(format!(
                    "segment with {} steps and {} channels in a batch of {steps} steps and {m} modalities",
                    seg.steps,
                    seg.channels.len()
                )));
            }
        }
        for (j, (spec, proj)) in self.config.modalities.iter().zip(&self.projectors).enumerate() {
            let any = batch.iter().any(|s| s.channels[j].is_some());
            if !any {
                columns.push(t.constant(Tensor::zeros(vec![rows, 1, self.config.dim])));
                continue;
            }
            for (i, s) in batch.iter().enumerate() {
                if s.channels[j].is_some() {
                    for step in 0..steps {
                        present[(i * steps + step) * m + j] = true;
                    }
                }
            }
            let y = match (proj, &spec.kind) {
                (Projector::Dense(lin), ModalityKind::Dense { dim }) => {
                    let mut data = Vec::with_capacity(rows * dim);
                    for s in batch {
                        match &s.channels[j] {
                            Some(Channel::Dense(v)) if v.len() == steps * dim => data.extend(v.iter().map(|&x| F::from_f64_lossy(x as f64))),
                            None => data.extend(std::iter::repeat_n(F::zero(), steps * dim)),
                            _ => return Err(Error::Contract(format!("modality {} expects {steps}×{dim} dense values", spec.name))),
                        }
                    }
                    lin.forward(ctx, t.constant(Tensor::from_vec(vec![rows, *dim], data)))?
                }
                (Projector::Text(tp), ModalityKind::Text) => {
                    let empty = TextFeature {
                        entries: Vec::new(),
                        buckets: tp.buckets,
                        source: String::new(),
                    };
                    let mut feats: Vec<&TextFeature> = Vec::with_capacity(rows);
                    for s in batch {
                        match &s.channels[j] {
                            Some(Channel::Text(v)) if v.len() == steps => feats.extend(v.iter().map(|f| f.as_ref())),
                            None => feats.extend(std::iter::repeat_n(&empty, steps)),
                            _ => return Err(Error::Contract(format!("modality {} expects {steps} text features", spec.name))),
                        }
                    }
                    tp.forward(ctx, &feats)?
                }
                _ => unreachable!("projector kinds follow the registry"),
            };
            columns.push(t.reshape(y, &[rows, 1, self.config.dim])?);
        }
        let tokens = if m == 1 { columns[0] } else { t.concat(&columns, 1)? };
        Ok((tokens, present))
    }

    /// `[B, T, d]` fused sequence.
    pub fn fuse(&self, ctx: &Ctx<'_, F>, batch: &[&SegmentInput]) -> Result<Var> {
        let (tokens, present) = self.project_modalities(ctx, batch)?;
        let z = self.fuser.forward(ctx, tokens, &present)?;
        Ok(ctx.tape.reshape(z, &[batch.len(), batch[0].steps, self.config.dim])?)
    }

    pub fn anticipate(&self, ctx: &Ctx<'_, F>, z: Var) -> Result<Var> {
        self.decoder.forward(ctx, z)
    }

    /// Last position of a `[B, T, d]` sequence as `[B, d]`.
    pub fn last_step(&self, ctx: &Ctx<'_, F>, seq: Var) -> Result<Var> {
        let t = ctx.tape;
        let s = t.shape(seq);
        let last = t.slice(seq, 1, s[1] - 1, 1)?;
        Ok(t.reshape(last, &[s[0], s[2]])?)
    }

    pub fn video_embedding(&self, ctx: &Ctx<'_, F>, anchor: Var) -> Result<Var> {
        let y = self.video_head.forward(ctx, anchor)?;
        Ok(ctx.tape.l2_normalize(y, 1, F::from_f64_lossy(1e-12))?)
    }

    pub fn text_embedding(&self, ctx: &Ctx<'_, F>, feats: &[&TextFeature]) -> Result<Var> {
        let y = self.text_head.forward(ctx, feats)?;
        Ok(ctx.tape.l2_normalize(y, 1, F::from_f64_lossy(1e-12))?)
    }

    pub fn classify(&self, ctx: &Ctx<'_, F>, anchor: Var) -> Result<Var> {
        self.classifier.forward(ctx, anchor)
    }

    pub fn forward(&self, ctx: &Ctx<'_, F>, batch: &[&SegmentInput], stage: Stage) -> Result<ForwardOutput> {
        let z = self.fuse(ctx, batch)?;
        let z_hat = self.anticipate(ctx, z)?;
        let anchor = match self.config.anchor {
            Anchor::Anticipated => self.last_step(ctx, z_hat)?,
            Anchor::Fused => self.last_step(ctx, z)?,
        };
        let (video, logits) = match stage {
            Stage::Pretrain => (Some(self.video_embedding(ctx, anchor)?), None),
            Stage::Finetune => {
                let cls_in = self.last_step(ctx, z_hat)?;
                (None, Some(self.classify(ctx, cls_in)?))
            }
        };
        Ok(ForwardOutput {
            z,
            z_hat,
            anchor,
            video,
            logits,
        })
    }

    /// Decoder output at the last step, `[B, d]`, without keeping a tape around.
    pub fn features(&self, batch: &[&SegmentInput]) -> Result<Tensor<F>> {
        let tape = anticipate_tensor::Tape::new();
        let ctx = self.ctx(&tape);
        let z = self.fuse(&ctx, batch)?;
        let z_hat = self.anticipate(&ctx, z)?;
        Ok(tape.value(self.last_step(&ctx, z_hat)?))
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            projectors: self.projectors.clone(),
            fuser: self.fuser.clone(),
            decoder: self.decoder.clone(),
            video_head: self.video_head.clone(),
            text_head: self.text_head.clone(),
            log_tau: self.log_tau,
            classifier: self.classifier.clone(),
        }
    }
}

// ------------------------------------------------------------------ checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MATC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
}

pub fn manifest<F: Scalar>(params: &ParamSet<F>) -> Vec<ManifestEntry> {
    params
        .ids()
        .map(|id| ManifestEntry {
            name: params.name(id).to_string(),
            shape: params.value(id).shape().to_vec(),
        })
        .collect()
}

pub fn checkpoint_bytes(model: &Model<f32>) -> Vec<u8> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        tensors: manifest(&model.params),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for id in model.params.ids() {
        for v in model.params.value(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, path: &Path) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "checkpoint is truncated"))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f32>>)> {
    let mut at = 0;
    if take(bytes, &mut at, 4, path)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, path)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(take(bytes, &mut at, 4, path)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut at, len, path)?).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let mut values = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = take(bytes, &mut at, 4 * n, path)?;
        values.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
    }
    if at != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes after the last tensor", bytes.len() - at)));
    }
    Ok((header, values))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f32>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

/// Rebuilds the model described by the checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let (header, values) = read_checkpoint(path)?;
    let mut model = Model::new(header.config.clone(), 0)?;
    assign(&mut model, &header.tensors, values)?;
    Ok(model)
}

/// Loads checkpoint tensors into an existing model, which must have the same manifest.
pub fn load_into(model: &mut Model<f32>, path: &Path) -> Result<()> {
    let (header, values) = read_checkpoint(path)?;
    assign(model, &header.tensors, values)
}

fn assign(model: &mut Model<f32>, tensors: &[ManifestEntry], values: Vec<Vec<f32>>) -> Result<()> {
    let expected = manifest(&model.params);
    let mut problems = Vec::new();
    for e in &expected {
        match tensors.iter().find(|t| t.name == e.name) {
            None => problems.push(format!("{} missing from checkpoint", e.name)),
            Some(t) if t.shape != e.shape => problems.push(format!("{} has shape {:?}, model expects {:?}", e.name, t.shape, e.shape)),
            _ => {}
        }
    }
    for t in tensors {
        if !expected.iter().any(|e| e.name == t.name) {
            problems.push(format!("{} is not a model tensor", t.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Mismatch(problems.join("; ")));
    }
    for (t, v) in tensors.iter().zip(values) {
        let id = model.params.id(&t.name).expect("checked above");
        model.params.set_value(id, Tensor::from_vec(t.shape.clone(), v))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::embed_text;
    use anticipate_tensor::Tape;

    fn small_config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            fuser_layers: 1,
            decoder_layers: 2,
            contrast_dim: 8,
            buckets: 64,
            classes: 6,
            max_len: 8,
            modalities: vec![ModalitySpec::dense("rgb", 4), ModalitySpec::dense("flow", 3), ModalitySpec::text("act_text")],
            ..ModelConfig::default()
        }
    }

    pub(crate) fn segment(steps: usize, seed: u64, buckets: usize) -> SegmentInput {
        let rgb = normal_tensor::<f32>(&[steps * 4], 1.0, &mut stream(seed, 1)).into_vec();
        let flow = normal_tensor::<f32>(&[steps * 3], 1.0, &mut stream(seed, 2)).into_vec();
        let text = (0..steps)
            .map(|i| Arc::new(embed_text(&format!("wash plate {}", (seed + i as u64) % 3), buckets)))
            .collect();
        SegmentInput {
            steps,
            channels: vec![
                Some(Channel::Dense(Arc::new(rgb))),
                Some(Channel::Dense(Arc::new(flow))),
                Some(Channel::Text(text)),
            ],
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let c = ModelConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<ModelConfig>("{\"dimm\": 3}").is_err());
        let bad = r#"{"modalities": [{"name": "rgb", "kind": "dense", "dim": 3, "extra": 1}]}"#;
        assert!(serde_json::from_str::<ModelConfig>(bad).is_err());
        assert!(ModelConfig { dim: 10, ..c.clone() }.validate().is_err());
        assert!(c.with_modalities(&["rgb".into(), "bogus".into()]).is_err());
        assert_eq!(c.with_modalities(&["act_text".into(), "rgb".into()]).unwrap().modalities.len(), 2);
    }

    #[test]
    fn identity_projector_passes_tokens_through() {
        let c = ModelConfig {
            modalities: vec![ModalitySpec::dense("rgb", 16)],
            ..small_config()
        };
        let mut m = Model::<f64>::new(c, 1).unwrap();
        let Projector::Dense(lin) = m.projectors[0].clone() else { panic!() };
        let mut eye = vec![0.0; 256];
        for i in 0..16 {
            eye[i * 17] = 1.0;
        }
        m.params.set_value(lin.weight, Tensor::from_vec(vec![16, 16], eye)).unwrap();
        let raw: Vec<f32> = (0..32).map(|i| i as f32 * 0.25).collect();
        let seg = SegmentInput {
            steps: 2,
            channels: vec![Some(Channel::Dense(Arc::new(raw.clone())))],
        };
        let tape = Tape::new();
        let ctx = m.ctx(&tape);
        let (tok, _) = m.project_modalities(&ctx, &[&seg]).unwrap();
        let out = tape.value(tok);
        assert_eq!(out.shape(), &[2, 1, 16]);
        for (a, b) in out.data().iter().zip(&raw) {
            assert_eq!(*a, *b as f64);
        }
        // zero input gives the bias
        m.params.value_mut(lin.bias).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let seg = SegmentInput {
            steps: 1,
            channels: vec![Some(Channel::Dense(Arc::new(vec![0.0; 16])))],
        };
        let tape = Tape::new();
        let ctx = m.ctx(&tape);
        let (tok, _) = m.project_modalities(&ctx, &[&seg]).unwrap();
        assert_eq!(tape.value(tok).data(), m.params.value(lin.bias).data());
    }

    #[test]
    fn projection_shapes() {
        let m = Model::<f32>::new(small_config(), 1).unwrap();
        let segs = [segment(5, 1, 64), segment(5, 2, 64)];
        let tape = Tape::new();
        let ctx = m.ctx(&tape);
        let (tok, present) = m.project_modalities(&ctx, &[&segs[0], &segs[1]]).unwrap();
        assert_eq!(tape.shape(tok), vec![10, 3, 16]);
        assert!(present.iter().all(|&p| p));
    }

    #[test]
    fn stage_outputs() {
        let m = Model::<f32>::new(small_config(), 1).unwrap();
        let seg = segment(6, 3, 64);
        let tape = Tape::new();
        let ctx = m.ctx(&tape);
        let pre = m.forward(&ctx, &[&seg], Stage::Pretrain).unwrap();
        assert!(pre.logits.is_none());
        let v = tape.value(pre.video.unwrap());
        assert_eq!(v.shape(), &[1, 8]);
        assert!((v.data().iter().map(|x| x * x).sum::<f32>() - 1.0).abs() < 1e-5);
        let fin = m.forward(&ctx, &[&seg], Stage::Finetune).unwrap();
        assert!(fin.video.is_none());
        assert_eq!(tape.shape(fin.logits.unwrap()), vec![1, 6]);
        assert_eq!(tape.shape(fin.z_hat), vec![1, 6, 16]);
    }

    #[test]
    fn batch_rows_are_independent_and_permutable() {
        let m = Model::<f64>::new(small_config(), 2).unwrap();
        let segs: Vec<SegmentInput> = (0..4).map(|i| segment(4, 10 + i, 64)).collect();
        let run = |order: &[usize]| {
            let tape = Tape::new();
            let ctx = m.ctx(&tape);
            let b: Vec<&SegmentInput> = order.iter().map(|&i| &segs[i]).collect();
            tape.value(m.forward(&ctx, &b, Stage::Finetune).unwrap().logits.unwrap())
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[2, 0, 3, 1]);
        for (slot, &i) in [2usize, 0, 3, 1].iter().enumerate() {
            for c in 0..6 {
                assert!((a.get(&[i, c]) - b.get(&[slot, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = Model::<f32>::new(small_config(), 4).unwrap();
        let seg = segment(8, 5, 64);
        let tape = Tape::new();
        let ctx = m.ctx(&tape);
        let z = m.fuse(&ctx, &[&seg]).unwrap();
        let zv = tape.value(z);
        let base = tape.value(m.anticipate(&ctx, z).unwrap());
        let mut pert = zv.clone();
        for v in &mut pert.data_mut()[7 * 16..] {
            *v += 3.0;
        }
        let moved = tape.value(m.anticipate(&ctx, tape.constant(pert)).unwrap());
        assert_eq!(&base.data()[..7 * 16], &moved.data()[..7 * 16]);
        assert_ne!(&base.data()[7 * 16..], &moved.data()[7 * 16..]);
    }

    #[test]
    fn single_step_sequence() {
        for exclusive in [false, true] {
            let m = Model::<f32>::new(
                ModelConfig {
                    exclusive_mask: exclusive,
                    ..small_config()
                },
                4,
            )
            .unwrap();
            let seg = segment(1, 5, 64);
            let tape = Tape::new();
            let out = m.forward(&m.ctx(&tape), &[&seg], Stage::Finetune).unwrap();
            assert_eq!(tape.shape(out.z_hat), vec![1, 1, 16]);
            assert!(tape.value(out.z_hat).is_finite());
        }
    }

    #[test]
    fn unit_embeddings_and_scale_invariance() {
        let mut m = Model::<f64>::new(small_config(), 6).unwrap();
        m.params.value_mut(m.video_head.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let ctx = m.ctx(&tape);
        let x = normal_tensor::<f64>(&[2, 16], 1.0, &mut stream(7, 1));
        let x3 = Tensor::from_vec(vec![2, 16], x.data().iter().map(|v| v * 3.0).collect());
        let a = tape.value(m.video_embedding(&ctx, tape.constant(x)).unwrap());
        let b = tape.value(m.video_embedding(&ctx, tape.constant(x3)).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        let t1 = embed_text("wash the plate", 64);
        let t2 = embed_text("wash the plate", 64);
        let e = tape.value(m.text_embedding(&ctx, &[&t1, &t2]).unwrap());
        assert_eq!(&e.data()[..8], &e.data()[8..]);
        assert!((e.data()[..8].iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn classifier_with_zero_weights_returns_bias() {
        let mut m = Model::<f64>::new(small_config(), 6).unwrap();
        m.params.value_mut(m.classifier.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.params
            .value_mut(m.classifier.bias)
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 - 2.0);
        let tape = Tape::new();
        let ctx = m.ctx(&tape);
        let x = tape.constant(normal_tensor(&[3, 16], 1.0, &mut stream(8, 1)));
        let y = tape.value(m.classify(&ctx, x).unwrap());
        for r in 0..3 {
            for c in 0..6 {
                assert_eq!(y.get(&[r, c]), c as f64 - 2.0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(small_config(), 9).unwrap();
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.config, m.config);
        for id in m.params.ids() {
            assert_eq!(m.params.value(id).data(), back.params.value(id).data());
        }
        assert_eq!(checkpoint_bytes(&back), std::fs::read(&p).unwrap());
        let names: Vec<String> = manifest(&m.params).into_iter().map(|e| e.name).collect();
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        assert_eq!(names.len(), m.params.len());
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let m = Model::<f32>::new(small_config(), 9).unwrap();
        let bytes = checkpoint_bytes(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad, Path::new("c")), Err(Error::Format { .. })));
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3], Path::new("c")).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(parse_checkpoint(&v2, Path::new("c")).is_err());
    }

    #[test]
    fn mismatched_checkpoint_lists_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&Model::<f32>::new(small_config(), 9).unwrap(), &p).unwrap();
        let mut other = Model::<f32>::new(ModelConfig { classes: 7, ..small_config() }, 9).unwrap();
        let err = load_into(&mut other, &p).unwrap_err().to_string();
        assert!(err.contains("classifier.weight") && err.contains("classifier.bias"), "{err}");
    }
}
