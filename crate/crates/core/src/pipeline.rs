//! Experiment configuration and the end-to-end pretrain → finetune → evaluate flow.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{corrupt_actions, select_modalities, Corpus, InputBuilder, Segment};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{build_report, split_masks, Marginal, MetricsReport, Prediction, SplitCells};
use crate::model::{load_checkpoint, ModalityKind, Model, ModelConfig, SegmentInput, Stage};
use crate::rng::{stream, tag};
use crate::synthworld::WorldConfig;
use crate::trainer::{finetune, predict_logits, predictions, pretrain, FinetuneMode, RunLog, StageConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Also carries the observation window.
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    /// Modalities to keep; all registered ones when unset.
    pub modalities: Option<Vec<String>>,
    /// Probability of keeping each true frame label in the action-text stream.
    pub corruption_p: f64,
    pub seed: u64,
    pub marginal: Marginal,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig::pretrain(),
            finetune: StageConfig::finetune(FinetuneMode::Frozen),
            modalities: None,
            corruption_p: 1.0,
            seed: 7,
            marginal: Marginal::Sum,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.pretrain.stage != Stage::Pretrain || self.finetune.stage != Stage::Finetune {
            return Err(Error::Config("stage configs must be a pretrain and a finetune stage".into()));
        }
        if self.model.classes != self.world.classes {
            return Err(Error::Config(format!("model has {} classes, world {}", self.model.classes, self.world.classes)));
        }
        if self.model.max_len < self.world.window.steps() {
            return Err(Error::Config(format!(
                "model max_len {} below {} window steps",
                self.model.max_len,
                self.world.window.steps()
            )));
        }
        for m in &self.model.modalities {
            if let ModalityKind::Dense { dim } = m.kind {
                match self.world.emissions.iter().find(|e| e.modality == m.name) {
                    Some(e) if e.dim == dim => {}
                    Some(e) => return Err(Error::Config(format!("modality {} is {dim}-wide in the model, {} in the world", m.name, e.dim))),
                    None => return Err(Error::Config(format!("the world emits no {} features", m.name))),
                }
            }
        }
        if let Some(keep) = &self.modalities {
            self.model.with_modalities(keep)?;
        }
        if !(0.0..=1.0).contains(&self.corruption_p) {
            return Err(Error::Config(format!("corruption_p {} outside [0, 1]", self.corruption_p)));
        }
        Ok(())
    }

    /// Budget that fits a desktop CPU on the synthetic world.
    ///
    /// Higher learning rates than the paper's 1e-3, short warmups and a 0.5
    /// temperature; at 0.07 the contrastive stage collapses at this scale.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.temperature = 0.5;
        c.pretrain.warmup = 6;
        c.pretrain.base_lr = 0.01;
        c.finetune.warmup = 6;
        c.finetune.base_lr = 0.05;
        c
    }

    /// Model config restricted to the selected modalities.
    pub fn model_config(&self) -> Result<ModelConfig> {
        match &self.modalities {
            Some(keep) => self.model.with_modalities(keep),
            None => Ok(self.model.clone()),
        }
    }
}

/// Model inputs plus the bookkeeping needed for predictions.
#[derive(Clone, Debug, Default)]
pub struct DataSet {
    pub inputs: Vec<SegmentInput>,
    pub targets: Vec<usize>,
    pub ids: Vec<String>,
    pub participants: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corruption {
    pub p: f64,
    pub seed: u64,
}

impl DataSet {
    pub fn build(corpus: &Corpus, segs: &[Segment], config: &ModelConfig, corruption: Option<Corruption>, keep: Option<&[String]>) -> Result<Self> {
        let mut builder = InputBuilder::new(&corpus.vocab, config);
        let mut rng = corruption.map(|c| stream(c.seed, tag::CORRUPTION));
        let mut inputs = Vec::with_capacity(segs.len());
        for s in segs {
            let labels = match (&mut rng, corruption) {
                (Some(r), Some(c)) => Some(corrupt_actions(&s.labels, c.p, r, corpus.vocab.classes())),
                _ => None,
            };
            inputs.push(builder.build(s, labels.as_deref())?);
        }
        if let Some(keep) = keep {
            select_modalities(&mut inputs, config, keep)?;
        }
        Ok(Self {
            inputs,
            targets: segs.iter().map(Segment::target).collect(),
            ids: segs.iter().map(|s| s.annotation.narration_id.clone()).collect(),
            participants: segs.iter().map(|s| s.annotation.participant_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn train_counts(corpus: &Corpus) -> Vec<usize> {
    let mut counts = vec![0; corpus.vocab.classes()];
    for s in &corpus.train {
        counts[s.target()] += 1;
    }
    counts
}

#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub keep: Option<&'a [String]>,
    pub corruption: Option<Corruption>,
    pub marginal: Marginal,
    pub chunk: usize,
    pub exec: Exec,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            keep: None,
            corruption: None,
            marginal: Marginal::Sum,
            chunk: 16,
            exec: Exec::default(),
        }
    }
}

pub fn evaluate(model: &Model<f32>, corpus: &Corpus, opts: &EvalOptions<'_>) -> Result<(MetricsReport, Vec<Prediction>)> {
    corpus.check_model(&model.config)?;
    let set = DataSet::build(corpus, &corpus.eval, &model.config, opts.corruption, opts.keep)?;
    if set.is_empty() {
        return Err(Error::Data("the evaluation split is empty".into()));
    }
    let logits = predict_logits(model, &set.inputs, opts.chunk, opts.exec)?;
    let preds = predictions(logits, &set.ids, &set.targets, &set.participants);
    let masks = split_masks(&preds, &train_counts(corpus), &corpus.manifest.held_out_participants);
    Ok((build_report(&preds, &corpus.vocab, &masks, opts.marginal)?, preds))
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub model: Model<f32>,
    pub pretrain: Option<RunLog>,
    pub finetune: RunLog,
    pub report: MetricsReport,
}

/// Paths for `run_pipeline` artifacts; all optional.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub pretrain_checkpoint: Option<PathBuf>,
    pub finetune_checkpoint: Option<PathBuf>,
}

pub fn run_pretrain(corpus: &Corpus, exp: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(Model<f32>, RunLog)> {
    let config = exp.model_config()?;
    corpus.check_model(&config)?;
    let mut model = Model::<f32>::new(config, exp.seed)?;
    let set = DataSet::build(corpus, &corpus.train, &model.config, None, None)?;
    let cfg = StageConfig {
        seed: exp.seed,
        ..exp.pretrain.clone()
    };
    let log = pretrain(&mut model, &set.inputs, &set.targets, &corpus.bank, &cfg, checkpoint)?;
    Ok((model, log))
}

pub fn run_finetune(model: &mut Model<f32>, corpus: &Corpus, exp: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunLog> {
    corpus.check_model(&model.config)?;
    let set = DataSet::build(corpus, &corpus.train, &model.config, None, None)?;
    let cfg = StageConfig {
        seed: exp.seed,
        ..exp.finetune.clone()
    };
    finetune(model, &set.inputs, &set.targets, &cfg, checkpoint)
}

/// Pretrain (unless `skip_pretrain`), finetune, then evaluate with clean labels.
pub fn run_pipeline(corpus: &Corpus, exp: &ExperimentConfig, skip_pretrain: bool, artifacts: &Artifacts) -> Result<PipelineRun> {
    let (mut model, pre) = if skip_pretrain {
        let config = exp.model_config()?;
        corpus.check_model(&config)?;
        (Model::<f32>::new(config, exp.seed)?, None)
    } else {
        let (m, log) = run_pretrain(corpus, exp, artifacts.pretrain_checkpoint.as_deref())?;
        (m, Some(log))
    };
    let fine = run_finetune(&mut model, corpus, exp, artifacts.finetune_checkpoint.as_deref())?;
    let opts = EvalOptions {
        marginal: exp.marginal,
        exec: exp.finetune.exec,
        ..EvalOptions::default()
    };
    let (report, _) = evaluate(&model, corpus, &opts)?;
    Ok(PipelineRun {
        model,
        pretrain: pre,
        finetune: fine,
        report,
    })
}

/// Evaluates `model` with the action-text stream corrupted at each keep probability.
pub fn sweep_actions(model: &Model<f32>, corpus: &Corpus, ps: &[f64], seed: u64, marginal: Marginal, exec: Exec) -> Result<Vec<(f64, MetricsReport)>> {
    if model.config.modality_index("act_text").is_none() {
        log::warn!("the model has no act_text modality; every sweep row will be identical");
    }
    let mut rows = Vec::with_capacity(ps.len());
    for &p in ps {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("keep probability {p} outside [0, 1]")));
        }
        let opts = EvalOptions {
            corruption: Some(Corruption { p, seed }),
            marginal,
            exec,
            ..EvalOptions::default()
        };
        let (report, _) = evaluate(model, corpus, &opts)?;
        log::info!("p={p}: action top1 {:.4}", report.action_top1());
        rows.push((p, report));
    }
    Ok(rows)
}

/// Parses `"rgb; rgb,act_text"` into modality sets.
pub fn parse_sets(text: &str) -> Result<Vec<Vec<String>>> {
    let sets: Vec<Vec<String>> = text
        .split(';')
        .map(|s| s.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    if sets.is_empty() {
        return Err(Error::Config(format!("no modality sets in {text:?}")));
    }
    Ok(sets)
}

/// Trains and evaluates one pipeline per modality set.
///
/// With `mask_only`, the given model is evaluated with the other modalities
/// dropped instead of retraining.
pub fn ablate_modalities(
    corpus: &Corpus,
    exp: &ExperimentConfig,
    sets: &[Vec<String>],
    checkpoint_dir: Option<&Path>,
    mask_only: Option<&Model<f32>>,
) -> Result<Vec<(String, MetricsReport)>> {
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let label = set.join(",");
        let report = match mask_only {
            Some(model) => {
                model.config.with_modalities(set)?;
                let opts = EvalOptions {
                    keep: Some(set),
                    marginal: exp.marginal,
                    exec: exp.finetune.exec,
                    ..EvalOptions::default()
                };
                evaluate(model, corpus, &opts)?.0
            }
            None => {
                let cell = ExperimentConfig {
                    modalities: Some(set.clone()),
                    ..exp.clone()
                };
                cell.validate()?;
                let artifacts = Artifacts {
                    pretrain_checkpoint: checkpoint_dir.map(|d| d.join(format!("{}.pretrain.ckpt", label.replace(',', "+")))),
                    finetune_checkpoint: checkpoint_dir.map(|d| d.join(format!("{}.finetune.ckpt", label.replace(',', "+")))),
                };
                if let Some(d) = checkpoint_dir {
                    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                run_pipeline(corpus, &cell, false, &artifacts)?.report
            }
        };
        log::info!("{label}: action top1 {:.4}", report.action_top1());
        rows.push((label, report));
    }
    Ok(rows)
}

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "top1_action",
    "top5_action",
    "cm_recall5_action",
    "top1_verb",
    "top5_verb",
    "top1_noun",
    "top5_noun",
];

/// One row per labelled report; the first column is named `key`.
pub fn summary_csv(key: &str, rows: &[(String, &MetricsReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![key];
    header.extend(SUMMARY_COLUMNS);
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for (label, r) in rows {
        let o = |c: &SplitCells| c.overall.clone();
        let (a, v, n) = (o(&r.action), o(&r.verb), o(&r.noun));
        let rec = [
            label.clone(),
            f(a.top1),
            f(a.top5),
            f(a.class_mean_recall5),
            f(v.top1),
            f(v.top5),
            f(n.top1),
            f(n.top5),
        ];
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Loads a checkpoint and checks it against the corpus.
pub fn load_for(corpus: &Corpus, path: &Path) -> Result<Model<f32>> {
    let model = load_checkpoint(path)?;
    corpus.check_model(&model.config)?;
    Ok(model)
}
