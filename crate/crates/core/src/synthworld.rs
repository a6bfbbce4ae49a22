//! Synthetic multi-modal anticipation world: a sparse Markov chain over actions,
//! Gaussian feature emissions per modality, noisy object detections, and the
//! brute-force label oracle.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, frames_path, top_objects, write_annotations, write_features, write_frames, Annotation, CorpusManifest, FrameAnnotation, WindowConfig,
    OBJECT_THRESHOLD, OBJECT_TOP_K,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{episode_stream, stream, tag, Rng};
use crate::text::generate_bank;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Informs {
    Verb,
    Noun,
    Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionConfig {
    pub modality: String,
    pub dim: usize,
    pub informs: Informs,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
    pub classes: usize,
    /// Nonzero successors per transition row.
    pub successors: usize,
    pub dirichlet_alpha: f64,
    pub dwell_min: usize,
    pub dwell_max: usize,
    pub emissions: Vec<EmissionConfig>,
    /// Probability that the active noun is detected in a frame.
    pub p_hit: f64,
    /// Poisson rate of distractor detections per frame.
    pub distractor_rate: f64,
    pub participants: usize,
    pub held_out_participants: Vec<usize>,
    /// Per-participant feature offset scale.
    pub participant_sigma: f64,
    pub videos: usize,
    pub frames_per_video: usize,
    /// Seen-participant videos whose round index is a multiple of this go to evaluation.
    pub eval_stride: usize,
    pub max_train: usize,
    pub max_eval: usize,
    pub descriptions_per_class: usize,
    pub window: WindowConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            verbs: s(&["take", "put", "wash", "cut", "open", "close"]),
            nouns: s(&["plate", "knife", "bag", "tap"]),
            classes: 24,
            successors: 3,
            dirichlet_alpha: 1.0,
            dwell_min: 3,
            dwell_max: 8,
            emissions: vec![
                EmissionConfig {
                    modality: "rgb".into(),
                    dim: 32,
                    informs: Informs::Action,
                    sigma: 2.5,
                },
                EmissionConfig {
                    modality: "flow".into(),
                    dim: 16,
                    informs: Informs::Verb,
                    sigma: 2.0,
                },
                EmissionConfig {
                    modality: "audio".into(),
                    dim: 16,
                    informs: Informs::Verb,
                    sigma: 3.0,
                },
                EmissionConfig {
                    modality: "obj_feat".into(),
                    dim: 16,
                    informs: Informs::Noun,
                    sigma: 2.0,
                },
            ],
            p_hit: 0.9,
            distractor_rate: 1.0,
            participants: 10,
            held_out_participants: vec![8, 9],
            participant_sigma: 0.2,
            videos: 100,
            frames_per_video: 300,
            eval_stride: 5,
            max_train: 2000,
            max_eval: 500,
            descriptions_per_class: 10,
            window: WindowConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (v, n, c) = (self.verbs.len(), self.nouns.len(), self.classes);
        if v == 0 || n == 0 {
            return bad("the world needs verbs and nouns".into());
        }
        if c > v * n {
            return bad(format!("{c} actions exceed {v}×{n} verb-noun pairs"));
        }
        if c < v.max(n) {
            return bad(format!("{c} actions cannot cover {v} verbs and {n} nouns"));
        }
        if self.successors == 0 || (c > 1 && self.successors > c - 1) {
            return bad(format!("{} successors per row with {c} actions", self.successors));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return bad("dirichlet_alpha must be positive".into());
        }
        if self.dwell_min == 0 || self.dwell_min > self.dwell_max {
            return bad(format!("dwell range [{}, {}]", self.dwell_min, self.dwell_max));
        }
        if !(0.0..=1.0).contains(&self.p_hit) || !(self.distractor_rate >= 0.0) || !(self.participant_sigma >= 0.0) {
            return bad("p_hit must be in [0, 1]; rates and scales non-negative".into());
        }
        for e in &self.emissions {
            if !(e.sigma > 0.0) || e.dim == 0 {
                return bad(format!("emission {} needs sigma > 0 and a positive width", e.modality));
            }
            if !["rgb", "flow", "audio", "obj_feat"].contains(&e.modality.as_str()) {
                return bad(format!("emission modality {:?} is not a dense modality", e.modality));
            }
        }
        if self.participants == 0 || self.held_out_participants.iter().any(|&p| p >= self.participants) {
            return bad("held-out participants must be below the participant count".into());
        }
        if self.eval_stride == 0 {
            return bad("eval_stride must be positive".into());
        }
        self.window.validate()
    }

    pub fn is_eval_video(&self, video: usize) -> bool {
        let participant = video % self.participants;
        self.held_out_participants.contains(&participant) || (video / self.participants).is_multiple_of(self.eval_stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Emission {
    pub config: EmissionConfig,
    /// One mean per informed class.
    pub means: Vec<Vec<f32>>,
    /// One offset per participant.
    pub offsets: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub seed: u64,
    pub vocab: Vocab,
    /// Row-stochastic `C × C`.
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub emissions: Vec<Emission>,
}

fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f32> {
    let d = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).unwrap();
    (0..n).map(|_| if std == 0.0 { 0.0 } else { d.sample(rng) as f32 }).collect()
}

pub fn build_vocab(config: &WorldConfig, rng: &mut Rng) -> Result<Vocab> {
    let (v, n, c) = (config.verbs.len(), config.nouns.len(), config.classes);
    let mut pairs: Vec<(usize, usize)> = if c == v * n {
        (0..v).flat_map(|a| (0..n).map(move |b| (a, b))).collect()
    } else {
        let mut chosen: Vec<(usize, usize)> = (0..v.max(n)).map(|i| (i % v, i % n)).collect();
        chosen.dedup();
        let rest: Vec<(usize, usize)> = (0..v).flat_map(|a| (0..n).map(move |b| (a, b))).filter(|p| !chosen.contains(p)).collect();
        for i in sample(rng, rest.len(), c - chosen.len()).into_iter() {
            chosen.push(rest[i]);
        }
        chosen
    };
    pairs.sort();
    Vocab::new(config.verbs.clone(), config.nouns.clone(), pairs)
}

pub fn build_world(config: &WorldConfig, seed: u64) -> Result<WorldSpec> {
    config.validate()?;
    let mut rng = stream(seed, tag::WORLD);
    let vocab = build_vocab(config, &mut rng)?;
    let c = vocab.classes();
    let gamma = Gamma::new(config.dirichlet_alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut transition = vec![vec![0.0; c]; c];
    for (a, row) in transition.iter_mut().enumerate() {
        if c == 1 {
            row[0] = 1.0;
            continue;
        }
        let others: Vec<usize> = (0..c).filter(|&b| b != a).collect();
        let succ: Vec<usize> = sample(&mut rng, others.len(), config.successors).into_iter().map(|i| others[i]).collect();
        let w: Vec<f64> = succ.iter().map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
        let total: f64 = w.iter().sum();
        for (&b, &x) in succ.iter().zip(&w) {
            row[b] = x / total;
        }
    }
    let emissions = config
        .emissions
        .iter()
        .map(|e| {
            let count = match e.informs {
                Informs::Verb => vocab.verbs.len(),
                Informs::Noun => vocab.nouns.len(),
                Informs::Action => c,
            };
            Emission {
                config: e.clone(),
                means: (0..count).map(|_| normal_vec(&mut rng, e.dim, 1.0)).collect(),
                offsets: (0..config.participants)
                    .map(|_| normal_vec(&mut rng, e.dim, config.participant_sigma))
                    .collect(),
            }
        })
        .collect();
    Ok(WorldSpec {
        config: config.clone(),
        seed,
        vocab,
        transition,
        initial: vec![1.0 / c as f64; c],
        emissions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub video_id: usize,
    pub participant_id: usize,
    pub actions: Vec<usize>,
    pub objects: Vec<Vec<String>>,
    /// Per emission, `frames × dim` row-major.
    pub features: Vec<Vec<f32>>,
}

fn draw(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

impl WorldSpec {
    pub fn classes(&self) -> usize {
        self.vocab.classes()
    }

    fn informed_class(&self, e: &Emission, action: usize) -> usize {
        match e.config.informs {
            Informs::Verb => self.vocab.verb_of(action),
            Informs::Noun => self.vocab.noun_of(action),
            Informs::Action => action,
        }
    }

    /// Per-frame action sequence with dwell times.
    pub fn sample_actions(&self, frames: usize, rng: &mut Rng) -> Vec<usize> {
        let c = &self.config;
        let mut out = Vec::with_capacity(frames);
        let mut a = draw(&self.initial, rng);
        while out.len() < frames {
            let dwell = rng.gen_range(c.dwell_min..=c.dwell_max);
            for _ in 0..dwell.min(frames - out.len()) {
                out.push(a);
            }
            a = draw(&self.transition[a], rng);
        }
        out
    }

    pub fn sample_objects(&self, action: usize, rng: &mut Rng) -> Vec<String> {
        let c = &self.config;
        let active = self.vocab.noun_of(action);
        let mut scores: BTreeMap<usize, f32> = BTreeMap::new();
        if rng.gen::<f64>() < c.p_hit {
            scores.insert(active, rng.gen_range(0.3..1.0));
        }
        let k = if c.distractor_rate > 0.0 {
            Poisson::new(c.distractor_rate).unwrap().sample(rng) as usize
        } else {
            0
        };
        let nouns = self.vocab.nouns.len();
        for _ in 0..k {
            if nouns < 2 {
                break;
            }
            let mut n = rng.gen_range(0..nouns - 1);
            if n >= active {
                n += 1;
            }
            let s: f32 = rng.gen_range(0.0..0.6);
            let e = scores.entry(n).or_insert(s);
            *e = e.max(s);
        }
        let named: Vec<(String, f32)> = scores.into_iter().map(|(n, s)| (self.vocab.nouns[n].clone(), s)).collect();
        top_objects(&named, OBJECT_THRESHOLD, OBJECT_TOP_K)
    }

    pub fn generate_episode(&self, video_id: usize, participant_id: usize, frames: usize, rng: &mut Rng) -> Episode {
        let actions = self.sample_actions(frames, rng);
        let objects = actions.iter().map(|&a| self.sample_objects(a, rng)).collect();
        let features = self
            .emissions
            .iter()
            .map(|e| {
                let d = e.config.dim;
                let noise = Normal::new(0.0, e.config.sigma).unwrap();
                let off = &e.offsets[participant_id % e.offsets.len().max(1)];
                let mut out = Vec::with_capacity(frames * d);
                for &a in &actions {
                    let mean = &e.means[self.informed_class(e, a)];
                    for j in 0..d {
                        out.push(mean[j] + off[j] + noise.sample(rng) as f32);
                    }
                }
                out
            })
            .collect();
        Episode {
            video_id,
            participant_id,
            actions,
            objects,
            features,
        }
    }

    /// Stationary distribution of the action chain (lazy power iteration).
    pub fn stationary(&self) -> Vec<f64> {
        let c = self.classes();
        let mut p = vec![1.0 / c as f64; c];
        for _ in 0..20_000 {
            let mut next = vec![0.0; c];
            for (a, row) in self.transition.iter().enumerate() {
                for (b, &w) in row.iter().enumerate() {
                    next[b] += 0.5 * p[a] * w;
                }
                next[a] += 0.5 * p[a];
            }
            let diff: f64 = next.iter().zip(&p).map(|(x, y)| (x - y).abs()).sum();
            p = next;
            if diff < 1e-14 {
                break;
            }
        }
        p
    }

    /// Most likely successor of `action`, ties to the lowest id.
    pub fn oracle_prediction(&self, action: usize) -> usize {
        let row = &self.transition[action];
        let mut best = 0;
        for (b, &w) in row.iter().enumerate() {
            if w > row[best] {
                best = b;
            }
        }
        best
    }
}

/// Anticipation segments of one episode: every action start with a full window.
pub fn episode_segments(ep: &Episode, world: &WorldSpec) -> Vec<Annotation> {
    let w = &world.config.window;
    let n = ep.actions.len();
    let mut out = Vec::new();
    let mut start = 0;
    let mut k = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && ep.actions[end + 1] == ep.actions[start] {
            end += 1;
        }
        if start > 0 && w.frames(start).map(|r| r.end <= n).unwrap_or(false) {
            let a = ep.actions[start];
            out.push(Annotation {
                narration_id: format!("v{:04}_{k:03}", ep.video_id),
                video_id: ep.video_id,
                participant_id: ep.participant_id,
                start_frame: start,
                stop_frame: end,
                verb_class: world.vocab.verb_of(a),
                noun_class: world.vocab.noun_of(a),
                action_class: a,
            });
            k += 1;
        }
        start = end + 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub label_oracle_top1: f64,
    pub chance: f64,
    pub segments: usize,
}

/// Accuracy of predicting `argmax_b P(b | last observed action)` on `(last action, target)` pairs.
pub fn oracle_accuracy(world: &WorldSpec, pairs: &[(usize, usize)]) -> OracleReport {
    let hits = pairs.iter().filter(|&&(a, t)| world.oracle_prediction(a) == t).count();
    OracleReport {
        label_oracle_top1: if pairs.is_empty() { 0.0 } else { hits as f64 / pairs.len() as f64 },
        chance: 1.0 / world.classes() as f64,
        segments: pairs.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub segments: usize,
    pub train_segments: usize,
    pub eval_segments: usize,
    pub oracle: OracleReport,
}

pub fn export_corpus(world: &WorldSpec, out_dir: &Path, exec: Exec) -> Result<ExportSummary> {
    let c = &world.config;
    for d in [out_dir.to_path_buf(), corpus::video_dir(out_dir), out_dir.join("frames")] {
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let episodes = exec.map((0..c.videos).collect(), |v| {
        let mut rng = episode_stream(world.seed, v as u64);
        world.generate_episode(v, v % c.participants, c.frames_per_video, &mut rng)
    });
    let mut annotations = Vec::new();
    for ep in &episodes {
        for (e, values) in world.emissions.iter().zip(&ep.features) {
            write_features(
                &corpus::feature_path(out_dir, ep.video_id, &e.config.modality),
                c.frames_per_video,
                e.config.dim,
                values,
            )?;
        }
        let frames: Vec<FrameAnnotation> = ep
            .actions
            .iter()
            .zip(&ep.objects)
            .map(|(&a, o)| FrameAnnotation {
                action: Some(a),
                objects: o.clone(),
            })
            .collect();
        write_frames(&frames_path(out_dir, ep.video_id), &frames)?;
        annotations.extend(episode_segments(ep, world));
    }
    write_annotations(&out_dir.join(corpus::ANNOTATIONS_FILE), &annotations)?;
    world.vocab.write_csv(&out_dir.join(corpus::VOCAB_FILE))?;

    let names: Vec<(String, String)> = world
        .vocab
        .actions
        .iter()
        .map(|&(v, n)| (world.vocab.verbs[v].clone(), world.vocab.nouns[n].clone()))
        .collect();
    let tools: Vec<Vec<String>> = (0..world.classes())
        .map(|a| {
            let mut t: Vec<String> = world.transition[a]
                .iter()
                .enumerate()
                .filter(|(b, &w)| w > 0.0 && world.vocab.noun_of(*b) != world.vocab.noun_of(a))
                .map(|(b, _)| world.vocab.nouns[world.vocab.noun_of(b)].clone())
                .collect();
            t.dedup();
            t
        })
        .collect();
    let bank = generate_bank(&names, &tools, c.descriptions_per_class, &mut stream(world.seed, tag::DESCRIPTIONS));
    bank.save(&out_dir.join(corpus::DESCRIPTIONS_FILE))?;

    let eval_videos: Vec<usize> = (0..c.videos).filter(|&v| c.is_eval_video(v)).collect();
    let manifest = CorpusManifest {
        seed: world.seed,
        videos: c.videos,
        frames_per_video: c.frames_per_video,
        window: c.window,
        modalities: world.emissions.iter().map(|e| (e.config.modality.clone(), e.config.dim)).collect(),
        held_out_participants: c.held_out_participants.clone(),
        eval_videos: eval_videos.clone(),
        max_train: c.max_train,
        max_eval: c.max_eval,
    };
    let mpath = out_dir.join(corpus::MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;

    let (eval_rows, train_rows): (Vec<&Annotation>, Vec<&Annotation>) = annotations.iter().partition(|a| eval_videos.contains(&a.video_id));
    let eval_rows = corpus::stride_subset(&eval_rows, c.max_eval);
    let pairs: Vec<(usize, usize)> = eval_rows
        .iter()
        .map(|a| {
            let ep = &episodes[a.video_id];
            let last = c.window.frames(a.start_frame).unwrap().end - 1;
            (ep.actions[last], a.action_class)
        })
        .collect();
    Ok(ExportSummary {
        segments: annotations.len(),
        train_segments: train_rows.len().min(c.max_train),
        eval_segments: eval_rows.len(),
        oracle: oracle_accuracy(world, &pairs),
    })
}
