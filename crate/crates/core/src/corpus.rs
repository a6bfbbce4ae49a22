//! Annotation parsing, observation windows, feature and frame files, object
//! thresholding, label corruption, modality selection and batching.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Channel, ModalityKind, ModelConfig, SegmentInput};
use crate::rng::Rng;
use crate::text::{embed_text, load_denylist, render_action_prompt, render_object_prompt, DescriptionBank, TextFeature};
use crate::vocab::Vocab;

// ------------------------------------------------------------------ windows

const FRAME_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Anticipation gap, seconds.
    pub tau_a: f64,
    /// Observation span, seconds.
    pub tau_o: f64,
    pub fps: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            tau_a: 1.0,
            tau_o: 16.0,
            fps: 1.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.tau_o > 0.0 && self.tau_a >= 0.0) || self.steps() == 0 {
            return Err(Error::Config(format!("invalid observation window {self:?}")));
        }
        Ok(())
    }

    /// `T = τ_o · fps`, floored.
    pub fn steps(&self) -> usize {
        (self.tau_o * self.fps + FRAME_EPS).floor() as usize
    }

    /// Smallest start frame with a full window of history.
    pub fn min_start_frame(&self) -> usize {
        ((self.tau_a + self.tau_o) * self.fps - FRAME_EPS).ceil().max(0.0) as usize
    }

    /// Frame indices covering `[τ_s − (τ_a + τ_o), τ_s − τ_a)` for an action starting at
    /// `start_frame`, or `None` when the window would start before frame 0.
    pub fn frames(&self, start_frame: usize) -> Option<std::ops::Range<usize>> {
        let tau_s = start_frame as f64 / self.fps;
        let first = ((tau_s - (self.tau_a + self.tau_o)) * self.fps + FRAME_EPS).floor();
        if first < 0.0 {
            return None;
        }
        let first = first as usize;
        Some(first..first + self.steps())
    }
}

// -------------------------------------------------------------- annotations

pub const ANNOTATION_COLUMNS: [&str; 8] = [
    "narration_id",
    "video_id",
    "participant_id",
    "start_frame",
    "stop_frame",
    "verb_class",
    "noun_class",
    "action_class",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub narration_id: String,
    pub video_id: usize,
    pub participant_id: usize,
    pub start_frame: usize,
    pub stop_frame: usize,
    pub verb_class: usize,
    pub noun_class: usize,
    pub action_class: usize,
}

/// Parsed rows plus the number skipped for lack of history.
pub fn parse_annotations(path: &Path, window: &WindowConfig) -> Result<(Vec<Annotation>, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_from(file, path, window)
}

pub fn parse_annotations_from(reader: impl Read, path: &Path, window: &WindowConfig) -> Result<(Vec<Annotation>, usize)> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let mut col = [0usize; 8];
    for (i, name) in ANNOTATION_COLUMNS.iter().enumerate() {
        col[i] = header
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::format(path, format!("missing column {name}")))?;
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::format(path, format!("line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<&str> {
            rec.get(col[i])
                .ok_or_else(|| Error::format(path, format!("line {line}: missing field {}", ANNOTATION_COLUMNS[i])))
        };
        let int = |i: usize| -> Result<usize> {
            let s = field(i)?;
            s.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {line}: {} is not an integer: {s:?}", ANNOTATION_COLUMNS[i])))
        };
        let a = Annotation {
            narration_id: field(0)?.to_string(),
            video_id: int(1)?,
            participant_id: int(2)?,
            start_frame: int(3)?,
            stop_frame: int(4)?,
            verb_class: int(5)?,
            noun_class: int(6)?,
            action_class: int(7)?,
        };
        if window.frames(a.start_frame).is_none() {
            skipped += 1;
            continue;
        }
        rows.push(a);
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} rows without a full observation window", path.display());
    }
    Ok((rows, skipped))
}

pub fn write_annotations(path: &Path, rows: &[Annotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ------------------------------------------------------------ feature files

pub const FEATURE_MAGIC: &[u8; 4] = b"AFB1";

pub fn feature_bytes(rows: usize, dim: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(rows * dim, values.len(), "feature block shape");
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_features(path: &Path, rows: usize, dim: usize, values: &[f32]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&feature_bytes(rows, dim, values)).map_err(|e| Error::io(path, e))
}

/// `(rows, dim, values)`
pub fn parse_features(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "feature file is truncated"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad feature file magic"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * rows * dim {
        return Err(Error::format(
            path,
            format!("expected {} value bytes for {rows}×{dim}, found {}", 4 * rows * dim, body.len()),
        ));
    }
    Ok((rows, dim, body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()))
}

pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes, path)
}

// --------------------------------------------------------------- frame files

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FrameAnnotation {
    pub action: Option<usize>,
    pub objects: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FrameRow {
    frame_idx: usize,
    action_class: i64,
    objects: String,
}

pub fn write_frames(path: &Path, frames: &[FrameAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for (i, f) in frames.iter().enumerate() {
        w.serialize(FrameRow {
            frame_idx: i,
            action_class: f.action.map(|a| a as i64).unwrap_or(-1),
            objects: f.objects.join("|"),
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Vec<FrameAnnotation>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<FrameRow>().enumerate() {
        let row = row.map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
        if row.frame_idx != i {
            return Err(Error::format(path, format!("line {}: frame {} out of order", i + 2, row.frame_idx)));
        }
        let action = match row.action_class {
            -1 => None,
            a if a >= 0 => Some(a as usize),
            a => return Err(Error::format(path, format!("line {}: bad action {a}", i + 2))),
        };
        let objects = row.objects.split('|').filter(|s| !s.is_empty()).map(str::to_string).collect();
        out.push(FrameAnnotation { action, objects });
    }
    Ok(out)
}

// ------------------------------------------------------------ object lists

pub const OBJECT_THRESHOLD: f32 = 0.15;
pub const OBJECT_TOP_K: usize = 5;

/// Names scoring at least `threshold`, by descending score then name, at most `k`.
pub fn top_objects(scores: &[(String, f32)], threshold: f32, k: usize) -> Vec<String> {
    let mut kept: Vec<&(String, f32)> = scores.iter().filter(|(_, s)| *s >= threshold).collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.into_iter().take(k).map(|(n, _)| n.clone()).collect()
}

// -------------------------------------------------------------- corruption

/// Keeps each label with probability `p`, otherwise draws uniformly from `0..classes`.
///
/// Both draws happen for every frame, so one rng state gives nested corruptions:
/// labels kept at `p` are also kept at any larger `p`.
pub fn corrupt_actions(labels: &[Option<usize>], p: f64, rng: &mut Rng, classes: usize) -> Vec<Option<usize>> {
    labels
        .iter()
        .map(|&l| {
            let u: f64 = rng.gen();
            let r = rng.gen_range(0..classes);
            if u < p {
                l
            } else {
                Some(r)
            }
        })
        .collect()
}

// --------------------------------------------------------------- modalities

/// Marks every modality outside `keep` as absent.
pub fn select_modalities(inputs: &mut [SegmentInput], config: &ModelConfig, keep: &[String]) -> Result<()> {
    if keep.is_empty() {
        return Err(Error::Config("modality mask is empty".into()));
    }
    for k in keep {
        if config.modality_index(k).is_none() {
            return Err(Error::Config(format!("modality {k:?} is not registered")));
        }
    }
    for seg in inputs {
        for (m, spec) in config.modalities.iter().enumerate() {
            if !keep.contains(&spec.name) {
                seg.channels[m] = None;
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ batches

/// Epoch cover of `0..classes.len()` in batches of `size`.
///
/// With `dedup`, batches avoid repeating a target class while distinct classes
/// remain; leftovers fill the tail batches.
pub fn make_batches(classes: &[usize], size: usize, rng: Option<&mut Rng>, dedup: bool) -> Vec<Vec<usize>> {
    let size = size.max(1);
    let mut order: Vec<usize> = (0..classes.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    if !dedup {
        return order.chunks(size).map(<[usize]>::to_vec).collect();
    }
    // Per-class queues in shuffled order; each batch draws from the fullest queues.
    let mut queues: Vec<(usize, std::collections::VecDeque<usize>)> = Vec::new();
    for i in order {
        match queues.iter_mut().find(|(c, _)| *c == classes[i]) {
            Some((_, q)) => q.push_back(i),
            None => queues.push((classes[i], std::collections::VecDeque::from([i]))),
        }
    }
    let mut out = Vec::new();
    let mut fallbacks = 0;
    let mut remaining = classes.len();
    while remaining > 0 {
        let mut rank: Vec<usize> = (0..queues.len()).filter(|&q| !queues[q].1.is_empty()).collect();
        rank.sort_by_key(|&q| std::cmp::Reverse(queues[q].1.len()));
        let mut batch = Vec::with_capacity(size);
        for &q in rank.iter().take(size) {
            batch.push(queues[q].1.pop_front().unwrap());
        }
        if batch.len() < size {
            let mut dup = false;
            for &q in rank.iter().cycle().take(rank.len() * size) {
                if batch.len() == size {
                    break;
                }
                if let Some(i) = queues[q].1.pop_front() {
                    batch.push(i);
                    dup = true;
                }
            }
            fallbacks += dup as usize;
        }
        remaining -= batch.len();
        out.push(batch);
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} batches could not avoid duplicate classes");
    }
    out
}

// ------------------------------------------------------------------- corpus

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const VOCAB_FILE: &str = "vocab.csv";
pub const DESCRIPTIONS_FILE: &str = "descriptions.json";
pub const MANIFEST_FILE: &str = "corpus.json";
pub const DENYLIST_FILE: &str = "denylist.txt";

/// Corpus-level metadata written next to the annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub videos: usize,
    pub frames_per_video: usize,
    pub window: WindowConfig,
    /// Dense modality widths, by name.
    pub modalities: BTreeMap<String, usize>,
    pub held_out_participants: Vec<usize>,
    pub eval_videos: Vec<usize>,
    pub max_train: usize,
    pub max_eval: usize,
}

pub fn video_dir(root: &Path) -> PathBuf {
    root.join("features")
}

pub fn feature_path(root: &Path, video: usize, modality: &str) -> PathBuf {
    video_dir(root).join(format!("v{video:04}.{modality}.afb"))
}

pub fn frames_path(root: &Path, video: usize) -> PathBuf {
    root.join("frames").join(format!("v{video:04}.csv"))
}

/// One anticipation example with its observed window.
#[derive(Clone, Debug)]
pub struct Segment {
    pub annotation: Annotation,
    pub frames: std::ops::Range<usize>,
    /// Dense modality values, `T × dim`, in manifest order.
    pub dense: BTreeMap<String, Arc<Vec<f32>>>,
    pub labels: Vec<Option<usize>>,
    pub objects: Vec<Vec<String>>,
}

impl Segment {
    pub fn target(&self) -> usize {
        self.annotation.action_class
    }

    /// The label of the last observed frame.
    pub fn last_action(&self) -> Option<usize> {
        self.labels.last().copied().flatten()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
    pub vocab: Vocab,
    pub bank: DescriptionBank,
    pub train: Vec<Segment>,
    pub eval: Vec<Segment>,
    pub skipped: usize,
}

/// Evenly spaced subset of at most `cap` items, in order.
pub fn stride_subset<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap].clone()).collect()
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        manifest.window.validate()?;
        let vocab = Vocab::read_csv(&root.join(VOCAB_FILE))?;
        let deny_path = root.join(DENYLIST_FILE);
        let denylist = if deny_path.exists() { load_denylist(&deny_path)? } else { Vec::new() };
        let bank = DescriptionBank::load(&root.join(DESCRIPTIONS_FILE), &denylist)?;
        bank.check_complete(vocab.classes())?;
        let (rows, skipped) = parse_annotations(&root.join(ANNOTATIONS_FILE), &manifest.window)?;
        for r in &rows {
            if r.action_class >= vocab.classes() {
                return Err(Error::Data(format!("{}: action {} outside the vocabulary", r.narration_id, r.action_class)));
            }
            if vocab.actions[r.action_class] != (r.verb_class, r.noun_class) {
                return Err(Error::Data(format!("{}: verb/noun disagree with action {}", r.narration_id, r.action_class)));
            }
        }
        let (eval_rows, train_rows): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| manifest.eval_videos.contains(&r.video_id));
        let train_rows = stride_subset(&train_rows, manifest.max_train);
        let eval_rows = stride_subset(&eval_rows, manifest.max_eval);
        let mut cache: HashMap<usize, (BTreeMap<String, (usize, Vec<f32>)>, Vec<FrameAnnotation>)> = HashMap::new();
        let mut build = |rows: Vec<Annotation>| -> Result<Vec<Segment>> {
            rows.into_iter()
                .map(|a| {
                    if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(a.video_id) {
                        let mut dense = BTreeMap::new();
                        for (name, &dim) in &manifest.modalities {
                            let p = feature_path(root, a.video_id, name);
                            let (rows, d, values) = read_features(&p)?;
                            if d != dim || rows != manifest.frames_per_video {
                                return Err(Error::format(&p, format!("expected {}×{dim}, found {rows}×{d}", manifest.frames_per_video)));
                            }
                            dense.insert(name.clone(), (d, values));
                        }
                        let frames = read_frames(&frames_path(root, a.video_id))?;
                        e.insert((dense, frames));
                    }
                    let (dense, frames) = &cache[&a.video_id];
                    let range = manifest.window.frames(a.start_frame).expect("parse keeps full windows");
                    if range.end > frames.len() {
                        return Err(Error::Data(format!("{}: window {range:?} beyond {} frames", a.narration_id, frames.len())));
                    }
                    let seg_dense = dense
                        .iter()
                        .map(|(n, (d, v))| (n.clone(), Arc::new(v[range.start * d..range.end * d].to_vec())))
                        .collect();
                    Ok(Segment {
                        labels: frames[range.clone()].iter().map(|f| f.action).collect(),
                        objects: frames[range.clone()].iter().map(|f| f.objects.clone()).collect(),
                        frames: range,
                        dense: seg_dense,
                        annotation: a,
                    })
                })
                .collect()
        };
        let train = build(train_rows)?;
        let eval = build(eval_rows)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            vocab,
            bank,
            train,
            eval,
            skipped,
        })
    }

    pub fn steps(&self) -> usize {
        self.manifest.window.steps()
    }

    /// Checks the model's modality registry against the corpus.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if config.classes != self.vocab.classes() {
            return Err(Error::Mismatch(format!(
                "model has {} classes, corpus {}",
                config.classes,
                self.vocab.classes()
            )));
        }
        if config.max_len < self.steps() {
            return Err(Error::Mismatch(format!(
                "model handles {} steps, corpus windows have {}",
                config.max_len,
                self.steps()
            )));
        }
        for m in &config.modalities {
            if let ModalityKind::Dense { dim } = m.kind {
                match self.manifest.modalities.get(&m.name) {
                    Some(&d) if d == dim => {}
                    Some(&d) => return Err(Error::Mismatch(format!("modality {} is {d}-wide in the corpus, {dim} in the model", m.name))),
                    None => return Err(Error::Mismatch(format!("corpus has no {} features", m.name))),
                }
            }
        }
        Ok(())
    }
}

/// Turns segments into model inputs, rendering and hashing the text modalities.
pub struct InputBuilder<'a> {
    pub vocab: &'a Vocab,
    pub config: &'a ModelConfig,
    cache: HashMap<String, Arc<TextFeature>>,
}

impl<'a> InputBuilder<'a> {
    pub fn new(vocab: &'a Vocab, config: &'a ModelConfig) -> Self {
        Self {
            vocab,
            config,
            cache: HashMap::new(),
        }
    }

    fn text(&mut self, prompt: String) -> Arc<TextFeature> {
        let buckets = self.config.buckets;
        self.cache.entry(prompt).or_insert_with_key(|p| Arc::new(embed_text(p, buckets))).clone()
    }

    /// `labels` overrides the segment's per-frame action labels (for corruption sweeps).
    pub fn build(&mut self, seg: &Segment, labels: Option<&[Option<usize>]>) -> Result<SegmentInput> {
        let steps = seg.labels.len();
        let labels = labels.unwrap_or(&seg.labels);
        let mut channels = Vec::with_capacity(self.config.modalities.len());
        for spec in &self.config.modalities {
            let ch = match (spec.name.as_str(), &spec.kind) {
                (_, ModalityKind::Dense { .. }) => {
                    let v = seg
                        .dense
                        .get(&spec.name)
                        .ok_or_else(|| Error::Mismatch(format!("segment has no {} features", spec.name)))?;
                    Channel::Dense(v.clone())
                }
                ("obj_text", ModalityKind::Text) => Channel::Text(seg.objects.iter().map(|o| self.text(render_object_prompt(o))).collect()),
                ("act_text", ModalityKind::Text) => {
                    let mut out = Vec::with_capacity(steps);
                    for l in labels {
                        let name = l.map(|a| self.vocab.action_name(a));
                        out.push(self.text(render_action_prompt(&[name.as_deref()])));
                    }
                    Channel::Text(out)
                }
                (n, _) => return Err(Error::Config(format!("no text source for modality {n:?}"))),
            };
            channels.push(Some(ch));
        }
        Ok(SegmentInput { steps, channels })
    }

    pub fn build_all(&mut self, segs: &[Segment]) -> Result<Vec<SegmentInput>> {
        segs.iter().map(|s| self.build(s, None)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    const HEADER: &str = "narration_id,video_id,participant_id,start_frame,stop_frame,verb_class,noun_class,action_class\n";

    fn parse(text: &str) -> Result<(Vec<Annotation>, usize)> {
        parse_annotations_from(text.as_bytes(), Path::new("ann.csv"), &WindowConfig::default())
    }

    #[test]
    fn window_examples() {
        let w = WindowConfig::default();
        assert_eq!(w.frames(100), Some(83..99));
        assert_eq!(w.steps(), 16);
        assert_eq!(w.frames(17), Some(0..16));
        assert_eq!(w.frames(16), None);
        assert_eq!(w.min_start_frame(), 17);
        let egtea = WindowConfig {
            tau_a: 0.5,
            tau_o: 8.0,
            fps: 2.0,
        };
        let r = egtea.frames(200).unwrap();
        assert_eq!(r.len(), 16);
        // ends half a second (one frame at 2 fps) before the action starts
        assert_eq!(r.end, 200 - 1);
        assert_eq!(egtea.frames(egtea.min_start_frame()).unwrap().start, 0);
    }

    #[test]
    fn parse_valid_and_short_rows() {
        let (rows, skipped) = parse(&format!("{HEADER}a,1,1,40,44,0,1,2\n")).unwrap();
        assert_eq!((rows.len(), skipped), (1, 0));
        assert_eq!(rows[0].action_class, 2);
        let (rows, skipped) = parse(&format!("{HEADER}a,1,1,10,44,0,1,2\n")).unwrap();
        assert_eq!((rows.len(), skipped), (0, 1));
    }

    #[test]
    fn parse_errors_name_column_and_line() {
        let err = parse("narration_id,video_id\n").unwrap_err().to_string();
        assert!(err.contains("participant_id"), "{err}");
        let mut text = HEADER.to_string();
        for i in 0..5 {
            text.push_str(&format!("n{i},1,1,40,44,0,1,2\n"));
        }
        text.push_str("n5,1,1,forty,44,0,1,2\n");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");
    }

    #[test]
    fn feature_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.afb");
        let vals: Vec<f32> = (0..12).map(|i| (i as f32).sin() * 1e-3 + f32::MIN_POSITIVE).collect();
        write_features(&p, 3, 4, &vals).unwrap();
        let (r, d, back) = read_features(&p).unwrap();
        assert_eq!((r, d), (3, 4));
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[1] = b'X';
        assert!(parse_features(&bytes, &p).is_err());
        assert!(parse_features(&feature_bytes(3, 4, &vals)[..20], &p).is_err());
    }

    #[test]
    fn frames_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        let frames = vec![
            FrameAnnotation {
                action: Some(3),
                objects: vec!["plate".into(), "tap".into()],
            },
            FrameAnnotation { action: None, objects: vec![] },
        ];
        write_frames(&p, &frames).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "frame_idx,action_class,objects\n0,3,plate|tap\n1,-1,\n");
        assert_eq!(read_frames(&p).unwrap(), frames);
    }

    fn scores(items: &[(&str, f32)]) -> Vec<(String, f32)> {
        items.iter().map(|(n, s)| (n.to_string(), *s)).collect()
    }

    #[test]
    fn top_objects_examples() {
        let s = scores(&[("knife", 0.9), ("tap", 0.5), ("bowl", 0.2), ("cup", 0.14)]);
        assert_eq!(top_objects(&s, 0.15, 5), vec!["knife", "tap", "bowl"]);
        let many = scores(&[("a", 0.2), ("b", 0.3), ("c", 0.4), ("d", 0.5), ("e", 0.6), ("f", 0.7), ("g", 0.8)]);
        assert_eq!(top_objects(&many, 0.15, 5), vec!["g", "f", "e", "d", "c"]);
        assert!(top_objects(&scores(&[("a", 0.1)]), 0.15, 5).is_empty());
        let mut rev = s.clone();
        rev.reverse();
        assert_eq!(top_objects(&rev, 0.15, 5), top_objects(&s, 0.15, 5));
    }

    #[test]
    fn corruption_rates() {
        let labels: Vec<Option<usize>> = (0..100_000).map(|i| Some(i % 24)).collect();
        assert_eq!(corrupt_actions(&labels, 1.0, &mut stream(1, 5), 24), labels);
        let half = corrupt_actions(&labels, 0.5, &mut stream(1, 5), 24);
        let kept = half.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
        assert!((kept - (0.5 + 0.5 / 24.0)).abs() < 0.01, "{kept}");
        assert_eq!(half, corrupt_actions(&labels, 0.5, &mut stream(1, 5), 24));
        let none = corrupt_actions(&labels, 0.0, &mut stream(2, 5), 24);
        let kept = none.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
        assert!((kept - 1.0 / 24.0).abs() < 0.01, "{kept}");
    }

    #[test]
    fn batches_cover_the_epoch() {
        let classes = vec![0; 10];
        let b = make_batches(&classes, 3, None, false);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(b.concat(), (0..10).collect::<Vec<_>>());
        let mut rng = stream(3, 3);
        let shuffled = make_batches(&classes, 3, Some(&mut rng), false);
        let mut all = shuffled.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn dedup_batches_avoid_repeats() {
        let classes: Vec<usize> = (0..480).map(|i| (i * 7) % 24).collect();
        let mut rng = stream(4, 3);
        let b = make_batches(&classes, 16, Some(&mut rng), true);
        let mut all = b.concat();
        all.sort();
        assert_eq!(all, (0..480).collect::<Vec<_>>());
        for batch in &b {
            let mut c: Vec<usize> = batch.iter().map(|&i| classes[i]).collect();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), batch.len());
        }
    }

    #[test]
    fn stride_subset_spreads() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(stride_subset(&v, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(stride_subset(&v, 20), v);
    }
}
