//! Top-k accuracy, class-mean metrics, split masks and the evaluation report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub segment_id: String,
    /// Action logits.
    pub scores: Vec<f32>,
    pub target: usize,
    pub participant: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Marginal {
    #[default]
    Sum,
    Max,
}

pub fn softmax(scores: &[f32]) -> Vec<f64> {
    let m = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let e: Vec<f64> = scores.iter().map(|&x| (x as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Verb and noun scores from action logits.
pub fn derive_verb_noun(scores: &[f32], vocab: &Vocab, rule: Marginal) -> (Vec<f64>, Vec<f64>) {
    let p = softmax(scores);
    let mut verbs = vec![0.0; vocab.verbs.len()];
    let mut nouns = vec![0.0; vocab.nouns.len()];
    for (a, &(v, n)) in vocab.actions.iter().enumerate() {
        match rule {
            Marginal::Sum => {
                verbs[v] += p[a];
                nouns[n] += p[a];
            }
            Marginal::Max => {
                verbs[v] = f64::max(verbs[v], p[a]);
                nouns[n] = f64::max(nouns[n], p[a]);
            }
        }
    }
    (verbs, nouns)
}

/// Whether `target` is among the `k` best scores; ties rank the lower id first.
pub fn topk_hit(scores: &[f64], target: usize, k: usize) -> Result<bool> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!("top-{k} over {} classes", scores.len())));
    }
    if target >= scores.len() {
        return Err(Error::Data(format!("target {target} outside {} classes", scores.len())));
    }
    let s = scores[target];
    let rank = scores.iter().enumerate().filter(|&(j, &x)| x > s || (x == s && j < target)).count();
    Ok(rank < k)
}

pub fn topk_accuracy(rows: &[Vec<f64>], targets: &[usize], k: usize) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Contract("top-k accuracy of no samples".into()));
    }
    let mut hits = 0;
    for (r, &t) in rows.iter().zip(targets) {
        hits += topk_hit(r, t, k)? as usize;
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Mean over present classes of the per-class mean hit rate; `None` without samples.
pub fn class_mean(hits: &[bool], targets: &[usize]) -> Option<f64> {
    let mut per: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (&h, &t) in hits.iter().zip(targets) {
        let e = per.entry(t).or_default();
        e.0 += h as usize;
        e.1 += 1;
    }
    if per.is_empty() {
        return None;
    }
    Some(per.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub overall: Vec<bool>,
    pub unseen: Vec<bool>,
    pub tail: Vec<bool>,
    pub tail_classes: Vec<usize>,
}

/// The `⌈0.2·C⌉` classes with the fewest training segments, ties to the lower id.
pub fn tail_classes(train_counts: &[usize]) -> Vec<usize> {
    let n = (train_counts.len() as f64 * 0.2).ceil() as usize;
    let mut ids: Vec<usize> = (0..train_counts.len()).collect();
    ids.sort_by_key(|&c| (train_counts[c], c));
    let mut tail = ids[..n].to_vec();
    tail.sort_unstable();
    tail
}

pub fn split_masks(preds: &[Prediction], train_counts: &[usize], held_out: &[usize]) -> SplitMasks {
    let tail = tail_classes(train_counts);
    SplitMasks {
        overall: vec![true; preds.len()],
        unseen: preds.iter().map(|p| held_out.contains(&p.participant)).collect(),
        tail: preds.iter().map(|p| tail.binary_search(&p.target).is_ok()).collect(),
        tail_classes: tail,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub count: usize,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub class_mean_top1: Option<f64>,
    pub class_mean_recall5: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCells {
    pub overall: Cell,
    pub unseen: Cell,
    pub tail: Cell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub marginal: Marginal,
    pub tail_classes: Vec<usize>,
    pub verb: SplitCells,
    pub noun: SplitCells,
    pub action: SplitCells,
}

pub const REPORT_CSV_HEADER: &str = "target,split,metric,value";

fn cell(rows: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> Result<Cell> {
    let (r, t): (Vec<&Vec<f64>>, Vec<usize>) = rows.iter().zip(targets).zip(mask).filter(|(_, &m)| m).map(|((r, &t), _)| (r, t)).unzip();
    if r.is_empty() {
        return Ok(Cell::default());
    }
    let k5 = 5.min(r[0].len());
    let mut h1 = Vec::with_capacity(r.len());
    let mut h5 = Vec::with_capacity(r.len());
    for (row, &tt) in r.iter().zip(&t) {
        h1.push(topk_hit(row, tt, 1)?);
        h5.push(topk_hit(row, tt, k5)?);
    }
    let frac = |h: &[bool]| h.iter().filter(|&&x| x).count() as f64 / h.len() as f64;
    Ok(Cell {
        count: r.len(),
        top1: Some(frac(&h1)),
        top5: Some(frac(&h5)),
        class_mean_top1: class_mean(&h1, &t),
        class_mean_recall5: class_mean(&h5, &t),
    })
}

fn split_cells(rows: &[Vec<f64>], targets: &[usize], masks: &SplitMasks) -> Result<SplitCells> {
    Ok(SplitCells {
        overall: cell(rows, targets, &masks.overall)?,
        unseen: cell(rows, targets, &masks.unseen)?,
        tail: cell(rows, targets, &masks.tail)?,
    })
}

pub fn build_report(preds: &[Prediction], vocab: &Vocab, masks: &SplitMasks, marginal: Marginal) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Data("no predictions to report on".into()));
    }
    let c = vocab.classes();
    let mut action = Vec::with_capacity(preds.len());
    let (mut verb, mut noun) = (Vec::with_capacity(preds.len()), Vec::with_capacity(preds.len()));
    for p in preds {
        if p.scores.len() != c || p.target >= c {
            return Err(Error::Data(format!(
                "{}: {} scores, target {} for {c} actions",
                p.segment_id,
                p.scores.len(),
                p.target
            )));
        }
        if p.scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{}: non-finite scores", p.segment_id)));
        }
        let (v, n) = derive_verb_noun(&p.scores, vocab, marginal);
        verb.push(v);
        noun.push(n);
        action.push(p.scores.iter().map(|&x| x as f64).collect::<Vec<_>>());
    }
    let ta: Vec<usize> = preds.iter().map(|p| p.target).collect();
    let tv: Vec<usize> = ta.iter().map(|&a| vocab.verb_of(a)).collect();
    let tn: Vec<usize> = ta.iter().map(|&a| vocab.noun_of(a)).collect();
    Ok(MetricsReport {
        marginal,
        tail_classes: masks.tail_classes.clone(),
        verb: split_cells(&verb, &tv, masks)?,
        noun: split_cells(&noun, &tn, masks)?,
        action: split_cells(&action, &ta, masks)?,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("metrics report: {e}")))
    }

    /// One row per cell value; absent values are left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for (target, cells) in [("verb", &self.verb), ("noun", &self.noun), ("action", &self.action)] {
            for (split, c) in [("overall", &cells.overall), ("unseen", &cells.unseen), ("tail", &cells.tail)] {
                out.push_str(&format!("{target},{split},count,{}\n", c.count));
                for (name, v) in [
                    ("top1", c.top1),
                    ("top5", c.top5),
                    ("class_mean_top1", c.class_mean_top1),
                    ("class_mean_recall5", c.class_mean_recall5),
                ] {
                    let v = v.map(|x| format!("{x}")).unwrap_or_default();
                    out.push_str(&format!("{target},{split},{name},{v}\n"));
                }
            }
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))?;
        let csv = json_path.with_extension("csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn read(json_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        Self::from_json(&text)
    }

    pub fn action_top1(&self) -> f64 {
        self.action.overall.top1.unwrap_or(0.0)
    }
}
