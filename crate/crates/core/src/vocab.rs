//! Verb, noun and action vocabularies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub verbs: Vec<String>,
    pub nouns: Vec<String>,
    /// `(verb id, noun id)` per action id.
    pub actions: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    kind: String,
    id: usize,
    name: String,
    verb_id: Option<usize>,
    noun_id: Option<usize>,
}

impl Vocab {
    pub fn new(verbs: Vec<String>, nouns: Vec<String>, actions: Vec<(usize, usize)>) -> Result<Self> {
        let v = Self { verbs, nouns, actions };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        for (a, &(vb, nn)) in self.actions.iter().enumerate() {
            if vb >= self.verbs.len() || nn >= self.nouns.len() {
                return Err(Error::Data(format!("action {a} refers to verb {vb} / noun {nn} outside the vocabulary")));
            }
            if self.actions[..a].contains(&(vb, nn)) {
                return Err(Error::Data(format!("action {a} duplicates verb {vb} / noun {nn}")));
            }
        }
        for v in 0..self.verbs.len() {
            if !self.actions.iter().any(|a| a.0 == v) {
                return Err(Error::Data(format!("verb {:?} appears in no action", self.verbs[v])));
            }
        }
        for n in 0..self.nouns.len() {
            if !self.actions.iter().any(|a| a.1 == n) {
                return Err(Error::Data(format!("noun {:?} appears in no action", self.nouns[n])));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.actions.len()
    }

    pub fn verb_of(&self, action: usize) -> usize {
        self.actions[action].0
    }

    pub fn noun_of(&self, action: usize) -> usize {
        self.actions[action].1
    }

    pub fn action_name(&self, action: usize) -> String {
        let (v, n) = self.actions[action];
        format!("{} {}", self.verbs[v], self.nouns[n])
    }

    pub fn noun_id(&self, name: &str) -> Option<usize> {
        self.nouns.iter().position(|n| n == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut put = |r: Row| w.serialize(r).map_err(|e| Error::format(path, e.to_string()));
        for (id, name) in self.verbs.iter().enumerate() {
            put(Row {
                kind: "verb".into(),
                id,
                name: name.clone(),
                verb_id: None,
                noun_id: None,
            })?;
        }
        for (id, name) in self.nouns.iter().enumerate() {
            put(Row {
                kind: "noun".into(),
                id,
                name: name.clone(),
                verb_id: None,
                noun_id: None,
            })?;
        }
        for (id, &(v, n)) in self.actions.iter().enumerate() {
            put(Row {
                kind: "action".into(),
                id,
                name: self.action_name(id),
                verb_id: Some(v),
                noun_id: Some(n),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let (mut verbs, mut nouns, mut actions) = (Vec::new(), Vec::new(), Vec::new());
        for (i, row) in r.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::format(path, format!("row {}: {e}", i + 2)))?;
            let dense = |len: usize| {
                if row.id != len {
                    Err(Error::format(path, format!("{} ids must be dense and ordered, got {}", row.kind, row.id)))
                } else {
                    Ok(())
                }
            };
            match row.kind.as_str() {
                "verb" => {
                    dense(verbs.len())?;
                    verbs.push(row.name);
                }
                "noun" => {
                    dense(nouns.len())?;
                    nouns.push(row.name);
                }
                "action" => {
                    dense(actions.len())?;
                    match (row.verb_id, row.noun_id) {
                        (Some(v), Some(n)) => actions.push((v, n)),
                        _ => return Err(Error::format(path, format!("action {} lacks verb_id/noun_id", row.id))),
                    }
                }
                k => return Err(Error::format(path, format!("unknown kind {k:?}"))),
            }
        }
        Self::new(verbs, nouns, actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vocab {
        Vocab::new(
            vec!["wash".into(), "cut".into()],
            vec!["plate".into(), "onion".into()],
            vec![(0, 0), (1, 1), (1, 0)],
        )
        .unwrap()
    }

    #[test]
    fn names_and_lookups() {
        let v = small();
        assert_eq!(v.action_name(2), "cut plate");
        assert_eq!((v.verb_of(1), v.noun_of(1)), (1, 1));
        assert_eq!(v.noun_id("onion"), Some(1));
    }

    #[test]
    fn uncovered_verbs_are_rejected() {
        assert!(Vocab::new(vec!["a".into(), "b".into()], vec!["x".into()], vec![(0, 0)]).is_err());
        assert!(Vocab::new(vec!["a".into()], vec!["x".into()], vec![(0, 0), (0, 0)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.csv");
        let v = small();
        v.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("kind,id,name,verb_id,noun_id\nverb,0,wash,,\n"));
        assert!(text.contains("action,2,cut plate,1,0\n"));
        assert_eq!(Vocab::read_csv(&p).unwrap(), v);
    }
}
