//! Tokenizer, hash-bag text features, prompt templates and the description bank.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_BUCKETS: usize = 4096;
pub const OBJECT_PROMPT: &str = "A video containing the following objects: ";
pub const ACTION_PROMPT: &str = "A video containing the following actions: ";
pub const NO_ACTION: &str = "no action";

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket and sign of one token. The sign is the parity of the hash's popcount,
/// so it carries information the bucket (low bits) does not.
pub fn token_slot(token: &str, buckets: usize) -> (usize, f32) {
    let h = fnv1a64(token.as_bytes());
    let sign = if h.count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
    ((h % buckets as u64) as usize, sign)
}

/// Sparse view of an L2-normalized `buckets`-wide vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    /// Non-zero entries sorted by bucket.
    pub entries: Vec<(usize, f32)>,
    pub buckets: usize,
    pub source: String,
}

impl TextFeature {
    pub fn to_dense(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.buckets];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, other: &TextFeature) -> f32 {
        let (mut i, mut j, mut s) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }
}

pub fn hash_embed<S: AsRef<str>>(tokens: &[S], buckets: usize) -> TextFeature {
    assert!(buckets >= 1, "hash_embed needs at least one bucket");
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for tok in tokens {
        let (b, s) = token_slot(tok.as_ref(), buckets);
        *acc.entry(b).or_insert(0.0) += s as f64;
    }
    let norm = acc.values().map(|v| v * v).sum::<f64>().sqrt();
    let entries = if norm > 0.0 {
        acc.into_iter().filter(|(_, v)| *v != 0.0).map(|(b, v)| (b, (v / norm) as f32)).collect()
    } else {
        Vec::new()
    };
    TextFeature {
        entries,
        buckets,
        source: tokens.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" "),
    }
}

pub fn embed_text(text: &str, buckets: usize) -> TextFeature {
    let mut f = hash_embed(&tokenize(text), buckets);
    f.source = text.to_string();
    f
}

pub fn render_object_prompt<S: AsRef<str>>(objects: &[S]) -> String {
    if objects.is_empty() {
        return format!("{OBJECT_PROMPT}none");
    }
    let names: Vec<&str> = objects.iter().map(|o| o.as_ref()).collect();
    format!("{OBJECT_PROMPT}{}", names.join(", "))
}

/// Absent labels render as "no action".
pub fn render_action_prompt(actions: &[Option<&str>]) -> String {
    let names: Vec<&str> = actions.iter().map(|a| a.unwrap_or(NO_ACTION)).collect();
    if names.is_empty() {
        return format!("{ACTION_PROMPT}{NO_ACTION}");
    }
    format!("{ACTION_PROMPT}{}", names.join(", "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptionBank {
    pub entries: BTreeMap<usize, Vec<String>>,
}

impl DescriptionBank {
    pub fn new(entries: BTreeMap<usize, Vec<String>>) -> Result<Self> {
        for (id, list) in &entries {
            if list.is_empty() || list.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::Data(format!("description bank entry for class {id} is empty")));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (k, v) in raw {
            let id: usize = k.parse().map_err(|_| Error::format(origin, format!("key {k:?} is not a class id")))?;
            entries.insert(id, v);
        }
        Self::new(entries)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<String, &Vec<String>> = self.entries.iter().map(|(k, v)| (k.to_string(), v)).collect();
        // keys ordered numerically rather than lexically
        let mut out = String::from("{\n");
        let mut keys: Vec<&String> = raw.keys().collect();
        keys.sort_by_key(|k| k.parse::<usize>().unwrap_or(usize::MAX));
        for (i, k) in keys.iter().enumerate() {
            let sep = if i + 1 == keys.len() { "" } else { "," };
            out.push_str(&format!("  \"{k}\": {}{sep}\n", serde_json::to_string(raw[*k]).unwrap()));
        }
        out.push_str("}\n");
        out
    }

    pub fn load(path: &Path, denylist: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank = Self::from_json(&text, path)?;
        bank.sanitized(denylist)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Drops descriptions containing any denylisted substring; a class left empty is an error.
    pub fn sanitized(mut self, denylist: &[String]) -> Result<Self> {
        if denylist.is_empty() {
            return Ok(self);
        }
        let mut dropped = 0;
        for (id, list) in self.entries.iter_mut() {
            let before = list.len();
            list.retain(|s| {
                let low = s.to_lowercase();
                !denylist.iter().any(|d| low.contains(d.as_str()))
            });
            dropped += before - list.len();
            if list.is_empty() {
                return Err(Error::Data(format!("every description of class {id} is denylisted")));
            }
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} denylisted descriptions");
        }
        Ok(self)
    }

    /// Every class in `0..classes` needs at least one description.
    pub fn check_complete(&self, classes: usize) -> Result<()> {
        let missing: Vec<usize> = (0..classes).filter(|c| !self.entries.contains_key(c)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("description bank is missing classes {missing:?}")))
        }
    }

    pub fn sample(&self, action: usize, rng: &mut Rng, mode: SampleMode) -> Result<&str> {
        let list = self
            .entries
            .get(&action)
            .ok_or_else(|| Error::Data(format!("no descriptions for action {action}")))?;
        Ok(match mode {
            SampleMode::Eval => &list[0],
            SampleMode::Train => &list[rng.gen_range(0..list.len())],
        })
    }
}

pub fn load_denylist(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()).collect())
}

pub const LOCATIONS: [&str; 8] = ["sink", "counter", "stove", "fridge", "table", "window", "cupboard", "drawer"];

/// Template bank: "<verb> the <noun> using a <tool> near the <location>".
/// `tools[a]` lists objects that co-occur with action `a`.
pub fn generate_bank(action_names: &[(String, String)], tools: &[Vec<String>], per_class: usize, rng: &mut Rng) -> DescriptionBank {
    let mut entries = BTreeMap::new();
    for (a, (verb, noun)) in action_names.iter().enumerate() {
        let pool: &[String] = tools.get(a).map(Vec::as_slice).unwrap_or(&[]);
        let list = (0..per_class.max(1))
            .map(|_| {
                let loc = LOCATIONS.choose(rng).unwrap();
                match pool.choose(rng) {
                    Some(tool) => format!("{verb} the {noun} using a {tool} near the {loc}"),
                    None => format!("{verb} the {noun} near the {loc}"),
                }
            })
            .collect();
        entries.insert(a, list);
    }
    DescriptionBank { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Wash the plate."), vec!["wash", "the", "plate"]);
        assert_eq!(tokenize("take finger:lady"), vec!["take", "finger", "lady"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_tokens_embed_to_zero() {
        let f = hash_embed::<&str>(&[], 64);
        assert!(f.is_zero());
        assert!(f.to_dense().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embedding_is_unit_norm_and_order_free() {
        let a = hash_embed(&["wash", "the", "plate"], 4096);
        let b = hash_embed(&["plate", "wash", "the"], 4096);
        assert_eq!(a.entries, b.entries);
        let n: f32 = a.to_dense().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_tokens_without_collisions_are_orthogonal() {
        let h = 4096;
        let a = ["wash", "plate", "sponge"];
        let b = ["cut", "onion", "knife"];
        let slots_a: Vec<usize> = a.iter().map(|t| token_slot(t, h).0).collect();
        let slots_b: Vec<usize> = b.iter().map(|t| token_slot(t, h).0).collect();
        assert!(slots_a.iter().all(|s| !slots_b.contains(s)));
        let (ea, eb) = (hash_embed(&a, h), hash_embed(&b, h));
        let dot: f32 = ea.to_dense().iter().zip(eb.to_dense()).map(|(x, y)| x * y).sum();
        assert_eq!(dot, 0.0);
        assert_eq!(ea.dot(&eb), 0.0);
    }

    #[test]
    fn prompts() {
        assert_eq!(
            render_object_prompt(&["sponge", "tap"]),
            "A video containing the following objects: sponge, tap"
        );
        assert_eq!(render_object_prompt::<&str>(&[]), "A video containing the following objects: none");
        assert_eq!(render_object_prompt(&["bin", "bag"]), "A video containing the following objects: bin, bag");
        assert_eq!(
            render_action_prompt(&[Some("wash plate")]),
            "A video containing the following actions: wash plate"
        );
        assert_eq!(render_action_prompt(&[None]), "A video containing the following actions: no action");
        assert_eq!(render_action_prompt(&[Some("wrap bag")]), "A video containing the following actions: wrap bag");
    }

    fn bank(n: usize) -> DescriptionBank {
        let mut e = BTreeMap::new();
        e.insert(0, (0..n).map(|i| format!("desc {i}")).collect());
        DescriptionBank::new(e).unwrap()
    }

    #[test]
    fn single_entry_bank_in_both_modes() {
        let b = bank(1);
        let mut rng = stream(1, 1);
        assert_eq!(b.sample(0, &mut rng, SampleMode::Train).unwrap(), "desc 0");
        assert_eq!(b.sample(0, &mut rng, SampleMode::Eval).unwrap(), "desc 0");
        assert!(b.sample(3, &mut rng, SampleMode::Eval).is_err());
    }

    #[test]
    fn eval_mode_always_first() {
        let b = bank(10);
        let mut rng = stream(2, 1);
        for _ in 0..50 {
            assert_eq!(b.sample(0, &mut rng, SampleMode::Eval).unwrap(), "desc 0");
        }
    }

    #[test]
    fn train_mode_is_uniform() {
        let b = bank(10);
        let mut rng = stream(3, 1);
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let s = b.sample(0, &mut rng, SampleMode::Train).unwrap();
            counts[s[5..].parse::<usize>().unwrap()] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 9 degrees of freedom, alpha 0.01
        assert!(chi2 < 21.666, "chi2 {chi2}");
        for c in counts {
            assert!((c as f64 / n as f64 - 0.1).abs() < 0.02);
        }
    }

    #[test]
    fn completeness_and_denylist() {
        let mut e = BTreeMap::new();
        e.insert(0, vec!["stab the hand".to_string(), "cut the onion".to_string()]);
        e.insert(2, vec!["wash".to_string()]);
        let b = DescriptionBank::new(e).unwrap();
        assert!(b.check_complete(2).is_err());
        let clean = b.clone().sanitized(&["stab".to_string()]).unwrap();
        assert_eq!(clean.entries[&0], vec!["cut the onion"]);
        assert!(b.sanitized(&["wash".to_string()]).is_err());
    }

    #[test]
    fn bank_json_round_trip() {
        let mut rng = stream(4, 1);
        let names: Vec<(String, String)> = (0..12).map(|i| (format!("v{i}"), format!("n{i}"))).collect();
        let tools = vec![vec!["knife".to_string()]; 12];
        let b = generate_bank(&names, &tools, 3, &mut rng);
        let back = DescriptionBank::from_json(&b.to_json(), Path::new("x")).unwrap();
        assert_eq!(back, b);
        assert!(b.to_json().find("\"2\"").unwrap() < b.to_json().find("\"10\"").unwrap());
        assert!(b.entries[&0][0].starts_with("v0 the n0 using a knife near the "));
    }

    #[test]
    fn bad_json_is_a_format_error() {
        assert!(matches!(
            DescriptionBank::from_json("{\"x\": [\"a\"]}", Path::new("d.json")),
            Err(Error::Format { .. })
        ));
        assert!(DescriptionBank::from_json("{\"0\": []}", Path::new("d.json")).is_err());
    }
}
