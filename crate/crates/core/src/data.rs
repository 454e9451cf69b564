//! Corpora of (source, target) pairs: JSONL I/O, seeded train/eval
//! splitting and synthetic generators for the three stage roles.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExamplePair {
    pub id: String,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub pairs: Vec<ExamplePair>,
}

impl Corpus {
    /// Validates non-empty fields and unique ids.
    pub fn new(name: impl Into<String>, pairs: Vec<ExamplePair>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &pairs {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::Corpus(format!("pair `{}` has an empty source or target", p.id)));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Corpus(format!("duplicate id `{}`", p.id)));
            }
        }
        Ok(Self { name: name.into(), pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One compact JSON object per line, keys in `id, source, target` order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p).expect("pair serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Order-preserving JSONL load. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |msg: String| Error::Data { path: path.to_path_buf(), line: i + 1, msg };
        let pair: ExamplePair = serde_json::from_str(line).map_err(|e| data_err(e.to_string()))?;
        if pair.source.is_empty() || pair.target.is_empty() {
            return Err(data_err("source and target must be non-empty".into()));
        }
        if !seen.insert(pair.id.clone()) {
            return Err(data_err(format!("duplicate id `{}`", pair.id)));
        }
        pairs.push(pair);
    }
    Ok(Corpus { name, pairs })
}

#[derive(Debug, Deserialize)]
struct SourceLine {
    id: String,
    source: String,
    #[allow(dead_code)]
    #[serde(default)]
    target: Option<String>,
}

/// `(id, source)` records of a JSONL file whose `target` field is optional.
pub fn load_sources(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SourceLine = serde_json::from_str(line)
            .map_err(|e| Error::Data { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        out.push((rec.id, rec.source));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpus {
    pub train: Corpus,
    pub eval: Corpus,
    pub eval_fraction: f64,
    pub seed: u64,
}

/// Number of evaluation pairs: `eval_fraction × total`, rounded half up.
pub fn eval_count(total: usize, eval_fraction: f64) -> usize {
    (eval_fraction * total as f64 + 0.5).floor() as usize
}

/// Seeded shuffle, then the first `eval_count` pairs go to eval. Both parts
/// keep the corpus' original relative order.
pub fn split_corpus(corpus: &Corpus, eval_fraction: f64, seed: u64) -> Result<SplitCorpus> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!("eval_fraction must be in (0, 1), got {eval_fraction}")));
    }
    let n = corpus.len();
    let k = eval_count(n, eval_fraction);
    if n < 2 || k == 0 || k == n {
        return Err(Error::Corpus(format!(
            "corpus `{}` with {n} pairs is too small for eval fraction {eval_fraction}",
            corpus.name
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut eval_idx = order[..k].to_vec();
    let mut train_idx = order[k..].to_vec();
    eval_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize], suffix: &str| Corpus {
        name: format!("{}/{suffix}", corpus.name),
        pairs: idx.iter().map(|&i| corpus.pairs[i].clone()).collect(),
    };
    Ok(SplitCorpus { train: pick(&train_idx, "train"), eval: pick(&eval_idx, "eval"), eval_fraction, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageRole {
    Summarize,
    Review,
    Feedback,
}

impl StageRole {
    pub const ALL: [StageRole; 3] = [StageRole::Summarize, StageRole::Review, StageRole::Feedback];

    pub fn as_str(self) -> &'static str {
        match self {
            StageRole::Summarize => "summarize",
            StageRole::Review => "review",
            StageRole::Feedback => "feedback",
        }
    }
}

impl fmt::Display for StageRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown role `{s}` (expected summarize, review or feedback)")))
    }
}

const NOUNS: [&str; 30] = [
    "model", "system", "method", "sample", "crystal", "structure", "energy", "result", "network", "protocol",
    "sensor", "signal", "dataset", "compound", "surface", "reaction", "process", "theory", "device", "material",
    "solvent", "catalyst", "layer", "field", "phase", "polymer", "metal", "fiber", "membrane", "particle",
];
const ADJECTIVES: [&str; 12] =
    ["new", "stable", "large", "small", "simple", "novel", "robust", "complex", "dense", "thin", "rapid", "weak"];
const VERBS: [&str; 12] = [
    "improves", "controls", "changes", "predicts", "reduces", "supports", "explains", "limits", "measures", "drives",
    "shapes", "affects",
];
pub const SECTIONS: [&str; 4] = ["introduction", "methods", "results", "conclusion"];
/// Marks the sentences a summary must keep.
pub const KEY_MARKER: &str = "notably";

/// What the generator planted in one source, in the order the target
/// reports it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Planted {
    KeySentence { index: usize },
    MissingSection { section: String },
    RepeatedWord { word: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub role: StageRole,
    pub seed: u64,
    pub length_scale: usize,
    pub entries: BTreeMap<String, Vec<Planted>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub manifest: Manifest,
}

/// Content word slots of a sentence; `the`/`a` are never slots so that
/// repeated-word defects always involve content words.
struct Sentence {
    words: Vec<&'static str>,
}

impl Sentence {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n1 = NOUNS[rng.random_range(0..NOUNS.len())];
        let mut n2 = NOUNS[rng.random_range(0..NOUNS.len())];
        while n2 == n1 {
            n2 = NOUNS[rng.random_range(0..NOUNS.len())];
        }
        let adj = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
        let verb = VERBS[rng.random_range(0..VERBS.len())];
        let words = match rng.random_range(0..3) {
            0 => vec!["the", adj, n1, verb, "the", n2, "."],
            1 => vec!["a", n1, verb, "the", adj, n2, "."],
            _ => vec!["the", n1, verb, "a", adj, n2, "."],
        };
        Self { words }
    }

    fn content_positions(&self) -> Vec<usize> {
        (0..self.words.len()).filter(|&i| !matches!(self.words[i], "the" | "a" | ".")).collect()
    }

    fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Seeded synthetic corpus for one stage role.
///
/// * `summarize`: 4–6 sentences, 1–2 of them prefixed with
///   [`KEY_MARKER`]; the target is the marked sentences.
/// * `review`: four `section :` blocks of two sentences with 1–3 planted
///   defects (doubled content words, a dropped section marker); the target
///   names each defect.
/// * `feedback`: the review family with `2 × length_scale` sentences per
///   section.
pub fn make_synthetic(role: StageRole, size: usize, length_scale: usize, seed: u64) -> Result<SyntheticCorpus> {
    if size == 0 {
        return Err(Error::Config("synthetic corpus size must be at least 1".into()));
    }
    if length_scale == 0 {
        return Err(Error::Config("length_scale must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(size);
    let mut entries = BTreeMap::new();
    for i in 0..size {
        let id = format!("{role}-{seed}-{i:05}");
        let (source, target, planted) = match role {
            StageRole::Summarize => summarize_example(&mut rng),
            StageRole::Review => review_example(&mut rng, 2),
            StageRole::Feedback => review_example(&mut rng, 2 * length_scale),
        };
        pairs.push(ExamplePair { id: id.clone(), source, target });
        entries.insert(id, planted);
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::new(format!("synthetic-{role}"), pairs)?,
        manifest: Manifest { role, seed, length_scale, entries },
    })
}

fn summarize_example(rng: &mut ChaCha8Rng) -> (String, String, Vec<Planted>) {
    let m = rng.random_range(4..=6);
    let k = rng.random_range(1..=2);
    let mut marked: Vec<usize> = (0..m).collect();
    marked.shuffle(rng);
    marked.truncate(k);
    marked.sort_unstable();
    let sentences: Vec<String> = (0..m)
        .map(|i| {
            let s = Sentence::random(rng).text();
            if marked.contains(&i) { format!("{KEY_MARKER} , {s}") } else { s }
        })
        .collect();
    let target = marked.iter().map(|&i| sentences[i].as_str()).collect::<Vec<_>>().join(" ");
    let planted = marked.iter().map(|&index| Planted::KeySentence { index }).collect();
    (sentences.join(" "), target, planted)
}

fn review_example(rng: &mut ChaCha8Rng, per_section: usize) -> (String, String, Vec<Planted>) {
    let mut sections: Vec<Vec<Sentence>> =
        (0..SECTIONS.len()).map(|_| (0..per_section).map(|_| Sentence::random(rng)).collect()).collect();

    let repeats = rng.random_range(0..=2usize);
    let missing = if repeats == 0 { 1 } else { rng.random_range(0..=1usize) };

    let mut slots: Vec<(usize, usize)> =
        (0..SECTIONS.len()).flat_map(|s| (0..per_section).map(move |j| (s, j))).collect();
    slots.shuffle(rng);
    let mut doubled_words = Vec::new();
    for &(s, j) in slots.iter() {
        if doubled_words.len() == repeats {
            break;
        }
        let sentence = &mut sections[s][j];
        let positions = sentence.content_positions();
        let pos = positions[rng.random_range(0..positions.len())];
        let word = sentence.words[pos];
        if doubled_words.contains(&word) {
            continue;
        }
        sentence.words.insert(pos, word);
        doubled_words.push(word);
    }
    let dropped = (missing == 1).then(|| rng.random_range(0..SECTIONS.len()));

    let mut parts = Vec::new();
    for (s, body) in sections.iter().enumerate() {
        if dropped != Some(s) {
            parts.push(format!("{} :", SECTIONS[s]));
        }
        parts.extend(body.iter().map(Sentence::text));
    }
    let source = parts.join(" ");
    // Reported in the order the detector finds them, which is the order the
    // target lists them.
    let planted = detect_defects(&source);
    let target = render_feedback(&planted);
    (source, target, planted)
}

/// Defects visible in a review-style source: dropped section markers in
/// canonical order, then doubled words in order of appearance.
pub fn detect_defects(source: &str) -> Vec<Planted> {
    let tokens = normalize(source);
    let mut out: Vec<Planted> = SECTIONS
        .iter()
        .filter(|s| !tokens.windows(2).any(|w| w[0] == **s && w[1] == ":"))
        .map(|s| Planted::MissingSection { section: s.to_string() })
        .collect();
    for w in tokens.windows(2) {
        if w[0] == w[1] && w[0].chars().all(char::is_alphanumeric) {
            out.push(Planted::RepeatedWord { word: w[0].clone() });
        }
    }
    out
}

pub fn render_feedback(defects: &[Planted]) -> String {
    defects
        .iter()
        .filter_map(|d| match d {
            Planted::MissingSection { section } => Some(format!("the {section} section is missing .")),
            Planted::RepeatedWord { word } => Some(format!("the word {word} is repeated .")),
            Planted::KeySentence { .. } => None,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Defects named by a feedback text, in order.
pub fn parse_feedback(text: &str) -> Vec<Planted> {
    let tokens = normalize(text);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = |k: usize| tokens.get(i + k).map(String::as_str);
        if t(0) == Some("the") && t(1) == Some("word") && t(3) == Some("is") && t(4) == Some("repeated") {
            out.push(Planted::RepeatedWord { word: tokens[i + 2].clone() });
            i += 5;
        } else if t(0) == Some("the") && t(2) == Some("section") && t(3) == Some("is") && t(4) == Some("missing") {
            out.push(Planted::MissingSection { section: tokens[i + 1].clone() });
            i += 5;
        } else {
            i += 1;
        }
    }
    out
}

/// Rule-based target for any synthetic source, derived from the source
/// text alone.
pub fn oracle_target(role: StageRole, source: &str) -> String {
    match role {
        StageRole::Summarize => crate::rouge::split_sentences(source)
            .into_iter()
            .filter(|s| normalize(s).first().map(String::as_str) == Some(KEY_MARKER))
            .collect::<Vec<_>>()
            .join(" "),
        StageRole::Review | StageRole::Feedback => render_feedback(&detect_defects(source)),
    }
}
