//! ROUGE-1/2, ROUGE-L and summary-level ROUGE-Lsum.
//!
//! Both sides are tokenized with [`crate::tokenizer::normalize`].

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }

    fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        if cand_total == 0 || ref_total == 0 {
            return Self::default();
        }
        Self::new(hits as f64 / cand_total as f64, hits as f64 / ref_total as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
    #[serde(rename = "rougeLsum")]
    pub rouge_lsum: RougeScore,
}

impl RougeReport {
    pub fn variants(&self) -> [(&'static str, RougeScore); 4] {
        [("rouge1", self.rouge1), ("rouge2", self.rouge2), ("rougeL", self.rouge_l), ("rougeLsum", self.rouge_lsum)]
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap. Panics if `n == 0`.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let (c, r) = (normalize(candidate), normalize(reference));
    let (cc, rc) = (ngram_counts(&c, n), ngram_counts(&r, n));
    let hits = cc.iter().map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0))).sum();
    RougeScore::from_counts(hits, cc.values().sum(), rc.values().sum())
}

fn lcs_table<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    lcs_table(a, b)[a.len()][b.len()]
}

/// Indices into `a` of one longest common subsequence with `b`.
fn lcs_indices<T: PartialEq>(a: &[T], b: &[T]) -> Vec<usize> {
    let t = lcs_table(a, b);
    let (mut i, mut j) = (a.len(), b.len());
    let mut out = Vec::with_capacity(t[i][j]);
    while i > 0 && j > 0 {
        if a[i - 1] == b[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (normalize(candidate), normalize(reference));
    RougeScore::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

/// Splits after `.`, `!` or `?` when followed by whitespace or end of text.
/// Segments without tokens are dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().map_or(true, |(_, next)| next.is_whitespace());
            if at_boundary {
                let end = i + c.len_utf8();
                out.push(&text[start..end]);
                start = end;
            }
        }
    }
    out.push(&text[start..]);
    out.into_iter().map(str::trim).filter(|s| !normalize(s).is_empty()).collect()
}

/// Summary-level LCS: for each reference sentence, the union of its LCS
/// matches against every candidate sentence, with hits clipped by token
/// multiplicity on both sides.
pub fn rouge_lsum(candidate: &str, reference: &str) -> RougeScore {
    let cand: Vec<Vec<String>> = split_sentences(candidate).into_iter().map(normalize).collect();
    let refs: Vec<Vec<String>> = split_sentences(reference).into_iter().map(normalize).collect();
    let cand_total: usize = cand.iter().map(Vec::len).sum();
    let ref_total: usize = refs.iter().map(Vec::len).sum();

    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for t in cand.iter().flatten() {
        *cand_counts.entry(t).or_insert(0) += 1;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in refs.iter().flatten() {
        *ref_counts.entry(t).or_insert(0) += 1;
    }

    let mut hits = 0;
    for r in &refs {
        let union: BTreeSet<usize> = cand.iter().flat_map(|c| lcs_indices(r, c)).collect();
        for i in union {
            let tok = r[i].as_str();
            let (rc, cc) = (ref_counts.get_mut(tok).unwrap(), cand_counts.get_mut(tok));
            if let Some(cc) = cc {
                if *rc > 0 && *cc > 0 {
                    hits += 1;
                    *rc -= 1;
                    *cc -= 1;
                }
            }
        }
    }
    RougeScore::from_counts(hits, cand_total, ref_total)
}

pub fn rouge_report(candidate: &str, reference: &str) -> RougeReport {
    RougeReport {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
        rouge_lsum: rouge_lsum(candidate, reference),
    }
}

/// Per-component arithmetic mean of per-pair reports, summed in input order.
pub fn corpus_rouge<C: AsRef<str>, R: AsRef<str>>(pairs: &[(C, R)]) -> Result<RougeReport> {
    if pairs.is_empty() {
        return Err(Error::Corpus("corpus_rouge needs at least one pair".into()));
    }
    let reports: Vec<RougeReport> = pairs.iter().map(|(c, r)| rouge_report(c.as_ref(), r.as_ref())).collect();
    let n = reports.len() as f64;
    let mean = |pick: fn(&RougeReport) -> RougeScore| {
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for rep in &reports {
            let s = pick(rep);
            p += s.precision;
            r += s.recall;
            f += s.f1;
        }
        RougeScore { precision: p / n, recall: r / n, f1: f / n }
    };
    Ok(RougeReport {
        rouge1: mean(|r| r.rouge1),
        rouge2: mean(|r| r.rouge2),
        rouge_l: mean(|r| r.rouge_l),
        rouge_lsum: mean(|r| r.rouge_lsum),
    })
}
