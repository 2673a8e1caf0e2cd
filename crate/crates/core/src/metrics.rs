//! Text-generation and diagnosis metrics.
//!
//! All text metrics tokenize by lowercasing and splitting on whitespace and
//! score one candidate against one reference.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::tokenize;

/// Beyond this many search states the chunk minimization in
/// [`meteor_exact`] falls back to a greedy left-to-right alignment.
const METEOR_STATE_LIMIT: usize = 1 << 20;

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_default() += 1;
    }
    m
}

/// Size of the multiset intersection.
fn clipped_matches(cand: &[String], refr: &[String]) -> usize {
    let rc = counts(refr);
    counts(cand).iter().map(|(w, &c)| c.min(rc.get(w).copied().unwrap_or(0))).sum()
}

pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<String> = tokenize(candidate).collect();
    let refr: Vec<String> = tokenize(reference).collect();
    if cand.is_empty() {
        return 0.0;
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let p = clipped_matches(&cand, &refr) as f64 / c;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    p * bp
}

pub fn rouge1(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<String> = tokenize(candidate).collect();
    let refr: Vec<String> = tokenize(reference).collect();
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let m = clipped_matches(&cand, &refr) as f64;
    let (p, r) = (m / cand.len() as f64, m / refr.len() as f64);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Bag-of-tokens F1. Numerically the same as [`rouge1`]; it stands in for
/// embedding-based F1 scores and makes no claim of semantic matching.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    rouge1(candidate, reference)
}

/// METEOR with exact unigram matching only: the alignment maximizes matches
/// and then minimizes chunks; `F = 10PR / (R + 9P)` and
/// `score = F · (1 − 0.5 · (chunks / m)³)`.
pub fn meteor_exact(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<String> = tokenize(candidate).collect();
    let refr: Vec<String> = tokenize(reference).collect();
    let m = clipped_matches(&cand, &refr);
    if m == 0 {
        return 0.0;
    }
    let chunks = min_chunks(&cand, &refr, m);
    let (p, r) = (m as f64 / cand.len() as f64, m as f64 / refr.len() as f64);
    let f = 10.0 * p * r / (r + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

/// Fewest chunks over all alignments with `m` exact matches. A chunk is a
/// run of matches contiguous in both strings, so chunks = m − links where
/// a link joins candidate `i, i+1` matched to reference `j, j+1`.
fn min_chunks(cand: &[String], refr: &[String], m: usize) -> usize {
    let mut search = ChunkSearch::new(cand, refr);
    match search.best(0, None, &mut vec![0u64; refr.len().div_ceil(64)]) {
        Some(links) if !search.overflow => m - links,
        _ => m - greedy_links(cand, refr),
    }
}

struct ChunkSearch<'a> {
    cand: &'a [String],
    refr: &'a [String],
    /// Matches still owed per word after candidate position `i`.
    need: HashMap<&'a str, usize>,
    /// Occurrences of each word in `cand[i..]`, per `i`.
    remaining: Vec<usize>,
    memo: HashMap<(usize, Option<usize>, Vec<u64>), Option<usize>>,
    overflow: bool,
}

impl<'a> ChunkSearch<'a> {
    fn new(cand: &'a [String], refr: &'a [String]) -> Self {
        let (cc, rc) = (counts(cand), counts(refr));
        let need = cc.iter().map(|(&w, &c)| (w, c.min(rc.get(w).copied().unwrap_or(0)))).collect();
        let mut remaining = vec![0; cand.len()];
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for i in (0..cand.len()).rev() {
            let e = seen.entry(cand[i].as_str()).or_default();
            *e += 1;
            remaining[i] = *e;
        }
        Self { cand, refr, need, remaining, memo: HashMap::new(), overflow: false }
    }

    fn used_of(&self, word: &str, used: &[u64]) -> usize {
        self.refr
            .iter()
            .enumerate()
            .filter(|(j, w)| w.as_str() == word && used[j / 64] >> (j % 64) & 1 == 1)
            .count()
    }

    /// Most links achievable from candidate position `i`, or `None` when
    /// the required match count cannot be met.
    fn best(&mut self, i: usize, prev: Option<usize>, used: &mut Vec<u64>) -> Option<usize> {
        if i == self.cand.len() {
            return Some(0);
        }
        let key = (i, prev, used.clone());
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        if self.memo.len() > METEOR_STATE_LIMIT {
            self.overflow = true;
            return Some(0);
        }
        let word = self.cand[i].as_str();
        let need = self.need[word] - self.used_of(word, used);
        let mut best: Option<usize> = None;
        if need > 0 {
            for j in 0..self.refr.len() {
                if self.refr[j] != word || used[j / 64] >> (j % 64) & 1 == 1 {
                    continue;
                }
                used[j / 64] |= 1 << (j % 64);
                let link = usize::from(prev.is_some_and(|p| p + 1 == j));
                if let Some(rest) = self.best(i + 1, Some(j), used) {
                    best = best.max(Some(rest + link));
                }
                used[j / 64] &= !(1 << (j % 64));
            }
        }
        // Skipping is allowed only if later occurrences can still cover the need.
        if self.remaining[i] > need {
            if let Some(rest) = self.best(i + 1, None, used) {
                best = best.max(Some(rest));
            }
        }
        self.memo.insert(key, best);
        best
    }
}

fn greedy_links(cand: &[String], refr: &[String]) -> usize {
    let mut used = vec![false; refr.len()];
    let mut prev: Option<usize> = None;
    let mut links = 0;
    for w in cand {
        let pick = prev
            .map(|p| p + 1)
            .filter(|&j| j < refr.len() && !used[j] && refr[j] == *w)
            .or_else(|| (0..refr.len()).find(|&j| !used[j] && refr[j] == *w));
        if let Some(j) = pick {
            if prev.is_some_and(|p| p + 1 == j) {
                links += 1;
            }
            used[j] = true;
        }
        prev = pick;
    }
    links
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnosis {
    Positive,
    Negative,
    Unknown,
}

/// Leading token `yes` → positive, `no` → negative, anything else unknown.
pub fn parse_diagnosis_answer(answer: &str) -> Diagnosis {
    match tokenize(answer).next().as_deref() {
        Some("yes") => Diagnosis::Positive,
        Some("no") => Diagnosis::Negative,
        _ => Diagnosis::Unknown,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub bacc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Pooled binary metrics. An unknown prediction counts as the wrong class.
pub fn classification_metrics(predictions: &[Diagnosis], labels: &[bool]) -> Result<ClassificationMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (l, p) {
            (true, Diagnosis::Positive) => c.tp += 1,
            (true, _) => c.fn_ += 1,
            (false, Diagnosis::Negative) => c.tn += 1,
            (false, _) => c.fp += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(ClassificationMetrics { bacc: (recall + specificity) / 2.0, precision, recall, f1, counts: c })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu1: f64,
    pub rouge1: f64,
    pub meteor_exact: f64,
    pub token_f1: f64,
}

impl TextScores {
    pub fn score(candidate: &str, reference: &str) -> Self {
        Self {
            bleu1: bleu1(candidate, reference),
            rouge1: rouge1(candidate, reference),
            meteor_exact: meteor_exact(candidate, reference),
            token_f1: token_f1(candidate, reference),
        }
    }

    /// Arithmetic mean per metric; zeros for an empty slice.
    pub fn mean(scores: &[TextScores]) -> Self {
        let n = scores.len().max(1) as f64;
        let sum = |f: fn(&TextScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Self {
            bleu1: sum(|s| s.bleu1),
            rouge1: sum(|s| s.rouge1),
            meteor_exact: sum(|s| s.meteor_exact),
            token_f1: sum(|s| s.token_f1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_fixtures() {
        assert!((bleu1("the cat sat", "the cat") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu1("a b", "a b"), 1.0);
        assert_eq!(bleu1("x y", "a b"), 0.0);
        assert_eq!(bleu1("", "a b"), 0.0);
        assert!((rouge1("the cat sat", "the cat slept on mat") - 0.5).abs() < 1e-12);
        assert_eq!(rouge1("", "a"), 0.0);
        assert!((meteor_exact("b a", "a b") - 0.5).abs() < 1e-12);
        assert_eq!(meteor_exact("x", "a"), 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let v = bleu1("the", "the cat");
        assert!((v - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn chunk_search_prefers_contiguous_alignment() {
        // "a b" could align its "a" to either reference "a"; the second gives one chunk.
        let s = meteor_exact("a b", "a x a b");
        let (p, r) = (1.0, 0.5);
        let f = 10.0 * p * r / (r + 9.0 * p);
        assert!((s - f * (1.0 - 0.5 * (0.5f64).powi(3))).abs() < 1e-12);
    }

    #[test]
    fn parse_leading_token() {
        assert_eq!(parse_diagnosis_answer("yes , a nodule is present ."), Diagnosis::Positive);
        assert_eq!(parse_diagnosis_answer("No , there is no sign of cyst ."), Diagnosis::Negative);
        assert_eq!(parse_diagnosis_answer("the scan is unclear"), Diagnosis::Unknown);
        assert_eq!(parse_diagnosis_answer(""), Diagnosis::Unknown);
    }

    #[test]
    fn unknown_counts_against_true_class() {
        let m = classification_metrics(&[Diagnosis::Unknown, Diagnosis::Unknown], &[true, false]).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 0, fp: 1, tn: 0, fn_: 1 });
        assert!(classification_metrics(&[Diagnosis::Positive], &[]).is_err());
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "d", "\\."], 0..12).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn text_metrics_bounded(c in words(), r in words()) {
            for v in [bleu1(&c, &r), rouge1(&c, &r), meteor_exact(&c, &r), token_f1(&c, &r)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn exact_chunks_never_exceed_greedy(c in words(), r in words()) {
            let cand: Vec<String> = tokenize(&c).collect();
            let refr: Vec<String> = tokenize(&r).collect();
            let m = clipped_matches(&cand, &refr);
            if m > 0 {
                prop_assert!(min_chunks(&cand, &refr, m) <= m - greedy_links(&cand, &refr));
            }
        }

        #[test]
        fn classification_permutation_invariant(pairs in proptest::collection::vec((0u8..3, any::<bool>()), 1..40), seed in any::<u64>()) {
            let to = |p: u8| [Diagnosis::Positive, Diagnosis::Negative, Diagnosis::Unknown][p as usize];
            let preds: Vec<Diagnosis> = pairs.iter().map(|(p, _)| to(*p)).collect();
            let labels: Vec<bool> = pairs.iter().map(|(_, l)| *l).collect();
            let a = classification_metrics(&preds, &labels).unwrap();
            let perm = crate::rng::RngHandle::new(seed).permutation(pairs.len());
            let pp: Vec<Diagnosis> = perm.iter().map(|&i| preds[i]).collect();
            let ll: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(a, classification_metrics(&pp, &ll).unwrap());
        }
    }
}
