//! Golden fixtures for the text and classification metrics, each value
//! recomputed by a brute-force oracle written independently of the library.

use std::collections::HashMap;

use proptest::prelude::*;
use vl3d::metrics::{
    bleu1, classification_metrics, meteor_exact, parse_diagnosis_answer, rouge1, token_f1, Diagnosis,
};

const EPS: f64 = 1e-9;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn counts(ws: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for w in ws {
        *m.entry(w.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(c: &[String], r: &[String]) -> usize {
    let rc = counts(r);
    counts(c).iter().map(|(w, n)| (*n).min(*rc.get(w).unwrap_or(&0))).sum()
}

fn oracle_bleu1(cand: &str, refr: &str) -> f64 {
    let (c, r) = (words(cand), words(refr));
    if c.is_empty() {
        return 0.0;
    }
    let p = overlap(&c, &r) as f64 / c.len() as f64;
    let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    p * bp
}

fn oracle_rouge1(cand: &str, refr: &str) -> f64 {
    let (c, r) = (words(cand), words(refr));
    let m = overlap(&c, &r) as f64;
    if m == 0.0 {
        return 0.0;
    }
    let (p, rc) = (m / c.len() as f64, m / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

/// Enumerates every exact-match alignment; keeps the most matches, then
/// the fewest chunks.
fn oracle_meteor(cand: &str, refr: &str) -> f64 {
    let (c, r) = (words(cand), words(refr));
    let mut best: Option<(usize, usize)> = None;
    let mut used = vec![false; r.len()];
    let mut pairs = Vec::new();
    fn rec(
        i: usize,
        c: &[String],
        r: &[String],
        used: &mut [bool],
        pairs: &mut Vec<(usize, usize)>,
        best: &mut Option<(usize, usize)>,
    ) {
        if i == c.len() {
            let m = pairs.len();
            let mut chunks = 0;
            for (k, &(ci, ri)) in pairs.iter().enumerate() {
                if k == 0 || !(pairs[k - 1].0 + 1 == ci && pairs[k - 1].1 + 1 == ri) {
                    chunks += 1;
                }
            }
            let better = match *best {
                None => true,
                Some((bm, bc)) => m > bm || (m == bm && chunks < bc),
            };
            if better {
                *best = Some((m, chunks));
            }
            return;
        }
        rec(i + 1, c, r, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                pairs.push((i, j));
                rec(i + 1, c, r, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    rec(0, &c, &r, &mut used, &mut pairs, &mut best);
    let (m, chunks) = best.unwrap_or((0, 0));
    if m == 0 {
        return 0.0;
    }
    let (p, rc) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= EPS
}

#[test]
fn bleu1_fixtures() {
    let expected = 2.0 / 3.0;
    assert!(close(oracle_bleu1("the cat sat", "the cat"), expected));
    assert!(close(bleu1("the cat sat", "the cat"), expected));
    assert!(close(bleu1("a b c", "a b c"), 1.0));
    assert!(close(bleu1("a b", "c d"), 0.0));
    assert_eq!(bleu1("", "a b"), 0.0);
}

#[test]
fn rouge1_and_token_f1_fixtures() {
    let expected = 0.5;
    assert!(close(oracle_rouge1("the cat sat", "the cat slept on mat"), expected));
    assert!(close(rouge1("the cat sat", "the cat slept on mat"), expected));
    assert!(close(token_f1("the cat sat", "the cat slept on mat"), expected));
    assert!(close(rouge1("x y", "x y"), 1.0));
    assert_eq!(rouge1("", "x y"), 0.0);
    assert_eq!(token_f1("", "x y"), 0.0);
}

#[test]
fn meteor_fixtures() {
    let identical = 1.0 - 0.5 / 27.0;
    assert!(close(oracle_meteor("a b c", "a b c"), identical));
    assert!(close(meteor_exact("a b c", "a b c"), identical));
    assert!((meteor_exact("a b c", "a b c") - 0.98148).abs() < 5e-6);
    assert!(close(oracle_meteor("b a", "a b"), 0.5));
    assert!(close(meteor_exact("b a", "a b"), 0.5));
    assert_eq!(meteor_exact("x", "y"), 0.0);
}

#[test]
fn diagnosis_parsing() {
    assert_eq!(parse_diagnosis_answer("yes , a nodule is present ."), Diagnosis::Positive);
    assert_eq!(parse_diagnosis_answer("no , there is no sign of cyst ."), Diagnosis::Negative);
    assert_eq!(parse_diagnosis_answer("the scan is unclear"), Diagnosis::Unknown);
    assert_eq!(parse_diagnosis_answer("YES it is"), Diagnosis::Positive);
    assert_eq!(parse_diagnosis_answer(""), Diagnosis::Unknown);
}

#[test]
fn classification_fixtures() {
    use Diagnosis::*;
    let m = classification_metrics(&[Positive, Negative, Negative, Negative], &[true, true, false, false]).unwrap();
    assert!(close(m.recall, 0.5));
    assert!(close(m.bacc, 0.75));
    assert!(close(m.precision, 1.0));
    assert!(close(m.f1, 2.0 / 3.0));

    let perfect = classification_metrics(&[Positive, Negative], &[true, false]).unwrap();
    assert!(close(perfect.bacc, 1.0) && close(perfect.precision, 1.0) && close(perfect.recall, 1.0) && close(perfect.f1, 1.0));

    let all_pos = classification_metrics(&[Positive; 4], &[true, true, false, false]).unwrap();
    assert!(close(all_pos.bacc, 0.5));

    // Unknown answers count against the true class.
    let unk = classification_metrics(&[Unknown, Unknown], &[true, false]).unwrap();
    assert_eq!((unk.counts.fn_, unk.counts.fp, unk.counts.tp, unk.counts.tn), (1, 1, 0, 0));
    assert_eq!(unk.precision, 0.0);
    assert_eq!(unk.f1, 0.0);

    assert!(classification_metrics(&[Positive], &[true, false]).is_err());
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "the"]), 0..6).prop_map(|v| v.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn library_matches_oracles(c in sentence(), r in sentence().prop_filter("non-empty", |s| !s.is_empty())) {
        prop_assert!(close(bleu1(&c, &r), oracle_bleu1(&c, &r)), "bleu1 {c:?} {r:?}");
        prop_assert!(close(rouge1(&c, &r), oracle_rouge1(&c, &r)), "rouge1 {c:?} {r:?}");
        prop_assert!(close(token_f1(&c, &r), rouge1(&c, &r)));
        prop_assert!(close(meteor_exact(&c, &r), oracle_meteor(&c, &r)), "meteor {c:?} {r:?}: {} vs {}", meteor_exact(&c, &r), oracle_meteor(&c, &r));
    }
}
