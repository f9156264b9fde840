//! Corpus-level BLEU with clipped n-gram precision and a brevity penalty.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_default() += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total over the corpus, for `n`-grams.
pub fn modified_precision<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
    n: usize,
) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (cand, refs) in candidates.iter().zip(references) {
        let counts = ngram_counts(cand, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_default();
                *e = (*e).max(c);
            }
        }
        for (g, c) in &counts {
            matched += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            total += c;
        }
    }
    (matched, total)
}

/// Reference length closest to `len`; the shorter one wins ties.
pub fn closest_ref_len<S>(len: usize, refs: &[Vec<S>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

/// BLEU@`n` of a tokenized corpus; every candidate needs at least one reference.
pub fn bleu<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
    n: usize,
) -> Result<f64> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(Error::invalid(
            "bleu",
            format!("order must be 1..={MAX_ORDER}, got {n}"),
        ));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "bleu",
            &[candidates.len()],
            &[references.len()],
        ));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::invalid(
            "bleu",
            format!("candidate {i} has no references"),
        ));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = modified_precision(candidates, references, k);
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| closest_ref_len(cand.len(), refs))
        .sum();
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// BLEU@1 through BLEU@4.
pub fn bleu_1_to_4<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
) -> Result<[f64; MAX_ORDER]> {
    let mut out = [0.0; MAX_ORDER];
    for (n, o) in out.iter_mut().enumerate() {
        *o = bleu(candidates, references, n + 1)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn exact_match_is_one() {
        let c = vec![toks("a cat sits on a mat"), toks("the dog runs")];
        let r = vec![
            vec![toks("a cat sits on a mat")],
            vec![toks("the dog runs"), toks("a dog")],
        ];
        for b in bleu_1_to_4(&c, &r).unwrap() {
            assert!((b - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn disjoint_is_zero() {
        let c = vec![toks("x y z")];
        let r = vec![vec![toks("a b c")]];
        assert_eq!(bleu(&c, &r, 1).unwrap(), 0.0);
    }

    #[test]
    fn clipping_and_brevity() {
        // "the the the the" against "the cat": clipped unigram precision 1/4
        let c = vec![toks("the the the the")];
        let r = vec![vec![toks("the cat")]];
        assert!((bleu(&c, &r, 1).unwrap() - 0.25).abs() < 1e-15);
        // short candidate pays exp(1 - r/c)
        let c = vec![toks("a b")];
        let r = vec![vec![toks("a b c d")]];
        assert!((bleu(&c, &r, 1).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn closest_length_prefers_shorter_on_ties() {
        let refs = vec![toks("a b c d e"), toks("a b c")];
        assert_eq!(closest_ref_len(4, &refs), 3);
    }

    #[test]
    fn empty_candidate_counts_as_zero_precision() {
        let c: Vec<Vec<String>> = vec![vec![], toks("a b")];
        let r = vec![vec![toks("a")], vec![toks("a b")]];
        let b = bleu(&c, &r, 1).unwrap();
        assert!(b > 0.0 && b <= 1.0);
        assert!(bleu(&c, &[vec![], vec![]], 1).is_err());
        assert!(bleu(&c, &r, 5).is_err());
    }
}
