mod common;

use common::{hand_corpus, oracle_bleu, HAND_CORPUS_BLEU};
use gcn_lstm::bleu::{bleu, bleu_1_to_4};

#[test]
fn oracle_reproduces_frozen_values() {
    let (c, r) = hand_corpus();
    for n in 1..=4 {
        assert_eq!(oracle_bleu(&c, &r, n), HAND_CORPUS_BLEU[n - 1]);
    }
}

#[test]
fn library_matches_oracle() {
    let (c, r) = hand_corpus();
    for (n, b) in bleu_1_to_4(&c, &r).unwrap().into_iter().enumerate() {
        assert!(
            (b - HAND_CORPUS_BLEU[n]).abs() < 1e-12,
            "BLEU@{}: {b}",
            n + 1
        );
    }
}

#[test]
fn library_matches_oracle_on_subsets() {
    let (c, r) = hand_corpus();
    for start in 0..c.len() {
        for len in 1..=c.len() - start {
            let (cs, rs) = (&c[start..start + len], &r[start..start + len]);
            for n in 1..=4 {
                let got = bleu(cs, rs, n).unwrap();
                assert!(
                    (got - oracle_bleu(cs, rs, n)).abs() < 1e-12,
                    "{start}+{len} @{n}"
                );
            }
        }
    }
}

#[test]
fn sanity() {
    let (c, _) = hand_corpus();
    let exact: Vec<_> = c.iter().map(|s| vec![s.clone()]).collect();
    assert_eq!(bleu_1_to_4(&c, &exact).unwrap(), [1.0; 4]);
    let disjoint = vec![vec![vec!["zzz"; 3]]; 2];
    assert_eq!(bleu(&c[..2], &disjoint, 1).unwrap(), 0.0);
}
