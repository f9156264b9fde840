//! Corpus BLEU on a few hand-written candidates.
//!
//! cargo run --example bleu

use gcn_lstm::bleu::{bleu_1_to_4, closest_ref_len, modified_precision};
use gcn_lstm::vocab::tokenize;

fn main() -> gcn_lstm::Result<()> {
    let data = [
        (
            "a cat sits on the mat",
            vec!["a cat sits on the mat", "there is a cat on the mat"],
        ),
        ("the the the the", vec!["the dog chases the ball"]),
        ("a bird", vec!["a small bird on a branch", "a bird sitting"]),
    ];
    let candidates: Vec<Vec<String>> = data.iter().map(|(c, _)| tokenize(c)).collect();
    let references: Vec<Vec<Vec<String>>> = data
        .iter()
        .map(|(_, r)| r.iter().map(|s| tokenize(s)).collect())
        .collect();
    for n in 1..=4 {
        let (m, t) = modified_precision(&candidates, &references, n);
        println!("{n}-gram precision {m}/{t}");
    }
    for (c, r) in candidates.iter().zip(&references) {
        println!(
            "`{}` closest reference length {}",
            c.join(" "),
            closest_ref_len(c.len(), r)
        );
    }
    let b = bleu_1_to_4(&candidates, &references)?;
    println!(
        "BLEU-1 {:.4}  BLEU-2 {:.4}  BLEU-3 {:.4}  BLEU-4 {:.4}",
        b[0], b[1], b[2], b[3]
    );
    Ok(())
}
