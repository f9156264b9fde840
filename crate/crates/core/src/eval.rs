//! Corpus evaluation and the fusion-weight sweep.

use serde::Serialize;

use crate::bleu::bleu_1_to_4;
use crate::error::Result;
use crate::infer::{caption_record, CaptionRecord, Captioner, DecodeOptions, Mode};
use crate::scene::Scene;
use crate::vocab::tokenize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Corpus BLEU@1..4.
    pub bleu: [f64; 4],
    /// Fraction of scenes whose caption equals one of its references.
    pub exact_match: f64,
    pub mode: Mode,
    pub beam: usize,
    /// `None` unless the mode is fused.
    pub alpha: Option<f64>,
    pub max_len: usize,
    pub seed: Option<u64>,
    pub records: Vec<CaptionRecord>,
}

/// Caption every scene and score against its references.
pub fn evaluate(
    captioner: &Captioner,
    scenes: &[Scene],
    opts: &DecodeOptions,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(scenes.len());
    let mut candidates = Vec::with_capacity(scenes.len());
    let mut references = Vec::with_capacity(scenes.len());
    let mut exact = 0;
    for s in scenes {
        let g = captioner.generate(s, opts)?;
        let refs: Vec<Vec<String>> = s.captions.iter().map(|c| tokenize(c)).collect();
        let cand = tokenize(&g.caption);
        exact += usize::from(refs.contains(&cand));
        candidates.push(cand);
        references.push(refs);
        records.push(caption_record(s, &g, opts));
    }
    Ok(EvalReport {
        bleu: bleu_1_to_4(&candidates, &references)?,
        exact_match: exact as f64 / scenes.len().max(1) as f64,
        mode: opts.mode,
        beam: opts.beam,
        alpha: (opts.mode == Mode::Fused).then_some(opts.alpha),
        max_len: opts.max_len,
        seed,
        records,
    })
}

/// `n` evenly spaced weights from 0 to 1, endpoints exact.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Fused BLEU@4 for every weight in `alphas`.
pub fn alpha_sweep(
    captioner: &Captioner,
    scenes: &[Scene],
    alphas: &[f64],
    beam: usize,
    max_len: usize,
) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let opts = DecodeOptions {
                mode: Mode::Fused,
                beam,
                alpha,
                max_len,
            };
            Ok((alpha, evaluate(captioner, scenes, &opts, None)?.bleu[3]))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("alpha,bleu4\n");
    for (a, b) in rows {
        out.push_str(&format!("{a},{b}\n"));
    }
    out
}
