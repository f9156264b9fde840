//! Train both branches on a small synthetic corpus, then sweep the late-fusion
//! weight and report BLEU-4 on held-out scenes.
//!
//! cargo run --release --example alpha_sweep -- [iterations]

use gcn_lstm::eval::{alpha_grid, alpha_sweep, evaluate};
use gcn_lstm::infer::{fuse, Captioner, DecodeOptions, Mode};
use gcn_lstm::model::GraphKind;
use gcn_lstm::synth::{generate_synthetic_corpus, SynthConfig};
use gcn_lstm::train::{build_vocab, TrainConfig, Trainer};

fn main() -> gcn_lstm::Result<()> {
    let iters = std::env::args()
        .nth(1)
        .map_or(600, |a| a.parse().expect("iteration count"));
    let scenes = generate_synthetic_corpus(&SynthConfig {
        n_scenes: 60,
        seed: 11,
        ..Default::default()
    })?;
    let (train, test) = scenes.split_at(45);
    let cfg = TrainConfig {
        max_iters: iters,
        ..TrainConfig::desk()
    };
    // both branches must share one vocabulary
    let vocab = build_vocab(&scenes, cfg.min_count)?;
    let mut models = Vec::new();
    for kind in [GraphKind::Semantic, GraphKind::Spatial] {
        let mut t = Trainer::with_vocab(train, kind, vocab.clone(), cfg.clone())?;
        let curve = t.run(|_| {})?;
        println!(
            "{kind}: final loss {:.4}",
            curve.last().map_or(f64::NAN, |c| c.1)
        );
        models.push(t.model);
    }
    let spatial = models.pop();
    let semantic = models.pop();
    let captioner = Captioner::new(vocab, semantic, spatial)?;

    println!(
        "fuse([0.6, 0.4], [0.2, 0.8], 0.7) = {:?}",
        fuse(&[0.6, 0.4], &[0.2, 0.8], 0.7)?
    );
    for mode in [Mode::Sem, Mode::Spa, Mode::Fused] {
        let report = evaluate(
            &captioner,
            test,
            &DecodeOptions {
                mode,
                ..Default::default()
            },
            None,
        )?;
        println!(
            "{:5}  BLEU-4 {:.4}  exact {:.3}",
            mode.to_string(),
            report.bleu[3],
            report.exact_match
        );
    }
    for (alpha, b4) in alpha_sweep(&captioner, test, &alpha_grid(11), 3, 20)? {
        println!("alpha {alpha:.1}  BLEU-4 {b4:.4}");
    }
    Ok(())
}
