use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gcn_lstm::error::{read_to_string, write};
use gcn_lstm::eval::{alpha_grid, alpha_sweep, evaluate, sweep_csv};
use gcn_lstm::gradcheck::GradCheckConfig;
use gcn_lstm::infer::{attention_records, caption_record, Captioner, DecodeOptions, Mode};
use gcn_lstm::model::{grad_check_suite, BranchModel, GraphKind};
use gcn_lstm::params::{Checkpoint, ParamSet};
use gcn_lstm::scene::read_scenes;
use gcn_lstm::semantic::{build_semantic_graph, RelationClassifierParams};
use gcn_lstm::synth::{generate_synthetic_corpus, SynthConfig};
use gcn_lstm::train::{loss_curve_csv, train_branch, TrainConfig};
use gcn_lstm::vocab::Vocabulary;
use gcn_lstm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gcn-lstm",
    version,
    about = "Relation-aware image captioning on region graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene corpus as JSONL.
    GenData(GenData),
    /// Export the spatial and semantic graph of every scene.
    BuildGraphs(BuildGraphs),
    /// Train one or both branches.
    Train(Train),
    /// Caption scenes with trained checkpoints.
    Caption(Caption),
    /// Score captions against the references with BLEU@1-4.
    Evaluate(Evaluate),
    /// Fused BLEU@4 over a grid of fusion weights.
    AlphaSweep(AlphaSweep),
    /// Finite-difference check of the full model gradient.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_scenes: Option<usize>,
}

#[derive(Args)]
struct BuildGraphs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Relation classifier checkpoint; without it the scenes' own semantic edges are used.
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    num_semantic: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    scenes: PathBuf,
    /// Output directory for checkpoints, vocabulary and loss curves.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Branch to train: sem, spa, or fused for both.
    #[arg(long, default_value = "fused")]
    mode: Mode,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "fused")]
    mode: Mode,
    #[arg(long, default_value_t = gcn_lstm::infer::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = gcn_lstm::infer::DEFAULT_BEAM)]
    beam: usize,
    #[arg(long, default_value_t = gcn_lstm::infer::DEFAULT_MAX_LEN)]
    max_len: usize,
}

impl DecodeArgs {
    fn options(&self) -> DecodeOptions {
        DecodeOptions {
            mode: self.mode,
            beam: self.beam,
            alpha: self.alpha,
            max_len: self.max_len,
        }
    }
}

#[derive(Args)]
struct Caption {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Caption JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step attention weights as JSONL.
    #[arg(long)]
    attention: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AlphaSweep {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = gcn_lstm::infer::DEFAULT_BEAM)]
    beam: usize,
    #[arg(long, default_value_t = 11)]
    points: usize,
    #[arg(long, default_value_t = gcn_lstm::infer::DEFAULT_MAX_LEN)]
    max_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    instances: usize,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, kind: GraphKind) -> PathBuf {
    dir.join(format!("{kind}.ckpt.json"))
}

fn load_captioner(dir: &Path) -> Result<Captioner> {
    let vocab = Vocabulary::from_json(&read_to_string(&dir.join("vocab.json"))?)?;
    let load = |kind| {
        let p = checkpoint_path(dir, kind);
        p.exists().then(|| BranchModel::load(&p, kind)).transpose()
    };
    Captioner::new(vocab, load(GraphKind::Semantic)?, load(GraphKind::Spatial)?)
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_scenes {
        cfg.n_scenes = n;
    }
    let scenes = generate_synthetic_corpus(&cfg)?;
    gcn_lstm::scene::write_scenes(&a.out, &scenes)
}

fn build_graphs(a: BuildGraphs) -> Result<()> {
    let scenes = read_scenes(&a.scenes)?;
    let classifier = match &a.classifier {
        Some(p) => Some(RelationClassifierParams::from_checkpoint(
            &Checkpoint::load(p)?,
        )?),
        None => None,
    };
    std::fs::create_dir_all(&a.out)?;
    for s in &scenes {
        let semantic = match &classifier {
            Some(c) => build_semantic_graph(&s.features()?, &s.union_features, c)?,
            None => s.semantic_graph(a.num_semantic)?,
        };
        write(
            &a.out.join(format!("{}.spatial.json", s.image_id)),
            s.spatial_graph()?.to_json(),
        )?;
        write(
            &a.out.join(format!("{}.semantic.json", s.image_id)),
            semantic.to_json(),
        )?;
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.max_iters = n;
    }
    let scenes = read_scenes(&a.scenes)?;
    let kinds: &[GraphKind] = match a.mode {
        Mode::Sem => &[GraphKind::Semantic],
        Mode::Spa => &[GraphKind::Spatial],
        Mode::Fused => &[GraphKind::Semantic, GraphKind::Spatial],
    };
    std::fs::create_dir_all(&a.out)?;
    for &kind in kinds {
        let (trainer, curve) = train_branch(&scenes, kind, cfg.clone())?;
        write(&a.out.join("vocab.json"), trainer.vocab.to_json())?;
        trainer
            .model
            .to_checkpoint()
            .save(checkpoint_path(&a.out, kind))?;
        write(
            &a.out.join(format!("loss_{kind}.csv")),
            loss_curve_csv(&curve),
        )?;
        log::info!(
            "{kind}: final loss {:.6}",
            curve.last().map_or(f64::NAN, |c| c.1)
        );
    }
    write(
        &a.out.join("train_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    Ok(())
}

fn caption(a: Caption) -> Result<()> {
    let captioner = load_captioner(&a.decode.model)?;
    let scenes = read_scenes(&a.decode.scenes)?;
    let opts = a.decode.options();
    let mut lines = String::new();
    let mut att = String::new();
    for s in &scenes {
        let g = captioner.generate(s, &opts)?;
        lines.push_str(&serde_json::to_string(&caption_record(s, &g, &opts))?);
        lines.push('\n');
        for r in attention_records(s, &g, &opts) {
            att.push_str(&serde_json::to_string(&r)?);
            att.push('\n');
        }
    }
    if let Some(p) = &a.attention {
        write(p, att)?;
    }
    emit(a.out.as_deref(), &lines)
}

fn run_evaluate(a: Evaluate) -> Result<()> {
    let captioner = load_captioner(&a.decode.model)?;
    let scenes = read_scenes(&a.decode.scenes)?;
    let report = evaluate(&captioner, &scenes, &a.decode.options(), a.seed)?;
    emit(
        a.out.as_deref(),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )
}

fn run_alpha_sweep(a: AlphaSweep) -> Result<()> {
    let captioner = load_captioner(&a.model)?;
    let scenes = read_scenes(&a.scenes)?;
    let rows = alpha_sweep(
        &captioner,
        &scenes,
        &alpha_grid(a.points),
        a.beam,
        a.max_len,
    )?;
    emit(a.out.as_deref(), &sweep_csv(&rows))
}

fn gradcheck(a: Gradcheck) -> Result<bool> {
    let suite = grad_check_suite(a.seed, a.instances, GradCheckConfig::default())?;
    let mut ok = true;
    for (i, inst) in suite.iter().enumerate() {
        let verdict = if inst.report.passed() { "PASS" } else { "FAIL" };
        println!(
            "instance {i}: {} branch, K={}, D_v={}, |V|={}, {} layer(s): {verdict} (max rel error {:.3e})",
            inst.kind,
            inst.regions,
            inst.dims.feature,
            inst.dims.vocab,
            inst.gcn_layers,
            inst.report.max_rel_error()
        );
        if !inst.report.passed() {
            print!("{}", inst.report);
            ok = false;
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::BuildGraphs(a) => build_graphs(a)?,
        Command::Train(a) => train(a)?,
        Command::Caption(a) => caption(a)?,
        Command::Evaluate(a) => run_evaluate(a)?,
        Command::AlphaSweep(a) => run_alpha_sweep(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn report(e: &Error) {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let message = rendered
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": message }));
            eprint!("{rendered}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            report(&e);
            ExitCode::from(1)
        }
    }
}
