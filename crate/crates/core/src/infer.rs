//! Caption generation: greedy and beam search over one branch or the late
//! fusion of both.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_step, DecoderState, EncodedContext};
use crate::error::{Error, Result};
use crate::model::{BranchModel, GraphKind};
use crate::scene::Scene;
use crate::tensor::argmax;
use crate::vocab::{Vocabulary, BOS, EOS, UNK};

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_BEAM: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sem,
    Spa,
    Fused,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sem => "sem",
            Mode::Spa => "spa",
            Mode::Fused => "fused",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sem" => Ok(Mode::Sem),
            "spa" => Ok(Mode::Spa),
            "fused" => Ok(Mode::Fused),
            other => Err(Error::invalid(
                "mode",
                format!("expected sem, spa or fused, got `{other}`"),
            )),
        }
    }
}

/// `alpha * p_sem + (1 - alpha) * p_spa`.
pub fn fuse(p_sem: &[f64], p_spa: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(
            "fuse",
            format!("alpha must lie in [0, 1], got {alpha}"),
        ));
    }
    if p_sem.len() != p_spa.len() {
        return Err(Error::shape("fuse", &[p_sem.len()], &[p_spa.len()]));
    }
    for p in [p_sem, p_spa] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("fuse", format!("input sums to {s}, not 1")));
        }
    }
    Ok(p_sem
        .iter()
        .zip(p_spa)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub mode: Mode,
    pub beam: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            mode: Mode::Fused,
            beam: DEFAULT_BEAM,
            alpha: DEFAULT_ALPHA,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Generated tokens, without BOS and EOS.
    pub tokens: Vec<usize>,
    pub caption: String,
    pub log_prob: f64,
    /// `log_prob` divided by the number of generated tokens, EOS included.
    pub score: f64,
    /// Attention weights per active branch, per step.
    pub attention: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    states: Vec<DecoderState>,
    attention: Vec<Vec<Vec<f64>>>,
    done: bool,
}

impl Hypothesis {
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    fn score(&self) -> f64 {
        self.log_prob / self.generated().max(1) as f64
    }
}

type StepResult = (Vec<f64>, Vec<DecoderState>, Vec<Vec<f64>>);

/// Per-scene decoding state: the branch models used by the mode and their
/// encoded contexts.
struct Active<'a> {
    branches: Vec<(&'a BranchModel, EncodedContext)>,
    alpha: f64,
}

impl Active<'_> {
    /// Next-word distribution, the new states and the attention maps.
    fn step(&self, states: &[DecoderState], word: usize) -> Result<StepResult> {
        let mut probs = Vec::with_capacity(self.branches.len());
        let mut new_states = Vec::with_capacity(self.branches.len());
        let mut att = Vec::with_capacity(self.branches.len());
        for ((model, ctx), state) in self.branches.iter().zip(states) {
            let out = decode_step(&model.decoder, ctx, state, word)?;
            probs.push(out.probs);
            new_states.push(out.state);
            att.push(out.attention);
        }
        let p = match probs.as_slice() {
            [single] => single.clone(),
            [sem, spa] => fuse(sem, spa, self.alpha)?,
            _ => unreachable!("one or two branches"),
        };
        Ok((p, new_states, att))
    }

    fn start(&self) -> Hypothesis {
        Hypothesis {
            tokens: vec![BOS],
            log_prob: 0.0,
            states: self
                .branches
                .iter()
                .map(|(m, _)| DecoderState::zeros(m.dims().hidden))
                .collect(),
            attention: vec![Vec::new(); self.branches.len()],
            done: false,
        }
    }
}

fn selectable(word: usize) -> bool {
    word != BOS && word != UNK
}

/// Both branches, or one of them, plus the shared vocabulary.
#[derive(Clone, Debug)]
pub struct Captioner {
    pub vocab: Vocabulary,
    pub semantic: Option<BranchModel>,
    pub spatial: Option<BranchModel>,
}

impl Captioner {
    pub fn new(
        vocab: Vocabulary,
        semantic: Option<BranchModel>,
        spatial: Option<BranchModel>,
    ) -> Result<Self> {
        for m in semantic.iter().chain(&spatial) {
            if m.dims().vocab != vocab.len() {
                return Err(Error::invalid(
                    "captioner",
                    format!(
                        "{} checkpoint has a vocabulary of {}, expected {}",
                        m.kind,
                        m.dims().vocab,
                        vocab.len()
                    ),
                ));
            }
        }
        if semantic
            .as_ref()
            .is_some_and(|m| m.kind != GraphKind::Semantic)
            || spatial
                .as_ref()
                .is_some_and(|m| m.kind != GraphKind::Spatial)
        {
            return Err(Error::invalid(
                "captioner",
                "branch models passed in the wrong slots",
            ));
        }
        Ok(Captioner {
            vocab,
            semantic,
            spatial,
        })
    }

    fn branch(&self, kind: GraphKind) -> Result<&BranchModel> {
        let m = match kind {
            GraphKind::Semantic => self.semantic.as_ref(),
            GraphKind::Spatial => self.spatial.as_ref(),
        };
        m.ok_or_else(|| Error::invalid("captioner", format!("no {kind} checkpoint loaded")))
    }

    fn activate(&self, scene: &Scene, opts: &DecodeOptions) -> Result<Active<'_>> {
        if opts.beam == 0 || opts.max_len == 0 {
            return Err(Error::invalid(
                "generate",
                "beam and max_len must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&opts.alpha) {
            return Err(Error::invalid(
                "generate",
                format!("alpha must lie in [0, 1], got {}", opts.alpha),
            ));
        }
        let kinds: &[GraphKind] = match opts.mode {
            Mode::Sem => &[GraphKind::Semantic],
            Mode::Spa => &[GraphKind::Spatial],
            Mode::Fused => &[GraphKind::Semantic, GraphKind::Spatial],
        };
        let features = scene.features()?;
        let mut branches = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let model = self.branch(kind)?;
            let num_semantic = model.encoder.layers[0].num_labels();
            let graph = kind.graph(scene, num_semantic)?;
            branches.push((model, model.context(&features, &graph)?));
        }
        Ok(Active {
            branches,
            alpha: opts.alpha,
        })
    }

    fn finish(&self, h: Hypothesis) -> Generated {
        let tokens: Vec<usize> = h.tokens[1..]
            .iter()
            .copied()
            .filter(|&t| t != EOS)
            .collect();
        Generated {
            caption: self.vocab.decode(&tokens),
            score: h.score(),
            log_prob: h.log_prob,
            attention: h.attention,
            tokens,
        }
    }

    /// Take the most probable word at every step.
    pub fn greedy(&self, scene: &Scene, opts: &DecodeOptions) -> Result<Generated> {
        let active = self.activate(scene, opts)?;
        let mut h = active.start();
        while h.generated() < opts.max_len {
            let (mut p, states, att) = active.step(&h.states, *h.tokens.last().unwrap())?;
            p[BOS] = f64::NEG_INFINITY;
            p[UNK] = f64::NEG_INFINITY;
            let w = argmax(&p);
            h.log_prob += p[w].ln();
            h.tokens.push(w);
            h.states = states;
            for (dump, a) in h.attention.iter_mut().zip(att) {
                dump.push(a);
            }
            if w == EOS {
                break;
            }
        }
        Ok(self.finish(h))
    }

    /// Beam search; `beam = 1` reduces to [`Captioner::greedy`].
    pub fn generate(&self, scene: &Scene, opts: &DecodeOptions) -> Result<Generated> {
        let active = self.activate(scene, opts)?;
        let mut live = vec![active.start()];
        let mut completed: Vec<Hypothesis> = Vec::new();

        while !live.is_empty() {
            // (hypothesis, word, log prob) sorted best first; ties resolved
            // by hypothesis rank and then word index
            let mut expansions = Vec::new();
            let mut outputs = Vec::with_capacity(live.len());
            for (hi, h) in live.iter().enumerate() {
                let (p, states, att) = active.step(&h.states, *h.tokens.last().unwrap())?;
                let mut words: Vec<usize> = (0..p.len()).filter(|&w| selectable(w)).collect();
                words.sort_by(|&a, &b| {
                    p[b].partial_cmp(&p[a])
                        .unwrap_or(Ordering::Equal)
                        .then(a.cmp(&b))
                });
                for &w in words.iter().take(opts.beam) {
                    expansions.push((hi, w, h.log_prob + p[w].ln()));
                }
                outputs.push((states, att));
            }
            expansions.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap_or(Ordering::Equal)
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });

            let mut next = Vec::with_capacity(opts.beam);
            for &(hi, w, lp) in expansions.iter().take(opts.beam) {
                let parent = &live[hi];
                let (states, att) = &outputs[hi];
                let mut h = Hypothesis {
                    tokens: parent.tokens.clone(),
                    log_prob: lp,
                    states: states.clone(),
                    attention: parent.attention.clone(),
                    done: w == EOS,
                };
                h.tokens.push(w);
                for (dump, a) in h.attention.iter_mut().zip(att) {
                    dump.push(a.clone());
                }
                if h.done || h.generated() >= opts.max_len {
                    completed.push(h);
                } else {
                    next.push(h);
                }
            }
            live = next;

            // a live hypothesis can at best keep its log prob and stretch to
            // max_len tokens
            let best_done = completed
                .iter()
                .map(Hypothesis::score)
                .fold(f64::NEG_INFINITY, f64::max);
            let best_live = live
                .iter()
                .map(|h| h.log_prob / opts.max_len as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            if !completed.is_empty() && best_live <= best_done {
                break;
            }
        }

        let mut best: Option<Hypothesis> = None;
        for h in completed {
            if best.as_ref().is_none_or(|b| h.score() > b.score()) {
                best = Some(h);
            }
        }
        Ok(self.finish(best.expect("search always completes a hypothesis")))
    }
}

/// One line of the caption output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
    pub score: f64,
    pub mode: Mode,
    pub alpha: Option<f64>,
}

/// One line of the attention dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub image_id: String,
    pub branch: GraphKind,
    pub step: usize,
    pub lambda: Vec<f64>,
}

pub fn caption_record(scene: &Scene, g: &Generated, opts: &DecodeOptions) -> CaptionRecord {
    CaptionRecord {
        image_id: scene.image_id.clone(),
        caption: g.caption.clone(),
        score: g.score,
        mode: opts.mode,
        alpha: (opts.mode == Mode::Fused).then_some(opts.alpha),
    }
}

pub fn attention_records(
    scene: &Scene,
    g: &Generated,
    opts: &DecodeOptions,
) -> Vec<AttentionRecord> {
    let kinds: &[GraphKind] = match opts.mode {
        Mode::Sem => &[GraphKind::Semantic],
        Mode::Spa => &[GraphKind::Spatial],
        Mode::Fused => &[GraphKind::Semantic, GraphKind::Spatial],
    };
    kinds
        .iter()
        .zip(&g.attention)
        .flat_map(|(&branch, steps)| {
            steps
                .iter()
                .enumerate()
                .map(move |(step, l)| AttentionRecord {
                    image_id: scene.image_id.clone(),
                    branch,
                    step,
                    lambda: l.clone(),
                })
        })
        .collect()
}
