//! Two-layer attention LSTM caption decoder.
//!
//! Layer 1 reads `[h2_prev, embed(word), mean(V)]`, attention scores are
//! `w_a . tanh(W_f v_i + W_h h1)`, and layer 2 reads `[v_hat, h1]`. Both
//! layers are standard LSTM cells with gates in `i, f, o, g` order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Checkpoint, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

/// Sizes of every decoder tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub vocab: usize,
    /// Region feature width `D_v`.
    pub feature: usize,
    /// LSTM hidden width `D_h`.
    pub hidden: usize,
    /// Attention width `D_a`.
    pub attention: usize,
    /// Word embedding width `D_s`.
    pub embed: usize,
}

impl DecoderDims {
    fn layer1_input(&self) -> usize {
        self.hidden + self.embed + self.feature
    }

    fn layer2_input(&self) -> usize {
        self.feature + self.hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `|V| x D_s`, one row per word.
    pub embed: Tensor,
    /// `4 D_h x (layer-1 input + D_h)`.
    pub lstm1_w: Tensor,
    pub lstm1_b: Tensor,
    /// `4 D_h x (D_v + D_h + D_h)`.
    pub lstm2_w: Tensor,
    pub lstm2_b: Tensor,
    /// `1 x D_a`.
    pub att_wa: Tensor,
    /// `D_a x D_v`.
    pub att_wf: Tensor,
    /// `D_a x D_h`.
    pub att_wh: Tensor,
    /// `|V| x D_h`.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

const NAMES: [&str; 10] = [
    "decoder.att_wa",
    "decoder.att_wf",
    "decoder.att_wh",
    "decoder.embed",
    "decoder.lstm1_b",
    "decoder.lstm1_w",
    "decoder.lstm2_b",
    "decoder.lstm2_w",
    "decoder.out_b",
    "decoder.out_w",
];

fn shapes(d: DecoderDims) -> [[usize; 2]; 10] {
    let g = 4 * d.hidden;
    [
        [1, d.attention],
        [d.attention, d.feature],
        [d.attention, d.hidden],
        [d.vocab, d.embed],
        [1, g],
        [g, d.layer1_input() + d.hidden],
        [1, g],
        [g, d.layer2_input() + d.hidden],
        [1, d.vocab],
        [d.vocab, d.hidden],
    ]
}

impl DecoderParams {
    /// Glorot weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: DecoderDims, rng: &mut R) -> Self {
        let tensors: Vec<Tensor> = shapes(dims)
            .iter()
            .zip(NAMES)
            .map(|(s, name)| {
                if name.ends_with("_b") {
                    Tensor::zeros(s)
                } else {
                    Tensor::glorot(s, s[1], s[0], rng)
                }
            })
            .collect();
        Self::from_vec(tensors)
    }

    pub fn zeros(dims: DecoderDims) -> Self {
        Self::from_vec(shapes(dims).iter().map(|s| Tensor::zeros(s)).collect())
    }

    fn from_vec(t: Vec<Tensor>) -> Self {
        let mut it = t.into_iter();
        let mut next = || it.next().expect("ten tensors");
        DecoderParams {
            att_wa: next(),
            att_wf: next(),
            att_wh: next(),
            embed: next(),
            lstm1_b: next(),
            lstm1_w: next(),
            lstm2_b: next(),
            lstm2_w: next(),
            out_b: next(),
            out_w: next(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, dims: DecoderDims) -> Result<Self> {
        let tensors = NAMES
            .iter()
            .zip(shapes(dims))
            .map(|(n, s)| ck.take(n, &s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_vec(tensors))
    }

    /// Read the dimensions back off the tensor shapes.
    pub fn infer_dims(ck: &Checkpoint) -> Result<DecoderDims> {
        let embed = ck.get("decoder.embed")?;
        let wf = ck.get("decoder.att_wf")?;
        let wh = ck.get("decoder.att_wh")?;
        Ok(DecoderDims {
            vocab: embed.rows(),
            embed: embed.cols(),
            attention: wf.rows(),
            feature: wf.cols(),
            hidden: wh.cols(),
        })
    }

    pub fn dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.embed.rows(),
            embed: self.embed.cols(),
            attention: self.att_wf.rows(),
            feature: self.att_wf.cols(),
            hidden: self.att_wh.cols(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> DecoderVars {
        DecoderVars {
            dims: self.dims(),
            embed: tape.param("decoder.embed", &self.embed),
            lstm1_w: tape.param("decoder.lstm1_w", &self.lstm1_w),
            lstm1_b: tape.param("decoder.lstm1_b", &self.lstm1_b),
            lstm2_w: tape.param("decoder.lstm2_w", &self.lstm2_w),
            lstm2_b: tape.param("decoder.lstm2_b", &self.lstm2_b),
            att_wa: tape.param("decoder.att_wa", &self.att_wa),
            att_wf: tape.param("decoder.att_wf", &self.att_wf),
            att_wh: tape.param("decoder.att_wh", &self.att_wh),
            out_w: tape.param("decoder.out_w", &self.out_w),
            out_b: tape.param("decoder.out_b", &self.out_b),
        }
    }
}

impl ParamSet for DecoderParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let t = [
            &self.att_wa,
            &self.att_wf,
            &self.att_wh,
            &self.embed,
            &self.lstm1_b,
            &self.lstm1_w,
            &self.lstm2_b,
            &self.lstm2_w,
            &self.out_b,
            &self.out_w,
        ];
        NAMES.iter().map(|n| n.to_string()).zip(t).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let t = [
            &mut self.att_wa,
            &mut self.att_wf,
            &mut self.att_wh,
            &mut self.embed,
            &mut self.lstm1_b,
            &mut self.lstm1_w,
            &mut self.lstm2_b,
            &mut self.lstm2_w,
            &mut self.out_b,
            &mut self.out_w,
        ];
        NAMES.iter().map(|n| n.to_string()).zip(t).collect()
    }
}

/// Decoder parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub dims: DecoderDims,
    embed: Var,
    lstm1_w: Var,
    lstm1_b: Var,
    lstm2_w: Var,
    lstm2_b: Var,
    att_wa: Var,
    att_wf: Var,
    att_wh: Var,
    out_w: Var,
    out_b: Var,
}

/// Per-image quantities that do not change across time steps.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    regions: Var,
    mean: Var,
    /// `K x D_a`, the `W_f v_i` half of the attention scores.
    projected: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

pub struct StepVars {
    pub logits: Var,
    pub attention: Var,
    pub state: StateVars,
}

impl DecoderVars {
    pub fn context(&self, tape: &mut Tape, regions: Var) -> Result<ContextVars> {
        let shape = tape.shape(regions);
        if shape.len() != 2 || shape[1] != self.dims.feature {
            return Err(Error::shape(
                "decoder context",
                &[0, self.dims.feature],
                shape,
            ));
        }
        let mean = tape.mean(regions, 0)?;
        let projected = tape.linear(regions, self.att_wf, None)?;
        Ok(ContextVars {
            regions,
            mean,
            projected,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> StateVars {
        let z = tape.constant(Tensor::zeros(&[1, self.dims.hidden]));
        StateVars {
            h1: z,
            c1: z,
            h2: z,
            c2: z,
        }
    }

    fn lstm(&self, tape: &mut Tape, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var)> {
        let hd = self.dims.hidden;
        let xh = tape.concat(&[x, h], 1)?;
        let z = tape.linear(xh, w, Some(b))?;
        let i = tape.slice_cols(z, 0, hd)?;
        let f = tape.slice_cols(z, hd, hd)?;
        let o = tape.slice_cols(z, 2 * hd, hd)?;
        let g = tape.slice_cols(z, 3 * hd, hd)?;
        let (i, f, o, g) = (
            tape.sigmoid(i),
            tape.sigmoid(f),
            tape.sigmoid(o),
            tape.tanh(g),
        );
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_new = tape.add(keep, write)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        ctx: &ContextVars,
        state: StateVars,
        word: usize,
    ) -> Result<StepVars> {
        if word >= self.dims.vocab {
            return Err(Error::invalid(
                "decode_step",
                format!(
                    "word index {word} out of range for vocabulary of {}",
                    self.dims.vocab
                ),
            ));
        }
        let emb = tape.gather_rows(self.embed, &[word])?;
        let x1 = tape.concat(&[state.h2, emb, ctx.mean], 1)?;
        let (h1, c1) = self.lstm(tape, x1, state.h1, state.c1, self.lstm1_w, self.lstm1_b)?;

        let wh = tape.linear(h1, self.att_wh, None)?;
        let pre = tape.add(ctx.projected, wh)?;
        let act = tape.tanh(pre);
        let scores = tape.linear(act, self.att_wa, None)?;
        let scores = tape.transpose(scores)?;
        let attention = tape.softmax(scores)?;
        let attended = tape.weighted_sum(attention, ctx.regions)?;

        let x2 = tape.concat(&[attended, h1], 1)?;
        let (h2, c2) = self.lstm(tape, x2, state.h2, state.c2, self.lstm2_w, self.lstm2_b)?;
        let logits = tape.linear(h2, self.out_w, Some(self.out_b))?;
        Ok(StepVars {
            logits,
            attention,
            state: StateVars { h1, c1, h2, c2 },
        })
    }

    /// Teacher-forced negative log-likelihood of `BOS tokens EOS`.
    ///
    /// `tokens` holds the content words only.
    pub fn sentence_nll(&self, tape: &mut Tape, regions: Var, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(Error::invalid(
                "sentence_nll",
                format!(
                    "token {bad} out of range for vocabulary of {}",
                    self.dims.vocab
                ),
            ));
        }
        let ctx = self.context(tape, regions)?;
        let mut state = self.zero_state(tape);
        let inputs = std::iter::once(BOS).chain(tokens.iter().copied());
        let mut rows = Vec::with_capacity(tokens.len() + 1);
        for word in inputs {
            let out = self.step(tape, &ctx, state, word)?;
            rows.push(out.logits);
            state = out.state;
        }
        let targets: Vec<usize> = tokens.iter().copied().chain(std::iter::once(EOS)).collect();
        let logits = tape.concat(&rows, 0)?;
        tape.cross_entropy(logits, &targets)
    }
}

/// Hidden and cell vectors of both layers, each `1 x D_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h1: Tensor,
    pub c1: Tensor,
    pub h2: Tensor,
    pub c2: Tensor,
}

impl DecoderState {
    pub fn zeros(hidden: usize) -> Self {
        let z = Tensor::zeros(&[1, hidden]);
        DecoderState {
            h1: z.clone(),
            c1: z.clone(),
            h2: z.clone(),
            c2: z,
        }
    }
}

/// Region features with their mean and attention projection cached.
#[derive(Clone, Debug)]
pub struct EncodedContext {
    pub regions: Tensor,
    pub mean: Tensor,
    pub projected: Tensor,
}

impl EncodedContext {
    pub fn new(params: &DecoderParams, regions: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let r = tape.constant(regions.clone());
        let ctx = vars.context(&mut tape, r)?;
        Ok(EncodedContext {
            regions: regions.clone(),
            mean: tape.value(ctx.mean).clone(),
            projected: tape.value(ctx.projected).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Next-word distribution over the vocabulary.
    pub probs: Vec<f64>,
    /// Attention weights over the regions.
    pub attention: Vec<f64>,
    pub state: DecoderState,
}

/// One decoding step outside of training.
pub fn decode_step(
    params: &DecoderParams,
    ctx: &EncodedContext,
    state: &DecoderState,
    word: usize,
) -> Result<StepOutput> {
    let hd = params.dims().hidden;
    for t in [&state.h1, &state.c1, &state.h2, &state.c2] {
        if t.shape() != [1, hd] {
            return Err(Error::shape("decode_step state", &[1, hd], t.shape()));
        }
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let c = ContextVars {
        regions: tape.constant(ctx.regions.clone()),
        mean: tape.constant(ctx.mean.clone()),
        projected: tape.constant(ctx.projected.clone()),
    };
    let s = StateVars {
        h1: tape.constant(state.h1.clone()),
        c1: tape.constant(state.c1.clone()),
        h2: tape.constant(state.h2.clone()),
        c2: tape.constant(state.c2.clone()),
    };
    let out = vars.step(&mut tape, &c, s, word)?;
    let probs = tape.softmax(out.logits)?;
    Ok(StepOutput {
        probs: tape.value(probs).data().to_vec(),
        attention: tape.value(out.attention).data().to_vec(),
        state: DecoderState {
            h1: tape.value(out.state.h1).clone(),
            c1: tape.value(out.state.c1).clone(),
            h2: tape.value(out.state.h2).clone(),
            c2: tape.value(out.state.c2).clone(),
        },
    })
}

/// Value of the teacher-forced loss.
pub fn sentence_nll(params: &DecoderParams, regions: &Tensor, tokens: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let r = tape.constant(regions.clone());
    let loss = vars.sentence_nll(&mut tape, r, tokens)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> DecoderDims {
        DecoderDims {
            vocab: 10,
            feature: 4,
            hidden: 3,
            attention: 2,
            embed: 3,
        }
    }

    fn random(seed: u64) -> (DecoderParams, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DecoderParams::init(dims(), &mut rng);
        let v = Tensor::glorot(&[5, 4], 1, 1, &mut rng);
        (p, v)
    }

    #[test]
    fn identical_regions_get_uniform_attention() {
        let (p, _) = random(1);
        let v = Tensor::from_rows(&vec![vec![0.3, -0.1, 0.7, 0.2]; 4]).unwrap();
        let ctx = EncodedContext::new(&p, &v).unwrap();
        let out = decode_step(&p, &ctx, &DecoderState::zeros(3), 4).unwrap();
        for a in out.attention {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_projections_give_uniform_attention() {
        let (mut p, v) = random(2);
        p.att_wf = Tensor::zeros(p.att_wf.shape());
        p.att_wh = Tensor::zeros(p.att_wh.shape());
        let ctx = EncodedContext::new(&p, &v).unwrap();
        let out = decode_step(&p, &ctx, &DecoderState::zeros(3), 5).unwrap();
        assert_eq!(out.attention, vec![0.2; 5]);
    }

    #[test]
    fn zero_output_layer_is_uniform_over_words() {
        let (mut p, v) = random(3);
        p.out_w = Tensor::zeros(p.out_w.shape());
        let ctx = EncodedContext::new(&p, &v).unwrap();
        let out = decode_step(&p, &ctx, &DecoderState::zeros(3), 0).unwrap();
        assert!(out.probs.iter().all(|&q| (q - 0.1).abs() < 1e-15));
        let nll = sentence_nll(&p, &v, &[4, 5, 6]).unwrap();
        assert!((nll - 4.0 * 10f64.ln()).abs() < 1e-12, "{nll}");
        assert!((nll - 9.21034).abs() < 1e-5);
    }

    #[test]
    fn attention_is_a_distribution_and_context_in_hull() {
        let (p, v) = random(4);
        let ctx = EncodedContext::new(&p, &v).unwrap();
        let mut state = DecoderState::zeros(3);
        for word in [0, 3, 7, 2] {
            let out = decode_step(&p, &ctx, &state, word).unwrap();
            let s: f64 = out.attention.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(out.attention.iter().all(|a| (0.0..=1.0).contains(a)));
            for c in 0..4 {
                let col: Vec<f64> = (0..5).map(|r| v.at(r, c)).collect();
                let hat: f64 = out.attention.iter().zip(&col).map(|(a, x)| a * x).sum();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(hat >= lo - 1e-12 && hat <= hi + 1e-12);
            }
            state = out.state;
        }
    }

    #[test]
    fn region_order_does_not_change_distribution() {
        let (p, v) = random(5);
        let perm = [3, 0, 4, 1, 2];
        let vp = v.permute_rows(&perm);
        let a = decode_step(
            &p,
            &EncodedContext::new(&p, &v).unwrap(),
            &DecoderState::zeros(3),
            6,
        )
        .unwrap();
        let b = decode_step(
            &p,
            &EncodedContext::new(&p, &vp).unwrap(),
            &DecoderState::zeros(3),
            6,
        )
        .unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-14);
        }
        for (i, &pi) in perm.iter().enumerate() {
            assert!((b.attention[i] - a.attention[pi]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (p, v) = random(6);
        assert!(sentence_nll(&p, &v, &[10]).is_err());
        let ctx = EncodedContext::new(&p, &v).unwrap();
        assert!(decode_step(&p, &ctx, &DecoderState::zeros(4), 1).is_err());
        assert!(EncodedContext::new(&p, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        let (p, v) = random(7);
        let report = grad_check(
            |tape, ck| {
                let vars = DecoderParams::from_checkpoint(ck, dims())?.bind(tape);
                let r = tape.constant(v.clone());
                vars.sentence_nll(tape, r, &[3, 8, 5])
            },
            &p.to_checkpoint(),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(sentence_nll(&p, &v, &[3, 8, 5]).unwrap() >= 0.0);
    }
}
