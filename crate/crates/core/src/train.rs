//! Cross-entropy training of one branch.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderDims;
use crate::error::{Error, Result};
use crate::graph::RelationGraph;
use crate::model::{BranchModel, GraphKind};
use crate::optim::Adam;
use crate::scene::Scene;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Scenes per step.
    pub batch_size: usize,
    pub max_iters: usize,
    pub max_regions: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub attention: usize,
    pub embed: usize,
    pub min_count: usize,
    pub gcn_layers: usize,
    /// Semantic relation classes (edge labels of the semantic graph).
    pub num_semantic: usize,
    pub seed: u64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 8,
            max_iters: 2000,
            max_regions: 8,
            feature_dim: 64,
            hidden: 64,
            attention: 32,
            embed: 32,
            min_count: 1,
            gcn_layers: 1,
            num_semantic: 4,
            seed: 0,
            grad_clip: None,
        }
    }

    /// Full-size settings (36 regions, 1000-wide LSTM, batch 1024, 30k iterations).
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 1024,
            max_iters: 30_000,
            max_regions: 36,
            feature_dim: 2048,
            hidden: 1000,
            attention: 512,
            embed: 1000,
            min_count: 5,
            gcn_layers: 1,
            num_semantic: 20,
            seed: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.batch_size,
            self.max_iters,
            self.max_regions,
            self.feature_dim,
            self.hidden,
            self.attention,
            self.embed,
            self.min_count,
            self.gcn_layers,
            self.num_semantic,
        ];
        if sizes.contains(&0)
            || !self.lr.is_finite()
            || self.lr <= 0.0
            || self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0)
        {
            return Err(Error::invalid(
                "train config",
                "all sizes, the learning rate and the clip must be positive",
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&crate::error::read_to_string(path.as_ref())?)
    }

    pub fn decoder_dims(&self, vocab: usize) -> DecoderDims {
        DecoderDims {
            vocab,
            feature: self.feature_dim,
            hidden: self.hidden,
            attention: self.attention,
            embed: self.embed,
        }
    }
}

/// A scene with its graph built and captions tokenized.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub image_id: String,
    pub features: Tensor,
    pub graph: RelationGraph,
    pub captions: Vec<Vec<usize>>,
}

pub fn prepare_scenes(
    scenes: &[Scene],
    kind: GraphKind,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| {
            s.validate(cfg.max_regions)?;
            if s.feature_dim() != cfg.feature_dim {
                return Err(Error::invalid(
                    "prepare_scenes",
                    format!(
                        "`{}` has feature width {}, config expects {}",
                        s.image_id,
                        s.feature_dim(),
                        cfg.feature_dim
                    ),
                ));
            }
            Ok(PreparedScene {
                image_id: s.image_id.clone(),
                features: s.features()?,
                graph: kind.graph(s, cfg.num_semantic)?,
                captions: s.captions.iter().map(|c| vocab.encode_lossy(c)).collect(),
            })
        })
        .collect()
}

pub fn build_vocab(scenes: &[Scene], min_count: usize) -> Result<Vocabulary> {
    Vocabulary::build(
        scenes
            .iter()
            .flat_map(|s| s.captions.iter().map(String::as_str)),
        min_count,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    /// Mean caption loss of the batch, before the update.
    pub loss: f64,
    /// `(scene index, caption index)` for every batch entry.
    pub batch: Vec<(usize, usize)>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub kind: GraphKind,
    pub vocab: Vocabulary,
    pub model: BranchModel,
    pub data: Vec<PreparedScene>,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iteration: usize,
}

impl Trainer {
    /// Builds the vocabulary from the training captions.
    pub fn new(scenes: &[Scene], kind: GraphKind, cfg: TrainConfig) -> Result<Self> {
        let vocab = build_vocab(scenes, cfg.min_count)?;
        Self::with_vocab(scenes, kind, vocab, cfg)
    }

    pub fn with_vocab(
        scenes: &[Scene],
        kind: GraphKind,
        vocab: Vocabulary,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(Error::invalid("trainer", "no training scenes"));
        }
        let data = prepare_scenes(scenes, kind, &vocab, &cfg)?;
        if let Some(s) = data.iter().find(|s| s.captions.is_empty()) {
            return Err(Error::invalid(
                "trainer",
                format!("`{}` has no captions", s.image_id),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = BranchModel::init(
            kind,
            cfg.decoder_dims(vocab.len()),
            kind.num_labels(cfg.num_semantic),
            cfg.gcn_layers,
            &mut rng,
        );
        let order = (0..data.len()).collect();
        Ok(Trainer {
            adam: Adam::new(cfg.lr),
            cursor: data.len(),
            cfg,
            kind,
            vocab,
            model,
            data,
            rng,
            order,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let size = self.cfg.batch_size.min(self.data.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let s = self.order[self.cursor];
            self.cursor += 1;
            let c = self.rng.random_range(0..self.data[s].captions.len());
            batch.push((s, c));
        }
        batch
    }

    /// Mean loss of a batch under the current parameters, without updating.
    pub fn batch_loss(&self, batch: &[(usize, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for &(s, c) in batch {
            let d = &self.data[s];
            total += self.model.loss(&d.features, &d.graph, &d.captions[c])?;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch();
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &(s, c) in &batch {
            let d = &self.data[s];
            losses.push(
                self.model
                    .loss_on(&mut tape, &d.features, &d.graph, &d.captions[c])?,
            );
        }
        let total = tape.sum_n(&losses)?;
        let loss_var = tape.scale(total, 1.0 / batch.len() as f64);
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            let scene = batch
                .iter()
                .map(|&(s, _)| self.data[s].image_id.as_str())
                .collect::<Vec<_>>()
                .join(",");
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                scene,
            });
        }
        let mut grads = tape.backward(loss_var)?.into_params();
        if let Some(clip) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        self.adam.step(&mut self.model, &grads)?;
        let report = StepReport {
            iteration: self.iteration,
            loss,
            batch,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Run the remaining iterations up to `cfg.max_iters`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<Vec<(usize, f64)>> {
        let mut curve = Vec::new();
        while self.iteration < self.cfg.max_iters {
            let r = self.step()?;
            on_step(&r);
            curve.push((r.iteration, r.loss));
        }
        Ok(curve)
    }
}

/// Scale all gradients so that their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

pub fn loss_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in curve {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Train one branch from scratch with `cfg`.
pub fn train_branch(
    scenes: &[Scene],
    kind: GraphKind,
    cfg: TrainConfig,
) -> Result<(Trainer, Vec<(usize, f64)>)> {
    let mut trainer = Trainer::new(scenes, kind, cfg)?;
    let curve = trainer.run(|r| {
        if r.iteration % 100 == 0 {
            log::info!("iteration {} loss {:.6}", r.iteration, r.loss);
        }
    })?;
    Ok((trainer, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use crate::synth::{generate_synthetic_corpus, SynthConfig};

    fn small() -> (Vec<Scene>, TrainConfig) {
        let synth = SynthConfig {
            n_scenes: 6,
            max_regions: 4,
            feature_dim: 8,
            num_categories: 8,
            ..Default::default()
        };
        let cfg = TrainConfig {
            feature_dim: 8,
            hidden: 8,
            attention: 4,
            embed: 4,
            max_regions: 4,
            batch_size: 3,
            max_iters: 5,
            lr: 1e-2,
            ..TrainConfig::desk()
        };
        (generate_synthetic_corpus(&synth).unwrap(), cfg)
    }

    #[test]
    fn reported_loss_matches_recomputation() {
        let (scenes, cfg) = small();
        let mut t = Trainer::new(&scenes, GraphKind::Spatial, cfg).unwrap();
        let before = t.model.clone();
        let r = t.step().unwrap();
        let mut check = Trainer::new(&scenes, GraphKind::Spatial, t.cfg.clone()).unwrap();
        check.model = before;
        assert!((check.batch_loss(&r.batch).unwrap() - r.loss).abs() < 1e-10);
        assert_eq!(r.batch.len(), 3);
    }

    #[test]
    fn one_step_moves_encoder_weights() {
        let (scenes, cfg) = small();
        for kind in [GraphKind::Spatial, GraphKind::Semantic] {
            let mut t = Trainer::new(&scenes, kind, cfg.clone()).unwrap();
            let before = t.model.to_checkpoint();
            t.step().unwrap();
            let after = t.model.to_checkpoint();
            let changed = before
                .tensors
                .iter()
                .filter(|(k, v)| k.starts_with("gcn.") && after.tensors[*k] != **v)
                .count();
            assert!(changed > 0, "{kind}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (scenes, cfg) = small();
        let (a, ca) = train_branch(&scenes, GraphKind::Spatial, cfg.clone()).unwrap();
        let (b, cb) = train_branch(&scenes, GraphKind::Spatial, cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(
            a.model.to_checkpoint().to_json(),
            b.model.to_checkpoint().to_json()
        );
    }

    #[test]
    fn config_json_fills_defaults_and_rejects_typos() {
        let cfg = TrainConfig::from_json(r#"{"lr": 0.001, "hidden": 16}"#).unwrap();
        assert_eq!(cfg.hidden, 16);
        assert_eq!(cfg.attention, 32);
        assert!(TrainConfig::from_json(r#"{"hiden": 16}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::row(vec![3.0, 4.0]))]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn curve_csv_has_header() {
        assert_eq!(loss_curve_csv(&[(0, 1.5)]), "iteration,loss\n0,1.5\n");
    }
}
