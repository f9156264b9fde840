//! Semantic relation classifier and semantic graph construction.
//!
//! Subject, object and union features each pass through their own
//! affine+ReLU embedding; the concatenation is classified over the relation
//! classes plus a non-relation class at index 0.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, RelationGraph};
use crate::optim::Adam;
use crate::params::{Checkpoint, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, softmax, Tensor};

pub const NON_RELATION: usize = 0;
pub const NON_RELATION_THRESHOLD: f64 = 0.5;

/// Feature of the box enclosing an ordered pair `(i, j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnionFeature {
    pub i: usize,
    pub j: usize,
    pub union_feature: Vec<f64>,
}

pub fn union_lookup(features: &[UnionFeature]) -> HashMap<(usize, usize), &[f64]> {
    features
        .iter()
        .map(|u| ((u.i, u.j), u.union_feature.as_slice()))
        .collect()
}

/// Default relation names for `n` classes: `rel1..reln`.
pub fn relation_label_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("rel{i}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationClassifierParams {
    pub subj_w: Tensor,
    pub subj_b: Tensor,
    pub obj_w: Tensor,
    pub obj_b: Tensor,
    pub union_w: Tensor,
    pub union_b: Tensor,
    /// `(N + 1) x 3 D_e`.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

const NAMES: [&str; 8] = [
    "classifier.cls_b",
    "classifier.cls_w",
    "classifier.obj_b",
    "classifier.obj_w",
    "classifier.subj_b",
    "classifier.subj_w",
    "classifier.union_b",
    "classifier.union_w",
];

/// Embedding width used when none is given: half the feature width, rounded up.
pub fn default_embed_dim(feature_dim: usize) -> usize {
    feature_dim.div_ceil(2)
}

impl RelationClassifierParams {
    pub fn init<R: Rng + ?Sized>(
        feature_dim: usize,
        embed_dim: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Self {
        let (dv, de, c) = (feature_dim, embed_dim, num_relations + 1);
        RelationClassifierParams {
            subj_w: Tensor::glorot(&[de, dv], dv, de, rng),
            subj_b: Tensor::zeros(&[1, de]),
            obj_w: Tensor::glorot(&[de, dv], dv, de, rng),
            obj_b: Tensor::zeros(&[1, de]),
            union_w: Tensor::glorot(&[de, dv], dv, de, rng),
            union_b: Tensor::zeros(&[1, de]),
            cls_w: Tensor::glorot(&[c, 3 * de], 3 * de, c, rng),
            cls_b: Tensor::zeros(&[1, c]),
        }
    }

    pub fn zeros(feature_dim: usize, embed_dim: usize, num_relations: usize) -> Self {
        let (dv, de, c) = (feature_dim, embed_dim, num_relations + 1);
        RelationClassifierParams {
            subj_w: Tensor::zeros(&[de, dv]),
            subj_b: Tensor::zeros(&[1, de]),
            obj_w: Tensor::zeros(&[de, dv]),
            obj_b: Tensor::zeros(&[1, de]),
            union_w: Tensor::zeros(&[de, dv]),
            union_b: Tensor::zeros(&[1, de]),
            cls_w: Tensor::zeros(&[c, 3 * de]),
            cls_b: Tensor::zeros(&[1, c]),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let subj_w = ck.get("classifier.subj_w")?;
        let cls_w = ck.get("classifier.cls_w")?;
        let (de, dv, c) = (subj_w.rows(), subj_w.cols(), cls_w.rows());
        Ok(RelationClassifierParams {
            subj_w: ck.take("classifier.subj_w", &[de, dv])?,
            subj_b: ck.take("classifier.subj_b", &[1, de])?,
            obj_w: ck.take("classifier.obj_w", &[de, dv])?,
            obj_b: ck.take("classifier.obj_b", &[1, de])?,
            union_w: ck.take("classifier.union_w", &[de, dv])?,
            union_b: ck.take("classifier.union_b", &[1, de])?,
            cls_w: ck.take("classifier.cls_w", &[c, 3 * de])?,
            cls_b: ck.take("classifier.cls_b", &[1, c])?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.subj_w.cols()
    }

    pub fn num_relations(&self) -> usize {
        self.cls_w.rows() - 1
    }

    /// Logits for a batch: each input is `B x D_v`.
    pub fn logits_on(&self, tape: &mut Tape, subj: Var, obj: Var, union: Var) -> Result<Var> {
        let p = |tape: &mut Tape, n: &str, t: &Tensor| tape.param(format!("classifier.{n}"), t);
        let embed =
            |tape: &mut Tape, x: Var, w: (&str, &Tensor), b: (&str, &Tensor)| -> Result<Var> {
                let w = p(tape, w.0, w.1);
                let b = p(tape, b.0, b.1);
                let z = tape.linear(x, w, Some(b))?;
                Ok(tape.relu(z))
            };
        let es = embed(
            tape,
            subj,
            ("subj_w", &self.subj_w),
            ("subj_b", &self.subj_b),
        )?;
        let eo = embed(tape, obj, ("obj_w", &self.obj_w), ("obj_b", &self.obj_b))?;
        let eu = embed(
            tape,
            union,
            ("union_w", &self.union_w),
            ("union_b", &self.union_b),
        )?;
        let joint = tape.concat(&[es, eo, eu], 1)?;
        let w = p(tape, "cls_w", &self.cls_w);
        let b = p(tape, "cls_b", &self.cls_b);
        tape.linear(joint, w, Some(b))
    }
}

impl ParamSet for RelationClassifierParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let t = [
            &self.cls_b,
            &self.cls_w,
            &self.obj_b,
            &self.obj_w,
            &self.subj_b,
            &self.subj_w,
            &self.union_b,
            &self.union_w,
        ];
        NAMES.iter().map(|n| n.to_string()).zip(t).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let t = [
            &mut self.cls_b,
            &mut self.cls_w,
            &mut self.obj_b,
            &mut self.obj_w,
            &mut self.subj_b,
            &mut self.subj_w,
            &mut self.union_b,
            &mut self.union_w,
        ];
        NAMES.iter().map(|n| n.to_string()).zip(t).collect()
    }
}

/// Probability vector over `N + 1` classes; index 0 is the non-relation class.
pub fn classify_relation(
    vi: &[f64],
    vj: &[f64],
    vij: &[f64],
    params: &RelationClassifierParams,
) -> Result<Vec<f64>> {
    let dv = params.feature_dim();
    for x in [vi, vj, vij] {
        if x.len() != dv {
            return Err(Error::shape("classify_relation", &[dv], &[x.len()]));
        }
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::row(vi.to_vec()));
    let o = tape.constant(Tensor::row(vj.to_vec()));
    let u = tape.constant(Tensor::row(vij.to_vec()));
    let logits = params.logits_on(&mut tape, s, o, u)?;
    Ok(softmax(tape.value(logits).data()))
}

/// Edge label chosen by a probability vector, if any: an edge exists iff the
/// non-relation probability is strictly below one half.
pub fn edge_label(probs: &[f64]) -> Option<usize> {
    if probs.len() < 2 || probs[NON_RELATION] >= NON_RELATION_THRESHOLD {
        return None;
    }
    Some(1 + argmax(&probs[1..]))
}

/// Build a graph from an arbitrary per-pair probability function, called on
/// every ordered pair `(i, j)`, `i != j`.
pub fn build_graph_from_probs<F>(
    k: usize,
    label_names: Vec<String>,
    mut probs: F,
) -> Result<RelationGraph>
where
    F: FnMut(usize, usize) -> Result<Vec<f64>>,
{
    let mut edges = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let p = probs(i, j)?;
            if p.len() != label_names.len() + 1 {
                return Err(Error::shape(
                    "semantic graph",
                    &[label_names.len() + 1],
                    &[p.len()],
                ));
            }
            if let Some(label) = edge_label(&p) {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    label,
                });
            }
        }
    }
    RelationGraph::new(k, label_names, edges)
}

pub fn build_semantic_graph(
    features: &Tensor,
    unions: &[UnionFeature],
    params: &RelationClassifierParams,
) -> Result<RelationGraph> {
    let lookup = union_lookup(unions);
    build_graph_from_probs(
        features.rows(),
        relation_label_names(params.num_relations()),
        |i, j| {
            let u = lookup
                .get(&(i, j))
                .ok_or(Error::MissingUnionFeature(i, j))?;
            classify_relation(features.row_slice(i), features.row_slice(j), u, params)
        },
    )
}

/// Read an edge file in the graph export format.
pub fn load_semantic_edges(path: impl AsRef<Path>) -> Result<RelationGraph> {
    RelationGraph::from_json(&crate::error::read_to_string(path.as_ref())?)
}

/// One training example for the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub subject: Vec<f64>,
    pub object: Vec<f64>,
    pub union_feature: Vec<f64>,
    /// `0` for non-relation, otherwise `1..=N`.
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct ClassifierTrainConfig {
    pub num_relations: usize,
    pub embed_dim: Option<usize>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            num_relations: 4,
            embed_dim: None,
            lr: 5e-3,
            steps: 400,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Classes with no training example.
    pub missing_classes: Vec<usize>,
}

fn stack(pairs: &[&LabeledPair], f: impl Fn(&LabeledPair) -> &Vec<f64>) -> Result<Tensor> {
    Tensor::from_rows(&pairs.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
}

/// Mean cross-entropy of the classifier over `pairs`, built on `tape`.
pub fn classifier_loss_on(
    tape: &mut Tape,
    params: &RelationClassifierParams,
    pairs: &[&LabeledPair],
) -> Result<Var> {
    let s = tape.constant(stack(pairs, |p| &p.subject)?);
    let o = tape.constant(stack(pairs, |p| &p.object)?);
    let u = tape.constant(stack(pairs, |p| &p.union_feature)?);
    let logits = params.logits_on(tape, s, o, u)?;
    let targets: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    let total = tape.cross_entropy(logits, &targets)?;
    Ok(tape.scale(total, 1.0 / pairs.len() as f64))
}

pub fn classifier_loss(params: &RelationClassifierParams, pairs: &[LabeledPair]) -> Result<f64> {
    let refs: Vec<&LabeledPair> = pairs.iter().collect();
    let mut tape = Tape::new();
    let loss = classifier_loss_on(&mut tape, params, &refs)?;
    Ok(tape.value(loss).item())
}

pub fn classifier_accuracy(
    params: &RelationClassifierParams,
    pairs: &[LabeledPair],
) -> Result<f64> {
    let mut correct = 0;
    for p in pairs {
        let probs = classify_relation(&p.subject, &p.object, &p.union_feature, params)?;
        correct += usize::from(argmax(&probs) == p.label);
    }
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

/// Mini-batch Adam on the mean cross-entropy.
pub fn train_relation_classifier(
    pairs: &[LabeledPair],
    cfg: &ClassifierTrainConfig,
) -> Result<(RelationClassifierParams, ClassifierTrainReport)> {
    let Some(first) = pairs.first() else {
        return Err(Error::invalid(
            "train_relation_classifier",
            "no training pairs",
        ));
    };
    let dv = first.subject.len();
    let classes = cfg.num_relations + 1;
    if let Some(bad) = pairs.iter().find(|p| p.label >= classes) {
        return Err(Error::invalid(
            "train_relation_classifier",
            format!(
                "label {} out of range for {} relation classes",
                bad.label, cfg.num_relations
            ),
        ));
    }
    let mut seen = vec![false; classes];
    for p in pairs {
        seen[p.label] = true;
    }
    let missing_classes: Vec<usize> = (0..classes).filter(|&c| !seen[c]).collect();
    for c in &missing_classes {
        log::warn!("relation class {c} has no training examples");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let de = cfg.embed_dim.unwrap_or_else(|| default_embed_dim(dv));
    let mut params = RelationClassifierParams::init(dv, de, cfg.num_relations, &mut rng);
    let mut adam = Adam::new(cfg.lr);
    let initial_loss = classifier_loss(&params, pairs)?;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let loss = classifier_loss_on(&mut tape, &params, &batch)?;
        let grads = tape.backward(loss)?;
        adam.step(&mut params, grads.params())?;
    }
    let final_loss = classifier_loss(&params, pairs)?;
    Ok((
        params,
        ClassifierTrainReport {
            initial_loss,
            final_loss,
            missing_classes,
        },
    ))
}

/// Linearly separable pairs: each class owns a random prototype direction
/// that is added to the union feature, with Gaussian noise everywhere else.
/// Prototypes depend on `seed`, so split one draw for held-out data.
pub fn synthetic_relation_pairs(
    n: usize,
    feature_dim: usize,
    num_relations: usize,
    seed: u64,
) -> Vec<LabeledPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let prototypes: Vec<Vec<f64>> = (0..=num_relations)
        .map(|_| {
            let v: Vec<f64> = (0..feature_dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| 2.0 * x / norm).collect()
        })
        .collect();
    (0..n)
        .map(|idx| {
            // cycle through classes so every one is represented
            let label = idx % (num_relations + 1);
            let mut draw =
                || -> Vec<f64> { (0..feature_dim).map(|_| noise.sample(&mut rng)).collect() };
            let subject = draw();
            let object = draw();
            let union_feature = draw()
                .into_iter()
                .zip(&prototypes[label])
                .map(|(e, p)| e + p)
                .collect();
            LabeledPair {
                subject,
                object,
                union_feature,
                label,
            }
        })
        .collect()
}

/// Class counts, for diagnostics.
pub fn label_histogram(pairs: &[LabeledPair]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for p in pairs {
        *h.entry(p.label).or_default() += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};

    #[test]
    fn zero_params_are_uniform() {
        let p = RelationClassifierParams::zeros(4, 2, 4);
        let probs = classify_relation(&[1.0; 4], &[0.5; 4], &[-1.0; 4], &p).unwrap();
        assert!(probs.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn subject_and_object_are_not_interchangeable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = RelationClassifierParams::init(4, 2, 3, &mut rng);
        let a = [0.9, -0.2, 0.4, 0.1];
        let b = [-0.3, 0.8, 0.0, 0.5];
        let u = [0.2; 4];
        assert_ne!(
            classify_relation(&a, &b, &u, &p).unwrap(),
            classify_relation(&b, &a, &u, &p).unwrap()
        );
        assert!(classify_relation(&a, &b[..3], &u, &p).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(edge_label(&[0.5, 0.1, 0.4]), None);
        assert_eq!(edge_label(&[0.9, 0.05, 0.05]), None);
        assert_eq!(edge_label(&[0.4999999, 0.1, 0.4000001]), Some(2));
        // ties between relation classes go to the lowest index
        assert_eq!(edge_label(&[0.2, 0.4, 0.4]), Some(1));
    }

    #[test]
    fn hand_built_vector_picks_class_seven() {
        let mut p = vec![0.0; 21];
        p[0] = 0.4;
        p[7] = 0.3;
        p[3] = 0.2;
        p[12] = 0.1;
        let g = build_graph_from_probs(2, relation_label_names(20), |_, _| Ok(p.clone())).unwrap();
        assert_eq!(g.edges().len(), 2);
        assert!(g.edges().iter().all(|e| e.label == 7));
    }

    #[test]
    fn confident_non_relation_gives_only_self_loops() {
        // logits chosen so that P(non-relation) = 0.9 with 4 relation classes
        let mut p = RelationClassifierParams::zeros(3, 2, 4);
        let l0 = (0.9f64 / 0.025).ln();
        p.cls_b = Tensor::row(vec![l0, 0.0, 0.0, 0.0, 0.0]);
        let probs = classify_relation(&[1.0; 3], &[1.0; 3], &[1.0; 3], &p).unwrap();
        assert!((probs[0] - 0.9).abs() < 1e-12);
        let feats = Tensor::filled(&[3, 3], 0.1);
        let unions: Vec<UnionFeature> = (0..3)
            .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| UnionFeature {
                i,
                j,
                union_feature: vec![0.2; 3],
            })
            .collect();
        let g = build_semantic_graph(&feats, &unions, &p).unwrap();
        assert!(g.edges().is_empty());
        assert_eq!(g.self_loops().count(), 3);
    }

    #[test]
    fn missing_union_feature_names_the_pair() {
        let p = RelationClassifierParams::zeros(3, 2, 4);
        let feats = Tensor::filled(&[2, 3], 0.1);
        let unions = vec![UnionFeature {
            i: 0,
            j: 1,
            union_feature: vec![0.0; 3],
        }];
        let err = build_semantic_graph(&feats, &unions, &p).unwrap_err();
        assert!(matches!(err, Error::MissingUnionFeature(1, 0)));
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = RelationClassifierParams::init(4, 2, 3, &mut rng);
        let pairs = synthetic_relation_pairs(6, 4, 3, 5);
        let refs: Vec<&LabeledPair> = pairs.iter().collect();
        let report = grad_check(
            |tape, ck| {
                classifier_loss_on(tape, &RelationClassifierParams::from_checkpoint(ck)?, &refs)
            },
            &p.to_checkpoint(),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn memorizes_a_single_example() {
        let pair = synthetic_relation_pairs(4, 6, 3, 2).swap_remove(2);
        let cfg = ClassifierTrainConfig {
            num_relations: 3,
            steps: 200,
            lr: 1e-2,
            ..Default::default()
        };
        let (p, report) = train_relation_classifier(std::slice::from_ref(&pair), &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert_eq!(report.missing_classes, vec![0, 1, 3]);
        assert_eq!(classifier_accuracy(&p, &[pair]).unwrap(), 1.0);
    }
}
