//! One captioning branch: a gated GCN encoder feeding the attention decoder.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderDims, DecoderParams, EncodedContext};
use crate::error::{Error, Result};
use crate::gcn::GcnEncoder;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::graph::{Edge, RelationGraph};
use crate::params::{Checkpoint, ParamSet};
use crate::scene::Scene;
use crate::semantic::relation_label_names;
use crate::spatial::{build_spatial_graph, BoundingBox, NUM_SPATIAL_CLASSES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Semantic,
    Spatial,
}

impl GraphKind {
    pub fn prefix(self) -> &'static str {
        match self {
            GraphKind::Semantic => "gcn.sem",
            GraphKind::Spatial => "gcn.spa",
        }
    }

    /// Number of edge labels the encoder expects.
    pub fn num_labels(self, num_semantic: usize) -> usize {
        match self {
            GraphKind::Semantic => num_semantic,
            GraphKind::Spatial => NUM_SPATIAL_CLASSES,
        }
    }

    pub fn graph(self, scene: &Scene, num_semantic: usize) -> Result<RelationGraph> {
        match self {
            GraphKind::Semantic => scene.semantic_graph(num_semantic),
            GraphKind::Spatial => scene.spatial_graph(),
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::Semantic => "semantic",
            GraphKind::Spatial => "spatial",
        })
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" | "sem" => Ok(GraphKind::Semantic),
            "spatial" | "spa" => Ok(GraphKind::Spatial),
            other => Err(Error::invalid(
                "graph kind",
                format!("unknown kind `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchModel {
    pub kind: GraphKind,
    pub encoder: GcnEncoder,
    pub decoder: DecoderParams,
}

impl BranchModel {
    pub fn init<R: Rng + ?Sized>(
        kind: GraphKind,
        dims: DecoderDims,
        num_labels: usize,
        gcn_layers: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = GcnEncoder::init(kind.prefix(), dims.feature, num_labels, gcn_layers, rng);
        let decoder = DecoderParams::init(dims, rng);
        BranchModel {
            kind,
            encoder,
            decoder,
        }
    }

    /// Rebuild from a checkpoint, reading every size off the tensor shapes.
    pub fn from_checkpoint(ck: &Checkpoint, kind: GraphKind) -> Result<Self> {
        let dims = DecoderParams::infer_dims(ck)?;
        let prefix = kind.prefix();
        let mut layers = 0;
        while ck
            .tensors
            .contains_key(&format!("{prefix}.layer{layers}.w_self"))
        {
            layers += 1;
        }
        if layers == 0 {
            return Err(Error::Checkpoint(format!("no `{prefix}` encoder layers")));
        }
        let num_labels = ck.get(&format!("{prefix}.layer0.bias"))?.rows() - 1;
        Ok(BranchModel {
            kind,
            encoder: GcnEncoder::from_checkpoint(ck, prefix, dims.feature, num_labels, layers)?,
            decoder: DecoderParams::from_checkpoint(ck, dims)?,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>, kind: GraphKind) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, kind)
    }

    pub fn dims(&self) -> DecoderDims {
        self.decoder.dims()
    }

    /// Teacher-forced loss of one caption on the tape.
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        graph: &RelationGraph,
        tokens: &[usize],
    ) -> Result<Var> {
        let f = tape.constant(features.clone());
        let encoded = self.encoder.encode_on(tape, f, graph)?;
        let vars = self.decoder.bind(tape);
        vars.sentence_nll(tape, encoded, tokens)
    }

    pub fn loss(&self, features: &Tensor, graph: &RelationGraph, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on(&mut tape, features, graph, tokens)?;
        Ok(tape.value(l).item())
    }

    /// Relation-aware region features.
    pub fn encode(&self, features: &Tensor, graph: &RelationGraph) -> Result<Tensor> {
        if features.cols() != self.dims().feature {
            return Err(Error::shape(
                "encode",
                &[features.rows(), self.dims().feature],
                features.shape(),
            ));
        }
        self.encoder.encode(features, graph)
    }

    pub fn context(&self, features: &Tensor, graph: &RelationGraph) -> Result<EncodedContext> {
        EncodedContext::new(&self.decoder, &self.encode(features, graph)?)
    }
}

impl ParamSet for BranchModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

/// One randomly drawn model checked by [`grad_check_suite`].
#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub kind: GraphKind,
    pub regions: usize,
    pub dims: DecoderDims,
    pub gcn_layers: usize,
    pub report: GradCheckReport,
}

/// Finite-difference check of the full caption loss, through the encoder and
/// the unrolled decoder, on `instances` small random models.
pub fn grad_check_suite(
    seed: u64,
    instances: usize,
    cfg: GradCheckConfig,
) -> Result<Vec<GradCheckInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = Vec::with_capacity(instances);
    for n in 0..instances {
        let kind = if n % 2 == 0 {
            GraphKind::Spatial
        } else {
            GraphKind::Semantic
        };
        let k = rng.random_range(2..=5);
        let dims = DecoderDims {
            vocab: rng.random_range(5..=12),
            feature: rng.random_range(3..=8),
            hidden: rng.random_range(2..=5),
            attention: rng.random_range(2..=4),
            embed: rng.random_range(2..=4),
        };
        let gcn_layers = rng.random_range(1..=2);
        let num_semantic = 4;
        let graph = match kind {
            GraphKind::Spatial => {
                let boxes: Vec<BoundingBox> = (0..k)
                    .map(|_| {
                        let (w, h) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
                        let (x, y) = (
                            rng.random_range(0.0..1.0 - w),
                            rng.random_range(0.0..1.0 - h),
                        );
                        BoundingBox::new(x, y, x + w, y + h)
                    })
                    .collect::<Result<_>>()?;
                build_spatial_graph(&boxes)?
            }
            GraphKind::Semantic => {
                let mut edges = Vec::new();
                for i in 0..k {
                    for j in 0..k {
                        if i != j && rng.random_bool(0.5) {
                            edges.push(Edge {
                                src: i,
                                dst: j,
                                label: rng.random_range(1..=num_semantic),
                            });
                        }
                    }
                }
                RelationGraph::new(k, relation_label_names(num_semantic), edges)?
            }
        };
        let model = BranchModel::init(
            kind,
            dims,
            kind.num_labels(num_semantic),
            gcn_layers,
            &mut rng,
        );
        // biases start at zero; move them so their gradients are exercised
        // away from the symmetric point
        let mut theta = model.to_checkpoint();
        for t in theta.tensors.values_mut() {
            for x in t.data_mut() {
                *x += 0.1 * normal.sample(&mut rng);
            }
        }
        let features = Tensor::matrix(
            k,
            dims.feature,
            (0..k * dims.feature)
                .map(|_| normal.sample(&mut rng))
                .collect(),
        )?;
        let len = rng.random_range(2..=4);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(3..dims.vocab)).collect();
        let report = grad_check(
            |tape, ck| {
                BranchModel::from_checkpoint(ck, kind)?.loss_on(tape, &features, &graph, &tokens)
            },
            &theta,
            cfg,
        )?;
        out.push(GradCheckInstance {
            kind,
            regions: k,
            dims,
            gcn_layers,
            report,
        });
    }
    Ok(out)
}
