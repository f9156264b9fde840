//! Brute-force reference implementations shared by the integration tests and
//! the acceptance runner. They are written from the relation rules directly,
//! without reusing any library code paths.

#![allow(dead_code)]

use gcn_lstm::gcn::GcnLayerParams;
use gcn_lstm::graph::{Edge, RelationGraph};
use gcn_lstm::spatial::BoundingBox;
use gcn_lstm::tensor::Tensor;
use rand::Rng;

// ---------------------------------------------------------------- spatial

/// Class of the ordered pair `(a, b)` straight from the rules, or `None`.
pub fn oracle_spatial(a: [f64; 4], b: [f64; 4]) -> Option<usize> {
    let within = |outer: [f64; 4], inner: [f64; 4]| {
        outer != inner
            && outer[0] <= inner[0]
            && outer[1] <= inner[1]
            && inner[2] <= outer[2]
            && inner[3] <= outer[3]
    };
    if within(a, b) {
        return Some(1);
    }
    if within(b, a) {
        return Some(2);
    }
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    if inter > 0.0 && inter / (area(a) + area(b) - inter) > 0.5 {
        return Some(3);
    }
    let dx = (b[0] + b[2]) / 2.0 - (a[0] + a[2]) / 2.0;
    // image y grows downward; angles are measured with y up
    let dy = (a[1] + a[3]) / 2.0 - (b[1] + b[3]) / 2.0;
    if 2.0 * (dx * dx + dy * dy) > 1.0 {
        return None;
    }
    if dx == 0.0 && dy == 0.0 {
        return Some(3);
    }
    let theta = if dy == 0.0 {
        if dx > 0.0 {
            360.0
        } else {
            180.0
        }
    } else if dx == 0.0 {
        if dy > 0.0 {
            90.0
        } else {
            270.0
        }
    } else if dx.abs() == dy.abs() {
        match (dx > 0.0, dy > 0.0) {
            (true, true) => 45.0,
            (false, true) => 135.0,
            (false, false) => 225.0,
            (true, false) => 315.0,
        }
    } else {
        let t = dy.atan2(dx).to_degrees();
        if t < 0.0 {
            t + 360.0
        } else {
            t
        }
    };
    Some(3 + (theta / 45.0).ceil() as usize)
}

/// Box with continuous random corners.
pub fn random_box<R: Rng>(rng: &mut R) -> BoundingBox {
    loop {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (c, d): (f64, f64) = (rng.random(), rng.random());
        if let Ok(bx) = BoundingBox::new(a.min(b), c.min(d), a.max(b), c.max(d)) {
            return bx;
        }
    }
}

/// Box on a coarse 1/16 grid, so containment, identical boxes, shared
/// centroids and sector boundaries come up often.
pub fn grid_box<R: Rng>(rng: &mut R) -> BoundingBox {
    let x1 = rng.random_range(0..16u32);
    let y1 = rng.random_range(0..16u32);
    let x2 = rng.random_range(x1 + 1..=16);
    let y2 = rng.random_range(y1 + 1..=16);
    let g = |v: u32| v as f64 / 16.0;
    BoundingBox::new(g(x1), g(y1), g(x2), g(y2)).unwrap()
}

/// Checks the class of `(b, a)` against the class of `(a, b)`: inside and
/// cover swap, overlap and no-edge are symmetric, sectors flip by four.
pub fn antisymmetry_violation(ab: Option<usize>, ba: Option<usize>) -> Option<String> {
    let expected = match ab {
        None => None,
        Some(1) => Some(2),
        Some(2) => Some(1),
        Some(3) => Some(3),
        Some(p) => Some((p - 4 + 4) % 8 + 4),
    };
    (ba != expected).then(|| format!("forward {ab:?}, backward {ba:?}"))
}

// ---------------------------------------------------------------- graphs

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn labels(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("r{i}")).collect()
}

/// Random graph over `k` vertices: every ordered pair gets an edge with
/// probability `p`, with a label in `1..=num_labels`.
pub fn random_graph<R: Rng>(rng: &mut R, k: usize, num_labels: usize, p: f64) -> RelationGraph {
    let mut edges = Vec::new();
    for src in 0..k {
        for dst in 0..k {
            if src != dst && rng.random_bool(p) {
                edges.push(Edge {
                    src,
                    dst,
                    label: rng.random_range(1..=num_labels),
                });
            }
        }
    }
    RelationGraph::new(k, labels(num_labels), edges).unwrap()
}

/// Plain-vector copy of one gated layer.
pub struct OracleLayer {
    /// Forward, reverse, self; each `D x D` and applied as `W x`.
    pub w: [Vec<Vec<f64>>; 3],
    /// Row 0 belongs to the self label.
    pub bias: Vec<Vec<f64>>,
    pub gate_w: [Vec<f64>; 3],
    pub gate_b: Vec<f64>,
}

impl OracleLayer {
    pub fn random<R: Rng>(rng: &mut R, d: usize, num_labels: usize) -> Self {
        let mut row = |n| random_matrix(rng, 1, n).remove(0);
        let gate_w = [row(d), row(d), row(d)];
        let gate_b = row(num_labels + 1);
        OracleLayer {
            w: [
                random_matrix(rng, d, d),
                random_matrix(rng, d, d),
                random_matrix(rng, d, d),
            ],
            bias: random_matrix(rng, num_labels + 1, d),
            gate_w,
            gate_b,
        }
    }

    /// One shared transform and bias, gates saturated to exactly 1.
    pub fn tied(w: Vec<Vec<f64>>, b: Vec<f64>, num_labels: usize) -> Self {
        let d = b.len();
        OracleLayer {
            w: [w.clone(), w.clone(), w],
            bias: vec![b; num_labels + 1],
            gate_w: [vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            gate_b: vec![40.0; num_labels + 1],
        }
    }

    pub fn to_params(&self, prefix: &str) -> GcnLayerParams {
        let d = self.bias[0].len();
        let mut p = GcnLayerParams::zeros(prefix, d, self.bias.len() - 1);
        p.w_fwd = tensor(&self.w[0]);
        p.w_rev = tensor(&self.w[1]);
        p.w_self = tensor(&self.w[2]);
        p.bias = tensor(&self.bias);
        p.gate_w = tensor(&self.gate_w);
        p.gate_b = Tensor::matrix(self.gate_b.len(), 1, self.gate_b.clone()).unwrap();
        p
    }
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct per-vertex sum of messages, optionally gated, then ReLU.
pub fn oracle_layer(
    x: &[Vec<f64>],
    graph: &RelationGraph,
    layer: &OracleLayer,
    gated: bool,
) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let mut acc = vec![vec![0.0; d]; x.len()];
    let mut send = |target: usize, source: usize, dir: usize, label: usize| {
        let mut m = matvec(&layer.w[dir], &x[source]);
        let g = if gated {
            1.0 / (1.0 + (-(dot(&layer.gate_w[dir], &x[source]) + layer.gate_b[label])).exp())
        } else {
            1.0
        };
        for (c, v) in m.iter_mut().enumerate() {
            *v = (*v + layer.bias[label][c]) * g;
            acc[target][c] += *v;
        }
    };
    for i in 0..x.len() {
        send(i, i, 2, 0);
    }
    for e in graph.edges() {
        send(e.dst, e.src, 0, e.label);
        send(e.src, e.dst, 1, e.label);
    }
    acc.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

/// Undirected sum: every vertex plus both endpoints of each directed edge.
pub fn oracle_vanilla(
    x: &[Vec<f64>],
    graph: &RelationGraph,
    w: &[Vec<f64>],
    b: &[f64],
) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let mut acc = vec![vec![0.0; d]; x.len()];
    let mut add = |target: usize, source: usize| {
        for (c, v) in matvec(w, &x[source]).into_iter().enumerate() {
            acc[target][c] += v + b[c];
        }
    };
    for i in 0..x.len() {
        add(i, i);
    }
    for e in graph.edges() {
        add(e.dst, e.src);
        add(e.src, e.dst);
    }
    acc.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `inverse[perm[i]] = i`.
pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn random_permutation<R: Rng>(rng: &mut R, k: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

// ---------------------------------------------------------------- bleu

/// Corpus BLEU@n by counting every n-gram with linear scans.
pub fn oracle_bleu(cands: &[Vec<&str>], refs: &[Vec<Vec<&str>>], n: usize) -> f64 {
    let count = |seq: &[&str], gram: &[&str]| {
        (0..seq.len().saturating_sub(gram.len() - 1))
            .filter(|&s| seq.len() >= gram.len() && &seq[s..s + gram.len()] == gram)
            .count()
    };
    let mut product = 1.0;
    for k in 1..=n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            if c.len() < k {
                continue;
            }
            let mut seen: Vec<&[&str]> = Vec::new();
            for s in 0..=c.len() - k {
                let gram = &c[s..s + k];
                total += 1;
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                let mine = count(c, gram);
                let best = rs.iter().map(|r| count(r, gram)).max().unwrap_or(0);
                hit += mine.min(best);
            }
        }
        if hit == 0 {
            return 0.0;
        }
        product *= hit as f64 / total as f64;
    }
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len();
        let mut best = rs[0].len();
        for r in rs {
            let (dr, db) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
            if dr < db || (dr == db && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * product.powf(1.0 / n as f64)
}

/// Twenty candidates with one to three references each.
pub const HAND_CORPUS: [(&str, &[&str]); 20] = [
    (
        "a cat sits on the mat",
        &["a cat sits on the mat", "the cat is on a mat"],
    ),
    (
        "a dog runs in the park",
        &["a dog is running through the park"],
    ),
    (
        "two birds on a wire",
        &["two small birds sit on a wire", "birds on a power line"],
    ),
    ("the the the", &["the man rides a horse"]),
    (
        "a man riding a horse",
        &[
            "a man rides a horse",
            "a person on a horse",
            "man riding a brown horse",
        ],
    ),
    ("a plate of food", &["a plate with food on a table"]),
    (
        "a red car parked on the street",
        &["a red car parked by the street", "a car on the road"],
    ),
    (
        "people walking",
        &["a group of people walking down a street"],
    ),
    (
        "a kite in the sky",
        &["a kite flying in the blue sky", "a kite high in the sky"],
    ),
    ("a cup next to a book", &["a cup of coffee next to a book"]),
    (
        "a lamp inside a room",
        &["a lamp in a dark room", "a room with a lamp"],
    ),
    ("a bench in a park", &["a wooden bench in the park"]),
    (
        "a plant on a table",
        &[
            "a green plant on a wooden table",
            "a potted plant on a table",
        ],
    ),
    (
        "children play football on grass",
        &["kids playing soccer on the grass"],
    ),
    (
        "a chair containing a cat",
        &["a cat on a chair", "a chair containing a cat"],
    ),
    ("an airplane", &["an airplane flying over the city"]),
    (
        "a train on the tracks",
        &["a train on the tracks", "a long train on railway tracks"],
    ),
    (
        "a woman holding an umbrella in the rain",
        &["a woman holds an umbrella in the rain"],
    ),
    (
        "a bowl of fruit on the counter",
        &[
            "a bowl of fruit sits on a kitchen counter",
            "fruit in a bowl",
        ],
    ),
    (
        "a sheep",
        &[
            "a herd of sheep in a field",
            "sheep grazing",
            "a sheep in the field",
        ],
    ),
];

pub fn hand_corpus() -> (Vec<Vec<&'static str>>, Vec<Vec<Vec<&'static str>>>) {
    let cands = HAND_CORPUS
        .iter()
        .map(|(c, _)| c.split_whitespace().collect())
        .collect();
    let refs = HAND_CORPUS
        .iter()
        .map(|(_, rs)| rs.iter().map(|r| r.split_whitespace().collect()).collect())
        .collect();
    (cands, refs)
}

/// Oracle BLEU@1..4 of [`HAND_CORPUS`], frozen. A candidate shorter than
/// `n` contributes no `n`-grams to the denominator.
pub const HAND_CORPUS_BLEU: [f64; 4] = [
    0.6869332578664805,
    0.5987323525892441,
    0.49454583073595426,
    0.4162510331929961,
];

// ---------------------------------------------------------------- models

use gcn_lstm::decoder::{decode_step, DecoderState};
use gcn_lstm::infer::{fuse, Captioner};
use gcn_lstm::model::GraphKind;
use gcn_lstm::scene::Scene;
use gcn_lstm::synth::{generate_synthetic_corpus, SynthConfig};
use gcn_lstm::train::{build_vocab, TrainConfig, Trainer};
use gcn_lstm::vocab::BOS;

/// Synthetic corpus split into training and test scenes.
pub fn synthetic_split(n_scenes: usize, n_train: usize, seed: u64) -> (Vec<Scene>, Vec<Scene>) {
    let mut scenes = generate_synthetic_corpus(&SynthConfig {
        n_scenes,
        seed,
        ..Default::default()
    })
    .unwrap();
    let test = scenes.split_off(n_train);
    (scenes, test)
}

/// Both branches trained for `iters` desk-config steps on `train`.
pub fn trained_captioner(train: &[Scene], iters: usize) -> Captioner {
    let cfg = TrainConfig {
        max_iters: iters,
        ..TrainConfig::desk()
    };
    let vocab = build_vocab(train, cfg.min_count).unwrap();
    let branch = |kind| {
        let mut t = Trainer::with_vocab(train, kind, vocab.clone(), cfg.clone()).unwrap();
        t.run(|_| {}).unwrap();
        t.model
    };
    let sem = branch(GraphKind::Semantic);
    let spa = branch(GraphKind::Spatial);
    Captioner::new(vocab, Some(sem), Some(spa)).unwrap()
}

/// Largest `|sum - 1|` over fused next-word distributions along `tokens`,
/// for every weight in `alphas`.
pub fn fused_sum_error(c: &Captioner, scene: &Scene, tokens: &[usize], alphas: &[f64]) -> f64 {
    let features = scene.features().unwrap();
    let ctx = |m: &gcn_lstm::model::BranchModel| {
        let n = m.encoder.layers[0].num_labels();
        m.context(&features, &m.kind.graph(scene, n).unwrap())
            .unwrap()
    };
    let (sem, spa) = (c.semantic.as_ref().unwrap(), c.spatial.as_ref().unwrap());
    let (cs, cp) = (ctx(sem), ctx(spa));
    let mut ss = DecoderState::zeros(sem.dims().hidden);
    let mut sp = DecoderState::zeros(spa.dims().hidden);
    let mut worst: f64 = 0.0;
    for &w in std::iter::once(&BOS).chain(tokens) {
        let a = decode_step(&sem.decoder, &cs, &ss, w).unwrap();
        let b = decode_step(&spa.decoder, &cp, &sp, w).unwrap();
        for &alpha in alphas {
            let f = fuse(&a.probs, &b.probs, alpha).unwrap();
            worst = worst.max((f.iter().sum::<f64>() - 1.0).abs());
        }
        ss = a.state;
        sp = b.state;
    }
    worst
}
