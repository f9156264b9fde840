//! Run the vanilla, directional and gated convolutions over a small graph and
//! check that relabelling the regions just permutes the output rows.
//!
//! cargo run --example gcn_encoder

use gcn_lstm::gcn::{
    gcn_directional, gcn_gated, gcn_vanilla, GcnEncoder, GcnLayerParams, GcnOptions,
};
use gcn_lstm::graph::{Edge, RelationGraph};
use gcn_lstm::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn print(name: &str, t: &Tensor) {
    println!("{name}:");
    for r in 0..t.rows() {
        let row: Vec<String> = t.row_slice(r).iter().map(|x| format!("{x:8.4}")).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> gcn_lstm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, d, labels) = (4, 3, 2);
    let features = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.5],
        vec![0.0, 1.0, -0.5],
        vec![0.3, 0.3, 0.3],
        vec![-1.0, 0.2, 0.0],
    ])?;
    let edges = vec![
        Edge {
            src: 0,
            dst: 1,
            label: 1,
        },
        Edge {
            src: 1,
            dst: 2,
            label: 2,
        },
        Edge {
            src: 3,
            dst: 0,
            label: 1,
        },
    ];
    let names = (1..=labels).map(|l| format!("r{l}")).collect();
    let graph = RelationGraph::new(k, names, edges)?;

    let layer = GcnLayerParams::init("demo", d, labels, &mut rng);
    let opts = GcnOptions::default();
    print("input", &features);
    let bias = Tensor::row(vec![0.1; d]);
    print(
        "vanilla",
        &gcn_vanilla(&features, &graph, &layer.w_self, &bias)?,
    );
    print(
        "directional",
        &gcn_directional(&features, &graph, &layer, opts)?,
    );
    print("gated", &gcn_gated(&features, &graph, &layer, opts)?);

    let encoder = GcnEncoder::init("enc", d, labels, 2, &mut rng);
    let out = encoder.encode(&features, &graph)?;
    // region i becomes region perm[i]
    let perm = [2, 0, 3, 1];
    let mut inverse = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let permuted = encoder.encode(&features.permute_rows(&inverse), &graph.permuted(&perm)?)?;
    print("two-layer encoder", &out);
    println!(
        "permutation equivariant: {}",
        permuted == out.permute_rows(&inverse)
    );
    Ok(())
}
