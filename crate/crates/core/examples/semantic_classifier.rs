//! Train the pairwise relation classifier on separable synthetic pairs and
//! turn its predictions into a semantic graph.
//!
//! cargo run --release --example semantic_classifier

use gcn_lstm::semantic::{
    build_graph_from_probs, classifier_accuracy, classify_relation, edge_label,
    relation_label_names, synthetic_relation_pairs, train_relation_classifier,
    ClassifierTrainConfig,
};

fn main() -> gcn_lstm::Result<()> {
    let num_relations = 4;
    let dim = 16;
    // one draw, so both halves share the class prototypes
    let pairs = synthetic_relation_pairs(1500, dim, num_relations, 1);
    let (train, held_out) = pairs.split_at(1000);
    let cfg = ClassifierTrainConfig {
        num_relations,
        ..Default::default()
    };
    let (params, report) = train_relation_classifier(train, &cfg)?;
    println!(
        "loss {:.4} -> {:.4}, held-out accuracy {:.3}",
        report.initial_loss,
        report.final_loss,
        classifier_accuracy(&params, held_out)?
    );

    // treat the first six held-out pairs as the region pairs of a 3-region image
    let pairs = &held_out[..6];
    let mut next = pairs.iter();
    let graph = build_graph_from_probs(3, relation_label_names(num_relations), |i, j| {
        let p = next.next().expect("six ordered pairs");
        let probs = classify_relation(&p.subject, &p.object, &p.union_feature, &params)?;
        println!(
            "({i}, {j}) true {}  p(no relation) {:.3}  edge {:?}",
            p.label,
            probs[0],
            edge_label(&probs)
        );
        Ok(probs)
    })?;
    println!("\n{}", graph.to_json());
    Ok(())
}
