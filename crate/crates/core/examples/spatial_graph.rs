//! Classify a few box pairs and print the resulting spatial graph.
//!
//! cargo run --example spatial_graph

use gcn_lstm::spatial::{
    build_spatial_graph, classify_spatial, iou, relative_geometry, spatial_label_names, BoundingBox,
};

fn main() -> gcn_lstm::Result<()> {
    let boxes = [
        BoundingBox::new(0.10, 0.10, 0.60, 0.60)?,
        BoundingBox::new(0.20, 0.20, 0.40, 0.40)?,
        BoundingBox::new(0.55, 0.15, 0.75, 0.35)?,
        BoundingBox::new(0.12, 0.12, 0.58, 0.62)?,
        BoundingBox::new(0.90, 0.90, 1.00, 1.00)?,
    ];
    let names = spatial_label_names();
    for (i, a) in boxes.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            if i == j {
                continue;
            }
            let g = relative_geometry(a, b);
            let class = classify_spatial(a, b);
            println!(
                "{i} -> {j}  iou {:.3}  dist {:.3}  angle {:>7}  class {}",
                iou(a, b),
                g.distance_ratio,
                g.angle_deg.map_or("-".into(), |t| format!("{t:.1}")),
                class.map_or("none".to_string(), |c| format!("{c} ({})", names[c - 1])),
            );
        }
    }
    let graph = build_spatial_graph(&boxes)?;
    println!("\n{}", graph.to_json());
    Ok(())
}
