//! Geometric relations between region boxes and the spatial relation graph.
//!
//! Classes, for the ordered pair `(a, b)`:
//!
//! | id    | name        | rule (first match wins)                              |
//! |-------|-------------|------------------------------------------------------|
//! | 1     | `inside`    | `a` strictly contains `b`                            |
//! | 2     | `cover`     | `b` strictly contains `a`                            |
//! | 3     | `overlap`   | IoU > 0.5                                            |
//! | 4..11 | `sector_n`  | distance ratio <= 0.5; `ceil(theta / 45) + 3`        |
//! | -     | no edge     | otherwise                                            |
//!
//! `theta` is the direction from the centroid of `a` to that of `b`, measured
//! counterclockwise from the +x axis with image y (which grows downward)
//! flipped to point up. `theta = 0` is treated as 360, so the sectors are the
//! half-open intervals `(45(n-1), 45n]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, RelationGraph};

pub const NUM_SPATIAL_CLASSES: usize = 11;
pub const INSIDE: usize = 1;
pub const COVER: usize = 2;
pub const OVERLAP: usize = 3;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const DISTANCE_RATIO_THRESHOLD: f64 = 0.5;

pub fn spatial_label_names() -> Vec<String> {
    let mut names = vec![
        "inside".to_string(),
        "cover".to_string(),
        "overlap".to_string(),
    ];
    names.extend((1..=8).map(|i| format!("sector_{i}")));
    names
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let c = [x1, y1, x2, y2];
        let in_unit = c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(c));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        (*self).into()
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn centroid(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// `other` lies within `self` and the two are not the same box.
    pub fn strictly_contains(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1
            && self.y1 <= other.y1
            && other.x2 <= self.x2
            && other.y2 <= self.y2
            && self != other
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeGeometry {
    /// Centroid distance.
    pub distance: f64,
    /// Direction in degrees, `[0, 360)`; `None` when the centroids coincide.
    pub angle_deg: Option<f64>,
    /// Distance over the image diagonal (`sqrt 2` in normalized coordinates).
    pub distance_ratio: f64,
}

/// Centroid offset from `a` to `b` with y pointing up.
fn offset(a: &BoundingBox, b: &BoundingBox) -> (f64, f64) {
    let (ax, ay) = a.centroid();
    let (bx, by) = b.centroid();
    (bx - ax, ay - by)
}

pub fn relative_geometry(a: &BoundingBox, b: &BoundingBox) -> RelativeGeometry {
    let (dx, dy) = offset(a, b);
    let distance = dx.hypot(dy);
    let angle_deg = if dx == 0.0 && dy == 0.0 {
        None
    } else {
        let mut t = dy.atan2(dx).to_degrees();
        if t < 0.0 {
            t += 360.0;
        }
        if t >= 360.0 {
            t -= 360.0;
        }
        Some(t)
    };
    RelativeGeometry {
        distance,
        angle_deg,
        distance_ratio: distance / std::f64::consts::SQRT_2,
    }
}

/// Sector class 4..=11 of a nonzero offset, by exact comparisons. Negating the
/// offset moves the class by exactly four sectors.
fn sector_class(dx: f64, dy: f64) -> usize {
    debug_assert!(dx != 0.0 || dy != 0.0);
    if dx > 0.0 && dy > 0.0 && dy <= dx {
        4
    } else if dy > 0.0 && dx >= 0.0 && dx < dy {
        5
    } else if dx < 0.0 && dy >= -dx {
        6
    } else if dx < 0.0 && dy >= 0.0 && dy < -dx {
        7
    } else if dx < 0.0 && dy < 0.0 && dx <= dy {
        8
    } else if dy < 0.0 && dx <= 0.0 && dy < dx {
        9
    } else if dy < 0.0 && dx > 0.0 && dx <= -dy {
        10
    } else {
        // dx > 0 and -dx < dy <= 0, including theta = 0
        11
    }
}

/// Spatial relation class of the ordered pair `(a, b)`, or `None` for no edge.
pub fn classify_spatial(a: &BoundingBox, b: &BoundingBox) -> Option<usize> {
    if a.strictly_contains(b) {
        return Some(INSIDE);
    }
    if b.strictly_contains(a) {
        return Some(COVER);
    }
    if iou(a, b) > IOU_THRESHOLD {
        return Some(OVERLAP);
    }
    let geom = relative_geometry(a, b);
    if geom.distance_ratio > DISTANCE_RATIO_THRESHOLD {
        return None;
    }
    let (dx, dy) = offset(a, b);
    if dx == 0.0 && dy == 0.0 {
        // shared centroid: direction undefined, treat as overlapping
        return Some(OVERLAP);
    }
    Some(sector_class(dx, dy))
}

pub fn build_spatial_graph(boxes: &[BoundingBox]) -> Result<RelationGraph> {
    let mut edges = Vec::new();
    for (i, a) in boxes.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            if i == j {
                continue;
            }
            if let Some(label) = classify_spatial(a, b) {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    label,
                });
            }
        }
    }
    RelationGraph::new(boxes.len(), spatial_label_names(), edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Box of half-size `h` around a centroid.
    fn around(cx: f64, cy: f64, h: f64) -> BoundingBox {
        bx(cx - h, cy - h, cx + h, cy + h)
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(0.5, 0.1, 0.4, 0.2).is_err());
        assert!(BoundingBox::new(0.1, 0.1, 0.1, 0.2).is_err());
        assert!(BoundingBox::new(-0.1, 0.1, 0.4, 0.2).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        let parsed: std::result::Result<BoundingBox, _> = serde_json::from_str("[0.5,0.1,0.4,0.2]");
        assert!(parsed.is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.6, 0.6, 0.9, 0.9)), 0.0);
        let b = bx(0.25, 0.25, 0.75, 0.75);
        // intersection 0.0625, union 0.25 + 0.25 - 0.0625
        assert!((iou(&a, &b) - 0.0625 / 0.4375).abs() < 1e-12);
    }

    #[test]
    fn relative_geometry_examples() {
        let g = relative_geometry(&around(0.2, 0.2, 0.1), &around(0.6, 0.2, 0.1));
        assert!((g.distance - 0.4).abs() < 1e-12);
        assert!(g.angle_deg.unwrap().abs() < 1e-9);
        assert!((g.distance_ratio - 0.4 / 2f64.sqrt()).abs() < 1e-12);

        // b is below a in the image, so the upward-y angle is 270
        let g = relative_geometry(&around(0.5, 0.5, 0.05), &around(0.5, 0.9, 0.05));
        assert!((g.angle_deg.unwrap() - 270.0).abs() < 1e-9);

        let g = relative_geometry(&around(0.5, 0.5, 0.05), &around(0.5, 0.5, 0.2));
        assert_eq!(g.distance, 0.0);
        assert_eq!(g.angle_deg, None);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify_spatial(&bx(0.0, 0.0, 1.0, 1.0), &bx(0.3, 0.3, 0.6, 0.6)),
            Some(INSIDE)
        );
        assert_eq!(
            classify_spatial(&bx(0.3, 0.3, 0.6, 0.6), &bx(0.0, 0.0, 1.0, 1.0)),
            Some(COVER)
        );
        // straight up: theta = 90 exactly
        let a = around(0.5, 0.5, 0.05);
        let b = around(0.5, 0.3, 0.05);
        assert_eq!(relative_geometry(&a, &b).angle_deg, Some(90.0));
        assert_eq!(classify_spatial(&a, &b), Some(5));
        // theta = 0 belongs to the last sector, never to `overlap`
        assert_eq!(
            classify_spatial(&around(0.2, 0.5, 0.05), &around(0.4, 0.5, 0.05)),
            Some(11)
        );
        // far apart
        assert_eq!(
            classify_spatial(&around(0.05, 0.05, 0.04), &around(0.95, 0.95, 0.04)),
            None
        );
        // identical boxes fall through containment to overlap
        let s = around(0.4, 0.4, 0.1);
        assert_eq!(classify_spatial(&s, &s), Some(OVERLAP));
        // shared centroid, small IoU, no containment
        let wide = bx(0.1, 0.45, 0.9, 0.55);
        let tall = bx(0.45, 0.1, 0.55, 0.9);
        assert_eq!(classify_spatial(&wide, &tall), Some(OVERLAP));
    }

    #[test]
    fn sectors_follow_ceil_rule_on_diagonals() {
        let c = (0.5, 0.5);
        let r = 0.2;
        for k in 0..8 {
            let theta = 45.0 * k as f64 + 22.5;
            let t = theta.to_radians();
            let b = around(c.0 + r * t.cos(), c.1 - r * t.sin(), 0.02);
            assert_eq!(
                classify_spatial(&around(c.0, c.1, 0.02), &b),
                Some(k + 4),
                "theta {theta}"
            );
        }
    }

    #[test]
    fn graph_examples() {
        let g = build_spatial_graph(&[around(0.5, 0.5, 0.1)]).unwrap();
        assert!(g.edges().is_empty());
        assert_eq!(g.self_loops().count(), 1);

        let b = around(0.5, 0.5, 0.1);
        let g = build_spatial_graph(&[b, b]).unwrap();
        assert_eq!(g.edge(0, 1).unwrap().label, OVERLAP);
        assert_eq!(g.edge(1, 0).unwrap().label, OVERLAP);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| {
            let x2 = (x + w * (1.0 - x)).min(1.0).max(x + 1e-3);
            let y2 = (y + h * (1.0 - y)).min(1.0).max(y + 1e-3);
            bx(x, y, x2, y2)
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let u = iou(&a, &b);
            prop_assert_eq!(u, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert_eq!(u == 1.0, a == b);
        }

        #[test]
        fn class_pairs_are_antisymmetric(a in arb_box(), b in arb_box()) {
            let ab = classify_spatial(&a, &b);
            let ba = classify_spatial(&b, &a);
            if let Some(c) = ab {
                prop_assert!((1..=11).contains(&c));
            }
            match (ab, ba) {
                (Some(INSIDE), other) => prop_assert_eq!(other, Some(COVER)),
                (Some(COVER), other) => prop_assert_eq!(other, Some(INSIDE)),
                (Some(OVERLAP), other) => prop_assert_eq!(other, Some(OVERLAP)),
                (Some(c), other) => prop_assert_eq!(other, Some((c - 4 + 4) % 8 + 4)),
                (None, other) => prop_assert_eq!(other, None),
            }
        }
    }
}
