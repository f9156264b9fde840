//! Scenes: regions, captions and optional relation inputs, stored as JSONL.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, RelationGraph};
use crate::semantic::{relation_label_names, UnionFeature};
use crate::spatial::{build_spatial_graph, BoundingBox};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_REGIONS: usize = 36;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    pub regions: Vec<Region>,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub union_features: Vec<UnionFeature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_edges: Option<Vec<Edge>>,
}

impl Scene {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.regions.first().map_or(0, |r| r.feature.len())
    }

    /// Region features stacked into a `K x D_v` matrix.
    pub fn features(&self) -> Result<Tensor> {
        Tensor::from_rows(
            &self
                .regions
                .iter()
                .map(|r| r.feature.clone())
                .collect::<Vec<_>>(),
        )
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.regions.iter().map(|r| r.bbox).collect()
    }

    pub fn validate(&self, max_regions: usize) -> Result<()> {
        let k = self.regions.len();
        if k == 0 || k > max_regions {
            return Err(Error::invalid(
                "scene",
                format!(
                    "`{}` has {k} regions, expected 1..={max_regions}",
                    self.image_id
                ),
            ));
        }
        let d = self.feature_dim();
        if d == 0 || self.regions.iter().any(|r| r.feature.len() != d) {
            return Err(Error::invalid(
                "scene",
                format!(
                    "`{}` has non-uniform or empty region features",
                    self.image_id
                ),
            ));
        }
        Ok(())
    }

    pub fn spatial_graph(&self) -> Result<RelationGraph> {
        build_spatial_graph(&self.boxes())
    }

    /// Graph from the precomputed semantic edges, over `num_relations` labels.
    pub fn semantic_graph(&self, num_relations: usize) -> Result<RelationGraph> {
        let edges = self.semantic_edges.clone().ok_or_else(|| {
            Error::Graph(format!("scene `{}` has no semantic edges", self.image_id))
        })?;
        RelationGraph::new(
            self.regions.len(),
            relation_label_names(num_relations),
            edges,
        )
    }
}

pub fn read_scenes_from(reader: impl BufRead) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = serde_json::from_str(&line).map_err(|e| Error::AtLine {
            line: n + 1,
            msg: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let file = crate::error::open(path.as_ref())?;
    read_scenes_from(std::io::BufReader::new(file))
}

pub fn write_scenes_to(mut writer: impl Write, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let file = crate::error::create(path.as_ref())?;
    write_scenes_to(std::io::BufWriter::new(file), scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        Scene {
            image_id: "s0".into(),
            regions: vec![
                Region {
                    bbox: BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap(),
                    feature: vec![1.0, 0.0],
                },
                Region {
                    bbox: BoundingBox::new(0.2, 0.2, 0.3, 0.3).unwrap(),
                    feature: vec![0.0, 1.0],
                },
            ],
            captions: vec!["a cat containing a dog".into()],
            union_features: vec![],
            semantic_edges: Some(vec![Edge {
                src: 0,
                dst: 1,
                label: 2,
            }]),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut buf = Vec::new();
        write_scenes_to(&mut buf, &[scene(), scene()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"box\":[0.1,0.1,0.5,0.5]"));
        assert_eq!(read_scenes_from(&buf[..]).unwrap(), vec![scene(), scene()]);
    }

    #[test]
    fn bad_line_is_reported() {
        let err = read_scenes_from(&b"\n{\"image_id\": 3}\n"[..]).unwrap_err();
        assert!(matches!(err, Error::AtLine { line: 2, .. }));
    }

    #[test]
    fn graphs_and_validation() {
        let s = scene();
        s.validate(36).unwrap();
        assert!(s.validate(1).is_err());
        assert_eq!(s.spatial_graph().unwrap().edge(0, 1).unwrap().label, 1);
        assert_eq!(s.semantic_graph(4).unwrap().edges().len(), 1);
    }
}
