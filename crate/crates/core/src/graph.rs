//! Mesh-to-graph conversion.
//!
//! Nodes are mesh vertices with four input channels in the fixed order
//! `(curvature, normal_x, normal_y, normal_z)`. Every undirected mesh edge
//! becomes two directed edges. An edge `source -> target` carries the
//! pseudo-coordinate `0.5 + (p_source − p_target) / (2·scale)`, where `scale`
//! is the largest absolute offset component over all edges of the graph, so
//! each component lies in `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Vec3};
use crate::mesh::{TriMesh, VertexAttributes};

pub const FEATURE_CHANNELS: [&str; 4] = ["curvature", "normal_x", "normal_y", "normal_z"];
pub const N_FEATURES: usize = 4;
pub const GRAPH_SCHEMA: &str = "fg-v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("all edges have zero length")]
    ZeroScale,
    #[error("attributes cover {attrs} vertices but the mesh has {mesh}")]
    AttributeMismatch { attrs: usize, mesh: usize },
    #[error("graph {graph}: {targets} targets for {nodes} nodes")]
    LengthMismatch {
        graph: usize,
        targets: usize,
        nodes: usize,
    },
    #[error("cannot batch an empty list of graphs")]
    EmptyBatch,
    #[error("invalid graph document: {0}")]
    Invalid(String),
}

/// Maps an edge offset into the unit cube given the per-graph scale.
pub fn normalize_pseudo(delta: Vec3, scale: f64) -> Result<Vec3, GraphError> {
    if !(scale > 0.0) {
        return Err(GraphError::ZeroScale);
    }
    Ok(delta.map(|d| (0.5 + d / (2.0 * scale)).clamp(0.0, 1.0)))
}

/// Pseudo-coordinates of `edges` and the per-graph scale they were
/// normalized with.
fn edge_pseudo_coords(edges: &[[usize; 2]], positions: &[Vec3]) -> Result<(Vec<Vec3>, f64), GraphError> {
    let deltas: Vec<Vec3> = edges
        .iter()
        .map(|&[s, t]| geom::sub(positions[s], positions[t]))
        .collect();
    let scale = deltas
        .iter()
        .flat_map(|d| d.iter().map(|c| c.abs()))
        .fold(0.0, f64::max);
    let pseudo = deltas
        .into_iter()
        .map(|d| normalize_pseudo(d, scale))
        .collect::<Result<_, _>>()?;
    Ok((pseudo, scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGraph {
    pub n_nodes: usize,
    pub node_features: Vec<[f64; N_FEATURES]>,
    /// Directed `[source, target]` pairs, sorted.
    pub edges: Vec<[usize; 2]>,
    pub pseudo_coords: Vec<Vec3>,
    /// Vertex positions in mm, kept for provenance and the FCN baseline.
    pub positions: Vec<Vec3>,
    pub scale: f64,
}

impl FeatureGraph {
    pub fn build(mesh: &TriMesh, attrs: &VertexAttributes) -> Result<Self, GraphError> {
        let n = mesh.n_vertices();
        if attrs.normals.len() != n || attrs.curvature.len() != n {
            return Err(GraphError::AttributeMismatch {
                attrs: attrs.normals.len(),
                mesh: n,
            });
        }
        let node_features = attrs
            .curvature
            .iter()
            .zip(&attrs.normals)
            .map(|(&k, nrm)| [k, nrm[0], nrm[1], nrm[2]])
            .collect();
        Self::from_parts(node_features, mesh.vertices().to_vec(), &mesh.edges())
    }

    /// Builds a graph from node rows, positions and undirected edges; both
    /// directions of every edge are added.
    pub fn from_parts(
        node_features: Vec<[f64; N_FEATURES]>,
        positions: Vec<Vec3>,
        undirected: &[(usize, usize)],
    ) -> Result<Self, GraphError> {
        let n = positions.len();
        if node_features.len() != n {
            return Err(GraphError::AttributeMismatch {
                attrs: node_features.len(),
                mesh: n,
            });
        }
        let mut edges: Vec<[usize; 2]> = undirected.iter().flat_map(|&(a, b)| [[a, b], [b, a]]).collect();
        edges.sort_unstable();
        edges.dedup();
        let (pseudo_coords, scale) = edge_pseudo_coords(&edges, &positions)?;
        let graph = Self {
            n_nodes: n,
            node_features,
            edges,
            pseudo_coords,
            positions,
            scale,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// A connected random graph: a ring plus `n` random chords, Gaussian-ish
    /// positions and uniform features in `[-1, 1]`.
    pub fn random(n_nodes: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        assert!(n_nodes >= 3, "random graphs need at least 3 nodes");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<Vec3> = (0..n_nodes)
            .map(|_| [(); 3].map(|_| rng.gen_range(-1.0..1.0) * 5.0))
            .collect();
        let node_features = (0..n_nodes)
            .map(|_| [(); N_FEATURES].map(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let mut edges: Vec<(usize, usize)> = (0..n_nodes).map(|i| (i, (i + 1) % n_nodes)).collect();
        for _ in 0..n_nodes {
            let a = rng.gen_range(0..n_nodes);
            let b = rng.gen_range(0..n_nodes);
            if a != b {
                edges.push((a, b));
            }
        }
        Self::from_parts(node_features, positions, &edges).expect("valid by construction")
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Recovers the Cartesian offset of every edge from its pseudo-coordinate.
    pub fn edge_offsets(&self) -> Vec<Vec3> {
        self.pseudo_coords
            .iter()
            .map(|u| u.map(|c| (c - 0.5) * 2.0 * self.scale))
            .collect()
    }

    /// Applies the rotation `r` to positions and normals; curvature is kept
    /// and pseudo-coordinates are renormalized with the new scale.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Result<Self, GraphError> {
        let positions: Vec<Vec3> = self.positions.iter().map(|&p| geom::mat_vec(r, p)).collect();
        let node_features = self
            .node_features
            .iter()
            .map(|f| {
                let n = geom::mat_vec(r, [f[1], f[2], f[3]]);
                [f[0], n[0], n[1], n[2]]
            })
            .collect();
        let (pseudo_coords, scale) = edge_pseudo_coords(&self.edges, &positions)?;
        Ok(Self {
            n_nodes: self.n_nodes,
            node_features,
            edges: self.edges.clone(),
            pseudo_coords,
            positions,
            scale,
        })
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes;
        assert_eq!(perm.len(), n);
        let mut node_features = vec![[0.0; N_FEATURES]; n];
        let mut positions = vec![[0.0; 3]; n];
        for i in 0..n {
            node_features[perm[i]] = self.node_features[i];
            positions[perm[i]] = self.positions[i];
        }
        let mut pairs: Vec<([usize; 2], Vec3)> = self
            .edges
            .iter()
            .zip(&self.pseudo_coords)
            .map(|(&[s, t], &u)| ([perm[s], perm[t]], u))
            .collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let (edges, pseudo_coords) = pairs.into_iter().unzip();
        Self {
            n_nodes: n,
            node_features,
            edges,
            pseudo_coords,
            positions,
            scale: self.scale,
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::Invalid(m));
        if self.node_features.len() != self.n_nodes || self.positions.len() != self.n_nodes {
            return bad("row counts differ from n_nodes".into());
        }
        if self.pseudo_coords.len() != self.edges.len() {
            return bad("pseudo_coords and edges differ in length".into());
        }
        if !(self.scale > 0.0) {
            return Err(GraphError::ZeroScale);
        }
        let mut sorted = self.edges.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return bad(format!("duplicate edge {:?}", w[0]));
            }
        }
        for (e, &[s, t]) in self.edges.iter().enumerate() {
            if s >= self.n_nodes || t >= self.n_nodes {
                return bad(format!("edge {e} references a missing node"));
            }
            if s == t {
                return bad(format!("edge {e} is a self-loop"));
            }
            if sorted.binary_search(&[t, s]).is_err() {
                return bad(format!("edge {e} has no reverse"));
            }
            if self.pseudo_coords[e].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("edge {e} pseudo-coordinate outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphDocument {
            schema: GRAPH_SCHEMA.into(),
            feature_channels: FEATURE_CHANNELS.iter().map(|s| s.to_string()).collect(),
            graph: self.clone(),
        })
        .expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDocument =
            serde_json::from_str(text).map_err(|e| GraphError::Invalid(e.to_string()))?;
        if doc.schema != GRAPH_SCHEMA {
            return Err(GraphError::Invalid(format!(
                "schema `{}`, expected `{GRAPH_SCHEMA}`",
                doc.schema
            )));
        }
        if doc.feature_channels != FEATURE_CHANNELS {
            return Err(GraphError::Invalid(format!(
                "feature channels {:?}",
                doc.feature_channels
            )));
        }
        doc.graph.validate()?;
        Ok(doc.graph)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDocument {
    schema: String,
    feature_channels: Vec<String>,
    #[serde(flatten)]
    graph: FeatureGraph,
}

/// Disjoint union of several graphs with per-node targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub n_nodes: usize,
    pub node_features: Vec<[f64; N_FEATURES]>,
    pub edges: Vec<[usize; 2]>,
    pub pseudo_coords: Vec<Vec3>,
    pub positions: Vec<Vec3>,
    /// `node_offsets[g]..node_offsets[g + 1]` are the nodes of graph `g`.
    pub node_offsets: Vec<usize>,
    pub targets: Vec<f64>,
}

impl GraphBatch {
    pub fn new(graphs: &[&FeatureGraph], targets: &[&[f64]]) -> Result<Self, GraphError> {
        if graphs.is_empty() {
            return Err(GraphError::EmptyBatch);
        }
        if targets.len() != graphs.len() {
            return Err(GraphError::LengthMismatch {
                graph: targets.len().min(graphs.len()),
                targets: 0,
                nodes: 0,
            });
        }
        let mut batch = GraphBatch {
            n_nodes: 0,
            node_features: Vec::new(),
            edges: Vec::new(),
            pseudo_coords: Vec::new(),
            positions: Vec::new(),
            node_offsets: vec![0],
            targets: Vec::new(),
        };
        for (g, (graph, t)) in graphs.iter().zip(targets).enumerate() {
            if t.len() != graph.n_nodes {
                return Err(GraphError::LengthMismatch {
                    graph: g,
                    targets: t.len(),
                    nodes: graph.n_nodes,
                });
            }
            let offset = batch.n_nodes;
            batch.node_features.extend_from_slice(&graph.node_features);
            batch.positions.extend_from_slice(&graph.positions);
            batch
                .edges
                .extend(graph.edges.iter().map(|&[s, t]| [s + offset, t + offset]));
            batch.pseudo_coords.extend_from_slice(&graph.pseudo_coords);
            batch.targets.extend_from_slice(t);
            batch.n_nodes += graph.n_nodes;
            batch.node_offsets.push(batch.n_nodes);
        }
        Ok(batch)
    }

    /// A batch of one graph without targets (zeros), for inference.
    pub fn single(graph: &FeatureGraph) -> Self {
        let zeros = vec![0.0; graph.n_nodes];
        Self::new(&[graph], &[&zeros]).expect("lengths match")
    }

    pub fn n_graphs(&self) -> usize {
        self.node_offsets.len() - 1
    }

    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        self.node_offsets[g]..self.node_offsets[g + 1]
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e[0]).collect()
    }

    pub fn targets_index(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e[1]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures::{single_triangle, tetrahedron};
    use crate::synth::icosphere;
    use proptest::prelude::*;

    fn graph_of(m: &TriMesh) -> FeatureGraph {
        FeatureGraph::build(m, &VertexAttributes::compute(m).unwrap()).unwrap()
    }

    #[test]
    fn edge_counts() {
        assert_eq!(graph_of(&single_triangle()).n_edges(), 6);
        assert_eq!(graph_of(&single_triangle()).n_nodes, 3);
        assert_eq!(graph_of(&tetrahedron()).n_edges(), 12);
        let ico = graph_of(&icosphere(0));
        assert_eq!((ico.n_nodes, ico.n_edges()), (12, 60));
    }

    #[test]
    fn invariants_hold() {
        let g = graph_of(&icosphere(2));
        g.validate().unwrap();
        for (e, &[s, t]) in g.edges.iter().enumerate() {
            let r = g.edges.binary_search(&[t, s]).unwrap();
            for c in 0..3 {
                assert!((g.pseudo_coords[e][c] + g.pseudo_coords[r][c] - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn feature_columns_are_ordered() {
        let m = tetrahedron();
        let attrs = VertexAttributes::compute(&m).unwrap();
        let g = FeatureGraph::build(&m, &attrs).unwrap();
        for i in 0..4 {
            assert_eq!(g.node_features[i][0], attrs.curvature[i]);
            assert_eq!(&g.node_features[i][1..], &attrs.normals[i][..]);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_pseudo([0.0; 3], 2.0).unwrap(), [0.5; 3]);
        assert_eq!(normalize_pseudo([2.0, 0.0, 0.0], 2.0).unwrap()[0], 1.0);
        assert_eq!(
            normalize_pseudo([-2.0, 0.0, 1.0], 2.0).unwrap(),
            [0.0, 0.5, 0.75]
        );
        assert_eq!(normalize_pseudo([0.0; 3], 0.0), Err(GraphError::ZeroScale));
    }

    #[test]
    fn scaling_and_translation_invariance() {
        let m = icosphere(1).map_vertices(|v| [v[0] * 1.7, v[1], v[2] * 0.6]).unwrap();
        let g = graph_of(&m);
        let shifted = graph_of(&m.map_vertices(|v| geom::add(v, [5.0, -3.0, 1.0])).unwrap());
        let scaled = graph_of(&m.map_vertices(|v| geom::scale(v, 3.3)).unwrap());
        assert_eq!(g.edges, shifted.edges);
        for e in 0..g.n_edges() {
            for c in 0..3 {
                assert!((g.pseudo_coords[e][c] - shifted.pseudo_coords[e][c]).abs() < 1e-12);
                assert!((g.pseudo_coords[e][c] - scaled.pseudo_coords[e][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotated_graph_matches_rotated_mesh() {
        use rand::SeedableRng;
        let m = icosphere(2).map_vertices(|v| [v[0] * 1.7, v[1], v[2] * 0.6]).unwrap();
        let rot = geom::random_rotation(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let direct = graph_of(&m).rotated(&rot).unwrap();
        let rebuilt = graph_of(&m.map_vertices(|v| geom::mat_vec(&rot, v)).unwrap());
        assert_eq!(direct.edges, rebuilt.edges);
        assert!((direct.scale - rebuilt.scale).abs() < 1e-12);
        for (a, b) in direct.node_features.iter().zip(&rebuilt.node_features) {
            for c in 0..N_FEATURES {
                assert!((a[c] - b[c]).abs() < 1e-9, "{a:?} vs {b:?}");
            }
        }
        for (a, b) in direct.pseudo_coords.iter().zip(&rebuilt.pseudo_coords) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
        direct.validate().unwrap();
    }

    #[test]
    fn rotation_changes_pseudo_coords() {
        let m = icosphere(1).map_vertices(|v| [v[0] * 1.7, v[1], v[2] * 0.6]).unwrap();
        let rot = geom::rotation([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let g = graph_of(&m);
        let r = graph_of(&m.map_vertices(|v| geom::mat_vec(&rot, v)).unwrap());
        let max_diff = g
            .pseudo_coords
            .iter()
            .zip(&r.pseudo_coords)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-3);
    }

    #[test]
    fn offsets_reconstruct() {
        let g = graph_of(&icosphere(1));
        for (d, &[s, t]) in g.edge_offsets().iter().zip(&g.edges) {
            let expected = geom::sub(g.positions[s], g.positions[t]);
            for c in 0..3 {
                assert!((d[c] - expected[c]).abs() <= 1e-9 * g.scale);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let g = graph_of(&tetrahedron());
        let text = g.to_json();
        assert!(text.contains("\"schema\":\"fg-v1\""));
        assert_eq!(FeatureGraph::from_json(&text).unwrap(), g);
        let tampered = text.replace("fg-v1", "fg-v0");
        assert!(FeatureGraph::from_json(&tampered).is_err());
    }

    #[test]
    fn batching() {
        let t = graph_of(&single_triangle());
        let one = GraphBatch::new(&[&t], &[&[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(one.edges, t.edges);
        assert_eq!(one.node_offsets, vec![0, 3]);

        let two = GraphBatch::new(&[&t, &t], &[&[0.0; 3], &[1.0; 3]]).unwrap();
        assert_eq!(two.n_nodes, 6);
        assert_eq!(two.n_graphs(), 2);
        for (e, &[s, d]) in t.edges.iter().enumerate() {
            assert_eq!(two.edges[t.n_edges() + e], [s + 3, d + 3]);
        }
        assert_eq!(two.targets, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);

        assert_eq!(GraphBatch::new(&[], &[]), Err(GraphError::EmptyBatch));
        assert!(matches!(
            GraphBatch::new(&[&t], &[&[0.0; 2]]),
            Err(GraphError::LengthMismatch { graph: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn pseudo_coords_stay_in_cube(dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0) {
            let u = normalize_pseudo([dx, dy, dz], 1.0).unwrap();
            let v = normalize_pseudo([-dx, -dy, -dz], 1.0).unwrap();
            for c in 0..3 {
                prop_assert!((0.0..=1.0).contains(&u[c]));
                prop_assert!((u[c] + v[c] - 1.0).abs() < 1e-15);
            }
        }
    }
}
