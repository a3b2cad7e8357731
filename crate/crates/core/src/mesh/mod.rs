//! Triangle surface meshes.
//!
//! A [`TriMesh`] is validated on construction: every face references existing
//! vertices with three distinct, non-collinear corners, each undirected edge is
//! shared by at most two faces, and the surface forms a single connected
//! component. Meshes are never repaired; invalid input is rejected with the
//! index of the offending element.

mod attributes;
mod io;

pub use attributes::{
    angle_deficits, vertex_curvature, vertex_normals, CurvatureKind, VertexAttributes,
};
pub use io::{load_mesh, parse_off, parse_ply, save_mesh, write_off, write_ply, MeshFormat};

use std::collections::HashMap;

use thiserror::Error;

use crate::geom::{self, Vec3};

/// Faces with a smaller area than this (mm²) are degenerate.
pub const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("validation error: {0}")]
    Validation(#[from] ValidationError),
    #[error("degenerate normal at vertex {vertex}")]
    DegenerateNormal { vertex: usize },
    #[error("vertex {vertex} has a one-ring area below 1e-12")]
    ZeroAreaNeighborhood { vertex: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub(crate) fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("mesh has no faces")]
    Empty,
    #[error("vertex {vertex} has a non-finite coordinate")]
    NonFiniteVertex { vertex: usize },
    #[error("face {face} references vertex {index} but the mesh has {n_vertices} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        n_vertices: usize,
    },
    #[error("face {face} repeats a vertex index")]
    RepeatedIndex { face: usize },
    #[error("face {face} is degenerate (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("edge ({a}, {b}) is shared by {count} faces (first offending face {face})")]
    NonManifoldEdge {
        a: usize,
        b: usize,
        count: usize,
        face: usize,
    },
    #[error("{components} connected components (vertex {vertex} is not reachable from vertex 0)")]
    Disconnected { components: usize, vertex: usize },
}

/// A validated triangle surface mesh (positions in mm).
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, ValidationError> {
        validate(&vertices, &faces)?;
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// Unique undirected edges as sorted `(low, high)` pairs, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| face_edges(*f))
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Flags vertices that lie on an edge used by only one face.
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut flags = vec![false; self.vertices.len()];
        for ((a, b), count) in edge_face_counts(&self.faces) {
            if count.0 == 1 {
                flags[a] = true;
                flags[b] = true;
            }
        }
        flags
    }

    /// Applies `f` to every vertex and revalidates.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Result<Self, ValidationError> {
        Self::new(
            self.vertices.iter().map(|&v| f(v)).collect(),
            self.faces.clone(),
        )
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        geom::triangle_area(self.vertices[a], self.vertices[b], self.vertices[c])
    }
}

fn face_edges(f: [usize; 3]) -> [(usize, usize); 3] {
    [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
}

/// Maps each undirected edge to (face count, first face index).
fn edge_face_counts(faces: &[[usize; 3]]) -> HashMap<(usize, usize), (usize, usize)> {
    let mut counts: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for (a, b) in face_edges(*f) {
            let entry = counts.entry((a.min(b), a.max(b))).or_insert((0, fi));
            entry.0 += 1;
        }
    }
    counts
}

fn validate(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<(), ValidationError> {
    if faces.is_empty() {
        return Err(ValidationError::Empty);
    }
    if let Some(vertex) = vertices
        .iter()
        .position(|v| v.iter().any(|c| !c.is_finite()))
    {
        return Err(ValidationError::NonFiniteVertex { vertex });
    }
    let n = vertices.len();
    for (face, f) in faces.iter().enumerate() {
        if let Some(&index) = f.iter().find(|&&i| i >= n) {
            return Err(ValidationError::IndexOutOfRange {
                face,
                index,
                n_vertices: n,
            });
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(ValidationError::RepeatedIndex { face });
        }
        let area = geom::triangle_area(vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        if !(area > MIN_FACE_AREA) {
            return Err(ValidationError::DegenerateFace { face, area });
        }
    }

    let counts = edge_face_counts(faces);
    if let Some((&(a, b), &(count, _))) = counts
        .iter()
        .filter(|(_, &(count, _))| count > 2)
        .min_by_key(|(_, &(_, first))| first)
    {
        // Report the face that pushed the edge over two.
        let face = faces
            .iter()
            .enumerate()
            .filter(|(_, f)| {
                face_edges(**f)
                    .iter()
                    .any(|&(x, y)| (x.min(y), x.max(y)) == (a, b))
            })
            .nth(2)
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Err(ValidationError::NonManifoldEdge { a, b, count, face });
    }

    check_connected(n, faces)
}

fn check_connected(n: usize, faces: &[[usize; 3]]) -> Result<(), ValidationError> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for f in faces {
        for (a, b) in face_edges(*f) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    // Unreferenced vertices count as their own components.
    let roots: Vec<usize> = (0..n).map(|v| find(&mut parent, v)).collect();
    let mut distinct = roots.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() > 1 {
        let vertex = roots.iter().position(|&r| r != roots[0]).unwrap_or(0);
        return Err(ValidationError::Disconnected {
            components: distinct.len(),
            vertex,
        });
    }
    Ok(())
}
