//! Indexed triangle meshes and the geometric primitives shared by the rest
//! of the crate.

mod io;
mod sample;
pub(crate) mod validate;

pub use io::{load_mesh, load_mesh_file, write_off, write_ply, MeshFormat, VertexProperties};
pub use sample::{edge_graph, farthest_point_sample, fps_start_vertex, geodesic_distances, SamplePoint, SampleSet};
pub use validate::{validate_mesh, DiagnosticsReport};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Face = [usize; 3];

/// Triangle surface with positions and vertex-index triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    id: String,
    vertices: Vec<Point3<f64>>,
    faces: Vec<Face>,
}

impl TriMesh {
    /// Builds a mesh, rejecting faces that reference missing vertices.
    pub fn new(id: impl Into<String>, vertices: Vec<Point3<f64>>, faces: Vec<Face>) -> Result<Self> {
        let count = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            for &index in face {
                if index >= count {
                    return Err(Error::FaceIndexOutOfRange { face: f, index, count });
                }
            }
        }
        Ok(Self {
            id: id.into(),
            vertices,
            faces,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity, new positions.
    pub fn with_positions(&self, vertices: Vec<Point3<f64>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::LengthMismatch(vertices.len(), self.vertices.len()));
        }
        Ok(Self {
            id: self.id.clone(),
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Applies `f` to every vertex position.
    pub fn map_positions(&self, f: impl Fn(&Point3<f64>) -> Point3<f64>) -> Self {
        Self {
            id: self.id.clone(),
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn face_corners(&self, f: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal; its length is twice the face area.
    pub fn face_cross(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_corners(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_cross(f).norm()
    }

    pub fn face_areas(&self) -> Vec<f64> {
        (0..self.faces.len()).map(|f| self.face_area(f)).collect()
    }

    pub fn area(&self) -> f64 {
        self.face_areas().iter().sum()
    }

    /// Lumped (barycentric) vertex areas: a third of each incident face.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            let a = self.face_area(f) / 3.0;
            for &v in face {
                areas[v] += a;
            }
        }
        areas
    }

    /// Area-weighted centroid of the surface.
    pub fn centroid(&self) -> Point3<f64> {
        let mut acc = Vector3::zeros();
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.face_corners(f);
            let area = self.face_area(f);
            acc += area * (a.coords + b.coords + c.coords) / 3.0;
            total += area;
        }
        Point3::from(acc / total)
    }

    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Faces incident to each vertex.
    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut incident = vec![Vec::new(); self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            for &v in face {
                incident[v].push(f);
            }
        }
        incident
    }
}

/// Translates the area-weighted centroid to the origin and scales uniformly
/// to unit total area.
pub fn normalize_mesh(m: &TriMesh) -> Result<TriMesh> {
    if m.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let area = m.area();
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::EmptyMesh);
    }
    let centroid = m.centroid().coords;
    let scale = 1.0 / area.sqrt();
    Ok(m.map_positions(|p| Point3::from((p.coords - centroid) * scale)))
}

/// Angle-weighted average of incident face normals, one unit vector per vertex.
pub fn vertex_normals(m: &TriMesh) -> Result<Vec<Vector3<f64>>> {
    let mut acc = vec![Vector3::zeros(); m.vertices.len()];
    let mut used = vec![false; m.vertices.len()];
    for (f, face) in m.faces.iter().enumerate() {
        let cross = m.face_cross(f);
        let norm = cross.norm();
        for &v in face {
            used[v] = true;
        }
        if norm == 0.0 {
            continue;
        }
        let n = cross / norm;
        for k in 0..3 {
            let v = face[k];
            let p = m.vertices[v];
            let e1 = m.vertices[face[(k + 1) % 3]] - p;
            let e2 = m.vertices[face[(k + 2) % 3]] - p;
            acc[v] += e1.angle(&e2) * n;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(v, n)| {
            if !used[v] {
                return Err(Error::IsolatedVertex(v));
            }
            let len = n.norm();
            if len > 0.0 {
                Ok(n / len)
            } else {
                Err(Error::IsolatedVertex(v))
            }
        })
        .collect()
}
