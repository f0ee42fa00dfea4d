use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TriMesh;

/// Counts of common scan artifacts. Detection only; nothing is repaired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub degenerate_face_count: usize,
    pub duplicate_vertex_count: usize,
    pub boundary_loop_count: usize,
    pub non_manifold_edge_count: usize,
    pub connected_component_count: usize,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

pub fn validate_mesh(m: &TriMesh) -> DiagnosticsReport {
    let diag = m.bbox_diagonal();
    let area_floor = 1e-15 * diag * diag;
    let degenerate_face_count = (0..m.face_count())
        .filter(|&f| {
            let [a, b, c] = m.faces()[f];
            a == b || b == c || a == c || !(m.face_area(f) > area_floor)
        })
        .count();

    let mut seen = HashMap::new();
    let mut duplicate_vertex_count = 0;
    for v in m.vertices() {
        let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
        if seen.insert(key, ()).is_some() {
            duplicate_vertex_count += 1;
        }
    }

    // undirected edge -> (uses, uses in canonical direction)
    let mut edges: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for face in m.faces() {
        for k in 0..3 {
            let (a, b) = (face[k], face[(k + 1) % 3]);
            if a == b {
                continue;
            }
            let e = edges.entry((a.min(b), a.max(b))).or_default();
            e.0 += 1;
            if a < b {
                e.1 += 1;
            }
        }
    }
    let mut non_manifold_edge_count = 0;
    let mut boundary = UnionFind::new(m.vertex_count());
    let mut boundary_vertices = Vec::new();
    for (&(a, b), &(uses, forward)) in &edges {
        match uses {
            1 => {
                boundary.union(a, b);
                boundary_vertices.push(a);
                boundary_vertices.push(b);
            }
            2 if forward != 1 => non_manifold_edge_count += 1,
            2 => {}
            _ => non_manifold_edge_count += 1,
        }
    }
    boundary_vertices.sort_unstable();
    boundary_vertices.dedup();
    let mut loop_roots: Vec<usize> = boundary_vertices.iter().map(|&v| boundary.find(v)).collect();
    loop_roots.sort_unstable();
    loop_roots.dedup();

    let mut components = UnionFind::new(m.vertex_count());
    let mut used = vec![false; m.vertex_count()];
    for face in m.faces() {
        components.union(face[0], face[1]);
        components.union(face[1], face[2]);
        for &v in face {
            used[v] = true;
        }
    }
    let mut roots: Vec<usize> = (0..m.vertex_count())
        .filter(|&v| used[v])
        .map(|v| components.find(v))
        .collect();
    roots.sort_unstable();
    roots.dedup();

    DiagnosticsReport {
        degenerate_face_count,
        duplicate_vertex_count,
        boundary_loop_count: loop_roots.len(),
        non_manifold_edge_count,
        connected_component_count: roots.len(),
    }
}

/// Connected components of the face-vertex graph; returns a component label
/// per vertex (`usize::MAX` for vertices outside every face) and the count.
pub(crate) fn vertex_components(m: &TriMesh) -> (Vec<usize>, usize) {
    let mut uf = UnionFind::new(m.vertex_count());
    let mut used = vec![false; m.vertex_count()];
    for face in m.faces() {
        uf.union(face[0], face[1]);
        uf.union(face[1], face[2]);
        for &v in face {
            used[v] = true;
        }
    }
    let mut label_of_root = HashMap::new();
    let mut labels = vec![usize::MAX; m.vertex_count()];
    for v in 0..m.vertex_count() {
        if !used[v] {
            continue;
        }
        let root = uf.find(v);
        let next = label_of_root.len();
        labels[v] = *label_of_root.entry(root).or_insert(next);
    }
    let count = label_of_root.len();
    (labels, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{icosahedron, make_template, TemplateKind};
    use nalgebra::Point3;

    #[test]
    fn closed_icosahedron() {
        let r = validate_mesh(&icosahedron());
        assert_eq!(r.boundary_loop_count, 0);
        assert_eq!(r.connected_component_count, 1);
        assert_eq!(r.non_manifold_edge_count, 0);
        assert_eq!(r.degenerate_face_count, 0);
        assert_eq!(r.duplicate_vertex_count, 0);
    }

    #[test]
    fn single_triangle_has_one_boundary_loop() {
        let v = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        let m = TriMesh::new("t", v, vec![[0, 1, 2]]).unwrap();
        let r = validate_mesh(&m);
        assert_eq!(r.boundary_loop_count, 1);
        assert_eq!(r.connected_component_count, 1);
    }

    #[test]
    fn edge_used_twice_in_same_direction() {
        // both faces traverse 0 -> 1
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.5, 1.0, 0.0),
            Point3::new(0.5, -1.0, 0.0),
        ];
        let m = TriMesh::new("nm", v, vec![[0, 1, 2], [0, 1, 3]]).unwrap();
        let r = validate_mesh(&m);
        // enumerate directed uses of the shared edge by hand
        let forward_uses = m
            .faces()
            .iter()
            .filter(|f| (0..3).any(|k| f[k] == 0 && f[(k + 1) % 3] == 1))
            .count();
        assert_eq!(forward_uses, 2);
        assert!(r.non_manifold_edge_count >= 1);
    }

    #[test]
    fn duplicates_degenerates_and_components() {
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(5.0, 0.0, 0.0),
            Point3::new(6.0, 0.0, 0.0),
            Point3::new(5.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let m = TriMesh::new("d", v, vec![[0, 1, 2], [3, 4, 5], [0, 1, 7]]).unwrap();
        let r = validate_mesh(&m);
        assert_eq!(r.duplicate_vertex_count, 1);
        assert_eq!(r.degenerate_face_count, 1);
        assert_eq!(r.connected_component_count, 2);
    }

    #[test]
    fn disc_template_has_one_boundary() {
        let disc = make_template(TemplateKind::BumpyDisc, 3).unwrap();
        assert_eq!(validate_mesh(&disc).boundary_loop_count, 1);
    }

    #[test]
    fn report_serializes() {
        let r = validate_mesh(&icosahedron());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"boundary_loop_count\":0"));
    }
}
