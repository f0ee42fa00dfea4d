//! Graph-geodesic farthest point sampling.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::validate::vertex_components;
use super::TriMesh;
use crate::error::{Error, Result};

/// A sample located on the mesh. Samples are mesh vertices, so the
/// barycentric coordinates select one corner of `face`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub vertex: usize,
    pub position: Point3<f64>,
    pub face: usize,
    pub barycentric: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub mesh_id: String,
    pub points: Vec<SamplePoint>,
    pub seed: u64,
}

impl SampleSet {
    /// Samples at the given vertices, in the given order.
    pub fn from_vertices(m: &TriMesh, vertices: &[usize], seed: u64) -> Result<Self> {
        let incident = m.vertex_faces();
        let points = vertices
            .iter()
            .map(|&v| {
                if v >= m.vertex_count() {
                    return Err(Error::IndexOutOfRange {
                        index: v,
                        size: m.vertex_count(),
                    });
                }
                let &face = incident[v].first().ok_or(Error::IsolatedVertex(v))?;
                let corner = m.faces()[face].iter().position(|&c| c == v).unwrap();
                let mut barycentric = [0.0; 3];
                barycentric[corner] = 1.0;
                Ok(SamplePoint {
                    vertex: v,
                    position: m.vertices()[v],
                    face,
                    barycentric,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mesh_id: m.id().to_string(),
            points,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn vertex_indices(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.vertex).collect()
    }

    /// Evaluates each sample's barycentric coordinates on `m`.
    pub fn evaluate_on(&self, m: &TriMesh) -> Vec<Point3<f64>> {
        self.points
            .iter()
            .map(|p| {
                let [a, b, c] = m.face_corners(p.face);
                let w = p.barycentric;
                Point3::from(w[0] * a.coords + w[1] * b.coords + w[2] * c.coords)
            })
            .collect()
    }
}

/// Adjacency lists of the edge graph with Euclidean edge lengths.
pub fn edge_graph(m: &TriMesh) -> Vec<Vec<(usize, f64)>> {
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m.vertex_count()];
    for face in m.faces() {
        for k in 0..3 {
            let (a, b) = (face[k], face[(k + 1) % 3]);
            if a == b {
                continue;
            }
            let w = (m.vertices()[a] - m.vertices()[b]).norm();
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
    }
    for list in &mut adj {
        list.sort_by_key(|e| e.0);
        list.dedup_by_key(|e| e.0);
    }
    adj
}

#[derive(PartialEq)]
struct Entry {
    dist: f64,
    vertex: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lowers `dist` to the shortest-path distance from `source` wherever that
/// is smaller. Only vertices that improve are expanded.
fn relax_from(adj: &[Vec<(usize, f64)>], source: usize, dist: &mut [f64]) {
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry {
        dist: 0.0,
        vertex: source,
    });
    while let Some(Entry { dist: d, vertex: v }) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(u, w) in &adj[v] {
            let nd = d + w;
            if nd < dist[u] {
                dist[u] = nd;
                heap.push(Entry { dist: nd, vertex: u });
            }
        }
    }
}

/// Edge-graph shortest-path distances from `source` (infinite when unreachable).
pub fn geodesic_distances(m: &TriMesh, source: usize) -> Vec<f64> {
    let adj = edge_graph(m);
    let mut dist = vec![f64::INFINITY; m.vertex_count()];
    relax_from(&adj, source, &mut dist);
    dist
}

/// Start index drawn from the seed, in `0..count`.
pub fn fps_start_vertex(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.random_range(0..count)
}

/// Farthest point sampling on the edge graph. The first sample of each
/// component is drawn from the seed; every further sample maximizes the
/// graph distance to those already chosen, ties going to the lowest index.
/// Disconnected meshes get samples in proportion to component area,
/// largest component first.
pub fn farthest_point_sample(m: &TriMesh, n: usize, seed: u64) -> Result<SampleSet> {
    if n > m.vertex_count() {
        return Err(Error::TooManySamples {
            requested: n,
            available: m.vertex_count(),
        });
    }
    let adj = edge_graph(m);
    let (labels, count) = vertex_components(m);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (v, &c) in labels.iter().enumerate() {
        if c != usize::MAX {
            members[c].push(v);
        }
    }
    let mut comp_area = vec![0.0; count];
    for (f, face) in m.faces().iter().enumerate() {
        comp_area[labels[face[0]]] += m.face_area(f);
    }
    let available: usize = members.iter().map(Vec::len).sum();
    if n > available {
        return Err(Error::TooManySamples {
            requested: n,
            available,
        });
    }

    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| comp_area[b].total_cmp(&comp_area[a]).then(a.cmp(&b)));
    let quota = allocate(n, &order, &comp_area, &members);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    let mut dist = vec![f64::INFINITY; m.vertex_count()];
    for &c in &order {
        if quota[c] == 0 {
            continue;
        }
        let verts = &members[c];
        let mut current = verts[rng.random_range(0..verts.len())];
        for k in 0..quota[c] {
            if k > 0 {
                let mut best = verts[0];
                for &v in verts {
                    if dist[v] > dist[best] {
                        best = v;
                    }
                }
                current = best;
            }
            chosen.push(current);
            relax_from(&adj, current, &mut dist);
        }
    }
    SampleSet::from_vertices(m, &chosen, seed)
}

fn allocate(n: usize, order: &[usize], area: &[f64], members: &[Vec<usize>]) -> Vec<usize> {
    let total: f64 = area.iter().sum();
    let mut quota = vec![0usize; area.len()];
    if order.len() == 1 {
        quota[order[0]] = n;
        return quota;
    }
    let mut assigned = 0;
    for &c in order {
        let share = if total > 0.0 {
            (n as f64 * area[c] / total).floor() as usize
        } else {
            0
        };
        quota[c] = share.min(members[c].len());
        assigned += quota[c];
    }
    // leftovers go to the largest components that still have room
    while assigned < n {
        let mut progressed = false;
        for &c in order {
            if assigned == n {
                break;
            }
            if quota[c] < members[c].len() {
                quota[c] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}
