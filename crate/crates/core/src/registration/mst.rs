//! Minimum spanning tree over a distance graph and propagation of pairwise
//! alignments to a common root.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{CorrespondenceMap, DistanceGraph, RigidMotion};
use crate::error::{Error, Result};

/// Kruskal's algorithm on a symmetric weight matrix; non-finite entries are
/// missing edges. Equal weights are ordered by the (smaller, larger) id pair,
/// compared as strings. Returned edges are `(i, j)` with `i < j`, in
/// insertion order.
pub fn minimum_spanning_tree(ids: &[String], d: &DMatrix<f64>) -> Result<Vec<(usize, usize)>> {
    let k = ids.len();
    let mut edges = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            if d[(i, j)].is_finite() {
                let (lo, hi) = if ids[i] <= ids[j] {
                    (&ids[i], &ids[j])
                } else {
                    (&ids[j], &ids[i])
                };
                edges.push((d[(i, j)], lo.clone(), hi.clone(), i, j));
            }
        }
    }
    edges.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut tree = Vec::with_capacity(k.saturating_sub(1));
    for (_, _, _, i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            tree.push((i, j));
        }
    }
    if tree.len() + 1 < k {
        return Err(Error::DisconnectedGraph);
    }
    Ok(tree)
}

/// Alignment of specimen `from` onto specimen `to` for one graph edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeAlignment {
    pub map: CorrespondenceMap,
    pub motion: RigidMotion,
}

impl EdgeAlignment {
    fn inverse(&self) -> Self {
        Self {
            map: self.map.inverse(),
            motion: self.motion.inverse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MstPropagation {
    pub root: usize,
    pub edges: Vec<(usize, usize)>,
    /// Tree parent of every specimen (None for the root).
    pub parent: Vec<Option<usize>>,
    /// Composed motion taking each specimen onto the root.
    pub motions: Vec<RigidMotion>,
    /// Composed map from each specimen's samples to the root's samples.
    pub maps: Vec<CorrespondenceMap>,
}

/// Root = specimen with the smallest distance sum (lowest index on ties).
/// Every specimen gets the composition of edge alignments along its tree
/// path. `alignments[(i, j)]` aligns i onto j; a missing direction is
/// filled by inverting the other one.
pub fn mst_propagate(
    g: &DistanceGraph,
    alignments: &BTreeMap<(usize, usize), EdgeAlignment>,
    sample_count: usize,
) -> Result<MstPropagation> {
    let k = g.len();
    if k == 0 {
        return Err(Error::DisconnectedGraph);
    }
    let edges = minimum_spanning_tree(&g.ids, &g.d)?;
    let sums: Vec<f64> = (0..k).map(|i| g.d.row(i).sum()).collect();
    let root = (0..k).fold(0, |best, i| if sums[i] < sums[best] { i } else { best });

    let mut adjacency = vec![Vec::new(); k];
    for &(i, j) in &edges {
        adjacency[i].push(j);
        adjacency[j].push(i);
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    let lookup = |from: usize, to: usize| -> Result<EdgeAlignment> {
        if let Some(a) = alignments.get(&(from, to)) {
            Ok(a.clone())
        } else if let Some(a) = alignments.get(&(to, from)) {
            Ok(a.inverse())
        } else {
            Err(Error::MissingMap(from, to))
        }
    };

    let root_id = &g.ids[root];
    let mut parent = vec![None; k];
    let mut motions = vec![RigidMotion::identity(); k];
    let mut maps: Vec<Option<CorrespondenceMap>> = vec![None; k];
    maps[root] = Some(CorrespondenceMap::identity(root_id, root_id, sample_count));
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(p) = queue.pop_front() {
        for &c in &adjacency[p] {
            if maps[c].is_some() {
                continue;
            }
            let edge = lookup(c, p)?;
            parent[c] = Some(p);
            motions[c] = motions[p].after(&edge.motion);
            maps[c] = Some(edge.map.then(maps[p].as_ref().expect("parent visited first"))?);
            queue.push_back(c);
        }
    }
    let maps = maps.into_iter().map(|m| m.expect("tree spans the graph")).collect();
    Ok(MstPropagation {
        root,
        edges,
        parent,
        motions,
        maps,
    })
}
