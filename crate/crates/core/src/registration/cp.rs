//! Discrete continuous-Procrustes distance: alternate an exact assignment
//! between equal-size sample sets with a Kabsch refit.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Point3};
use rayon::prelude::*;

use super::{
    axis_permuted_candidates, kabsch, solve_assignment, CorrespondenceMap, DistanceGraph, LandmarkPairs, RigidMotion,
};
use crate::error::{Error, Result};
use crate::mesh::SampleSet;

#[derive(Debug, Clone, PartialEq)]
pub struct CpResult {
    pub map: CorrespondenceMap,
    /// Motion taking the source samples onto the target samples.
    pub motion: RigidMotion,
    /// RMS distance between matched samples at the final motion.
    pub distance: f64,
    /// Mean squared matched distance after every half step; non-increasing.
    pub objective_trace: Vec<f64>,
    /// False when the iteration cap was hit before the assignment settled.
    pub converged: bool,
}

fn squared_cost(a: &[Point3<f64>], b: &[Point3<f64>], motion: &RigidMotion) -> DMatrix<f64> {
    let moved: Vec<Point3<f64>> = a.iter().map(|p| motion.apply(p)).collect();
    DMatrix::from_fn(a.len(), b.len(), |i, j| (moved[i] - b[j]).norm_squared())
}

fn mean_matched(a: &[Point3<f64>], b: &[Point3<f64>], motion: &RigidMotion, assignment: &[usize]) -> f64 {
    a.iter()
        .zip(assignment)
        .map(|(p, &j)| (motion.apply(p) - b[j]).norm_squared())
        .sum::<f64>()
        / a.len() as f64
}

/// Runs the alternation from `init` for at most `iters` rounds.
pub fn discrete_cp(a: &SampleSet, b: &SampleSet, init: &RigidMotion, iters: usize) -> Result<CpResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let (pa, pb) = (a.positions(), b.positions());
    let mut motion = *init;
    let mut assignment: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..iters.max(1) {
        let cost = squared_cost(&pa, &pb, &motion);
        let next = solve_assignment(&cost)?;
        if assignment.as_ref() == Some(&next) {
            converged = true;
            break;
        }
        trace.push(mean_matched(&pa, &pb, &motion, &next));
        let target: Vec<Point3<f64>> = next.iter().map(|&j| pb[j]).collect();
        let fit = kabsch(&LandmarkPairs::new(pa.clone(), target)?)?;
        motion = fit.motion;
        trace.push(fit.residual * fit.residual);
        assignment = Some(next);
    }
    if !converged {
        // one more assignment pass tells whether the last refit moved anything
        let cost = squared_cost(&pa, &pb, &motion);
        converged = assignment.as_ref() == Some(&solve_assignment(&cost)?);
    }
    let assignment = assignment.expect("at least one round ran");
    let objective = mean_matched(&pa, &pb, &motion, &assignment);
    let map = CorrespondenceMap::new(&a.mesh_id, &b.mesh_id, assignment)?;
    Ok(CpResult {
        map,
        motion,
        distance: objective.max(0.0).sqrt(),
        objective_trace: trace,
        converged,
    })
}

/// Best of `discrete_cp` started from each principal-axis candidate, in
/// every axis order (uniform sample weights). Ties keep the earlier start.
pub fn discrete_cp_restarts(a: &SampleSet, b: &SampleSet, iters: usize) -> Result<CpResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let (pa, pb) = (a.positions(), b.positions());
    let (wa, wb) = (vec![1.0; pa.len()], vec![1.0; pb.len()]);
    let starts = axis_permuted_candidates(&pa, &wa, &pb, &wb);
    let mut best: Option<CpResult> = None;
    for start in &starts {
        let run = discrete_cp(a, b, start, iters)?;
        if best.as_ref().is_none_or(|b| run.distance < b.distance - 1e-12) {
            best = Some(run);
        }
    }
    let best = best.expect("24 starts");
    if !best.converged {
        log::warn!("discrete cP {} -> {} hit the iteration cap", a.mesh_id, b.mesh_id);
    }
    Ok(best)
}

/// All-pairs distances with maps and motions for every ordered pair
/// (the reverse direction uses inverses).
#[derive(Debug, Clone)]
pub struct PairwiseCp {
    pub graph: DistanceGraph,
    pub maps: BTreeMap<(usize, usize), CorrespondenceMap>,
    pub motions: BTreeMap<(usize, usize), RigidMotion>,
    pub unconverged: usize,
}

impl PairwiseCp {
    pub fn map(&self, from: usize, to: usize) -> Result<CorrespondenceMap> {
        if from == to {
            let n = self.maps.values().next().map_or(0, |m| m.len());
            let id = &self.graph.ids[from];
            return Ok(CorrespondenceMap::identity(id, id, n));
        }
        self.maps.get(&(from, to)).cloned().ok_or(Error::MissingMap(from, to))
    }
}

/// Runs `discrete_cp_restarts` on every unordered pair in parallel. The
/// result does not depend on scheduling order.
pub fn pairwise_cp(samples: &[SampleSet], iters: usize) -> Result<PairwiseCp> {
    let k = samples.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| ((i + 1)..k).map(move |j| (i, j))).collect();
    let results: Vec<Result<CpResult>> = pairs
        .par_iter()
        .map(|&(i, j)| discrete_cp_restarts(&samples[i], &samples[j], iters))
        .collect();
    let mut d = DMatrix::zeros(k, k);
    let mut maps = BTreeMap::new();
    let mut motions = BTreeMap::new();
    let mut unconverged = 0;
    for (&(i, j), r) in pairs.iter().zip(results) {
        let r = r?;
        d[(i, j)] = r.distance;
        d[(j, i)] = r.distance;
        unconverged += usize::from(!r.converged);
        maps.insert((j, i), r.map.inverse());
        maps.insert((i, j), r.map);
        motions.insert((j, i), r.motion.inverse());
        motions.insert((i, j), r.motion);
    }
    let ids = samples.iter().map(|s| s.mesh_id.clone()).collect();
    Ok(PairwiseCp {
        graph: DistanceGraph::new(ids, d)?,
        maps,
        motions,
        unconverged,
    })
}
