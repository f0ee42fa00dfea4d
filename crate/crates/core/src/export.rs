//! CSV and JSON serialization of analysis results.
//!
//! Floats are written with Rust's shortest round-trip formatting, so output
//! bytes depend only on the values.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::bundle::{HdmEmbedding, SegmentLabels, SoftMap};
use crate::curvature::CurvatureField;
use crate::diffusion::SpectralBasis;
use crate::landmarking::LandmarkSet;
use crate::registration::{CorrespondenceMap, DistanceGraph};
use crate::{Error, Result};

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("not an index: {s:?}")))
}

/// Square matrix with an id header row and an id first column.
pub fn write_labeled_matrix<W: Write>(ids: &[String], d: &DMatrix<f64>, w: W) -> Result<()> {
    if d.nrows() != ids.len() || d.ncols() != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for a {}x{} matrix",
            ids.len(),
            d.nrows(),
            d.ncols()
        )));
    }
    let mut out = writer(w);
    out.write_record(std::iter::once("").chain(ids.iter().map(String::as_str)))?;
    for (i, id) in ids.iter().enumerate() {
        out.write_record(std::iter::once(id.clone()).chain((0..ids.len()).map(|j| num(d[(i, j)]))))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_distance_graph<W: Write>(g: &DistanceGraph, w: W) -> Result<()> {
    write_labeled_matrix(&g.ids, &g.d, w)
}

pub fn read_distance_graph<R: Read>(r: R) -> Result<DistanceGraph> {
    let mut rows = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(r)
        .into_records();
    let header = rows.next().ok_or_else(|| Error::Parse("empty distance CSV".into()))??;
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = ids.len();
    let mut d = DMatrix::zeros(n, n);
    let mut count = 0;
    for (i, row) in rows.enumerate() {
        let row = row?;
        if i >= n || row.len() != n + 1 {
            return Err(Error::Parse(format!("distance CSV row {} has the wrong shape", i + 1)));
        }
        if row[0] != ids[i] {
            return Err(Error::Parse(format!(
                "row id {:?} does not match column id {:?}",
                &row[0], ids[i]
            )));
        }
        for j in 0..n {
            d[(i, j)] = parse_f64(&row[j + 1])?;
        }
        count += 1;
    }
    if count != n {
        return Err(Error::Parse(format!("distance CSV has {count} rows for {n} ids")));
    }
    DistanceGraph::new(ids, d)
}

/// `source_index,target_index` rows.
pub fn write_map<W: Write>(map: &CorrespondenceMap, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["source_index", "target_index"])?;
    for (i, &j) in map.assignment.iter().enumerate() {
        out.write_record([i.to_string(), j.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_map<R: Read>(from_id: &str, to_id: &str, r: R) -> Result<CorrespondenceMap> {
    let mut assignment = Vec::new();
    for (i, row) in csv::Reader::from_reader(r).records().enumerate() {
        let row = row?;
        if row.len() != 2 || parse_usize(&row[0])? != i {
            return Err(Error::Parse(format!("map CSV row {} is malformed", i + 1)));
        }
        assignment.push(parse_usize(&row[1])?);
    }
    Ok(CorrespondenceMap {
        from_id: from_id.into(),
        to_id: to_id.into(),
        assignment,
    })
}

/// Nonzero weights as `source_index,target_index,weight` rows.
pub fn write_soft_map<W: Write>(map: &SoftMap, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["source_index", "target_index", "weight"])?;
    for (i, row) in map.weights.iter().enumerate() {
        for &(j, wt) in row {
            out.write_record([i.to_string(), j.to_string(), num(wt)])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One column per eigenvector, headed by its eigenvalue.
pub fn write_spectral_basis<W: Write>(basis: &SpectralBasis, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(basis.eigenvalues.iter().map(|&l| num(l)))?;
    for row in basis.vectors.row_iter() {
        out.write_record(row.iter().map(|&x| num(x)))?;
    }
    out.flush()?;
    Ok(())
}

/// `t,sge` rows; failed grid points leave `sge` empty.
pub fn write_sge_curve<W: Write>(curve: &[(f64, Option<f64>)], w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["t", "sge"])?;
    for &(t, e) in curve {
        out.write_record([num(t), e.map(num).unwrap_or_default()])?;
    }
    out.flush()?;
    Ok(())
}

/// `surface_id,point_index,c1..cL` rows of the scaled coordinates.
pub fn write_hdm_embedding<W: Write>(emb: &HdmEmbedding, w: W) -> Result<()> {
    let mut out = writer(w);
    let dims = emb.dims();
    let header: Vec<String> = ["surface_id".to_string(), "point_index".to_string()]
        .into_iter()
        .chain((1..=dims).map(|l| format!("c{l}")))
        .collect();
    out.write_record(&header)?;
    for (id, c) in emb.ids.iter().zip(&emb.coordinates) {
        for i in 0..c.nrows() {
            out.write_record(
                [id.clone(), i.to_string()]
                    .into_iter()
                    .chain(c.row(i).iter().map(|&x| num(x))),
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `{surface_id: label histogram}` where entry m counts points with label m + 1.
pub fn segment_summary(labels: &SegmentLabels) -> BTreeMap<String, Vec<usize>> {
    labels.histograms()
}

pub fn write_segment_summary<W: Write>(labels: &SegmentLabels, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, &segment_summary(labels)).map_err(|e| Error::Io(e.into()))
}

/// `step,vertex_index,conditional_variance` rows, steps counted from 1.
pub fn write_landmarks<W: Write>(set: &LandmarkSet, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["step", "vertex_index", "conditional_variance"])?;
    for (s, (&v, &c)) in set.indices.iter().zip(&set.conditional_variances).enumerate() {
        out.write_record([(s + 1).to_string(), v.to_string(), num(c)])?;
    }
    out.flush()?;
    Ok(())
}

/// `vertex_index,energy` rows.
pub fn write_curvature<W: Write>(field: &CurvatureField, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["vertex_index", "energy"])?;
    for (i, &e) in field.per_vertex_energy.iter().enumerate() {
        out.write_record([i.to_string(), num(e)])?;
    }
    out.flush()?;
    Ok(())
}
