//! Stage orchestration with content-hash caching.
//!
//! Every stage writes into `<output_dir>/<stage>/` and reads only files
//! written by the stages it depends on. A stage's cache key hashes its
//! parameters together with the hashes of those input files, so a stage is
//! skipped exactly when its key and its recorded output hashes still match.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use morphospace::bundle::{
    assemble_hdm, auto_bandwidths, gram_features, hbdd_graph, hdm_embed, joint_gp_landmarks, refine_rounds,
    segment_collection, BundleMaps, BundleOperator, RefineConfig,
};
use morphospace::curvature::{aria_dne, dne};
use morphospace::diffusion::{
    build_diffusion_kernel, default_time_grid, diffusion_distance_matrix, spectral_decompose, tune_time,
};
use morphospace::export;
use morphospace::landmarking::{calibrate_heat_time, HEAT_TIME_FACTORS};
use morphospace::mesh::{
    farthest_point_sample, load_mesh_file, normalize_mesh, validate_mesh, write_ply, MeshFormat, VertexProperties,
};
use morphospace::registration::{mst_propagate, pairwise_cp, EdgeAlignment};
use morphospace::{CorrespondenceMap, DistanceGraph, RigidMotion, SampleSet, TriMesh};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Bandwidth, PipelineConfig, SamplingMode, Stage};
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    /// Input file (relative to the output directory, or absolute for raw
    /// meshes) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file relative to the output directory to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub cached: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == s)
    }

    pub fn load(output_dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(output_dir.join(MANIFEST_NAME)).ok()?;
        serde_json::from_str(&text).ok()
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn is_mesh(path: &Path) -> bool {
    path.is_file() && MeshFormat::from_path(path).is_some()
}

/// Mesh files of the input directory, sorted by file name.
pub fn input_meshes(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::Config(format!("cannot list {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_mesh(p))
        .collect();
    files.sort();
    let mut seen = std::collections::BTreeSet::new();
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if !seen.insert(stem.clone()) {
            return Err(CliError::Config(format!("two input meshes share the name '{stem}'")));
        }
    }
    Ok(files)
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
}

type StageResult<T> = Result<T, CliError>;
type PairMaps = BTreeMap<(usize, usize), CorrespondenceMap>;

impl Ctx<'_> {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.name())
    }

    fn fail(&self, stage: Stage, specimen: Option<&str>, err: impl std::fmt::Display) -> CliError {
        CliError::Stage {
            stage: stage.name().into(),
            specimen: specimen.map(str::to_string),
            message: err.to_string(),
        }
    }

    fn create(&self, stage: Stage, rel: &str) -> StageResult<BufWriter<File>> {
        let path = self.dir(stage).join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| self.fail(stage, None, e))?;
        }
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| self.fail(stage, None, e))
    }

    fn write_json<T: Serialize>(&self, stage: Stage, rel: &str, value: &T) -> StageResult<()> {
        let mut w = self.create(stage, rel)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| self.fail(stage, None, e))?;
        w.write_all(b"\n")
            .and_then(|_| w.flush())
            .map_err(|e| self.fail(stage, None, e))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, stage: Stage, from: Stage, rel: &str) -> StageResult<T> {
        let text = std::fs::read_to_string(self.dir(from).join(rel)).map_err(|e| self.fail(stage, None, e))?;
        serde_json::from_str(&text).map_err(|e| self.fail(stage, None, e))
    }

    fn ids(&self, stage: Stage) -> StageResult<Vec<String>> {
        self.read_json(stage, Stage::Ingest, "index.json")
    }

    fn meshes(&self, stage: Stage) -> StageResult<Vec<TriMesh>> {
        self.ids(stage)?
            .iter()
            .map(|id| {
                load_mesh_file(&self.dir(Stage::Ingest).join(format!("{id}.ply")))
                    .map_err(|e| self.fail(stage, Some(id), e))
            })
            .collect()
    }

    fn samples(&self, stage: Stage) -> StageResult<Vec<SampleSet>> {
        self.ids(stage)?
            .iter()
            .map(|id| self.read_json(stage, Stage::Sample, &format!("{id}.json")))
            .collect()
    }

    fn cp(&self, stage: Stage) -> StageResult<(DistanceGraph, PairMaps)> {
        let dir = self.dir(Stage::Cpdist);
        let file = File::open(dir.join("distances.csv")).map_err(|e| self.fail(stage, None, e))?;
        let g = export::read_distance_graph(file).map_err(|e| self.fail(stage, None, e))?;
        let mut maps = BTreeMap::new();
        for i in 0..g.len() {
            for j in (i + 1)..g.len() {
                let (a, b) = (&g.ids[i], &g.ids[j]);
                let file = File::open(dir.join("maps").join(format!("{a}__{b}.csv")))
                    .map_err(|e| self.fail(stage, Some(a), e))?;
                let m = export::read_map(a, b, file).map_err(|e| self.fail(stage, Some(a), e))?;
                maps.insert((j, i), m.inverse());
                maps.insert((i, j), m);
            }
        }
        Ok((g, maps))
    }

    fn bandwidths(&self, stage: Stage) -> StageResult<Bandwidths> {
        self.read_json(stage, Stage::Hdm, "bandwidths.json")
    }

    fn operator(
        &self,
        stage: Stage,
    ) -> StageResult<(Vec<SampleSet>, BundleMaps, DistanceGraph, Bandwidths, BundleOperator)> {
        let samples = self.samples(stage)?;
        let (g, maps) = self.cp(stage)?;
        let bw = self.bandwidths(stage)?;
        let maps = BundleMaps::from_hard(&maps);
        let op = assemble_hdm(&samples, &maps, &g, bw.tau1, bw.tau2).map_err(|e| self.fail(stage, None, e))?;
        Ok((samples, maps, g, bw, op))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Bandwidths {
    tau1: f64,
    tau2: f64,
}

#[derive(Serialize, Deserialize)]
struct MotionRecord {
    from: String,
    to: String,
    motion: RigidMotion,
}

fn ingest(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Ingest;
    let files = input_meshes(&ctx.cfg.input_dir)?;
    let loaded: Vec<(String, TriMesh, morphospace::DiagnosticsReport)> = files
        .par_iter()
        .map(|f| {
            let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh").to_string();
            let m = load_mesh_file(f).map_err(|e| ctx.fail(s, Some(&id), e))?;
            let report = validate_mesh(&m);
            let m = normalize_mesh(&m).map_err(|e| ctx.fail(s, Some(&id), e))?;
            Ok((id, m, report))
        })
        .collect::<StageResult<_>>()?;
    let mut reports = BTreeMap::new();
    for (id, m, report) in &loaded {
        let mut w = ctx.create(s, &format!("{id}.ply"))?;
        write_ply(m, &VertexProperties::default(), &mut w).map_err(|e| ctx.fail(s, Some(id), e))?;
        w.flush().map_err(|e| ctx.fail(s, Some(id), e))?;
        reports.insert(id.clone(), *report);
    }
    ctx.write_json(s, "diagnostics.json", &reports)?;
    ctx.write_json(s, "index.json", &loaded.iter().map(|l| l.0.clone()).collect::<Vec<_>>())
}

fn sample(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Sample;
    let meshes = ctx.meshes(s)?;
    let n = ctx.cfg.sampling.n_samples;
    let seed = ctx.cfg.seed;
    let sets: Vec<SampleSet> = match ctx.cfg.sampling.mode {
        SamplingMode::Fps => meshes
            .par_iter()
            .map(|m| farthest_point_sample(m, n, seed).map_err(|e| ctx.fail(s, Some(m.id()), e)))
            .collect::<StageResult<_>>()?,
        SamplingMode::Shared => {
            let first = &meshes[0];
            for m in &meshes[1..] {
                if m.faces() != first.faces() || m.vertex_count() != first.vertex_count() {
                    return Err(ctx.fail(s, Some(m.id()), "shared sampling needs identical connectivity"));
                }
            }
            let vertices = farthest_point_sample(first, n, seed)
                .map_err(|e| ctx.fail(s, Some(first.id()), e))?
                .vertex_indices();
            meshes
                .iter()
                .map(|m| SampleSet::from_vertices(m, &vertices, seed).map_err(|e| ctx.fail(s, Some(m.id()), e)))
                .collect::<StageResult<_>>()?
        }
    };
    for set in &sets {
        ctx.write_json(s, &format!("{}.json", set.mesh_id), set)?;
    }
    Ok(())
}

fn cpdist(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Cpdist;
    let samples = ctx.samples(s)?;
    let cp = pairwise_cp(&samples, ctx.cfg.registration.cp_iters).map_err(|e| ctx.fail(s, None, e))?;
    export::write_distance_graph(&cp.graph, ctx.create(s, "distances.csv")?).map_err(|e| ctx.fail(s, None, e))?;
    let ids = &cp.graph.ids;
    let mut motions = Vec::new();
    for (&(i, j), m) in cp.maps.iter().filter(|((i, j), _)| i < j) {
        export::write_map(m, ctx.create(s, &format!("maps/{}__{}.csv", ids[i], ids[j]))?)
            .map_err(|e| ctx.fail(s, Some(&ids[i]), e))?;
        motions.push(MotionRecord {
            from: ids[i].clone(),
            to: ids[j].clone(),
            motion: cp.motions[&(i, j)],
        });
    }
    ctx.write_json(s, "motions.json", &motions)?;
    ctx.write_json(
        s,
        "summary.json",
        &serde_json::json!({ "unconverged_pairs": cp.unconverged }),
    )
}

fn align(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Align;
    let meshes = ctx.meshes(s)?;
    let (g, maps) = ctx.cp(s)?;
    let records: Vec<MotionRecord> = ctx.read_json(s, Stage::Cpdist, "motions.json")?;
    let index: BTreeMap<&str, usize> = g.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut alignments = BTreeMap::new();
    for r in &records {
        let (i, j) = (index[r.from.as_str()], index[r.to.as_str()]);
        alignments.insert(
            (i, j),
            EdgeAlignment {
                map: maps[&(i, j)].clone(),
                motion: r.motion,
            },
        );
    }
    let n = maps.values().next().map_or(0, |m| m.len());
    let mst = mst_propagate(&g, &alignments, n).map_err(|e| ctx.fail(s, None, e))?;
    for (k, m) in meshes.iter().enumerate() {
        let aligned = mst.motions[k].transform_mesh(m);
        let mut w = ctx.create(s, &format!("{}.ply", m.id()))?;
        write_ply(&aligned, &VertexProperties::default(), &mut w).map_err(|e| ctx.fail(s, Some(m.id()), e))?;
        w.flush().map_err(|e| ctx.fail(s, Some(m.id()), e))?;
        export::write_map(&mst.maps[k], ctx.create(s, &format!("maps/{}.csv", m.id()))?)
            .map_err(|e| ctx.fail(s, Some(m.id()), e))?;
    }
    let edges: Vec<[&str; 2]> = mst
        .edges
        .iter()
        .map(|&(i, j)| [g.ids[i].as_str(), g.ids[j].as_str()])
        .collect();
    let parent: BTreeMap<&str, Option<&str>> = g
        .ids
        .iter()
        .zip(&mst.parent)
        .map(|(id, p)| (id.as_str(), p.map(|p| g.ids[p].as_str())))
        .collect();
    ctx.write_json(
        s,
        "mst.json",
        &serde_json::json!({ "root": g.ids[mst.root], "edges": edges, "parent": parent }),
    )
}

fn diffuse(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Diffuse;
    let (g, _) = ctx.cp(s)?;
    let fail = |e| ctx.fail(s, None, e);
    let t = match ctx.cfg.diffusion.t {
        Bandwidth::Fixed(t) => t,
        Bandwidth::Auto => {
            let tuning = tune_time(&g.d, &default_time_grid(&g.d)).map_err(fail)?;
            export::write_sge_curve(&tuning.curve, ctx.create(s, "sge_curve.csv")?).map_err(fail)?;
            tuning.t
        }
    };
    let op = build_diffusion_kernel(&g.d, t).map_err(fail)?;
    let dims = ctx.cfg.diffusion.embed_dims.min(g.len().saturating_sub(1)).max(1);
    let basis = spectral_decompose(&op, dims).map_err(fail)?;
    export::write_spectral_basis(&basis, ctx.create(s, "basis.csv")?).map_err(fail)?;
    let dd = diffusion_distance_matrix(&basis, ctx.cfg.diffusion.gamma);
    export::write_labeled_matrix(&g.ids, &dd, ctx.create(s, "diffusion_distances.csv")?).map_err(fail)?;
    ctx.write_json(s, "time.json", &serde_json::json!({ "t": t }))
}

fn hdm(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Hdm;
    let fail = |e| ctx.fail(s, None, e);
    let samples = ctx.samples(s)?;
    let (g, maps) = ctx.cp(s)?;
    let (tau1, tau2) = match (ctx.cfg.hdm.tau1, ctx.cfg.hdm.tau2) {
        (Bandwidth::Fixed(a), Bandwidth::Fixed(b)) => (a, b),
        (a, b) => {
            let auto = auto_bandwidths(&samples, &g).map_err(fail)?;
            export::write_sge_curve(&auto.fiber_curve, ctx.create(s, "sge_fiber.csv")?).map_err(fail)?;
            export::write_sge_curve(&auto.base_curve, ctx.create(s, "sge_base.csv")?).map_err(fail)?;
            let pick = |b: Bandwidth, auto: f64| if let Bandwidth::Fixed(v) = b { v } else { auto };
            (pick(a, auto.tau1), pick(b, auto.tau2))
        }
    };
    ctx.write_json(s, "bandwidths.json", &Bandwidths { tau1, tau2 })?;
    let op = assemble_hdm(&samples, &BundleMaps::from_hard(&maps), &g, tau1, tau2).map_err(fail)?;
    let gamma = ctx.cfg.hdm.gamma;
    let dims = ctx.cfg.hdm.embed_dims.min(op.operator.len() - 1);
    let (_, emb) = hdm_embed(&op, dims, gamma).map_err(fail)?;
    export::write_hdm_embedding(&emb, ctx.create(s, "embedding.csv")?).map_err(fail)?;
    let norm = ctx.cfg.norm()?;
    let hbdd = hbdd_graph(&gram_features(&emb, gamma), norm).map_err(fail)?;
    export::write_distance_graph(&hbdd, ctx.create(s, "hbdd.csv")?).map_err(fail)
}

fn nearest_sample(points: &[nalgebra::Point3<f64>], p: &nalgebra::Point3<f64>) -> usize {
    (0..points.len())
        .min_by(|&a, &b| {
            (points[a] - p)
                .norm_squared()
                .total_cmp(&(points[b] - p).norm_squared())
        })
        .expect("nonempty sample set")
}

fn segment(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Segment;
    let fail = |e| ctx.fail(s, None, e);
    let meshes = ctx.meshes(s)?;
    let (samples, _, _, _, op) = ctx.operator(s)?;
    let dims = ctx.cfg.hdm.segment_dims.min(op.operator.len() - 1);
    let (_, emb) = hdm_embed(&op, dims, ctx.cfg.hdm.gamma).map_err(fail)?;
    let labels = segment_collection(&emb, ctx.cfg.hdm.clusters, ctx.cfg.seed).map_err(fail)?;
    export::write_segment_summary(&labels, ctx.create(s, "summary.json")?).map_err(fail)?;
    let mut table = csv::Writer::from_writer(ctx.create(s, "labels.csv")?);
    table
        .write_record(["surface_id", "point_index", "vertex_index", "label"])
        .map_err(|e| ctx.fail(s, None, e))?;
    for ((m, set), lab) in meshes.iter().zip(&samples).zip(&labels.labels) {
        for (i, (p, l)) in set.points.iter().zip(lab).enumerate() {
            table
                .write_record([m.id().to_string(), i.to_string(), p.vertex.to_string(), l.to_string()])
                .map_err(|e| ctx.fail(s, None, e))?;
        }
        let pts = set.positions();
        let per_vertex: Vec<u32> = m.vertices().iter().map(|v| lab[nearest_sample(&pts, v)]).collect();
        let mut w = ctx.create(s, &format!("{}.ply", m.id()))?;
        write_ply(
            m,
            &VertexProperties {
                segment: Some(&per_vertex),
                aria_dne: None,
            },
            &mut w,
        )
        .map_err(|e| ctx.fail(s, Some(m.id()), e))?;
        w.flush().map_err(|e| ctx.fail(s, Some(m.id()), e))?;
    }
    table.flush().map_err(|e| ctx.fail(s, None, e))
}

fn refine(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Refine;
    let fail = |e| ctx.fail(s, None, e);
    let (samples, maps, g, bw, _) = ctx.operator(s)?;
    let h = &ctx.cfg.hdm;
    let cfg = RefineConfig {
        dims: h.template_dims,
        neighbors: h.refine_neighbors,
        rounds: h.refine_rounds,
        ..RefineConfig::new(bw.tau1, bw.tau2)
    };
    let rounds = refine_rounds(&samples, &maps, &g, &cfg).map_err(fail)?;
    let last = &rounds.last().expect("at least one round").maps;
    for ((from, to), m) in &last.maps {
        if from != to {
            let name = format!("maps/{}__{}.csv", g.ids[*from], g.ids[*to]);
            export::write_soft_map(m, ctx.create(s, &name)?).map_err(fail)?;
        }
    }
    let degenerate: Vec<usize> = rounds.iter().map(|r| r.degenerate).collect();
    ctx.write_json(
        s,
        "summary.json",
        &serde_json::json!({ "degenerate_per_round": degenerate }),
    )?;

    let count = h.joint_landmarks.min(samples[0].len());
    let joint = joint_gp_landmarks(&samples, last, count, None).map_err(fail)?;
    let mut template = joint.template.clone();
    template.indices = template.indices.iter().map(|&m| samples[0].points[m].vertex).collect();
    export::write_landmarks(&template, ctx.create(s, "joint_landmarks.csv")?).map_err(fail)?;
    let mut pos = csv::Writer::from_writer(ctx.create(s, "joint_positions.csv")?);
    pos.write_record(["surface_id", "step", "x", "y", "z", "nearest_sample"])
        .map_err(|e| ctx.fail(s, None, e))?;
    for ((id, ps), near) in g.ids.iter().zip(&joint.positions).zip(&joint.nearest) {
        for (step, (p, n)) in ps.iter().zip(near).enumerate() {
            pos.write_record([
                id.clone(),
                (step + 1).to_string(),
                format!("{}", p.x),
                format!("{}", p.y),
                format!("{}", p.z),
                n.to_string(),
            ])
            .map_err(|e| ctx.fail(s, None, e))?;
        }
    }
    pos.flush().map_err(|e| ctx.fail(s, None, e))
}

fn landmarks(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Landmarks;
    let meshes = ctx.meshes(s)?;
    let lc = &ctx.cfg.landmarks;
    let results: Vec<_> = meshes
        .par_iter()
        .map(|m| {
            calibrate_heat_time(m, lc.count, &HEAT_TIME_FACTORS, lc.spectral_count)
                .map_err(|e| ctx.fail(s, Some(m.id()), e))
        })
        .collect::<StageResult<_>>()?;
    let mut calibration = BTreeMap::new();
    for (m, cal) in meshes.iter().zip(&results) {
        export::write_landmarks(&cal.landmarks, ctx.create(s, &format!("{}.csv", m.id()))?)
            .map_err(|e| ctx.fail(s, Some(m.id()), e))?;
        calibration.insert(
            m.id().to_string(),
            serde_json::json!({ "t": cal.t, "counts": cal.counts }),
        );
    }
    ctx.write_json(s, "calibration.json", &calibration)
}

fn ariadne(ctx: &Ctx) -> StageResult<()> {
    let s = Stage::Ariadne;
    let meshes = ctx.meshes(s)?;
    let eps = ctx.cfg.curvature.bandwidth;
    let fields: Vec<_> = meshes
        .par_iter()
        .map(|m| {
            let a = aria_dne(m, eps).map_err(|e| ctx.fail(s, Some(m.id()), e))?;
            let d = dne(m).map_err(|e| ctx.fail(s, Some(m.id()), e))?;
            Ok((a, d))
        })
        .collect::<StageResult<_>>()?;
    let mut totals = csv::Writer::from_writer(ctx.create(s, "totals.csv")?);
    let fail = |e| ctx.fail(s, None, e);
    totals
        .write_record(["mesh_id", "aria_dne", "dne", "degenerate_vertices"])
        .map_err(fail)?;
    for (m, (a, d)) in meshes.iter().zip(&fields) {
        export::write_curvature(a, ctx.create(s, &format!("{}.csv", m.id()))?)
            .map_err(|e| ctx.fail(s, Some(m.id()), e))?;
        let mut w = ctx.create(s, &format!("{}.ply", m.id()))?;
        write_ply(
            m,
            &VertexProperties {
                segment: None,
                aria_dne: Some(&a.per_vertex_energy),
            },
            &mut w,
        )
        .map_err(|e| ctx.fail(s, Some(m.id()), e))?;
        w.flush().map_err(|e| ctx.fail(s, Some(m.id()), e))?;
        totals
            .write_record([
                m.id().to_string(),
                format!("{}", a.total),
                format!("{}", d.total),
                a.degenerate_count.to_string(),
            ])
            .map_err(fail)?;
    }
    totals.flush().map_err(|e| ctx.fail(s, None, e))
}

fn run_stage(ctx: &Ctx, stage: Stage) -> StageResult<()> {
    match stage {
        Stage::Ingest => ingest(ctx),
        Stage::Sample => sample(ctx),
        Stage::Cpdist => cpdist(ctx),
        Stage::Align => align(ctx),
        Stage::Diffuse => diffuse(ctx),
        Stage::Hdm => hdm(ctx),
        Stage::Segment => segment(ctx),
        Stage::Refine => refine(ctx),
        Stage::Landmarks => landmarks(ctx),
        Stage::Ariadne => ariadne(ctx),
    }
}

/// Configuration values a stage's outputs depend on.
fn stage_params(cfg: &PipelineConfig, stage: Stage) -> serde_json::Value {
    use serde_json::json;
    match stage {
        Stage::Ingest | Stage::Align => json!(null),
        Stage::Sample => json!({ "sampling": cfg.sampling, "seed": cfg.seed }),
        Stage::Cpdist => json!(cfg.registration),
        Stage::Diffuse => json!(cfg.diffusion),
        Stage::Hdm | Stage::Refine => json!(cfg.hdm),
        Stage::Segment => json!({ "hdm": cfg.hdm, "seed": cfg.seed }),
        Stage::Landmarks => json!(cfg.landmarks),
        Stage::Ariadne => json!(cfg.curvature),
    }
}

fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn hash_tree(out: &Path, dir: &Path, into: &mut BTreeMap<String, String>) -> std::io::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            hash_tree(out, &p, into)?;
        } else {
            into.insert(rel(out, &p), sha256_file(&p)?);
        }
    }
    Ok(())
}

fn stage_key(cfg: &PipelineConfig, stage: Stage, inputs: &BTreeMap<String, String>) -> String {
    let payload = serde_json::json!({
        "stage": stage,
        "version": env!("CARGO_PKG_VERSION"),
        "params": stage_params(cfg, stage),
        "inputs": inputs,
    });
    hex::encode(Sha256::digest(payload.to_string().as_bytes()))
}

fn outputs_intact(out: &Path, record: &StageRecord) -> bool {
    record
        .outputs
        .iter()
        .all(|(p, h)| sha256_file(&out.join(p)).is_ok_and(|actual| &actual == h))
}

/// Runs the configured stages (plus their dependencies) in dependency order
/// and writes the run manifest. A stage is skipped when its inputs,
/// parameters and outputs are unchanged and none of its dependencies ran.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let stages = Stage::closure(&cfg.stages);
    let meshes = input_meshes(&cfg.input_dir)?;
    let needed = if stages.iter().any(|s| s.is_collection()) { 2 } else { 1 };
    if meshes.len() < needed {
        return Err(CliError::Config(format!(
            "{} holds {} parsable mesh files, the requested stages need at least {needed}",
            cfg.input_dir.display(),
            meshes.len()
        )));
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    let out = cfg.output_dir.clone();
    let previous = RunManifest::load(&out);
    let ctx = Ctx { cfg, out: out.clone() };
    let mut records: Vec<StageRecord> = Vec::new();
    let mut recomputed = std::collections::BTreeSet::new();
    for stage in stages {
        let started = Instant::now();
        let mut inputs = BTreeMap::new();
        if stage == Stage::Ingest {
            for f in &meshes {
                let hash = sha256_file(f).map_err(|e| ctx.fail(stage, None, e))?;
                let name = f
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                inputs.insert(format!("input/{name}"), hash);
            }
        }
        for dep in stage.dependencies() {
            let r = records
                .iter()
                .find(|r| r.stage == *dep)
                .expect("dependencies run first");
            inputs.extend(r.outputs.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        let key = stage_key(cfg, stage, &inputs);
        let reusable = previous
            .as_ref()
            .and_then(|m| m.stage(stage))
            .filter(|r| r.key == key && outputs_intact(&out, r))
            .filter(|_| !stage.dependencies().iter().any(|d| recomputed.contains(d)));
        let record = if let Some(r) = reusable {
            log::info!("{stage}: up to date");
            StageRecord {
                cached: true,
                seconds: 0.0,
                inputs,
                ..r.clone()
            }
        } else {
            log::info!("{stage}: running");
            recomputed.insert(stage);
            let dir = ctx.dir(stage);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| ctx.fail(stage, None, e))?;
            }
            std::fs::create_dir_all(&dir).map_err(|e| ctx.fail(stage, None, e))?;
            run_stage(&ctx, stage)?;
            let mut outputs = BTreeMap::new();
            hash_tree(&out, &dir, &mut outputs).map_err(|e| ctx.fail(stage, None, e))?;
            StageRecord {
                stage,
                key,
                inputs,
                outputs,
                cached: false,
                seconds: started.elapsed().as_secs_f64(),
            }
        };
        records.push(record);
        // keep the manifest current so an interrupted run still reuses finished stages
        write_manifest(&out, cfg, &records, previous.as_ref())?;
    }
    Ok(RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        stages: records,
    })
}

/// Stages not run this time keep their earlier records.
fn write_manifest(
    out: &Path,
    cfg: &PipelineConfig,
    records: &[StageRecord],
    previous: Option<&RunManifest>,
) -> Result<(), CliError> {
    let mut all: Vec<StageRecord> = records.to_vec();
    if let Some(prev) = previous {
        for r in &prev.stages {
            if !all.iter().any(|x| x.stage == r.stage) {
                all.push(r.clone());
            }
        }
    }
    all.sort_by_key(|r| r.stage);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        stages: all,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out.join(MANIFEST_NAME), text + "\n").map_err(|e| CliError::Stage {
        stage: "manifest".into(),
        specimen: None,
        message: e.to_string(),
    })
}
