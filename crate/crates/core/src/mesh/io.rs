//! OFF, PLY and OBJ readers plus PLY/OFF writers.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;

use super::{Face, TriMesh};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Ply,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "off" => Some(Self::Off),
            "ply" => Some(Self::Ply),
            "obj" => Some(Self::Obj),
            _ => None,
        }
    }
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// Parses a mesh, drops faces with repeated vertex indices and orients
/// faces consistently within each orientable component.
pub fn load_mesh(bytes: &[u8], format: MeshFormat, id: &str) -> Result<TriMesh> {
    let (vertices, polygons) = match format {
        MeshFormat::Off => parse_off(bytes)?,
        MeshFormat::Ply => parse_ply(bytes)?,
        MeshFormat::Obj => parse_obj(bytes)?,
    };
    let count = vertices.len();
    let mut faces = Vec::new();
    for poly in &polygons {
        if poly.len() < 3 {
            return Err(parse_err(format!("face with {} vertices", poly.len())));
        }
        for &index in poly {
            if index >= count {
                return Err(parse_err(format!("face index {index} out of range ({count} vertices)")));
            }
        }
        // fan triangulation for polygons
        for k in 1..poly.len() - 1 {
            let face = [poly[0], poly[k], poly[k + 1]];
            if face[0] != face[1] && face[1] != face[2] && face[0] != face[2] {
                faces.push(face);
            }
        }
    }
    if faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    orient_faces(&mut faces);
    TriMesh::new(id, vertices, faces)
}

pub fn load_mesh_file(path: &Path) -> Result<TriMesh> {
    let format =
        MeshFormat::from_path(path).ok_or_else(|| parse_err(format!("unknown mesh extension: {}", path.display())))?;
    let bytes = std::fs::read(path)?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh");
    load_mesh(&bytes, format, id)
}

/// Flips faces so that every interior manifold edge is traversed in opposite
/// directions by its two faces, where the component is orientable.
fn orient_faces(faces: &mut [Face]) {
    let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (f, face) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (face[k], face[(k + 1) % 3]);
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(f);
        }
    }
    let directed = |face: &Face, a: usize, b: usize| (0..3).any(|k| face[k] == a && face[(k + 1) % 3] == b);
    let mut visited = vec![false; faces.len()];
    let mut queue = VecDeque::new();
    for start in 0..faces.len() {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(f) = queue.pop_front() {
            let face = faces[f];
            for k in 0..3 {
                let (a, b) = (face[k], face[(k + 1) % 3]);
                let Some(nbrs) = edge_faces.get(&(a.min(b), a.max(b))) else {
                    continue;
                };
                if nbrs.len() != 2 {
                    continue;
                }
                let g = if nbrs[0] == f { nbrs[1] } else { nbrs[0] };
                if visited[g] {
                    continue;
                }
                if directed(&faces[g], a, b) {
                    faces[g].swap(1, 2);
                }
                visited[g] = true;
                queue.push_back(g);
            }
        }
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| parse_err(format!("missing {what}")))?
        .parse()
        .map_err(|_| parse_err(format!("invalid {what}")))
}

type Parsed = (Vec<Point3<f64>>, Vec<Vec<usize>>);

fn parse_off(bytes: &[u8]) -> Result<Parsed> {
    let text = std::str::from_utf8(bytes).map_err(|_| parse_err("OFF file is not UTF-8"))?;
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());
    let first = lines.next().ok_or_else(|| parse_err("empty OFF file"))?;
    let mut header = first.split_whitespace();
    if header.next() != Some("OFF") {
        return Err(parse_err("missing OFF header"));
    }
    let mut counts: Vec<&str> = header.collect();
    if counts.is_empty() {
        counts = lines
            .next()
            .ok_or_else(|| parse_err("missing OFF counts"))?
            .split_whitespace()
            .collect();
    }
    let mut counts = counts.into_iter();
    let nv: usize = parse_num(counts.next(), "vertex count")?;
    let nf: usize = parse_num(counts.next(), "face count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut tok = lines
            .next()
            .ok_or_else(|| parse_err("missing vertex line"))?
            .split_whitespace();
        let x = parse_num(tok.next(), "vertex coordinate")?;
        let y = parse_num(tok.next(), "vertex coordinate")?;
        let z = parse_num(tok.next(), "vertex coordinate")?;
        vertices.push(Point3::new(x, y, z));
    }
    // trailing tokens on a face line (colors) are ignored
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let mut tok = lines
            .next()
            .ok_or_else(|| parse_err("missing face line"))?
            .split_whitespace();
        let n: usize = parse_num(tok.next(), "face arity")?;
        let poly = (0..n)
            .map(|_| parse_num(tok.next(), "face index"))
            .collect::<Result<Vec<usize>>>()?;
        faces.push(poly);
    }
    Ok((vertices, faces))
}

fn parse_obj(bytes: &[u8]) -> Result<Parsed> {
    let text = std::str::from_utf8(bytes).map_err(|_| parse_err("OBJ file is not UTF-8"))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let x = parse_num(tok.next(), "vertex coordinate")?;
                let y = parse_num(tok.next(), "vertex coordinate")?;
                let z = parse_num(tok.next(), "vertex coordinate")?;
                vertices.push(Point3::new(x, y, z));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for t in tok {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| parse_err(format!("line {}: bad face index", lineno + 1)))?;
                    let index = if i > 0 {
                        (i - 1) as usize
                    } else if i < 0 && (-i as usize) <= vertices.len() {
                        vertices.len() - (-i) as usize
                    } else {
                        return Err(parse_err(format!("line {}: bad face index {i}", lineno + 1)));
                    };
                    poly.push(index);
                }
                faces.push(poly);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => return Err(parse_err(format!("unknown PLY type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar {
        name: String,
        ty: PlyType,
    },
    List {
        name: String,
        count: PlyType,
        item: PlyType,
    },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

fn parse_ply(bytes: &[u8]) -> Result<Parsed> {
    // header is ASCII and ends at "end_header\n"
    let marker = b"end_header";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| parse_err("PLY header not terminated"))?;
    let mut body_start = end + marker.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| parse_err("bad PLY header"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(parse_err("missing ply magic"));
    }
    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                binary = Some(match tok.next() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    Some(other) => return Err(parse_err(format!("unsupported PLY format {other}"))),
                    None => return Err(parse_err("missing PLY format")),
                });
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err("element without name"))?;
                let count = parse_num(tok.next(), "element count")?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err("property before element"))?;
                let ty = tok.next().ok_or_else(|| parse_err("property without type"))?;
                let prop = if ty == "list" {
                    let count = PlyType::parse(tok.next().unwrap_or(""))?;
                    let item = PlyType::parse(tok.next().unwrap_or(""))?;
                    let name = tok.next().ok_or_else(|| parse_err("list without name"))?;
                    PlyProperty::List {
                        name: name.to_string(),
                        count,
                        item,
                    }
                } else {
                    let name = tok.next().ok_or_else(|| parse_err("property without name"))?;
                    PlyProperty::Scalar {
                        name: name.to_string(),
                        ty: PlyType::parse(ty)?,
                    }
                };
                el.props.push(prop);
            }
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| parse_err("missing PLY format line"))?;

    for el in &elements {
        if el.name != "vertex" && el.name != "face" {
            log::warn!("ignoring PLY element '{}'", el.name);
        }
        for p in &el.props {
            let name = match p {
                PlyProperty::Scalar { name, .. } | PlyProperty::List { name, .. } => name,
            };
            let known = matches!(
                (el.name.as_str(), name.as_str()),
                ("vertex", "x" | "y" | "z") | ("face", "vertex_indices" | "vertex_index")
            );
            if !known && (el.name == "vertex" || el.name == "face") {
                log::warn!("ignoring PLY property '{}.{}'", el.name, name);
            }
        }
    }

    let mut reader: Box<dyn PlyValues> = if binary {
        Box::new(BinaryValues {
            bytes: &bytes[body_start..],
            pos: 0,
        })
    } else {
        let text = std::str::from_utf8(&bytes[body_start..]).map_err(|_| parse_err("PLY body is not UTF-8"))?;
        Box::new(AsciiValues {
            tokens: text.split_whitespace(),
        })
    };

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0; 3];
            let mut poly = Vec::new();
            for p in &el.props {
                match p {
                    PlyProperty::Scalar { name, ty } => {
                        let v = reader.next(*ty)?;
                        if el.name == "vertex" {
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                    }
                    PlyProperty::List { name, count, item } => {
                        let n = reader.next(*count)?;
                        if !(n >= 0.0) {
                            return Err(parse_err("negative list length"));
                        }
                        let keep = el.name == "face" && (name == "vertex_indices" || name == "vertex_index");
                        for _ in 0..n as usize {
                            let v = reader.next(*item)?;
                            if keep {
                                if v < 0.0 || v.fract() != 0.0 {
                                    return Err(parse_err(format!("bad face index {v}")));
                                }
                                poly.push(v as usize);
                            }
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => vertices.push(Point3::new(xyz[0], xyz[1], xyz[2])),
                "face" => faces.push(poly),
                _ => {}
            }
        }
    }
    Ok((vertices, faces))
}

trait PlyValues {
    fn next(&mut self, ty: PlyType) -> Result<f64>;
}

struct AsciiValues<'a> {
    tokens: std::str::SplitWhitespace<'a>,
}

impl PlyValues for AsciiValues<'_> {
    fn next(&mut self, _ty: PlyType) -> Result<f64> {
        parse_num(self.tokens.next(), "PLY value")
    }
}

struct BinaryValues<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PlyValues for BinaryValues<'_> {
    fn next(&mut self, ty: PlyType) -> Result<f64> {
        let n = ty.size();
        let chunk = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| parse_err("PLY body truncated"))?;
        self.pos += n;
        Ok(ty.read_le(chunk))
    }
}

/// Optional per-vertex payloads written alongside positions.
#[derive(Debug, Clone, Default)]
pub struct VertexProperties<'a> {
    pub segment: Option<&'a [u32]>,
    pub aria_dne: Option<&'a [f64]>,
}

/// Writes an ASCII PLY with double-precision positions. Values are printed
/// with shortest round-trip formatting, so reading the file back reproduces
/// every coordinate bit for bit.
pub fn write_ply<W: Write>(m: &TriMesh, props: &VertexProperties<'_>, out: &mut W) -> Result<()> {
    let nv = m.vertex_count();
    for (name, len) in [
        ("segment", props.segment.map(<[u32]>::len)),
        ("aria_dne", props.aria_dne.map(<[f64]>::len)),
    ] {
        if let Some(len) = len {
            if len != nv {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has {len} values for {nv} vertices"
                )));
            }
        }
    }
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "comment id {}", m.id())?;
    writeln!(out, "element vertex {nv}")?;
    writeln!(out, "property double x")?;
    writeln!(out, "property double y")?;
    writeln!(out, "property double z")?;
    if props.segment.is_some() {
        writeln!(out, "property int segment")?;
    }
    if props.aria_dne.is_some() {
        writeln!(out, "property double aria_dne")?;
    }
    writeln!(out, "element face {}", m.face_count())?;
    writeln!(out, "property list uchar int vertex_indices")?;
    writeln!(out, "end_header")?;
    for (i, v) in m.vertices().iter().enumerate() {
        write!(out, "{:?} {:?} {:?}", v.x, v.y, v.z)?;
        if let Some(s) = props.segment {
            write!(out, " {}", s[i])?;
        }
        if let Some(e) = props.aria_dne {
            write!(out, " {:?}", e[i])?;
        }
        writeln!(out)?;
    }
    for f in m.faces() {
        writeln!(out, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

pub fn write_off<W: Write>(m: &TriMesh, out: &mut W) -> Result<()> {
    writeln!(out, "OFF")?;
    writeln!(out, "{} {} 0", m.vertex_count(), m.face_count())?;
    for v in m.vertices() {
        writeln!(out, "{:?} {:?} {:?}", v.x, v.y, v.z)?;
    }
    for f in m.faces() {
        writeln!(out, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}
