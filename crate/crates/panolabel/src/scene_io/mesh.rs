use std::io::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use super::palette::palette;
use crate::{Error, Result};

/// Indexed triangle mesh with per-face unit normals recomputed from winding.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub face_normals: Vec<Vector3<f64>>,
}

const DEGENERATE_AREA: f64 = 1e-12;

impl TriMesh {
    /// Build from raw vertices/faces: validates indices, drops zero-area
    /// faces, and recomputes normals. Errors when nothing survives.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        let mut kept = Vec::with_capacity(faces.len());
        let mut normals = Vec::with_capacity(faces.len());
        for (fi, f) in faces.iter().enumerate() {
            for &vi in f {
                if vi >= n {
                    return Err(Error::Format(format!(
                        "face {fi} references vertex {vi} of {n}"
                    )));
                }
            }
            let a = vertices[f[0] as usize];
            let b = vertices[f[1] as usize];
            let c = vertices[f[2] as usize];
            let cross = (b - a).cross(&(c - a));
            let area2 = cross.norm();
            if area2 * 0.5 <= DEGENERATE_AREA {
                continue;
            }
            kept.push(*f);
            normals.push(cross / area2);
        }
        if kept.is_empty() {
            return Err(Error::EmptyMesh(
                "no non-degenerate faces after load".into(),
            ));
        }
        Ok(Self {
            vertices,
            faces: kept,
            face_normals: normals,
        })
    }

    pub fn face_area(&self, fi: usize) -> f64 {
        let f = self.faces[fi];
        let a = self.vertices[f[0] as usize];
        let b = self.vertices[f[1] as usize];
        let c = self.vertices[f[2] as usize];
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_centroid(&self, fi: usize) -> Point3<f64> {
        let f = self.faces[fi];
        let a = self.vertices[f[0] as usize].coords;
        let b = self.vertices[f[1] as usize].coords;
        let c = self.vertices[f[2] as usize].coords;
        Point3::from((a + b + c) / 3.0)
    }

    /// Axis-aligned bounds, (min, max).
    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "obj" => load_obj(path),
        "ply" => load_ply(path),
        other => Err(Error::Format(format!("unknown mesh extension {other:?}"))),
    }
}

fn load_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path)?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut p = [0.0f64; 3];
                for slot in &mut p {
                    *slot = toks
                        .next()
                        .ok_or_else(|| Error::Parse {
                            msg: "vertex with fewer than 3 coordinates".into(),
                            offset: at(),
                        })?
                        .parse()
                        .map_err(|e| Error::Parse {
                            msg: format!("bad coordinate: {e}"),
                            offset: at(),
                        })?;
                }
                vertices.push(Point3::new(p[0], p[1], p[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = toks
                    .map(|t| {
                        // "v", "v/vt", "v/vt/vn", "v//vn" all start with the
                        // vertex index.
                        let first = t.split('/').next().unwrap_or(t);
                        first.parse::<i64>().map_err(|e| Error::Parse {
                            msg: format!("bad face index {t:?}: {e}"),
                            offset: at(),
                        })
                    })
                    .collect::<Result<Vec<i64>>>()?
                    .into_iter()
                    .map(|i| {
                        if i < 1 {
                            Err(Error::Parse {
                                msg: format!("face index {i} not positive"),
                                offset: at(),
                            })
                        } else {
                            Ok((i - 1) as u32)
                        }
                    })
                    .collect::<Result<Vec<u32>>>()?;
                if idx.len() < 3 {
                    return Err(Error::Parse {
                        msg: "face with fewer than 3 vertices".into(),
                        offset: at(),
                    });
                }
                // fan-triangulate polygons
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {} // ignore vn/vt/usemtl/...
        }
    }
    TriMesh::new(vertices, faces)
}

/// Minimal binary little-endian PLY reader: vertex x/y/z (float32 or
/// float64) and a face list property with uchar count + int32/uint32 indices.
fn load_ply(path: &Path) -> Result<TriMesh> {
    let bytes = std::fs::read(path)?;
    let header_end = find_header_end(&bytes).ok_or_else(|| Error::Parse {
        msg: "no end_header".into(),
        offset: path.display().to_string(),
    })?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::Parse {
        msg: "non-utf8 header".into(),
        offset: path.display().to_string(),
    })?;

    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<(String, usize)> = Vec::new(); // (name, byte size)
    let mut in_element = String::new();
    let mut double_coords = false;
    let mut saw_format = false;

    for line in header.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | ["end_header"] | [] => {}
            ["comment", ..] => {}
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("unsupported PLY format {fmt}")));
                }
                saw_format = true;
            }
            ["element", "vertex", n] => {
                vertex_count = n.parse().map_err(|_| Error::Format("bad vertex count".into()))?;
                in_element = "vertex".into();
            }
            ["element", "face", n] => {
                face_count = n.parse().map_err(|_| Error::Format("bad face count".into()))?;
                in_element = "face".into();
            }
            ["element", _, _] => in_element = "other".into(),
            ["property", "list", ..] if in_element == "face" => {}
            ["property", ty, name] if in_element == "vertex" => {
                let size = scalar_size(ty).ok_or_else(|| {
                    Error::Format(format!("unsupported vertex property type {ty}"))
                })?;
                if *name == "x" && *ty == "double" {
                    double_coords = true;
                }
                vertex_props.push((name.to_string(), size));
            }
            _ => {}
        }
    }
    if !saw_format {
        return Err(Error::Format("PLY missing format line".into()));
    }

    let mut off = header_end;
    let mut vertices = Vec::with_capacity(vertex_count);
    for vi in 0..vertex_count {
        let mut xyz = [0.0f64; 3];
        for (name, size) in &vertex_props {
            let need = off + size;
            if need > bytes.len() {
                return Err(Error::Parse {
                    msg: format!("truncated vertex {vi}"),
                    offset: format!("byte {off}"),
                });
            }
            let slot = match name.as_str() {
                "x" => Some(0),
                "y" => Some(1),
                "z" => Some(2),
                _ => None,
            };
            if let Some(s) = slot {
                xyz[s] = if *size == 8 {
                    f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
                } else {
                    f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64
                };
            }
            off = need;
        }
        vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    let _ = double_coords;

    let mut faces = Vec::with_capacity(face_count);
    for fi in 0..face_count {
        if off >= bytes.len() {
            return Err(Error::Parse {
                msg: format!("truncated face {fi}"),
                offset: format!("byte {off}"),
            });
        }
        let n = bytes[off] as usize;
        off += 1;
        if off + 4 * n > bytes.len() {
            return Err(Error::Parse {
                msg: format!("truncated face {fi} index list"),
                offset: format!("byte {off}"),
            });
        }
        let mut idx = Vec::with_capacity(n);
        for k in 0..n {
            idx.push(u32::from_le_bytes(
                bytes[off + 4 * k..off + 4 * k + 4].try_into().unwrap(),
            ));
        }
        off += 4 * n;
        if n < 3 {
            return Err(Error::Parse {
                msg: format!("face {fi} has {n} vertices"),
                offset: format!("byte {off}"),
            });
        }
        for k in 1..n - 1 {
            faces.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    TriMesh::new(vertices, faces)
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
}

fn scalar_size(ty: &str) -> Option<usize> {
    match ty {
        "char" | "uchar" | "int8" | "uint8" => Some(1),
        "short" | "ushort" | "int16" | "uint16" => Some(2),
        "int" | "uint" | "int32" | "uint32" | "float" | "float32" => Some(4),
        "double" | "float64" => Some(8),
        _ => None,
    }
}

/// Binary little-endian PLY with float64 coordinates so that
/// save_mesh ∘ load_mesh is bit-exact.
pub fn save_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )?;
    for v in &mesh.vertices {
        for k in 0..3 {
            out.extend_from_slice(&v[k].to_le_bytes());
        }
    }
    for f in &mesh.faces {
        out.push(3u8);
        for &vi in f {
            out.extend_from_slice(&vi.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a PLY with one color per face from a deterministic id→RGB palette.
pub fn write_colored_mesh(path: &Path, mesh: &TriMesh, labels: &[u32]) -> Result<()> {
    if labels.len() != mesh.faces.len() {
        return Err(Error::Arity(format!(
            "{} labels for {} faces",
            labels.len(),
            mesh.faces.len()
        )));
    }
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar uint vertex_indices\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )?;
    for v in &mesh.vertices {
        for k in 0..3 {
            out.extend_from_slice(&(v[k] as f32).to_le_bytes());
        }
    }
    for (f, &lab) in mesh.faces.iter().zip(labels) {
        out.push(3u8);
        for &vi in f {
            out.extend_from_slice(&vi.to_le_bytes());
        }
        out.extend_from_slice(&palette(lab));
    }
    std::fs::write(path, out)?;
    Ok(())
}
