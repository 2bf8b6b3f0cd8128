//! CPU scanline rasterizer producing per-pixel face ids and depth with a
//! top-left fill rule, so adjacent triangles tile the screen without cracks
//! or double coverage. No back-face culling: reconstructed meshes have
//! inconsistent winding and labels must reach every visible surface.

use std::path::Path;

use nalgebra::{Point2, Point3, Vector2};

use crate::scene_io::{Frame, TriMesh};
use crate::Result;

/// Near-plane clip distance in meters.
pub const NEAR_CLIP: f64 = 1e-4;

/// Per-pixel face id (0 = background, otherwise face index + 1) and depth
/// (camera-space meters, +inf = background).
#[derive(Debug, Clone, PartialEq)]
pub struct IdBuffer {
    pub width: u32,
    pub height: u32,
    pub face_id: Vec<u32>,
    pub depth: Vec<f32>,
}

impl IdBuffer {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            face_id: vec![0; n],
            depth: vec![f32::INFINITY; n],
        }
    }

    /// Face index at a pixel, if covered.
    pub fn face_at(&self, px: usize) -> Option<u32> {
        self.face_id[px].checked_sub(1)
    }

    /// Debug dump: face ids modulo 65536 as a 16-bit PGM.
    pub fn dump_pgm(&self, path: &Path) -> Result<()> {
        use std::io::Write as _;
        let mut out = Vec::new();
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &id in &self.face_id {
            out.extend_from_slice(&((id % 65536) as u16).to_be_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Result of projecting a world point into a frame.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Pixel coordinates (u, v).
    pub pixel: Point2<f64>,
    /// Camera-space depth (z), meters.
    pub depth: f64,
    /// True when z <= 0: the point is behind the camera.
    pub behind: bool,
}

/// Pinhole projection: u = fx·x/z + cx, v = fy·y/z + cy in camera space.
pub fn project_point(frame: &Frame, p: &Point3<f64>) -> Projection {
    let c = frame.pose.world_to_camera(p);
    let behind = c.z <= 0.0;
    let z = if behind { f64::MIN_POSITIVE } else { c.z };
    Projection {
        pixel: Point2::new(
            frame.intrinsics.fx * c.x / z + frame.intrinsics.cx,
            frame.intrinsics.fy * c.y / z + frame.intrinsics.cy,
        ),
        depth: c.z,
        behind,
    }
}

fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Top-left rule for a triangle wound with positive doubled area under the
/// y-down screen convention: a "top" edge is horizontal going left, a
/// "left" edge goes down.
fn is_top_left(d: Vector2<f64>) -> bool {
    d.y > 0.0 || (d.y == 0.0 && d.x < 0.0)
}

/// Rasterize the mesh into the frame. Faces are processed in index order and
/// the z-test is strict, so depth ties keep the lowest face id; output is a
/// pure function of the inputs.
pub fn rasterize(mesh: &TriMesh, frame: &Frame) -> IdBuffer {
    let mut buf = IdBuffer::new(frame.width, frame.height);
    let fx = frame.intrinsics.fx;
    let fy = frame.intrinsics.fy;
    let cx = frame.intrinsics.cx;
    let cy = frame.intrinsics.cy;

    for (fi, face) in mesh.faces.iter().enumerate() {
        let cam: Vec<Point3<f64>> = face
            .iter()
            .map(|&vi| frame.pose.world_to_camera(&mesh.vertices[vi as usize]))
            .collect();
        let poly = clip_near(&cam, NEAR_CLIP);
        if poly.len() < 3 {
            continue;
        }
        // screen position + camera depth per clipped vertex
        let scr: Vec<(Point2<f64>, f64)> = poly
            .iter()
            .map(|p| {
                (
                    Point2::new(fx * p.x / p.z + cx, fy * p.y / p.z + cy),
                    p.z,
                )
            })
            .collect();
        for k in 1..scr.len() - 1 {
            fill_triangle(&mut buf, fi as u32 + 1, scr[0], scr[k], scr[k + 1]);
        }
    }
    buf
}

/// Sutherland–Hodgman clip of a camera-space polygon against z = near.
fn clip_near(poly: &[Point3<f64>], near: f64) -> Vec<Point3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let ain = a.z >= near;
        let bin = b.z >= near;
        if ain {
            out.push(a);
        }
        if ain != bin {
            let t = (near - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn fill_triangle(
    buf: &mut IdBuffer,
    id: u32,
    v0: (Point2<f64>, f64),
    v1: (Point2<f64>, f64),
    v2: (Point2<f64>, f64),
) {
    let (mut p0, mut z0) = v0;
    let (mut p1, mut z1) = v1;
    let (p2, z2) = v2;
    let mut area2 = cross2(p1 - p0, p2 - p0);
    if area2 == 0.0 {
        return;
    }
    if area2 < 0.0 {
        std::mem::swap(&mut p0, &mut p1);
        std::mem::swap(&mut z0, &mut z1);
        area2 = -area2;
    }

    let min_x = p0.x.min(p1.x).min(p2.x).floor().max(0.0) as i64;
    let max_x = (p0.x.max(p1.x).max(p2.x).ceil() as i64).min(buf.width as i64 - 1);
    let min_y = p0.y.min(p1.y).min(p2.y).floor().max(0.0) as i64;
    let max_y = (p0.y.max(p1.y).max(p2.y).ceil() as i64).min(buf.height as i64 - 1);
    if min_x > max_x || min_y > max_y {
        return;
    }

    let inv_z = [1.0 / z0, 1.0 / z1, 1.0 / z2];
    let edges = [(p1, p2), (p2, p0), (p0, p1)]; // edge k opposite vertex k
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut w = [0.0f64; 3];
            let mut inside = true;
            for (k, (a, b)) in edges.iter().enumerate() {
                let e = cross2(b - a, p - a);
                if e < 0.0 || (e == 0.0 && !is_top_left(b - a)) {
                    inside = false;
                    break;
                }
                w[k] = e;
            }
            if !inside {
                continue;
            }
            // perspective-correct depth: 1/z is affine in screen space
            let izi = (w[0] * inv_z[0] + w[1] * inv_z[1] + w[2] * inv_z[2]) / area2;
            if izi <= 0.0 {
                continue;
            }
            let z = (1.0 / izi) as f32;
            let px = y as usize * buf.width as usize + x as usize;
            if z < buf.depth[px] {
                buf.depth[px] = z;
                buf.face_id[px] = id;
            }
        }
    }
}

/// Pixel mask of a set of faces: true iff the pixel's face index is in the
/// set. `face_set` holds face indices (not the +1-shifted buffer ids).
pub fn region_mask(idbuf: &IdBuffer, face_set: &std::collections::BTreeSet<u32>) -> Vec<bool> {
    idbuf
        .face_id
        .iter()
        .map(|&id| id != 0 && face_set.contains(&(id - 1)))
        .collect()
}
