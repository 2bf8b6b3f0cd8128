use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Rigid world→camera transform: p_cam = R p_world + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn check_orthonormal(&self) -> Result<()> {
        let err = (self.rot * self.rot.transpose() - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::Format(format!(
                "pose rotation not orthonormal (deviation {err:.2e})"
            )));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rot * p.coords + self.trans)
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rot.transpose() * (p.coords - self.trans))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rot.transpose() * self.trans))
    }

    /// Rotate a camera-space direction into world space.
    pub fn dir_to_world(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rot.transpose() * d
    }

    /// p_cam = R_world·p + t composed from a camera that sits at `eye`
    /// looking at `target` with `up` roughly up.
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize(); // camera +z
        let right = forward.cross(&up).normalize(); // camera +x
        let down = forward.cross(&right); // camera +y (image rows grow down)
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let trans = -(rot * eye.coords);
        Self { rot, trans }
    }
}

/// One trajectory record: which frame it is, its intrinsics and pose.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryEntry {
    pub frame_id: u32,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

/// Plain text, one frame per line:
/// `frame_id fx fy cx cy` then 12 floats of the 3x4 world→camera matrix,
/// row-major.
pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 17 {
            return Err(Error::Parse {
                msg: format!("expected 17 fields, got {}", toks.len()),
                offset: format!("{}:{}", path.display(), lineno + 1),
            });
        }
        let fid: u32 = toks[0].parse().map_err(|e| Error::Parse {
            msg: format!("bad frame id: {e}"),
            offset: format!("{}:{}", path.display(), lineno + 1),
        })?;
        let mut vals = [0.0f64; 16];
        for (i, t) in toks[1..].iter().enumerate() {
            vals[i] = t.parse().map_err(|e| Error::Parse {
                msg: format!("bad float {t:?}: {e}"),
                offset: format!("{}:{}", path.display(), lineno + 1),
            })?;
        }
        let intrinsics = Intrinsics {
            fx: vals[0],
            fy: vals[1],
            cx: vals[2],
            cy: vals[3],
        };
        let m = &vals[4..16];
        let rot = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let trans = Vector3::new(m[3], m[7], m[11]);
        let pose = Pose { rot, trans };
        if intrinsics.fx <= 0.0 || intrinsics.fy <= 0.0 {
            return Err(Error::Format(format!(
                "frame {fid}: non-positive focal length"
            )));
        }
        pose.check_orthonormal()?;
        out.push(TrajectoryEntry {
            frame_id: fid,
            intrinsics,
            pose,
        });
    }
    Ok(out)
}

pub fn save_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        let i = e.intrinsics;
        let r = e.pose.rot;
        let t = e.pose.trans;
        writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            e.frame_id,
            i.fx,
            i.fy,
            i.cx,
            i.cy,
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        )
        .unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}
