//! Load/store for meshes, frames, label images, depth maps, feature maps and
//! configs. All multi-byte binary payloads are little-endian except 16-bit
//! PGM samples, which follow the Netpbm MSB-first convention.
//!
//! Loaders are pure: they either return an object satisfying its type
//! invariants or fail. Loaded objects are immutable and shareable.

mod camera;
mod config;
mod image;
mod mesh;
mod palette;

pub use camera::{load_trajectory, save_trajectory, Intrinsics, Pose, TrajectoryEntry};
pub use config::Config;
pub use image::{
    load_depth_pgm, load_feature_map, load_label_image, load_ppm, save_depth_pgm,
    save_feature_map, save_label_image, save_ppm, ColorImage, DepthImage, FeatureMap, LabelImage,
};
pub use mesh::{load_mesh, save_mesh, write_colored_mesh, TriMesh};
pub use palette::palette;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whether a semantic class is a countable instance class or amorphous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassKind {
    Thing,
    Stuff,
}

/// Class ids are dense from 1; id 0 is the UNKNOWN sentinel and never listed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassTable {
    classes: Vec<(String, ClassKind)>,
}

impl ClassTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, kind: ClassKind) -> u32 {
        self.classes.push((name.to_string(), kind));
        self.classes.len() as u32
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.classes
            .get(id.checked_sub(1)? as usize)
            .map(|(n, _)| n.as_str())
    }

    pub fn kind(&self, id: u32) -> Option<ClassKind> {
        self.classes.get(id.checked_sub(1)? as usize).map(|(_, k)| *k)
    }

    pub fn is_thing(&self, id: u32) -> bool {
        self.kind(id) == Some(ClassKind::Thing)
    }

    pub fn is_stuff(&self, id: u32) -> bool {
        self.kind(id) == Some(ClassKind::Stuff)
    }

    /// Ids of all classes, dense from 1.
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        (1..=self.classes.len() as u32).into_iter()
    }
}

/// A posed pinhole camera together with whatever per-pixel observations the
/// pipeline has for it.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u32,
    pub intrinsics: Intrinsics,
    /// Rigid world→camera transform.
    pub pose: Pose,
    pub width: u32,
    pub height: u32,
    /// Per-pixel meters, 0 = invalid.
    pub depth: Option<DepthImage>,
    pub labels: Option<LabelImage>,
    pub features: Option<FeatureMap>,
    /// Observed RGB, used as the photometric target when present.
    pub color: Option<ColorImage>,
}

impl Frame {
    pub fn new(id: u32, intrinsics: Intrinsics, pose: Pose, width: u32, height: u32) -> Result<Self> {
        if intrinsics.fx <= 0.0 || intrinsics.fy <= 0.0 {
            return Err(Error::Format(format!(
                "frame {id}: focal lengths must be positive (fx={}, fy={})",
                intrinsics.fx, intrinsics.fy
            )));
        }
        pose.check_orthonormal()?;
        Ok(Self {
            id,
            intrinsics,
            pose,
            width,
            height,
            depth: None,
            labels: None,
            features: None,
            color: None,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}
