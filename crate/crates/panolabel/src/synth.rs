//! Procedural ground-truth scenes: an axis-aligned room (stuff) plus boxes,
//! spheres and cylinders (things), a seeded orbit trajectory, exact rendered
//! frames, class-clustered synthetic features, and the corruption models
//! the association pipeline is tested against. The generator publishes the
//! full ground truth so every stage has an exact oracle.

use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rasterizer::rasterize;
use crate::scene_io::{
    palette, ClassKind, ClassTable, ColorImage, DepthImage, FeatureMap, Frame, Intrinsics,
    LabelImage, Pose, TriMesh,
};
use crate::{Error, Result, UNKNOWN, UNLABELED};

pub const FEATURE_DIM: u32 = 96;
pub const FEATURE_NOISE_SIGMA: f32 = 0.05;

/// Scene generation parameters.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Room extents (width, length, height), meters.
    pub room: (f64, f64, f64),
    pub n_things: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: (4.0, 4.0, 2.5),
            n_things: 8,
            seed: 0,
        }
    }
}

/// A generated scene: mesh, per-face ground-truth instance, classes and the
/// camera trajectory.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub mesh: TriMesh,
    /// GT instance id per face (stuff regions are instances too).
    pub face_instance: Vec<u32>,
    /// instance id → class id.
    pub instance_class: BTreeMap<u32, u32>,
    pub classes: ClassTable,
    pub trajectory: Vec<(Intrinsics, Pose)>,
    pub seed: u64,
}

impl SynthScene {
    /// GT thing-instance ids, ascending.
    pub fn thing_instances(&self) -> Vec<u32> {
        self.instance_class
            .iter()
            .filter(|(_, &c)| self.classes.is_thing(c))
            .map(|(&i, _)| i)
            .collect()
    }
}

struct MeshBuilder {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[u32; 3]>,
    face_instance: Vec<u32>,
}

impl MeshBuilder {
    fn new() -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
            face_instance: Vec::new(),
        }
    }

    fn push_tri(&mut self, a: Point3<f64>, b: Point3<f64>, c: Point3<f64>, inst: u32) {
        let base = self.vertices.len() as u32;
        self.vertices.extend([a, b, c]);
        self.faces.push([base, base + 1, base + 2]);
        self.face_instance.push(inst);
    }

    /// Tessellated quad: corner o, spanned by u and v, nu×nv cells.
    fn push_grid(
        &mut self,
        o: Point3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        nu: usize,
        nv: usize,
        inst: u32,
    ) {
        for i in 0..nu {
            for j in 0..nv {
                let p00 = o + u * (i as f64 / nu as f64) + v * (j as f64 / nv as f64);
                let p10 = o + u * ((i + 1) as f64 / nu as f64) + v * (j as f64 / nv as f64);
                let p11 = o + u * ((i + 1) as f64 / nu as f64) + v * ((j + 1) as f64 / nv as f64);
                let p01 = o + u * (i as f64 / nu as f64) + v * ((j + 1) as f64 / nv as f64);
                self.push_tri(p00, p10, p11, inst);
                self.push_tri(p00, p11, p01, inst);
            }
        }
    }

    fn push_box(&mut self, lo: Point3<f64>, hi: Point3<f64>, inst: u32) {
        let d = hi - lo;
        let (dx, dy, dz) = (
            Vector3::new(d.x, 0.0, 0.0),
            Vector3::new(0.0, d.y, 0.0),
            Vector3::new(0.0, 0.0, d.z),
        );
        let n = 2;
        self.push_grid(lo, dx, dy, n, n, inst); // bottom
        self.push_grid(lo + dz, dx, dy, n, n, inst); // top
        self.push_grid(lo, dx, dz, n, n, inst); // front
        self.push_grid(lo + dy, dx, dz, n, n, inst); // back
        self.push_grid(lo, dy, dz, n, n, inst); // left
        self.push_grid(lo + dx, dy, dz, n, n, inst); // right
    }

    fn push_icosphere(&mut self, center: Point3<f64>, r: f64, inst: u32) {
        let t = (1.0 + 5.0f64.sqrt()) / 2.0;
        let raw = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let base: Vec<Vector3<f64>> = raw
            .iter()
            .map(|v| Vector3::new(v[0], v[1], v[2]).normalize())
            .collect();
        let faces: [[usize; 3]; 20] = [
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        // one subdivision level → 80 faces
        for f in faces {
            let (a, b, c) = (base[f[0]], base[f[1]], base[f[2]]);
            let ab = (a + b).normalize();
            let bc = (b + c).normalize();
            let ca = (c + a).normalize();
            for tri in [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]] {
                self.push_tri(
                    center + tri[0] * r,
                    center + tri[1] * r,
                    center + tri[2] * r,
                    inst,
                );
            }
        }
    }

    fn push_cylinder(&mut self, center: Point3<f64>, r: f64, h: f64, inst: u32) {
        let n = 16;
        let bottom = center;
        let top = center + Vector3::new(0.0, 0.0, h);
        for k in 0..n {
            let a0 = std::f64::consts::TAU * k as f64 / n as f64;
            let a1 = std::f64::consts::TAU * (k + 1) as f64 / n as f64;
            let d0 = Vector3::new(a0.cos() * r, a0.sin() * r, 0.0);
            let d1 = Vector3::new(a1.cos() * r, a1.sin() * r, 0.0);
            // side
            self.push_tri(bottom + d0, bottom + d1, top + d1, inst);
            self.push_tri(bottom + d0, top + d1, top + d0, inst);
            // caps
            self.push_tri(bottom, bottom + d1, bottom + d0, inst);
            self.push_tri(top, top + d0, top + d1, inst);
        }
    }
}

/// Deterministic room + things. Instance 1 is the floor, 2 the walls; thing
/// instances follow from 3.
pub fn generate_scene(spec: &SceneSpec) -> Result<SynthScene> {
    if spec.n_things < 1 {
        return Err(Error::Config("n_things must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, l, h) = spec.room;

    let mut classes = ClassTable::new();
    let floor_class = classes.push("floor", ClassKind::Stuff); // 1
    let wall_class = classes.push("wall", ClassKind::Stuff); // 2
    let box_class = classes.push("box", ClassKind::Thing); // 3
    let sphere_class = classes.push("sphere", ClassKind::Thing); // 4
    let cylinder_class = classes.push("cylinder", ClassKind::Thing); // 5

    let mut b = MeshBuilder::new();
    let mut instance_class = BTreeMap::new();

    const FLOOR_INST: u32 = 1;
    const WALL_INST: u32 = 2;
    instance_class.insert(FLOOR_INST, floor_class);
    instance_class.insert(WALL_INST, wall_class);

    let o = Point3::origin();
    let (ux, uy, uz) = (
        Vector3::new(w, 0.0, 0.0),
        Vector3::new(0.0, l, 0.0),
        Vector3::new(0.0, 0.0, h),
    );
    b.push_grid(o, ux, uy, 6, 6, FLOOR_INST);
    b.push_grid(o, ux, uz, 6, 3, WALL_INST); // y = 0
    b.push_grid(o + uy, ux, uz, 6, 3, WALL_INST); // y = l
    b.push_grid(o, uy, uz, 6, 3, WALL_INST); // x = 0
    b.push_grid(o + ux, uy, uz, 6, 3, WALL_INST); // x = w

    // non-overlapping placement by AABB rejection
    let mut placed: Vec<(Point3<f64>, Point3<f64>)> = Vec::new();
    let margin = 0.08;
    for k in 0..spec.n_things {
        let inst = 3 + k as u32;
        let shape = rng.gen_range(0..3u32);
        let mut ok = false;
        for _attempt in 0..1000 {
            let (ext, class) = match shape {
                0 => {
                    let e = Vector3::new(
                        rng.gen_range(0.3..0.6),
                        rng.gen_range(0.3..0.6),
                        rng.gen_range(0.3..0.7),
                    );
                    (e, box_class)
                }
                1 => {
                    let r = rng.gen_range(0.18..0.3);
                    (Vector3::new(2.0 * r, 2.0 * r, 2.0 * r), sphere_class)
                }
                _ => {
                    let r = rng.gen_range(0.15..0.25);
                    let hh = rng.gen_range(0.3..0.7);
                    (Vector3::new(2.0 * r, 2.0 * r, hh), cylinder_class)
                }
            };
            let x = rng.gen_range(0.5..w - 0.5 - ext.x);
            let y = rng.gen_range(0.5..l - 0.5 - ext.y);
            let lo = Point3::new(x, y, 0.0);
            let hi = Point3::new(x + ext.x, y + ext.y, ext.z);
            let clash = placed.iter().any(|(plo, phi)| {
                lo.x - margin < phi.x
                    && hi.x + margin > plo.x
                    && lo.y - margin < phi.y
                    && hi.y + margin > plo.y
            });
            if clash {
                continue;
            }
            placed.push((lo, hi));
            match shape {
                0 => b.push_box(lo, hi, inst),
                1 => {
                    let r = ext.x / 2.0;
                    b.push_icosphere(Point3::new(lo.x + r, lo.y + r, r), r, inst)
                }
                _ => {
                    let r = ext.x / 2.0;
                    b.push_cylinder(Point3::new(lo.x + r, lo.y + r, 0.0), r, ext.z, inst)
                }
            }
            instance_class.insert(inst, class);
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Data(format!(
                "could not place object {k} without overlap after 1000 attempts"
            )));
        }
    }

    let mesh = TriMesh::new(b.vertices, b.faces.clone())?;
    // TriMesh::new drops degenerate faces; our builder emits none, so the
    // instance map stays aligned
    assert_eq!(mesh.faces.len(), b.face_instance.len());

    Ok(SynthScene {
        mesh,
        face_instance: b.face_instance,
        instance_class,
        classes,
        trajectory: Vec::new(),
        seed: spec.seed,
    })
}

/// Circular orbit inside the room with seeded lookat jitter. Populates
/// `scene.trajectory`.
pub fn make_trajectory(scene: &mut SynthScene, n_frames: usize, width: u32, height: u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x7261_6a65);
    let (lo, hi) = scene.mesh.bounds();
    let center = Point3::from((lo.coords + hi.coords) * 0.5);
    let radius = 0.42 * (hi.x - lo.x).min(hi.y - lo.y);
    let eye_z = lo.z + 0.72 * (hi.z - lo.z);
    let intr = Intrinsics {
        fx: 0.8 * width as f64,
        fy: 0.8 * width as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    };
    let mut traj = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let angle = std::f64::consts::TAU * k as f64 / n_frames as f64;
        let eye = Point3::new(
            center.x + radius * angle.cos(),
            center.y + radius * angle.sin(),
            eye_z,
        );
        let target = Point3::new(
            center.x + rng.gen_range(-0.15..0.15),
            center.y + rng.gen_range(-0.15..0.15),
            lo.z + 0.22 * (hi.z - lo.z) + rng.gen_range(-0.05..0.05),
        );
        traj.push((intr, Pose::look_at(eye, target, Vector3::z())));
    }
    scene.trajectory = traj;
}

/// Exact rendered observations: z-buffer depth, instance/class labels with
/// score 1, per-instance flat color, and optional class-clustered features.
pub fn render_gt_frames(
    scene: &SynthScene,
    width: u32,
    height: u32,
    with_features: bool,
) -> Vec<Frame> {
    let class_embeds = class_embeddings(scene.seed, scene.classes.len() as u32 + 1);
    let mut frames = Vec::with_capacity(scene.trajectory.len());
    for (fid, (intr, pose)) in scene.trajectory.iter().enumerate() {
        let mut frame = Frame::new(fid as u32, *intr, *pose, width, height).unwrap();
        let buf = rasterize(&scene.mesh, &frame);
        let n = frame.pixel_count();
        let mut depth = vec![0.0f32; n];
        let mut labels = LabelImage::empty(width, height);
        let mut score = vec![0.0f32; n];
        let mut color = vec![0u8; 3 * n];
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(scene.seed ^ 0xfea7 ^ ((fid as u64) << 20));
        let mut feat = if with_features {
            vec![0.0f32; n * FEATURE_DIM as usize]
        } else {
            Vec::new()
        };
        for px in 0..n {
            let Some(face) = buf.face_at(px) else {
                if with_features {
                    for d in 0..FEATURE_DIM as usize {
                        feat[px * FEATURE_DIM as usize + d] =
                            FEATURE_NOISE_SIGMA * gauss(&mut noise_rng);
                    }
                }
                continue;
            };
            depth[px] = buf.depth[px];
            let inst = scene.face_instance[face as usize];
            let class = scene.instance_class[&inst];
            labels.class_id[px] = class;
            labels.instance_id[px] = if scene.classes.is_thing(class) {
                inst
            } else {
                UNLABELED
            };
            score[px] = 1.0;
            let c = palette(inst);
            color[3 * px..3 * px + 3].copy_from_slice(&c);
            if with_features {
                let e = &class_embeds[class as usize];
                for d in 0..FEATURE_DIM as usize {
                    feat[px * FEATURE_DIM as usize + d] =
                        e[d] + FEATURE_NOISE_SIGMA * gauss(&mut noise_rng);
                }
            }
        }
        labels.score = Some(score);
        frame.depth = Some(DepthImage {
            width,
            height,
            data: depth,
        });
        frame.labels = Some(labels);
        frame.color = Some(ColorImage {
            width,
            height,
            data: color,
        });
        if with_features {
            frame.features = Some(FeatureMap {
                width,
                height,
                dim: FEATURE_DIM,
                data: feat,
            });
        }
        frames.push(frame);
    }
    frames
}

/// Fixed per-class embeddings; index 0 is the background/unknown embedding
/// (zeros).
pub fn class_embeddings(seed: u64, count: u32) -> Vec<Vec<f32>> {
    let mut out = vec![vec![0.0f32; FEATURE_DIM as usize]];
    for class in 1..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe3bed ^ ((class as u64) << 32));
        let mut v: Vec<f32> = (0..FEATURE_DIM).map(|_| gauss(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        out.push(v);
    }
    out
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Per-frame corruption model of real open-vocabulary labeling failures.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Per-frame probability a thing mask is dropped entirely.
    pub p_drop: f64,
    /// Per-frame probability a thing mask's class flips to another thing class.
    pub p_flip: f64,
    /// Randomly permute surviving 2D ids per frame.
    pub permute_ids: bool,
    /// Chebyshev erosion radius applied to each thing mask.
    pub erode_px: u32,
    /// Probability a class is omitted frame-wide.
    pub p_partial: f64,
}

/// What corruption actually did to one frame, for oracle checks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorruptionRecord {
    /// GT thing id → per-frame 2D id of surviving masks.
    pub permutation: BTreeMap<u32, u32>,
    pub dropped: Vec<u32>,
    /// GT thing id → flipped class.
    pub flipped: BTreeMap<u32, u32>,
    pub omitted_classes: Vec<u32>,
}

/// Apply the corruption model to a frame's GT labels, seeded per frame.
pub fn corrupt_frame(
    labels: &LabelImage,
    classes: &ClassTable,
    spec: &CorruptionSpec,
    seed: u64,
    frame_id: u32,
) -> (LabelImage, CorruptionRecord) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc044 ^ ((frame_id as u64) << 24));
    let mut out = labels.clone();
    let mut rec = CorruptionRecord::default();

    // frame-wide class omission
    let mut omitted = Vec::new();
    for class in classes.ids() {
        if spec.p_partial > 0.0 && rng.gen_bool(spec.p_partial) {
            omitted.push(class);
        }
    }
    if !omitted.is_empty() {
        for px in 0..out.len() {
            if omitted.contains(&out.class_id[px]) {
                out.class_id[px] = UNKNOWN;
                out.instance_id[px] = UNLABELED;
                if let Some(s) = out.score.as_mut() {
                    s[px] = 0.0;
                }
            }
        }
    }
    rec.omitted_classes = omitted;

    // per-mask drop and class flip
    let present: Vec<u32> = out.instance_masks().keys().copied().collect();
    let thing_classes: Vec<u32> = classes.ids().filter(|&c| classes.is_thing(c)).collect();
    let mut survivors = Vec::new();
    for id in present {
        if spec.p_drop > 0.0 && rng.gen_bool(spec.p_drop) {
            rec.dropped.push(id);
            for px in 0..out.len() {
                if out.instance_id[px] == id {
                    out.instance_id[px] = UNLABELED;
                    out.class_id[px] = UNKNOWN;
                    if let Some(s) = out.score.as_mut() {
                        s[px] = 0.0;
                    }
                }
            }
            continue;
        }
        if spec.p_flip > 0.0 && thing_classes.len() > 1 && rng.gen_bool(spec.p_flip) {
            let cur = out.instance_class(id);
            let others: Vec<u32> = thing_classes.iter().copied().filter(|&c| c != cur).collect();
            let new_class = others[rng.gen_range(0..others.len())];
            rec.flipped.insert(id, new_class);
            for px in 0..out.len() {
                if out.instance_id[px] == id {
                    out.class_id[px] = new_class;
                }
            }
        }
        survivors.push(id);
    }

    // mask erosion
    if spec.erode_px > 0 {
        let r = spec.erode_px as i64;
        let w = out.width as i64;
        let h = out.height as i64;
        let src = out.instance_id.clone();
        for y in 0..h {
            for x in 0..w {
                let px = (y * w + x) as usize;
                let id = src[px];
                if id == UNLABELED {
                    continue;
                }
                let mut keep = true;
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            keep = false;
                            break 'scan;
                        }
                        if src[(ny * w + nx) as usize] != id {
                            keep = false;
                            break 'scan;
                        }
                    }
                }
                if !keep {
                    out.instance_id[px] = UNLABELED;
                    out.class_id[px] = UNKNOWN;
                    if let Some(s) = out.score.as_mut() {
                        s[px] = 0.0;
                    }
                }
            }
        }
        // erosion can remove a mask entirely
        let still: std::collections::BTreeSet<u32> =
            out.instance_masks().keys().copied().collect();
        survivors.retain(|id| still.contains(id));
    }

    // per-frame id permutation
    let mut mapping: BTreeMap<u32, u32> = BTreeMap::new();
    if spec.permute_ids && !survivors.is_empty() {
        let mut new_ids: Vec<u32> = (1..=survivors.len() as u32).collect();
        for i in (1..new_ids.len()).rev() {
            new_ids.swap(i, rng.gen_range(0..=i));
        }
        for (gt, new) in survivors.iter().zip(new_ids) {
            mapping.insert(*gt, new);
        }
        for px in 0..out.len() {
            let id = out.instance_id[px];
            if id != UNLABELED {
                out.instance_id[px] = mapping[&id];
            }
        }
    } else {
        for id in &survivors {
            mapping.insert(*id, *id);
        }
    }
    rec.permutation = mapping;
    (out, rec)
}

/// The published ground truth for a rendered + corrupted scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    /// instance id → class id.
    pub instance_class: BTreeMap<u32, u32>,
    pub classes: ClassTable,
    /// frame id → corruption record.
    pub frames: BTreeMap<u32, CorruptionRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene(n_things: usize, seed: u64) -> SynthScene {
        let mut scene = generate_scene(&SceneSpec {
            room: (4.0, 4.0, 2.5),
            n_things,
            seed,
        })
        .unwrap();
        make_trajectory(&mut scene, 12, 96, 72);
        scene
    }

    #[test]
    fn one_thing_two_stuff_regions() {
        let scene = tiny_scene(1, 3);
        let stuff: Vec<u32> = scene
            .instance_class
            .iter()
            .filter(|(_, &c)| scene.classes.is_stuff(c))
            .map(|(&i, _)| i)
            .collect();
        assert_eq!(stuff, vec![1, 2]);
        assert_eq!(scene.thing_instances().len(), 1);
    }

    #[test]
    fn same_seed_identical_scene() {
        let a = tiny_scene(4, 9);
        let b = tiny_scene(4, 9);
        assert_eq!(a.mesh, b.mesh);
        assert_eq!(a.face_instance, b.face_instance);
        for ((ia, pa), (ib, pb)) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(ia, ib);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn eight_things_disjoint_aabbs() {
        let scene = tiny_scene(8, 1);
        let things = scene.thing_instances();
        assert_eq!(things.len(), 8);
        // brute-force AABB per thing from its faces
        let mut boxes = Vec::new();
        for &inst in &things {
            let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
            let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (fi, &fin) in scene.face_instance.iter().enumerate() {
                if fin != inst {
                    continue;
                }
                for &vi in &scene.mesh.faces[fi] {
                    let v = scene.mesh.vertices[vi as usize];
                    for k in 0..3 {
                        lo[k] = lo[k].min(v[k]);
                        hi[k] = hi[k].max(v[k]);
                    }
                }
            }
            boxes.push((lo, hi));
        }
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                let (alo, ahi) = boxes[i];
                let (blo, bhi) = boxes[j];
                let overlap = alo.x < bhi.x
                    && ahi.x > blo.x
                    && alo.y < bhi.y
                    && ahi.y > blo.y
                    && alo.z < bhi.z
                    && ahi.z > blo.z;
                assert!(!overlap, "things {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn label_boundaries_follow_idbuffer() {
        let scene = tiny_scene(3, 5);
        let frames = render_gt_frames(&scene, 96, 72, false);
        let f = &frames[0];
        let buf = rasterize(&scene.mesh, f);
        let labels = f.labels.as_ref().unwrap();
        for px in 0..f.pixel_count() {
            match buf.face_at(px) {
                None => {
                    assert_eq!(labels.instance_id[px], UNLABELED);
                    assert_eq!(labels.class_id[px], UNKNOWN);
                }
                Some(face) => {
                    let inst = scene.face_instance[face as usize];
                    let class = scene.instance_class[&inst];
                    assert_eq!(labels.class_id[px], class);
                    if scene.classes.is_thing(class) {
                        assert_eq!(labels.instance_id[px], inst);
                    }
                }
            }
        }
    }

    #[test]
    fn depth_matches_analytic_plane_distance() {
        // camera at room center looking straight at the x=0 wall
        let scene = tiny_scene(1, 2);
        let eye = Point3::new(2.0, 2.0, 1.2);
        let pose = Pose::look_at(eye, Point3::new(0.0, 2.0, 1.2), Vector3::z());
        let intr = Intrinsics {
            fx: 80.0,
            fy: 80.0,
            cx: 48.0,
            cy: 36.0,
        };
        let mut frame = Frame::new(0, intr, pose, 96, 72).unwrap();
        let buf = rasterize(&scene.mesh, &frame);
        frame.depth = None;
        // central pixel ray hits the wall orthogonally: depth = 2.0
        let px = 36 * 96 + 48;
        assert!(
            (buf.depth[px] as f64 - 2.0).abs() < 1e-5,
            "depth {}",
            buf.depth[px]
        );
    }

    #[test]
    fn features_cluster_by_class() {
        let scene = tiny_scene(2, 4);
        let frames = render_gt_frames(&scene, 64, 48, true);
        let f = &frames[0];
        let labels = f.labels.as_ref().unwrap();
        let feats = f.features.as_ref().unwrap();
        let mut per_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for px in 0..f.pixel_count() {
            if labels.class_id[px] != UNKNOWN {
                per_class.entry(labels.class_id[px]).or_default().push(px);
            }
        }
        for (_, pxs) in per_class {
            if pxs.len() < 2 {
                continue;
            }
            let a = feats.pixel(pxs[0]);
            let b = feats.pixel(pxs[pxs.len() / 2]);
            let d: f32 = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f32>()
                .sqrt();
            // same class: distance is noise-only, far below the unit
            // separation between class embeddings
            assert!(d < 6.0 * FEATURE_NOISE_SIGMA * (2.0 * FEATURE_DIM as f32).sqrt());
        }
    }

    #[test]
    fn zero_spec_corruption_is_identity() {
        let scene = tiny_scene(3, 7);
        let frames = render_gt_frames(&scene, 64, 48, false);
        let labels = frames[0].labels.as_ref().unwrap();
        let (out, rec) = corrupt_frame(
            labels,
            &scene.classes,
            &CorruptionSpec::default(),
            7,
            0,
        );
        assert_eq!(&out, labels);
        assert!(rec.dropped.is_empty() && rec.flipped.is_empty());
        for (gt, id) in rec.permutation {
            assert_eq!(gt, id);
        }
    }

    #[test]
    fn permutation_only_records_bijection() {
        let scene = tiny_scene(5, 8);
        let frames = render_gt_frames(&scene, 96, 72, false);
        let labels = frames[2].labels.as_ref().unwrap();
        let spec = CorruptionSpec {
            permute_ids: true,
            ..Default::default()
        };
        let (out, rec) = corrupt_frame(labels, &scene.classes, &spec, 8, 2);
        // bijection over survivors
        let vals: std::collections::BTreeSet<u32> = rec.permutation.values().copied().collect();
        assert_eq!(vals.len(), rec.permutation.len());
        // every labeled pixel follows the mapping
        for px in 0..labels.len() {
            let gt = labels.instance_id[px];
            if gt != UNLABELED {
                assert_eq!(out.instance_id[px], rec.permutation[&gt]);
            } else {
                assert_eq!(out.instance_id[px], UNLABELED);
            }
        }
    }

    #[test]
    fn drop_rate_within_binomial_bounds() {
        let scene = tiny_scene(5, 11);
        let frames = render_gt_frames(&scene, 96, 72, false);
        let spec = CorruptionSpec {
            p_drop: 0.3,
            ..Default::default()
        };
        let mut total = 0usize;
        let mut dropped = 0usize;
        for rep in 0..10u32 {
            for f in &frames {
                let labels = f.labels.as_ref().unwrap();
                let present = labels.instance_masks().len();
                let (_, rec) =
                    corrupt_frame(labels, &scene.classes, &spec, 1000 + rep as u64, f.id);
                total += present;
                dropped += rec.dropped.len();
            }
        }
        // binomial 99% interval around 0.3
        let mean = total as f64 * 0.3;
        let sd = (total as f64 * 0.3 * 0.7).sqrt();
        assert!(
            (dropped as f64 - mean).abs() < 2.6 * sd + 1.0,
            "dropped {dropped} of {total}"
        );
    }

    #[test]
    fn corruption_preserves_untouched_pixels() {
        let scene = tiny_scene(4, 13);
        let frames = render_gt_frames(&scene, 96, 72, false);
        let labels = frames[1].labels.as_ref().unwrap();
        let spec = CorruptionSpec {
            p_drop: 0.5,
            erode_px: 1,
            ..Default::default()
        };
        let (out, rec) = corrupt_frame(labels, &scene.classes, &spec, 13, 1);
        for px in 0..labels.len() {
            let gt = labels.instance_id[px];
            if gt == UNLABELED || rec.dropped.contains(&gt) {
                continue;
            }
            // pixel either kept identical or eroded to unlabeled
            if out.instance_id[px] != UNLABELED {
                assert_eq!(out.instance_id[px], gt);
                assert_eq!(out.class_id[px], labels.class_id[px]);
            } else {
                assert_eq!(out.class_id[px], UNKNOWN);
            }
        }
    }

    #[test]
    fn most_instances_visible_in_three_frames() {
        let scene = tiny_scene(8, 17);
        let frames = render_gt_frames(&scene, 96, 72, false);
        let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
        for f in &frames {
            let labels = f.labels.as_ref().unwrap();
            for id in labels.instance_masks().keys() {
                *seen.entry(*id).or_default() += 1;
            }
        }
        let things = scene.thing_instances();
        let ok = things.iter().filter(|i| seen.get(i).copied().unwrap_or(0) >= 3).count();
        assert!(
            ok as f64 >= 0.8 * things.len() as f64,
            "only {ok}/{} instances seen in >=3 frames",
            things.len()
        );
    }
}
