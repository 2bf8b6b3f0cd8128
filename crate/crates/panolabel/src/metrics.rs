//! Evaluation: scene-level panoptic quality over merged multi-frame
//! segments, semantic mIoU/mAcc, instance coverage, and mesh-to-mesh
//! distance metrics with uniform area sampling and a BVH for closest-point
//! queries.

use std::collections::BTreeMap;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene_io::{ClassTable, LabelImage, TriMesh};
use crate::{Error, Result, UNKNOWN, UNLABELED};

/// A scene-level segment: pixels merged across frames, keyed per frame.
type Segment = Vec<(usize, usize)>; // (frame index, pixel index)

/// Merge label images into per-class segments: one segment per thing
/// instance id, one per stuff class.
fn scene_segments(
    frames: &[&LabelImage],
    classes: &ClassTable,
) -> BTreeMap<(u32, u32), Segment> {
    // key: (class id, instance id) with instance 0 for stuff
    let mut segs: BTreeMap<(u32, u32), Segment> = BTreeMap::new();
    // an instance's class is voted across all of its pixels
    let mut inst_class: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (fi, img) in frames.iter().enumerate() {
        for px in 0..img.len() {
            let inst = img.instance_id[px];
            let class = img.class_id[px];
            if inst != UNLABELED && class != UNKNOWN {
                *inst_class
                    .entry(inst)
                    .or_default()
                    .entry(class)
                    .or_default() += 1;
            }
            let _ = fi;
        }
    }
    let voted: BTreeMap<u32, u32> = inst_class
        .iter()
        .map(|(&inst, votes)| {
            let best = votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&c, _)| c)
                .unwrap();
            (inst, best)
        })
        .collect();
    for (fi, img) in frames.iter().enumerate() {
        for px in 0..img.len() {
            let inst = img.instance_id[px];
            let class = img.class_id[px];
            if inst != UNLABELED {
                let c = voted.get(&inst).copied().unwrap_or(class);
                if c == UNKNOWN {
                    continue;
                }
                segs.entry((c, inst)).or_default().push((fi, px));
            } else if class != UNKNOWN && classes.is_stuff(class) {
                segs.entry((class, UNLABELED)).or_default().push((fi, px));
            }
        }
    }
    segs
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let inter = b.iter().filter(|p| sa.contains(p)).count();
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanopticResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

/// Panoptic quality over whole-scene segments: same-class pairs with
/// IoU > 0.5 are matches (necessarily unique), PQ = ΣIoU / (TP + FP/2 + FN/2).
pub fn panoptic_quality_scene(
    pred: &[&LabelImage],
    gt: &[&LabelImage],
    classes: &ClassTable,
) -> Result<PanopticResult> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let pred_segs = scene_segments(pred, classes);
    let gt_segs = scene_segments(gt, classes);
    let mut tp = 0;
    let mut iou_sum = 0.0;
    let mut matched_pred: std::collections::BTreeSet<&(u32, u32)> = Default::default();
    for (gk, gseg) in &gt_segs {
        for (pk, pseg) in &pred_segs {
            if pk.0 != gk.0 {
                continue;
            }
            let v = iou(pseg, gseg);
            if v > 0.5 {
                tp += 1;
                iou_sum += v;
                matched_pred.insert(pk);
                break; // IoU > 0.5 match is unique
            }
        }
    }
    let fp = pred_segs.len() - matched_pred.len();
    let fn_ = gt_segs.len() - tp;
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let pq = if denom > 0.0 { iou_sum / denom } else { 0.0 };
    let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
    let rq = if denom > 0.0 { tp as f64 / denom } else { 0.0 };
    Ok(PanopticResult {
        pq,
        sq,
        rq,
        tp,
        fp,
        fn_,
        iou_sum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticResult {
    pub miou: f64,
    pub macc: f64,
    /// Classes present in the ground truth.
    pub n_classes: usize,
}

/// Mean IoU and mean accuracy over classes present in the ground truth.
/// Pixels with unknown ground truth are excluded everywhere.
pub fn semantic_metrics(pred: &[&LabelImage], gt: &[&LabelImage]) -> Result<SemanticResult> {
    if pred.len() != gt.len() {
        return Err(Error::Data("frame count mismatch".into()));
    }
    let mut inter: BTreeMap<u32, usize> = BTreeMap::new();
    let mut gt_count: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<u32, usize> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Data("frame size mismatch".into()));
        }
        for px in 0..g.len() {
            let gc = g.class_id[px];
            if gc == UNKNOWN {
                continue;
            }
            *gt_count.entry(gc).or_default() += 1;
            let pc = p.class_id[px];
            *pred_count.entry(pc).or_default() += 1;
            if pc == gc {
                *inter.entry(gc).or_default() += 1;
            }
        }
    }
    let mut miou = 0.0;
    let mut macc = 0.0;
    for (&c, &n_gt) in &gt_count {
        let i = inter.get(&c).copied().unwrap_or(0);
        let union = n_gt + pred_count.get(&c).copied().unwrap_or(0) - i;
        miou += i as f64 / union as f64;
        macc += i as f64 / n_gt as f64;
    }
    let k = gt_count.len();
    if k > 0 {
        miou /= k as f64;
        macc /= k as f64;
    }
    Ok(SemanticResult {
        miou,
        macc,
        n_classes: k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageResult {
    pub mcov: f64,
    pub mwcov: f64,
    pub n_instances: usize,
}

/// Instance coverage: for each ground-truth thing instance (merged across
/// frames), the best-overlapping predicted instance's IoU, averaged plain
/// (mCov) and size-weighted (mW-Cov).
pub fn coverage_metrics(pred: &[&LabelImage], gt: &[&LabelImage]) -> Result<CoverageResult> {
    if pred.len() != gt.len() {
        return Err(Error::Data("frame count mismatch".into()));
    }
    let collect = |frames: &[&LabelImage]| {
        let mut segs: BTreeMap<u32, Segment> = BTreeMap::new();
        for (fi, img) in frames.iter().enumerate() {
            for px in 0..img.len() {
                let inst = img.instance_id[px];
                if inst != UNLABELED {
                    segs.entry(inst).or_default().push((fi, px));
                }
            }
        }
        segs
    };
    let gt_segs = collect(gt);
    let pred_segs = collect(pred);
    let mut mcov = 0.0;
    let mut mwcov = 0.0;
    let total: usize = gt_segs.values().map(|s| s.len()).sum();
    for seg in gt_segs.values() {
        let best = pred_segs
            .values()
            .map(|p| iou(p, seg))
            .fold(0.0f64, f64::max);
        mcov += best;
        mwcov += best * seg.len() as f64;
    }
    let k = gt_segs.len();
    Ok(CoverageResult {
        mcov: if k > 0 { mcov / k as f64 } else { 0.0 },
        mwcov: if total > 0 { mwcov / total as f64 } else { 0.0 },
        n_instances: k,
    })
}

/// Closest point on a triangle to a point (Ericson, Real-Time Collision
/// Detection §5.1.5).
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Median-split AABB tree over mesh triangles for closest-point queries.
pub struct Bvh<'a> {
    mesh: &'a TriMesh,
    nodes: Vec<BvhNode>,
    /// triangle indices, partitioned per leaf
    tris: Vec<u32>,
}

struct BvhNode {
    lo: Point3<f64>,
    hi: Point3<f64>,
    /// leaf: (start, count) into `tris`; inner: (left child, right child)
    a: u32,
    b: u32,
    leaf: bool,
}

impl<'a> Bvh<'a> {
    const LEAF_SIZE: usize = 8;

    pub fn build(mesh: &'a TriMesh) -> Self {
        let mut tris: Vec<u32> = (0..mesh.faces.len() as u32).collect();
        let centroids: Vec<Point3<f64>> = (0..mesh.faces.len())
            .map(|f| mesh.face_centroid(f))
            .collect();
        let mut nodes = Vec::new();
        Self::split(mesh, &centroids, &mut tris, 0, mesh.faces.len(), &mut nodes);
        Self { mesh, nodes, tris }
    }

    fn tri_bounds(mesh: &TriMesh, tris: &[u32], start: usize, count: usize) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &t in &tris[start..start + count] {
            for &vi in &mesh.faces[t as usize] {
                let v = mesh.vertices[vi as usize];
                for k in 0..3 {
                    lo[k] = lo[k].min(v[k]);
                    hi[k] = hi[k].max(v[k]);
                }
            }
        }
        (lo, hi)
    }

    fn split(
        mesh: &TriMesh,
        centroids: &[Point3<f64>],
        tris: &mut [u32],
        start: usize,
        count: usize,
        nodes: &mut Vec<BvhNode>,
    ) -> u32 {
        let (lo, hi) = Self::tri_bounds(mesh, tris, start, count);
        let me = nodes.len() as u32;
        nodes.push(BvhNode {
            lo,
            hi,
            a: start as u32,
            b: count as u32,
            leaf: true,
        });
        if count <= Self::LEAF_SIZE {
            return me;
        }
        // split at the centroid median of the widest axis
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        tris[start..start + count].sort_by(|&ta, &tb| {
            centroids[ta as usize][axis]
                .partial_cmp(&centroids[tb as usize][axis])
                .unwrap()
                .then(ta.cmp(&tb))
        });
        let half = count / 2;
        let left = Self::split(mesh, centroids, tris, start, half, nodes);
        let right = Self::split(mesh, centroids, tris, start + half, count - half, nodes);
        nodes[me as usize].a = left;
        nodes[me as usize].b = right;
        nodes[me as usize].leaf = false;
        me
    }

    fn box_dist2(lo: &Point3<f64>, hi: &Point3<f64>, p: &Point3<f64>) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = (lo[k] - p[k]).max(0.0).max(p[k] - hi[k]);
            d2 += d * d;
        }
        d2
    }

    /// Distance from a point to the mesh surface.
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.query(0, p, &mut best);
        best.sqrt()
    }

    fn query(&self, node: u32, p: &Point3<f64>, best: &mut f64) {
        let n = &self.nodes[node as usize];
        if Self::box_dist2(&n.lo, &n.hi, p) >= *best {
            return;
        }
        if n.leaf {
            for &t in &self.tris[n.a as usize..(n.a + n.b) as usize] {
                let f = self.mesh.faces[t as usize];
                let q = closest_point_on_triangle(
                    p,
                    &self.mesh.vertices[f[0] as usize],
                    &self.mesh.vertices[f[1] as usize],
                    &self.mesh.vertices[f[2] as usize],
                );
                let d2 = (p - q).norm_squared();
                if d2 < *best {
                    *best = d2;
                }
            }
            return;
        }
        // visit the nearer child first
        let (la, lb) = (n.a, n.b);
        let da = Self::box_dist2(&self.nodes[la as usize].lo, &self.nodes[la as usize].hi, p);
        let db = Self::box_dist2(&self.nodes[lb as usize].lo, &self.nodes[lb as usize].hi, p);
        let (first, second) = if da <= db { (la, lb) } else { (lb, la) };
        self.query(first, p, best);
        self.query(second, p, best);
    }
}

/// Uniform-by-area surface samples from a mesh, seeded.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Vec<Point3<f64>> {
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cum.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a3);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen_range(0.0..total);
        let fi = cum.partition_point(|&c| c <= r).min(mesh.faces.len() - 1);
        let f = mesh.faces[fi];
        let (a, b, c) = (
            mesh.vertices[f[0] as usize],
            mesh.vertices[f[1] as usize],
            mesh.vertices[f[2] as usize],
        );
        // uniform barycentric via the sqrt trick
        let su: f64 = rng.gen_range(0.0f64..1.0).sqrt();
        let v: f64 = rng.gen_range(0.0f64..1.0);
        let w = (1.0 - su, su * (1.0 - v), su * v);
        out.push(Point3::from(
            a.coords * w.0 + b.coords * w.1 + c.coords * w.2,
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshResult {
    /// Mean distance from predicted surface samples to ground truth, cm.
    pub accuracy_cm: f64,
    /// Mean distance from ground-truth samples to the prediction, cm.
    pub completeness_cm: f64,
    /// Chamfer-L1: mean of the two, cm.
    pub chamfer_l1_cm: f64,
}

/// Sampled surface-to-surface distances between two meshes.
pub fn mesh_metrics(pred: &TriMesh, gt: &TriMesh, n_samples: usize, seed: u64) -> MeshResult {
    let bvh_gt = Bvh::build(gt);
    let bvh_pred = Bvh::build(pred);
    let acc_m: f64 = sample_surface(pred, n_samples, seed)
        .iter()
        .map(|p| bvh_gt.distance(p))
        .sum::<f64>()
        / n_samples as f64;
    let comp_m: f64 = sample_surface(gt, n_samples, seed.wrapping_add(1))
        .iter()
        .map(|p| bvh_pred.distance(p))
        .sum::<f64>()
        / n_samples as f64;
    MeshResult {
        accuracy_cm: acc_m * 100.0,
        completeness_cm: comp_m * 100.0,
        chamfer_l1_cm: (acc_m + comp_m) / 2.0 * 100.0,
    }
}
