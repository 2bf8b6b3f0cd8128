//! Global 3D instance ids: assign them to clusters, align each frame's 2D
//! instance ids to them by projected-mask IoU, vote instance classes over
//! all matched 2D masks, and rewrite frame labels to the voted class and
//! global id.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::instgraph::InstanceClusters;
use crate::rasterizer::{region_mask, IdBuffer};
use crate::scene_io::{ClassTable, LabelImage};
use crate::superface::SuperfaceSegmentation;
use crate::{Result, UNKNOWN, UNLABELED};

/// Global instance registry: superfaces, voted class and per-frame 2D id
/// matches per 3D instance. Ids dense from 1.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct InstanceMap {
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceRecord {
    pub id: u32,
    pub superfaces: Vec<u32>,
    pub class_id: u32,
    /// frame id → matched 2D instance ids in that frame.
    pub frame_matches: BTreeMap<u32, Vec<u32>>,
}

impl InstanceMap {
    pub fn get(&self, id: u32) -> &InstanceRecord {
        &self.instances[(id - 1) as usize]
    }

    /// All face indices of an instance under a segmentation.
    pub fn faces_of(&self, id: u32, seg: &SuperfaceSegmentation) -> BTreeSet<u32> {
        self.get(id)
            .superfaces
            .iter()
            .flat_map(|&s| seg.superface_faces[s as usize].iter().copied())
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| crate::Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| crate::Error::Format(e.to_string()))
    }
}

/// Deterministic global ids: clusters ordered by (descending total superface
/// area, then lowest node id) become instances 1..n. Classes stay UNKNOWN
/// until `vote_class`.
pub fn assign_global_ids(
    clusters: &InstanceClusters,
    superpoint_areas: &[f64],
) -> InstanceMap {
    let mut order: Vec<u32> = (1..=clusters.count() as u32).collect();
    let area_of = |cid: u32| -> f64 {
        clusters
            .nodes_of(cid)
            .iter()
            .map(|&n| superpoint_areas[n as usize])
            .sum()
    };
    order.sort_by(|&a, &b| {
        area_of(b)
            .partial_cmp(&area_of(a))
            .unwrap()
            .then(clusters.nodes_of(a)[0].cmp(&clusters.nodes_of(b)[0]))
    });
    let instances = order
        .iter()
        .enumerate()
        .map(|(i, &cid)| InstanceRecord {
            id: i as u32 + 1,
            superfaces: clusters.nodes_of(cid).to_vec(),
            class_id: UNKNOWN,
            frame_matches: BTreeMap::new(),
        })
        .collect();
    InstanceMap { instances }
}

/// A 2D↔3D id match in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMatch {
    pub id_2d: u32,
    pub id_3d: u32,
    pub iou: f64,
    /// Pixel count of the matched 2D mask (class-vote weight).
    pub mask_pixels: u32,
}

/// Greedy IoU matching between a frame's 2D thing masks and the projection
/// masks of 3D instances. Descending IoU, ties broken by (lower 3D id, lower
/// 2D id); pairs below `iou_threshold` stay unmatched. Injective both ways.
pub fn match_frame(
    imap: &InstanceMap,
    idbuf: &IdBuffer,
    seg: &SuperfaceSegmentation,
    labels: &LabelImage,
    classes: &ClassTable,
    iou_threshold: f64,
) -> Vec<FrameMatch> {
    assert!(
        iou_threshold > 0.0 && iou_threshold <= 1.0,
        "iou threshold must be in (0,1]"
    );
    // 2D thing masks
    let mut masks_2d: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (px, &inst) in labels.instance_id.iter().enumerate() {
        if inst != UNLABELED && classes.is_thing(labels.class_id[px]) {
            masks_2d.entry(inst).or_default().push(px);
        }
    }
    // 3D projection masks
    let mut proj: Vec<(u32, Vec<bool>)> = Vec::new();
    for rec in &imap.instances {
        let faces = imap.faces_of(rec.id, seg);
        let mask = region_mask(idbuf, &faces);
        if mask.iter().any(|&m| m) {
            proj.push((rec.id, mask));
        }
    }

    let mut candidates: Vec<(f64, u32, u32, u32)> = Vec::new(); // (iou, 3d, 2d, px)
    for (id3, mask3) in &proj {
        let area3 = mask3.iter().filter(|&&m| m).count();
        for (&id2, pixels2) in &masks_2d {
            let inter = pixels2.iter().filter(|&&px| mask3[px]).count();
            if inter == 0 {
                continue;
            }
            let union = area3 + pixels2.len() - inter;
            let iou = inter as f64 / union as f64;
            if iou >= iou_threshold {
                candidates.push((iou, *id3, id2, pixels2.len() as u32));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used3 = BTreeSet::new();
    let mut used2 = BTreeSet::new();
    let mut out = Vec::new();
    for (iou, id3, id2, px) in candidates {
        if used3.contains(&id3) || used2.contains(&id2) {
            continue;
        }
        used3.insert(id3);
        used2.insert(id2);
        out.push(FrameMatch {
            id_2d: id2,
            id_3d: id3,
            iou,
            mask_pixels: px,
        });
    }
    out
}

/// Record matches into the map and vote each instance's class: mode over
/// the matched 2D masks' classes weighted by matched pixel count, ties to
/// the lower class id, no matches → UNKNOWN.
pub fn vote_class(
    imap: &mut InstanceMap,
    frame_data: &[(u32, &LabelImage, Vec<FrameMatch>)],
) {
    for rec in &mut imap.instances {
        rec.frame_matches.clear();
    }
    // (3d id, class) → pixel weight
    let mut weights: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (frame_id, labels, matches) in frame_data {
        for m in matches {
            let rec = &mut imap.instances[(m.id_3d - 1) as usize];
            rec.frame_matches.entry(*frame_id).or_default().push(m.id_2d);
            let class = labels.instance_class(m.id_2d);
            if class != UNKNOWN {
                *weights.entry((m.id_3d, class)).or_insert(0) += m.mask_pixels as u64;
            }
        }
    }
    for rec in &mut imap.instances {
        let mut best: Option<(u64, u32)> = None;
        for (&(id3, class), &w) in &weights {
            if id3 != rec.id {
                continue;
            }
            let better = match best {
                None => true,
                Some((bw, bc)) => w > bw || (w == bw && class < bc),
            };
            if better {
                best = Some((w, class));
            }
        }
        rec.class_id = best.map(|(_, c)| c).unwrap_or(UNKNOWN);
    }
}

/// Outcome of correcting one frame.
#[derive(Debug, Clone)]
pub struct CorrectedFrame {
    pub labels: LabelImage,
    /// 2D ids that matched nothing and kept their class under a fresh
    /// globally unique instance id.
    pub flagged: Vec<u32>,
}

/// Rewrite matched 2D instances to their 3D instance's voted class and
/// global id. Unmatched 2D thing masks keep their class but get fresh ids
/// from `next_fresh_id` so corrected ids stay globally unique; stuff pixels
/// are untouched.
pub fn correct_labels(
    imap: &InstanceMap,
    labels: &LabelImage,
    classes: &ClassTable,
    matches: &[FrameMatch],
    next_fresh_id: &mut u32,
) -> CorrectedFrame {
    let mut id_map: BTreeMap<u32, (u32, u32)> = BTreeMap::new(); // 2d → (3d id, class)
    for m in matches {
        let voted = imap.get(m.id_3d).class_id;
        id_map.insert(m.id_2d, (m.id_3d, voted));
    }
    // unmatched thing ids, ascending, get fresh ids deterministically
    let mut flagged = Vec::new();
    let present: BTreeSet<u32> = labels
        .instance_id
        .iter()
        .enumerate()
        .filter(|(px, &i)| i != UNLABELED && classes.is_thing(labels.class_id[*px]))
        .map(|(_, &i)| i)
        .collect();
    for id in present {
        if !id_map.contains_key(&id) {
            id_map.insert(id, (*next_fresh_id, UNKNOWN)); // class kept per pixel
            flagged.push(id);
            *next_fresh_id += 1;
        }
    }
    let flagged_set: BTreeSet<u32> = flagged.iter().copied().collect();

    let mut out = labels.clone();
    for px in 0..labels.len() {
        let inst = labels.instance_id[px];
        if inst == UNLABELED || !classes.is_thing(labels.class_id[px]) {
            continue;
        }
        let (new_id, voted) = id_map[&inst];
        out.instance_id[px] = new_id;
        if !flagged_set.contains(&inst) && voted != UNKNOWN {
            out.class_id[px] = voted;
        }
    }
    CorrectedFrame {
        labels: out,
        flagged,
    }
}

/// Paint every voted thing instance's visible 3D extent into the frame,
/// repairing eroded borders and masks dropped entirely in this view. The
/// z-buffered id buffer keeps occluded faces out, so only genuinely visible
/// pixels are overwritten.
pub fn project_labels(
    imap: &InstanceMap,
    idbuf: &IdBuffer,
    seg: &SuperfaceSegmentation,
    classes: &ClassTable,
    labels: &mut LabelImage,
) {
    for inst in &imap.instances {
        if !classes.is_thing(inst.class_id) {
            continue;
        }
        let faces = imap.faces_of(inst.id, seg);
        let mask = region_mask(idbuf, &faces);
        for (px, &hit) in mask.iter().enumerate() {
            if hit {
                labels.instance_id[px] = inst.id;
                labels.class_id[px] = inst.class_id;
                if let Some(score) = labels.score.as_mut() {
                    score[px] = 1.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instgraph::{cut_and_cluster, SceneGraph};
    use crate::scene_io::ClassKind;

    fn two_class_table() -> ClassTable {
        let mut t = ClassTable::new();
        t.push("chair", ClassKind::Thing); // 1
        t.push("table", ClassKind::Thing); // 2
        t.push("floor", ClassKind::Stuff); // 3
        t
    }

    #[test]
    fn global_ids_ordered_by_area_then_node() {
        let mut g = SceneGraph::new(5);
        g.vote(0, 1, 1); // cluster {0,1}
        g.vote(3, 4, 1); // cluster {3,4}
        let clusters = cut_and_cluster(&g); // {0,1}=1, {2}=2, {3,4}=3
        let areas = [1.0, 1.0, 0.5, 3.0, 2.0];
        let imap = assign_global_ids(&clusters, &areas);
        // areas: {0,1}=2.0, {2}=0.5, {3,4}=5.0 → order {3,4}, {0,1}, {2}
        assert_eq!(imap.get(1).superfaces, vec![3, 4]);
        assert_eq!(imap.get(2).superfaces, vec![0, 1]);
        assert_eq!(imap.get(3).superfaces, vec![2]);
        // determinism
        let imap2 = assign_global_ids(&clusters, &areas);
        assert_eq!(imap, imap2);
    }

    fn tiny_setup() -> (InstanceMap, SuperfaceSegmentation, IdBuffer) {
        // 4x1 buffer, faces 0..3 left→right, superface per face,
        // instances: {faces 0,1} and {face 2}; face 3 in no instance
        let seg = SuperfaceSegmentation {
            face_to_superface: vec![0, 1, 2, 3],
            superface_faces: vec![vec![0], vec![1], vec![2], vec![3]],
        };
        let mut idbuf = IdBuffer::new(4, 1);
        idbuf.face_id = vec![1, 2, 3, 4];
        idbuf.depth = vec![1.0; 4];
        let imap = InstanceMap {
            instances: vec![
                InstanceRecord {
                    id: 1,
                    superfaces: vec![0, 1],
                    class_id: UNKNOWN,
                    frame_matches: BTreeMap::new(),
                },
                InstanceRecord {
                    id: 2,
                    superfaces: vec![2],
                    class_id: UNKNOWN,
                    frame_matches: BTreeMap::new(),
                },
            ],
        };
        (imap, seg, idbuf)
    }

    #[test]
    fn exact_projection_matches_with_iou_one() {
        let (imap, seg, idbuf) = tiny_setup();
        let classes = two_class_table();
        let mut labels = LabelImage::empty(4, 1);
        labels.instance_id = vec![7, 7, 9, 0];
        labels.class_id = vec![1, 1, 2, 0];
        let ms = match_frame(&imap, &idbuf, &seg, &labels, &classes, 0.25);
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0], FrameMatch { id_2d: 7, id_3d: 1, iou: 1.0, mask_pixels: 2 });
        assert_eq!(ms[1], FrameMatch { id_2d: 9, id_3d: 2, iou: 1.0, mask_pixels: 1 });
    }

    #[test]
    fn disjoint_masks_unmatched() {
        let (imap, seg, idbuf) = tiny_setup();
        let classes = two_class_table();
        let mut labels = LabelImage::empty(4, 1);
        labels.instance_id = vec![0, 0, 0, 5]; // only over face 3 (no instance)
        labels.class_id = vec![0, 0, 0, 1];
        let ms = match_frame(&imap, &idbuf, &seg, &labels, &classes, 0.25);
        assert!(ms.is_empty());
    }

    /// Exhaustive oracle: enumerate all injective matchings above the
    /// threshold, maximize total IoU, tie-break lexicographically by
    /// (3d, 2d) pair list.
    fn oracle_matching(iou: &[Vec<f64>], thr: f64) -> Vec<(usize, usize)> {
        let n3 = iou.len();
        let n2 = iou[0].len();
        let mut best: (f64, Vec<(usize, usize)>) = (-1.0, Vec::new());
        let mut assign: Vec<Option<usize>> = vec![None; n3];
        fn recurse(
            i: usize,
            n3: usize,
            n2: usize,
            iou: &[Vec<f64>],
            thr: f64,
            assign: &mut Vec<Option<usize>>,
            best: &mut (f64, Vec<(usize, usize)>),
        ) {
            if i == n3 {
                let pairs: Vec<(usize, usize)> = assign
                    .iter()
                    .enumerate()
                    .filter_map(|(a, &b)| b.map(|b| (a, b)))
                    .collect();
                let total: f64 = pairs.iter().map(|&(a, b)| iou[a][b]).sum();
                if total > best.0 + 1e-12
                    || ((total - best.0).abs() <= 1e-12 && pairs < best.1)
                {
                    *best = (total, pairs);
                }
                return;
            }
            recurse(i + 1, n3, n2, iou, thr, assign, best);
            for j in 0..n2 {
                if iou[i][j] >= thr && !assign.contains(&Some(j)) {
                    assign[i] = Some(j);
                    recurse(i + 1, n3, n2, iou, thr, assign, best);
                    assign[i] = None;
                }
            }
        }
        recurse(0, n3, n2, iou, thr, &mut assign, &mut best);
        best.1
    }

    #[test]
    fn greedy_matches_oracle_on_well_separated_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // well-separated: one dominant IoU per row/column
        for _ in 0..50 {
            let mut iou = vec![vec![0.0f64; 3]; 3];
            let perm: Vec<usize> = {
                let mut p = vec![0, 1, 2];
                for i in (1..3).rev() {
                    p.swap(i, rng.gen_range(0..=i));
                }
                p
            };
            for i in 0..3 {
                for j in 0..3 {
                    iou[i][j] = if perm[i] == j {
                        rng.gen_range(0.6..1.0)
                    } else {
                        rng.gen_range(0.0..0.2)
                    };
                }
            }
            let oracle = oracle_matching(&iou, 0.25);
            // greedy over the same matrix
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for i in 0..3 {
                for j in 0..3 {
                    if iou[i][j] >= 0.25 {
                        cands.push((iou[i][j], i, j));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut u3 = BTreeSet::new();
            let mut u2 = BTreeSet::new();
            let mut greedy = Vec::new();
            for (_, i, j) in cands {
                if !u3.contains(&i) && !u2.contains(&j) {
                    u3.insert(i);
                    u2.insert(j);
                    greedy.push((i, j));
                }
            }
            greedy.sort();
            let mut oracle_sorted = oracle.clone();
            oracle_sorted.sort();
            assert_eq!(greedy, oracle_sorted, "iou {iou:?}");
        }
    }

    #[test]
    fn class_vote_majority_weighted_and_unknown() {
        let (mut imap, _, _) = tiny_setup();
        let mut l1 = LabelImage::empty(4, 1);
        l1.instance_id = vec![7, 7, 0, 0];
        l1.class_id = vec![1, 1, 0, 0]; // chair, 100px scale below
        let mut l2 = LabelImage::empty(4, 1);
        l2.instance_id = vec![8, 8, 8, 0];
        l2.class_id = vec![2, 2, 2, 0]; // table
        let mut l3 = LabelImage::empty(4, 1);
        l3.instance_id = vec![9, 9, 0, 0];
        l3.class_id = vec![1, 1, 0, 0]; // chair again
        let frame_data = vec![
            (0u32, &l1, vec![FrameMatch { id_2d: 7, id_3d: 1, iou: 1.0, mask_pixels: 100 }]),
            (1u32, &l2, vec![FrameMatch { id_2d: 8, id_3d: 1, iou: 1.0, mask_pixels: 150 }]),
            (2u32, &l3, vec![FrameMatch { id_2d: 9, id_3d: 1, iou: 1.0, mask_pixels: 80 }]),
        ];
        vote_class(&mut imap, &frame_data);
        assert_eq!(imap.get(1).class_id, 1); // chair 180 > table 150
        assert_eq!(imap.get(2).class_id, UNKNOWN); // no matches
    }

    #[test]
    fn equal_weight_majority() {
        let (mut imap, _, _) = tiny_setup();
        let mut l = LabelImage::empty(4, 1);
        l.instance_id = vec![7, 8, 9, 0];
        l.class_id = vec![1, 1, 2, 0];
        let frame_data = vec![(
            0u32,
            &l,
            vec![
                FrameMatch { id_2d: 7, id_3d: 1, iou: 1.0, mask_pixels: 10 },
                FrameMatch { id_2d: 8, id_3d: 1, iou: 1.0, mask_pixels: 10 },
                FrameMatch { id_2d: 9, id_3d: 1, iou: 1.0, mask_pixels: 10 },
            ],
        )];
        vote_class(&mut imap, &frame_data);
        assert_eq!(imap.get(1).class_id, 1); // chair 20 > table 10
    }

    #[test]
    fn correction_rewrites_class_and_id() {
        let (mut imap, _, _) = tiny_setup();
        imap.instances[0].class_id = 1; // voted chair
        let classes = two_class_table();
        let mut labels = LabelImage::empty(4, 1);
        labels.instance_id = vec![7, 7, 0, 0];
        labels.class_id = vec![2, 2, 3, 0]; // mislabeled table; px2 stuff
        let matches = vec![FrameMatch { id_2d: 7, id_3d: 1, iou: 1.0, mask_pixels: 2 }];
        let mut fresh = 100;
        let c = correct_labels(&imap, &labels, &classes, &matches, &mut fresh);
        assert_eq!(c.labels.instance_id, vec![1, 1, 0, 0]);
        assert_eq!(c.labels.class_id, vec![1, 1, 3, 0]);
        assert!(c.flagged.is_empty());
        assert_eq!(fresh, 100);
    }

    #[test]
    fn consistent_frame_is_fixed_point() {
        let (mut imap, _, _) = tiny_setup();
        imap.instances[0].class_id = 1;
        let classes = two_class_table();
        let mut labels = LabelImage::empty(4, 1);
        labels.instance_id = vec![1, 1, 0, 0];
        labels.class_id = vec![1, 1, 0, 0];
        let matches = vec![FrameMatch { id_2d: 1, id_3d: 1, iou: 1.0, mask_pixels: 2 }];
        let mut fresh = 100;
        let c = correct_labels(&imap, &labels, &classes, &matches, &mut fresh);
        assert_eq!(c.labels.instance_id, labels.instance_id);
        assert_eq!(c.labels.class_id, labels.class_id);
    }

    #[test]
    fn unmatched_masks_flagged_with_fresh_ids() {
        let (imap, _, _) = tiny_setup();
        let classes = two_class_table();
        let mut labels = LabelImage::empty(4, 1);
        labels.instance_id = vec![7, 7, 0, 0];
        labels.class_id = vec![2, 2, 0, 0];
        let mut fresh = 100;
        let c = correct_labels(&imap, &labels, &classes, &[], &mut fresh);
        assert_eq!(c.flagged, vec![7]);
        assert_eq!(c.labels.instance_id, vec![100, 100, 0, 0]);
        assert_eq!(c.labels.class_id, vec![2, 2, 0, 0]); // class kept
        assert_eq!(fresh, 101);
    }
}
