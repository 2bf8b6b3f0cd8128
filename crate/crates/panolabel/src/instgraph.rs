//! Voting graph over superpoints. Each frame's instance masks vote edges
//! toward the mask's center node; nodes seen in the frame but outside a mask
//! vote against. Cutting non-positive edges and taking connected components
//! yields the 3D instances.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::rasterizer::IdBuffer;
use crate::scene_io::{ClassTable, LabelImage};
use crate::superface::SuperfaceSegmentation;
use crate::{Error, Result, UNLABELED};

/// Symmetric integer vote map over superpoint nodes; absent edge = 0 votes.
/// No self-edges.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneGraph {
    pub node_count: usize,
    votes: BTreeMap<(u32, u32), i64>,
}

impl SceneGraph {
    pub fn new(node_count: usize) -> Self {
        Self {
            node_count,
            votes: BTreeMap::new(),
        }
    }

    fn key(a: u32, b: u32) -> (u32, u32) {
        (a.min(b), a.max(b))
    }

    pub fn vote(&mut self, a: u32, b: u32, delta: i64) {
        if a == b {
            return;
        }
        *self.votes.entry(Self::key(a, b)).or_insert(0) += delta;
    }

    pub fn votes(&self, a: u32, b: u32) -> i64 {
        if a == b {
            return 0;
        }
        self.votes.get(&Self::key(a, b)).copied().unwrap_or(0)
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, i64)> + '_ {
        self.votes.iter().map(|(&(a, b), &v)| (a, b, v))
    }

    /// Merge another graph's votes (commutative reduction).
    pub fn merge(&mut self, other: &SceneGraph) {
        for (&k, &v) in &other.votes {
            *self.votes.entry(k).or_insert(0) += v;
        }
    }
}

/// Per-frame overlap between superface projections and 2D instance masks:
/// U[i][j] = |proj(i) ∩ mask(j)| / |proj(i)|.
#[derive(Debug, Clone, Default)]
pub struct OverlapTable {
    /// node → projected pixel count (only nodes with non-empty projections).
    pub proj_area: BTreeMap<u32, u32>,
    /// (node, mask 2D id) → intersection pixel count, positive entries only.
    pub intersection: BTreeMap<(u32, u32), u32>,
    /// 2D instance ids of thing masks present in the frame, ascending.
    pub mask_ids: Vec<u32>,
}

impl OverlapTable {
    /// U_ij in [0, 1].
    pub fn overlap(&self, node: u32, mask: u32) -> f64 {
        let inter = self.intersection.get(&(node, mask)).copied().unwrap_or(0);
        if inter == 0 {
            return 0.0;
        }
        inter as f64 / self.proj_area[&node] as f64
    }

    /// V_I: nodes with a non-empty projection in this frame.
    pub fn visible_nodes(&self) -> impl Iterator<Item = u32> + '_ {
        self.proj_area.keys().copied()
    }

    /// V_I^j: nodes with U_ij > 0, ascending.
    pub fn mask_nodes(&self, mask: u32) -> Vec<u32> {
        self.intersection
            .iter()
            .filter(|((_, j), &c)| *j == mask && c > 0)
            .map(|((i, _), _)| *i)
            .collect()
    }
}

/// Count projected and intersected pixels for one frame. Stuff-class masks
/// are excluded: only thing instances participate in the graph.
pub fn overlaps(
    idbuf: &IdBuffer,
    seg: &SuperfaceSegmentation,
    labels: &LabelImage,
    classes: &ClassTable,
) -> OverlapTable {
    let mut table = OverlapTable::default();
    let mut mask_ids = BTreeSet::new();
    for px in 0..idbuf.face_id.len() {
        let Some(face) = idbuf.face_at(px) else {
            continue;
        };
        let node = seg.face_to_superface[face as usize];
        *table.proj_area.entry(node).or_insert(0) += 1;
        let inst = labels.instance_id[px];
        if inst == UNLABELED {
            continue;
        }
        if !classes.is_thing(labels.class_id[px]) {
            continue;
        }
        *table.intersection.entry((node, inst)).or_insert(0) += 1;
        mask_ids.insert(inst);
    }
    table.mask_ids = mask_ids.into_iter().collect();
    table
}

/// Center node of mask j: argmax over V_I^j of U_ij, ties to the lowest
/// node id.
pub fn center_node(table: &OverlapTable, mask: u32) -> Result<u32> {
    let mut best: Option<(f64, u32)> = None;
    for node in table.mask_nodes(mask) {
        let u = table.overlap(node, mask);
        let better = match best {
            None => true,
            Some((bu, bn)) => u > bu || (u == bu && node < bn),
        };
        if better {
            best = Some((u, node));
        }
    }
    best.map(|(_, n)| n).ok_or(Error::NoCenter(mask))
}

/// Which nodes receive the deduction vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeductionRule {
    /// All visible nodes outside the mask (V_I − V_I^j) lose a vote to every
    /// node inside it.
    AllVisible,
    /// Only visible nodes that belong to some *other* mask of the frame lose
    /// a vote.
    OtherMasksOnly,
}

/// Accumulate one frame's votes: +1 between the center node and every other
/// node of the mask whose overlap clears `theta`; −1 between mask nodes and
/// the deduction set.
pub fn accumulate_frame(
    graph: &mut SceneGraph,
    table: &OverlapTable,
    theta: f64,
    rule: DeductionRule,
) {
    assert!(theta > 0.0 && theta <= 1.0, "theta must be in (0,1]");
    let visible: Vec<u32> = table.visible_nodes().collect();
    for &mask in &table.mask_ids {
        let members = table.mask_nodes(mask);
        let Ok(center) = center_node(table, mask) else {
            continue;
        };
        let member_set: BTreeSet<u32> = members.iter().copied().collect();
        for &node in &members {
            if node != center && table.overlap(node, mask) >= theta {
                graph.vote(center, node, 1);
            }
        }
        for &out in &visible {
            if member_set.contains(&out) {
                continue;
            }
            if rule == DeductionRule::OtherMasksOnly {
                let in_other = table
                    .mask_ids
                    .iter()
                    .any(|&m| m != mask && table.intersection.contains_key(&(out, m)));
                if !in_other {
                    continue;
                }
            }
            for &inside in &members {
                graph.vote(out, inside, -1);
            }
        }
    }
}

/// Node partition after cutting all non-positive edges; ids dense from 1,
/// ordered by each cluster's lowest node id.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceClusters {
    pub node_to_cluster: Vec<u32>,
    /// cluster id (1-based) → nodes ascending; index 0 ↔ cluster 1.
    pub cluster_nodes: Vec<Vec<u32>>,
}

impl InstanceClusters {
    pub fn count(&self) -> usize {
        self.cluster_nodes.len()
    }

    pub fn nodes_of(&self, cluster_id: u32) -> &[u32] {
        &self.cluster_nodes[(cluster_id - 1) as usize]
    }
}

/// Connected components of the positive-vote subgraph; singletons allowed.
pub fn cut_and_cluster(graph: &SceneGraph) -> InstanceClusters {
    let n = graph.node_count;
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (a, b, v) in graph.edges() {
        if v > 0 {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
    }
    let mut node_to_cluster = vec![0u32; n];
    let mut cluster_nodes = Vec::new();
    for start in 0..n as u32 {
        if node_to_cluster[start as usize] != 0 {
            continue;
        }
        let id = cluster_nodes.len() as u32 + 1;
        let mut stack = vec![start];
        let mut members = Vec::new();
        node_to_cluster[start as usize] = id;
        while let Some(cur) = stack.pop() {
            members.push(cur);
            for &nb in &adj[cur as usize] {
                if node_to_cluster[nb as usize] == 0 {
                    node_to_cluster[nb as usize] = id;
                    stack.push(nb);
                }
            }
        }
        members.sort_unstable();
        cluster_nodes.push(members);
    }
    InstanceClusters {
        node_to_cluster,
        cluster_nodes,
    }
}

/// clusters.bin: magic "PCLU", u32 node_count, node_count × u32 cluster ids.
pub fn save_clusters(path: &Path, clusters: &InstanceClusters) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * clusters.node_to_cluster.len());
    out.extend_from_slice(b"PCLU");
    out.extend_from_slice(&(clusters.node_to_cluster.len() as u32).to_le_bytes());
    for &id in &clusters.node_to_cluster {
        out.extend_from_slice(&id.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_clusters(path: &Path) -> Result<InstanceClusters> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != b"PCLU" {
        return Err(Error::Format(format!("{}: bad PCLU header", path.display())));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * n {
        return Err(Error::Format(format!("{}: bad PCLU payload", path.display())));
    }
    let mut node_to_cluster = Vec::with_capacity(n);
    for i in 0..n {
        node_to_cluster.push(u32::from_le_bytes(
            bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap(),
        ));
    }
    let count = node_to_cluster.iter().copied().max().unwrap_or(0) as usize;
    let mut cluster_nodes = vec![Vec::new(); count];
    for (node, &cid) in node_to_cluster.iter().enumerate() {
        if cid == 0 {
            continue;
        }
        cluster_nodes[(cid - 1) as usize].push(node as u32);
    }
    Ok(InstanceClusters {
        node_to_cluster,
        cluster_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::ClassKind;

    fn table(
        proj: &[(u32, u32)],
        inter: &[((u32, u32), u32)],
        masks: &[u32],
    ) -> OverlapTable {
        OverlapTable {
            proj_area: proj.iter().copied().collect(),
            intersection: inter.iter().copied().collect(),
            mask_ids: masks.to_vec(),
        }
    }

    #[test]
    fn center_node_argmax_and_ties() {
        let t = table(
            &[(1, 10), (2, 10)],
            &[((1, 7), 9), ((2, 7), 4)],
            &[7],
        );
        assert_eq!(center_node(&t, 7).unwrap(), 1);

        let t2 = table(&[(3, 10), (5, 10)], &[((3, 7), 5), ((5, 7), 5)], &[7]);
        assert_eq!(center_node(&t2, 7).unwrap(), 3);

        let t3 = table(&[(3, 10)], &[], &[7]);
        assert!(matches!(center_node(&t3, 7), Err(Error::NoCenter(7))));
    }

    #[test]
    fn center_node_matches_exhaustive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let nodes: Vec<u32> = (0..10).collect();
            let mut proj = Vec::new();
            let mut inter = Vec::new();
            for &n in &nodes {
                let area = rng.gen_range(5u32..50);
                proj.push((n, area));
                let cover = rng.gen_range(0..=area);
                if cover > 0 {
                    inter.push(((n, 1u32), cover));
                }
            }
            let t = table(&proj, &inter, &[1]);
            if t.mask_nodes(1).is_empty() {
                continue;
            }
            let got = center_node(&t, 1).unwrap();
            // brute-force argmax with lowest-id tie break
            let mut best_u = -1.0;
            let mut best_n = u32::MAX;
            for &n in &nodes {
                let u = t.overlap(n, 1);
                if u > 0.0 && (u > best_u || (u == best_u && n < best_n)) {
                    best_u = u;
                    best_n = n;
                }
            }
            assert_eq!(got, best_n);
        }
    }

    #[test]
    fn star_voting_toward_center() {
        // one mask over nodes {a=0,b=1,c=2}, center 0 (largest overlap)
        let t = table(
            &[(0, 10), (1, 10), (2, 10)],
            &[((0, 1), 10), ((1, 1), 8), ((2, 1), 8)],
            &[1],
        );
        let mut g = SceneGraph::new(3);
        accumulate_frame(&mut g, &t, 0.3, DeductionRule::AllVisible);
        assert_eq!(g.votes(0, 1), 1);
        assert_eq!(g.votes(0, 2), 1);
        assert_eq!(g.votes(1, 2), 0);
    }

    #[test]
    fn disjoint_masks_deduct() {
        // masks {a=0,b=1} and {c=2}; deductions across
        let t = table(
            &[(0, 10), (1, 10), (2, 10)],
            &[((0, 1), 10), ((1, 1), 8), ((2, 2), 10)],
            &[1, 2],
        );
        let mut g = SceneGraph::new(3);
        accumulate_frame(&mut g, &t, 0.3, DeductionRule::AllVisible);
        assert_eq!(g.votes(0, 1), 1);
        // mask 1: node 2 outside -> (2,0) and (2,1) each -1
        // mask 2: nodes 0,1 outside -> (0,2), (1,2) each -1
        assert_eq!(g.votes(0, 2), -2);
        assert_eq!(g.votes(1, 2), -2);
    }

    #[test]
    fn other_masks_only_rule_spares_unmasked_nodes() {
        // node 2 is visible but belongs to no mask
        let t = table(
            &[(0, 10), (1, 10), (2, 10)],
            &[((0, 1), 10), ((1, 1), 8)],
            &[1],
        );
        let mut g_all = SceneGraph::new(3);
        accumulate_frame(&mut g_all, &t, 0.3, DeductionRule::AllVisible);
        assert_eq!(g_all.votes(2, 0), -1);
        let mut g_other = SceneGraph::new(3);
        accumulate_frame(&mut g_other, &t, 0.3, DeductionRule::OtherMasksOnly);
        assert_eq!(g_other.votes(2, 0), 0);
    }

    #[test]
    fn below_theta_members_get_no_positive_vote() {
        let t = table(
            &[(0, 10), (1, 10)],
            &[((0, 1), 10), ((1, 1), 2)], // U_1 = 0.2 < theta
            &[1],
        );
        let mut g = SceneGraph::new(2);
        accumulate_frame(&mut g, &t, 0.3, DeductionRule::AllVisible);
        assert_eq!(g.votes(0, 1), 0);
    }

    /// Naive independent voter: literal re-statement of the voting rules.
    fn naive_voter(tables: &[OverlapTable], theta: f64, n: usize) -> SceneGraph {
        let mut g = SceneGraph::new(n);
        for t in tables {
            for &j in &t.mask_ids {
                let vij = t.mask_nodes(j);
                if vij.is_empty() {
                    continue;
                }
                // argmax U_ij
                let mut c = vij[0];
                for &i in &vij {
                    if t.overlap(i, j) > t.overlap(c, j) {
                        c = i;
                    }
                }
                for &k in &vij {
                    if k != c && t.overlap(k, j) >= theta {
                        g.vote(k, c, 1);
                    }
                }
                for i in t.visible_nodes() {
                    if !vij.contains(&i) {
                        for &m in &vij {
                            g.vote(i, m, -1);
                        }
                    }
                }
            }
        }
        g
    }

    #[test]
    fn multi_frame_votes_match_naive_oracle_and_are_order_invariant() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 8usize;
        let mut tables = Vec::new();
        for _ in 0..5 {
            let mut proj = Vec::new();
            let mut inter = Vec::new();
            let mut masks = BTreeSet::new();
            for node in 0..n as u32 {
                if rng.gen_bool(0.8) {
                    let area = rng.gen_range(4u32..40);
                    proj.push((node, area));
                    for mask in 1..=3u32 {
                        if rng.gen_bool(0.4) {
                            let c = rng.gen_range(1..=area);
                            inter.push(((node, mask), c));
                            masks.insert(mask);
                        }
                    }
                }
            }
            tables.push(table(&proj, &inter, &masks.iter().copied().collect::<Vec<_>>()));
        }
        let mut g = SceneGraph::new(n);
        for t in &tables {
            accumulate_frame(&mut g, t, 0.3, DeductionRule::AllVisible);
        }
        let oracle = naive_voter(&tables, 0.3, n);
        assert_eq!(g, oracle);

        // frame-order invariance
        let mut shuffled = tables.clone();
        shuffled.shuffle(&mut rng);
        let mut g2 = SceneGraph::new(n);
        for t in &shuffled {
            accumulate_frame(&mut g2, t, 0.3, DeductionRule::AllVisible);
        }
        assert_eq!(g, g2);

        // symmetry is structural: same value regardless of query order
        for a in 0..n as u32 {
            for b in 0..n as u32 {
                assert_eq!(g.votes(a, b), g.votes(b, a));
            }
        }
    }

    #[test]
    fn all_nonpositive_votes_yield_singletons() {
        let mut g = SceneGraph::new(4);
        g.vote(0, 1, -3);
        g.vote(2, 3, 0);
        let c = cut_and_cluster(&g);
        assert_eq!(c.count(), 4);
        for (node, &cid) in c.node_to_cluster.iter().enumerate() {
            assert_eq!(c.nodes_of(cid), &[node as u32]);
        }
    }

    #[test]
    fn chain_forms_one_cluster() {
        let mut g = SceneGraph::new(3);
        g.vote(0, 1, 2);
        g.vote(1, 2, 1);
        let c = cut_and_cluster(&g);
        assert_eq!(c.count(), 1);
        assert_eq!(c.nodes_of(1), &[0, 1, 2]);
    }

    #[test]
    fn random_graph_components_match_bfs_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.gen_range(2usize..20);
            let mut g = SceneGraph::new(n);
            for a in 0..n as u32 {
                for b in a + 1..n as u32 {
                    if rng.gen_bool(0.3) {
                        g.vote(a, b, rng.gen_range(-3i64..=3));
                    }
                }
            }
            let got = cut_and_cluster(&g);
            // BFS oracle on thresholded adjacency
            let mut comp = vec![usize::MAX; n];
            let mut next = 0usize;
            for s in 0..n {
                if comp[s] != usize::MAX {
                    continue;
                }
                let mut queue = std::collections::VecDeque::from([s]);
                comp[s] = next;
                while let Some(u) = queue.pop_front() {
                    for v in 0..n {
                        if comp[v] == usize::MAX && g.votes(u as u32, v as u32) > 0 {
                            comp[v] = next;
                            queue.push_back(v);
                        }
                    }
                }
                next += 1;
            }
            assert_eq!(got.count(), next);
            for a in 0..n {
                for b in 0..n {
                    assert_eq!(
                        got.node_to_cluster[a] == got.node_to_cluster[b],
                        comp[a] == comp[b]
                    );
                }
            }
        }
    }

    #[test]
    fn stuff_masks_excluded_from_overlap_table() {
        use crate::rasterizer::IdBuffer;
        let mut classes = ClassTable::new();
        let thing = classes.push("chair", ClassKind::Thing);
        let stuff = classes.push("floor", ClassKind::Stuff);
        let mut idbuf = IdBuffer::new(2, 1);
        idbuf.face_id = vec![1, 1]; // face 0 everywhere
        idbuf.depth = vec![1.0, 1.0];
        let seg = SuperfaceSegmentation {
            face_to_superface: vec![0],
            superface_faces: vec![vec![0]],
        };
        let mut labels = LabelImage::empty(2, 1);
        labels.instance_id = vec![5, 9];
        labels.class_id = vec![thing, stuff];
        let t = overlaps(&idbuf, &seg, &labels, &classes);
        assert_eq!(t.mask_ids, vec![5]);
        assert_eq!(t.overlap(0, 5), 0.5);
    }

    #[test]
    fn clusters_file_round_trip() {
        let mut g = SceneGraph::new(5);
        g.vote(0, 1, 2);
        g.vote(3, 4, 1);
        let c = cut_and_cluster(&g);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.bin");
        save_clusters(&path, &c).unwrap();
        assert_eq!(load_clusters(&path).unwrap(), c);
    }
}
