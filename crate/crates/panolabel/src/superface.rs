//! Cluster mesh faces into superfaces by normal similarity using the
//! Felzenszwalb–Huttenlocher graph criterion over shared-edge adjacency,
//! then collapse each superface to a superpoint (area-weighted centroid +
//! mean normal).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::scene_io::TriMesh;
use crate::{Error, Result};

/// One edge of the face-adjacency graph with a normal-dissimilarity weight
/// in [0, 2]: w = 1 − n_a·n_b.
#[derive(Debug, Clone, Copy)]
pub struct GraphEdge {
    pub a: u32,
    pub b: u32,
    pub weight: f64,
}

/// Disjoint face partition plus per-superface summary geometry.
#[derive(Debug, Clone)]
pub struct SuperfaceSegmentation {
    /// face index → superface id (dense from 0).
    pub face_to_superface: Vec<u32>,
    /// superface id → face indices, ascending.
    pub superface_faces: Vec<Vec<u32>>,
}

impl SuperfaceSegmentation {
    pub fn count(&self) -> usize {
        self.superface_faces.len()
    }
}

/// Area-weighted centroid and mean normal of a superface.
#[derive(Debug, Clone, Copy)]
pub struct Superpoint {
    pub centroid: Point3<f64>,
    pub normal: Vector3<f64>,
    pub area: f64,
}

/// One edge per shared mesh edge, weight = 1 − dot of the face normals.
pub fn build_normal_graph(mesh: &TriMesh) -> Vec<GraphEdge> {
    // canonicalize duplicated vertices by quantized position, so triangle
    // soups (no shared indices) still yield face adjacency
    let mut canon_of_pos: BTreeMap<(i64, i64, i64), u32> = BTreeMap::new();
    let canon: Vec<u32> = mesh
        .vertices
        .iter()
        .enumerate()
        .map(|(vi, p)| {
            let key = (
                (p.x * 1e9).round() as i64,
                (p.y * 1e9).round() as i64,
                (p.z * 1e9).round() as i64,
            );
            *canon_of_pos.entry(key).or_insert(vi as u32)
        })
        .collect();
    let mut edge_faces: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for (fi, face) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let va = canon[face[k] as usize];
            let vb = canon[face[(k + 1) % 3] as usize];
            let key = (va.min(vb), va.max(vb));
            edge_faces.entry(key).or_default().push(fi as u32);
        }
    }
    let mut edges = Vec::new();
    for faces in edge_faces.values() {
        // non-manifold edges connect every face pair sharing the edge
        for i in 0..faces.len() {
            for j in i + 1..faces.len() {
                let a = faces[i];
                let b = faces[j];
                let w = 1.0 - mesh.face_normals[a as usize].dot(&mesh.face_normals[b as usize]);
                edges.push(GraphEdge { a, b, weight: w });
            }
        }
    }
    edges
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        // deterministic: lower root wins
        let (keep, drop) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[drop as usize] = keep;
        self.size[keep as usize] += self.size[drop as usize];
        keep
    }
}

/// FH segmentation: visit edges by (weight, index); merge when the edge
/// weight is ≤ min over both components of (internal difference + k/size).
/// A second pass merges components smaller than `min_size` into their
/// lowest-weight neighbor.
pub fn segment(face_count: usize, edges: &[GraphEdge], k: f64, min_size: usize) -> SuperfaceSegmentation {
    assert!(k > 0.0, "k must be positive");
    assert!(min_size >= 1, "min_size must be >= 1");
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&i, &j| {
        edges[i]
            .weight
            .partial_cmp(&edges[j].weight)
            .unwrap()
            .then(i.cmp(&j))
    });

    let mut uf = UnionFind::new(face_count);
    let mut internal = vec![0.0f64; face_count]; // max internal weight per root
    for &ei in &order {
        let e = edges[ei];
        let ra = uf.find(e.a);
        let rb = uf.find(e.b);
        if ra == rb {
            continue;
        }
        let ta = internal[ra as usize] + k / uf.size[ra as usize] as f64;
        let tb = internal[rb as usize] + k / uf.size[rb as usize] as f64;
        if e.weight <= ta.min(tb) {
            let r = uf.union(ra, rb);
            internal[r as usize] = internal[r as usize].max(e.weight);
        }
    }
    // small-component merge: ascending edge order means each small component
    // joins across its lowest-weight boundary edge first
    for &ei in &order {
        let e = edges[ei];
        let ra = uf.find(e.a);
        let rb = uf.find(e.b);
        if ra != rb
            && ((uf.size[ra as usize] as usize) < min_size
                || (uf.size[rb as usize] as usize) < min_size)
        {
            uf.union(ra, rb);
        }
    }

    // dense ids in order of first face occurrence
    let mut id_of_root: BTreeMap<u32, u32> = BTreeMap::new();
    let mut face_to_superface = vec![0u32; face_count];
    let mut superface_faces: Vec<Vec<u32>> = Vec::new();
    for fi in 0..face_count as u32 {
        let r = uf.find(fi);
        let id = *id_of_root.entry(r).or_insert_with(|| {
            superface_faces.push(Vec::new());
            (superface_faces.len() - 1) as u32
        });
        face_to_superface[fi as usize] = id;
        superface_faces[id as usize].push(fi);
    }
    SuperfaceSegmentation {
        face_to_superface,
        superface_faces,
    }
}

/// Area-weighted centroid and renormalized mean normal per superface.
pub fn superpoints(mesh: &TriMesh, seg: &SuperfaceSegmentation) -> Result<Vec<Superpoint>> {
    let mut out = Vec::with_capacity(seg.count());
    for (sid, faces) in seg.superface_faces.iter().enumerate() {
        let mut area = 0.0;
        let mut centroid = Vector3::zeros();
        let mut normal = Vector3::zeros();
        for &fi in faces {
            let a = mesh.face_area(fi as usize);
            area += a;
            centroid += mesh.face_centroid(fi as usize).coords * a;
            normal += mesh.face_normals[fi as usize] * a;
        }
        if area <= 0.0 {
            return Err(Error::DegenerateSuperface(sid as u32));
        }
        let n_norm = normal.norm();
        out.push(Superpoint {
            centroid: Point3::from(centroid / area),
            normal: if n_norm > 0.0 {
                normal / n_norm
            } else {
                Vector3::zeros()
            },
            area,
        });
    }
    Ok(out)
}

/// seg.bin: magic "PSEG", u32 face_count, face_count × u32 superface ids.
pub fn save_segmentation(path: &Path, seg: &SuperfaceSegmentation) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * seg.face_to_superface.len());
    out.extend_from_slice(b"PSEG");
    out.extend_from_slice(&(seg.face_to_superface.len() as u32).to_le_bytes());
    for &id in &seg.face_to_superface {
        out.extend_from_slice(&id.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_segmentation(path: &Path) -> Result<SuperfaceSegmentation> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != b"PSEG" {
        return Err(Error::Format(format!("{}: bad PSEG header", path.display())));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * n {
        return Err(Error::Format(format!("{}: bad PSEG payload", path.display())));
    }
    let mut face_to_superface = Vec::with_capacity(n);
    for i in 0..n {
        face_to_superface.push(u32::from_le_bytes(
            bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap(),
        ));
    }
    let count = face_to_superface.iter().map(|&i| i + 1).max().unwrap_or(0) as usize;
    let mut superface_faces = vec![Vec::new(); count];
    for (fi, &sid) in face_to_superface.iter().enumerate() {
        superface_faces[sid as usize].push(fi as u32);
    }
    Ok(SuperfaceSegmentation {
        face_to_superface,
        superface_faces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_plane(n: usize) -> TriMesh {
        // (n+1)^2 vertices on z=0, 2n^2 faces
        let mut vertices = Vec::new();
        for y in 0..=n {
            for x in 0..=n {
                vertices.push(Point3::new(x as f64, y as f64, 0.0));
            }
        }
        let idx = |x: usize, y: usize| (y * (n + 1) + x) as u32;
        let mut faces = Vec::new();
        for y in 0..n {
            for x in 0..n {
                faces.push([idx(x, y), idx(x + 1, y), idx(x + 1, y + 1)]);
                faces.push([idx(x, y), idx(x + 1, y + 1), idx(x, y + 1)]);
            }
        }
        TriMesh::new(vertices, faces).unwrap()
    }

    fn cube() -> TriMesh {
        let vs = [
            [0., 0., 0.],
            [1., 0., 0.],
            [1., 1., 0.],
            [0., 1., 0.],
            [0., 0., 1.],
            [1., 0., 1.],
            [1., 1., 1.],
            [0., 1., 1.],
        ];
        let quads: [[u32; 4]; 6] = [
            [0, 3, 2, 1],
            [4, 5, 6, 7],
            [0, 1, 5, 4],
            [2, 3, 7, 6],
            [0, 4, 7, 3],
            [1, 2, 6, 5],
        ];
        let vertices = vs.iter().map(|v| Point3::new(v[0], v[1], v[2])).collect();
        let mut faces = Vec::new();
        for q in quads {
            faces.push([q[0], q[1], q[2]]);
            faces.push([q[0], q[2], q[3]]);
        }
        TriMesh::new(vertices, faces).unwrap()
    }

    #[test]
    fn coplanar_pair_weight_zero() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(0., 0., 0.),
                Point3::new(1., 0., 0.),
                Point3::new(1., 1., 0.),
                Point3::new(0., 1., 0.),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let edges = build_normal_graph(&mesh);
        assert_eq!(edges.len(), 1);
        assert!(edges[0].weight.abs() < 1e-12);
    }

    #[test]
    fn perpendicular_pair_weight_one() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(0., 0., 0.),
                Point3::new(1., 0., 0.),
                Point3::new(0., 1., 0.),
                Point3::new(0., 0., 1.),
            ],
            vec![[0, 1, 2], [0, 3, 1]],
        )
        .unwrap();
        let edges = build_normal_graph(&mesh);
        assert_eq!(edges.len(), 1);
        assert!((edges[0].weight - 1.0).abs() < 1e-12);
    }

    fn icosphere() -> TriMesh {
        // icosahedron (level-0 icosphere)
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
        let vertices: Vec<Point3<f64>> = raw
            .iter()
            .map(|v| Point3::from(Vector3::new(v[0], v[1], v[2]).normalize()))
            .collect();
        let faces: Vec<[u32; 3]> = vec![
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
        TriMesh::new(vertices, faces).unwrap()
    }

    #[test]
    fn icosphere_weights_equal_by_symmetry() {
        let edges = build_normal_graph(&icosphere());
        assert_eq!(edges.len(), 30);
        let w0 = edges[0].weight;
        for e in &edges {
            assert!((e.weight - w0).abs() < 1e-6, "weight {} vs {}", e.weight, w0);
        }
    }

    #[test]
    fn flat_plane_is_one_superface() {
        let mesh = grid_plane(10);
        let edges = build_normal_graph(&mesh);
        for k in [0.001, 0.05, 1.0] {
            let seg = segment(mesh.faces.len(), &edges, k, 1);
            assert_eq!(seg.count(), 1);
        }
    }

    /// Brute-force FH: same predicate, naive scan implementation.
    fn fh_oracle(face_count: usize, edges: &[GraphEdge], k: f64) -> Vec<u32> {
        let mut comp: Vec<u32> = (0..face_count as u32).collect();
        let mut internal: BTreeMap<u32, f64> = BTreeMap::new();
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_by(|&i, &j| {
            edges[i]
                .weight
                .partial_cmp(&edges[j].weight)
                .unwrap()
                .then(i.cmp(&j))
        });
        for &ei in &order {
            let e = edges[ei];
            let ca = comp[e.a as usize];
            let cb = comp[e.b as usize];
            if ca == cb {
                continue;
            }
            let size = |c: u32| comp.iter().filter(|&&x| x == c).count() as f64;
            let ta = internal.get(&ca).copied().unwrap_or(0.0) + k / size(ca);
            let tb = internal.get(&cb).copied().unwrap_or(0.0) + k / size(cb);
            if e.weight <= ta.min(tb) {
                let keep = ca.min(cb);
                let drop = ca.max(cb);
                for c in comp.iter_mut() {
                    if *c == drop {
                        *c = keep;
                    }
                }
                let m = internal
                    .get(&keep)
                    .copied()
                    .unwrap_or(0.0)
                    .max(internal.get(&drop).copied().unwrap_or(0.0))
                    .max(e.weight);
                internal.insert(keep, m);
            }
        }
        comp
    }

    fn partitions_equal(a: &[u32], b: &[u32]) -> bool {
        let mut map_ab: BTreeMap<u32, u32> = BTreeMap::new();
        let mut map_ba: BTreeMap<u32, u32> = BTreeMap::new();
        for (&x, &y) in a.iter().zip(b) {
            if *map_ab.entry(x).or_insert(y) != y {
                return false;
            }
            if *map_ba.entry(y).or_insert(x) != x {
                return false;
            }
        }
        true
    }

    #[test]
    fn perpendicular_planes_split_at_crease() {
        // two 2x2 grids meeting at a right angle along y axis
        let mut vertices = Vec::new();
        for y in 0..=2 {
            for x in 0..=2 {
                vertices.push(Point3::new(x as f64, y as f64, 0.0));
            }
        }
        let base = vertices.len() as u32;
        for y in 0..=2 {
            for z in 1..=2 {
                vertices.push(Point3::new(0.0, y as f64, z as f64));
            }
        }
        let idx = |x: u32, y: u32| y * 3 + x;
        let widx = |z: u32, y: u32| base + y * 2 + (z - 1);
        let mut faces = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                faces.push([idx(x, y), idx(x + 1, y), idx(x + 1, y + 1)]);
                faces.push([idx(x, y), idx(x + 1, y + 1), idx(x, y + 1)]);
            }
        }
        for y in 0..2 {
            // wall plane x=0: connect column x=0 of the floor to z rows
            faces.push([idx(0, y), widx(1, y), widx(1, y + 1)]);
            faces.push([idx(0, y), widx(1, y + 1), idx(0, y + 1)]);
            faces.push([widx(1, y), widx(2, y), widx(2, y + 1)]);
            faces.push([widx(1, y), widx(2, y + 1), widx(1, y + 1)]);
        }
        let mesh = TriMesh::new(vertices, faces).unwrap();
        let edges = build_normal_graph(&mesh);
        let seg = segment(mesh.faces.len(), &edges, 0.05, 1);
        assert_eq!(seg.count(), 2);
        let oracle = fh_oracle(mesh.faces.len(), &edges, 0.05);
        assert!(partitions_equal(&seg.face_to_superface, &oracle));
    }

    #[test]
    fn cube_splits_into_six_facets() {
        let mesh = cube();
        let edges = build_normal_graph(&mesh);
        let seg = segment(mesh.faces.len(), &edges, 0.1, 1);
        assert_eq!(seg.count(), 6);
        let oracle = fh_oracle(mesh.faces.len(), &edges, 0.1);
        assert!(partitions_equal(&seg.face_to_superface, &oracle));
    }

    #[test]
    fn partition_and_determinism() {
        let mesh = cube();
        let edges = build_normal_graph(&mesh);
        let seg1 = segment(mesh.faces.len(), &edges, 0.1, 1);
        let seg2 = segment(mesh.faces.len(), &edges, 0.1, 1);
        assert_eq!(seg1.face_to_superface, seg2.face_to_superface);
        let total: usize = seg1.superface_faces.iter().map(|f| f.len()).sum();
        assert_eq!(total, mesh.faces.len());
        let mut seen = vec![false; mesh.faces.len()];
        for faces in &seg1.superface_faces {
            for &f in faces {
                assert!(!seen[f as usize]);
                seen[f as usize] = true;
            }
        }
    }

    #[test]
    fn larger_k_never_more_superfaces() {
        let mesh = icosphere();
        let edges = build_normal_graph(&mesh);
        let mut prev = usize::MAX;
        for k in [0.01, 0.05, 0.2, 1.0, 5.0] {
            let n = segment(mesh.faces.len(), &edges, k, 1).count();
            assert!(n <= prev, "k {k}: {n} > {prev}");
            prev = n;
        }
    }

    #[test]
    fn min_size_merges_small_components() {
        let mesh = cube();
        let edges = build_normal_graph(&mesh);
        // each facet has 2 faces; min_size 3 forces merges across creases
        let seg = segment(mesh.faces.len(), &edges, 0.1, 3);
        for faces in &seg.superface_faces {
            assert!(faces.len() >= 3);
        }
    }

    #[test]
    fn cube_facet_superpoint_centroid() {
        let mesh = cube();
        let edges = build_normal_graph(&mesh);
        let seg = segment(mesh.faces.len(), &edges, 0.1, 1);
        let sps = superpoints(&mesh, &seg).unwrap();
        assert_eq!(sps.len(), 6);
        // bottom facet faces {0,1}: centroid (0.5, 0.5, 0), normal -z
        let sid = seg.face_to_superface[0] as usize;
        let sp = sps[sid];
        assert!((sp.centroid - Point3::new(0.5, 0.5, 0.0)).norm() < 1e-6);
        assert!((sp.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        assert!((sp.area - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_centroid_on_symmetry_plane() {
        // two mirror-image coplanar triangles about x = 0
        let mesh = TriMesh::new(
            vec![
                Point3::new(-1.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, -1.0, 0.0),
            ],
            vec![[0, 1, 2], [1, 0, 3]],
        )
        .unwrap();
        let seg = SuperfaceSegmentation {
            face_to_superface: vec![0, 0],
            superface_faces: vec![vec![0, 1]],
        };
        let sp = superpoints(&mesh, &seg).unwrap()[0];
        assert!(sp.centroid.x.abs() < 1e-12);
    }

    #[test]
    fn segmentation_file_round_trip() {
        let mesh = cube();
        let edges = build_normal_graph(&mesh);
        let seg = segment(mesh.faces.len(), &edges, 0.1, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.bin");
        save_segmentation(&path, &seg).unwrap();
        let loaded = load_segmentation(&path).unwrap();
        assert_eq!(loaded.face_to_superface, seg.face_to_superface);
    }
}
