//! Initial normal orientation: PCA normals plus greedy sign propagation over
//! a minimum spanning tree of the normal-similarity graph.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{extract_patch, PointCloud, SpatialIndex};

/// Where an oriented field came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalSource {
    MstInit,
    Network,
    External,
}

/// Per-point oriented normals plus the sign applied to the unoriented input.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedNormalField {
    pub normals: Vec<Vector3<f64>>,
    pub signs: Vec<i8>,
    pub source: NormalSource,
}

/// Symmetric k-NN graph with edge weights 1 - |n_i . n_j|, augmented with
/// bridge edges so that it is connected. The seed vertex (maximal z, ties by
/// lower index) is fixed at construction.
#[derive(Debug, Clone)]
pub struct RiemannianGraph {
    pub vertex_count: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub k: usize,
    pub seed: usize,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

fn edge_weight(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (1.0 - a.dot(b).abs()).max(0.0)
}

/// Builds the k-NN orientation graph. Disconnected k-NN graphs (sparse or
/// density-starved clouds) are joined by minimal-distance bridge edges.
pub fn riemannian_graph(
    cloud: &PointCloud,
    unoriented: &[Vector3<f64>],
    k: usize,
) -> Result<RiemannianGraph> {
    let n = cloud.len();
    if unoriented.len() != n {
        return Err(Error::LengthMismatch {
            what: "cloud points vs unoriented normals".into(),
            left: n,
            right: unoriented.len(),
        });
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "riemannian graph needs k >= 2, got {}",
            k
        )));
    }
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "riemannian graph: k={} must be below cloud size {}",
            k, n
        )));
    }

    let index = SpatialIndex::build(&cloud.points)?;
    let mut uf = UnionFind::new(n);
    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut neighbor_lists: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let neighbors = index.knn(&cloud.points[i], (k + 1).min(n))?;
        let mut list = Vec::with_capacity(k);
        for &(j, dist) in &neighbors {
            if j == i {
                continue;
            }
            list.push((j, dist));
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                edges.push((key.0, key.1, edge_weight(&unoriented[i], &unoriented[j])));
                uf.union(i, j);
            }
        }
        neighbor_lists.push(list);
    }

    // Join remaining components through their closest point pairs.
    loop {
        let roots: std::collections::HashSet<usize> = (0..n).map(|i| uf.find(i)).collect();
        if roots.len() <= 1 {
            break;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for &(j, dist) in &neighbor_lists[i] {
                if uf.find(i) != uf.find(j) {
                    let cand = (dist, i.min(j), i.max(j));
                    if best.map_or(true, |b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
        }
        if best.is_none() {
            // No cross-component pair within k-NN range; fall back to a scan.
            for i in 0..n {
                for j in (i + 1)..n {
                    if uf.find(i) != uf.find(j) {
                        let cand = ((cloud.points[i] - cloud.points[j]).norm(), i, j);
                        if best.map_or(true, |b| cand < b) {
                            best = Some(cand);
                        }
                    }
                }
            }
        }
        let (_, i, j) = best.expect("multiple components imply a bridging pair");
        edges.push((i, j, edge_weight(&unoriented[i], &unoriented[j])));
        uf.union(i, j);
    }

    // Seed: maximal z coordinate, ties broken by lower index.
    let mut seed = 0;
    for i in 1..n {
        if cloud.points[i].z > cloud.points[seed].z {
            seed = i;
        }
    }

    Ok(RiemannianGraph {
        vertex_count: n,
        edges,
        k,
        seed,
    })
}

/// Orients the field by propagating signs depth-first along a minimum
/// spanning tree from the seed. The seed's sign makes its normal's z
/// component nonnegative; a child flips whenever the parent's oriented
/// normal and the child's unoriented normal disagree.
pub fn mst_orient(
    graph: &RiemannianGraph,
    unoriented: &[Vector3<f64>],
) -> Result<OrientedNormalField> {
    let seed_sign = if unoriented[graph.seed].z < 0.0 { -1 } else { 1 };
    mst_orient_with_seed_sign(graph, unoriented, seed_sign)
}

/// As [`mst_orient`] with an explicit seed sign (propagation is
/// sign-equivariant: flipping the seed flips every output).
pub fn mst_orient_with_seed_sign(
    graph: &RiemannianGraph,
    unoriented: &[Vector3<f64>],
    seed_sign: i8,
) -> Result<OrientedNormalField> {
    let n = graph.vertex_count;
    if unoriented.len() != n {
        return Err(Error::LengthMismatch {
            what: "graph vertices vs unoriented normals".into(),
            left: n,
            right: unoriented.len(),
        });
    }

    let parent = minimum_spanning_tree(graph)?;

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (v, &p) in parent.iter().enumerate() {
        if v != graph.seed {
            children[p].push(v);
        }
    }
    for c in &mut children {
        c.sort_unstable();
    }

    let mut signs = vec![0i8; n];
    signs[graph.seed] = seed_sign;
    // DFS from the seed, children visited in ascending index.
    let mut stack = vec![graph.seed];
    while let Some(v) = stack.pop() {
        let oriented_v = unoriented[v] * signs[v] as f64;
        // Reverse so the lowest-index child is processed first.
        for &c in children[v].iter().rev() {
            signs[c] = if oriented_v.dot(&unoriented[c]) < 0.0 { -1 } else { 1 };
            stack.push(c);
        }
    }

    let normals = unoriented
        .iter()
        .zip(&signs)
        .map(|(n, &s)| n * s as f64)
        .collect();
    Ok(OrientedNormalField {
        normals,
        signs,
        source: NormalSource::MstInit,
    })
}

/// Prim's algorithm from the seed; returns the parent of every vertex.
/// Errors when the graph is disconnected.
fn minimum_spanning_tree(graph: &RiemannianGraph) -> Result<Vec<usize>> {
    let n = graph.vertex_count;
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, w) in &graph.edges {
        adj[i].push((j, w));
        adj[j].push((i, w));
    }

    #[derive(PartialEq)]
    struct Item(f64, usize, usize); // (weight, vertex, parent)
    impl Eq for Item {}
    impl Ord for Item {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // Reversed for a min-heap; ties by lower vertex index.
            other
                .0
                .total_cmp(&self.0)
                .then(other.1.cmp(&self.1))
                .then(other.2.cmp(&self.2))
        }
    }
    impl PartialOrd for Item {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let mut parent = vec![usize::MAX; n];
    let mut in_tree = vec![false; n];
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(Item(0.0, graph.seed, graph.seed));
    let mut count = 0;
    while let Some(Item(_, v, p)) = heap.pop() {
        if in_tree[v] {
            continue;
        }
        in_tree[v] = true;
        parent[v] = p;
        count += 1;
        for &(u, w) in &adj[v] {
            if !in_tree[u] {
                heap.push(Item(w, u, v));
            }
        }
    }
    if count != n {
        return Err(Error::Degenerate(format!(
            "orientation graph is disconnected ({} of {} vertices reachable)",
            count, n
        )));
    }
    Ok(parent)
}

/// Total weight of the minimum spanning tree (invariant across tie-breaks).
pub fn mst_total_weight(graph: &RiemannianGraph) -> Result<f64> {
    let parent = minimum_spanning_tree(graph)?;
    let mut lookup = std::collections::HashMap::new();
    for &(i, j, w) in &graph.edges {
        let key = (i.min(j), i.max(j));
        let e = lookup.entry(key).or_insert(w);
        if w < *e {
            *e = w;
        }
    }
    let mut total = 0.0;
    for (v, &p) in parent.iter().enumerate() {
        if v != graph.seed {
            total += lookup[&(v.min(p), v.max(p))];
        }
    }
    Ok(total)
}

/// PCA normals over `k_pca` neighbors followed by MST sign propagation over a
/// `k_graph` Riemannian graph.
pub fn init_oriented_normals(
    cloud: &PointCloud,
    k_pca: usize,
    k_graph: usize,
) -> Result<OrientedNormalField> {
    if cloud.len() <= k_pca.max(k_graph) {
        return Err(Error::InvalidArgument(format!(
            "cloud size {} must exceed max(k_pca={}, k_graph={})",
            cloud.len(),
            k_pca,
            k_graph
        )));
    }
    let index = SpatialIndex::build(&cloud.points)?;
    let unoriented = pca_normals(cloud, &index, k_pca)?;
    let graph = riemannian_graph(cloud, &unoriented, k_graph)?;
    mst_orient(&graph, &unoriented)
}

/// Per-point unoriented PCA normals, computed through the same patch
/// machinery the network front-end uses.
pub fn pca_normals(
    cloud: &PointCloud,
    index: &SpatialIndex,
    k_pca: usize,
) -> Result<Vec<Vector3<f64>>> {
    (0..cloud.len())
        .map(|i| Ok(extract_patch(cloud, index, i, k_pca)?.pca_normal()))
        .collect()
}
