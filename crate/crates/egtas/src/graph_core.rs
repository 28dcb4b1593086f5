//! Graph data structures and the linear algebra behind the graph-aware
//! strategies: normalized Laplacian eigenvectors, adjacency SVD, all-pairs
//! hop distances, and degree statistics.

use crate::linalg::{fix_column_signs, symmetric_eig, Mat};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge endpoint {endpoint} out of range (n = {n})")]
    EndpointOutOfRange { endpoint: usize, n: usize },
    #[error("split masks overlap at node {0}")]
    OverlappingMasks(usize),
    #[error("feature matrix has {got} rows, expected {want}")]
    FeatureRows { got: usize, want: usize },
    #[error("k = {k} too large for this graph (max {max})")]
    KTooLarge { k: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

/// An undirected graph with node features; the unit of evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInstance {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: Mat,
    pub node_labels: Option<Vec<usize>>,
    pub graph_label: Option<f64>,
    pub split_masks: Option<SplitMasks>,
}

impl GraphInstance {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, features: Mat) -> Result<Self, GraphError> {
        let g = GraphInstance {
            n,
            edges,
            features,
            node_labels: None,
            graph_label: None,
            split_masks: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        for &(u, v) in &self.edges {
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            for e in [u, v] {
                if e >= self.n {
                    return Err(GraphError::EndpointOutOfRange { endpoint: e, n: self.n });
                }
            }
        }
        if self.features.rows != self.n {
            return Err(GraphError::FeatureRows { got: self.features.rows, want: self.n });
        }
        if let Some(m) = &self.split_masks {
            for i in 0..self.n {
                let cnt = [m.train.get(i), m.val.get(i), m.test.get(i)]
                    .iter()
                    .filter(|x| **x == Some(&true))
                    .count();
                if cnt > 1 {
                    return Err(GraphError::OverlappingMasks(i));
                }
            }
        }
        Ok(())
    }

    pub fn adjacency(&self) -> Mat {
        let mut a = Mat::zeros(self.n, self.n);
        for &(u, v) in &self.edges {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        a
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            nb[u].push(v);
            nb[v].push(u);
        }
        for l in &mut nb {
            l.sort_unstable();
            l.dedup();
        }
        nb
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors().iter().map(|l| l.len()).collect()
    }

    /// Connected components as a node -> component id map.
    pub fn components(&self) -> Vec<usize> {
        let nb = self.neighbors();
        let mut comp = vec![usize::MAX; self.n];
        let mut next = 0;
        for start in 0..self.n {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut queue = VecDeque::from([start]);
            comp[start] = next;
            while let Some(u) = queue.pop_front() {
                for &v in &nb[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

/// Eigenvectors of the k smallest non-trivial normalized-Laplacian
/// eigenvalues, with deterministic column signs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEmbedding {
    pub vectors: Mat,
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdEmbedding {
    pub left: Mat,
    pub right: Mat,
    pub singular_values: Vec<f64>,
}

pub const UNREACHABLE: u32 = u32::MAX;

/// All-pairs hop counts; `UNREACHABLE` marks disconnected pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub n: usize,
    pub dist: Vec<u32>,
}

impl DistanceMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.dist[i * self.n + j]
    }

    pub fn reachable(&self, i: usize, j: usize) -> bool {
        self.get(i, j) != UNREACHABLE
    }

    /// Largest finite distance; 0 for an edgeless graph.
    pub fn diameter(&self) -> u32 {
        self.dist.iter().filter(|&&d| d != UNREACHABLE).copied().max().unwrap_or(0)
    }
}

/// Normalized Laplacian L = I - D^{-1/2} A D^{-1/2}, with the D^{-1/2}
/// entry of a degree-0 node defined as 0 (its row becomes an identity row).
pub fn normalized_laplacian(g: &GraphInstance) -> Mat {
    let a = g.adjacency();
    let deg = g.degrees();
    let dinv: Vec<f64> =
        deg.iter().map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() }).collect();
    Mat::from_fn(g.n, g.n, |i, j| {
        let norm = dinv[i] * a.get(i, j) * dinv[j];
        if i == j {
            1.0 - norm
        } else {
            -norm
        }
    })
}

/// Eigenvectors of the k smallest non-trivial eigenvalues. One zero
/// eigenvalue per connected component with at least one edge is skipped
/// (isolated nodes contribute eigenvalue 1 under the D^{-1/2} = 0 rule,
/// not 0, so they are not skipped).
pub fn normalized_laplacian_eig(
    g: &GraphInstance,
    k: usize,
) -> Result<SpectralEmbedding, GraphError> {
    if g.n == 0 || k > g.n - 1 {
        return Err(GraphError::KTooLarge { k, max: g.n.saturating_sub(1) });
    }
    let lap = normalized_laplacian(g);
    let (vals, vecs) = symmetric_eig(&lap);
    let comp = g.components();
    let deg = g.degrees();
    let mut nontrivial = vec![false; g.n];
    for (node, &c) in comp.iter().enumerate() {
        if deg[node] > 0 {
            nontrivial[c] = true;
        }
    }
    let skip = nontrivial.iter().filter(|&&b| b).count();
    if k > g.n - skip {
        return Err(GraphError::KTooLarge { k, max: g.n - skip });
    }
    debug_assert!(vals.iter().take(skip).all(|v| v.abs() < 1e-7));
    let eigenvalues: Vec<f64> = vals[skip..skip + k].iter().map(|v| v.max(0.0)).collect();
    let mut vectors = Mat::from_fn(g.n, k, |i, j| vecs.get(i, skip + j));
    fix_column_signs(&mut vectors, 1e-10);
    Ok(SpectralEmbedding { vectors, eigenvalues })
}

/// Top-k singular triplets of the adjacency matrix, returned in the
/// scaled form U*sqrt(S), V*sqrt(S). The adjacency of an undirected graph
/// is symmetric, so the SVD follows from its eigendecomposition.
pub fn adjacency_svd(g: &GraphInstance, k: usize) -> Result<SvdEmbedding, GraphError> {
    if k > g.n {
        return Err(GraphError::KTooLarge { k, max: g.n });
    }
    let a = g.adjacency();
    let (vals, vecs) = symmetric_eig(&a);
    // sort by |eigenvalue| descending; sigma = |lambda|, v = sign(lambda) * u
    let mut order: Vec<usize> = (0..g.n).collect();
    order.sort_by(|&i, &j| vals[j].abs().partial_cmp(&vals[i].abs()).unwrap());
    let top = &order[..k];
    let singular_values: Vec<f64> = top.iter().map(|&i| vals[i].abs()).collect();
    let mut u = Mat::from_fn(g.n, k, |i, j| vecs.get(i, top[j]));
    // flipping u[j] flips v[j] too, so the product u v^T is unchanged
    fix_column_signs(&mut u, 1e-10);
    let left = Mat::from_fn(g.n, k, |i, j| u.get(i, j) * singular_values[j].sqrt());
    let right = Mat::from_fn(g.n, k, |i, j| {
        let lam_sign = if vals[top[j]] >= 0.0 { 1.0 } else { -1.0 };
        u.get(i, j) * lam_sign * singular_values[j].sqrt()
    });
    Ok(SvdEmbedding { left, right, singular_values })
}

/// BFS from every node; hop counts with `UNREACHABLE` for disconnected pairs.
pub fn bfs_all_pairs(g: &GraphInstance) -> DistanceMatrix {
    let nb = g.neighbors();
    let mut dist = vec![UNREACHABLE; g.n * g.n];
    for s in 0..g.n {
        dist[s * g.n + s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            let du = dist[s * g.n + u];
            for &v in &nb[u] {
                if dist[s * g.n + v] == UNREACHABLE {
                    dist[s * g.n + v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    DistanceMatrix { n: g.n, dist }
}

/// For undirected graphs both vectors equal the node degree.
pub fn degree_vectors(g: &GraphInstance) -> (Vec<usize>, Vec<usize>) {
    let deg = g.degrees();
    (deg.clone(), deg)
}

/// Common-neighbor counts for every node pair.
pub fn common_neighbor_counts(g: &GraphInstance) -> Vec<usize> {
    let nb = g.neighbors();
    let mut is_nb = vec![false; g.n];
    let mut out = vec![0usize; g.n * g.n];
    for i in 0..g.n {
        for &x in &nb[i] {
            is_nb[x] = true;
        }
        for j in 0..g.n {
            out[i * g.n + j] = nb[j].iter().filter(|&&x| is_nb[x]).count();
        }
        for &x in &nb[i] {
            is_nb[x] = false;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> GraphInstance {
        GraphInstance::new(n, edges.to_vec(), Mat::zeros(n, 1)).unwrap()
    }

    #[test]
    fn rejects_self_loops_and_bad_endpoints() {
        assert_eq!(
            GraphInstance::new(2, vec![(0, 0)], Mat::zeros(2, 1)).unwrap_err(),
            GraphError::SelfLoop(0)
        );
        assert_eq!(
            GraphInstance::new(2, vec![(0, 5)], Mat::zeros(2, 1)).unwrap_err(),
            GraphError::EndpointOutOfRange { endpoint: 5, n: 2 }
        );
    }

    #[test]
    fn k2_spectrum_is_zero_and_two() {
        let g = graph(2, &[(0, 1)]);
        let lap = normalized_laplacian(&g);
        let (vals, _) = crate::linalg::symmetric_eig(&lap);
        assert!((vals[0] - 0.0).abs() < 1e-10);
        assert!((vals[1] - 2.0).abs() < 1e-10);
        // full non-trivial spectrum: skip the single zero, k = 1
        let emb = normalized_laplacian_eig(&g, 1).unwrap();
        assert!((emb.eigenvalues[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn triangle_nontrivial_eigenvalues_are_three_halves() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let emb = normalized_laplacian_eig(&g, 2).unwrap();
        for v in &emb.eigenvalues {
            assert!((v - 1.5).abs() < 1e-9, "got {v}");
        }
    }

    #[test]
    fn laplacian_eig_columns_orthonormal_and_residual_small() {
        let g = graph(7, &[(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (4, 5), (5, 6)]);
        let k = 4;
        let emb = normalized_laplacian_eig(&g, k).unwrap();
        let lap = normalized_laplacian(&g);
        for j in 0..k {
            assert!(emb.eigenvalues[j] >= 0.0 && emb.eigenvalues[j] <= 2.0 + 1e-12);
            let u = emb.vectors.column(j);
            let mut resid: f64 = 0.0;
            for i in 0..g.n {
                let lu: f64 = (0..g.n).map(|t| lap.get(i, t) * u[t]).sum();
                resid = resid.max((lu - emb.eigenvalues[j] * u[i]).abs());
            }
            assert!(resid <= 1e-7, "residual {resid}");
            for j2 in 0..k {
                let dot: f64 = (0..g.n).map(|i| u[i] * emb.vectors.get(i, j2)).sum();
                let want = if j == j2 { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
        }
        // ascending order
        for w in emb.eigenvalues.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
    }

    #[test]
    fn isolated_nodes_do_not_consume_a_skip() {
        // K2 plus an isolated node: one zero eigenvalue (from the edge
        // component), the isolated node contributes eigenvalue 1.
        let g = graph(3, &[(0, 1)]);
        let emb = normalized_laplacian_eig(&g, 2).unwrap();
        assert!((emb.eigenvalues[0] - 1.0).abs() < 1e-10);
        assert!((emb.eigenvalues[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn k_too_large_errors() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        assert!(normalized_laplacian_eig(&g, 3).is_err());
        assert!(adjacency_svd(&g, 4).is_err());
    }

    #[test]
    fn k2_singular_values_are_ones() {
        let g = graph(2, &[(0, 1)]);
        let svd = adjacency_svd(&g, 2).unwrap();
        assert!((svd.singular_values[0] - 1.0).abs() < 1e-10);
        assert!((svd.singular_values[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn star_top_singular_value_is_sqrt3() {
        let g = graph(4, &[(0, 1), (0, 2), (0, 3)]);
        let svd = adjacency_svd(&g, 1).unwrap();
        assert!((svd.singular_values[0] - 3.0f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn empty_graph_singular_values_zero() {
        let g = graph(3, &[]);
        let svd = adjacency_svd(&g, 3).unwrap();
        assert!(svd.singular_values.iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn full_rank_svd_reconstructs_adjacency() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)]);
        let svd = adjacency_svd(&g, g.n).unwrap();
        let recon = svd.left.matmul(&svd.right.transpose());
        assert!(recon.sub(&g.adjacency()).frobenius_norm() < 1e-7);
        // non-increasing singular values
        for w in svd.singular_values.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn path_distance_and_disconnected_pairs() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let d = bfs_all_pairs(&g);
        assert_eq!(d.get(0, 2), 2);
        let g2 = graph(4, &[(0, 1), (2, 3)]);
        let d2 = bfs_all_pairs(&g2);
        assert_eq!(d2.get(0, 2), UNREACHABLE);
        assert_eq!(d2.get(1, 3), UNREACHABLE);
        assert_eq!(d2.get(0, 1), 1);
    }

    #[test]
    fn bfs_matches_floyd_warshall_on_random_graph() {
        // fixed 8-node pseudo-random graph
        let edges = vec![(0, 1), (0, 4), (1, 5), (2, 6), (3, 7), (4, 6), (5, 7), (1, 2)];
        let g = graph(8, &edges);
        let d = bfs_all_pairs(&g);
        // Floyd-Warshall oracle on unit weights
        let inf = u32::MAX / 4;
        let mut fw = vec![inf; 64];
        for i in 0..8 {
            fw[i * 8 + i] = 0;
        }
        for &(u, v) in &edges {
            fw[u * 8 + v] = 1;
            fw[v * 8 + u] = 1;
        }
        for k in 0..8 {
            for i in 0..8 {
                for j in 0..8 {
                    let via = fw[i * 8 + k] + fw[k * 8 + j];
                    if via < fw[i * 8 + j] {
                        fw[i * 8 + j] = via;
                    }
                }
            }
        }
        for i in 0..8 {
            for j in 0..8 {
                let want = if fw[i * 8 + j] >= inf { UNREACHABLE } else { fw[i * 8 + j] };
                assert_eq!(d.get(i, j), want, "pair ({i},{j})");
                assert_eq!(d.get(i, j), d.get(j, i));
            }
        }
    }

    #[test]
    fn degree_vectors_examples() {
        let g = graph(4, &[(0, 1), (0, 2), (0, 3)]);
        let (din, dout) = degree_vectors(&g);
        assert_eq!(din, vec![3, 1, 1, 1]);
        assert_eq!(din, dout);
        let iso = graph(2, &[]);
        assert_eq!(degree_vectors(&iso).0, vec![0, 0]);
        let k3 = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(degree_vectors(&k3).0, vec![2, 2, 2]);
    }

    #[test]
    fn common_neighbors_triangle() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let cn = common_neighbor_counts(&g);
        // nodes 0 and 1 share neighbor 2
        assert_eq!(cn[1], 1);
        // node with itself: all its neighbors
        assert_eq!(cn[0], 2);
    }
}
