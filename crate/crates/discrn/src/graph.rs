//! Communication graphs: Laplacian construction, spectral bounds, and the
//! mixing matrix used by the consensus subsolver.
//!
//! Graphs are undirected with unit edge weights. Connectivity is required
//! everywhere downstream (the inner solver's step size and stopping
//! criterion both depend on `lambda2 > 0`), so construction fails rather
//! than returning a disconnected graph. The eigenvalue check is
//! cross-checked against exact union-find connectivity because float
//! eigenvalues alone are fragile near zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use thiserror::Error;

/// Algebraic-connectivity threshold below which a graph is declared
/// disconnected (cross-checked with exact union-find).
pub const SPECTRAL_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid edge ({i}, {j}) for n = {n}: endpoints must be distinct and in 1..=n")]
    InvalidEdge { i: usize, j: usize, n: usize },

    #[error(
        "graph is disconnected (lambda2 = {lambda2:.3e}, union-find components = {components})"
    )]
    DisconnectedGraph { lambda2: f64, components: usize },

    #[error("cannot place {m} edges on {n} nodes: need n-1 <= m <= n(n-1)/2")]
    InfeasibleEdgeCount { n: usize, m: usize },

    #[error("edge-list parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Connected undirected communication graph with precomputed Laplacian and
/// spectral bounds.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    /// Unordered edges as 0-based (i, j) with i < j, sorted and deduplicated.
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    laplacian: DMatrix<f64>,
    lambda2: f64,
    lambda_n: f64,
}

impl Graph {
    /// Number of agents.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of edges.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as 0-based pairs (i, j), i < j, in sorted order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbor list of agent `i` (0-based).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Combinatorial Laplacian L = D - A (entries are exact integers).
    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    /// Second-smallest Laplacian eigenvalue (algebraic connectivity).
    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    /// Largest Laplacian eigenvalue.
    pub fn lambda_n(&self) -> f64 {
        self.lambda_n
    }

    /// Apply the Laplacian to a vector using only neighbor sums:
    /// `(Lv)_i = sum_{j in N_i} (v_i - v_j)`.
    pub fn laplacian_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for &j in &self.neighbors[i] {
                acc += v[i] - v[j];
            }
            out[i] = acc;
        }
        out
    }

    /// Serialize as edge-list text: first line `n m`, then one `i j` line per
    /// edge (1-based).
    pub fn to_edge_list_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.n, self.edges.len());
        for &(i, j) in &self.edges {
            let _ = writeln!(s, "{} {}", i + 1, j + 1);
        }
        s
    }

    /// Parse the edge-list format written by [`Graph::to_edge_list_string`].
    pub fn from_edge_list_str(text: &str) -> Result<Graph, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (line_no, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            reason: "empty file".into(),
        })?;
        let mut parts = header.split_whitespace();
        let n: usize = parse_field(parts.next(), line_no, "n")?;
        let m: usize = parse_field(parts.next(), line_no, "m")?;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (line_no, line) = lines.next().ok_or(GraphError::Parse {
                line: line_no,
                reason: format!("expected {m} edge lines"),
            })?;
            let mut parts = line.split_whitespace();
            let i: usize = parse_field(parts.next(), line_no, "i")?;
            let j: usize = parse_field(parts.next(), line_no, "j")?;
            edges.push((i, j));
        }
        build_graph(n, &edges)
    }
}

fn parse_field<T: std::str::FromStr>(
    tok: Option<&str>,
    line: usize,
    name: &str,
) -> Result<T, GraphError> {
    tok.ok_or_else(|| GraphError::Parse {
        line,
        reason: format!("missing field {name}"),
    })?
    .parse()
    .map_err(|_| GraphError::Parse {
        line,
        reason: format!("invalid field {name}"),
    })
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

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }

    fn components(&mut self) -> usize {
        let n = self.parent.len();
        (0..n).filter(|&i| self.find(i) == i).count()
    }
}

/// Build a graph from 1-based edge pairs, validating connectivity.
///
/// Duplicate edges (in either orientation) are deduplicated. Fails with
/// [`GraphError::InvalidEdge`] on self-loops or out-of-range endpoints and
/// with [`GraphError::DisconnectedGraph`] when the result violates the
/// connectivity requirement.
pub fn build_graph(n: usize, edge_list: &[(usize, usize)]) -> Result<Graph, GraphError> {
    let mut set = BTreeSet::new();
    for &(i, j) in edge_list {
        if i == j || i < 1 || j < 1 || i > n || j > n {
            return Err(GraphError::InvalidEdge { i, j, n });
        }
        let (a, b) = (i - 1, j - 1);
        set.insert((a.min(b), a.max(b)));
    }
    let edges: Vec<(usize, usize)> = set.into_iter().collect();

    let mut neighbors = vec![Vec::new(); n];
    let mut laplacian = DMatrix::zeros(n, n);
    let mut uf = UnionFind::new(n);
    for &(i, j) in &edges {
        neighbors[i].push(j);
        neighbors[j].push(i);
        laplacian[(i, j)] = -1.0;
        laplacian[(j, i)] = -1.0;
        laplacian[(i, i)] += 1.0;
        laplacian[(j, j)] += 1.0;
        uf.union(i, j);
    }

    let eigs = sorted_eigenvalues(&laplacian);
    let lambda2 = if n >= 2 { eigs[1] } else { 0.0 };
    let lambda_n = eigs[n - 1];
    let components = uf.components();
    if components != 1 || lambda2 <= SPECTRAL_TOL {
        return Err(GraphError::DisconnectedGraph {
            lambda2,
            components,
        });
    }

    Ok(Graph {
        n,
        edges,
        neighbors,
        laplacian,
        lambda2,
        lambda_n,
    })
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

/// Generate a connected graph with exactly `m` edges, deterministically for
/// a fixed seed: a uniform random spanning tree from a random Prüfer
/// sequence, plus extra edges sampled uniformly from the complement.
pub fn random_connected_graph(n: usize, m: usize, seed: u64) -> Result<Graph, GraphError> {
    if n < 1 || m + 1 < n || m > n * (n - 1) / 2 {
        return Err(GraphError::InfeasibleEdgeCount { n, m });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut edges: BTreeSet<(usize, usize)> = prufer_tree(n, &mut rng).into_iter().collect();

    let extra = m - (n - 1);
    if extra > 0 {
        let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(n * (n - 1) / 2 - edges.len());
        for i in 0..n {
            for j in (i + 1)..n {
                if !edges.contains(&(i, j)) {
                    candidates.push((i, j));
                }
            }
        }
        // Partial Fisher-Yates: the first `extra` slots end up a uniform
        // sample without replacement.
        for k in 0..extra {
            let pick = rng.gen_range(k..candidates.len());
            candidates.swap(k, pick);
            edges.insert(candidates[k]);
        }
    }

    let one_based: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (i + 1, j + 1)).collect();
    build_graph(n, &one_based)
}

/// Uniform random labeled tree on `n` nodes via a random Prüfer sequence.
fn prufer_tree(n: usize, rng: &mut ChaCha12Rng) -> Vec<(usize, usize)> {
    if n == 1 {
        return Vec::new();
    }
    if n == 2 {
        return vec![(0, 1)];
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.gen_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &v in &seq {
        degree[v] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    // Min-leaf extraction; a scan is fine at desk scale.
    let mut used = vec![false; n];
    for &v in &seq {
        let leaf = (0..n).find(|&u| degree[u] == 1 && !used[u]).unwrap();
        used[leaf] = true;
        degree[v] -= 1;
        edges.push((leaf.min(v), leaf.max(v)));
    }
    let mut last = (0..n).filter(|&u| degree[u] == 1 && !used[u]);
    let (a, b) = (last.next().unwrap(), last.next().unwrap());
    edges.push((a.min(b), a.max(b)));
    edges
}

/// Mixing matrix `W = I_{nd} - (1/lambda_n)(L (x) I_d)`.
///
/// W is symmetric with eigenvalues in `[0, 1]`; eigenvalue 1 is attained
/// exactly on the agreement subspace `{1_n (x) v : v in R^d}`.
pub fn mixing_matrix(g: &Graph, d: usize) -> DMatrix<f64> {
    assert!(d >= 1, "outer dimension must be at least 1");
    let n = g.n();
    let mut w = DMatrix::identity(n * d, n * d);
    let scale = 1.0 / g.lambda_n();
    for i in 0..n {
        for j in 0..n {
            let lij = g.laplacian[(i, j)];
            if lij != 0.0 {
                for k in 0..d {
                    w[(i * d + k, j * d + k)] -= scale * lij;
                }
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn k2_spectrum() {
        let g = build_graph(2, &[(1, 2)]).unwrap();
        assert_eq!(
            g.laplacian(),
            &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
        assert_relative_eq!(g.lambda2(), 2.0, max_relative = 1e-12);
        assert_relative_eq!(g.lambda_n(), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn path3_spectrum() {
        let g = build_graph(3, &[(1, 2), (2, 3)]).unwrap();
        assert_relative_eq!(g.lambda2(), 1.0, max_relative = 1e-10);
        assert_relative_eq!(g.lambda_n(), 3.0, max_relative = 1e-10);
    }

    #[test]
    fn isolated_node_is_disconnected() {
        match build_graph(3, &[(1, 2)]) {
            Err(GraphError::DisconnectedGraph { components, .. }) => assert_eq!(components, 2),
            other => panic!("expected DisconnectedGraph, got {other:?}"),
        }
    }

    #[test]
    fn invalid_edges_rejected() {
        assert!(matches!(
            build_graph(3, &[(1, 1)]),
            Err(GraphError::InvalidEdge { .. })
        ));
        assert!(matches!(
            build_graph(3, &[(0, 2)]),
            Err(GraphError::InvalidEdge { .. })
        ));
        assert!(matches!(
            build_graph(3, &[(1, 4)]),
            Err(GraphError::InvalidEdge { .. })
        ));
    }

    #[test]
    fn duplicate_edges_deduplicated() {
        let g = build_graph(2, &[(1, 2), (2, 1), (1, 2)]).unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn tree_generation_is_connected() {
        let g = random_connected_graph(4, 3, 7).unwrap();
        assert_eq!(g.edge_count(), 3);
        assert!(g.lambda2() > 0.0);
    }

    #[test]
    fn paper_size_graph() {
        let g = random_connected_graph(40, 120, 1).unwrap();
        assert_eq!(g.n(), 40);
        assert_eq!(g.edge_count(), 120);
        assert!(g.lambda2() > SPECTRAL_TOL);
    }

    #[test]
    fn infeasible_edge_count() {
        assert!(matches!(
            random_connected_graph(3, 1, 0),
            Err(GraphError::InfeasibleEdgeCount { .. })
        ));
        assert!(matches!(
            random_connected_graph(3, 4, 0),
            Err(GraphError::InfeasibleEdgeCount { .. })
        ));
    }

    #[test]
    fn reproducible_generation() {
        let a = random_connected_graph(12, 25, 99).unwrap();
        let b = random_connected_graph(12, 25, 99).unwrap();
        assert_eq!(a.edges(), b.edges());
        let c = random_connected_graph(12, 25, 100).unwrap();
        assert!(a.edges() != c.edges() || a.edge_count() == c.edge_count());
    }

    #[test]
    fn mixing_matrix_k2() {
        let g = build_graph(2, &[(1, 2)]).unwrap();
        let w = mixing_matrix(&g, 1);
        assert_eq!(w, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]));

        let w2 = mixing_matrix(&g, 2);
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.5, 0.0, 0.5, 0.0, //
                0.0, 0.5, 0.0, 0.5, //
                0.5, 0.0, 0.5, 0.0, //
                0.0, 0.5, 0.0, 0.5,
            ],
        );
        assert_eq!(w2, expected);
    }

    #[test]
    fn mixing_matrix_path3_rows_and_spectrum() {
        let g = build_graph(3, &[(1, 2), (2, 3)]).unwrap();
        let w = mixing_matrix(&g, 1);
        for i in 0..3 {
            assert_relative_eq!(w.row(i).sum(), 1.0, epsilon = 1e-12);
        }
        let mut eigs: Vec<f64> = w.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(eigs[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(eigs[2], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn edge_list_round_trip() {
        let g = random_connected_graph(9, 14, 3).unwrap();
        let text = g.to_edge_list_string();
        let h = Graph::from_edge_list_str(&text).unwrap();
        assert_eq!(g.edges(), h.edges());
        assert_eq!(g.n(), h.n());
    }

    #[test]
    fn laplacian_annihilates_ones() {
        for seed in 0..5 {
            let g = random_connected_graph(17, 40, seed).unwrap();
            let ones = DVector::from_element(17, 1.0);
            let lv = g.laplacian() * &ones;
            assert_eq!(lv.norm(), 0.0);
            assert_eq!(g.laplacian_apply(&ones).norm(), 0.0);
        }
    }
}
