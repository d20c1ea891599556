//! Communication graphs and doubly stochastic mixing matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const ER_MAX_ATTEMPTS: usize = 1000;
/// Row and column sums of a mixing matrix must be within this of one.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Undirected simple graph; each edge is stored once as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a connected graph from an edge list.
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let g = Self::new_unchecked(n_nodes, edges)?;
        if !g.is_connected() {
            return Err(Error::Assumption("communication graph is not connected".into()));
        }
        Ok(g)
    }

    fn new_unchecked(
        n_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j || i >= n_nodes || j >= n_nodes {
                return Err(Error::InvalidArgument(format!(
                    "invalid edge ({i}, {j}) for {n_nodes} nodes"
                )));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self {
            n_nodes,
            edges: set,
        })
    }

    pub fn ring(n: usize) -> Result<Self> {
        Self::new(n, (0..n).filter(|_| n > 1).map(|i| (i, (i + 1) % n)))
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    /// `G(n, p)`, redrawn on a fresh stream of the same seed until connected.
    pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "edge probability must lie in (0, 1], got {p}"
            )));
        }
        for attempt in 0..ER_MAX_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(attempt as u64);
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((i, j));
                    }
                }
            }
            let g = Self::new_unchecked(n, edges)?;
            if g.is_connected() {
                return Ok(g);
            }
        }
        Err(Error::Exhausted {
            what: format!("connected Erdos-Renyi graph G({n}, {p})"),
            attempts: ER_MAX_ATTEMPTS,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.neighbours();
        let mut seen = vec![false; self.n_nodes];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n_nodes
    }

    /// Combinatorial Laplacian `D - Adj`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_nodes;
        let mut l = DMatrix::zeros(n, n);
        for &(i, j) in &self.edges {
            l[(i, j)] -= 1.0;
            l[(j, i)] -= 1.0;
            l[(i, i)] += 1.0;
            l[(j, j)] += 1.0;
        }
        l
    }

    /// Edge list with a `# nodes N` header and one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# nodes {}\n", self.n_nodes);
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut n_nodes = None;
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(n) = rest.trim().strip_prefix("nodes") {
                    n_nodes = Some(n.trim().parse::<usize>().map_err(|e| {
                        Error::Parse(format!("line {}: bad node count: {e}", lineno + 1))
                    })?);
                }
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            match parts.as_slice() {
                [i, j] => edges.push((parse(i)?, parse(j)?)),
                _ => {
                    return Err(Error::Parse(format!(
                        "line {}: expected `i j`",
                        lineno + 1
                    )))
                }
            }
        }
        let n = n_nodes.ok_or_else(|| Error::Parse("missing `# nodes N` header".into()))?;
        Self::new(n, edges)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    pub fn read_edge_list(path: &Path) -> Result<Self> {
        Self::from_edge_list(&std::fs::read_to_string(path)?)
    }
}

/// Doubly stochastic mixing matrix with its second-largest singular value.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    sigma2: f64,
}

impl MixingMatrix {
    /// Validates a nonnegative doubly stochastic matrix and computes `sigma2`.
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        if n == 0 || w.ncols() != n {
            return Err(Error::Dimension(format!(
                "mixing matrix must be square and nonempty, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "mixing matrix entries must be finite and nonnegative".into(),
            ));
        }
        for i in 0..n {
            let r = w.row(i).sum();
            let c = w.column(i).sum();
            if (r - 1.0).abs() > STOCHASTIC_TOL || (c - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidArgument(format!(
                    "row/column {i} of W sums to {r}/{c}"
                )));
            }
        }
        let sigma2 = if n == 1 {
            0.0
        } else {
            let mut sv: Vec<f64> = w.singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            sv[1]
        };
        Ok(Self { w, sigma2 })
    }

    /// `W = I - L / (delta_max + 1)`.
    pub fn laplacian(graph: &Graph) -> Result<Self> {
        if !graph.is_connected() {
            return Err(Error::Assumption("communication graph is not connected".into()));
        }
        let n = graph.n_nodes();
        let dmax = graph.degrees().into_iter().max().unwrap_or(0) as f64;
        let w = DMatrix::identity(n, n) - graph.laplacian() / (dmax + 1.0);
        let sigma2 = if n == 1 {
            0.0
        } else {
            let mut ev: Vec<f64> = crate::linalg::sym_eigenvalues(&w)
                .into_iter()
                .map(f64::abs)
                .collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            ev[1]
        };
        let m = Self::new(w)?;
        Ok(Self { sigma2, ..m })
    }

    pub fn n_nodes(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `1 - sigma2`.
    pub fn spectral_gap(&self) -> f64 {
        1.0 - self.sigma2
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_matrix_csv(path, &self.w)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::new(crate::io::read_matrix_csv(path)?)
    }
}

/// Convenience wrapper over [`MixingMatrix::laplacian`].
pub fn laplacian_mixing(graph: &Graph) -> Result<MixingMatrix> {
    MixingMatrix::laplacian(graph)
}
