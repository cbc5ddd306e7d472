//! Attributed undirected graphs with a binary sensitive attribute.

mod io;

pub use io::{load_dataset, load_graph, save_dataset, save_graph, DatasetMeta};

use std::path::PathBuf;

use thiserror::Error;

use crate::diffcore::{CsrMatrix, Tensor};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Format { file: String, line: usize, msg: String },
    #[error("invalid graph: {0}")]
    Invariant(String),
    #[error("meta.json: {0}")]
    Meta(String),
}

/// Symmetric simple adjacency stored as sorted neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Builds from undirected pairs; self-loops are dropped and repeated
    /// pairs collapse to one edge.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        let mut adj = Self::empty(n);
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::Invariant(format!("edge ({u},{v}) out of range for {n} nodes")));
            }
            adj.add_edge(u, v);
        }
        Ok(adj)
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Inserts `{u, v}`; returns false for self-loops and existing edges.
    pub fn add_edge(&mut self, u: usize, v: usize) -> bool {
        if u == v {
            return false;
        }
        match self.neighbors[u].binary_search(&v) {
            Ok(_) => false,
            Err(pos) => {
                self.neighbors[u].insert(pos, v);
                let pos = self.neighbors[v].binary_search(&u).unwrap_err();
                self.neighbors[v].insert(pos, u);
                true
            }
        }
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors[u].len()
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.n_nodes();
        let mut t = Tensor::zeros(&[n, n]);
        for (u, ns) in self.neighbors.iter().enumerate() {
            for &v in ns {
                t.set(u, v, 1.0);
            }
        }
        t
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let edges = self.edges().into_iter().map(|(u, v)| (perm[u], perm[v]));
        Self::from_edges(self.n_nodes(), edges).expect("permutation preserves range")
    }
}

/// Node features, structure, sensitive attribute and optional anomaly labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    features: Tensor,
    adjacency: Adjacency,
    sensitive: Vec<u8>,
    labels: Option<Vec<u8>>,
    sensitive_col: Option<usize>,
}

impl Graph {
    pub fn new(
        features: Tensor,
        adjacency: Adjacency,
        sensitive: Vec<u8>,
        labels: Option<Vec<u8>>,
        sensitive_col: Option<usize>,
    ) -> Result<Self, GraphError> {
        let g = Self {
            features,
            adjacency,
            sensitive,
            labels,
            sensitive_col,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<(), GraphError> {
        let n = self.sensitive.len();
        let bad = |msg: String| Err(GraphError::Invariant(msg));
        if self.features.shape().len() != 2 || self.features.rows() != n {
            return bad(format!("features shape {:?} does not match {n} nodes", self.features.shape()));
        }
        if self.adjacency.n_nodes() != n {
            return bad(format!("adjacency has {} nodes, expected {n}", self.adjacency.n_nodes()));
        }
        if let Some(i) = self.sensitive.iter().position(|&s| s > 1) {
            return bad(format!("sensitive value {} at node {i} is not binary", self.sensitive[i]));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return bad(format!("{} labels for {n} nodes", labels.len()));
            }
            if let Some(i) = labels.iter().position(|&y| y > 1) {
                return bad(format!("label {} at node {i} is not binary", labels[i]));
            }
        }
        if let Some(col) = self.sensitive_col {
            if col >= self.features.cols() {
                return bad(format!("sensitive column {col} out of range for {} features", self.features.cols()));
            }
            for (i, &s) in self.sensitive.iter().enumerate() {
                if self.features.get(i, col) != f64::from(s) {
                    return bad(format!("feature column {col} disagrees with sensitive attribute at node {i}"));
                }
            }
        }
        if !self.features.is_finite() {
            return bad("non-finite feature value".into());
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.sensitive.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn sensitive(&self) -> &[u8] {
        &self.sensitive
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn sensitive_col(&self) -> Option<usize> {
        self.sensitive_col
    }

    pub fn with_labels(mut self, labels: Option<Vec<u8>>) -> Result<Self, GraphError> {
        self.labels = labels;
        self.validate()?;
        Ok(self)
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self, GraphError> {
        self.features = features;
        self.validate()?;
        Ok(self)
    }

    pub fn with_adjacency(mut self, adjacency: Adjacency) -> Result<Self, GraphError> {
        self.adjacency = adjacency;
        self.validate()?;
        Ok(self)
    }

    /// Relabels nodes so node `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes();
        let d = self.n_features();
        let mut features = Tensor::zeros(&[n, d]);
        let mut sensitive = vec![0; n];
        let mut labels = self.labels.as_ref().map(|_| vec![0; n]);
        for i in 0..n {
            features.row_mut(perm[i]).copy_from_slice(self.features.row(i));
            sensitive[perm[i]] = self.sensitive[i];
            if let (Some(dst), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                dst[perm[i]] = src[i];
            }
        }
        Self {
            features,
            adjacency: self.adjacency.permuted(perm),
            sensitive,
            labels,
            sensitive_col: self.sensitive_col,
        }
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn normalize_adjacency(adj: &Adjacency) -> CsrMatrix {
    let n = adj.n_nodes();
    let inv_sqrt: Vec<f64> = (0..n).map(|u| 1.0 / ((adj.degree(u) + 1) as f64).sqrt()).collect();
    let rows = (0..n)
        .map(|u| {
            std::iter::once(u)
                .chain(adj.neighbors(u).iter().copied())
                .map(|v| (v, inv_sqrt[u] * inv_sqrt[v]))
                .collect()
        })
        .collect();
    CsrMatrix::from_rows(n, rows)
}

/// Intervenes on the sensitive attribute: `S ← 1 − S` for every node, with
/// the sensitive feature column (if any) rewritten to match. All other
/// features and the structure are untouched.
pub fn flip_sensitive(g: &Graph) -> Graph {
    let sensitive: Vec<u8> = g.sensitive.iter().map(|&s| 1 - s).collect();
    let mut features = g.features.clone();
    if let Some(col) = g.sensitive_col {
        for (i, &s) in sensitive.iter().enumerate() {
            features.set(i, col, f64::from(s));
        }
    }
    Graph {
        features,
        adjacency: g.adjacency.clone(),
        sensitive,
        labels: g.labels.clone(),
        sensitive_col: g.sensitive_col,
    }
}

/// Replaces the sensitive attribute of every node with `value` (the
/// population-wide intervention `S ← value`).
pub fn set_sensitive(g: &Graph, value: u8) -> Graph {
    let mut out = g.clone();
    out.sensitive = vec![value; g.n_nodes()];
    if let Some(col) = g.sensitive_col {
        for i in 0..g.n_nodes() {
            out.features.set(i, col, f64::from(value));
        }
    }
    out
}
