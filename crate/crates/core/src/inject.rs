//! Labeled outlier injection.
//!
//! Both injectors pick `⌈ratio·n⌉` nodes uniformly and label exactly those
//! as anomalies. Node selection and every random draw depend only on `n` and
//! the seed, never on graph contents, so injecting the same config into a
//! factual graph and its interventional twins plants the same outliers.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphdata::{Graph, GraphError};

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("invalid injection config: {0}")]
    Config(String),
    #[error("graph already carries anomaly labels")]
    AlreadyLabeled,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierKind {
    Structural,
    Contextual,
}

impl OutlierKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Structural => "structural",
            Self::Contextual => "contextual",
        }
    }
}

impl std::str::FromStr for OutlierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structural" => Ok(Self::Structural),
            "contextual" => Ok(Self::Contextual),
            other => Err(format!("unknown outlier type {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectConfig {
    pub outlier_ratio: f64,
    pub group_size: usize,
    pub edge_drop_prob: f64,
    pub contextual_pool_k: usize,
    pub seed: u64,
}

impl Default for InjectConfig {
    fn default() -> Self {
        Self {
            outlier_ratio: 0.05,
            group_size: 15,
            edge_drop_prob: 0.2,
            contextual_pool_k: 50,
            seed: 0,
        }
    }
}

impl InjectConfig {
    pub fn validate(&self) -> Result<(), InjectError> {
        let bad = |m: String| Err(InjectError::Config(m));
        if !(self.outlier_ratio > 0.0 && self.outlier_ratio < 1.0) {
            return bad(format!("outlier_ratio {} must lie in (0, 1)", self.outlier_ratio));
        }
        if self.group_size < 2 {
            return bad(format!("group_size {} must be at least 2", self.group_size));
        }
        if !(0.0..1.0).contains(&self.edge_drop_prob) {
            return bad(format!("edge_drop_prob {} must lie in [0, 1)", self.edge_drop_prob));
        }
        if self.contextual_pool_k == 0 {
            return bad("contextual_pool_k must be positive".into());
        }
        Ok(())
    }

    /// Number of outliers planted in an `n`-node graph.
    pub fn outlier_count(&self, n: usize) -> usize {
        // the epsilon keeps products like 0.05·2000 from rounding up to 101
        (self.outlier_ratio * n as f64 - 1e-9).ceil() as usize
    }
}

fn check(g: &Graph, cfg: &InjectConfig) -> Result<usize, InjectError> {
    cfg.validate()?;
    if g.labels().is_some_and(|y| y.contains(&1)) {
        return Err(InjectError::AlreadyLabeled);
    }
    let k = cfg.outlier_count(g.n_nodes());
    if k < 2 {
        return Err(InjectError::Config(format!(
            "ratio {} on {} nodes yields {k} outliers; need at least 2",
            cfg.outlier_ratio,
            g.n_nodes()
        )));
    }
    Ok(k)
}

fn labels_for(n: usize, selected: &[usize]) -> Vec<u8> {
    let mut y = vec![0u8; n];
    for &i in selected {
        y[i] = 1;
    }
    y
}

/// Splits the selected nodes into consecutive groups of `size`; a trailing
/// singleton joins the previous group.
pub fn partition_groups(selected: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = selected.chunks(size).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let last = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(last);
    }
    groups
}

/// Plants dense groups: all within-group pairs are linked, then each newly
/// planted pair is dropped with `edge_drop_prob`. Features are untouched.
pub fn inject_structural(g: &Graph, cfg: &InjectConfig) -> Result<Graph, InjectError> {
    let k = check(g, cfg)?;
    let n = g.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let selected = index::sample(&mut rng, n, k).into_vec();
    let mut adj = g.adjacency().clone();
    for group in partition_groups(&selected, cfg.group_size) {
        for (a, &u) in group.iter().enumerate() {
            for &v in &group[a + 1..] {
                // one draw per pair regardless of existing edges keeps the
                // stream aligned across graphs with different structure
                let keep = rng.random::<f64>() >= cfg.edge_drop_prob;
                if keep {
                    adj.add_edge(u, v);
                }
            }
        }
    }
    let labels = labels_for(n, &selected);
    Ok(g.clone().with_adjacency(adj)?.with_labels(Some(labels))?)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Replaces each selected node's features with those of the farthest node
/// (Euclidean) among `contextual_pool_k` uniformly drawn candidates. The
/// sensitive column keeps the node's own value; structure is untouched.
pub fn inject_contextual(g: &Graph, cfg: &InjectConfig) -> Result<Graph, InjectError> {
    let k = check(g, cfg)?;
    let n = g.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let selected = index::sample(&mut rng, n, k).into_vec();
    let original = g.features();
    let mut features = original.clone();
    let pool = cfg.contextual_pool_k.min(n);
    for &i in &selected {
        let candidates = index::sample(&mut rng, n, pool);
        let xi = original.row(i);
        let mut best = candidates.index(0);
        let mut best_d = sq_dist(xi, original.row(best));
        for c in candidates.iter().skip(1) {
            let d = sq_dist(xi, original.row(c));
            if d > best_d {
                best = c;
                best_d = d;
            }
        }
        features.row_mut(i).copy_from_slice(original.row(best));
        if let Some(col) = g.sensitive_col() {
            features.set(i, col, original.get(i, col));
        }
    }
    let labels = labels_for(n, &selected);
    Ok(g.clone().with_features(features)?.with_labels(Some(labels))?)
}

pub fn inject(g: &Graph, kind: OutlierKind, cfg: &InjectConfig) -> Result<Graph, InjectError> {
    match kind {
        OutlierKind::Structural => inject_structural(g, cfg),
        OutlierKind::Contextual => inject_contextual(g, cfg),
    }
}
