//! d-separation on DAGs and the causal model behind the detector.
//!
//! The detector's causal model has the sensitive attribute `S` feeding an
//! environment variable `E`, a content variable `C` independent of `S`, the
//! graph `G` generated from both, and latent representations `U_c`, `U_e`
//! that drive `C`, `E`, and the anomaly label `Y`. Conditioning on both
//! latents blocks every path from `S` to `Y`, which is what licenses scoring
//! anomalies from latents without reference to `S`.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CausalError {
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("duplicate node {0:?}")]
    DuplicateNode(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("self edge on {0:?}")]
    SelfEdge(String),
    #[error("graph has a directed cycle")]
    Cycle,
    #[error("query sets overlap at {0:?}")]
    Overlap(String),
}

/// Directed acyclic graph over named variables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dag {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl Dag {
    pub fn new(nodes: &[&str], edges: &[(&str, &str)]) -> Result<Self, CausalError> {
        let mut index = HashMap::new();
        for (i, &name) in nodes.iter().enumerate() {
            if index.insert(name.to_string(), i).is_some() {
                return Err(CausalError::DuplicateNode(name.into()));
            }
        }
        let n = nodes.len();
        let mut dag = Self {
            names: nodes.iter().map(|s| s.to_string()).collect(),
            index,
            parents: vec![Vec::new(); n],
            children: vec![Vec::new(); n],
        };
        for &(from, to) in edges {
            let (u, v) = (dag.id(from)?, dag.id(to)?);
            if u == v {
                return Err(CausalError::SelfEdge(from.into()));
            }
            if dag.children[u].contains(&v) {
                return Err(CausalError::DuplicateEdge(from.into(), to.into()));
            }
            dag.children[u].push(v);
            dag.parents[v].push(u);
        }
        dag.topological_order()?;
        Ok(dag)
    }

    /// Builds from index pairs; node `i` is named `"v{i}"`.
    pub fn from_indices(n: usize, edges: &[(usize, usize)]) -> Result<Self, CausalError> {
        let names: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let named: Vec<(&str, &str)> = edges.iter().map(|&(u, v)| (refs[u], refs[v])).collect();
        Self::new(&refs, &named)
    }

    fn id(&self, name: &str) -> Result<usize, CausalError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| CausalError::UnknownNode(name.into()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_edges(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self, name: &str) -> Result<Vec<&str>, CausalError> {
        Ok(self.parents[self.id(name)?].iter().map(|&p| self.names[p].as_str()).collect())
    }

    pub fn edges(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<(&str, &str)> = self
            .children
            .iter()
            .enumerate()
            .flat_map(|(u, cs)| cs.iter().map(move |&v| (u, v)))
            .map(|(u, v)| (self.names[u].as_str(), self.names[v].as_str()))
            .collect();
        out.sort_unstable();
        out
    }

    /// Kahn's algorithm; fails on a cycle.
    pub fn topological_order(&self) -> Result<Vec<&str>, CausalError> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(u) = queue.pop_front() {
            order.push(self.names[u].as_str());
            for &c in &self.children[u] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if order.len() == self.len() {
            Ok(order)
        } else {
            Err(CausalError::Cycle)
        }
    }

    fn ids(&self, names: &[&str]) -> Result<HashSet<usize>, CausalError> {
        names.iter().map(|n| self.id(n)).collect()
    }

    /// Whether every path between `xs` and `ys` is blocked by `zs`.
    ///
    /// Reachability in the style of Bayes-ball: a trail may pass a
    /// non-collider only if it is unobserved, and a collider only if it or
    /// one of its descendants is observed.
    pub fn d_separated(&self, xs: &[&str], ys: &[&str], zs: &[&str]) -> Result<bool, CausalError> {
        let (x, y, z) = (self.ids(xs)?, self.ids(ys)?, self.ids(zs)?);
        for (a, b) in [(&x, &y), (&x, &z), (&y, &z)] {
            if let Some(&i) = a.intersection(b).next() {
                return Err(CausalError::Overlap(self.names[i].clone()));
            }
        }

        // nodes that are in Z or have a descendant in Z
        let mut z_anc = vec![false; self.len()];
        let mut stack: Vec<usize> = z.iter().copied().collect();
        while let Some(u) = stack.pop() {
            if !z_anc[u] {
                z_anc[u] = true;
                stack.extend(&self.parents[u]);
            }
        }

        // (node, arrived_from_child)
        let mut seen = HashSet::new();
        let mut queue: VecDeque<(usize, bool)> = x.iter().map(|&s| (s, true)).collect();
        while let Some((u, up)) = queue.pop_front() {
            if !seen.insert((u, up)) {
                continue;
            }
            let observed = z.contains(&u);
            if !observed && y.contains(&u) {
                return Ok(false);
            }
            if up {
                if !observed {
                    queue.extend(self.parents[u].iter().map(|&p| (p, true)));
                    queue.extend(self.children[u].iter().map(|&c| (c, false)));
                }
            } else {
                if !observed {
                    queue.extend(self.children[u].iter().map(|&c| (c, false)));
                }
                if z_anc[u] {
                    queue.extend(self.parents[u].iter().map(|&p| (p, true)));
                }
            }
        }
        Ok(true)
    }
}

/// The fair-detection causal model: seven variables, seven edges.
pub fn decaf_scm() -> Dag {
    Dag::new(
        &["S", "E", "C", "G", "U_c", "U_e", "Y"],
        &[
            ("S", "E"),
            ("U_e", "E"),
            ("U_e", "Y"),
            ("U_c", "C"),
            ("U_c", "Y"),
            ("C", "G"),
            ("E", "G"),
        ],
    )
    .expect("static DAG is valid")
}

/// Illustrative conventional model where `S` reaches `Y` through `G`.
pub fn baseline_scm() -> Dag {
    Dag::new(&["S", "G", "Y"], &[("S", "G"), ("G", "Y")]).expect("static DAG is valid")
}

/// Independence checks on [`decaf_scm`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Lemma1Report {
    /// `S ⊥ Y | {U_c, U_e}`.
    pub s_y_given_latents: bool,
    /// `U_c ⊥ U_e` unconditionally.
    pub latents_independent: bool,
    /// `S ⊥ Y` with nothing observed. Every `S`–`Y` trail passes a collider
    /// (`E` or `G`), so this is separated as well.
    pub s_y_marginal: bool,
    /// `S ⊥ Y | {G}`: observing the collider `G` opens `S → E → G ← C ← U_c → Y`.
    pub s_y_given_graph: bool,
    /// `S ⊥ Y | {E}`: observing `E` opens `S → E ← U_e → Y`.
    pub s_y_given_environment: bool,
    /// Both claimed independences hold.
    pub holds: bool,
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
}

pub fn verify_lemma1() -> Lemma1Report {
    let dag = decaf_scm();
    let q = |x: &str, y: &str, z: &[&str]| dag.d_separated(&[x], &[y], z).expect("known nodes");
    let s_y_given_latents = q("S", "Y", &["U_c", "U_e"]);
    let latents_independent = q("U_c", "U_e", &[]);
    Lemma1Report {
        s_y_given_latents,
        latents_independent,
        s_y_marginal: q("S", "Y", &[]),
        s_y_given_graph: q("S", "Y", &["G"]),
        s_y_given_environment: q("S", "Y", &["E"]),
        holds: s_y_given_latents && latents_independent,
        nodes: dag.names().to_vec(),
        edges: dag.edges().into_iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
    }
}
