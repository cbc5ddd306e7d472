//! Dataset directory format.
//!
//! ```text
//! <dir>/meta.json      DatasetMeta as a JSON object
//! <dir>/features.csv   n rows × D columns, comma separated, %.17g, no header
//! <dir>/edges.csv      "u,v" per undirected edge, u < v, lexicographic, no header
//! <dir>/sensitive.csv  one 0/1 integer per line
//! <dir>/labels.csv     optional, one 0/1 integer per line (1 = anomaly)
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adjacency, Graph, GraphError};
use crate::diffcore::Tensor;
use crate::numfmt::fmt_g17;

/// Summary statistics stored alongside a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_attrs: usize,
    pub sensitive: String,
    pub sensitive_col: Option<usize>,
    pub outlier_type: String,
    pub outlier_ratio: f64,
    pub seed: Option<u64>,
}

impl DatasetMeta {
    /// Metadata describing `g` with default descriptive fields.
    pub fn describe(g: &Graph, name: &str) -> Self {
        Self {
            name: name.to_string(),
            n_nodes: g.n_nodes(),
            n_edges: g.adjacency().n_edges(),
            n_attrs: g.n_features(),
            sensitive: "S".into(),
            sensitive_col: g.sensitive_col(),
            outlier_type: "none".into(),
            outlier_ratio: 0.0,
            seed: None,
        }
    }

    /// Copies the structural counts from `g`, keeping descriptive fields.
    pub fn refreshed(mut self, g: &Graph) -> Self {
        self.n_nodes = g.n_nodes();
        self.n_edges = g.adjacency().n_edges();
        self.n_attrs = g.n_features();
        self.sensitive_col = g.sensitive_col();
        self
    }
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), GraphError> {
    fs::write(path, contents).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn format_err(file: &str, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Format {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_binary(file: &str, text: &str) -> Result<Vec<u8>, GraphError> {
    lines(text)
        .map(|(ln, l)| match l.parse::<i64>() {
            Ok(v @ (0 | 1)) => Ok(v as u8),
            Ok(v) => Err(GraphError::Invariant(format!("{file}:{ln}: value {v} is not binary"))),
            Err(e) => Err(format_err(file, ln, e.to_string())),
        })
        .collect()
}

/// Loads a dataset directory, checking the files against `meta.json`.
pub fn load_dataset(dir: &Path) -> Result<(Graph, DatasetMeta), GraphError> {
    let meta: DatasetMeta =
        serde_json::from_str(&read(&dir.join("meta.json"))?).map_err(|e| GraphError::Meta(e.to_string()))?;

    let text = read(&dir.join("features.csv"))?;
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (ln, line) in lines(&text) {
        let start = values.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| format_err("features.csv", ln, format!("{field:?}: {e}")))?;
            values.push(v);
        }
        let width = values.len() - start;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(format_err("features.csv", ln, format!("expected {c} columns, found {width}")))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(meta.n_attrs);
    let features = Tensor::matrix(rows, cols, values).map_err(|e| GraphError::Invariant(e.to_string()))?;

    let sensitive = parse_binary("sensitive.csv", &read(&dir.join("sensitive.csv"))?)?;
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        Some(parse_binary("labels.csv", &read(&labels_path)?)?)
    } else {
        None
    };

    let n = rows;
    let text = read(&dir.join("edges.csv"))?;
    let mut adjacency = Adjacency::empty(n);
    let mut seen = HashSet::new();
    for (ln, line) in lines(&text) {
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| format_err("edges.csv", ln, "expected two columns"))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| format_err("edges.csv", ln, format!("{s:?}: {e}")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= n || v >= n {
            return Err(format_err("edges.csv", ln, format!("node index out of range for {n} nodes")));
        }
        if u == v {
            continue;
        }
        if !seen.insert((u.min(v), u.max(v))) {
            return Err(format_err("edges.csv", ln, format!("duplicate edge {{{u},{v}}}")));
        }
        adjacency.add_edge(u, v);
    }

    let g = Graph::new(features, adjacency, sensitive, labels, meta.sensitive_col)?;
    let checks = [
        ("n_nodes", meta.n_nodes, g.n_nodes()),
        ("n_edges", meta.n_edges, g.adjacency().n_edges()),
        ("n_attrs", meta.n_attrs, g.n_features()),
    ];
    for (field, declared, actual) in checks {
        if declared != actual {
            return Err(GraphError::Meta(format!("{field} = {declared} but files contain {actual}")));
        }
    }
    Ok((g, meta))
}

pub fn load_graph(dir: &Path) -> Result<Graph, GraphError> {
    load_dataset(dir).map(|(g, _)| g)
}

/// Writes `g` to `dir` (created if missing). Counts in `meta` are replaced
/// by the graph's actual counts.
pub fn save_dataset(g: &Graph, meta: &DatasetMeta, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let meta = meta.clone().refreshed(g);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| GraphError::Meta(e.to_string()))?;
    write(&dir.join("meta.json"), &(json + "\n"))?;

    let mut out = String::new();
    for i in 0..g.n_nodes() {
        for (j, v) in g.features().row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_g17(*v));
        }
        out.push('\n');
    }
    write(&dir.join("features.csv"), &out)?;

    let mut out = String::new();
    for (u, v) in g.adjacency().edges() {
        writeln!(out, "{u},{v}").unwrap();
    }
    write(&dir.join("edges.csv"), &out)?;

    let ints = |xs: &[u8]| xs.iter().map(|x| format!("{x}\n")).collect::<String>();
    write(&dir.join("sensitive.csv"), &ints(g.sensitive()))?;
    let labels_path = dir.join("labels.csv");
    match g.labels() {
        Some(labels) => write(&labels_path, &ints(labels))?,
        None if labels_path.exists() => fs::remove_file(&labels_path).map_err(|source| GraphError::Io {
            path: labels_path.clone(),
            source,
        })?,
        None => {}
    }
    Ok(())
}

/// Writes `g` with metadata named after the directory.
pub fn save_graph(g: &Graph, dir: &Path) -> Result<(), GraphError> {
    let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("graph");
    save_dataset(g, &DatasetMeta::describe(g, name), dir)
}
