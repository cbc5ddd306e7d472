//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the algorithm under test beyond plain data access.

#![allow(dead_code)]

use decaf_core::diffcore::Tensor;
use decaf_core::graphdata::{Adjacency, Graph};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// d-separation by enumerating every simple path of the skeleton.
/// `edges` are directed `(parent, child)` pairs over nodes `0..n`.
pub fn dsep_bruteforce(n: usize, edges: &[(usize, usize)], x: usize, y: usize, z: &[usize]) -> bool {
    let mut children = vec![Vec::new(); n];
    let mut nbrs = vec![Vec::new(); n];
    for &(u, v) in edges {
        children[u].push(v);
        nbrs[u].push(v);
        nbrs[v].push(u);
    }
    let has_edge = |u: usize, v: usize| edges.contains(&(u, v));
    // descendants, including the node itself
    let desc = |start: usize| {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            if !seen[u] {
                seen[u] = true;
                stack.extend(children[u].iter().copied());
            }
        }
        seen
    };
    let active = |path: &[usize]| {
        for k in 1..path.len() - 1 {
            let (a, b, c) = (path[k - 1], path[k], path[k + 1]);
            let collider = has_edge(a, b) && has_edge(c, b);
            if collider {
                let d = desc(b);
                if !z.iter().any(|&w| d[w]) {
                    return false;
                }
            } else if z.contains(&b) {
                return false;
            }
        }
        true
    };
    let mut path = vec![x];
    let mut on = vec![false; n];
    on[x] = true;
    fn walk(
        u: usize,
        y: usize,
        nbrs: &[Vec<usize>],
        path: &mut Vec<usize>,
        on: &mut [bool],
        active: &dyn Fn(&[usize]) -> bool,
    ) -> bool {
        if u == y {
            return active(path);
        }
        for &v in &nbrs[u] {
            if on[v] {
                continue;
            }
            on[v] = true;
            path.push(v);
            let found = walk(v, y, nbrs, path, on, active);
            path.pop();
            on[v] = false;
            if found {
                return true;
            }
        }
        false
    }
    !walk(x, y, &nbrs, &mut path, &mut on, &active)
}

/// Random DAG: edges follow a shuffled order, each present with `p`.
pub fn random_dag(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((order[i], order[j]));
            }
        }
    }
    edges
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by direct pair counting.
pub fn auroc_pairs(scores: &[f64], y: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// `P(ŷ=1 | mask)` by counting.
pub fn rate(pred: &[u8], mask: impl Fn(usize) -> bool) -> f64 {
    let mut hit = 0usize;
    let mut tot = 0usize;
    for (i, &p) in pred.iter().enumerate() {
        if mask(i) {
            tot += 1;
            hit += usize::from(p == 1);
        }
    }
    hit as f64 / tot as f64
}

/// Pearson correlation from the textbook sums formula.
pub fn pearson_sums(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Random small attributed graph: `d` free columns then the sensitive column.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, p_edge: f64) -> Graph {
    let s: Vec<u8> = (0..n).map(|i| if i < 2 { i as u8 } else { rng.random_range(0..2) }).collect();
    let mut vals = Vec::with_capacity(n * (d + 1));
    for &si in &s {
        for _ in 0..d {
            vals.push(rng.random_range(-1.0..1.0));
        }
        vals.push(f64::from(si));
    }
    let mut adj = Adjacency::empty(n);
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p_edge {
                adj.add_edge(u, v);
            }
        }
    }
    Graph::new(Tensor::matrix(n, d + 1, vals).unwrap(), adj, s, None, Some(d)).unwrap()
}
